#include "selfctl/diffhead.hpp"

#include "selfctl/backbone.hpp"

#include <cmath>
#include <stdexcept>

namespace selfctl {

using nn::Graph;

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw std::invalid_argument("noise schedule needs at least one step");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw std::invalid_argument("noise schedule betas must satisfy 0 < start <= end < 1");
    NoiseSchedule s;
    double bar = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double beta = steps == 1 ? beta_start
                                       : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
        bar *= 1.0 - beta;
        s.betas_.push_back(beta);
        s.alpha_bars_.push_back(bar);
        s.timesteps_.push_back(i + 1);
    }
    return s;
}

NoiseSchedule NoiseSchedule::respaced(int steps) const {
    const int S = this->steps();
    if (steps < 1 || steps > S) throw std::invalid_argument("respaced step count must be in 1..S");
    std::vector<int> keep;
    if (steps == 1) {
        keep.push_back(S);
    } else {
        const double stride = static_cast<double>(S - 1) / static_cast<double>(steps - 1);
        for (int j = 0; j < steps; ++j) keep.push_back(1 + static_cast<int>(std::lround(j * stride)));
    }
    NoiseSchedule out;
    double prev_bar = 1.0;
    for (int t : keep) {
        const double bar = alpha_bar(t);
        out.betas_.push_back(1.0 - bar / prev_bar);
        out.alpha_bars_.push_back(bar);
        out.timesteps_.push_back(timestep(t));
        prev_bar = bar;
    }
    return out;
}

double NoiseSchedule::posterior_variance(int s) const {
    return beta(s) * (1.0 - alpha_bar(s - 1)) / (1.0 - alpha_bar(s));
}

Mat q_sample(const Mat& x0, int s, const Mat& noise, const NoiseSchedule& schedule) {
    if (s < 1 || s > schedule.steps())
        throw std::out_of_range("diffusion step " + std::to_string(s) + " outside 1.." +
                                std::to_string(schedule.steps()));
    if (x0.rows() != noise.rows() || x0.cols() != noise.cols())
        throw std::invalid_argument("q_sample: noise shape mismatch");
    const double bar = schedule.alpha_bar(s);
    return std::sqrt(bar) * x0 + std::sqrt(1.0 - bar) * noise;
}

void DenoiserConfig::validate() const {
    if (token_dim < 1 || cond_dim < 1 || hidden < 1 || blocks < 1 || time_dim < 2)
        throw std::invalid_argument("denoiser dimensions must be positive (time_dim >= 2)");
    if (time_dim % 2 != 0) throw std::invalid_argument("denoiser.time_dim must be even");
}

Mat timestep_embedding(const std::vector<int>& steps, int dim) {
    const int half = dim / 2;
    Mat out(static_cast<Eigen::Index>(steps.size()), dim);
    for (std::size_t r = 0; r < steps.size(); ++r)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / static_cast<double>(half));
            const double a = steps[r] * freq;
            out(static_cast<Eigen::Index>(r), i) = std::cos(a);
            out(static_cast<Eigen::Index>(r), half + i) = std::sin(a);
        }
    return out;
}

DiffusionHead::DiffusionHead(nn::ParameterStore& store, DenoiserConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    auto linear = [&](const std::string& name, int in, int out) {
        Linear l{&store.create(name + ".w", in, out), &store.create(name + ".b", 1, out)};
        nn::init_xavier_uniform(*l.w, rng);
        return l;
    };
    auto norm = [&](const std::string& name, int dim) {
        Norm n{&store.create(name + ".gamma", 1, dim), &store.create(name + ".beta", 1, dim)};
        nn::init_constant(*n.gamma, 1.0);
        return n;
    };
    const int h = cfg_.hidden;
    time1_ = linear("head.time1", cfg_.time_dim, h);
    time2_ = linear("head.time2", h, h);
    cond_in_ = linear("head.cond_in", cfg_.cond_dim, h);
    x_in_ = linear("head.x_in", cfg_.token_dim, h);
    for (int i = 0; i < cfg_.blocks; ++i) {
        const std::string name = "head.block." + std::to_string(i);
        Block b;
        b.norm = norm(name + ".norm", h);
        b.cond = linear(name + ".cond", h, h);
        b.fc1 = linear(name + ".fc1", h, h);
        b.fc2 = linear(name + ".fc2", h, h);
        blocks_.push_back(b);
    }
    out_norm_ = norm("head.out_norm", h);
    out_ = linear("head.out", h, cfg_.token_dim);
    // Start from eps_theta == 0.
    out_.w->value.setZero();
}

Var DiffusionHead::apply(Graph& g, const Linear& l, Var x) const {
    return nn::linear(g, x, g.param(*l.w), g.param(*l.b));
}

Var DiffusionHead::apply(Graph& g, const Norm& n, Var x) const {
    return nn::layer_norm(g, x, g.param(*n.gamma), g.param(*n.beta));
}

Var DiffusionHead::predict_noise(Graph& g, Var x_s, const std::vector<int>& steps, Var z) const {
    const Eigen::Index rows = g.value(x_s).rows();
    if (static_cast<Eigen::Index>(steps.size()) != rows || g.value(z).rows() != rows)
        throw std::invalid_argument("predict_noise: row counts of x_s, steps and z differ");

    Var t = g.constant(timestep_embedding(steps, cfg_.time_dim));
    Var c = nn::add(g, apply(g, time2_, nn::silu(g, apply(g, time1_, t))), apply(g, cond_in_, z));
    Var c_act = nn::silu(g, c);
    Var h = apply(g, x_in_, x_s);
    for (const auto& blk : blocks_) {
        Var u = nn::add(g, apply(g, blk.norm, h), apply(g, blk.cond, c_act));
        h = nn::add(g, h, apply(g, blk.fc2, nn::silu(g, apply(g, blk.fc1, u))));
    }
    return apply(g, out_, apply(g, out_norm_, h));
}

Var DiffusionHead::loss(Graph& g, const Mat& x0, Var z, const NoiseSchedule& schedule, Rng& rng,
                        int repeats) const {
    if (x0.rows() == 0) throw std::invalid_argument("diffusion loss: no positions contribute");
    if (repeats < 1) throw std::invalid_argument("diffusion loss: repeats must be >= 1");
    if (x0.rows() != g.value(z).rows()) throw std::invalid_argument("diffusion loss: x0 and z row counts differ");
    if (x0.cols() != cfg_.token_dim) throw std::invalid_argument("diffusion loss: token dimension mismatch");

    const Eigen::Index n = x0.rows() * repeats;
    std::vector<Eigen::Index> rep(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) rep[static_cast<std::size_t>(i)] = i % x0.rows();

    std::uniform_int_distribution<int> step_dist(1, schedule.steps());
    std::normal_distribution<double> normal;
    std::vector<int> steps(static_cast<std::size_t>(n));
    Mat noise(n, x0.cols());
    Mat x_s(n, x0.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const int s = step_dist(rng);
        steps[static_cast<std::size_t>(i)] = schedule.timestep(s);
        for (Eigen::Index j = 0; j < noise.cols(); ++j) noise(i, j) = normal(rng);
        const double bar = schedule.alpha_bar(s);
        x_s.row(i) = std::sqrt(bar) * x0.row(i % x0.rows()) + std::sqrt(1.0 - bar) * noise.row(i);
    }

    Var z_rep = repeats == 1 ? z : nn::gather_rows(g, z, std::move(rep));
    Var eps = predict_noise(g, g.constant(std::move(x_s)), steps, z_rep);
    Var l = nn::mean_row_sq_error(g, eps, noise);
    if (!std::isfinite(g.value(l)(0, 0))) throw NumericalError("diffusion loss is not finite");
    return l;
}

Mat DiffusionHead::sample(const Mat& z, double temperature, const NoiseSchedule& schedule, Rng& rng) const {
    if (temperature < 0.0) throw std::invalid_argument("temperature must be non-negative");
    std::normal_distribution<double> normal;
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
        return m;
    };

    Mat x = temperature * gaussian(z.rows(), cfg_.token_dim);
    for (int s = schedule.steps(); s >= 1; --s) {
        Graph g(/*record=*/false);
        std::vector<int> steps(static_cast<std::size_t>(z.rows()), schedule.timestep(s));
        Var eps = predict_noise(g, g.constant(x), steps, g.constant(z));
        const double beta = schedule.beta(s);
        const double coef = beta / std::sqrt(1.0 - schedule.alpha_bar(s));
        x = (x - coef * g.value(eps)) / std::sqrt(1.0 - beta);
        if (s > 1) x += (temperature * std::sqrt(schedule.posterior_variance(s))) * gaussian(x.rows(), x.cols());
    }
    if (!x.allFinite()) throw NumericalError("diffusion sampling produced non-finite values");
    return x;
}

} // namespace selfctl
