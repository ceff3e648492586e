#include "selfctl/nn.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace selfctl::nn {

Parameter& ParameterStore::create(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    index_.emplace(name, params_.size());
    Parameter& p = params_.emplace_back();
    p.name = name;
    p.value = Mat::Zero(rows, cols);
    p.grad = Mat::Zero(rows, cols);
    return p;
}

Parameter* ParameterStore::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

const Parameter* ParameterStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p.grad.setZero();
}

Var Graph::constant(Mat value) { return push(std::move(value), {}, nullptr); }

Var Graph::input(Mat value) {
    Var v = push(std::move(value), {}, nullptr);
    nodes_[v.id].requires_grad = record_;
    return v;
}

Var Graph::param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
    Var v = push(p.value, {}, nullptr);
    nodes_[v.id].param = &p;
    nodes_[v.id].requires_grad = record_ && param_grads_;
    param_nodes_.emplace(&p, v.id);
    return v;
}

namespace {
// Every step allocates and frees the same multi-megabyte buffers; keeping them
// on the heap instead of round-tripping through mmap saves a lot of page faults.
void tune_allocator() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        return true;
    }();
    (void)done;
#endif
}
} // namespace

Graph::Graph(bool record, bool param_grads) : record_(record), param_grads_(param_grads) { tune_allocator(); }

Mat& Graph::grad_buffer(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

Var Graph::push(Mat value, std::initializer_list<Var> parents, Backward fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && needs;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::push(Mat value, const std::vector<Var>& parents, Backward fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].requires_grad;
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && needs;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Graph::backward(Var loss) {
    if (value(loss).size() != 1) throw std::invalid_argument("backward() target must be a scalar");
    backward(loss, Mat::Ones(1, 1));
}

void Graph::backward(Var out, const Mat& seed) {
    if (!record_) throw std::logic_error("backward() on a graph built without recording");
    if (seed.rows() != value(out).rows() || seed.cols() != value(out).cols())
        throw std::invalid_argument("backward seed shape mismatch");
    clear_grads();
    grad_buffer(out) = seed;
    run_backward(out);
}

void Graph::clear_grads() {
    for (auto& n : nodes_) n.grad.resize(0, 0);
}

void Graph::run_backward(Var out) {
    for (std::int32_t i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, Var{i});
        if (n.param) n.param->grad += n.grad;
    }
}

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()));
}

} // namespace

Var add(Graph& g, Var a, Var b) {
    check_same_shape(g.value(a), g.value(b), "add");
    return g.push(g.value(a) + g.value(b), {a, b}, [a, b](Graph& g, Var out) {
        if (g.requires_grad(a)) g.grad_buffer(a) += g.grad(out);
        if (g.requires_grad(b)) g.grad_buffer(b) += g.grad(out);
    });
}

Var sub(Graph& g, Var a, Var b) {
    check_same_shape(g.value(a), g.value(b), "sub");
    return g.push(g.value(a) - g.value(b), {a, b}, [a, b](Graph& g, Var out) {
        if (g.requires_grad(a)) g.grad_buffer(a) += g.grad(out);
        if (g.requires_grad(b)) g.grad_buffer(b) -= g.grad(out);
    });
}

Var mul(Graph& g, Var a, Var b) {
    check_same_shape(g.value(a), g.value(b), "mul");
    return g.push(g.value(a).cwiseProduct(g.value(b)), {a, b}, [a, b](Graph& g, Var out) {
        if (g.requires_grad(a)) g.grad_buffer(a) += g.grad(out).cwiseProduct(g.value(b));
        if (g.requires_grad(b)) g.grad_buffer(b) += g.grad(out).cwiseProduct(g.value(a));
    });
}

Var scale(Graph& g, Var a, double s) {
    return g.push(g.value(a) * s, {a}, [a, s](Graph& g, Var out) { g.grad_buffer(a) += s * g.grad(out); });
}

Var add_row(Graph& g, Var a, Var row) {
    const Mat& av = g.value(a);
    const Mat& rv = g.value(row);
    if (rv.rows() != 1 || rv.cols() != av.cols()) throw std::invalid_argument("add_row: row shape mismatch");
    Mat out = av.rowwise() + rv.row(0);
    return g.push(std::move(out), {a, row}, [a, row](Graph& g, Var out) {
        if (g.requires_grad(a)) g.grad_buffer(a) += g.grad(out);
        if (g.requires_grad(row)) g.grad_buffer(row) += g.grad(out).colwise().sum();
    });
}

Var matmul(Graph& g, Var a, Var b) {
    if (g.value(a).cols() != g.value(b).rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    Mat out;
    out.noalias() = g.value(a) * g.value(b);
    return g.push(std::move(out), {a, b}, [a, b](Graph& g, Var out) {
        const Mat& go = g.grad(out);
        if (g.requires_grad(a)) g.grad_buffer(a).noalias() += go * g.value(b).transpose();
        if (g.requires_grad(b)) g.grad_buffer(b).noalias() += g.value(a).transpose() * go;
    });
}

Var linear(Graph& g, Var x, Var weight, Var bias) {
    const Mat& xv = g.value(x);
    const Mat& wv = g.value(weight);
    const Mat& bv = g.value(bias);
    if (xv.cols() != wv.rows() || bv.rows() != 1 || bv.cols() != wv.cols())
        throw std::invalid_argument("linear: shape mismatch (x " + std::to_string(xv.rows()) + "x" +
                                    std::to_string(xv.cols()) + ", W " + std::to_string(wv.rows()) + "x" +
                                    std::to_string(wv.cols()) + ")");
    Mat out(xv.rows(), wv.cols());
    out.noalias() = xv * wv;
    out.rowwise() += bv.row(0);
    return g.push(std::move(out), {x, weight, bias}, [x, weight, bias](Graph& g, Var out) {
        const Mat& go = g.grad(out);
        if (g.requires_grad(x)) g.grad_buffer(x).noalias() += go * g.value(weight).transpose();
        if (g.requires_grad(weight)) g.grad_buffer(weight).noalias() += g.value(x).transpose() * go;
        if (g.requires_grad(bias)) g.grad_buffer(bias) += go.colwise().sum();
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654; // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
} // namespace

namespace {
// tanh(u) = 1 - 2 / (exp(2u) + 1), using Eigen's vectorised exp.
Mat fast_tanh(const Mat& u) {
    return (1.0 - 2.0 / ((2.0 * u.array()).exp() + 1.0)).matrix();
}
} // namespace

Var gelu(Graph& g, Var a) {
    const auto x = g.value(a).array();
    auto t = std::make_shared<Mat>(fast_tanh((kGeluC * (x + kGeluA * x.cube())).matrix()));
    Mat out = (0.5 * x * (1.0 + t->array())).matrix();
    return g.push(std::move(out), {a}, [a, t](Graph& g, Var out) {
        const auto x = g.value(a).array();
        const auto tt = t->array();
        const auto d = 0.5 * (1.0 + tt) + 0.5 * x * (1.0 - tt.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x.square());
        g.grad_buffer(a).array() += g.grad(out).array() * d;
    });
}

Var silu(Graph& g, Var a) {
    const auto x = g.value(a).array();
    auto sig = std::make_shared<Mat>((1.0 / (1.0 + (-x).exp())).matrix());
    Mat out = (x * sig->array()).matrix();
    return g.push(std::move(out), {a}, [a, sig](Graph& g, Var out) {
        const auto x = g.value(a).array();
        const auto s = sig->array();
        g.grad_buffer(a).array() += g.grad(out).array() * (s * (1.0 + x * (1.0 - s)));
    });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
    const Mat& xv = g.value(x);
    const Mat& gv = g.value(gamma);
    const Mat& bv = g.value(beta);
    const Eigen::Index n = xv.rows(), m = xv.cols();
    if (gv.rows() != 1 || gv.cols() != m || bv.rows() != 1 || bv.cols() != m)
        throw std::invalid_argument("layer_norm: affine shape mismatch");

    auto xhat = std::make_shared<Mat>(n, m);
    auto rstd = std::make_shared<Eigen::VectorXd>(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = xv.row(i).mean();
        const double var = (xv.row(i).array() - mean).square().mean();
        (*rstd)(i) = 1.0 / std::sqrt(var + eps);
        xhat->row(i) = (xv.row(i).array() - mean) * (*rstd)(i);
    }
    Mat out = xhat->array().rowwise() * gv.row(0).array();
    out.rowwise() += bv.row(0);
    return g.push(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, rstd](Graph& g, Var out) {
        const Mat& go = g.grad(out);
        if (g.requires_grad(gamma)) g.grad_buffer(gamma) += go.cwiseProduct(*xhat).colwise().sum();
        if (g.requires_grad(beta)) g.grad_buffer(beta) += go.colwise().sum();
        if (!g.requires_grad(x)) return;
        const Mat dxhat = go.array().rowwise() * g.value(gamma).row(0).array();
        Mat& gx = g.grad_buffer(x);
        for (Eigen::Index i = 0; i < dxhat.rows(); ++i) {
            const double mean_d = dxhat.row(i).mean();
            const double mean_dx = dxhat.row(i).dot(xhat->row(i)) / static_cast<double>(dxhat.cols());
            gx.row(i).array() +=
                (*rstd)(i) * (dxhat.row(i).array() - mean_d - xhat->row(i).array() * mean_dx);
        }
    });
}

Var gather_rows(Graph& g, Var src, std::vector<Eigen::Index> idx) {
    const Mat& sv = g.value(src);
    Mat out(static_cast<Eigen::Index>(idx.size()), sv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= sv.rows()) throw std::out_of_range("gather_rows: index out of range");
        out.row(static_cast<Eigen::Index>(i)) = sv.row(idx[i]);
    }
    return g.push(std::move(out), {src}, [src, idx = std::move(idx)](Graph& g, Var out) {
        const Mat& go = g.grad(out);
        Mat& gs = g.grad_buffer(src);
        for (std::size_t i = 0; i < idx.size(); ++i) gs.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    });
}

Var concat_rows(Graph& g, const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Eigen::Index rows = 0;
    const Eigen::Index cols = g.value(parts.front()).cols();
    for (Var p : parts) {
        if (g.value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += g.value(p).rows();
    }
    Mat out(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
        out.middleRows(r, g.value(p).rows()) = g.value(p);
        r += g.value(p).rows();
    }
    return g.push(std::move(out), parts, [parts](Graph& g, Var out) {
        const Mat& go = g.grad(out);
        Eigen::Index r = 0;
        for (Var p : parts) {
            const Eigen::Index n = g.value(p).rows();
            if (g.requires_grad(p)) g.grad_buffer(p) += go.middleRows(r, n);
            r += n;
        }
    });
}

Var slice_rows(Graph& g, Var src, Eigen::Index begin, Eigen::Index n) {
    const Mat& sv = g.value(src);
    if (begin < 0 || n < 0 || begin + n > sv.rows()) throw std::out_of_range("slice_rows: range out of bounds");
    return g.push(sv.middleRows(begin, n), {src}, [src, begin, n](Graph& g, Var out) {
        g.grad_buffer(src).middleRows(begin, n) += g.grad(out);
    });
}

Var weighted_sum(Graph& g, Var a, const Mat& weights) {
    check_same_shape(g.value(a), weights, "weighted_sum");
    Mat out(1, 1);
    out(0, 0) = g.value(a).cwiseProduct(weights).sum();
    return g.push(std::move(out), {a}, [a, weights](Graph& g, Var out) {
        g.grad_buffer(a) += g.grad(out)(0, 0) * weights;
    });
}

Var mean_row_sq_error(Graph& g, Var a, const Mat& target) {
    check_same_shape(g.value(a), target, "mean_row_sq_error");
    if (target.rows() == 0) throw std::invalid_argument("mean_row_sq_error: no rows");
    const double inv_n = 1.0 / static_cast<double>(target.rows());
    Mat out(1, 1);
    out(0, 0) = (g.value(a) - target).squaredNorm() * inv_n;
    return g.push(std::move(out), {a}, [a, target, inv_n](Graph& g, Var out) {
        g.grad_buffer(a) += (2.0 * inv_n * g.grad(out)(0, 0)) * (g.value(a) - target);
    });
}

Mat attention_weights(const Eigen::Ref<const Mat>& q, const Eigen::Ref<const Mat>& k,
                      const Eigen::Ref<const Mat>& bias) {
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Mat s(q.rows(), k.rows());
    s.noalias() = q * k.transpose();
    s *= inv_sqrt;
    s += bias;
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const double mx = s.row(i).maxCoeff();
        // Vectorised exp saturates at the smallest denormal instead of 0, so
        // masked entries are zeroed explicitly.
        s.row(i) = (bias.row(i).array() <= 0.5 * kMaskedLogit).select(0.0, (s.row(i).array() - mx).exp());
        s.row(i) /= s.row(i).sum();
    }
    return s;
}

Var multi_head_attention(Graph& g, Var qkv, const std::vector<AttentionSpan>& spans, int heads) {
    const Mat& x = g.value(qkv);
    if (heads <= 0 || x.cols() % (3 * heads) != 0)
        throw std::invalid_argument("multi_head_attention: width not divisible into heads");
    const Eigen::Index width = x.cols() / 3;
    const Eigen::Index d = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));

    Eigen::Index covered = 0;
    for (const auto& sp : spans) {
        if (sp.offset < 0 || sp.offset + sp.length > x.rows() || !sp.bias || sp.bias->rows() != sp.length ||
            sp.bias->cols() != sp.length)
            throw std::invalid_argument("multi_head_attention: malformed span");
        covered += sp.length;
    }
    if (covered != x.rows()) throw std::invalid_argument("multi_head_attention: spans do not cover all rows");

    auto probs = std::make_shared<std::vector<Mat>>();
    probs->reserve(spans.size() * static_cast<std::size_t>(heads));
    Mat out(x.rows(), width);
    for (const auto& sp : spans) {
        // Consecutive queries grouped by the shortest key prefix holding all
        // their allowed keys. Keys past the prefix are never touched, so a
        // row's result does not depend (even in rounding) on masked keys.
        const Mat& bias = *sp.bias;
        std::vector<std::pair<Eigen::Index, Eigen::Index>> runs; // (first row, prefix)
        for (Eigen::Index r = 0; r < sp.length; ++r) {
            Eigen::Index prefix = 0;
            for (Eigen::Index c = sp.length; c > 0; --c)
                if (bias(r, c - 1) > 0.5 * kMaskedLogit) {
                    prefix = c;
                    break;
                }
            if (prefix == 0) throw std::invalid_argument("multi_head_attention: query with no allowed key");
            if (runs.empty() || runs.back().second != prefix) runs.emplace_back(r, prefix);
        }
        for (int h = 0; h < heads; ++h) {
            // Contiguous copies: vectorisation of views depends on where the
            // span starts, which would make results depend on other samples.
            const Mat q = x.block(sp.offset, h * d, sp.length, d);
            const Mat k = x.block(sp.offset, width + h * d, sp.length, d);
            const Mat v = x.block(sp.offset, 2 * width + h * d, sp.length, d);
            Mat p = Mat::Zero(sp.length, sp.length);
            for (std::size_t i = 0; i < runs.size(); ++i) {
                const auto [r0, len] = runs[i];
                const Eigen::Index n = (i + 1 < runs.size() ? runs[i + 1].first : sp.length) - r0;
                const Mat pr = attention_weights(q.middleRows(r0, n), k.topRows(len), bias.block(r0, 0, n, len));
                const Mat vr = v.topRows(len);
                const Mat o = pr * vr;
                p.block(r0, 0, n, len) = pr;
                out.block(sp.offset + r0, h * d, n, d) = o;
            }
            probs->push_back(std::move(p));
        }
    }

    return g.push(std::move(out), {qkv}, [qkv, spans, heads, probs, width, d, inv_sqrt](Graph& g, Var out) {
        const Mat& x = g.value(qkv);
        const Mat& go = g.grad(out);
        Mat& gx = g.grad_buffer(qkv);
        std::size_t pi = 0;
        for (const auto& sp : spans) {
            for (int h = 0; h < heads; ++h) {
                const Mat& p = (*probs)[pi++];
                const auto q = x.block(sp.offset, h * d, sp.length, d);
                const auto k = x.block(sp.offset, width + h * d, sp.length, d);
                const auto v = x.block(sp.offset, 2 * width + h * d, sp.length, d);
                const auto dout = go.block(sp.offset, h * d, sp.length, d);

                gx.block(sp.offset, 2 * width + h * d, sp.length, d).noalias() += p.transpose() * dout;
                Mat dp(sp.length, sp.length);
                dp.noalias() = dout * v.transpose();
                // softmax backward: ds = p * (dp - rowsum(dp * p))
                const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
                Mat ds = p.cwiseProduct(dp.colwise() - rowdot);
                ds *= inv_sqrt;
                gx.block(sp.offset, h * d, sp.length, d).noalias() += ds * k;
                gx.block(sp.offset, width + h * d, sp.length, d).noalias() += ds.transpose() * q;
            }
        }
    });
}

void init_xavier_uniform(Parameter& p, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

void init_normal(Parameter& p, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

void init_constant(Parameter& p, double value) { p.value.setConstant(value); }

Adam::Adam(ParameterStore& store, Options opts) : store_(store), opts_(opts) {
    for (const auto& p : store_.all()) {
        m_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
        v_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    }
}

double Adam::step() {
    auto& params = store_.all();
    if (params.size() != m_.size()) throw std::logic_error("Adam: parameter set changed after construction");

    double sq = 0.0;
    for (const auto& p : params) sq += p.grad.squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip = (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const double step_size = opts_.lr / bc1;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        m_[i] = opts_.beta1 * m_[i] + ((1.0 - opts_.beta1) * clip) * p.grad;
        v_[i] = opts_.beta2 * v_[i] + ((1.0 - opts_.beta2) * clip * clip) * p.grad.cwiseAbs2();
        p.value.array() -= step_size * m_[i].array() / ((v_[i].array() / bc2).sqrt() + opts_.eps);
    }
    return norm;
}

bool all_finite(const Mat& m) { return m.allFinite(); }

} // namespace selfctl::nn
