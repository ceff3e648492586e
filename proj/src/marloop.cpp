#include "selfctl/marloop.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace selfctl {

void MaskingPlan::validate(std::size_t gen_len) const {
    std::vector<std::uint8_t> seen(gen_len, 0);
    std::size_t total = 0;
    for (const auto& step : steps) {
        if (step.empty()) throw std::logic_error("masking plan has an empty step");
        for (auto p : step) {
            if (p >= gen_len) throw std::logic_error("masking plan position out of range");
            if (seen[p]) throw std::logic_error("masking plan steps overlap");
            seen[p] = 1;
            ++total;
        }
    }
    if (total != gen_len) throw std::logic_error("masking plan does not cover every position");
}

std::vector<std::size_t> plan_step_sizes(std::size_t gen_len, std::size_t steps) {
    if (steps < 1 || steps > gen_len)
        throw std::out_of_range("generation steps K=" + std::to_string(steps) + " outside 1.." +
                                std::to_string(gen_len));
    const double K = static_cast<double>(steps);
    const std::size_t rest = gen_len - steps;
    std::vector<std::size_t> sizes(steps, 1);
    std::vector<double> frac(steps);
    std::size_t assigned = 0;
    for (std::size_t k = 1; k <= steps; ++k) {
        const double share = std::cos(std::numbers::pi / 2.0 * static_cast<double>(k - 1) / K) -
                             std::cos(std::numbers::pi / 2.0 * static_cast<double>(k) / K);
        const double quota = static_cast<double>(rest) * share;
        const auto whole = static_cast<std::size_t>(std::floor(quota));
        sizes[k - 1] += whole;
        frac[k - 1] = quota - static_cast<double>(whole);
        assigned += whole;
    }
    std::vector<std::size_t> order(steps);
    std::iota(order.begin(), order.end(), 0);
    // Largest remainder first; ties go to the later step.
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return frac[a] > frac[b] || (frac[a] == frac[b] && a > b);
    });
    for (std::size_t i = 0; assigned < rest; ++i, ++assigned) ++sizes[order[i % steps]];
    return sizes;
}

MaskingPlan make_generation_plan(std::size_t gen_len, std::size_t steps, Rng& rng) {
    const auto sizes = plan_step_sizes(gen_len, steps);
    std::vector<std::size_t> order(gen_len);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    MaskingPlan plan;
    std::size_t next = 0;
    for (auto n : sizes) {
        plan.steps.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(next),
                                order.begin() + static_cast<std::ptrdiff_t>(next + n));
        next += n;
    }
    return plan;
}

std::vector<std::uint8_t> sample_training_mask(std::size_t gen_len, double ratio_lo, double ratio_hi, Rng& rng) {
    if (gen_len == 0) throw std::invalid_argument("sample_training_mask: no generated positions");
    if (!(ratio_lo > 0.0 && ratio_lo <= ratio_hi && ratio_hi <= 1.0))
        throw std::invalid_argument("mask ratio bounds must satisfy 0 < lo <= hi <= 1");
    std::uniform_real_distribution<double> ratio_dist(ratio_lo, ratio_hi);
    const double r = ratio_lo == ratio_hi ? ratio_lo : ratio_dist(rng);
    auto hidden = static_cast<std::size_t>(std::ceil(r * static_cast<double>(gen_len) - 1e-9));
    hidden = std::clamp<std::size_t>(hidden, 1, gen_len);

    std::vector<std::size_t> order(gen_len);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::uint8_t> visible(gen_len, 1);
    for (std::size_t i = 0; i < hidden; ++i) visible[order[i]] = 0;
    return visible;
}

SegmentLayout ImageGeometry::layout() const {
    const auto n = static_cast<std::size_t>(num_patches());
    return SegmentLayout(static_cast<std::size_t>(text_max_len), cond_channels > 0 ? n : 0, n);
}

void ImageGeometry::validate() const {
    if (image_size < 1 || patch_size < 1 || channels < 1 || cond_channels < 0 || text_max_len < 0)
        throw std::invalid_argument("image geometry values must be positive");
    if (image_size % patch_size != 0) throw std::invalid_argument("image_size must be a multiple of patch_size");
}

BackboneConfig ModelConfig::backbone_config(std::size_t vocab_size) const {
    BackboneConfig b;
    b.width = width;
    b.depth_enc = depth_enc;
    b.depth_dec = depth_dec;
    b.heads = heads;
    b.mlp_ratio = mlp_ratio;
    b.token_dim = geometry.token_dim();
    b.cond_token_dim = std::max(geometry.cond_token_dim(), 1);
    b.text_vocab_size = static_cast<int>(vocab_size);
    b.max_text_len = geometry.text_max_len;
    b.max_cond_len = geometry.cond_channels > 0 ? geometry.num_patches() : 0;
    b.max_gen_len = geometry.num_patches();
    return b;
}

DenoiserConfig ModelConfig::denoiser_config() const {
    return DenoiserConfig{geometry.token_dim(), width, head_hidden, head_blocks, head_time_dim};
}

void ModelConfig::validate() const {
    geometry.validate();
    backbone_config(2).validate();
    denoiser_config().validate();
    if (schedule.sample_steps < 1 || schedule.sample_steps > schedule.train_steps)
        throw std::invalid_argument("schedule.sample_steps must be in 1..train_steps");
}

void TrainConfig::validate() const {
    if (batch_size < 1 || steps < 0 || diffusion_repeats < 1) throw std::invalid_argument("train counts must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be positive");
    if (!(mask_ratio_lo > 0.0 && mask_ratio_lo <= mask_ratio_hi && mask_ratio_hi <= 1.0))
        throw std::invalid_argument("train mask ratio bounds must satisfy 0 < lo <= hi <= 1");
    if (condition_dropout < 0.0 || condition_dropout > 1.0)
        throw std::invalid_argument("train.condition_dropout must be in [0, 1]");
    if (grad_clip < 0.0) throw std::invalid_argument("train.grad_clip must be non-negative");
}

MarModel::MarModel(ModelConfig cfg, TextVocab vocab, std::uint64_t init_seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
    cfg_.validate();
    Rng rng(init_seed);
    backbone_ = std::make_unique<Backbone>(store_, cfg_.backbone_config(vocab_.size()), rng);
    head_ = std::make_unique<DiffusionHead>(store_, cfg_.denoiser_config(), rng);
    train_schedule_ =
        NoiseSchedule::linear(cfg_.schedule.train_steps, cfg_.schedule.beta_start, cfg_.schedule.beta_end);
    sample_schedule_ = train_schedule_.respaced(cfg_.schedule.sample_steps);
}

TokenizedExample tokenize_example(const MarModel& model, const std::string& caption, const Image& target,
                                  const Image& condition) {
    const auto& geo = model.config().geometry;
    TokenizedExample ex;
    ex.text_ids = encode_text(caption, model.vocab(), static_cast<std::size_t>(std::max(geo.text_max_len, 1))).ids;
    ex.text_ids.resize(static_cast<std::size_t>(geo.text_max_len));
    if (target.channels != static_cast<std::size_t>(geo.channels) ||
        target.height != static_cast<std::size_t>(geo.image_size) ||
        target.width != static_cast<std::size_t>(geo.image_size))
        throw std::invalid_argument("target image does not match model geometry");
    ex.gen_tokens = patchify(target, static_cast<std::size_t>(geo.patch_size)).tokens;
    if (geo.cond_channels > 0) {
        if (condition.channels != static_cast<std::size_t>(geo.cond_channels) ||
            condition.height != target.height || condition.width != target.width)
            throw std::invalid_argument("condition image does not match model geometry");
        ex.cond_tokens = patchify(condition, static_cast<std::size_t>(geo.patch_size)).tokens;
    } else {
        ex.cond_tokens = Mat(0, 1);
    }
    return ex;
}

SequenceBatch assemble_batch(const MarModel& model, const std::vector<TokenizedExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("assemble_batch: no examples");
    const auto layout = model.layout();
    const auto bcfg = model.backbone().config();
    const std::size_t B = examples.size(), T = layout.text_len(), C = layout.imgcond_len(), G = layout.gen_len();

    SequenceBatch batch;
    batch.batch_size = B;
    batch.layout = layout;
    batch.policy = model.config().policy;
    batch.text_ids.reserve(B * T);
    batch.cond_tokens.resize(static_cast<Eigen::Index>(B * C), C > 0 ? bcfg.cond_token_dim : 1);
    batch.gen_tokens.resize(static_cast<Eigen::Index>(B * G), bcfg.token_dim);
    for (std::size_t b = 0; b < B; ++b) {
        const auto& ex = examples[b];
        if (ex.text_ids.size() != T || static_cast<std::size_t>(ex.gen_tokens.rows()) != G ||
            static_cast<std::size_t>(ex.cond_tokens.rows()) != C)
            throw std::invalid_argument("assemble_batch: example does not match model layout");
        batch.text_ids.insert(batch.text_ids.end(), ex.text_ids.begin(), ex.text_ids.end());
        if (C > 0) batch.cond_tokens.middleRows(static_cast<Eigen::Index>(b * C), static_cast<Eigen::Index>(C)) = ex.cond_tokens;
        batch.gen_tokens.middleRows(static_cast<Eigen::Index>(b * G), static_cast<Eigen::Index>(G)) = ex.gen_tokens;
    }
    batch.visible.assign(B * G, 1);
    batch.null_text.assign(B, 0);
    batch.null_cond.assign(B, 0);
    return batch;
}

namespace {

std::vector<Eigen::Index> hidden_rows(const SequenceBatch& batch) {
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < batch.visible.size(); ++i)
        if (!batch.visible[i]) rows.push_back(static_cast<Eigen::Index>(i));
    return rows;
}

} // namespace

Trainer::Trainer(MarModel& model, TrainConfig cfg)
    : model_(model), cfg_(cfg), adam_(model.params(), nn::Adam::Options{cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip}) {
    cfg_.validate();
}

double Trainer::step(const std::vector<TokenizedExample>& examples, Rng& rng) {
    SequenceBatch batch = assemble_batch(model_, examples);
    const std::size_t G = batch.layout.gen_len();
    std::bernoulli_distribution drop(cfg_.condition_dropout);
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const auto flags = sample_training_mask(G, cfg_.mask_ratio_lo, cfg_.mask_ratio_hi, rng);
        std::copy(flags.begin(), flags.end(), batch.visible.begin() + static_cast<std::ptrdiff_t>(b * G));
        const bool dropped = drop(rng);
        batch.null_text[b] = dropped;
        batch.null_cond[b] = dropped;
    }

    nn::Graph g;
    const BackboneOutput out = model_.backbone().forward(g, batch);
    auto rows = hidden_rows(batch);
    Mat x0(static_cast<Eigen::Index>(rows.size()), batch.gen_tokens.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) x0.row(static_cast<Eigen::Index>(i)) = batch.gen_tokens.row(rows[i]);
    Var z = nn::gather_rows(g, out.z, std::move(rows));
    Var loss = model_.head().loss(g, x0, z, model_.train_schedule(), rng, cfg_.diffusion_repeats);

    const double value = g.value(loss)(0, 0);
    model_.params().zero_grad();
    g.backward(loss);
    adam_.step();
    return value;
}

Mat hidden_conditioning(const MarModel& model, const SequenceBatch& batch) {
    nn::Graph g(/*record=*/false);
    const BackboneOutput out = model.backbone().forward(g, batch);
    const Mat& z = g.value(out.z);
    const auto rows = hidden_rows(batch);
    Mat result(static_cast<Eigen::Index>(rows.size()), z.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) result.row(static_cast<Eigen::Index>(i)) = z.row(rows[i]);
    return result;
}

Mat generate_tokens(const MarModel& model, const std::vector<GenerationRequest>& requests,
                    const GenerateOptions& opts, Rng& rng, const GenerationObserver& observer) {
    if (requests.empty()) throw std::invalid_argument("generate: no requests");
    const auto layout = model.layout();
    const auto bcfg = model.backbone().config();
    const std::size_t B = requests.size(), T = layout.text_len(), C = layout.imgcond_len(), G = layout.gen_len();

    SequenceBatch batch;
    batch.batch_size = B;
    batch.layout = layout;
    batch.policy = model.config().policy;
    batch.cond_tokens = Mat::Zero(static_cast<Eigen::Index>(B * C), C > 0 ? bcfg.cond_token_dim : 1);
    batch.gen_tokens = Mat::Zero(static_cast<Eigen::Index>(B * G), bcfg.token_dim);
    batch.visible.assign(B * G, 0);
    batch.null_text.assign(B, 0);
    batch.null_cond.assign(B, 0);
    for (std::size_t b = 0; b < B; ++b) {
        const auto& req = requests[b];
        if (req.null_text) {
            batch.text_ids.insert(batch.text_ids.end(), T, kPadId);
            batch.null_text[b] = 1;
        } else {
            if (req.text_ids.size() != T) throw std::invalid_argument("generate: text ids do not match layout");
            batch.text_ids.insert(batch.text_ids.end(), req.text_ids.begin(), req.text_ids.end());
        }
        if (C == 0) continue;
        if (req.cond_tokens) {
            if (req.cond_tokens->rows() != static_cast<Eigen::Index>(C) || req.cond_tokens->cols() != bcfg.cond_token_dim)
                throw std::invalid_argument("generate: condition tokens do not match layout");
            batch.cond_tokens.middleRows(static_cast<Eigen::Index>(b * C), static_cast<Eigen::Index>(C)) = *req.cond_tokens;
        } else {
            batch.null_cond[b] = 1;
        }
    }

    std::vector<MaskingPlan> plans;
    for (std::size_t b = 0; b < B; ++b) plans.push_back(make_generation_plan(G, opts.steps, rng));
    const bool guided = opts.guidance_scale != 1.0;

    for (std::size_t k = 0; k < opts.steps; ++k) {
        std::vector<Eigen::Index> rows;
        for (std::size_t b = 0; b < B; ++b)
            for (auto p : plans[b].steps[k]) rows.push_back(static_cast<Eigen::Index>(b * G + p));

        nn::Graph g(/*record=*/false);
        const BackboneOutput out = model.backbone().forward(g, batch);
        const Mat& z_all = g.value(out.z);
        Mat z(static_cast<Eigen::Index>(rows.size()), z_all.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = z_all.row(rows[i]);

        if (observer) {
            GenerationStep info;
            info.step = k + 1;
            for (std::size_t b = 0; b < B; ++b) info.positions.push_back(plans[b].steps[k]);
            info.z = z;
            if (layout.condition_len() > 0) info.condition_states = g.value(model.backbone().condition_states(g, batch, out));
            observer(info);
        }

        Mat z_used = z;
        if (guided) {
            SequenceBatch null_batch = batch;
            std::fill(null_batch.null_text.begin(), null_batch.null_text.end(), 1);
            std::fill(null_batch.null_cond.begin(), null_batch.null_cond.end(), 1);
            nn::Graph gn(/*record=*/false);
            const Mat& zn_all = gn.value(model.backbone().forward(gn, null_batch).z);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const auto r = static_cast<Eigen::Index>(i);
                z_used.row(r) = zn_all.row(rows[i]) + opts.guidance_scale * (z.row(r) - zn_all.row(rows[i]));
            }
        }

        // Clipped to the patchify range so later steps see in-distribution inputs.
        const Mat tokens =
            model.head().sample(z_used, opts.temperature, model.sample_schedule(), rng).cwiseMax(-1.0).cwiseMin(1.0);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            batch.gen_tokens.row(rows[i]) = tokens.row(static_cast<Eigen::Index>(i));
            batch.visible[static_cast<std::size_t>(rows[i])] = 1;
        }
    }
    return batch.gen_tokens;
}

std::vector<Image> generate_images(const MarModel& model, const std::vector<ImageRequest>& requests,
                                   const GenerateOptions& opts, Rng& rng) {
    const auto& geo = model.config().geometry;
    const auto patch = static_cast<std::size_t>(geo.patch_size);
    std::vector<GenerationRequest> reqs;
    for (const auto& r : requests) {
        GenerationRequest gr;
        gr.null_text = r.null_text;
        gr.text_ids = encode_text(r.text, model.vocab(), static_cast<std::size_t>(std::max(geo.text_max_len, 1))).ids;
        gr.text_ids.resize(static_cast<std::size_t>(geo.text_max_len));
        if (r.cond_image && geo.cond_channels > 0) {
            if (r.cond_image->channels != static_cast<std::size_t>(geo.cond_channels) ||
                r.cond_image->height != static_cast<std::size_t>(geo.image_size) ||
                r.cond_image->width != static_cast<std::size_t>(geo.image_size))
                throw std::invalid_argument("condition image does not match model geometry");
            gr.cond_tokens = patchify(*r.cond_image, patch).tokens;
        }
        reqs.push_back(std::move(gr));
    }

    const Mat tokens = generate_tokens(model, reqs, opts, rng);
    const auto G = static_cast<Eigen::Index>(geo.num_patches());
    std::vector<Image> images;
    for (std::size_t b = 0; b < requests.size(); ++b) {
        ImageTokenGrid grid;
        grid.tokens = tokens.middleRows(static_cast<Eigen::Index>(b) * G, G);
        grid.grid_h = grid.grid_w = static_cast<std::size_t>(geo.grid());
        grid.patch_size = patch;
        grid.channels = static_cast<std::size_t>(geo.channels);
        images.push_back(unpatchify(grid));
    }
    return images;
}

Image generate(const MarModel& model, const std::string& text, const Image* cond_image,
               const GenerateOptions& opts, Rng& rng) {
    ImageRequest req;
    req.text = text;
    if (cond_image) req.cond_image = *cond_image;
    return generate_images(model, {req}, opts, rng).front();
}

} // namespace selfctl
