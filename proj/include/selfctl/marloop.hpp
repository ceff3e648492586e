#pragma once

#include "selfctl/backbone.hpp"
#include "selfctl/diffhead.hpp"
#include "selfctl/tokenize.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace selfctl {

/// Ordered partition X^1..X^K of the generated positions 0..G-1.
struct MaskingPlan {
    std::vector<std::vector<std::size_t>> steps;

    /// Throws std::logic_error unless the steps are non-empty, disjoint and cover 0..G-1.
    void validate(std::size_t gen_len) const;
};

/// Step sizes of the cosine schedule: step k gets a share proportional to
/// cos(pi/2 (k-1)/K) - cos(pi/2 k/K); every step gets one position first and
/// the remaining G-K are apportioned by largest remainder.
std::vector<std::size_t> plan_step_sizes(std::size_t gen_len, std::size_t steps);

/// Random order split by plan_step_sizes. Throws std::out_of_range unless 1 <= K <= G.
MaskingPlan make_generation_plan(std::size_t gen_len, std::size_t steps, Rng& rng);

/// Draws r ~ U[lo, hi] and hides ceil(r G) uniformly chosen positions (at least
/// one). Returns visibility flags, false = hidden.
std::vector<std::uint8_t> sample_training_mask(std::size_t gen_len, double ratio_lo, double ratio_hi, Rng& rng);

struct ImageGeometry {
    int image_size = 16;
    int patch_size = 4;
    int channels = 3;
    int cond_channels = 1;
    int text_max_len = 4;

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int token_dim() const { return patch_size * patch_size * channels; }
    int cond_token_dim() const { return patch_size * patch_size * cond_channels; }
    SegmentLayout layout() const;
    void validate() const;
    bool operator==(const ImageGeometry&) const = default;
};

struct ScheduleConfig {
    int train_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int sample_steps = 100;
    bool operator==(const ScheduleConfig&) const = default;
};

/// Everything needed to rebuild a model's parameter layout.
struct ModelConfig {
    ImageGeometry geometry;
    int width = 256;
    int depth_enc = 4;
    int depth_dec = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int head_hidden = 512;
    int head_blocks = 3;
    int head_time_dim = 64;
    ScheduleConfig schedule;
    AttentionPolicy policy = kDefaultPolicy;

    BackboneConfig backbone_config(std::size_t vocab_size) const;
    DenoiserConfig denoiser_config() const;
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
    int batch_size = 32;
    double lr = 1e-3;
    int steps = 20000;
    double mask_ratio_lo = 0.7;
    double mask_ratio_hi = 1.0;
    double condition_dropout = 0.1;
    std::uint64_t seed = 0;
    /// Each hidden token is scored this many times per step with fresh noise.
    int diffusion_repeats = 4;
    /// Global gradient-norm clip; 0 disables it.
    double grad_clip = 0.0;

    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Backbone + diffusion head + schedules + vocabulary, sharing one parameter store.
class MarModel {
public:
    MarModel(ModelConfig cfg, TextVocab vocab, std::uint64_t init_seed);
    MarModel(const MarModel&) = delete;
    MarModel& operator=(const MarModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const TextVocab& vocab() const { return vocab_; }
    nn::ParameterStore& params() { return store_; }
    const nn::ParameterStore& params() const { return store_; }
    const Backbone& backbone() const { return *backbone_; }
    const DiffusionHead& head() const { return *head_; }
    const NoiseSchedule& train_schedule() const { return train_schedule_; }
    const NoiseSchedule& sample_schedule() const { return sample_schedule_; }
    SegmentLayout layout() const { return cfg_.geometry.layout(); }

private:
    ModelConfig cfg_;
    TextVocab vocab_;
    nn::ParameterStore store_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<DiffusionHead> head_;
    NoiseSchedule train_schedule_;
    NoiseSchedule sample_schedule_;
};

/// One tokenized training pair.
struct TokenizedExample {
    std::vector<std::int32_t> text_ids; ///< length geometry.text_max_len
    Mat cond_tokens;                    ///< num_patches x cond_token_dim
    Mat gen_tokens;                     ///< num_patches x token_dim
};

TokenizedExample tokenize_example(const MarModel& model, const std::string& caption, const Image& target,
                                  const Image& condition);

/// Stacks examples into a batch with the model's layout and policy. Visibility
/// and null flags start as all-visible / not-null.
SequenceBatch assemble_batch(const MarModel& model, const std::vector<TokenizedExample>& examples);

/// One optimisation step: random masking, optional joint condition dropout,
/// diffusion loss on the hidden positions, one Adam update.
class Trainer {
public:
    Trainer(MarModel& model, TrainConfig cfg);

    /// Returns the loss before the update. Throws NumericalError on a non-finite loss.
    double step(const std::vector<TokenizedExample>& examples, Rng& rng);

    const TrainConfig& config() const { return cfg_; }

private:
    MarModel& model_;
    TrainConfig cfg_;
    nn::Adam adam_;
};

/// Conditioning vectors at the hidden positions of `batch` (rows in batch order).
Mat hidden_conditioning(const MarModel& model, const SequenceBatch& batch);

struct GenerateOptions {
    std::size_t steps = 8; ///< K
    double temperature = 1.0;
    double guidance_scale = 1.0;
};

struct GenerationRequest {
    std::vector<std::int32_t> text_ids;
    std::optional<Mat> cond_tokens; ///< nullopt = null image condition
    bool null_text = false;
};

/// Observer payload for one generation step.
struct GenerationStep {
    std::size_t step = 0; ///< 1-based k
    /// Positions sampled this step, per request.
    std::vector<std::vector<std::size_t>> positions;
    /// Conditional z at those positions (before guidance), rows request-major.
    Mat z;
    /// Backbone::condition_states of the conditional pass.
    Mat condition_states;
};
using GenerationObserver = std::function<void(const GenerationStep&)>;

/// K-step masked generation. Returns generated tokens (clipped to [-1, 1]),
/// request b in rows [b*G, (b+1)*G).
Mat generate_tokens(const MarModel& model, const std::vector<GenerationRequest>& requests,
                    const GenerateOptions& opts, Rng& rng, const GenerationObserver& observer = {});

/// Caption + optional condition image to image. `cond_image` may be null.
Image generate(const MarModel& model, const std::string& text, const Image* cond_image,
               const GenerateOptions& opts, Rng& rng);

struct ImageRequest {
    std::string text;
    std::optional<Image> cond_image;
    bool null_text = false;
};
std::vector<Image> generate_images(const MarModel& model, const std::vector<ImageRequest>& requests,
                                   const GenerateOptions& opts, Rng& rng);

} // namespace selfctl
