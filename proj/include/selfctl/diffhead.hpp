#pragma once

#include "selfctl/nn.hpp"

#include <string>
#include <vector>

namespace selfctl {

/// Discrete-time DDPM schedule. Index s runs 1..steps(); alpha_bar(0) == 1.
class NoiseSchedule {
public:
    static NoiseSchedule linear(int steps, double beta_start, double beta_end);

    /// Evenly strided sub-schedule of `steps` entries that keeps the last
    /// timestep (and the first, when steps > 1). Betas are recomputed from the
    /// retained alpha_bar values; timestep(j) maps back to the parent index.
    NoiseSchedule respaced(int steps) const;

    int steps() const { return static_cast<int>(betas_.size()); }
    double beta(int s) const { return betas_.at(static_cast<std::size_t>(s - 1)); }
    double alpha(int s) const { return 1.0 - beta(s); }
    double alpha_bar(int s) const { return s == 0 ? 1.0 : alpha_bars_.at(static_cast<std::size_t>(s - 1)); }
    /// Timestep of the training schedule that step s corresponds to (identity unless respaced).
    int timestep(int s) const { return timesteps_.at(static_cast<std::size_t>(s - 1)); }
    /// Variance of q(x_{s-1} | x_s, x_0).
    double posterior_variance(int s) const;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
    std::vector<int> timesteps_;
};

/// x_s = sqrt(alpha_bar_s) x0 + sqrt(1 - alpha_bar_s) noise. Throws
/// std::out_of_range unless 1 <= s <= schedule.steps().
Mat q_sample(const Mat& x0, int s, const Mat& noise, const NoiseSchedule& schedule);

struct DenoiserConfig {
    int token_dim = 48;
    int cond_dim = 256;
    int hidden = 512;
    int blocks = 3;
    int time_dim = 64;

    void validate() const;
    bool operator==(const DenoiserConfig&) const = default;
};

/// Sinusoidal embedding of integer timesteps, one row per entry.
Mat timestep_embedding(const std::vector<int>& steps, int dim);

/// Per-token diffusion head: an epsilon-predicting residual MLP conditioned on
/// the timestep and the backbone vector z.
class DiffusionHead {
public:
    DiffusionHead(nn::ParameterStore& store, DenoiserConfig cfg, Rng& init_rng);

    const DenoiserConfig& config() const { return cfg_; }

    /// eps_theta(x_s, s, z); one timestep per row of x_s.
    Var predict_noise(nn::Graph& g, Var x_s, const std::vector<int>& steps, Var z) const;

    /// Mean over rows of ||eps - eps_theta(x_s, s, z)||^2 with s uniform in
    /// 1..S and eps ~ N(0, I). Each (x0, z) row pair is repeated `repeats`
    /// times with independent draws.
    Var loss(nn::Graph& g, const Mat& x0, Var z, const NoiseSchedule& schedule, Rng& rng, int repeats = 1) const;

    /// Ancestral sampling of one token per row of z. The initial noise and the
    /// per-step noise are scaled by temperature, so temperature 0 is deterministic.
    Mat sample(const Mat& z, double temperature, const NoiseSchedule& schedule, Rng& rng) const;

private:
    struct Linear {
        nn::Parameter* w = nullptr;
        nn::Parameter* b = nullptr;
    };
    struct Norm {
        nn::Parameter* gamma = nullptr;
        nn::Parameter* beta = nullptr;
    };
    struct Block {
        Norm norm;
        Linear cond, fc1, fc2;
    };

    Var apply(nn::Graph& g, const Linear& l, Var x) const;
    Var apply(nn::Graph& g, const Norm& n, Var x) const;

    DenoiserConfig cfg_;
    Linear time1_, time2_, cond_in_, x_in_, out_;
    Norm out_norm_;
    std::vector<Block> blocks_;
};

} // namespace selfctl
