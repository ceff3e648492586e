#pragma once

#include "selfctl/errors.hpp"
#include "selfctl/marloop.hpp"

#include <filesystem>
#include <string>

namespace selfctl {

struct DataConfig {
    int num_samples = 1800;
    std::uint64_t seed = 1;
    int jitter_offset = 3;
    int jitter_min_size = 5;
    int jitter_max_size = 8;
    bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
    int k = 4;
    double temperature = 1.0;
    double guidance = 1.0;
    int samples = 180;
    std::uint64_t seed = 7;
    bool operator==(const EvalConfig&) const = default;
};

/// Declarative run description, stored as INI text:
///
///   [model] [diffhead] [policy] [train] [data] [eval] [paths]
///
/// Every key is optional (defaults apply); unknown sections or keys are errors.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    int log_every = 1;
    int checkpoint_every = 1000;
    std::string output_dir = "run";
    std::string init_checkpoint; ///< optional warm start

    /// Throws ConfigError naming the path if it cannot be read or parsed.
    static RunConfig load(const std::filesystem::path& path);
    static RunConfig parse(const std::string& text);
    std::string to_ini() const;
    void save(const std::filesystem::path& path) const;
    /// Range checks plus existence of referenced input paths.
    void validate() const;

    bool operator==(const RunConfig&) const = default;
};

/// The [model], [diffhead] and [policy] sections only (checkpoint header echo).
std::string model_config_to_ini(const ModelConfig& cfg);
ModelConfig parse_model_config(const std::string& text);

} // namespace selfctl
