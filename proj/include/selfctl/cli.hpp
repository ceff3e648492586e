#pragma once

#include "selfctl/config.hpp"
#include "selfctl/marloop.hpp"
#include "selfctl/synthdata.hpp"

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace selfctl {

/// Process exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitNumerical = 3 };

synth::Jitter jitter_of(const DataConfig& data);

struct TrainResult {
    std::unique_ptr<MarModel> model;
    std::vector<double> losses;
};

/// Full training run: builds the synthetic dataset and vocabulary, trains for
/// cfg.train.steps, and writes into cfg.output_dir:
///   metrics.log   `step=<i> loss=<float>` every log_every steps
///   checkpoint.bin  every checkpoint_every steps and at the end
///   vocab.txt, config.ini
/// `log` (optional) receives the same metric lines.
TrainResult run_training(const RunConfig& cfg, std::ostream* log = nullptr);

/// Mean of the last `window` entries (all of them if fewer).
double trailing_mean(const std::vector<double>& values, std::size_t window);

struct ConditioningScore {
    std::size_t total = 0;
    std::size_t correct = 0; ///< colour and shape both match the request
    double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Generates `eval.samples` images cycling through the 9 classes, each
/// conditioned on its caption and a freshly drawn silhouette, and judges them
/// with the probe. With null_conditions both segments use the null embedding
/// and each output is still judged against the class of its slot, so a model
/// that ignores conditions scores near 1/9.
ConditioningScore evaluate_conditioning(const MarModel& model, const EvalConfig& eval, const DataConfig& data,
                                        bool null_conditions);

struct AblationRow {
    int option = 0;
    AttentionPolicy policy;
    bool ok = false;
    std::string error;
    double smoothed_loss = 0.0;
    double accuracy = 0.0;
    double leakage = 0.0;
};

/// Trains the eight ablation policies with the same seed and budget; a failed
/// option is recorded and the remaining ones still run.
std::vector<AblationRow> run_ablation(const RunConfig& base, std::ostream* log = nullptr);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

/// Condition-leakage indicator on a small batch drawn from the data config.
double leakage_indicator(const MarModel& model, const DataConfig& data, std::uint64_t seed);

/// Entry point of the `selfctl` executable.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

} // namespace selfctl
