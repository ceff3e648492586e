#pragma once

#include "selfctl/marloop.hpp"

#include <filesystem>
#include <memory>

namespace selfctl {

/// Binary checkpoint:
///
///   "SELFCTL1\n"
///   u64 n, n bytes   model config echo ([model] [diffhead] [policy] INI text,
///                    including the noise-schedule constants)
///   u64 n, n bytes   vocabulary, one word per line
///   u64 count        parameter tensors, each:
///     u64 n, n bytes name; i64 rows; i64 cols; rows*cols little-endian f64
///
/// Values are stored bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const MarModel& model);

/// Throws ConfigError on a malformed file or on tensors that do not match the
/// echoed configuration.
std::unique_ptr<MarModel> load_checkpoint(const std::filesystem::path& path);

/// Loads parameter values into an existing model; throws ConfigError unless the
/// checkpoint's configuration and vocabulary equal the model's.
void load_parameters(const std::filesystem::path& path, MarModel& model);

} // namespace selfctl
