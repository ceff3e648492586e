#pragma once

#include <stdexcept>

namespace selfctl {

/// Activations, losses or samples stopped being finite.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration, checkpoint or command-line input.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace selfctl
