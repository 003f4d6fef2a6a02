#pragma once

#include <stdexcept>
#include <string>

namespace flowkv {

/// Malformed input document (scenario, graph spec, model file).
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Structurally valid input referring to an unknown policy/predictor/agent.
struct UnknownNameError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Filesystem failure (missing file, unwritable output dir).
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Semantic validation failure (non-stochastic row, bad capacity, ...).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace flowkv
