#pragma once

#include <stdexcept>
#include <string>

namespace cadapt {

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Raised when a forward value turns NaN/Inf or training diverges.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Misuse of the autodiff tape (non-scalar loss, reused graph, ...).
struct GraphError : std::logic_error {
    using std::logic_error::logic_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace cadapt
