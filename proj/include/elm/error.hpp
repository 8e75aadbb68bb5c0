#pragma once

#include <stdexcept>
#include <string>

namespace elm {

// Dimension mismatch in a numeric op. Message names the op and both shapes.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Structurally invalid configuration (bad field value, impossible combination).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Well-formed but unusable user input (file contents, out-of-range CLI values).
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operation invoked before its pipeline prerequisites ran (e.g. grid before sort).
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Candidate-grid construction or drawing failed (every bin empty, draw from
// an empty grid).
struct GridError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint deserialization failures, split so callers can distinguish them.
struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct UnknownVersionError : LoadError {
    using LoadError::LoadError;
};
struct CorruptTableError : LoadError {
    using LoadError::LoadError;
};
struct ShortFileError : LoadError {
    using LoadError::LoadError;
};

} // namespace elm
