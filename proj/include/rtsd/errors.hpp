#ifndef RTSD_ERRORS_HPP
#define RTSD_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace rtsd {

// Bad user input: out-of-range coefficients, inconsistent configs.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or mismatched on-disk data (manifests, array files).
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem failures.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Internal invariant broken (negative charge, non-finite gradient).
// Never caught and clamped; aborts the run.
struct InvariantFault : std::logic_error {
  explicit InvariantFault(const std::string& msg) : std::logic_error(msg) {}
};

// Training loss went non-finite.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace rtsd

#endif
