#pragma once

#include <stdexcept>
#include <string>

namespace stg {

// Bad arguments, bad config, malformed input files. CLI maps these to exit 1.
struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failures while executing otherwise valid work (I/O, numerical blowup).
// CLI maps these (and any other exception) to exit 2.
struct RuntimeFault : std::runtime_error {
  explicit RuntimeFault(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace stg
