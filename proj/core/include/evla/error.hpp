// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace evla {

enum class ErrorKind {
  kUsage,      // bad command line
  kConfig,     // invalid configuration value or combination
  kDimension,  // tensor shape mismatch
  kState,      // object not in a usable state (unfitted codec, cache mismatch)
  kDecode,     // token outside the legal range
  kFile,       // I/O failure or malformed file
  kContract,   // caller violated an operation contract (bench repeats, etc.)
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace evla
