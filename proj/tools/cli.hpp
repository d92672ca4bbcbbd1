// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "evla/error.hpp"

namespace evla::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFileOrState = 3;
inline constexpr int kExitContract = 4;

int exit_code(ErrorKind kind);

// Runs one command line (without the program name), e.g.
// {"train", "--mode", "joint", "--out", "runs/a"}. Returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace evla::cli
