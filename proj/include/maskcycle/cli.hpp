// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>

namespace maskcycle {

/// Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure.
int run_cli(int argc, const char* const* argv);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace maskcycle
