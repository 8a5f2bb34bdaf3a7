#pragma once

#include <string>
#include <vector>

namespace rflow {

// Entry point shared by the binary and the tests. Exit codes:
//   0 success, 2 invalid config/flags, 3 checkpoint mismatch,
//   4 missing input file, 1 anything else.
int cli_main(const std::vector<std::string>& args);
int cli_main(int argc, const char* const* argv);

}  // namespace rflow
