#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cafe {

/// Runs one command line (without the program name). Returns the process
/// exit status: 0 success, 1 runtime failure, 2 configuration or usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cafe
