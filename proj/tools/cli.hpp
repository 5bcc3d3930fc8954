#pragma once
#include <iosfwd>
#include <string>
#include <vector>

namespace fuselm::cli {

/// Runs one command line. Exit status: 0 success, 1 usage error, 2 data or protocol error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace fuselm::cli
