#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pagnol::cli {

// Runs one subcommand. Returns 0 on success, 2 on bad flags or settings,
// 1 on runtime failure; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace pagnol::cli
