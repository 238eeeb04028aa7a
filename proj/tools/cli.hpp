#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace medent::cli {

// Runs one `medent` command. `args` excludes the program name. Returns the
// process exit status: 0 on success, 1 on a runtime failure (reported as a
// single "error: <code>: <message>" line on `err`), 2 on a usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace medent::cli
