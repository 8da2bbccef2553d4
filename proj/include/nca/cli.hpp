#pragma once

namespace nca::cli {

// Entry point of the `nca` command-line tool. Returns 0 on success, 1 on usage
// errors and 2 on runtime failures.
int run(int argc, const char* const* argv);

}  // namespace nca::cli
