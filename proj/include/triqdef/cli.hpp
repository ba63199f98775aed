#pragma once

// Command-line front end. Kept in the library so tests can drive it without
// spawning processes.

#include <iosfwd>

namespace triqdef {

/// Exit codes: 0 success, 1 usage or invalid argument, 2 data error,
/// 3 numerical failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace triqdef
