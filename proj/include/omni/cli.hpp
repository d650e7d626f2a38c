#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace omni {

// Front end over the library: one subcommand per operation. args is the
// command line without the program name. Returns 0 on success, 1 on a
// usage error, 2 on a runtime failure; all text goes to the streams so
// tests can run it in-process.
int cli_main(std::vector<std::string> args, std::ostream& out, std::ostream& err);
int cli_main(int argc, const char* const* argv);

} // namespace omni
