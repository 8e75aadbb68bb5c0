#pragma once

namespace elm {

// The pipeline command-line entry point, callable in-process so tests can
// drive full runs. Exit codes: 0 success; 2 usage errors (unknown flags or
// subcommands); 3 pipeline-order violations; 1 any other failure, with a
// one-line classed diagnostic on stderr.
int run_cli(int argc, const char* const* argv);

} // namespace elm
