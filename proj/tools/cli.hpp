#pragma once

namespace icepilot {

/// Entry point of the icepilot tool. Returns 0 on success, 2 on usage or
/// configuration errors, 1 on runtime errors.
int cli_main(int argc, char** argv);

}  // namespace icepilot
