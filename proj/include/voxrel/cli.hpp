#pragma once

#include <string>
#include <vector>

namespace voxrel {

// Runs one CLI invocation; args excludes the program name. Returns 0 on
// success, 1 on usage errors, 2 on data errors.
int cli_run(const std::vector<std::string>& args);

}  // namespace voxrel
