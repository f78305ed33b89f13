#pragma once

#include <string>
#include <vector>

namespace oaf::cli {

constexpr const char* kToolVersion = "0.1.0";

// Dispatch one subcommand. Exit codes: 0 success, 1 usage error,
// 2 data/format error, 3 numeric failure.
int run(const std::vector<std::string>& args);

} // namespace oaf::cli
