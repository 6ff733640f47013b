#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace saesteer::cli {

// Exit codes.
inline constexpr int exit_ok = 0;
inline constexpr int exit_usage = 2;
inline constexpr int exit_data = 3;
inline constexpr int exit_numeric = 4;

// args excludes the program name.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace saesteer::cli
