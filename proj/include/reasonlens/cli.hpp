#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace reasonlens::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name. Reports go to `out` unless --json names a file.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace reasonlens::cli
