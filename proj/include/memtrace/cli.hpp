#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace memtrace::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitNoMatch = 1;
inline constexpr int kExitUsage = 2;

struct Environment {
  std::optional<std::string> tau;  // MEMTRACE_TAU
};

Environment process_environment();

/// `args` excludes the program name. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace memtrace::cli
