#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace duplex::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitChecksFailed = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitError = 3;

/// Output root: $DUPLEX_RUN_DIR when set, else ./runs.
std::filesystem::path run_root();

/// Creates <root>/<prefix>-NNN with the first unused number. Existing run
/// directories are never reused or modified by another command.
std::filesystem::path new_run_dir(const std::filesystem::path& root, const std::string& prefix);

/// Entry point shared by the binary and the tests. Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace duplex::cli
