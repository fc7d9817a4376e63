#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

// End-to-end acceptance checks shared by the test binary and `padiff selftest`.
namespace padiff::acceptance {

struct Result {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

struct Options {
  /// Scratch space for dataset and checkpoint files; created if missing.
  std::filesystem::path work_dir = std::filesystem::temp_directory_path() / "padiff-acceptance";
  /// Criteria to run; empty runs all eleven.
  std::vector<int> only;
};

inline constexpr int kCriteria = 11;

Result run_criterion(int id, const Options& options);

/// Runs the selected criteria, printing one line per criterion as it finishes.
std::vector<Result> run_all(const Options& options, std::ostream& out);

/// "ACCEPTANCE <id> PASS|FAIL <title> | <detail> | <seconds>s"
std::string format(const Result& result);

}  // namespace padiff::acceptance
