#pragma once

#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace motion4d::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kDataError = 3, kNumericalError = 4 };

struct CommonOptions {
  bool timestamps = false;  // record wall-clock times in manifest.json
  bool verbose = false;     // progress on stderr
};

// simulate: phantom spec (+ optional fixed schedule) -> data directory with
// segments, phases, the sorted 4DCT, ground truth under gt/ and a manifest.
void simulate(const std::filesystem::path& spec, const std::optional<std::filesystem::path>& schedule,
              const std::filesystem::path& out, const CommonOptions& opts = {});

// fit: pipeline config + data directory -> result directory.
void fit(const std::filesystem::path& config, const std::filesystem::path& data, const std::filesystem::path& out,
         const CommonOptions& opts = {});

// evaluate: result + ground truth -> per-timepoint reports for the model and
// for the sorted 4DCT found in `data` (default: the parent of `gt`).
void evaluate(const std::filesystem::path& result, const std::filesystem::path& gt,
              const std::optional<std::filesystem::path>& data, const std::filesystem::path& out,
              const CommonOptions& opts = {});

// export: estimated frames at `timepoints` plus the deepest/shallowest
// end-inhalation pair.
void export_frames(const std::filesystem::path& result, const std::vector<int>& timepoints,
                   const std::filesystem::path& out, const CommonOptions& opts = {});

// init: default phantom spec and pipeline config.
void init(const std::filesystem::path& out);

// Maps a library exception onto the documented exit codes.
int exit_code_for(const std::exception& e);

// Parses argv, runs the command and returns its exit code. Errors are
// reported on `err`.
int run(int argc, const char* const* argv, std::ostream& err);

}  // namespace motion4d::cli
