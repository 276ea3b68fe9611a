#pragma once

#include "ddl/verify.hpp"

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>

namespace ddl::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kRuntime = 3 };

struct CheckOptions {
  bool fast = false;
  std::uint64_t seed = 0;
};

/// Runs the verify suite, writing one JSON line per report.
int cmd_check(const CheckOptions& options, std::ostream& out, const verify::DeltaUpdateFn& kernel = {});

struct SpectrumOptions {
  double beta = 1.0;
  Index d = 4;
  Index d_v = 1;
  std::string k_file;
  std::string csv;
  std::uint64_t seed = 0;
};

int cmd_spectrum(const SpectrumOptions& options, std::ostream& out, std::ostream& err);

struct TrainFlags {
  std::string config;
  std::optional<std::string> residual_mode, variant, map_mode, data, resume;
  std::optional<Index> d_v, state_kernel, embed_kernel;
  std::optional<std::int64_t> steps, stop_after;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out = "runs/latest";
  bool quiet = false;
};

int cmd_train(const TrainFlags& flags, std::ostream& out, std::ostream& err);

int cmd_eval(const std::string& checkpoint, const std::string& data, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches. `kernel` replaces delta_update in `check`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
        const verify::DeltaUpdateFn& kernel = {});

}  // namespace ddl::cli
