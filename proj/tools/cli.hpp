#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smvit/config_json.hpp"
#include "smvit/dataset.hpp"
#include "smvit/error.hpp"
#include "smvit/model.hpp"
#include "smvit/training.hpp"

namespace smvit::cli {

/// Process exit status for each outcome.
enum ExitCode : int {
  kOk = 0,
  kCheckFailed = 1,
  kConfigError = 2,
  kDataError = 3,
  kNumericError = 4,
  kIoError = 5,
};

int exit_code_for(const Error& e);

struct TrainSection {
  train::TrainMode mode = train::TrainMode::Base;
  std::size_t epochs_per_stage = 15;
  /// Views to train on; empty means every view present under the data root.
  std::vector<int> views;
  train::OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  train::PairPolicy pair_policy = train::PairPolicy::StandardOffset;
  view::Pairing registry_pairing = view::Pairing::ByIdentity;
};

/// Everything a command reads. One file supplies it; flags override fields.
struct RunConfig {
  std::uint64_t seed = 1;
  bool deterministic = true;
  int precision = 32;
  std::string data_root;
  std::string out;
  data::SynthSpec synth;
  model::SmvitConfig model = model::SmvitConfig::desk(4);
  float threshold = 0.5f;
  TrainSection train;

  void validate() const;
  data::PreprocessOptions preprocess() const;
};

json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);
/// ConfigError when the file is missing or malformed.
RunConfig load_run_config(const std::string& path);

/// Plan for `views` under the configured mode.
train::TrainPlan make_plan(const RunConfig& c, const std::vector<int>& views);

struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> mode;
  std::optional<std::string> data_root;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<int> precision;
};

/// File (when given) with flags applied on top.
RunConfig resolve(const Flags& flags);

int cmd_synth(const RunConfig& c, std::ostream& out);
int cmd_train(const RunConfig& c, std::ostream& out);

struct EvalPaths {
  std::string checkpoint;  // default <out>/model.ckpt
  std::string registry;    // default <out>/registry.json
};
int cmd_eval(const RunConfig& c, const EvalPaths& paths, std::ostream& out);

struct GradcheckOptions {
  int precision = 64;
  std::string inject_fault;
  std::uint64_t seed = 7;
  std::size_t instances = 20;
};
int cmd_gradcheck(const GradcheckOptions& options, const std::string& out_dir, std::ostream& out);

int cmd_report(const std::string& base_metrics, const std::string& gradual_metrics, int standard_view,
               const std::string& out_dir, std::ostream& out);

/// Full command line. Errors print "error: <Name>: message" to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace smvit::cli
