#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "smvit/blocks.hpp"
#include "smvit/dataset.hpp"
#include "smvit/error.hpp"
#include "smvit/model.hpp"
#include "smvit/training.hpp"

// Structured-text forms of the configuration types. Readers accept partial
// objects: absent keys keep their defaults, unknown keys are rejected.

namespace smvit {
using json = nlohmann::ordered_json;

/// Parses text, mapping syntax and type errors to ConfigError (or LoadError
/// when `load` is set).
json parse_json(const std::string& text, const std::string& what, bool load = false);
}  // namespace smvit

namespace smvit::nn {
void to_json(json& j, const BlockConfig& c);
void from_json(const json& j, BlockConfig& c);
void to_json(json& j, const StageSpec& s);
void from_json(const json& j, StageSpec& s);
void to_json(json& j, const CMBlockConfig& c);
void from_json(const json& j, CMBlockConfig& c);
}  // namespace smvit::nn

namespace smvit::model {
void to_json(json& j, const SmvitConfig& c);
void from_json(const json& j, SmvitConfig& c);
}  // namespace smvit::model

namespace smvit::data {
void to_json(json& j, const SynthSpec& s);
void from_json(const json& j, SynthSpec& s);
void to_json(json& j, const PreprocessOptions& p);
void from_json(const json& j, PreprocessOptions& p);
}  // namespace smvit::data

namespace smvit::train {
void to_json(json& j, const OptimizerConfig& c);
void from_json(const json& j, OptimizerConfig& c);
void to_json(json& j, const StagePlan& s);
void from_json(const json& j, StagePlan& s);
void to_json(json& j, const TrainPlan& p);
void from_json(const json& j, TrainPlan& p);
}  // namespace smvit::train

namespace smvit::config_detail {
/// ConfigError naming the first key of `j` outside `allowed`.
void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Reads j[key] into `out` when present; type mismatches become ConfigError.
template <typename V>
void read(const json& j, const char* key, V& out) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("bad value for '") + key + "': " + e.what());
  }
}
}  // namespace smvit::config_detail
