#include "smvit/config_json.hpp"

#include <algorithm>

#include "smvit/error.hpp"

namespace smvit {

json parse_json(const std::string& text, const std::string& what, bool load) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(load ? ErrorKind::Load : ErrorKind::Config, "cannot parse " + what + ": " + e.what());
  }
}

namespace config_detail {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::Config, where + " must be an object");
  for (const auto& [key, _] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      fail(ErrorKind::Config, "unknown key '" + key + "' in " + where);
}

}  // namespace config_detail

using config_detail::read;
using config_detail::reject_unknown;

namespace nn {

void to_json(json& j, const BlockConfig& c) {
  j = json{{"in_channels", c.in_channels},
           {"out_channels", c.out_channels},
           {"kernel", c.kernel},
           {"stride", c.stride},
           {"expansion_ratio", c.expansion_ratio},
           {"token_dim", c.token_dim},
           {"heads", c.heads},
           {"d_k", c.d_k},
           {"transformer_depth", c.transformer_depth},
           {"patch_w", c.patch_w},
           {"patch_h", c.patch_h},
           {"ffn_dim", c.ffn_dim}};
}

void from_json(const json& j, BlockConfig& c) {
  reject_unknown(j, {"in_channels", "out_channels", "kernel", "stride", "expansion_ratio", "token_dim", "heads", "d_k",
                     "transformer_depth", "patch_w", "patch_h", "ffn_dim"},
                 "block config");
  read(j, "in_channels", c.in_channels);
  read(j, "out_channels", c.out_channels);
  read(j, "kernel", c.kernel);
  read(j, "stride", c.stride);
  read(j, "expansion_ratio", c.expansion_ratio);
  read(j, "token_dim", c.token_dim);
  read(j, "heads", c.heads);
  read(j, "d_k", c.d_k);
  read(j, "transformer_depth", c.transformer_depth);
  read(j, "patch_w", c.patch_w);
  read(j, "patch_h", c.patch_h);
  read(j, "ffn_dim", c.ffn_dim);
}

namespace {
const char* kind_name(StageKind k) {
  switch (k) {
    case StageKind::Conv:
      return "conv";
    case StageKind::Mobile:
      return "mobile";
    case StageKind::MobileVit:
      return "mobilevit";
  }
  return "conv";
}
}  // namespace

void to_json(json& j, const StageSpec& s) {
  j = s.cfg;
  j["kind"] = kind_name(s.kind);
}

void from_json(const json& j, StageSpec& s) {
  if (!j.is_object() || !j.contains("kind") || !j["kind"].is_string())
    fail(ErrorKind::Config, "stage needs a 'kind' of conv, mobile or mobilevit");
  const auto kind = j["kind"].get<std::string>();
  if (kind == "conv")
    s.kind = StageKind::Conv;
  else if (kind == "mobile")
    s.kind = StageKind::Mobile;
  else if (kind == "mobilevit")
    s.kind = StageKind::MobileVit;
  else
    fail(ErrorKind::Config, "unknown stage kind '" + kind + "'");
  json rest = j;
  rest.erase("kind");
  rest.get_to(s.cfg);
}

void to_json(json& j, const CMBlockConfig& c) {
  j = json{{"conv_channel", c.conv_channel}, {"vit_channel", c.vit_channel}, {"out_channels", c.out_channels}};
}

void from_json(const json& j, CMBlockConfig& c) {
  if (j.is_string()) {
    const auto name = j.get<std::string>();
    if (name == "desk_default")
      c = CMBlockConfig::desk_default();
    else if (name == "compact")
      c = CMBlockConfig::compact();
    else if (name == "miniature")
      c = CMBlockConfig::miniature();
    else
      fail(ErrorKind::Config, "unknown backbone preset '" + name + "'");
    return;
  }
  reject_unknown(j, {"conv_channel", "vit_channel", "out_channels"}, "backbone config");
  read(j, "conv_channel", c.conv_channel);
  read(j, "vit_channel", c.vit_channel);
  read(j, "out_channels", c.out_channels);
}

}  // namespace nn

namespace model {

void to_json(json& j, const SmvitConfig& c) {
  j = json{{"backbone", c.backbone},
           {"num_subjects", c.num_subjects},
           {"input_height", c.input_height},
           {"input_width", c.input_width},
           {"standard_view", c.standard_view},
           {"contrastive_weight", c.contrastive_weight}};
}

void from_json(const json& j, SmvitConfig& c) {
  reject_unknown(j, {"backbone", "num_subjects", "input_height", "input_width", "standard_view", "contrastive_weight"},
                 "model config");
  read(j, "backbone", c.backbone);
  read(j, "num_subjects", c.num_subjects);
  read(j, "input_height", c.input_height);
  read(j, "input_width", c.input_width);
  read(j, "standard_view", c.standard_view);
  read(j, "contrastive_weight", c.contrastive_weight);
}

}  // namespace model

namespace data {

void to_json(json& j, const SynthSpec& s) {
  std::vector<std::string> conds;
  for (auto c : s.conditions) conds.emplace_back(condition_name(c));
  j = json{{"n_subjects", s.n_subjects},
           {"views", s.views},
           {"frames_per_sequence", s.frames_per_sequence},
           {"sequences_per_condition", s.sequences_per_condition},
           {"conditions", conds},
           {"height", s.height},
           {"width", s.width},
           {"seed", s.seed},
           {"occlusion_strength", s.occlusion_strength}};
}

void from_json(const json& j, SynthSpec& s) {
  reject_unknown(j, {"n_subjects", "views", "frames_per_sequence", "sequences_per_condition", "conditions", "height",
                     "width", "seed", "occlusion_strength"},
                 "synth config");
  read(j, "n_subjects", s.n_subjects);
  read(j, "views", s.views);
  read(j, "frames_per_sequence", s.frames_per_sequence);
  read(j, "sequences_per_condition", s.sequences_per_condition);
  if (j.contains("conditions")) {
    std::vector<std::string> names;
    read(j, "conditions", names);
    s.conditions.clear();
    for (const auto& n : names) {
      Condition c;
      if (!parse_condition(n, c)) fail(ErrorKind::Config, "unknown condition '" + n + "'");
      s.conditions.push_back(c);
    }
  }
  read(j, "height", s.height);
  read(j, "width", s.width);
  read(j, "seed", s.seed);
  read(j, "occlusion_strength", s.occlusion_strength);
}

void to_json(json& j, const PreprocessOptions& p) {
  j = json{{"height", p.height}, {"width", p.width}, {"threshold", p.threshold}};
}

void from_json(const json& j, PreprocessOptions& p) {
  reject_unknown(j, {"height", "width", "threshold"}, "preprocess config");
  read(j, "height", p.height);
  read(j, "width", p.width);
  read(j, "threshold", p.threshold);
}

}  // namespace data

namespace train {

void to_json(json& j, const OptimizerConfig& c) {
  j = json{{"kind", c.kind == OptimizerKind::Adam ? "adam" : "sgd"},
           {"learning_rate", c.learning_rate},
           {"momentum", c.momentum},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"epsilon", c.epsilon},
           {"weight_decay", c.weight_decay}};
}

void from_json(const json& j, OptimizerConfig& c) {
  reject_unknown(j, {"kind", "learning_rate", "momentum", "beta1", "beta2", "epsilon", "weight_decay"},
                 "optimizer config");
  if (j.contains("kind")) {
    std::string k;
    read(j, "kind", k);
    if (k == "adam")
      c.kind = OptimizerKind::Adam;
    else if (k == "sgd")
      c.kind = OptimizerKind::Sgd;
    else
      fail(ErrorKind::Config, "unknown optimizer '" + k + "'");
  }
  read(j, "learning_rate", c.learning_rate);
  read(j, "momentum", c.momentum);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "epsilon", c.epsilon);
  read(j, "weight_decay", c.weight_decay);
}

void to_json(json& j, const StagePlan& s) { j = json{{"views", s.views}, {"epochs", s.epochs}}; }

void from_json(const json& j, StagePlan& s) {
  reject_unknown(j, {"views", "epochs"}, "stage plan");
  read(j, "views", s.views);
  read(j, "epochs", s.epochs);
}

void to_json(json& j, const TrainPlan& p) {
  j = json{{"mode", mode_name(p.mode)},
           {"standard_view", p.standard_view},
           {"stages", p.stages},
           {"optimizer", p.optimizer},
           {"batch_size", p.batch_size},
           {"seed", p.seed},
           {"deterministic", p.deterministic},
           {"pair_policy", p.pair_policy == PairPolicy::StandardOffset ? "standard_offset" : "offset_offset"},
           {"registry_pairing", p.registry_pairing == view::Pairing::ByIdentity ? "identity" : "index"}};
}

void from_json(const json& j, TrainPlan& p) {
  reject_unknown(j, {"mode", "standard_view", "stages", "optimizer", "batch_size", "seed", "deterministic",
                     "pair_policy", "registry_pairing"},
                 "train plan");
  if (j.contains("mode")) {
    std::string m;
    read(j, "mode", m);
    if (!parse_mode(m, p.mode)) fail(ErrorKind::Config, "unknown mode '" + m + "'");
  }
  read(j, "standard_view", p.standard_view);
  read(j, "stages", p.stages);
  read(j, "optimizer", p.optimizer);
  read(j, "batch_size", p.batch_size);
  read(j, "seed", p.seed);
  read(j, "deterministic", p.deterministic);
  if (j.contains("pair_policy")) {
    std::string s;
    read(j, "pair_policy", s);
    if (s == "standard_offset")
      p.pair_policy = PairPolicy::StandardOffset;
    else if (s == "offset_offset")
      p.pair_policy = PairPolicy::OffsetOffset;
    else
      fail(ErrorKind::Config, "unknown pair_policy '" + s + "'");
  }
  if (j.contains("registry_pairing")) {
    std::string s;
    read(j, "registry_pairing", s);
    if (s == "identity")
      p.registry_pairing = view::Pairing::ByIdentity;
    else if (s == "index")
      p.registry_pairing = view::Pairing::ByIndex;
    else
      fail(ErrorKind::Config, "unknown registry_pairing '" + s + "'");
  }
}

}  // namespace train

}  // namespace smvit
