#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "smvit/gradsuite.hpp"
#include "smvit/tensor.hpp"

namespace smvit::cli {

namespace fs = std::filesystem;
using config_detail::read;
using config_detail::reject_unknown;

int exit_code_for(const Error& e) {
  switch (e.category()) {
    case ErrorCategory::Config: return kConfigError;
    case ErrorCategory::Data: return kDataError;
    case ErrorCategory::Numeric: return kNumericError;
    case ErrorCategory::Io: return kIoError;
  }
  return kDataError;
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) fail(ErrorKind::Config, "output directory not set (use --out)");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorKind::Io, "cannot create output directory " + dir);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write " + path);
  f << text;
  if (!f) fail(ErrorKind::Io, "write failed for " + path);
}

std::string read_text(const std::string& path, ErrorKind kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(kind, "cannot read " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::string join(const fs::path& dir, const char* name) { return (dir / name).string(); }

std::vector<int> views_of(const std::vector<data::Frame>& frames) {
  std::set<int> v;
  for (const auto& f : frames) v.insert(f.view);
  return {v.begin(), v.end()};
}

std::size_t subject_count(const std::vector<data::Frame>& frames) {
  std::set<std::string> s;
  for (const auto& f : frames) s.insert(f.key.subject);
  return s.size();
}

std::string views_text(const std::vector<int>& views) {
  std::string s;
  for (int v : views) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

/// Frames under the data root restricted to the configured views.
std::vector<data::Frame> load_frames(const RunConfig& c, std::ostream& out) {
  if (c.data_root.empty()) fail(ErrorKind::Config, "data root not set (use --data-root)");
  std::vector<std::string> warnings;
  auto frames = data::load_casia_b(c.data_root, c.preprocess(), &warnings);
  for (const auto& w : warnings) out << "warning: " << w << "\n";
  if (!c.train.views.empty()) {
    const std::set<int> keep(c.train.views.begin(), c.train.views.end());
    std::erase_if(frames, [&](const data::Frame& f) { return !keep.count(f.view); });
    if (frames.empty()) fail(ErrorKind::EmptyDataset, "no frames at the configured views");
    data::assign_labels(frames);
  }
  return frames;
}

model::SmvitConfig model_config_for(const RunConfig& c, const std::vector<data::Frame>& frames) {
  auto m = c.model;
  m.num_subjects = subject_count(frames);
  m.validate();
  return m;
}

void print_epoch(std::ostream& out, const train::EpochMetrics& m) {
  out << "epoch " << m.epoch << " stage " << m.stage << " views " << views_text(m.views_active) << " loss "
      << fmt("%.6f", m.train_loss) << " train_acc " << fmt("%.4f", m.train_accuracy);
  for (const auto& [v, a] : m.val_accuracy_per_view) out << " val" << v << "=" << fmt("%.4f", a);
  out << "\n";
  out.flush();
}

template <typename T>
int train_impl(const RunConfig& c, std::ostream& out) {
  ensure_dir(c.out);
  auto frames = load_frames(c, out);
  const auto views = views_of(frames);
  if (!std::binary_search(views.begin(), views.end(), c.model.standard_view))
    fail(ErrorKind::Protocol, "no frames at the standard view " + std::to_string(c.model.standard_view));
  const auto plan = make_plan(c, views);
  auto resolved = c;
  resolved.model = model_config_for(c, frames);
  resolved.train.views = views;

  auto split = data::split_7_3(std::move(frames), c.seed);
  out << "train " << split.train.size() << " frames, val " << split.val.size() << " frames, "
      << resolved.model.num_subjects << " subjects, views " << views_text(views) << ", mode "
      << train::mode_name(plan.mode) << ", " << plan.stages.size() << " stage(s)\n";

  model::SmvitModel<T> m(resolved.model, c.seed);
  train::TrainCallbacks cb;
  cb.on_epoch = [&out](const train::EpochMetrics& e) { print_epoch(out, e); };
  const auto result = train::train<T>(m, plan, split, cb);

  const fs::path dir(c.out);
  auto j = run_config_to_json(resolved);
  j["plan"] = plan;
  write_text(join(dir, "run_config.json"), j.dump(2) + "\n");
  model::save_checkpoint(join(dir, "model.ckpt"), m, c.seed, plan.stages.size() - 1);

  view::FactorRegistry registry;
  if (result.registry) {
    registry = *result.registry;
  } else {
    registry.standard_view = resolved.model.standard_view;
    registry.feat_dim = resolved.model.feat_dim();
  }
  registry.save(join(dir, "registry.json"));
  train::write_metrics_jsonl(join(dir, "metrics.jsonl"), result.metrics);

  const view::FactorRegistry* reg = result.registry ? &*result.registry : nullptr;
  const auto per_view = train::evaluate_per_view<T>(m, reg, split.val);
  write_text(join(dir, "accuracy.csv"), train::accuracy_table_csv(per_view));
  write_text(join(dir, "conditions.csv"),
             train::condition_summary_csv(train::evaluate_per_condition<T>(m, reg, split.val)));
  out << "wrote " << c.out << "\n";
  return kOk;
}

template <typename T>
int eval_impl(const RunConfig& c, const EvalPaths& paths, std::ostream& out) {
  auto frames = load_frames(c, out);
  const auto mcfg = model_config_for(c, frames);
  auto split = data::split_7_3(std::move(frames), c.seed);

  model::SmvitModel<T> m(mcfg, c.seed);
  const fs::path dir(c.out.empty() ? "." : c.out);
  const auto ckpt = paths.checkpoint.empty() ? join(dir, "model.ckpt") : paths.checkpoint;
  const auto reg_path = paths.registry.empty() ? join(dir, "registry.json") : paths.registry;
  model::load_checkpoint(ckpt, m);

  std::optional<view::FactorRegistry> registry;
  if (fs::exists(reg_path)) {
    auto r = view::FactorRegistry::load(reg_path);
    if (!r.entries.empty()) {
      if (r.feat_dim != mcfg.feat_dim() || r.standard_view != mcfg.standard_view)
        fail(ErrorKind::Load, "registry does not match the model configuration");
      registry = std::move(r);
    }
  }
  const view::FactorRegistry* reg = registry ? &*registry : nullptr;

  std::vector<std::string> warnings;
  const auto per_view = train::evaluate_per_view<T>(m, reg, split.val, nullptr, &warnings);
  for (const auto& w : warnings) out << "warning: " << w << "\n";
  const auto per_condition = train::evaluate_per_condition<T>(m, reg, split.val);

  const auto table = train::accuracy_table_csv(per_view);
  const auto summary = train::condition_summary_csv(per_condition);
  out << table << summary;
  if (!c.out.empty()) {
    ensure_dir(c.out);
    write_text(join(dir, "eval_accuracy.csv"), table);
    write_text(join(dir, "eval_conditions.csv"), summary);
  }
  return kOk;
}

template <typename T>
std::vector<GradCheckReport> run_suite(const GradcheckOptions& o) {
  GradSuiteOptions s;
  s.seed = o.seed;
  s.instances = o.instances;
  return run_gradcheck_suite<T>(s);
}

}  // namespace

// ------------------------------------------------------------------ config

void RunConfig::validate() const {
  if (precision != 32 && precision != 64) fail(ErrorKind::Config, "precision must be 32 or 64");
  model.validate();
  if (threshold <= 0.0f || threshold > 1.0f) fail(ErrorKind::Config, "threshold must be in (0,1]");
  if (train.epochs_per_stage == 0) fail(ErrorKind::Config, "epochs_per_stage must be positive");
  if (train.batch_size == 0) fail(ErrorKind::Config, "batch_size must be positive");
  for (int v : train.views) check_view_angle(v);
}

data::PreprocessOptions RunConfig::preprocess() const {
  return data::PreprocessOptions{model.input_height, model.input_width, threshold};
}

json run_config_to_json(const RunConfig& c) {
  json t{{"mode", train::mode_name(c.train.mode)},
         {"epochs_per_stage", c.train.epochs_per_stage},
         {"views", c.train.views},
         {"optimizer", c.train.optimizer},
         {"batch_size", c.train.batch_size},
         {"pair_policy", c.train.pair_policy == train::PairPolicy::StandardOffset ? "standard_offset"
                                                                                  : "offset_offset"},
         {"registry_pairing", c.train.registry_pairing == view::Pairing::ByIdentity ? "identity" : "index"}};
  return json{{"seed", c.seed},         {"deterministic", c.deterministic},
              {"precision", c.precision}, {"data_root", c.data_root},
              {"out", c.out},           {"synth", c.synth},
              {"model", c.model},       {"threshold", c.threshold},
              {"train", t}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  // "plan" is the derived stage layout that train writes for provenance.
  reject_unknown(j, {"seed", "deterministic", "precision", "data_root", "out", "synth", "model", "threshold", "train",
                     "plan"},
                 "run config");
  read(j, "seed", c.seed);
  read(j, "deterministic", c.deterministic);
  read(j, "precision", c.precision);
  read(j, "data_root", c.data_root);
  read(j, "out", c.out);
  read(j, "synth", c.synth);
  read(j, "model", c.model);
  read(j, "threshold", c.threshold);
  if (const auto it = j.find("train"); it != j.end()) {
    reject_unknown(*it, {"mode", "epochs_per_stage", "views", "optimizer", "batch_size", "pair_policy",
                         "registry_pairing"},
                   "train section");
    read(*it, "epochs_per_stage", c.train.epochs_per_stage);
    read(*it, "views", c.train.views);
    // The remaining keys share the plan's text form.
    json rest = json::object();
    for (const char* k : {"mode", "optimizer", "batch_size", "pair_policy", "registry_pairing"})
      if (it->contains(k)) rest[k] = (*it)[k];
    train::TrainPlan p;
    p.mode = c.train.mode;
    p.optimizer = c.train.optimizer;
    p.batch_size = c.train.batch_size;
    rest.get_to(p);
    c.train.mode = p.mode;
    c.train.optimizer = p.optimizer;
    c.train.batch_size = p.batch_size;
    c.train.pair_policy = p.pair_policy;
    c.train.registry_pairing = p.registry_pairing;
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(parse_json(read_text(path, ErrorKind::Config), path));
}

train::TrainPlan make_plan(const RunConfig& c, const std::vector<int>& views) {
  auto plan = c.train.mode == train::TrainMode::Gradual
                  ? train::gradual_schedule(c.model.standard_view, views, c.train.epochs_per_stage)
                  : train::base_plan(c.model.standard_view, views, c.train.epochs_per_stage);
  plan.optimizer = c.train.optimizer;
  plan.batch_size = c.train.batch_size;
  plan.seed = c.seed;
  plan.deterministic = c.deterministic;
  plan.pair_policy = c.train.pair_policy;
  plan.registry_pairing = c.train.registry_pairing;
  plan.validate();
  return plan;
}

RunConfig resolve(const Flags& flags) {
  RunConfig c = flags.config ? load_run_config(*flags.config) : RunConfig{};
  if (flags.mode && !train::parse_mode(*flags.mode, c.train.mode))
    fail(ErrorKind::Config, "unknown mode '" + *flags.mode + "'");
  if (flags.data_root) c.data_root = *flags.data_root;
  if (flags.out) c.out = *flags.out;
  if (flags.seed) c.seed = *flags.seed;
  if (flags.deterministic) c.deterministic = true;
  if (flags.precision) c.precision = *flags.precision;
  c.synth.seed = c.seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------- commands

int cmd_synth(const RunConfig& c, std::ostream& out) {
  auto spec = c.synth;
  spec.seed = c.seed;
  spec.validate();
  ensure_dir(c.out);
  const auto frames = data::synth_generate(spec);
  data::export_dataset(frames, c.out);
  const auto views = views_of(frames);
  out << "wrote " << frames.size() << " frames (" << subject_count(frames) << " subjects, " << views.size()
      << " views) to " << c.out << "\n";
  return kOk;
}

int cmd_train(const RunConfig& c, std::ostream& out) {
  return c.precision == 64 ? train_impl<double>(c, out) : train_impl<float>(c, out);
}

int cmd_eval(const RunConfig& c, const EvalPaths& paths, std::ostream& out) {
  return c.precision == 64 ? eval_impl<double>(c, paths, out) : eval_impl<float>(c, paths, out);
}

int cmd_gradcheck(const GradcheckOptions& options, const std::string& out_dir, std::ostream& out) {
  if (options.precision != 32 && options.precision != 64) fail(ErrorKind::Config, "precision must be 32 or 64");
  if (!options.inject_fault.empty()) testing::inject_backward_fault(options.inject_fault);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradCheckReport> reports;
  try {
    reports = options.precision == 64 ? run_suite<double>(options) : run_suite<float>(options);
  } catch (...) {
    testing::clear_backward_fault();
    throw;
  }
  testing::clear_backward_fault();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  char line[160];
  std::snprintf(line, sizeof line, "%-24s %14s %10s  %s\n", "op", "max_rel_error", "tolerance", "status");
  out << line;
  std::vector<std::string> failed;
  json rows = json::array();
  for (const auto& r : reports) {
    std::snprintf(line, sizeof line, "%-24s %14.3e %10.1e  %s\n", r.op_name.c_str(), r.max_rel_error,
                  r.tolerance, r.passed ? "PASS" : "FAIL");
    out << line;
    if (!r.passed) failed.push_back(r.op_name);
    rows.push_back({{"op", r.op_name},
                    {"max_rel_error", r.max_rel_error},
                    {"tolerance", r.tolerance},
                    {"step", r.step},
                    {"coordinates", r.coordinates},
                    {"passed", r.passed}});
  }
  out << reports.size() << " checks, " << failed.size() << " failed, " << fmt("%.2f", secs) << " s\n";
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    json j{{"precision", options.precision}, {"seed", options.seed}, {"reports", rows}};
    write_text(join(fs::path(out_dir), "gradcheck.json"), j.dump(2) + "\n");
  }
  if (!failed.empty()) {
    out << "failed:";
    for (const auto& f : failed) out << " " << f;
    out << "\n";
    return kCheckFailed;
  }
  return kOk;
}

int cmd_report(const std::string& base_metrics, const std::string& gradual_metrics, int standard_view,
               const std::string& out_dir, std::ostream& out) {
  const auto report = train::ablation_report(train::read_metrics_jsonl(base_metrics),
                                             train::read_metrics_jsonl(gradual_metrics), standard_view);
  const auto text = report.to_json();
  out << text << "\n";
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    write_text(join(fs::path(out_dir), "ablation.json"), text + "\n");
  }
  return kOk;
}

// -------------------------------------------------------------------- main

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"smvit: multi-view gait recognition toolkit"};
  app.require_subcommand(1);

  Flags flags;
  auto add_common = [&flags](CLI::App* sub) {
    sub->add_option("--config", flags.config, "run configuration file")->check(CLI::ExistingFile);
    sub->add_option("--data-root", flags.data_root, "dataset root");
    sub->add_option("--out", flags.out, "output directory");
    sub->add_option("--seed", flags.seed, "seed for data, initialisation and shuffling");
    sub->add_flag("--deterministic", flags.deterministic, "reproducible outputs (no wall-clock fields)");
    sub->add_option("--precision", flags.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  };

  auto* synth = app.add_subcommand("synth", "generate a synthetic silhouette dataset");
  add_common(synth);
  auto* trn = app.add_subcommand("train", "train a model and export metrics");
  add_common(trn);
  trn->add_option("--mode", flags.mode, "base or gradual")->check(CLI::IsMember({"base", "gradual"}));
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint per view and per condition");
  add_common(ev);
  EvalPaths paths;
  ev->add_option("--checkpoint", paths.checkpoint, "checkpoint (default <out>/model.ckpt)");
  ev->add_option("--registry", paths.registry, "factor registry (default <out>/registry.json)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  GradcheckOptions gopt;
  std::string gc_out;
  gc->add_option("--precision", gopt.precision, "32 or 64")->check(CLI::IsMember({32, 64}));
  gc->add_option("--seed", gopt.seed, "seed for the random instances");
  gc->add_option("--instances", gopt.instances, "random instances per op");
  gc->add_option("--out", gc_out, "directory for gradcheck.json");
  gc->add_option("--inject-fault", gopt.inject_fault)->group("");

  auto* rep = app.add_subcommand("report", "compare Base and Gradual metrics streams");
  std::string base_path, gradual_path, rep_out;
  int standard = kDefaultStandardView;
  rep->add_option("--base", base_path, "Base metrics.jsonl")->required();
  rep->add_option("--gradual", gradual_path, "Gradual metrics.jsonl")->required();
  rep->add_option("--standard-view", standard, "standard view angle");
  rep->add_option("--out", rep_out, "directory for ablation.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (gc->parsed()) return cmd_gradcheck(gopt, gc_out, out);
    if (rep->parsed()) return cmd_report(base_path, gradual_path, standard, rep_out, out);
    const auto config = resolve(flags);
    if (synth->parsed()) return cmd_synth(config, out);
    if (trn->parsed()) return cmd_train(config, out);
    if (ev->parsed()) {
      // Without --config, eval reuses the configuration train wrote.
      auto c = config;
      if (!flags.config && flags.out) {
        const auto saved = (fs::path(*flags.out) / "run_config.json").string();
        if (fs::exists(saved)) {
          Flags f = flags;
          f.config = saved;
          c = resolve(f);
        }
      }
      return cmd_eval(c, paths, out);
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kConfigError;
}

}  // namespace smvit::cli
