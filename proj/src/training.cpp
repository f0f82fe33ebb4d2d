#include "smvit/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "smvit/config_json.hpp"
#include "smvit/error.hpp"
#include "smvit/ops.hpp"
#include "smvit/rng.hpp"

namespace smvit::train {

std::string_view mode_name(TrainMode m) { return m == TrainMode::Base ? "base" : "gradual"; }

bool parse_mode(std::string_view text, TrainMode& out) {
  if (text == "base") {
    out = TrainMode::Base;
    return true;
  }
  if (text == "gradual") {
    out = TrainMode::Gradual;
    return true;
  }
  return false;
}

// --------------------------------------------------------------------- plans

std::vector<int> TrainPlan::active_views(std::size_t stage) const {
  std::vector<int> v;
  for (std::size_t s = 0; s <= stage && s < stages.size(); ++s) v.insert(v.end(), stages[s].views.begin(), stages[s].views.end());
  std::sort(v.begin(), v.end());
  return v;
}

std::size_t TrainPlan::total_epochs() const {
  std::size_t n = 0;
  for (const auto& s : stages) n += s.epochs;
  return n;
}

void TrainPlan::validate() const {
  check_view_angle(standard_view);
  if (stages.empty()) fail(ErrorKind::Config, "train plan has no stages");
  if (batch_size == 0) fail(ErrorKind::Config, "batch_size must be positive");
  if (!(optimizer.learning_rate > 0.0) || !std::isfinite(optimizer.learning_rate))
    fail(ErrorKind::Config, "learning_rate must be positive");
  std::set<int> seen;
  for (const auto& s : stages) {
    if (s.views.empty()) fail(ErrorKind::Config, "train plan stage without views");
    if (s.epochs == 0) fail(ErrorKind::Config, "train plan stage with zero epochs");
    for (int v : s.views) {
      check_view_angle(v);
      if (!seen.insert(v).second) fail(ErrorKind::Config, "view " + std::to_string(v) + " appears in two stages");
    }
  }
  if (!seen.count(standard_view))
    fail(ErrorKind::Config, "train plan does not include the standard view " + std::to_string(standard_view));
  if (mode == TrainMode::Base) {
    if (stages.size() != 1) fail(ErrorKind::Config, "base mode takes exactly one stage");
    return;
  }
  if (stages[0].views != std::vector<int>{standard_view})
    fail(ErrorKind::Config, "gradual mode must start with the standard view alone");
  int previous = 0;
  for (std::size_t k = 1; k < stages.size(); ++k) {
    const int d = std::abs(stages[k].views[0] - standard_view);
    for (int v : stages[k].views)
      if (std::abs(v - standard_view) != d)
        fail(ErrorKind::Config, "gradual stage " + std::to_string(k) + " mixes angular distances");
    if (d <= previous)
      fail(ErrorKind::Config, "gradual stage " + std::to_string(k) + " does not move farther from the standard view");
    previous = d;
  }
}

TrainPlan gradual_schedule(int standard_view, const std::vector<int>& all_views, std::size_t epochs_per_stage) {
  check_view_angle(standard_view);
  std::set<int> views(all_views.begin(), all_views.end());
  for (int v : views) check_view_angle(v);
  if (!views.count(standard_view))
    fail(ErrorKind::Config, "standard view " + std::to_string(standard_view) + " is not among the training views");
  std::map<int, std::vector<int>> by_distance;
  for (int v : views) by_distance[std::abs(v - standard_view)].push_back(v);
  TrainPlan plan;
  plan.mode = TrainMode::Gradual;
  plan.standard_view = standard_view;
  for (const auto& [d, vs] : by_distance) plan.stages.push_back({vs, epochs_per_stage});
  return plan;
}

TrainPlan base_plan(int standard_view, const std::vector<int>& all_views, std::size_t epochs) {
  check_view_angle(standard_view);
  std::set<int> views(all_views.begin(), all_views.end());
  for (int v : views) check_view_angle(v);
  if (!views.count(standard_view))
    fail(ErrorKind::Config, "standard view " + std::to_string(standard_view) + " is not among the training views");
  TrainPlan plan;
  plan.mode = TrainMode::Base;
  plan.standard_view = standard_view;
  plan.stages.push_back({std::vector<int>(views.begin(), views.end()), epochs});
  return plan;
}

// ---------------------------------------------------------------- optimizer

template <typename T>
Optimizer<T>::Optimizer(const OptimizerConfig& config, std::vector<std::pair<std::string, Tensor<T>>> params)
    : cfg_(config), params_(std::move(params)) {
  reset();
}

template <typename T>
void Optimizer<T>::reset() {
  t_ = 0;
  m_.assign(params_.size(), {});
  v_.assign(params_.size(), {});
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].second.numel(), 0.0);
    if (cfg_.kind == OptimizerKind::Adam) v_[i].assign(params_[i].second.numel(), 0.0);
  }
}

template <typename T>
void Optimizer<T>::step() {
  for (const auto& [name, p] : params_)
    for (T g : p.grad())
      if (!std::isfinite(static_cast<double>(g))) fail(ErrorKind::Numeric, "non-finite gradient in parameter " + name);
  ++t_;
  const double lr = cfg_.learning_rate, wd = cfg_.weight_decay;
  const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_)), c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      double gk = g.empty() ? 0.0 : static_cast<double>(g[k]);
      if (wd != 0.0) gk += wd * static_cast<double>(w[k]);
      double update;
      if (cfg_.kind == OptimizerKind::Sgd) {
        m[k] = cfg_.momentum * m[k] + gk;
        update = lr * m[k];
      } else {
        auto& v = v_[i];
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * gk * gk;
        update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.epsilon);
      }
      if (update != 0.0) w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
    }
    p.zero_grad();
  }
}

// --------------------------------------------------------------- evaluation

std::map<int, double> evaluate_predictor(const std::vector<data::Frame>& frames, const Predictor& predict,
                                         const std::vector<int>* views, std::vector<std::string>* warnings) {
  std::map<int, std::vector<const data::Frame*>> groups;
  for (const auto& f : frames) groups[f.view].push_back(&f);
  std::vector<int> wanted;
  if (views)
    wanted = *views;
  else
    for (const auto& [v, _] : groups) wanted.push_back(v);
  std::map<int, double> out;
  for (int v : wanted) {
    const auto it = groups.find(v);
    if (it == groups.end() || it->second.empty()) {
      if (warnings) warnings->push_back("no validation frames at view " + std::to_string(v));
      continue;
    }
    const auto labels = predict(v, it->second);
    if (labels.size() != it->second.size()) fail(ErrorKind::Shape, "predictor returned the wrong number of labels");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == it->second[i]->label;
    out[v] = static_cast<double>(correct) / static_cast<double>(labels.size());
  }
  return out;
}

template <typename T>
Predictor model_predictor(model::SmvitModel<T>& model, const view::FactorRegistry* registry, std::size_t batch_size) {
  return [&model, registry, batch_size](int v, const std::vector<const data::Frame*>& frames) {
    std::vector<std::size_t> out;
    out.reserve(frames.size());
    for (std::size_t i = 0; i < frames.size(); i += batch_size) {
      const std::size_t n = std::min(batch_size, frames.size() - i);
      const auto p = model.predict(model::frames_tensor<T>(std::span<const data::Frame* const>(frames.data() + i, n)),
                                   v, registry);
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  };
}

template <typename T>
std::map<int, double> evaluate_per_view(model::SmvitModel<T>& model, const view::FactorRegistry* registry,
                                        const std::vector<data::Frame>& frames, const std::vector<int>* views,
                                        std::vector<std::string>* warnings) {
  return evaluate_predictor(frames, model_predictor(model, registry), views, warnings);
}

template <typename T>
std::map<Condition, double> evaluate_per_condition(model::SmvitModel<T>& model, const view::FactorRegistry* registry,
                                                   const std::vector<data::Frame>& frames) {
  std::map<Condition, std::vector<data::Frame>> by_cond;
  for (const auto& f : frames) by_cond[f.key.condition].push_back(f);
  std::map<Condition, double> out;
  for (const auto& [c, list] : by_cond) {
    const auto acc = evaluate_per_view(model, registry, list);
    double s = 0;
    for (const auto& [_, a] : acc) s += a;
    out[c] = s / static_cast<double>(acc.size());
  }
  return out;
}

// ----------------------------------------------------------------- training

namespace {

struct StageData {
  std::vector<const data::Frame*> samples;                    // branch b candidates
  std::map<std::size_t, std::vector<const data::Frame*>> partners;  // branch a candidates by label
  std::vector<const data::Frame*> all_partners;
  std::vector<data::Frame> frames;                             // active training frames (registry, accuracy)
};

StageData stage_data(const TrainPlan& plan, std::size_t stage, const data::DatasetSplit& split) {
  const auto active = plan.active_views(stage);
  StageData d;
  std::set<int> present;
  for (const auto& f : split.train) {
    if (!std::binary_search(active.begin(), active.end(), f.view)) continue;
    present.insert(f.view);
    d.samples.push_back(&f);
    d.frames.push_back(f);
    const bool partner = plan.pair_policy == PairPolicy::OffsetOffset || f.view == plan.standard_view;
    if (partner) {
      d.partners[f.label].push_back(&f);
      d.all_partners.push_back(&f);
    }
  }
  for (int v : plan.stages[stage].views)
    if (!present.count(v))
      fail(ErrorKind::Protocol, "stage " + std::to_string(stage) + " has no training frames at view " + std::to_string(v));
  if (d.all_partners.empty())
    fail(ErrorKind::Protocol, "no training frames at the standard view " + std::to_string(plan.standard_view));
  return d;
}

}  // namespace

template <typename T>
TrainResult train(model::SmvitModel<T>& model, const TrainPlan& plan, const data::DatasetSplit& split,
                  const TrainCallbacks& callbacks) {
  plan.validate();
  if (plan.standard_view != model.config().standard_view)
    fail(ErrorKind::Config, "plan and model disagree on the standard view");
  for (const auto& f : split.train)
    if (f.label >= model.config().num_subjects)
      fail(ErrorKind::Label, "training label " + std::to_string(f.label) + " exceeds the model's subject count");

  TrainResult result;
  auto params = model.parameters().params;
  Optimizer<T> opt(plan.optimizer, params);
  std::size_t epoch = 0, steps = 0;
  const double contrastive = model.config().contrastive_weight;

  for (std::size_t stage = 0; stage < plan.stages.size(); ++stage) {
    const StageData data = stage_data(plan, stage, split);
    const auto active = plan.active_views(stage);
    std::optional<view::FactorRegistry> registry;
    if (plan.mode == TrainMode::Gradual && stage > 0) {
      registry = model::build_factor_registry(model, data.frames, plan.registry_pairing);
      // Train with exactly the values a reloaded registry holds.
      registry->round_to_persisted_precision();
    }
    const view::FactorRegistry* reg = registry ? &*registry : nullptr;
    opt.reset();

    for (std::size_t e = 0; e < plan.stages[stage].epochs; ++e) {
      ++epoch;
      const auto t0 = std::chrono::steady_clock::now();
      Rng rng(Rng::mix(plan.seed, epoch));
      std::vector<const data::Frame*> order = data.samples;
      rng.shuffle(std::span<const data::Frame*>(order));

      double loss_sum = 0.0;
      for (std::size_t i = 0; i < order.size(); i += plan.batch_size) {
        const std::size_t n = std::min(plan.batch_size, order.size() - i);
        std::vector<const data::Frame*> a(n), b(order.begin() + static_cast<std::ptrdiff_t>(i),
                                             order.begin() + static_cast<std::ptrdiff_t>(i + n));
        model::SiamesePair<T> pair;
        for (std::size_t r = 0; r < n; ++r) {
          const auto it = data.partners.find(b[r]->label);
          const auto& pool = it != data.partners.end() ? it->second : data.all_partners;
          a[r] = pool[rng.index(pool.size())];
          pair.views_a.push_back(a[r]->view);
          pair.views_b.push_back(b[r]->view);
          pair.labels_a.push_back(a[r]->label);
          pair.labels_b.push_back(b[r]->label);
        }
        pair.a = model::frames_tensor<T>(std::span<const data::Frame* const>(a));
        pair.b = model::frames_tensor<T>(std::span<const data::Frame* const>(b));
        const auto out = model.forward_pair(pair, reg);
        const auto loss = model::pair_loss(out, pair.labels_a, pair.labels_b, contrastive);
        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l)) fail(ErrorKind::Numeric, "training loss became non-finite at epoch " + std::to_string(epoch));
        loss.backward();
        opt.step();
        ++steps;
        if (callbacks.on_step) callbacks.on_step(steps);
        loss_sum += l * static_cast<double>(n);
      }

      EpochMetrics m;
      m.stage = stage;
      m.epoch = epoch;
      m.views_active = active;
      m.train_loss = loss_sum / static_cast<double>(order.size());
      const auto train_acc = evaluate_per_view(model, reg, data.frames);
      std::size_t total = 0;
      double correct = 0;
      for (const auto& [v, acc] : train_acc) {
        const auto n = static_cast<std::size_t>(std::count_if(data.frames.begin(), data.frames.end(),
                                                              [v = v](const data::Frame& f) { return f.view == v; }));
        correct += acc * static_cast<double>(n);
        total += n;
      }
      m.train_accuracy = correct / static_cast<double>(total);
      m.val_accuracy_per_view = evaluate_per_view(model, reg, split.val, &active);
      if (!plan.deterministic)
        m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (callbacks.on_epoch) callbacks.on_epoch(m);
      result.metrics.push_back(std::move(m));
    }
    if (stage + 1 == plan.stages.size()) result.registry = registry;
  }
  return result;
}

// ------------------------------------------------------------------ reports

AblationReport ablation_report(const std::vector<EpochMetrics>& base, const std::vector<EpochMetrics>& gradual,
                               int standard_view) {
  if (base.empty() || gradual.empty()) fail(ErrorKind::Comparison, "ablation needs two non-empty metric streams");
  auto summarize = [](const std::vector<EpochMetrics>& ms, std::map<int, double>& initial, std::map<int, double>& best,
                      LossSummary& loss) {
    loss.first = ms.front().train_loss;
    loss.last = ms.back().train_loss;
    loss.min = loss.first;
    loss.epochs = ms.size();
    for (const auto& m : ms) {
      loss.min = std::min(loss.min, m.train_loss);
      for (const auto& [v, a] : m.val_accuracy_per_view) {
        initial.emplace(v, a);
        auto [it, fresh] = best.emplace(v, a);
        if (!fresh) it->second = std::max(it->second, a);
      }
    }
  };
  AblationReport r;
  r.standard_view = standard_view;
  std::map<int, double> ib, ig, mb, mg;
  summarize(base, ib, mb, r.base_loss);
  summarize(gradual, ig, mg, r.gradual_loss);
  std::set<int> vb, vg;
  for (const auto& [v, _] : ib) vb.insert(v);
  for (const auto& [v, _] : ig) vg.insert(v);
  if (vb != vg) fail(ErrorKind::Comparison, "base and gradual runs were evaluated on different views");
  std::size_t off = 0;
  for (int v : vb) {
    AblationRow row{v, ib[v], ig[v], mb[v], mg[v]};
    if (v != standard_view) {
      r.mean_initial_delta += row.initial_delta();
      r.mean_max_delta += row.max_delta();
      ++off;
    }
    r.rows.push_back(row);
  }
  if (off) {
    r.mean_initial_delta /= static_cast<double>(off);
    r.mean_max_delta /= static_cast<double>(off);
  }
  return r;
}

std::string AblationReport::to_json() const {
  json rows_j = json::array();
  for (const auto& row : rows)
    rows_j.push_back({{"view", row.view},
                      {"initial_base", row.initial_base},
                      {"initial_gradual", row.initial_gradual},
                      {"max_base", row.max_base},
                      {"max_gradual", row.max_gradual},
                      {"initial_delta", row.initial_delta()},
                      {"max_delta", row.max_delta()}});
  auto loss_j = [](const LossSummary& l) {
    return json{{"first", l.first}, {"last", l.last}, {"min", l.min}, {"epochs", l.epochs}};
  };
  const json j{{"standard_view", standard_view},
               {"rows", rows_j},
               {"mean_initial_delta", mean_initial_delta},
               {"mean_max_delta", mean_max_delta},
               {"base_loss", loss_j(base_loss)},
               {"gradual_loss", loss_j(gradual_loss)}};
  return j.dump(2) + "\n";
}

std::string metrics_json_line(const EpochMetrics& m) {
  json acc = json::object();
  for (const auto& [v, a] : m.val_accuracy_per_view) acc[std::to_string(v)] = a;
  const json j{{"stage", m.stage},
               {"epoch", m.epoch},
               {"views_active", m.views_active},
               {"train_loss", m.train_loss},
               {"train_accuracy", m.train_accuracy},
               {"val_accuracy_per_view", acc},
               {"wall_time_s", m.wall_time_s}};
  return j.dump();
}

EpochMetrics metrics_from_json_line(const std::string& line) {
  const json j = parse_json(line, "metrics record", true);
  EpochMetrics m;
  try {
    m.stage = j.at("stage").get<std::size_t>();
    m.epoch = j.at("epoch").get<std::size_t>();
    m.views_active = j.at("views_active").get<std::vector<int>>();
    m.train_loss = j.at("train_loss").get<double>();
    m.train_accuracy = j.at("train_accuracy").get<double>();
    for (const auto& [k, v] : j.at("val_accuracy_per_view").items()) m.val_accuracy_per_view[std::stoi(k)] = v.get<double>();
    m.wall_time_s = j.at("wall_time_s").get<double>();
  } catch (const std::exception& e) {
    fail(ErrorKind::Load, std::string("malformed metrics record: ") + e.what());
  }
  return m;
}

void write_metrics_jsonl(const std::string& path, const std::vector<EpochMetrics>& metrics) {
  std::ofstream out(path);
  if (!out) fail(ErrorKind::Io, "cannot write " + path);
  for (const auto& m : metrics) out << metrics_json_line(m) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

std::vector<EpochMetrics> read_metrics_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read " + path);
  std::vector<EpochMetrics> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metrics_from_json_line(line));
  return out;
}

std::string accuracy_table_csv(const std::map<int, double>& per_view) {
  std::string header, row;
  for (std::size_t i = 0; i < kAllViews.size(); ++i) {
    const int v = kAllViews[i];
    if (i) header += ',', row += ',';
    header += std::to_string(v);
    const auto it = per_view.find(v);
    if (it != per_view.end()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", it->second);
      row += buf;
    }
  }
  return header + "\n" + row + "\n";
}

std::string condition_summary_csv(const std::map<Condition, double>& per_condition) {
  std::string out = "condition,accuracy\n";
  for (const auto& [c, a] : per_condition) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", a);
    out += std::string(condition_name(c)) + "," + buf + "\n";
  }
  return out;
}

#define SMVIT_INSTANTIATE_TRAIN(T)                                                                                   \
  template class Optimizer<T>;                                                                                       \
  template TrainResult train<T>(model::SmvitModel<T>&, const TrainPlan&, const data::DatasetSplit&,                 \
                                const TrainCallbacks&);                                                              \
  template Predictor model_predictor<T>(model::SmvitModel<T>&, const view::FactorRegistry*, std::size_t);            \
  template std::map<int, double> evaluate_per_view<T>(model::SmvitModel<T>&, const view::FactorRegistry*,            \
                                                      const std::vector<data::Frame>&, const std::vector<int>*,      \
                                                      std::vector<std::string>*);                                    \
  template std::map<Condition, double> evaluate_per_condition<T>(model::SmvitModel<T>&, const view::FactorRegistry*, \
                                                                 const std::vector<data::Frame>&);

SMVIT_INSTANTIATE_TRAIN(float)
SMVIT_INSTANTIATE_TRAIN(double)

}  // namespace smvit::train
