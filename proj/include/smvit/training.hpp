#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "smvit/dataset.hpp"
#include "smvit/model.hpp"

namespace smvit::train {

enum class TrainMode { Base, Gradual };
enum class OptimizerKind { Adam, Sgd };
/// Which samples fill branch a: a standard-view frame, or any active view.
enum class PairPolicy { StandardOffset, OffsetOffset };

std::string_view mode_name(TrainMode m);  // "base", "gradual"
bool parse_mode(std::string_view text, TrainMode& out);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 3e-4;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  bool operator==(const OptimizerConfig&) const = default;
};

struct StagePlan {
  std::vector<int> views;  // views introduced by this stage
  std::size_t epochs = 15;
  bool operator==(const StagePlan&) const = default;
};

struct TrainPlan {
  TrainMode mode = TrainMode::Base;
  int standard_view = kDefaultStandardView;
  std::vector<StagePlan> stages;
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  bool deterministic = true;
  PairPolicy pair_policy = PairPolicy::StandardOffset;
  view::Pairing registry_pairing = view::Pairing::ByIdentity;

  /// Views trained during `stage`: everything introduced up to it.
  std::vector<int> active_views(std::size_t stage) const;
  std::size_t total_epochs() const;
  /// ConfigError unless the stage layout follows the mode's rule.
  void validate() const;
  bool operator==(const TrainPlan&) const = default;
};

/// Stages grow outward from the standard view: views at the next larger
/// angular distance present in `all_views` join together, one stage each.
TrainPlan gradual_schedule(int standard_view, const std::vector<int>& all_views, std::size_t epochs_per_stage);
/// A single stage over every view.
TrainPlan base_plan(int standard_view, const std::vector<int>& all_views, std::size_t epochs);

// ---------------------------------------------------------------- optimizer

/// SGD with momentum or Adam over a fixed parameter list. step() consumes the
/// accumulated gradients and clears them.
template <typename T>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& config, std::vector<std::pair<std::string, Tensor<T>>> params);

  /// NumericError naming the parameter when a gradient is not finite; no
  /// parameter is modified in that case.
  void step();
  void reset();
  std::size_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ----------------------------------------------------------------- training

struct EpochMetrics {
  std::size_t stage = 0;
  std::size_t epoch = 0;  // 1-based, counted across stages
  std::vector<int> views_active;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::map<int, double> val_accuracy_per_view;
  double wall_time_s = 0.0;
  bool operator==(const EpochMetrics&) const = default;
};

struct TrainCallbacks {
  std::function<void(const EpochMetrics&)> on_epoch;
  /// After every optimizer step, with the running step count.
  std::function<void(std::size_t)> on_step;
};

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  /// Registry in use at the end of training (absent for Base runs and
  /// single-stage Gradual runs).
  std::optional<view::FactorRegistry> registry;
};

/// Runs every stage of `plan` on `split`. Gradual stages after the first
/// rebuild the factor registry from the active training frames at stage
/// start; weights carry over between stages and the optimizer state resets.
template <typename T>
TrainResult train(model::SmvitModel<T>& model, const TrainPlan& plan, const data::DatasetSplit& split,
                  const TrainCallbacks& callbacks = {});

// --------------------------------------------------------------- evaluation

using Predictor = std::function<std::vector<std::size_t>(int view, const std::vector<const data::Frame*>& frames)>;

/// Within-view accuracy for each view of `frames` (or of `views` when given;
/// a requested view without frames is omitted with a warning).
std::map<int, double> evaluate_predictor(const std::vector<data::Frame>& frames, const Predictor& predict,
                                         const std::vector<int>* views = nullptr,
                                         std::vector<std::string>* warnings = nullptr);

template <typename T>
Predictor model_predictor(model::SmvitModel<T>& model, const view::FactorRegistry* registry,
                          std::size_t batch_size = 128);

template <typename T>
std::map<int, double> evaluate_per_view(model::SmvitModel<T>& model, const view::FactorRegistry* registry,
                                        const std::vector<data::Frame>& frames,
                                        const std::vector<int>* views = nullptr,
                                        std::vector<std::string>* warnings = nullptr);

/// Per-condition mean of the within-view accuracies.
template <typename T>
std::map<Condition, double> evaluate_per_condition(model::SmvitModel<T>& model, const view::FactorRegistry* registry,
                                                   const std::vector<data::Frame>& frames);

// ------------------------------------------------------------------ reports

struct AblationRow {
  int view = 0;
  double initial_base = 0, initial_gradual = 0;
  double max_base = 0, max_gradual = 0;
  double initial_delta() const { return initial_gradual - initial_base; }
  double max_delta() const { return max_gradual - max_base; }
};

struct LossSummary {
  double first = 0, last = 0, min = 0;
  std::size_t epochs = 0;
};

struct AblationReport {
  int standard_view = kDefaultStandardView;
  std::vector<AblationRow> rows;
  /// Means of the deltas over views other than the standard view.
  double mean_initial_delta = 0, mean_max_delta = 0;
  LossSummary base_loss, gradual_loss;
  std::string to_json() const;
};

/// Initial accuracy of a view is its validation accuracy in the first epoch
/// it was active. ComparisonError when the runs cover different views.
AblationReport ablation_report(const std::vector<EpochMetrics>& base, const std::vector<EpochMetrics>& gradual,
                               int standard_view = kDefaultStandardView);

std::string metrics_json_line(const EpochMetrics& m);
EpochMetrics metrics_from_json_line(const std::string& line);
void write_metrics_jsonl(const std::string& path, const std::vector<EpochMetrics>& metrics);
std::vector<EpochMetrics> read_metrics_jsonl(const std::string& path);

/// Header of the 11 view angles and one row of accuracies (blank where a
/// view is absent).
std::string accuracy_table_csv(const std::map<int, double>& per_view);
/// "condition,accuracy" rows for NM, BG, CL (those present).
std::string condition_summary_csv(const std::map<Condition, double>& per_condition);

}  // namespace smvit::train
