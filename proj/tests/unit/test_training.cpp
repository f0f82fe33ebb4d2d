#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "smvit/config_json.hpp"
#include "smvit/error.hpp"
#include "smvit/rng.hpp"
#include "smvit/training.hpp"

using namespace smvit;
using namespace smvit::train;
namespace fs = std::filesystem;

namespace {

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::Io;
}

Tensor<double> param(std::vector<double> w, std::vector<double> g) {
  const std::size_t n = w.size();
  auto t = Tensor<double>::from({n}, std::move(w), true);
  std::copy(g.begin(), g.end(), t.mutable_grad().begin());
  return t;
}

std::vector<std::vector<int>> stage_views(const TrainPlan& p) {
  std::vector<std::vector<int>> out;
  for (const auto& s : p.stages) out.push_back(s.views);
  return out;
}

const data::DatasetSplit& fixture() {
  static const data::DatasetSplit split = [] {
    data::SynthSpec s;
    s.n_subjects = 3;
    s.views = {54, 90};
    s.frames_per_sequence = 20;
    s.height = s.width = 32;
    s.seed = 4;
    return data::split_7_3(data::synth_generate(s), 4);
  }();
  return split;
}

}  // namespace

TEST_CASE("optimizer updates") {
  SUBCASE("sgd step") {
    OptimizerConfig c;
    c.kind = OptimizerKind::Sgd;
    c.learning_rate = 0.1;
    c.momentum = 0.0;
    auto w = param({1.0}, {0.5});
    Optimizer<double> opt(c, {{"w", w}});
    opt.step();
    CHECK(w.at(0) == doctest::Approx(0.95).epsilon(1e-15));
    CHECK_FALSE(w.has_grad());
  }
  SUBCASE("sgd momentum accumulates") {
    OptimizerConfig c;
    c.kind = OptimizerKind::Sgd;
    c.learning_rate = 0.1;
    c.momentum = 0.9;
    auto w = param({0.0}, {1.0});
    Optimizer<double> opt(c, {{"w", w}});
    opt.step();
    w.mutable_grad()[0] = 1.0;
    opt.step();
    CHECK(w.at(0) == doctest::Approx(-0.1 - 0.19).epsilon(1e-12));
  }
  SUBCASE("zero gradient leaves parameters bitwise unchanged") {
    for (auto kind : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
      OptimizerConfig c;
      c.kind = kind;
      const std::vector<double> init{0.3, -1.7, 1e-300};
      auto w = param(init, {0.0, 0.0, 0.0});
      auto untouched = Tensor<double>::from({2}, {4.0, 5.0}, true);
      Optimizer<double> opt(c, {{"w", w}, {"u", untouched}});
      opt.step();
      for (std::size_t i = 0; i < init.size(); ++i) CHECK(w.at(i) == init[i]);
      CHECK(untouched.at(0) == 4.0);
    }
  }
  SUBCASE("adam first step moves by the learning rate") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      OptimizerConfig c;
      c.learning_rate = 1e-3;
      const double w0 = rng.uniform(-2, 2), g = rng.uniform(1e-3, 10);
      auto w = param({w0}, {g});
      Optimizer<double> opt(c, {{"w", w}});
      opt.step();
      CHECK(w0 - w.at(0) == doctest::Approx(1e-3).epsilon(1e-4));
    }
  }
  SUBCASE("non-finite gradients are rejected before any update") {
    auto a = param({1.0}, {0.1});
    auto b = param({2.0}, {std::numeric_limits<double>::quiet_NaN()});
    Optimizer<double> opt({}, {{"first", a}, {"second.weight", b}});
    try {
      opt.step();
      FAIL("expected numeric error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Numeric);
      CHECK(std::string(e.what()).find("second.weight") != std::string::npos);
    }
    CHECK(a.at(0) == 1.0);
  }
}

TEST_CASE("gradual schedule") {
  const std::vector<int> all(kAllViews.begin(), kAllViews.end());
  const auto full = gradual_schedule(90, all, 15);
  CHECK(stage_views(full) == std::vector<std::vector<int>>{{90}, {72, 108}, {54, 126}, {36, 144}, {18, 162}, {0, 180}});
  CHECK(full.total_epochs() == 90);
  CHECK(full.active_views(2) == std::vector<int>{54, 72, 90, 108, 126});
  CHECK_NOTHROW(full.validate());

  CHECK(stage_views(gradual_schedule(90, {90}, 3)) == std::vector<std::vector<int>>{{90}});
  CHECK(stage_views(gradual_schedule(90, {126, 54, 90}, 3)) == std::vector<std::vector<int>>{{90}, {54, 126}});
  CHECK(kind_of([] { gradual_schedule(90, {0, 54}, 3); }) == ErrorKind::Config);

  const auto base = base_plan(90, all, 15);
  CHECK(base.stages.size() == 1);
  CHECK(base.stages[0].views.size() == 11);

  SUBCASE("newly introduced distances strictly increase") {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<int> views;
      for (int v : kAllViews)
        if (rng.uniform() < 0.5) views.push_back(v);
      const int standard = kAllViews[rng.index(kAllViews.size())];
      views.push_back(standard);
      const auto plan = gradual_schedule(standard, views, 1);
      CHECK_NOTHROW(plan.validate());
      int prev = -1;
      for (const auto& s : plan.stages) {
        const int d = std::abs(s.views[0] - standard);
        CHECK(d > prev);
        CHECK(d % 18 == 0);
        for (int v : s.views) CHECK(std::abs(v - standard) == d);
        prev = d;
      }
      const std::set<int> unique(views.begin(), views.end());
      CHECK(plan.active_views(plan.stages.size() - 1) == std::vector<int>(unique.begin(), unique.end()));
    }
  }
  SUBCASE("plan validation") {
    auto p = full;
    p.stages[0].views = {72, 90};
    CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
    p = full;
    std::swap(p.stages[1], p.stages[2]);
    CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
    p = full;
    p.stages[1].views = {72, 54};
    CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
    p = base;
    p.stages.push_back({{0}, 1});
    CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
    p = base;
    p.batch_size = 0;
    CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
  }
  SUBCASE("text form") {
    auto p = full;
    p.optimizer.kind = OptimizerKind::Sgd;
    p.pair_policy = PairPolicy::OffsetOffset;
    const json j = p;
    CHECK(j.get<TrainPlan>() == p);
    CHECK(kind_of([] { parse_json(R"({"mode":"sideways"})", "t").get<TrainPlan>(); }) == ErrorKind::Config);
  }
}

TEST_CASE("per-view evaluation") {
  data::SynthSpec s;
  s.n_subjects = 4;
  s.views = {0, 90, 180};
  s.frames_per_sequence = 12;
  s.height = s.width = 16;
  const auto frames = data::synth_generate(s);

  const Predictor oracle = [](int, const std::vector<const data::Frame*>& fs) {
    std::vector<std::size_t> out;
    for (const auto* f : fs) out.push_back(f->label);
    return out;
  };
  const Predictor constant = [](int, const std::vector<const data::Frame*>& fs) {
    return std::vector<std::size_t>(fs.size(), 2);
  };
  for (const auto& [v, a] : evaluate_predictor(frames, oracle)) CHECK(a == 1.0);
  for (const auto& [v, a] : evaluate_predictor(frames, constant)) CHECK(a == doctest::Approx(0.25));

  SUBCASE("views are evaluated independently") {
    const Predictor noisy = [](int v, const std::vector<const data::Frame*>& fs) {
      std::vector<std::size_t> out;
      for (const auto* f : fs) out.push_back((f->label + f->key.frame + std::size_t(v)) % 4);
      return out;
    };
    const auto all = evaluate_predictor(frames, noisy);
    std::vector<data::Frame> only0;
    for (const auto& f : frames)
      if (f.view == 0) only0.push_back(f);
    CHECK(evaluate_predictor(only0, noisy).at(0) == all.at(0));
  }
  SUBCASE("requested views without frames are omitted with a warning") {
    std::vector<std::string> warnings;
    const std::vector<int> want{0, 54};
    const auto acc = evaluate_predictor(frames, oracle, &want, &warnings);
    CHECK(acc.size() == 1);
    CHECK(acc.count(0) == 1);
    CHECK(warnings.size() == 1);
  }
  SUBCASE("table row shape") {
    std::map<int, double> per_view;
    for (int v : kAllViews) per_view[v] = v / 180.0;
    const auto csv = accuracy_table_csv(per_view);
    const auto nl = csv.find('\n');
    const auto header = csv.substr(0, nl), row = csv.substr(nl + 1, csv.size() - nl - 2);
    CHECK(header == "0,18,36,54,72,90,108,126,144,162,180");
    CHECK(std::count(row.begin(), row.end(), ',') == 10);
    CHECK(row.substr(0, 9) == "0.000000,");
    CHECK(accuracy_table_csv({{90, 0.5}}) == "0,18,36,54,72,90,108,126,144,162,180\n,,,,,0.500000,,,,,\n");
    CHECK(condition_summary_csv({{Condition::NM, 0.75}, {Condition::CL, 0.5}}) ==
          "condition,accuracy\nnm,0.750000\ncl,0.500000\n");
  }
}

TEST_CASE("training on the synthetic fixture") {
  const auto& split = fixture();
  auto run = [&](TrainMode mode, std::size_t epochs) {
    model::SmvitModel<float> m(model::SmvitConfig::compact(3), 11);
    auto plan = mode == TrainMode::Base ? base_plan(90, {54, 90}, epochs) : gradual_schedule(90, {54, 90}, epochs);
    plan.seed = 11;
    auto result = train::train(m, plan, split);
    return std::pair{std::move(result), m.parameter_checksum(0)};
  };

  const auto [base, checksum] = run(TrainMode::Base, 10);
  REQUIRE(base.metrics.size() == 10);
  CHECK_FALSE(base.registry.has_value());
  for (const auto& m : base.metrics) {
    CHECK(m.stage == 0);
    CHECK(m.wall_time_s == 0.0);
    CHECK(m.views_active == std::vector<int>{54, 90});
    CHECK(m.train_accuracy >= 0.0);
    CHECK(m.train_accuracy <= 1.0);
    for (const auto& [v, a] : m.val_accuracy_per_view) {
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
    }
  }
  MESSAGE("loss epoch 1 " << base.metrics[0].train_loss << ", epoch 10 " << base.metrics[9].train_loss);
  CHECK(base.metrics[9].train_loss < base.metrics[0].train_loss);

  SUBCASE("deterministic reruns are bitwise identical") {
    const auto [again, checksum2] = run(TrainMode::Base, 10);
    CHECK(again.metrics == base.metrics);
    CHECK(checksum2 == checksum);
    for (std::size_t i = 0; i < base.metrics.size(); ++i)
      CHECK(metrics_json_line(again.metrics[i]) == metrics_json_line(base.metrics[i]));
  }
  SUBCASE("gradual run") {
    const auto [grad, _] = run(TrainMode::Gradual, 3);
    REQUIRE(grad.metrics.size() == 6);
    CHECK(grad.metrics[0].views_active == std::vector<int>{90});
    CHECK(grad.metrics[0].val_accuracy_per_view.count(54) == 0);
    CHECK(grad.metrics[3].stage == 1);
    CHECK(grad.metrics[3].val_accuracy_per_view.count(54) == 1);
    REQUIRE(grad.registry.has_value());
    CHECK(grad.registry->contains(54));
    // The registry in use was rounded as if reloaded from disk.
    const auto reloaded = view::FactorRegistry::from_json(grad.registry->to_json());
    CHECK(reloaded.at(54).factor == grad.registry->at(54).factor);
  }
  SUBCASE("evaluation reproduces the final epoch") {
    model::SmvitModel<float> m(model::SmvitConfig::compact(3), 11);
    auto plan = base_plan(90, {54, 90}, 2);
    const auto r = train::train(m, plan, split);
    const auto acc = evaluate_per_view(m, nullptr, split.val);
    for (const auto& [v, a] : r.metrics.back().val_accuracy_per_view) CHECK(std::abs(acc.at(v) - a) < 1e-9);
  }
  SUBCASE("shuffled labels land near chance") {
    model::SmvitModel<float> m(model::SmvitConfig::compact(3), 11);
    train::train(m, base_plan(90, {54, 90}, 6), split);
    auto shuffled = split.val;
    std::vector<std::size_t> labels;
    for (const auto& f : shuffled) labels.push_back(f.label);
    Rng rng(12);
    rng.shuffle(std::span<std::size_t>(labels));
    for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].label = labels[i];
    const auto acc = evaluate_per_view(m, nullptr, shuffled);
    double s = 0;
    for (const auto& [_, a] : acc) s += a;
    const double mean = s / double(acc.size());
    MESSAGE("shuffled-label accuracy " << mean);
    CHECK(std::abs(mean - 1.0 / 3.0) <= 0.1);
  }
}

TEST_CASE("training protocol errors") {
  const auto& split = fixture();
  model::SmvitModel<float> m(model::SmvitConfig::compact(3), 1);
  data::DatasetSplit no_standard = split;
  std::erase_if(no_standard.train, [](const data::Frame& f) { return f.view == 90; });
  CHECK(kind_of([&] { train::train(m, base_plan(90, {54, 90}, 1), no_standard); }) == ErrorKind::Protocol);
  CHECK(kind_of([&] { train::train(m, base_plan(90, {0, 90}, 1), split); }) == ErrorKind::Protocol);
  model::SmvitModel<float> small(model::SmvitConfig::compact(2), 1);
  CHECK(kind_of([&] { train::train(small, base_plan(90, {54, 90}, 1), split); }) == ErrorKind::Label);
}

TEST_CASE("ablation report") {
  auto stream = [](std::vector<std::map<int, double>> accs, double loss0) {
    std::vector<EpochMetrics> out;
    for (std::size_t i = 0; i < accs.size(); ++i) {
      EpochMetrics m;
      m.epoch = i + 1;
      m.train_loss = loss0 / double(i + 1);
      m.val_accuracy_per_view = accs[i];
      for (const auto& [v, _] : accs[i]) m.views_active.push_back(v);
      out.push_back(m);
    }
    return out;
  };
  const auto base = stream({{{0, 0.2}, {90, 0.5}}, {{0, 0.4}, {90, 0.9}}, {{0, 0.3}, {90, 0.8}}}, 1.2);
  const auto same = ablation_report(base, base);
  for (const auto& r : same.rows) {
    CHECK(r.initial_delta() == 0.0);
    CHECK(r.max_delta() == 0.0);
  }
  CHECK(same.mean_initial_delta == 0.0);

  const auto gradual = stream({{{90, 0.6}}, {{90, 0.8}}, {{0, 0.7}, {90, 0.9}}, {{0, 0.5}, {90, 0.95}}}, 1.0);
  const auto r = ablation_report(base, gradual);
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].view == 0);
  CHECK(r.rows[0].initial_base == 0.2);
  CHECK(r.rows[0].initial_gradual == 0.7);
  CHECK(r.rows[0].max_base == 0.4);
  CHECK(r.rows[0].max_gradual == 0.7);
  CHECK(r.mean_initial_delta == doctest::Approx(0.5));
  CHECK(r.mean_max_delta == doctest::Approx(0.3));
  CHECK(r.gradual_loss.epochs == 4);
  CHECK(r.base_loss.min == doctest::Approx(0.4));

  const auto j = parse_json(r.to_json(), "report");
  for (const char* key : {"view", "initial_base", "initial_gradual", "max_base", "max_gradual"})
    CHECK(j["rows"][0].contains(key));

  const auto other = stream({{{54, 0.2}, {90, 0.5}}}, 1.0);
  CHECK(kind_of([&] { ablation_report(base, other); }) == ErrorKind::Comparison);
  CHECK(kind_of([&] { ablation_report({}, base); }) == ErrorKind::Comparison);
}

TEST_CASE("metrics records") {
  EpochMetrics m;
  m.stage = 2;
  m.epoch = 31;
  m.views_active = {0, 54, 90};
  m.train_loss = 0.1 + 0.2;
  m.train_accuracy = 2.0 / 3.0;
  m.val_accuracy_per_view = {{0, 1.0 / 7.0}, {90, 0.5}};
  m.wall_time_s = 1.25;
  CHECK(metrics_from_json_line(metrics_json_line(m)) == m);
  const auto j = parse_json(metrics_json_line(m), "line");
  for (const char* key : {"stage", "epoch", "views_active", "train_loss", "val_accuracy_per_view", "wall_time_s"})
    CHECK(j.contains(key));

  const auto path = (fs::temp_directory_path() / "smvit_test_metrics.jsonl").string();
  write_metrics_jsonl(path, {m, m});
  CHECK(read_metrics_jsonl(path) == std::vector<EpochMetrics>{m, m});
  fs::remove(path);
  CHECK(kind_of([] { metrics_from_json_line("{\"stage\":1}"); }) == ErrorKind::Load);
}
