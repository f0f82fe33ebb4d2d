// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Usage: smvit_acceptance [work_dir] [config_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "smvit/blocks.hpp"
#include "smvit/dataset.hpp"
#include "smvit/gradsuite.hpp"
#include "smvit/model.hpp"
#include "smvit/ops.hpp"
#include "smvit/rng.hpp"
#include "smvit/training.hpp"
#include "smvit/view.hpp"

#ifndef SMVIT_CONFIG_DIR
#define SMVIT_CONFIG_DIR "configs"
#endif

using namespace smvit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool passed = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      passed = false;
      detail << "[failed: " << what << "] ";
    }
  }
};

int g_failures = 0;
fs::path g_work;
fs::path g_configs;

void criterion(const std::string& name, const std::function<void(Verdict&)>& body) {
  Verdict v;
  const auto t0 = Clock::now();
  try {
    body(v);
  } catch (const std::exception& e) {
    v.passed = false;
    v.detail << "[exception: " << e.what() << "] ";
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!v.passed) ++g_failures;
  std::printf("%s %-28s %s(%.1f s)\n", v.passed ? "PASS" : "FAIL", name.c_str(), v.detail.str().c_str(), secs);
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) return {};
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

int run_cli(std::vector<std::string> args, std::string* output = nullptr) {
  args.insert(args.begin(), "smvit");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  if (output) *output = out.str() + err.str();
  if (code != 0) std::fprintf(stderr, "smvit exited %d: %s\n", code, err.str().c_str());
  return code;
}

std::string config_path(const char* name) { return (g_configs / name).string(); }

/// Generates the dataset for `seed` once and returns its root.
std::string dataset_for(std::uint64_t seed) {
  const auto root = (g_work / ("data_seed" + std::to_string(seed))).string();
  if (!fs::exists(fs::path(root) / "manifest.json"))
    if (run_cli({"synth", "--config", config_path("synthetic_compact.json"), "--out", root, "--seed",
                 std::to_string(seed)}) != 0)
      throw std::runtime_error("synth failed for seed " + std::to_string(seed));
  return root;
}

/// Trains into a directory named after the run; an existing complete run is reused.
std::string train_run(std::uint64_t seed, const char* mode, const std::string& tag) {
  const auto out = (g_work / (std::string(mode) + "_seed" + std::to_string(seed) + tag)).string();
  if (fs::exists(fs::path(out) / "accuracy.csv")) return out;
  if (run_cli({"train", "--config", config_path("synthetic_compact.json"), "--data-root", dataset_for(seed), "--out",
               out, "--mode", mode, "--seed", std::to_string(seed), "--deterministic"}) != 0)
    throw std::runtime_error(std::string("train failed: ") + mode + " seed " + std::to_string(seed));
  return out;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1.0, 1.0));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

view::FeatureBatch random_batch(Rng& rng, int view_angle, std::size_t subjects, std::size_t frames,
                                std::size_t dim, double offset) {
  view::FeatureBatch b;
  b.view = view_angle;
  b.feat_dim = dim;
  std::vector<double> row(dim);
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t f = 0; f < frames; ++f) {
      for (auto& x : row) x = rng.normal(offset, 2.0);
      SampleKey k;
      k.subject = std::to_string(100 + s);
      k.frame = static_cast<std::uint32_t>(f + 1);
      b.push_back(row, k);
    }
  return b;
}

std::vector<double> column_mean(const view::FeatureBatch& b) {
  std::vector<double> m(b.feat_dim, 0.0);
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t d = 0; d < b.feat_dim; ++d) m[d] += b.row(i)[d];
  for (auto& x : m) x /= static_cast<double>(b.size());
  return m;
}

double distance(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Sum of |w| * (k+1) over every parameter reached through one branch.
template <typename T>
double branch_checksum(model::SmvitModel<T>& m, int branch) {
  nn::ParameterList<T> list;
  m.branch(branch).visit(list, "backbone");
  double s = 0;
  for (const auto& [_, p] : list.params) {
    std::size_t k = 0;
    for (T w : p.data()) s += std::abs(static_cast<double>(w)) * static_cast<double>(++k);
  }
  return s;
}

// ---------------------------------------------------------------- criteria

void gradient_suite(Verdict& v) {
  const auto t0 = Clock::now();
  std::ostringstream table;
  cli::GradcheckOptions options;  // 64-bit, seed 7, 20 instances per op
  const int code = cli::cmd_gradcheck(options, "", table);
  const double secs = seconds_since(t0);

  // Independent re-run to read the numbers back at the stated settings.
  GradSuiteOptions s;
  const auto reports = run_gradcheck_suite<double>(s);
  double worst_op = 0, worst_model = 0;
  std::set<std::string> seen;
  for (const auto& r : reports) {
    seen.insert(r.op_name);
    v.require(r.step == 1e-5, r.op_name + " step");
    if (r.op_name == "smvit_end_to_end") {
      v.require(r.tolerance == 1e-5, "end-to-end tolerance");
      v.require(r.max_rel_error < 1e-5, "end-to-end error");
      worst_model = std::max(worst_model, r.max_rel_error);
    } else {
      v.require(r.tolerance == 1e-6, r.op_name + " tolerance");
      v.require(r.max_rel_error < 1e-6, r.op_name + " error");
      worst_op = std::max(worst_op, r.max_rel_error);
    }
  }
  for (const auto& name : gradcheck_op_names()) v.require(seen.count(name) == 1, "missing " + name);
  v.require(seen.count("smvit_end_to_end") == 1, "missing end-to-end model");
  v.require(code == 0, "cmd_gradcheck exit status");
  v.require(secs < 120.0, "runtime");
  v.detail << reports.size() << " checks, worst op " << worst_op << " (tol 1e-6), end-to-end " << worst_model
           << " (tol 1e-5), cmd_gradcheck " << secs << " s ";
}

void view_algebra(Verdict& v) {
  Rng rng(2024);
  const int trials = 60;
  double worst_zero = 0, worst_anti = 0, worst_mean = 0, worst_dist = 0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t dim = 1 + rng.index(24), subjects = 1 + rng.index(5), frames = 2 + rng.index(8);
    const int source = static_cast<int>(kAllViews[rng.index(5)]);
    const auto x = random_batch(rng, source, subjects, frames, dim, rng.uniform(-3, 3));
    const auto y = random_batch(rng, 90, subjects, frames, dim, rng.uniform(-3, 3));

    for (double f : view::compute_pfc(x, x).factor) worst_zero = std::max(worst_zero, std::abs(f));
    const auto xy = view::compute_pfc(x, y), yx = view::compute_pfc(y, x);
    for (std::size_t d = 0; d < dim; ++d) worst_anti = std::max(worst_anti, std::abs(xy.factor[d] + yx.factor[d]));

    const auto registry = view::build_registry({{source, x}, {90, y}}, 90);
    const auto converted = view::convert_to_standard(x, registry);
    const auto mc = column_mean(converted), my = column_mean(y);
    for (std::size_t d = 0; d < dim; ++d) worst_mean = std::max(worst_mean, std::abs(mc[d] - my[d]));

    const auto& factor = registry.at(source);
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = i + 1; j < x.size(); ++j) {
        const auto a = view::apply_it(x.row(i), factor), b = view::apply_it(x.row(j), factor);
        worst_dist = std::max(worst_dist, std::abs(distance(a, b) - distance(x.row(i), x.row(j))));
      }
  }
  v.require(worst_zero == 0.0, "PFC(X,X) exactly zero");
  v.require(worst_anti <= 1e-12, "antisymmetry");
  v.require(worst_mean < 1e-6, "mean alignment");
  v.require(worst_dist < 1e-9, "distance preservation");
  v.detail << trials << " instances: |PFC(X,X)| " << worst_zero << ", antisymmetry " << worst_anti
           << ", mean alignment " << worst_mean << ", distance " << worst_dist << " ";
}

void structural(Verdict& v) {
  Rng rng(77);
  int fold_ok = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t pw = 1 + rng.index(4), ph = 1 + rng.index(4);
    const std::size_t H = ph * (1 + rng.index(4)), W = pw * (1 + rng.index(4));
    const auto x = random_tensor<double>(rng, {1 + rng.index(3), 1 + rng.index(4), H, W});
    const auto back = fold_patches(unfold_patches(x, pw, ph), H, W, pw, ph);
    fold_ok += back.shape() == x.shape() && std::equal(back.data().begin(), back.data().end(), x.data().begin());
  }
  v.require(fold_ok == 50, "fold(unfold(x)) == x bitwise");

  int shape_ok = 0;
  const int configs = 24;
  for (int t = 0; t < configs; ++t) {
    nn::BlockConfig c;
    c.heads = 1 + rng.index(3);
    c.d_k = 1 + rng.index(4);
    c.token_dim = c.heads * c.d_k;
    c.transformer_depth = 1 + rng.index(2);
    c.ffn_dim = 2 + rng.index(8);
    c.in_channels = c.out_channels = 1 + rng.index(6);
    c.kernel = 1 + 2 * rng.index(2);
    c.patch_w = 1 + rng.index(3);
    c.patch_h = 1 + rng.index(3);
    nn::MobileVitBlock<double> block(c, rng);
    const auto x = random_tensor<double>(
        rng, {1 + rng.index(2), c.in_channels, c.patch_h * (1 + rng.index(3)), c.patch_w * (1 + rng.index(3))});
    shape_ok += block.forward(x, BnMode::Train).shape() == x.shape();
  }
  v.require(shape_ok == configs, "mobilevit shape preservation");

  double worst_row = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t rows = 1 + rng.index(8), cols = 1 + rng.index(40);
    auto x = random_tensor<double>(rng, {rows, cols});
    x = scale(x, rng.uniform(0.1, 60.0));
    const auto s = softmax(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (std::size_t c = 0; c < cols; ++c) sum += s.data()[r * cols + c];
      worst_row = std::max(worst_row, std::abs(sum - 1.0));
    }
  }
  v.require(worst_row <= 1e-6, "softmax row sums");

  // Siamese training steps: both branches must read the same weights.
  model::SmvitModel<float> m(model::SmvitConfig::miniature(3), 5);
  train::Optimizer<float> opt({}, m.parameters().params);
  int equal_steps = 0;
  const int steps = 50;
  bool changed = false;
  const double initial = branch_checksum(m, 0);
  for (int step = 0; step < steps; ++step) {
    model::SiamesePair<float> p;
    p.a = Tensor<float>::from({2, 1, 8, 8}, std::vector<float>(128));
    p.b = Tensor<float>::from({2, 1, 8, 8}, std::vector<float>(128));
    for (auto& px : p.a.mutable_data()) px = rng.uniform() < 0.4 ? 1.0f : 0.0f;
    for (auto& px : p.b.mutable_data()) px = rng.uniform() < 0.4 ? 1.0f : 0.0f;
    p.views_a = {90, 90};
    p.views_b = {90, 90};
    p.labels_a = {rng.index(3), rng.index(3)};
    p.labels_b = {rng.index(3), rng.index(3)};
    model::pair_loss(m.forward_pair(p, nullptr), p.labels_a, p.labels_b).backward();
    opt.step();
    const double c0 = branch_checksum(m, 0), c1 = branch_checksum(m, 1);
    equal_steps += c0 == c1 && m.parameter_checksum(0) == m.parameter_checksum(1);
    changed = changed || c0 != initial;
  }
  v.require(equal_steps == steps, "branch checksums equal after every step");
  v.require(changed, "weights moved");
  v.detail << "fold " << fold_ok << "/50, mobilevit " << shape_ok << "/" << configs << ", softmax |sum-1| "
           << worst_row << ", checksum equal " << equal_steps << "/" << steps << " steps ";
}

void synthetic_end_to_end(Verdict& v) {
  const auto t0 = Clock::now();
  const auto out = train_run(1, "base", "");
  const double secs = seconds_since(t0);
  const auto metrics = train::read_metrics_jsonl((fs::path(out) / "metrics.jsonl").string());
  double best_train = 0;
  std::size_t reached = 0;
  for (const auto& m : metrics) {
    best_train = std::max(best_train, m.train_accuracy);
    if (!reached && m.train_accuracy >= 0.90) reached = m.epoch;
  }
  const double val90 = metrics.empty() ? 0 : metrics.back().val_accuracy_per_view.at(90);
  v.require(metrics.size() == 15, "15 epochs");
  v.require(reached != 0, "train accuracy >= 0.90");
  v.require(val90 >= 0.25 + 0.4, "val accuracy at 90 >= 0.65");
  v.require(secs < 600, "runtime");
  v.detail << "seed 1: train accuracy " << best_train << " (>= 0.90 first at epoch " << reached << "), val@90 "
           << val90 << ", " << secs << " s ";
}

void curriculum_ablation(Verdict& v) {
  double base_initial = 0, grad_initial = 0, base_best = 0, grad_best = 0;
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  for (auto seed : seeds) {
    const auto base = train_run(seed, "base", "");
    const auto grad = train_run(seed, "gradual", "");
    const auto report = train::ablation_report(train::read_metrics_jsonl((fs::path(base) / "metrics.jsonl").string()),
                                               train::read_metrics_jsonl((fs::path(grad) / "metrics.jsonl").string()));
    double bi = 0, gi = 0, bb = 0, gb = 0;
    std::size_t n = 0;
    for (const auto& row : report.rows) {
      if (row.view == report.standard_view) continue;
      bi += row.initial_base;
      gi += row.initial_gradual;
      bb += row.max_base;
      gb += row.max_gradual;
      ++n;
    }
    v.detail << "seed " << seed << ": initial " << bi / n << " vs " << gi / n << ", best " << bb / n << " vs "
             << gb / n << "; ";
    base_initial += bi / n / seeds.size();
    grad_initial += gi / n / seeds.size();
    base_best += bb / n / seeds.size();
    grad_best += gb / n / seeds.size();
  }
  v.require(grad_initial >= base_initial, "mean initial gradual >= base");
  v.require(grad_best >= base_best - 0.02, "mean best gradual >= base - 0.02");
  v.detail << "mean initial base " << base_initial << " gradual " << grad_initial << ", mean best base "
           << base_best << " gradual " << grad_best << " ";
}

void attention_scaling(Verdict& v) {
  Rng rng(31);
  nn::BlockConfig c;
  c.token_dim = 32;
  c.heads = 4;
  c.d_k = 8;
  nn::MultiHeadSelfAttention<float> mhsa(c, rng);
  auto time_at = [&](std::size_t n) {
    const auto x = random_tensor<float>(rng, {4, n, 32});
    NoGradGuard guard;
    double best = 1e30;
    for (int rep = 0; rep < 7; ++rep) {
      const auto t0 = Clock::now();
      for (int i = 0; i < 2; ++i) (void)mhsa.forward(x);
      best = std::min(best, seconds_since(t0));
    }
    return best;
  };
  (void)time_at(64);  // warm-up
  const double t256 = time_at(256), t512 = time_at(512);
  const double ratio = t512 / t256;
  v.require(ratio >= 3.0 && ratio <= 6.0, "ratio in [3, 6]");
  v.detail << "t(256) " << t256 << " s, t(512) " << t512 << " s, ratio " << ratio << " ";
}

void determinism(Verdict& v) {
  for (const char* mode : {"base", "gradual"}) {
    const auto a = train_run(1, mode, "");
    const auto b = train_run(1, mode, "_rerun");
    for (const char* f : {"metrics.jsonl", "model.ckpt", "registry.json"}) {
      const auto x = slurp(fs::path(a) / f), y = slurp(fs::path(b) / f);
      v.require(!x.empty() && x == y, std::string(mode) + " " + f + " identical");
    }
    v.detail << mode << " rerun identical; ";
  }
}

void protocol_fidelity(Verdict& v) {
  Rng rng(11);
  std::vector<data::Frame> frames;
  std::map<std::tuple<std::string, int, Condition>, std::size_t> sizes;
  for (int s = 0; s < 5; ++s)
    for (int view : kAllViews)
      for (Condition cond : {Condition::NM, Condition::BG, Condition::CL}) {
        const std::size_t n = 2 + rng.index(40);
        const auto subject = std::to_string(s + 1);
        sizes[{subject, view, cond}] = n;
        for (std::size_t f = 0; f < n; ++f) {
          data::Frame fr;
          fr.key.subject = subject;
          fr.key.condition = cond;
          fr.key.frame = static_cast<std::uint32_t>(f + 1);
          fr.view = view;
          fr.image = data::Image(1, 1, 1.0f);
          frames.push_back(std::move(fr));
        }
      }
  const auto split = data::split_7_3(frames, 3);
  std::map<std::tuple<std::string, int, Condition>, std::size_t> train_n, val_n;
  for (const auto& f : split.train) ++train_n[{f.key.subject, f.view, f.key.condition}];
  for (const auto& f : split.val) ++val_n[{f.key.subject, f.view, f.key.condition}];
  std::size_t within = 0;
  for (const auto& [k, n] : sizes) {
    const double target = 0.7 * static_cast<double>(n);
    within += std::abs(static_cast<double>(train_n[k]) - target) <= 1.0 && train_n[k] + val_n[k] == n;
  }
  v.require(within == sizes.size(), "every stratum within one frame of 70/30");

  // All eleven views present: one accuracy per column.
  data::SynthSpec spec;
  spec.n_subjects = 2;
  spec.views.assign(kAllViews.begin(), kAllViews.end());
  spec.frames_per_sequence = 6;
  spec.height = spec.width = 8;
  const auto eval_split = data::split_7_3(data::synth_generate(spec), 1);
  model::SmvitModel<float> m(model::SmvitConfig::miniature(2), 1);
  const auto per_view = train::evaluate_per_view<float>(m, nullptr, eval_split.val);
  const auto csv = train::accuracy_table_csv(per_view);
  std::istringstream lines(csv);
  std::string header, row;
  std::getline(lines, header);
  std::getline(lines, row);
  const auto columns = [](const std::string& line) {
    std::size_t n = 1, filled = 0;
    std::string cell;
    for (char ch : line + ",") {
      if (ch == ',') {
        filled += !cell.empty();
        cell.clear();
        continue;
      }
      cell += ch;
    }
    n += static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    return std::pair{n, filled};
  };
  const auto [hc, hf] = columns(header);
  const auto [rc, rf] = columns(row);
  v.require(per_view.size() == 11, "eleven views evaluated");
  v.require(header == "0,18,36,54,72,90,108,126,144,162,180", "header");
  v.require(hc == 11 && rc == 11 && rf == 11, "eleven filled columns");
  v.detail << within << "/" << sizes.size() << " strata within +-1, table " << rc << " columns (" << rf
           << " filled) ";
}

}  // namespace

int main(int argc, char** argv) {
  g_work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "smvit_acceptance";
  g_configs = argc > 2 ? fs::path(argv[2]) : fs::path(SMVIT_CONFIG_DIR);
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  criterion("gradient_suite", gradient_suite);
  criterion("view_conversion_algebra", view_algebra);
  criterion("structural_invariants", structural);
  criterion("synthetic_end_to_end", synthetic_end_to_end);
  criterion("curriculum_ablation", curriculum_ablation);
  criterion("attention_cost_scaling", attention_scaling);
  criterion("determinism", determinism);
  criterion("protocol_fidelity", protocol_fidelity);

  std::printf("%d criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
