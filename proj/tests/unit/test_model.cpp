#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "smvit/config_json.hpp"
#include "smvit/error.hpp"
#include "smvit/gradcheck.hpp"
#include "smvit/gradsuite.hpp"
#include "smvit/model.hpp"
#include "smvit/ops.hpp"
#include "smvit/rng.hpp"
#include "smvit/training.hpp"

using namespace smvit;
using namespace smvit::model;
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

template <typename T>
Tensor<T> random_frames(Rng& rng, std::size_t n, std::size_t side, bool grad = false) {
  std::vector<T> v(n * side * side);
  for (auto& x : v) x = static_cast<T>(rng.uniform());
  return Tensor<T>::from({n, 1, side, side}, std::move(v), grad);
}

template <typename T>
SiamesePair<T> make_pair(Tensor<T> a, Tensor<T> b, std::vector<std::size_t> la, std::vector<std::size_t> lb,
                         std::vector<int> va, std::vector<int> vb) {
  SiamesePair<T> p;
  p.a = std::move(a);
  p.b = std::move(b);
  p.labels_a = std::move(la);
  p.labels_b = std::move(lb);
  p.views_a = std::move(va);
  p.views_b = std::move(vb);
  return p;
}

template <typename T>
bool same_values(const Tensor<T>& x, const Tensor<T>& y) {
  return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
}

view::FactorRegistry random_registry(Rng& rng, std::size_t d, std::vector<int> views) {
  view::FactorRegistry r;
  r.feat_dim = d;
  for (int v : views) {
    view::ViewConversionFactor f;
    f.source = v;
    for (std::size_t i = 0; i < d; ++i) f.factor.push_back(rng.uniform(-1, 1));
    r.entries.emplace(v, f);
  }
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(SmvitConfig::desk(124).validate());
  CHECK_NOTHROW(SmvitConfig::compact(4).validate());
  CHECK_NOTHROW(SmvitConfig::miniature(2).validate());
  auto c = SmvitConfig::compact(4);
  c.input_height = 36;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  c = SmvitConfig::compact(0);
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  c = SmvitConfig::compact(4);
  c.standard_view = 45;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  c = SmvitConfig::compact(4);
  c.backbone = nn::CMBlockConfig::compact(3);
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
}

TEST_CASE("config text form") {
  const auto c = SmvitConfig::compact(7);
  const json j = c;
  CHECK(j.get<SmvitConfig>() == c);
  CHECK(parse_json(R"({"backbone":"miniature","input_height":8,"input_width":8})", "t").get<SmvitConfig>().backbone ==
        nn::CMBlockConfig::miniature());
  CHECK(kind_of([] { parse_json(R"({"bogus":1})", "t").get<SmvitConfig>(); }) == ErrorKind::Config);
  CHECK(kind_of([] { parse_json(R"({"num_subjects":"x"})", "t").get<SmvitConfig>(); }) == ErrorKind::Config);
  CHECK(kind_of([] { parse_json(R"({"backbone":"huge"})", "t").get<SmvitConfig>(); }) == ErrorKind::Config);
  CHECK(kind_of([] { parse_json("{", "t"); }) == ErrorKind::Config);
}

TEST_CASE("embedding shape and resolution contract") {
  SmvitModel<double> m(SmvitConfig::miniature(3), 1);
  Rng rng(1);
  const auto e = m.embed(random_frames<double>(rng, 4, 8));
  CHECK(e.shape() == Shape{4, m.feat_dim()});
  CHECK(m.classify(e).shape() == Shape{4, 3});
  CHECK(kind_of([&] { m.embed(random_frames<double>(rng, 2, 16)); }) == ErrorKind::Shape);
}

TEST_CASE("forward pair: shared branches, symmetry and ablation path") {
  SmvitModel<double> m(SmvitConfig::miniature(2), 2);
  Rng rng(2);
  const auto x = random_frames<double>(rng, 3, 8), y = random_frames<double>(rng, 3, 8);
  auto reg = random_registry(rng, m.feat_dim(), {54, 72});

  SUBCASE("identical standard-view inputs give identical outputs") {
    const auto p = make_pair(x, x.detach(), {0, 1, 0}, {0, 1, 0}, {90, 90, 90}, {90, 90, 90});
    const auto out = m.forward_pair(p, &reg);
    CHECK(same_values(out.emb_a, out.emb_b));
    CHECK(same_values(out.logits_a, out.logits_b));
    // The view-conversion factor of a set with itself vanishes.
    view::FeatureBatch fb;
    fb.view = 90;
    fb.feat_dim = m.feat_dim();
    for (std::size_t i = 0; i < 3; ++i)
      fb.push_back(std::vector<double>(out.emb_a.data().begin() + i * fb.feat_dim,
                                       out.emb_a.data().begin() + (i + 1) * fb.feat_dim),
                   SampleKey{"s", Condition::NM, 1, std::uint32_t(i)});
    for (double v : view::compute_pfc(fb, fb).factor) CHECK(v == 0.0);
  }
  SUBCASE("swapping the sides swaps the outputs") {
    const auto p = make_pair(x, y, {0, 1, 1}, {1, 0, 0}, {90, 90, 90}, {54, 72, 90});
    const auto q = make_pair(y, x, {1, 0, 0}, {0, 1, 1}, {54, 72, 90}, {90, 90, 90});
    const auto o1 = m.forward_pair(p, &reg), o2 = m.forward_pair(q, &reg);
    CHECK(same_values(o1.emb_a, o2.emb_b));
    CHECK(same_values(o1.emb_b, o2.emb_a));
    CHECK(same_values(o1.logits_a, o2.logits_b));
    CHECK(same_values(o1.logits_b, o2.logits_a));
  }
  SUBCASE("without a registry the head sees raw embeddings") {
    const auto p = make_pair(x, y, {0, 1, 1}, {1, 0, 0}, {90, 90, 90}, {54, 72, 90});
    const auto out = m.forward_pair(p, nullptr);
    CHECK(same_values(out.logits_b, m.classify(out.emb_b)));
    const auto conv = m.forward_pair(p, &reg);
    // Converted logits: head applied to embedding + factor, row by row.
    const auto e = out.emb_b.data();
    const std::size_t d = m.feat_dim();
    std::vector<double> shifted(e.begin(), e.end());
    for (std::size_t c = 0; c < d; ++c) {
      shifted[c] += reg.at(54).factor[c];
      shifted[d + c] += reg.at(72).factor[c];
    }
    const auto expect = m.classify(Tensor<double>::from({3, d}, shifted));
    for (std::size_t i = 0; i < expect.numel(); ++i) CHECK(conv.logits_b.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-12));
  }
  SUBCASE("missing factor propagates") {
    const auto p = make_pair(x, y, {0, 1, 1}, {1, 0, 0}, {90, 90, 90}, {0, 72, 90});
    CHECK(kind_of([&] { m.forward_pair(p, &reg); }) == ErrorKind::MissingFactor);
  }
  SUBCASE("unequal sides") {
    auto p = make_pair(x, y, {0, 1, 1}, {1, 0}, {90, 90, 90}, {90, 90, 90});
    CHECK(kind_of([&] { m.forward_pair(p, nullptr); }) == ErrorKind::Shape);
  }
}

TEST_CASE("pair loss") {
  const std::size_t K = 5, B = 4;
  PairOutput<double> out;
  out.logits_a = Tensor<double>::zeros({B, K});
  out.logits_b = Tensor<double>::zeros({B, K});
  const std::vector<std::size_t> la{0, 1, 2, 3}, lb{4, 3, 2, 1};
  CHECK(pair_loss(out, la, lb).item() == doctest::Approx(std::log(double(K))).epsilon(1e-12));

  std::vector<double> good_a(B * K, 0.0), good_b(B * K, 0.0);
  for (std::size_t i = 0; i < B; ++i) good_a[i * K + la[i]] = good_b[i * K + lb[i]] = 50.0;
  out.logits_a = Tensor<double>::from({B, K}, good_a);
  out.logits_b = Tensor<double>::from({B, K}, good_b);
  CHECK(pair_loss(out, la, lb).item() < 1e-9);

  const std::vector<std::size_t> bad{9, 0, 0, 0};
  CHECK(kind_of([&] { pair_loss(out, bad, lb); }) == ErrorKind::Label);
}

TEST_CASE("loss gradients reach the shared parameters from both branches") {
  SmvitModel<double> m(SmvitConfig::miniature(3), 3);
  Rng rng(3);
  const auto x = random_frames<double>(rng, 2, 8), y = random_frames<double>(rng, 2, 8);
  auto grad_checksum = [&](std::vector<std::size_t> la, std::vector<std::size_t> lb) {
    m.zero_grad();
    const auto p = make_pair(x, y, la, lb, {90, 90}, {90, 90});
    pair_loss(m.forward_pair(p, nullptr), p.labels_a, p.labels_b).backward();
    double s = 0;
    std::size_t k = 0;
    for (auto& [_, t] : m.parameters().params)
      for (double g : t.grad()) s += g * double(++k);
    return s;
  };
  const double base = grad_checksum({0, 1}, {1, 2});
  CHECK(grad_checksum({2, 1}, {1, 2}) != base);
  CHECK(grad_checksum({0, 1}, {0, 2}) != base);
  CHECK(grad_checksum({0, 1}, {1, 2}) == base);
}

TEST_CASE("untrained loss lies in the sanity band") {
  for (std::uint64_t seed : {1, 2, 3}) {
    const std::size_t K = 4;
    SmvitModel<double> m(SmvitConfig::miniature(K), seed);
    Rng rng(seed);
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 8; ++i) labels.push_back(i % K);
    const auto p = make_pair(random_frames<double>(rng, 8, 8), random_frames<double>(rng, 8, 8), labels, labels,
                             std::vector<int>(8, 90), std::vector<int>(8, 90));
    const double l = pair_loss(m.forward_pair(p, nullptr), p.labels_a, p.labels_b).item();
    CHECK(l >= 0.5 * std::log(double(K)));
    CHECK(l <= 2.0 * std::log(double(K)));
  }
}

TEST_CASE("embedding gradient check on the miniature model") {
  SmvitModel<double> m(SmvitConfig::miniature(2), 4);
  Rng rng(4);
  const auto x = random_frames<double>(rng, 2, 8, true);
  auto list = m.parameters();
  std::vector<Tensor<double>> inputs{x};
  for (auto& [_, p] : list.params) inputs.push_back(p);
  const auto r = grad_check<double>("embed", [&] { return mean(m.embed(x)); }, inputs, {1e-5, 1e-5, 0});
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("end-to-end gradient suite") {
  GradSuiteOptions o;
  const auto reports = model_gradcheck_suite<double>(o);
  REQUIRE(reports.size() == 7);
  CHECK(reports.back().op_name == "smvit_end_to_end");
  for (const auto& r : reports) {
    INFO(r.op_name << " " << r.max_rel_error);
    CHECK(r.passed);
    CHECK(r.max_rel_error < (r.op_name == "smvit_end_to_end" ? 1e-5 : 1e-6));
  }
  testing::inject_backward_fault("linear", 2.0);
  const auto faulty = model_gradcheck_suite<double>(o);
  testing::clear_backward_fault();
  CHECK_FALSE(faulty.back().passed);
}

TEST_CASE("prediction") {
  SmvitModel<float> m(SmvitConfig::miniature(4), 5);
  Rng rng(5);
  const auto x = random_frames<float>(rng, 6, 8);
  const auto p1 = m.predict(x, 90, nullptr);
  CHECK(p1.size() == 6);
  CHECK(m.predict(x, 90, nullptr) == p1);
  for (auto l : p1) CHECK(l < 4);

  SUBCASE("argmax ignores a constant added across each row") {
    Rng r2(6);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> logits(5 * 7), c(5);
      for (auto& v : logits) v = r2.uniform(-3, 3);
      for (auto& v : c) v = r2.uniform(-10, 10);
      const auto t = Tensor<double>::from({5, 7}, logits);
      std::vector<double> shifted = logits;
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t k = 0; k < 7; ++k) shifted[i * 7 + k] += c[i];
      CHECK(argmax_rows(t) == argmax_rows(Tensor<double>::from({5, 7}, shifted)));
    }
  }
}

TEST_CASE("nearest-centroid predictions are rigid under a shared translation") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + rng.index(6), k = 2 + rng.index(4), n = 1 + rng.index(10);
    std::vector<std::vector<double>> centroids(k, std::vector<double>(d)), rows(n, std::vector<double>(d));
    for (auto& c : centroids)
      for (auto& v : c) v = rng.uniform(-2, 2);
    for (auto& r : rows)
      for (auto& v : r) v = rng.uniform(-2, 2);
    view::ViewConversionFactor f;
    for (std::size_t i = 0; i < d; ++i) f.factor.push_back(rng.uniform(-5, 5));
    auto nearest = [&](const std::vector<double>& x, const std::vector<std::vector<double>>& cs) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t j = 0; j < cs.size(); ++j) {
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += (x[c] - cs[j][c]) * (x[c] - cs[j][c]);
        if (s < bd) bd = s, best = j;
      }
      return best;
    };
    std::vector<std::vector<double>> moved_centroids;
    for (const auto& c : centroids) moved_centroids.push_back(view::apply_it(c, f));
    for (const auto& r : rows) CHECK(nearest(r, centroids) == nearest(view::apply_it(r, f), moved_centroids));
  }
}

TEST_CASE("branch checksums agree across optimizer steps") {
  SmvitModel<double> m(SmvitConfig::miniature(2), 8);
  CHECK(&m.branch(0) == &m.branch(1));
  CHECK(kind_of([&] { m.branch(2); }) == ErrorKind::Config);
  train::Optimizer<double> opt({}, m.parameters().params);
  Rng rng(8);
  const double initial = m.parameter_checksum(0);
  for (int step = 0; step < 10; ++step) {
    const auto p = make_pair(random_frames<double>(rng, 2, 8), random_frames<double>(rng, 2, 8), {0, 1}, {1, 0},
                             {90, 90}, {90, 90});
    pair_loss(m.forward_pair(p, nullptr), p.labels_a, p.labels_b).backward();
    opt.step();
    CHECK(m.parameter_checksum(0) == m.parameter_checksum(1));
  }
  CHECK(m.parameter_checksum(0) != initial);
}

TEST_CASE("factor registry from model embeddings") {
  data::SynthSpec s;
  s.n_subjects = 2;
  s.views = {54, 90, 108};
  s.frames_per_sequence = 6;
  s.height = s.width = 8;
  const auto frames = data::synth_generate(s);
  SmvitModel<double> m(SmvitConfig::miniature(2), 9);
  const auto reg = build_factor_registry(m, frames);
  CHECK(reg.entries.size() == 2);
  CHECK(reg.feat_dim == m.feat_dim());
  CHECK(reg.at(54).sample_count == 12);

  // Mean alignment: converted 54-degree embeddings share the 90-degree mean.
  const auto by_view = embed_by_view(m, frames, 5);
  const auto conv = view::convert_to_standard(by_view.at(54), reg);
  const auto& std_batch = by_view.at(90);
  for (std::size_t c = 0; c < m.feat_dim(); ++c) {
    double a = 0, b = 0;
    for (std::size_t i = 0; i < conv.size(); ++i) a += conv.row(i)[c];
    for (std::size_t i = 0; i < std_batch.size(); ++i) b += std_batch.row(i)[c];
    CHECK(a / double(conv.size()) == doctest::Approx(b / double(std_batch.size())).epsilon(1e-9));
  }
  std::vector<data::Frame> only_side;
  for (const auto& f : frames)
    if (f.view == 54) only_side.push_back(f);
  CHECK(kind_of([&] { build_factor_registry(m, only_side); }) == ErrorKind::Protocol);
}

TEST_CASE("checkpoints") {
  const fs::path dir = fs::temp_directory_path() / "smvit_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = SmvitConfig::miniature(3);
  SmvitModel<double> m(cfg, 10);
  Rng rng(10);
  // Move the batch-norm statistics away from their initial values.
  m.embed(random_frames<double>(rng, 4, 8), BnMode::Train);
  const auto path = (dir / "a.ckpt").string();
  save_checkpoint(path, m, 10, 2);
  save_checkpoint((dir / "b.ckpt").string(), m, 10, 2);
  CHECK(slurp(path) == slurp(dir / "b.ckpt"));

  const auto info = read_checkpoint_info(path);
  CHECK(info.config == cfg);
  CHECK(info.seed == 10);
  CHECK(info.stage == 2);
  CHECK(info.precision == 64);

  SmvitModel<double> other(cfg, 99);
  CHECK(other.parameter_checksum(0) != m.parameter_checksum(0));
  load_checkpoint(path, other);
  CHECK(other.parameter_checksum(0) == m.parameter_checksum(0));
  const auto x = random_frames<double>(rng, 5, 8);
  CHECK(same_values(other.logits(x, 90, nullptr), m.logits(x, 90, nullptr)));

  SUBCASE("cross-precision load") {
    SmvitModel<float> f(cfg, 1);
    load_checkpoint(path, f);
    const auto lf = f.logits(random_frames<float>(rng, 2, 8), 90, nullptr);
    CHECK(lf.shape() == Shape{2, 3});
  }
  SUBCASE("shape mismatch") {
    SmvitModel<double> wrong(SmvitConfig::miniature(4), 1);
    CHECK(kind_of([&] { load_checkpoint(path, wrong); }) == ErrorKind::Load);
  }
  SUBCASE("corrupted magic") {
    auto bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream(dir / "bad.ckpt", std::ios::binary) << bytes;
    CHECK(kind_of([&] { load_checkpoint((dir / "bad.ckpt").string(), other); }) == ErrorKind::Load);
    CHECK(kind_of([&] { read_checkpoint_info((dir / "bad.ckpt").string()); }) == ErrorKind::Load);
  }
  SUBCASE("truncated data leaves the model untouched") {
    auto bytes = slurp(path);
    bytes.resize(bytes.size() - 9);
    std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes;
    SmvitModel<double> fresh(cfg, 5);
    const double before = fresh.parameter_checksum(0);
    CHECK(kind_of([&] { load_checkpoint((dir / "short.ckpt").string(), fresh); }) == ErrorKind::Load);
    CHECK(fresh.parameter_checksum(0) == before);
  }
  SUBCASE("missing file") {
    CHECK(kind_of([&] { load_checkpoint((dir / "none.ckpt").string(), other); }) == ErrorKind::Io);
  }
  fs::remove_all(dir);
}
