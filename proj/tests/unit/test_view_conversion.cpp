#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "smvit/error.hpp"
#include "smvit/rng.hpp"
#include "smvit/view.hpp"

using namespace smvit;
using namespace smvit::view;

namespace {

SampleKey key(std::string subject, std::uint32_t seq, std::uint32_t frame, Condition c = Condition::NM) {
  SampleKey k;
  k.subject = std::move(subject);
  k.condition = c;
  k.sequence = seq;
  k.frame = frame;
  return k;
}

// A batch laid out as subjects x sequences x frames, rows random.
FeatureBatch random_batch(Rng& rng, int view, std::size_t dim, std::size_t subjects, std::size_t seqs,
                          std::size_t frames, double offset = 0.0) {
  FeatureBatch b;
  b.view = view;
  b.feat_dim = dim;
  for (std::size_t s = 0; s < subjects; ++s)
    for (std::size_t q = 1; q <= seqs; ++q)
      for (std::size_t f = 0; f < frames; ++f) {
        std::vector<double> row(dim);
        for (auto& v : row) v = rng.normal() + offset;
        b.push_back(row, key("s" + std::to_string(s), std::uint32_t(q), std::uint32_t(f)));
      }
  return b;
}

std::vector<double> column_mean(const FeatureBatch& b) {
  std::vector<double> m(b.feat_dim, 0.0);
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t c = 0; c < b.feat_dim; ++c) m[c] += b.row(i)[c];
  for (auto& v : m) v /= double(b.size());
  return m;
}

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

}  // namespace

TEST_CASE("view angles") {
  for (int v : kAllViews) CHECK(is_view_angle(v));
  CHECK_FALSE(is_view_angle(95));
  CHECK_FALSE(is_view_angle(198));
  CHECK_FALSE(is_view_angle(-18));
  CHECK(view_dir_name(18) == "018");
  CHECK(view_dir_name(180) == "180");
  CHECK(kind_of([] { check_view_angle(91); }) == ErrorKind::Config);
}

TEST_CASE("compute_pfc examples") {
  FeatureBatch x{0, 2, {1, 2, 3, 4}, {key("a", 1, 0), key("a", 1, 1)}};
  FeatureBatch y{90, 2, {0, 0, 0, 2}, {key("b", 1, 0), key("b", 1, 1)}};
  const auto f = compute_pfc(x, y, Pairing::ByIndex);
  CHECK(f.factor == std::vector<double>{2, 2});
  CHECK(f.sample_count == 2);
  CHECK(f.source == 0);
  CHECK(f.target == 90);

  SUBCASE("identity pairing finds nothing across different subjects") {
    CHECK(kind_of([&] { compute_pfc(x, y, Pairing::ByIdentity); }) == ErrorKind::InsufficientPairs);
  }
  SUBCASE("empty batch is an insufficient-pairs error") {
    FeatureBatch e{0, 2, {}, {}};
    CHECK(kind_of([&] { compute_pfc(e, y, Pairing::ByIndex); }) == ErrorKind::InsufficientPairs);
  }
  SUBCASE("width mismatch") {
    FeatureBatch z{0, 1, {1}, {key("a", 1, 0)}};
    CHECK(kind_of([&] { compute_pfc(z, y, Pairing::ByIndex); }) == ErrorKind::Shape);
  }
}

TEST_CASE("identity pairing aligns frames and truncates") {
  // Subject a, seq 1 has 3 frames at view 0 and 2 frames at view 90; rows are
  // deliberately shuffled so only the frame index orders them.
  FeatureBatch x{0, 1, {30, 10, 20, 7}, {key("a", 1, 5), key("a", 1, 1), key("a", 1, 3), key("c", 2, 0)}};
  FeatureBatch y{90, 1, {2, 1, 100}, {key("a", 1, 9), key("a", 1, 4), key("z", 1, 0)}};
  const auto f = compute_pfc(x, y);
  // Pairs (10,1), (20,2); frames beyond the shorter sequence and unmatched groups are dropped.
  CHECK(f.sample_count == 2);
  CHECK(f.factor[0] == doctest::Approx(((10 - 1) + (20 - 2)) / 2.0));
}

TEST_CASE("pfc properties over random batches") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t dim = 1 + rng.index(12), subjects = 1 + rng.index(4), seqs = 1 + rng.index(3),
                      frames = 1 + rng.index(6);
    const auto a = random_batch(rng, 0, dim, subjects, seqs, frames, rng.uniform(-3, 3));
    const auto b = random_batch(rng, 90, dim, subjects, seqs, frames, rng.uniform(-3, 3));

    const auto self = compute_pfc(a, a);
    for (double v : self.factor) CHECK(v == 0.0);

    const auto ab = compute_pfc(a, b), ba = compute_pfc(b, a);
    REQUIRE(ab.sample_count == a.size());
    for (std::size_t c = 0; c < dim; ++c) CHECK(std::abs(ab.factor[c] + ba.factor[c]) <= 1e-12);

    // Independent oracle: difference of column means for complete equal pairings.
    const auto ma = column_mean(a), mb = column_mean(b);
    for (std::size_t c = 0; c < dim; ++c) CHECK(std::abs(ab.factor[c] - (ma[c] - mb[c])) < 1e-9);

    FactorRegistry reg;
    reg.standard_view = 0;
    reg.feat_dim = dim;
    auto f = ab;  // standard-minus-source, the direction a registry stores
    f.source = 90;
    f.target = 0;
    reg.entries[90] = f;
    const auto converted = convert_to_standard(b, reg);
    const auto mc = column_mean(converted);
    for (std::size_t c = 0; c < dim; ++c) CHECK(std::abs(mc[c] - ma[c]) < 1e-6);

    // Round trip through both factors.
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto back = apply_it(apply_it(a.row(i), ab), ba);
      for (std::size_t c = 0; c < dim; ++c) CHECK(std::abs(back[c] - a.row(i)[c]) < 1e-12);
    }

    // Rigidity: pairwise distances preserved.
    for (int p = 0; p < 5; ++p) {
      const auto u = a.row(rng.index(a.size())), v = a.row(rng.index(a.size()));
      const auto fu = apply_it(u, ab), fv = apply_it(v, ab);
      double d0 = 0, d1 = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        d0 += (u[c] - v[c]) * (u[c] - v[c]);
        d1 += (fu[c] - fv[c]) * (fu[c] - fv[c]);
      }
      CHECK(std::abs(std::sqrt(d0) - std::sqrt(d1)) < 1e-9);
    }
  }
}

TEST_CASE("apply_it examples") {
  ViewConversionFactor f{0, 90, {2, 2}, 2};
  CHECK(apply_it(std::vector<double>{1, 2}, f) == std::vector<double>{3, 4});
  ViewConversionFactor zero{0, 90, {0, 0}, 1};
  CHECK(apply_it(std::vector<double>{1.25, -7}, zero) == std::vector<double>{1.25, -7});
  CHECK(kind_of([&] { apply_it(std::vector<double>{1}, f); }) == ErrorKind::Shape);
}

TEST_CASE("convert_to_standard") {
  Rng rng(12);
  const auto std_batch = random_batch(rng, 90, 3, 2, 1, 3);
  const auto off = random_batch(rng, 36, 3, 2, 1, 3);
  std::map<int, FeatureBatch> by_view{{90, std_batch}, {36, off}};
  const auto reg = build_registry(by_view, 90);
  CHECK(reg.entries.size() == 1);

  const auto same = convert_to_standard(std_batch, reg);
  CHECK(same.rows == std_batch.rows);
  CHECK(same.view == 90);

  const auto conv = convert_to_standard(off, reg);
  CHECK(conv.view == 90);
  for (const auto& k : conv.keys) CHECK(k.original_view == 36);
  const auto ms = column_mean(std_batch), mc = column_mean(conv);
  for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(ms[c] - mc[c]) < 1e-6);

  FeatureBatch empty{36, 3, {}, {}};
  CHECK(convert_to_standard(empty, reg).empty());

  const auto unknown = random_batch(rng, 0, 3, 1, 1, 1);
  CHECK(kind_of([&] { convert_to_standard(unknown, reg); }) == ErrorKind::MissingFactor);
}

TEST_CASE("registry build over all views") {
  Rng rng(13);
  std::map<int, FeatureBatch> by_view;
  for (int v : kAllViews) by_view[v] = random_batch(rng, v, 4, 3, 2, 2);
  const auto reg = build_registry(by_view, 90);
  CHECK(reg.entries.size() == 10);
  CHECK(reg.complete());
  CHECK_FALSE(reg.contains(90));

  const auto again = build_registry(by_view, 90);
  for (const auto& [v, f] : reg.entries) CHECK(again.at(v).factor == f.factor);

  SUBCASE("standard view alone is a protocol error") {
    std::map<int, FeatureBatch> only{{90, by_view[90]}};
    CHECK(kind_of([&] { build_registry(only, 90); }) == ErrorKind::Protocol);
  }
  SUBCASE("missing standard view is a protocol error") {
    auto copy = by_view;
    copy.erase(90);
    CHECK(kind_of([&] { build_registry(copy, 90); }) == ErrorKind::Protocol);
  }
  SUBCASE("unpairable view names itself") {
    auto copy = by_view;
    for (auto& k : copy[54].keys) k.subject = "stranger";
    try {
      build_registry(copy, 90);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InsufficientPairs);
      CHECK(std::string(e.what()).find("54") != std::string::npos);
    }
  }
  SUBCASE("text round trip") {
    const auto back = FactorRegistry::from_json(reg.to_json());
    CHECK(back.standard_view == 90);
    CHECK(back.feat_dim == 4);
    REQUIRE(back.entries.size() == 10);
    for (const auto& [v, f] : reg.entries) {
      const auto& g = back.at(v);
      CHECK(g.sample_count == f.sample_count);
      CHECK(g.target == 90);
      for (std::size_t c = 0; c < f.factor.size(); ++c) CHECK(std::abs(g.factor[c] - f.factor[c]) < 1e-8);
    }
    auto rounded = reg;
    rounded.round_to_persisted_precision();
    const auto path = (std::filesystem::temp_directory_path() / "smvit_registry_test.json").string();
    rounded.save(path);
    const auto loaded = FactorRegistry::load(path);
    for (const auto& [v, f] : rounded.entries) CHECK(loaded.at(v).factor == f.factor);
    std::remove(path.c_str());
  }
  SUBCASE("malformed text is a load error") {
    CHECK(kind_of([] { FactorRegistry::from_json("{\"standard_view\": 90}"); }) == ErrorKind::Load);
    CHECK(kind_of([] { FactorRegistry::from_json("not json"); }) == ErrorKind::Load);
    CHECK(kind_of([] { FactorRegistry::load("/nonexistent/dir/reg.json"); }) == ErrorKind::Io);
  }
}

TEST_CASE("round_significant") {
  CHECK(round_significant(0.123456789123) == 0.123456789);
  CHECK(round_significant(-98765.4321987) == -98765.4322);
  CHECK(round_significant(0.0) == 0.0);
}
