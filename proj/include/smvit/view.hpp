#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "smvit/types.hpp"

namespace smvit::view {

/// Embedding rows of one view, row-major [size() x feat_dim].
struct FeatureBatch {
  int view = kDefaultStandardView;
  std::size_t feat_dim = 0;
  std::vector<double> rows;
  std::vector<SampleKey> keys;

  std::size_t size() const { return keys.size(); }
  bool empty() const { return keys.empty(); }
  std::span<const double> row(std::size_t i) const { return {rows.data() + i * feat_dim, feat_dim}; }
  void push_back(std::span<const double> values, SampleKey key);
  /// ShapeError unless rows.size() == size() * feat_dim.
  void validate() const;
};

struct ViewConversionFactor {
  int source = 0;
  int target = kDefaultStandardView;
  std::vector<double> factor;
  std::size_t sample_count = 0;
};

enum class Pairing {
  /// Match (subject, condition, sequence) across views, align frames in
  /// order, truncate to the shorter sequence.
  ByIdentity,
  /// Row i with row i, truncating to the shorter batch.
  ByIndex,
};

/// Converts features at `source` views into the standard-view domain.
class FactorRegistry {
 public:
  int standard_view = kDefaultStandardView;
  std::size_t feat_dim = 0;
  std::map<int, ViewConversionFactor> entries;  // keyed by source view

  /// MissingFactorError when `source` has no entry.
  const ViewConversionFactor& at(int source) const;
  bool contains(int source) const { return entries.count(source) != 0; }
  /// True when entries cover every angle except the standard one.
  bool complete() const;

  /// Factors rounded to the precision the text form stores (9 significant
  /// digits), so a registry reloaded from disk reproduces this one exactly.
  void round_to_persisted_precision();

  std::string to_json() const;
  static FactorRegistry from_json(const std::string& text);
  void save(const std::string& path) const;
  static FactorRegistry load(const std::string& path);
};

/// Elementwise mean of (x_i - y_i) over the pairs chosen by `pairing`.
ViewConversionFactor compute_pfc(const FeatureBatch& x, const FeatureBatch& y, Pairing pairing = Pairing::ByIdentity);

/// x_row + factor.
std::vector<double> apply_it(std::span<const double> x_row, const ViewConversionFactor& factor);

/// Standard-view batches pass through; others are translated by their
/// factor and relabelled to the standard view.
FeatureBatch convert_to_standard(const FeatureBatch& batch, const FactorRegistry& registry);

/// One factor per non-standard view present in `by_view`.
FactorRegistry build_registry(const std::map<int, FeatureBatch>& by_view, int standard_view,
                              Pairing pairing = Pairing::ByIdentity);

/// Rounds to `digits` significant decimal digits.
double round_significant(double value, int digits = 9);

}  // namespace smvit::view
