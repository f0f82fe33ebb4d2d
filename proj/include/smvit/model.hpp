#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smvit/blocks.hpp"
#include "smvit/dataset.hpp"
#include "smvit/view.hpp"

namespace smvit::model {

using view::FactorRegistry;
using view::FeatureBatch;
using view::Pairing;
using view::ViewConversionFactor;

struct SmvitConfig {
  nn::CMBlockConfig backbone = nn::CMBlockConfig::desk_default();
  std::size_t num_subjects = 4;
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  int standard_view = kDefaultStandardView;
  /// Weight of an optional squared-distance term between same-subject pair
  /// embeddings. 0 disables it.
  double contrastive_weight = 0.0;

  static SmvitConfig desk(std::size_t num_subjects);
  /// compact backbone at 32x32.
  static SmvitConfig compact(std::size_t num_subjects);
  /// miniature backbone at 8x8, for gradient checks.
  static SmvitConfig miniature(std::size_t num_subjects);

  std::size_t feat_dim() const { return backbone.out_channels; }
  void validate() const;
  bool operator==(const SmvitConfig&) const = default;
};

/// Two frame batches of equal size with one view and one label per row.
template <typename T>
struct SiamesePair {
  Tensor<T> a, b;  // [B,1,H,W]
  std::vector<int> views_a, views_b;
  std::vector<std::size_t> labels_a, labels_b;

  std::size_t size() const { return labels_a.size(); }
  void validate() const;
};

template <typename T>
struct PairOutput {
  Tensor<T> emb_a, emb_b, logits_a, logits_b;
};

/// Stacks preprocessed frames into [B,1,H,W].
template <typename T>
Tensor<T> frames_tensor(std::span<const data::Frame* const> frames);
template <typename T>
Tensor<T> frames_tensor(const std::vector<data::Frame>& frames);

/// One CM-Block backbone applied to both inputs, global average pooling, a
/// linear identity head. The two branches are the same parameter storage.
template <typename T>
class SmvitModel {
 public:
  SmvitModel(const SmvitConfig& config, std::uint64_t seed);

  const SmvitConfig& config() const { return cfg_; }
  std::size_t feat_dim() const { return cfg_.feat_dim(); }

  /// [B,1,H,W] -> [B, feat_dim]. ShapeError on the wrong resolution.
  Tensor<T> embed(const Tensor<T>& frames, BnMode mode = BnMode::Train);
  /// Adds the registry factor of each row's view (rows at the standard view,
  /// or every row without a registry, pass through).
  Tensor<T> convert(const Tensor<T>& embeddings, std::span<const int> views, const FactorRegistry* registry) const;
  Tensor<T> classify(const Tensor<T>& embeddings) const;

  PairOutput<T> forward_pair(const SiamesePair<T>& pair, const FactorRegistry* registry,
                             BnMode mode = BnMode::Train);

  /// Inference-mode logits for frames that all share `view`.
  Tensor<T> logits(const Tensor<T>& frames, int view, const FactorRegistry* registry);
  std::vector<std::size_t> predict(const Tensor<T>& frames, int view, const FactorRegistry* registry);

  /// Parameters and batch-norm buffers: backbone under "backbone.", then
  /// "head.weight", "head.bias".
  void visit(nn::ParameterVisitor<T>& v);
  nn::ParameterList<T> parameters();
  std::size_t parameter_count();

  /// Backbone used by branch 0 or 1 (the same object for both).
  nn::CMBlock<T>& branch(int index);
  /// Sum of |w| * (k+1) over the parameters reached through one branch.
  double parameter_checksum(int branch_index);

  void zero_grad();

 private:
  SmvitConfig cfg_;
  nn::CMBlock<T> backbone_;
  Tensor<T> head_w_, head_b_;
};

/// Mean of the two branch cross-entropies, plus the optional contrastive
/// term over rows whose labels agree.
template <typename T>
Tensor<T> pair_loss(const PairOutput<T>& out, std::span<const std::size_t> labels_a,
                    std::span<const std::size_t> labels_b, double contrastive_weight = 0.0);

/// Largest logit per row.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits);

/// Inference-mode embeddings of `frames`, one FeatureBatch per view.
template <typename T>
std::map<int, FeatureBatch> embed_by_view(SmvitModel<T>& model, const std::vector<data::Frame>& frames,
                                          std::size_t batch_size = 64);

/// Registry toward the model's standard view from the views in `frames`.
template <typename T>
FactorRegistry build_factor_registry(SmvitModel<T>& model, const std::vector<data::Frame>& frames,
                                     Pairing pairing = Pairing::ByIdentity);

// ----------------------------------------------------------------- checkpoint

struct CheckpointInfo {
  SmvitConfig config;
  std::uint64_t seed = 0;
  std::size_t stage = 0;
  int precision = 64;
};

/// Binary container: magic, version, a structured-text header (config,
/// seed, stage, precision, tensor names and shapes), then raw values of
/// every parameter and buffer in declaration order.
template <typename T>
void save_checkpoint(const std::string& path, SmvitModel<T>& model, std::uint64_t seed, std::size_t stage);

/// Header only. LoadError on a bad magic, version or header.
CheckpointInfo read_checkpoint_info(const std::string& path);

/// Loads values into `model`; LoadError when names or shapes disagree with
/// the model's configuration. Values stored at the other precision are cast.
template <typename T>
CheckpointInfo load_checkpoint(const std::string& path, SmvitModel<T>& model);

}  // namespace smvit::model
