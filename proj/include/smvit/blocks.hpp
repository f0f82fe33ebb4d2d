#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "smvit/ops.hpp"
#include "smvit/rng.hpp"
#include "smvit/tensor.hpp"

namespace smvit::nn {

/// Geometry shared by every block kind; each block reads the fields it needs.
struct BlockConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;  // odd
  std::size_t stride = 1;
  double expansion_ratio = 2.0;  // Mobile Block hidden width multiplier
  std::size_t token_dim = 64;
  std::size_t heads = 2;
  std::size_t d_k = 32;  // per-head key width; heads * d_k == token_dim
  std::size_t transformer_depth = 2;
  std::size_t patch_w = 2;
  std::size_t patch_h = 2;
  std::size_t ffn_dim = 128;

  /// Throws ConfigError when an invariant does not hold.
  void validate_transformer() const;
  void validate_conv() const;

  bool operator==(const BlockConfig&) const = default;
};

/// Receives every trainable tensor and every running-statistics buffer in
/// declaration order, with a dotted path name.
template <typename T>
class ParameterVisitor {
 public:
  virtual ~ParameterVisitor() = default;
  virtual void parameter(const std::string& name, Tensor<T>& value) = 0;
  virtual void buffer(const std::string& name, std::vector<T>& value) = 0;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(std::size_t channels);

  Tensor<T> forward(const Tensor<T>& x, BnMode mode);
  void visit(ParameterVisitor<T>& v, const std::string& prefix);

  Tensor<T> gamma, beta;
  BatchNormState<T> state;
};

/// N x N (or pointwise) convolution -> batch norm -> optional SiLU.
template <typename T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride, bool activation,
            Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, BnMode mode);
  void visit(ParameterVisitor<T>& v, const std::string& prefix);
  std::size_t out_channels() const { return kernel_.dim(0); }

  Tensor<T>& kernel() { return kernel_; }
  BatchNorm2d<T>& norm() { return bn_; }

 private:
  Tensor<T> kernel_;
  BatchNorm2d<T> bn_;
  std::size_t stride_ = 1;
  bool activation_ = true;
};

/// Inverted residual: pointwise expand -> depthwise -> pointwise project,
/// with an identity skip when the shape is preserved.
template <typename T>
class MobileBlock {
 public:
  MobileBlock() = default;
  MobileBlock(const BlockConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, BnMode mode);
  void visit(ParameterVisitor<T>& v, const std::string& prefix);
  bool has_residual() const { return residual_; }

 private:
  ConvBlock<T> expand_;
  Tensor<T> depthwise_;
  BatchNorm2d<T> depthwise_bn_;
  ConvBlock<T> project_;
  std::size_t stride_ = 1;
  bool residual_ = false;
};

/// Query/key/value matrices and the attention-weight matrix X of one call.
template <typename T>
struct AttentionTensors {
  Tensor<T> Q, K, V, X;
};

/// softmax(Q K^T / sqrt(d_k)) V over token matrices [tokens, d_k] or batched
/// [groups, tokens, d_k].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t d_k);

/// Same computation, also returning the weight matrix X.
template <typename T>
std::pair<Tensor<T>, AttentionTensors<T>> attention_with_weights(const Tensor<T>& q, const Tensor<T>& k,
                                                                 const Tensor<T>& v, std::size_t d_k);

template <typename T>
class MultiHeadSelfAttention {
 public:
  MultiHeadSelfAttention() = default;
  MultiHeadSelfAttention(const BlockConfig& cfg, Rng& rng);

  /// x: [tokens, d] or [sequences, tokens, d].
  Tensor<T> forward(const Tensor<T>& x) const;
  void visit(ParameterVisitor<T>& v, const std::string& prefix);

 private:
  std::size_t heads_ = 1, d_k_ = 1, dim_ = 1;
  Tensor<T> wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

/// Pre-norm encoder: x + MHSA(LN(x)), then h + FFN(LN(h)), depth times.
template <typename T>
class TransformerEncoder {
 public:
  TransformerEncoder() = default;
  TransformerEncoder(const BlockConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x) const;
  void visit(ParameterVisitor<T>& v, const std::string& prefix);
  std::size_t depth() const { return layers_.size(); }

 private:
  struct Layer {
    Tensor<T> ln1_g, ln1_b;
    MultiHeadSelfAttention<T> mhsa;
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, b1, w2, b2;
  };
  std::vector<Layer> layers_;
};

/// Local 3x3 conv, projection to token space, patch-wise transformer across
/// patches at each in-patch position, fold back, projection, then fusion
/// with the block input. Shape preserving.
template <typename T>
class MobileVitBlock {
 public:
  MobileVitBlock() = default;
  MobileVitBlock(const BlockConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, BnMode mode);
  void visit(ParameterVisitor<T>& v, const std::string& prefix);

  /// Local conv followed by the projection to token space: [B, d, H, W].
  Tensor<T> token_map(const Tensor<T>& x, BnMode mode);
  /// token_map unfolded into [B, num_patches, pixels_per_patch, d].
  Tensor<T> patch_tokens(const Tensor<T>& x, BnMode mode);

 private:
  BlockConfig cfg_;
  ConvBlock<T> local_;
  Tensor<T> to_tokens_;
  TransformerEncoder<T> transformer_;
  ConvBlock<T> from_tokens_;
  ConvBlock<T> fuse_;
};

enum class StageKind { Conv, Mobile, MobileVit };

struct StageSpec {
  StageKind kind = StageKind::Conv;
  BlockConfig cfg;
  bool operator==(const StageSpec&) const = default;
};

/// Two parallel channels over the same input, merged by channel
/// concatenation and a pointwise ConvBlock.
struct CMBlockConfig {
  std::vector<StageSpec> conv_channel;
  std::vector<StageSpec> vit_channel;
  std::size_t out_channels = 128;

  /// Conv channel: stem 16, Mobile 24, Mobile 48. MobileViT channel: the
  /// same, then one MobileViT block (d 64, depth 2, heads 2, patch 2x2).
  /// Merge to 128. For 64x64 inputs.
  static CMBlockConfig desk_default(std::size_t in_channels = 1);
  /// Narrower profile for quick CPU runs (32x32 inputs).
  static CMBlockConfig compact(std::size_t in_channels = 1);
  /// Tiny profile for gradient checks (8x8 inputs).
  static CMBlockConfig miniature(std::size_t in_channels = 1);

  std::size_t in_channels() const;
  /// Total spatial downsampling factor of each channel.
  std::size_t downsampling() const;
  /// Smallest input side length compatible with every stride and patch.
  std::size_t input_multiple() const;
  void validate() const;

  bool operator==(const CMBlockConfig&) const = default;
};

template <typename T>
class CMBlock {
 public:
  CMBlock() = default;
  CMBlock(const CMBlockConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, BnMode mode);
  Tensor<T> conv_channel(const Tensor<T>& x, BnMode mode);
  Tensor<T> vit_channel(const Tensor<T>& x, BnMode mode);
  void visit(ParameterVisitor<T>& v, const std::string& prefix);
  const CMBlockConfig& config() const { return cfg_; }

 private:
  using Stage = std::variant<ConvBlock<T>, MobileBlock<T>, MobileVitBlock<T>>;
  static Stage make_stage(const StageSpec& spec, Rng& rng);
  static Tensor<T> run(std::vector<Stage>& stages, Tensor<T> x, BnMode mode);

  CMBlockConfig cfg_;
  std::vector<Stage> conv_;
  std::vector<Stage> vit_;
  ConvBlock<T> merge_;
};

/// Collects parameters (and optionally buffers) into a flat list.
template <typename T>
struct ParameterList : ParameterVisitor<T> {
  std::vector<std::pair<std::string, Tensor<T>>> params;
  std::vector<std::pair<std::string, std::vector<T>*>> buffers;
  void parameter(const std::string& name, Tensor<T>& value) override { params.emplace_back(name, value); }
  void buffer(const std::string& name, std::vector<T>& value) override { buffers.emplace_back(name, &value); }
};

}  // namespace smvit::nn
