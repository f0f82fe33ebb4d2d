#include "smvit/blocks.hpp"

#include <cmath>
#include <numeric>

namespace smvit::nn {

namespace {

std::string join(const std::string& prefix, const char* name) {
  return prefix.empty() ? std::string(name) : prefix + "." + name;
}

// He-normal for convolution kernels (fan_in = in * kh * kw).
template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  std::vector<T> v(shape_numel(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : v) x = static_cast<T>(rng.normal(0.0, sd));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

// Glorot-uniform for linear weights [in, out].
template <typename T>
Tensor<T> glorot(std::size_t in, std::size_t out, Rng& rng) {
  std::vector<T> v(in * out);
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
  return Tensor<T>::from({in, out}, std::move(v), true);
}

template <typename T>
Tensor<T> param_full(std::size_t n, T value) {
  return Tensor<T>::full({n}, value, true);
}

std::size_t hidden_width(const BlockConfig& cfg) {
  const double h = std::round(static_cast<double>(cfg.in_channels) * cfg.expansion_ratio);
  return std::max<std::size_t>(1, static_cast<std::size_t>(h));
}

template <typename T>
[[maybe_unused]] void check_rows_sum_to_one(const Tensor<T>& x) {
  const std::size_t n = x.dim(x.rank() - 1);
  const auto d = x.data();
  const double tol = sizeof(T) == sizeof(double) ? 1e-6 : 1e-5;
  for (std::size_t r = 0; r * n < d.size(); ++r) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += d[r * n + j];
    if (std::abs(s - 1.0) > tol) fail(ErrorKind::Numeric, "attention: weight row " + std::to_string(r) + " sums to " + std::to_string(s));
  }
}

}  // namespace

void BlockConfig::validate_conv() const {
  if (in_channels == 0 || out_channels == 0) fail(ErrorKind::Config, "block channels must be positive");
  if (kernel == 0 || kernel % 2 == 0) fail(ErrorKind::Config, "kernel must be odd, got " + std::to_string(kernel));
  if (stride == 0) fail(ErrorKind::Config, "stride must be positive");
  if (!(expansion_ratio > 0)) fail(ErrorKind::Config, "expansion_ratio must be positive");
}

void BlockConfig::validate_transformer() const {
  if (token_dim == 0 || heads == 0 || d_k == 0 || ffn_dim == 0)
    fail(ErrorKind::Config, "token_dim, heads, d_k and ffn_dim must be positive");
  if (heads * d_k != token_dim)
    fail(ErrorKind::Config, "heads * d_k = " + std::to_string(heads * d_k) + " does not equal token_dim " +
                                std::to_string(token_dim));
  if (patch_w == 0 || patch_h == 0) fail(ErrorKind::Config, "patch dims must be positive");
}

// ---------------------------------------------------------------- BatchNorm2d

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::size_t channels)
    : gamma(param_full<T>(channels, T{1})), beta(param_full<T>(channels, T{0})), state(channels) {}

template <typename T>
Tensor<T> BatchNorm2d<T>::forward(const Tensor<T>& x, BnMode mode) {
  return batchnorm2d(x, gamma, beta, state, mode);
}

template <typename T>
void BatchNorm2d<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  v.parameter(join(prefix, "gamma"), gamma);
  v.parameter(join(prefix, "beta"), beta);
  v.buffer(join(prefix, "running_mean"), state.running_mean);
  v.buffer(join(prefix, "running_var"), state.running_var);
}

// ------------------------------------------------------------------ ConvBlock

template <typename T>
ConvBlock<T>::ConvBlock(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                        bool activation, Rng& rng)
    : kernel_(kaiming<T>({out_channels, in_channels, kernel, kernel}, in_channels * kernel * kernel, rng)),
      bn_(out_channels),
      stride_(stride),
      activation_(activation) {
  BlockConfig c;
  c.in_channels = in_channels;
  c.out_channels = out_channels;
  c.kernel = kernel;
  c.stride = stride;
  c.validate_conv();
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x, BnMode mode) {
  auto y = conv2d(x, kernel_, Tensor<T>(), stride_, kernel_.dim(2) / 2);
  y = bn_.forward(y, mode);
  return activation_ ? silu(y) : y;
}

template <typename T>
void ConvBlock<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  v.parameter(join(prefix, "kernel"), kernel_);
  bn_.visit(v, join(prefix, "bn"));
}

// ---------------------------------------------------------------- MobileBlock

template <typename T>
MobileBlock<T>::MobileBlock(const BlockConfig& cfg, Rng& rng) {
  cfg.validate_conv();
  const std::size_t hidden = hidden_width(cfg);
  expand_ = ConvBlock<T>(cfg.in_channels, hidden, 1, 1, true, rng);
  depthwise_ = kaiming<T>({hidden, cfg.kernel, cfg.kernel}, cfg.kernel * cfg.kernel, rng);
  depthwise_bn_ = BatchNorm2d<T>(hidden);
  project_ = ConvBlock<T>(hidden, cfg.out_channels, 1, 1, false, rng);
  stride_ = cfg.stride;
  residual_ = cfg.stride == 1 && cfg.in_channels == cfg.out_channels;
}

template <typename T>
Tensor<T> MobileBlock<T>::forward(const Tensor<T>& x, BnMode mode) {
  auto h = expand_.forward(x, mode);
  h = depthwise_conv2d(h, depthwise_, Tensor<T>(), stride_, depthwise_.dim(1) / 2);
  h = silu(depthwise_bn_.forward(h, mode));
  h = project_.forward(h, mode);
  return residual_ ? add(h, x) : h;
}

template <typename T>
void MobileBlock<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  expand_.visit(v, join(prefix, "expand"));
  v.parameter(join(prefix, "depthwise"), depthwise_);
  depthwise_bn_.visit(v, join(prefix, "depthwise_bn"));
  project_.visit(v, join(prefix, "project"));
}

// ------------------------------------------------------------------ attention

template <typename T>
std::pair<Tensor<T>, AttentionTensors<T>> attention_with_weights(const Tensor<T>& q, const Tensor<T>& k,
                                                                 const Tensor<T>& v, std::size_t d_k) {
  if (q.rank() != k.rank() || q.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3))
    fail(ErrorKind::Shape, "attention: Q " + shape_str(q.shape()) + ", K " + shape_str(k.shape()) + ", V " +
                               shape_str(v.shape()) + " must all be rank 2 or all rank 3");
  const std::size_t r = q.rank();
  if (q.dim(r - 1) != d_k || k.dim(r - 1) != d_k)
    fail(ErrorKind::Shape, "attention: Q " + shape_str(q.shape()) + " and K " + shape_str(k.shape()) +
                               " must have width d_k=" + std::to_string(d_k));
  if (k.dim(r - 2) != v.dim(r - 2))
    fail(ErrorKind::Shape, "attention: K " + shape_str(k.shape()) + " and V " + shape_str(v.shape()) +
                               " need equal token counts");
  if (r == 3 && (q.dim(0) != k.dim(0) || q.dim(0) != v.dim(0)))
    fail(ErrorKind::Shape, "attention: group counts differ between Q, K, V");

  auto lift = [](const Tensor<T>& t) { return t.rank() == 3 ? t : reshape(t, {1, t.dim(0), t.dim(1)}); };
  const auto Q = lift(q), K = lift(k), V = lift(v);
  const auto scores = scale(bmm(Q, K, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(d_k))));
  const auto X = softmax(scores);
#ifndef NDEBUG
  check_rows_sum_to_one(X);
#endif
  auto out = bmm(X, V);
  if (r == 2) {
    out = reshape(out, {q.dim(0), v.dim(1)});
    return {out, {q, k, v, reshape(X, {q.dim(0), k.dim(0)})}};
  }
  return {out, {q, k, v, X}};
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t d_k) {
  return attention_with_weights(q, k, v, d_k).first;
}

// ----------------------------------------------------- MultiHeadSelfAttention

template <typename T>
MultiHeadSelfAttention<T>::MultiHeadSelfAttention(const BlockConfig& cfg, Rng& rng)
    : heads_(cfg.heads), d_k_(cfg.d_k), dim_(cfg.token_dim) {
  cfg.validate_transformer();
  wq_ = glorot<T>(dim_, dim_, rng);
  bq_ = param_full<T>(dim_, T{0});
  wk_ = glorot<T>(dim_, dim_, rng);
  bk_ = param_full<T>(dim_, T{0});
  wv_ = glorot<T>(dim_, dim_, rng);
  bv_ = param_full<T>(dim_, T{0});
  wo_ = glorot<T>(dim_, dim_, rng);
  bo_ = param_full<T>(dim_, T{0});
}

template <typename T>
Tensor<T> MultiHeadSelfAttention<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 2 && x.rank() != 3) fail(ErrorKind::Shape, "mhsa: expected [tokens,d] or [S,tokens,d], got " + shape_str(x.shape()));
  if (x.dim(x.rank() - 1) != dim_)
    fail(ErrorKind::Config, "mhsa: token width " + std::to_string(x.dim(x.rank() - 1)) + " does not match d=" +
                                std::to_string(dim_));
  const bool flat = x.rank() == 2;
  const std::size_t S = flat ? 1 : x.dim(0);
  const std::size_t N = x.dim(x.rank() - 2);
  const auto x3 = flat ? reshape(x, {1, N, dim_}) : x;

  auto split = [&](const Tensor<T>& w, const Tensor<T>& b) {
    auto t = reshape(linear(x3, w, b), {S, N, heads_, d_k_});
    return reshape(permute(t, {0, 2, 1, 3}), {S * heads_, N, d_k_});
  };
  const auto o = attention(split(wq_, bq_), split(wk_, bk_), split(wv_, bv_), d_k_);
  auto merged = reshape(permute(reshape(o, {S, heads_, N, d_k_}), {0, 2, 1, 3}), {S, N, dim_});
  auto y = linear(merged, wo_, bo_);
  return flat ? reshape(y, {N, dim_}) : y;
}

template <typename T>
void MultiHeadSelfAttention<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  v.parameter(join(prefix, "wq"), wq_);
  v.parameter(join(prefix, "bq"), bq_);
  v.parameter(join(prefix, "wk"), wk_);
  v.parameter(join(prefix, "bk"), bk_);
  v.parameter(join(prefix, "wv"), wv_);
  v.parameter(join(prefix, "bv"), bv_);
  v.parameter(join(prefix, "wo"), wo_);
  v.parameter(join(prefix, "bo"), bo_);
}

// --------------------------------------------------------- TransformerEncoder

template <typename T>
TransformerEncoder<T>::TransformerEncoder(const BlockConfig& cfg, Rng& rng) {
  cfg.validate_transformer();
  const std::size_t d = cfg.token_dim;
  for (std::size_t i = 0; i < cfg.transformer_depth; ++i) {
    Layer l;
    l.ln1_g = param_full<T>(d, T{1});
    l.ln1_b = param_full<T>(d, T{0});
    l.mhsa = MultiHeadSelfAttention<T>(cfg, rng);
    l.ln2_g = param_full<T>(d, T{1});
    l.ln2_b = param_full<T>(d, T{0});
    l.w1 = glorot<T>(d, cfg.ffn_dim, rng);
    l.b1 = param_full<T>(cfg.ffn_dim, T{0});
    l.w2 = glorot<T>(cfg.ffn_dim, d, rng);
    l.b2 = param_full<T>(d, T{0});
    layers_.push_back(std::move(l));
  }
}

template <typename T>
Tensor<T> TransformerEncoder<T>::forward(const Tensor<T>& x) const {
  Tensor<T> h = x;
  for (const auto& l : layers_) {
    h = add(h, l.mhsa.forward(layer_norm(h, l.ln1_g, l.ln1_b)));
    const auto f = linear(silu(linear(layer_norm(h, l.ln2_g, l.ln2_b), l.w1, l.b1)), l.w2, l.b2);
    h = add(h, f);
  }
  return h;
}

template <typename T>
void TransformerEncoder<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& l = layers_[i];
    const std::string p = join(prefix, ("layer" + std::to_string(i)).c_str());
    v.parameter(join(p, "ln1_g"), l.ln1_g);
    v.parameter(join(p, "ln1_b"), l.ln1_b);
    l.mhsa.visit(v, join(p, "mhsa"));
    v.parameter(join(p, "ln2_g"), l.ln2_g);
    v.parameter(join(p, "ln2_b"), l.ln2_b);
    v.parameter(join(p, "ffn_w1"), l.w1);
    v.parameter(join(p, "ffn_b1"), l.b1);
    v.parameter(join(p, "ffn_w2"), l.w2);
    v.parameter(join(p, "ffn_b2"), l.b2);
  }
}

// ------------------------------------------------------------- MobileVitBlock

template <typename T>
MobileVitBlock<T>::MobileVitBlock(const BlockConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.out_channels = cfg_.in_channels;
  cfg_.validate_conv();
  cfg_.validate_transformer();
  const std::size_t C = cfg_.in_channels, d = cfg_.token_dim;
  local_ = ConvBlock<T>(C, C, 3, 1, true, rng);
  to_tokens_ = kaiming<T>({d, C, 1, 1}, C, rng);
  transformer_ = TransformerEncoder<T>(cfg_, rng);
  from_tokens_ = ConvBlock<T>(d, C, 1, 1, true, rng);
  fuse_ = ConvBlock<T>(2 * C, C, 3, 1, true, rng);
}

template <typename T>
Tensor<T> MobileVitBlock<T>::token_map(const Tensor<T>& x, BnMode mode) {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
    fail(ErrorKind::Shape, "mobilevit_block: expected [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                               shape_str(x.shape()));
  const auto local = local_.forward(x, mode);
  return conv2d(local, to_tokens_, Tensor<T>(), 1, 0);
}

template <typename T>
Tensor<T> MobileVitBlock<T>::patch_tokens(const Tensor<T>& x, BnMode mode) {
  return unfold_patches(token_map(x, mode), cfg_.patch_w, cfg_.patch_h);
}

template <typename T>
Tensor<T> MobileVitBlock<T>::forward(const Tensor<T>& x, BnMode mode) {
  const auto tokens = patch_tokens(x, mode);  // [B, Np, P, d]
  const std::size_t B = tokens.dim(0), Np = tokens.dim(1), P = tokens.dim(2), d = tokens.dim(3);
  // Attention runs across patches, once per in-patch pixel position.
  auto seq = reshape(permute(tokens, {0, 2, 1, 3}), {B * P, Np, d});
  seq = transformer_.forward(seq);
  const auto back = permute(reshape(seq, {B, P, Np, d}), {0, 2, 1, 3});
  const auto folded = fold_patches(back, x.dim(2), x.dim(3), cfg_.patch_w, cfg_.patch_h);
  const auto global = from_tokens_.forward(folded, mode);
  return fuse_.forward(concat<T>({x, global}, 1), mode);
}

template <typename T>
void MobileVitBlock<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  local_.visit(v, join(prefix, "local"));
  v.parameter(join(prefix, "to_tokens"), to_tokens_);
  transformer_.visit(v, join(prefix, "transformer"));
  from_tokens_.visit(v, join(prefix, "from_tokens"));
  fuse_.visit(v, join(prefix, "fuse"));
}

// ----------------------------------------------------------------- CMBlockConfig

namespace {

StageSpec conv_stage(std::size_t in, std::size_t out, std::size_t stride) {
  StageSpec s;
  s.kind = StageKind::Conv;
  s.cfg.in_channels = in;
  s.cfg.out_channels = out;
  s.cfg.kernel = 3;
  s.cfg.stride = stride;
  return s;
}

StageSpec mobile_stage(std::size_t in, std::size_t out, std::size_t stride, double expansion = 2.0) {
  StageSpec s;
  s.kind = StageKind::Mobile;
  s.cfg.in_channels = in;
  s.cfg.out_channels = out;
  s.cfg.kernel = 3;
  s.cfg.stride = stride;
  s.cfg.expansion_ratio = expansion;
  return s;
}

StageSpec vit_stage(std::size_t channels, std::size_t d, std::size_t depth, std::size_t heads, std::size_t ffn,
                    std::size_t patch) {
  StageSpec s;
  s.kind = StageKind::MobileVit;
  s.cfg.in_channels = channels;
  s.cfg.out_channels = channels;
  s.cfg.token_dim = d;
  s.cfg.heads = heads;
  s.cfg.d_k = d / heads;
  s.cfg.transformer_depth = depth;
  s.cfg.ffn_dim = ffn;
  s.cfg.patch_w = patch;
  s.cfg.patch_h = patch;
  return s;
}

std::size_t stage_stride(const StageSpec& s) { return s.kind == StageKind::MobileVit ? 1 : s.cfg.stride; }

std::size_t stage_out(const StageSpec& s) {
  return s.kind == StageKind::MobileVit ? s.cfg.in_channels : s.cfg.out_channels;
}

std::size_t channel_downsampling(const std::vector<StageSpec>& stages) {
  std::size_t f = 1;
  for (const auto& s : stages) f *= stage_stride(s);
  return f;
}

std::size_t channel_multiple(const std::vector<StageSpec>& stages) {
  std::size_t f = 1, m = 1;
  for (const auto& s : stages) {
    if (s.kind == StageKind::MobileVit) m = std::lcm(m, std::lcm(f * s.cfg.patch_w, f * s.cfg.patch_h));
    f *= stage_stride(s);
  }
  return std::lcm(m, f);
}

}  // namespace

CMBlockConfig CMBlockConfig::desk_default(std::size_t in) {
  CMBlockConfig c;
  c.conv_channel = {conv_stage(in, 16, 2), mobile_stage(16, 24, 2), mobile_stage(24, 48, 2)};
  c.vit_channel = {conv_stage(in, 16, 2), mobile_stage(16, 24, 2), mobile_stage(24, 48, 2),
                   vit_stage(48, 64, 2, 2, 128, 2)};
  c.out_channels = 128;
  return c;
}

CMBlockConfig CMBlockConfig::compact(std::size_t in) {
  CMBlockConfig c;
  c.conv_channel = {conv_stage(in, 8, 2), mobile_stage(8, 12, 2), mobile_stage(12, 16, 2)};
  c.vit_channel = {conv_stage(in, 8, 2), mobile_stage(8, 12, 2), mobile_stage(12, 16, 2),
                   vit_stage(16, 16, 1, 2, 32, 2)};
  c.out_channels = 32;
  return c;
}

CMBlockConfig CMBlockConfig::miniature(std::size_t in) {
  CMBlockConfig c;
  c.conv_channel = {conv_stage(in, 3, 1), mobile_stage(3, 4, 2)};
  c.vit_channel = {conv_stage(in, 3, 1), mobile_stage(3, 4, 2), vit_stage(4, 4, 1, 2, 6, 2)};
  c.out_channels = 6;
  return c;
}

std::size_t CMBlockConfig::in_channels() const {
  return conv_channel.empty() ? 0 : conv_channel.front().cfg.in_channels;
}

std::size_t CMBlockConfig::downsampling() const { return channel_downsampling(conv_channel); }

std::size_t CMBlockConfig::input_multiple() const {
  return std::lcm(channel_multiple(conv_channel), channel_multiple(vit_channel));
}

void CMBlockConfig::validate() const {
  if (conv_channel.empty() || vit_channel.empty()) fail(ErrorKind::Config, "cm_block: both channels need stages");
  if (out_channels == 0) fail(ErrorKind::Config, "cm_block: out_channels must be positive");
  if (conv_channel.front().cfg.in_channels != vit_channel.front().cfg.in_channels)
    fail(ErrorKind::Config, "cm_block: channels disagree on input width");
  bool has_vit = false;
  for (const auto* stages : {&conv_channel, &vit_channel}) {
    std::size_t width = stages->front().cfg.in_channels;
    for (const auto& s : *stages) {
      if (s.cfg.in_channels != width)
        fail(ErrorKind::Config, "cm_block: stage expects " + std::to_string(s.cfg.in_channels) +
                                    " input channels but receives " + std::to_string(width));
      s.cfg.validate_conv();
      if (s.kind == StageKind::MobileVit) {
        s.cfg.validate_transformer();
        has_vit = has_vit || stages == &vit_channel;
      }
      width = stage_out(s);
    }
  }
  if (!has_vit) fail(ErrorKind::Config, "cm_block: the MobileViT channel contains no MobileViT stage");
  if (channel_downsampling(conv_channel) != channel_downsampling(vit_channel))
    fail(ErrorKind::Config, "cm_block: channels downsample by " + std::to_string(channel_downsampling(conv_channel)) +
                                " and " + std::to_string(channel_downsampling(vit_channel)));
}

// --------------------------------------------------------------------- CMBlock

template <typename T>
typename CMBlock<T>::Stage CMBlock<T>::make_stage(const StageSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case StageKind::Conv:
      return ConvBlock<T>(spec.cfg.in_channels, spec.cfg.out_channels, spec.cfg.kernel, spec.cfg.stride, true, rng);
    case StageKind::Mobile:
      return MobileBlock<T>(spec.cfg, rng);
    case StageKind::MobileVit:
      return MobileVitBlock<T>(spec.cfg, rng);
  }
  fail(ErrorKind::Config, "unknown stage kind");
}

template <typename T>
CMBlock<T>::CMBlock(const CMBlockConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  for (const auto& s : cfg_.conv_channel) conv_.push_back(make_stage(s, rng));
  for (const auto& s : cfg_.vit_channel) vit_.push_back(make_stage(s, rng));
  const std::size_t merged = stage_out(cfg_.conv_channel.back()) + stage_out(cfg_.vit_channel.back());
  merge_ = ConvBlock<T>(merged, cfg_.out_channels, 1, 1, true, rng);
}

template <typename T>
Tensor<T> CMBlock<T>::run(std::vector<Stage>& stages, Tensor<T> x, BnMode mode) {
  for (auto& s : stages) x = std::visit([&](auto& b) { return b.forward(x, mode); }, s);
  return x;
}

template <typename T>
Tensor<T> CMBlock<T>::conv_channel(const Tensor<T>& x, BnMode mode) {
  return run(conv_, x, mode);
}

template <typename T>
Tensor<T> CMBlock<T>::vit_channel(const Tensor<T>& x, BnMode mode) {
  return run(vit_, x, mode);
}

template <typename T>
Tensor<T> CMBlock<T>::forward(const Tensor<T>& x, BnMode mode) {
  const auto a = conv_channel(x, mode);
  const auto b = vit_channel(x, mode);
  if (a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    fail(ErrorKind::Config, "cm_block: channel outputs " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                " cannot be merged");
  return merge_.forward(concat<T>({a, b}, 1), mode);
}

template <typename T>
void CMBlock<T>::visit(ParameterVisitor<T>& v, const std::string& prefix) {
  for (std::size_t i = 0; i < conv_.size(); ++i)
    std::visit([&](auto& b) { b.visit(v, join(prefix, ("conv" + std::to_string(i)).c_str())); }, conv_[i]);
  for (std::size_t i = 0; i < vit_.size(); ++i)
    std::visit([&](auto& b) { b.visit(v, join(prefix, ("vit" + std::to_string(i)).c_str())); }, vit_[i]);
  merge_.visit(v, join(prefix, "merge"));
}

#define SMVIT_INSTANTIATE_BLOCKS(T)                                                                            \
  template class BatchNorm2d<T>;                                                                               \
  template class ConvBlock<T>;                                                                                 \
  template class MobileBlock<T>;                                                                               \
  template class MultiHeadSelfAttention<T>;                                                                    \
  template class TransformerEncoder<T>;                                                                        \
  template class MobileVitBlock<T>;                                                                            \
  template class CMBlock<T>;                                                                                   \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);             \
  template std::pair<Tensor<T>, AttentionTensors<T>> attention_with_weights(const Tensor<T>&, const Tensor<T>&, \
                                                                            const Tensor<T>&, std::size_t);

SMVIT_INSTANTIATE_BLOCKS(float)
SMVIT_INSTANTIATE_BLOCKS(double)

}  // namespace smvit::nn
