#include "smvit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "smvit/config_json.hpp"
#include "smvit/error.hpp"
#include "smvit/ops.hpp"

namespace smvit::model {

SmvitConfig SmvitConfig::desk(std::size_t num_subjects) {
  SmvitConfig c;
  c.num_subjects = num_subjects;
  return c;
}

SmvitConfig SmvitConfig::compact(std::size_t num_subjects) {
  SmvitConfig c;
  c.backbone = nn::CMBlockConfig::compact();
  c.num_subjects = num_subjects;
  c.input_height = c.input_width = 32;
  return c;
}

SmvitConfig SmvitConfig::miniature(std::size_t num_subjects) {
  SmvitConfig c;
  c.backbone = nn::CMBlockConfig::miniature();
  c.num_subjects = num_subjects;
  c.input_height = c.input_width = 8;
  return c;
}

void SmvitConfig::validate() const {
  backbone.validate();
  if (backbone.in_channels() != 1) fail(ErrorKind::Config, "model: silhouettes have one channel");
  if (num_subjects == 0) fail(ErrorKind::Config, "model: num_subjects must be positive");
  const std::size_t m = backbone.input_multiple();
  if (input_height == 0 || input_width == 0 || input_height % m != 0 || input_width % m != 0)
    fail(ErrorKind::Config, "model: input " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                                " must be a positive multiple of " + std::to_string(m));
  check_view_angle(standard_view);
  if (!(contrastive_weight >= 0.0) || !std::isfinite(contrastive_weight))
    fail(ErrorKind::Config, "model: contrastive_weight must be finite and non-negative");
}

template <typename T>
void SiamesePair<T>::validate() const {
  const std::size_t n = labels_a.size();
  if (!a.defined() || !b.defined() || a.rank() != 4 || b.rank() != 4)
    fail(ErrorKind::Shape, "siamese pair: both sides need [B,1,H,W] frames");
  if (a.dim(0) != n || b.dim(0) != n || labels_b.size() != n || views_a.size() != n || views_b.size() != n)
    fail(ErrorKind::Shape, "siamese pair: batch sizes of the two sides differ");
}

template <typename T>
Tensor<T> frames_tensor(std::span<const data::Frame* const> frames) {
  if (frames.empty()) fail(ErrorKind::Shape, "frames_tensor: empty batch");
  const std::size_t h = frames[0]->image.height, w = frames[0]->image.width;
  std::vector<T> v;
  v.reserve(frames.size() * h * w);
  for (const auto* f : frames) {
    if (f->image.height != h || f->image.width != w)
      fail(ErrorKind::Shape, "frames_tensor: frames of different resolution in one batch");
    for (float p : f->image.pixels) v.push_back(static_cast<T>(p));
  }
  return Tensor<T>::from({frames.size(), 1, h, w}, std::move(v));
}

template <typename T>
Tensor<T> frames_tensor(const std::vector<data::Frame>& frames) {
  std::vector<const data::Frame*> ptrs;
  for (const auto& f : frames) ptrs.push_back(&f);
  return frames_tensor<T>(std::span<const data::Frame* const>(ptrs));
}

template <typename T>
SmvitModel<T>::SmvitModel(const SmvitConfig& config, std::uint64_t seed) : cfg_(config) {
  cfg_.validate();
  Rng rng(seed);
  backbone_ = nn::CMBlock<T>(cfg_.backbone, rng);
  const std::size_t d = cfg_.feat_dim(), k = cfg_.num_subjects;
  std::vector<T> w(d * k);
  const double a = std::sqrt(6.0 / static_cast<double>(d + k));
  for (auto& x : w) x = static_cast<T>(rng.uniform(-a, a));
  head_w_ = Tensor<T>::from({d, k}, std::move(w), true);
  head_b_ = Tensor<T>::zeros({k}, true);
}

template <typename T>
Tensor<T> SmvitModel<T>::embed(const Tensor<T>& frames, BnMode mode) {
  if (frames.rank() != 4 || frames.dim(1) != 1 || frames.dim(2) != cfg_.input_height ||
      frames.dim(3) != cfg_.input_width)
    fail(ErrorKind::Shape, "embed: expected [B,1," + std::to_string(cfg_.input_height) + "," +
                               std::to_string(cfg_.input_width) + "] frames, got " + shape_str(frames.shape()));
  return global_avg_pool(backbone_.forward(frames, mode));
}

template <typename T>
Tensor<T> SmvitModel<T>::convert(const Tensor<T>& embeddings, std::span<const int> views,
                                 const FactorRegistry* registry) const {
  if (!registry) return embeddings;
  const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
  if (views.size() != n) fail(ErrorKind::Shape, "convert: one view per embedding row is required");
  if (std::all_of(views.begin(), views.end(), [&](int v) { return v == registry->standard_view; })) return embeddings;
  if (registry->feat_dim != d)
    fail(ErrorKind::Shape, "convert: registry width " + std::to_string(registry->feat_dim) + " vs embedding width " +
                               std::to_string(d));
  std::vector<T> offset(n * d, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    if (views[i] == registry->standard_view) continue;
    const auto& f = registry->at(views[i]).factor;
    for (std::size_t c = 0; c < d; ++c) offset[i * d + c] = static_cast<T>(f[c]);
  }
  return add(embeddings, Tensor<T>::from({n, d}, std::move(offset)));
}

template <typename T>
Tensor<T> SmvitModel<T>::classify(const Tensor<T>& embeddings) const {
  return linear(embeddings, head_w_, head_b_);
}

template <typename T>
PairOutput<T> SmvitModel<T>::forward_pair(const SiamesePair<T>& pair, const FactorRegistry* registry, BnMode mode) {
  pair.validate();
  PairOutput<T> out;
  out.emb_a = embed(pair.a, mode);
  out.emb_b = embed(pair.b, mode);
  out.logits_a = classify(convert(out.emb_a, pair.views_a, registry));
  out.logits_b = classify(convert(out.emb_b, pair.views_b, registry));
  return out;
}

template <typename T>
Tensor<T> SmvitModel<T>::logits(const Tensor<T>& frames, int view, const FactorRegistry* registry) {
  NoGradGuard guard;
  const auto e = embed(frames, BnMode::Infer);
  const std::vector<int> views(e.dim(0), view);
  return classify(convert(e, views, registry));
}

template <typename T>
std::vector<std::size_t> SmvitModel<T>::predict(const Tensor<T>& frames, int view, const FactorRegistry* registry) {
  return argmax_rows(logits(frames, view, registry));
}

template <typename T>
void SmvitModel<T>::visit(nn::ParameterVisitor<T>& v) {
  backbone_.visit(v, "backbone");
  v.parameter("head.weight", head_w_);
  v.parameter("head.bias", head_b_);
}

template <typename T>
nn::ParameterList<T> SmvitModel<T>::parameters() {
  nn::ParameterList<T> list;
  visit(list);
  return list;
}

template <typename T>
std::size_t SmvitModel<T>::parameter_count() {
  std::size_t n = 0;
  for (const auto& [_, p] : parameters().params) n += p.numel();
  return n;
}

template <typename T>
nn::CMBlock<T>& SmvitModel<T>::branch(int index) {
  if (index != 0 && index != 1) fail(ErrorKind::Config, "branch index must be 0 or 1");
  return backbone_;
}

template <typename T>
double SmvitModel<T>::parameter_checksum(int branch_index) {
  nn::ParameterList<T> list;
  branch(branch_index).visit(list, "backbone");
  list.parameter("head.weight", head_w_);
  list.parameter("head.bias", head_b_);
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& [_, p] : list.params)
    for (T x : p.data()) s += std::abs(static_cast<double>(x)) * static_cast<double>(++k);
  return s;
}

template <typename T>
void SmvitModel<T>::zero_grad() {
  for (auto& [_, p] : parameters().params) p.zero_grad();
}

template <typename T>
Tensor<T> pair_loss(const PairOutput<T>& out, std::span<const std::size_t> labels_a,
                    std::span<const std::size_t> labels_b, double contrastive_weight) {
  auto loss = scale(add(cross_entropy(out.logits_a, labels_a), cross_entropy(out.logits_b, labels_b)), T(0.5));
  if (contrastive_weight <= 0.0) return loss;
  const std::size_t n = labels_a.size(), d = out.emb_a.dim(1);
  std::vector<T> mask(n * d, T(0));
  std::size_t matched = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (labels_a[i] == labels_b[i]) {
      ++matched;
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(i * d), d, T(1));
    }
  if (matched == 0) return loss;
  const auto diff = sub(out.emb_a, out.emb_b);
  const auto sq = mul(mul(diff, diff), Tensor<T>::from({n, d}, std::move(mask)));
  return add(loss, scale(sum(sq), static_cast<T>(contrastive_weight / static_cast<double>(matched))));
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) fail(ErrorKind::Rank, "argmax_rows: expected [B,K] logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  const auto d = logits.data();
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<std::size_t>(std::max_element(d.begin() + i * k, d.begin() + (i + 1) * k) - (d.begin() + i * k));
  return out;
}

template <typename T>
std::map<int, FeatureBatch> embed_by_view(SmvitModel<T>& model, const std::vector<data::Frame>& frames,
                                          std::size_t batch_size) {
  std::map<int, std::vector<const data::Frame*>> groups;
  for (const auto& f : frames) groups[f.view].push_back(&f);
  std::map<int, FeatureBatch> out;
  NoGradGuard guard;
  for (const auto& [view, list] : groups) {
    FeatureBatch batch;
    batch.view = view;
    batch.feat_dim = model.feat_dim();
    for (std::size_t i = 0; i < list.size(); i += batch_size) {
      const std::size_t n = std::min(batch_size, list.size() - i);
      const std::span<const data::Frame* const> chunk(list.data() + i, n);
      const auto e = model.embed(frames_tensor<T>(chunk), BnMode::Infer);
      const auto d = e.data();
      std::vector<double> row(batch.feat_dim);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < batch.feat_dim; ++c) row[c] = static_cast<double>(d[r * batch.feat_dim + c]);
        batch.push_back(row, chunk[r]->key);
      }
    }
    out.emplace(view, std::move(batch));
  }
  return out;
}

template <typename T>
FactorRegistry build_factor_registry(SmvitModel<T>& model, const std::vector<data::Frame>& frames, Pairing pairing) {
  return build_registry(embed_by_view(model, frames), model.config().standard_view, pairing);
}

// ----------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'S', 'M', 'V', 'T', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

struct Entry {
  std::string name;
  Shape shape;
  bool buffer;
};

template <typename T>
struct Collected {
  std::vector<Entry> entries;
  std::vector<std::span<T>> values;
};

template <typename T>
Collected<T> collect(SmvitModel<T>& model) {
  Collected<T> c;
  auto list = model.parameters();
  for (auto& [name, p] : list.params) {
    c.entries.push_back({name, p.shape(), false});
    c.values.push_back(p.mutable_data());
  }
  for (auto& [name, b] : list.buffers) {
    c.entries.push_back({name, {b->size()}, true});
    c.values.push_back(std::span<T>(*b));
  }
  return c;
}

json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) fail(ErrorKind::Load, path + " is not a checkpoint (bad magic)");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in) fail(ErrorKind::Load, "truncated checkpoint header in " + path);
  if (version != kVersion) fail(ErrorKind::Load, "unsupported checkpoint version " + std::to_string(version));
  if (len > (std::uint64_t(1) << 30)) fail(ErrorKind::Load, "implausible checkpoint header length in " + path);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (in.gcount() != static_cast<std::streamsize>(len)) fail(ErrorKind::Load, "truncated checkpoint header in " + path);
  return parse_json(text, "checkpoint header of " + path, true);
}

CheckpointInfo info_from(const json& h) {
  CheckpointInfo info;
  try {
    h.at("config").get_to(info.config);
    info.seed = h.at("seed").get<std::uint64_t>();
    info.stage = h.at("stage").get<std::size_t>();
    info.precision = h.at("precision").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorKind::Load, std::string("malformed checkpoint header: ") + e.what());
  } catch (const Error& e) {
    fail(ErrorKind::Load, std::string("checkpoint header has an invalid config: ") + e.what());
  }
  if (info.precision != 32 && info.precision != 64)
    fail(ErrorKind::Load, "checkpoint precision must be 32 or 64");
  return info;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, SmvitModel<T>& model, std::uint64_t seed, std::size_t stage) {
  auto c = collect(model);
  json tensors = json::array();
  for (const auto& e : c.entries) tensors.push_back({{"name", e.name}, {"shape", e.shape}, {"buffer", e.buffer}});
  const json header{{"config", model.config()},
                    {"seed", seed},
                    {"stage", stage},
                    {"precision", int(sizeof(T) * 8)},
                    {"tensors", tensors}};
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path);
  const std::uint64_t len = text.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  // Values in host byte order.
  for (const auto& v : c.values)
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!out) fail(ErrorKind::Io, "write failed: " + path);
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + path);
  return info_from(read_header(in, path));
}

template <typename T>
CheckpointInfo load_checkpoint(const std::string& path, SmvitModel<T>& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + path);
  const json header = read_header(in, path);
  const CheckpointInfo info = info_from(header);
  auto c = collect(model);
  const auto& tensors = header.contains("tensors") ? header["tensors"] : json();
  if (!tensors.is_array() || tensors.size() != c.entries.size())
    fail(ErrorKind::Load, "checkpoint holds " + std::to_string(tensors.is_array() ? tensors.size() : 0) +
                              " tensors, the configured model has " + std::to_string(c.entries.size()));
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    const auto& e = c.entries[i];
    std::string name;
    Shape shape;
    try {
      name = tensors[i].at("name").get<std::string>();
      shape = tensors[i].at("shape").get<Shape>();
    } catch (const json::exception& ex) {
      fail(ErrorKind::Load, std::string("malformed tensor entry: ") + ex.what());
    }
    if (name != e.name || shape != e.shape)
      fail(ErrorKind::Load, "checkpoint tensor " + name + " " + shape_str(shape) + " does not match model tensor " +
                                e.name + " " + shape_str(e.shape));
  }
  // Read everything before touching the model so a truncated file leaves it intact.
  std::vector<std::vector<T>> staged(c.values.size());
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    const std::size_t n = c.values[i].size();
    staged[i].resize(n);
    if (info.precision == int(sizeof(T) * 8)) {
      in.read(reinterpret_cast<char*>(staged[i].data()), static_cast<std::streamsize>(n * sizeof(T)));
    } else if (info.precision == 64) {
      std::vector<double> raw(n);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(double)));
      std::transform(raw.begin(), raw.end(), staged[i].begin(), [](double x) { return static_cast<T>(x); });
    } else {
      std::vector<float> raw(n);
      in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(float)));
      std::transform(raw.begin(), raw.end(), staged[i].begin(), [](float x) { return static_cast<T>(x); });
    }
    if (!in) fail(ErrorKind::Load, "truncated checkpoint data in " + path);
  }
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Load, "trailing bytes in checkpoint " + path);
  for (std::size_t i = 0; i < c.values.size(); ++i) std::copy(staged[i].begin(), staged[i].end(), c.values[i].begin());
  return info;
}

#define SMVIT_INSTANTIATE_MODEL(T)                                                                              \
  template struct SiamesePair<T>;                                                                               \
  template class SmvitModel<T>;                                                                                 \
  template Tensor<T> frames_tensor<T>(std::span<const data::Frame* const>);                                     \
  template Tensor<T> frames_tensor<T>(const std::vector<data::Frame>&);                                         \
  template Tensor<T> pair_loss<T>(const PairOutput<T>&, std::span<const std::size_t>, std::span<const std::size_t>, \
                                  double);                                                                      \
  template std::vector<std::size_t> argmax_rows<T>(const Tensor<T>&);                                           \
  template std::map<int, FeatureBatch> embed_by_view<T>(SmvitModel<T>&, const std::vector<data::Frame>&,         \
                                                        std::size_t);                                           \
  template FactorRegistry build_factor_registry<T>(SmvitModel<T>&, const std::vector<data::Frame>&, Pairing);   \
  template void save_checkpoint<T>(const std::string&, SmvitModel<T>&, std::uint64_t, std::size_t);             \
  template CheckpointInfo load_checkpoint<T>(const std::string&, SmvitModel<T>&);

SMVIT_INSTANTIATE_MODEL(float)
SMVIT_INSTANTIATE_MODEL(double)

}  // namespace smvit::model
