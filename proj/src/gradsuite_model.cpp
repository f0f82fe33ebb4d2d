#include <functional>

#include "smvit/blocks.hpp"
#include "smvit/gradsuite.hpp"
#include "smvit/model.hpp"
#include "smvit/ops.hpp"
#include "smvit/rng.hpp"

namespace smvit {

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, bool requires_grad = true, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
std::vector<Tensor<T>> trainable(nn::ParameterList<T>& list) {
  std::vector<Tensor<T>> out;
  for (auto& [_, p] : list.params) out.push_back(p);
  return out;
}

/// Gradient of sum(block(x) * r) with respect to x and every block parameter.
template <typename T, typename Block>
GradCheckReport block_report(const std::string& name, Block& block, Tensor<T> x,
                             const std::function<Tensor<T>(Block&, const Tensor<T>&)>& run, Rng& rng,
                             const GradCheckOptions& opt) {
  nn::ParameterList<T> list;
  block.visit(list, name);
  auto inputs = trainable(list);
  inputs.insert(inputs.begin(), x);
  Tensor<T> probe;
  {
    NoGradGuard g;
    probe = run(block, x);
  }
  auto r = random_tensor<T>(rng, probe.shape(), false);
  if constexpr (sizeof(T) == 4) r = scale(r, T(1) / static_cast<T>(r.numel()));
  return grad_check<T>(name, [&block, &run, x, r] { return sum(mul(run(block, x), r)); }, inputs, opt);
}

}  // namespace

template <typename T>
std::vector<GradCheckReport> model_gradcheck_suite(const GradSuiteOptions& options) {
  std::vector<GradCheckReport> reports;
  const GradCheckOptions block_opt{options.step, options.op_tolerance, 0};
  const GradCheckOptions model_opt{options.step, options.model_tolerance, 0};
  Rng rng(Rng::mix(options.seed, 0xB10C));

  {
    nn::ConvBlock<T> b(2, 3, 3, 2, true, rng);
    reports.push_back(block_report<T, nn::ConvBlock<T>>(
        "conv_block", b, random_tensor<T>(rng, {2, 2, 6, 6}),
        [](auto& blk, const Tensor<T>& x) { return blk.forward(x, BnMode::Train); }, rng, block_opt));
  }
  {
    nn::BlockConfig cfg;
    cfg.in_channels = cfg.out_channels = 3;
    nn::MobileBlock<T> b(cfg, rng);
    reports.push_back(block_report<T, nn::MobileBlock<T>>(
        "mobile_block", b, random_tensor<T>(rng, {2, 3, 4, 4}),
        [](auto& blk, const Tensor<T>& x) { return blk.forward(x, BnMode::Train); }, rng, block_opt));
  }
  {
    nn::BlockConfig cfg;
    cfg.token_dim = 4;
    cfg.heads = 2;
    cfg.d_k = 2;
    nn::MultiHeadSelfAttention<T> b(cfg, rng);
    reports.push_back(block_report<T, nn::MultiHeadSelfAttention<T>>(
        "mhsa", b, random_tensor<T>(rng, {5, 4}), [](auto& blk, const Tensor<T>& x) { return blk.forward(x); }, rng,
        block_opt));
  }
  {
    nn::BlockConfig cfg;
    cfg.token_dim = 4;
    cfg.heads = 2;
    cfg.d_k = 2;
    cfg.transformer_depth = 2;
    cfg.ffn_dim = 6;
    nn::TransformerEncoder<T> b(cfg, rng);
    reports.push_back(block_report<T, nn::TransformerEncoder<T>>(
        "transformer_encoder", b, random_tensor<T>(rng, {2, 3, 4}),
        [](auto& blk, const Tensor<T>& x) { return blk.forward(x); }, rng, block_opt));
  }
  {
    nn::BlockConfig cfg;
    cfg.in_channels = cfg.out_channels = 4;
    cfg.token_dim = 4;
    cfg.heads = 2;
    cfg.d_k = 2;
    cfg.transformer_depth = 1;
    cfg.ffn_dim = 6;
    nn::MobileVitBlock<T> b(cfg, rng);
    reports.push_back(block_report<T, nn::MobileVitBlock<T>>(
        "mobilevit_block", b, random_tensor<T>(rng, {2, 4, 4, 4}),
        [](auto& blk, const Tensor<T>& x) { return blk.forward(x, BnMode::Train); }, rng, block_opt));
  }
  {
    nn::CMBlock<T> b(nn::CMBlockConfig::miniature(), rng);
    reports.push_back(block_report<T, nn::CMBlock<T>>(
        "cm_block", b, random_tensor<T>(rng, {2, 1, 8, 8}),
        [](auto& blk, const Tensor<T>& x) { return blk.forward(x, BnMode::Train); }, rng, block_opt));
  }

  // Miniature Siamese model: paired loss through both branches, the view
  // conversion and the head, with respect to every parameter and both inputs.
  {
    auto cfg = model::SmvitConfig::miniature(2);
    cfg.contrastive_weight = 0.1;
    model::SmvitModel<T> m(cfg, Rng::mix(options.seed, 0x5EED));
    view::FactorRegistry registry;
    registry.standard_view = cfg.standard_view;
    registry.feat_dim = cfg.feat_dim();
    view::ViewConversionFactor f;
    f.source = 54;
    f.target = cfg.standard_view;
    for (std::size_t i = 0; i < cfg.feat_dim(); ++i) f.factor.push_back(rng.uniform(-0.5, 0.5));
    registry.entries.emplace(54, f);

    model::SiamesePair<T> pair;
    pair.a = random_tensor<T>(rng, {2, 1, 8, 8}, true, 0.0, 1.0);
    pair.b = random_tensor<T>(rng, {2, 1, 8, 8}, true, 0.0, 1.0);
    pair.views_a = {90, 90};
    pair.views_b = {54, 90};
    pair.labels_a = {0, 1};
    pair.labels_b = {0, 0};

    auto list = m.parameters();
    auto inputs = trainable(list);
    inputs.push_back(pair.a);
    inputs.push_back(pair.b);
    const double w = cfg.contrastive_weight;
    reports.push_back(grad_check<T>(
        "smvit_end_to_end",
        [&m, &pair, &registry, w] {
          const auto out = m.forward_pair(pair, &registry);
          return model::pair_loss(out, pair.labels_a, pair.labels_b, w);
        },
        inputs, model_opt));
  }
  return reports;
}

template std::vector<GradCheckReport> model_gradcheck_suite<float>(const GradSuiteOptions&);
template std::vector<GradCheckReport> model_gradcheck_suite<double>(const GradSuiteOptions&);

}  // namespace smvit
