#include <algorithm>
#include <functional>
#include <utility>

#include "smvit/gradsuite.hpp"
#include "smvit/ops.hpp"
#include "smvit/rng.hpp"

namespace smvit {

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> constant_like(Rng& rng, const Shape& shape) {
  auto t = random_tensor<T>(rng, shape);
  t.set_requires_grad(false);
  return t;
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

template <typename T>
using Instance = std::function<GradCheckReport(Rng&, const GradCheckOptions&)>;

/// f = sum(out * r) with a fixed random projection r, so every output
/// coordinate contributes a distinct weight to the checked gradient.
template <typename T>
GradCheckReport projected(const std::string& name, Rng& rng, const GradCheckOptions& opt,
                          std::vector<Tensor<T>> inputs, std::function<Tensor<T>()> op) {
  Tensor<T> probe;
  {
    NoGradGuard g;
    probe = op();
  }
  auto r = constant_like<T>(rng, probe.shape());
  if constexpr (sizeof(T) == 4) {
    // Keeps the float reduction's rounding noise below the 32-bit tolerance.
    r = scale(r, T(1) / static_cast<T>(r.numel()));
  }
  return grad_check<T>(name, [op, r] { return sum(mul(op(), r)); }, std::move(inputs), opt);
}

template <typename T>
std::vector<std::pair<std::string, Instance<T>>> op_table() {
  std::vector<std::pair<std::string, Instance<T>>> t;
  t.emplace_back("add", [](Rng& rng, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 3}), b = random_tensor<T>(rng, {2, 3});
    return projected<T>("add", rng, o, {a, b}, [=] { return add(a, b); });
  });
  t.emplace_back("sub", [](Rng& rng, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 2}), b = random_tensor<T>(rng, {3, 2});
    return projected<T>("sub", rng, o, {a, b}, [=] { return sub(a, b); });
  });
  t.emplace_back("mul", [](Rng& rng, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 4}), b = random_tensor<T>(rng, {2, 4});
    return projected<T>("mul", rng, o, {a, b}, [=] { return mul(a, b); });
  });
  t.emplace_back("scale", [](Rng& rng, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {5});
    const T s = static_cast<T>(rng.uniform(-2, 2));
    return projected<T>("scale", rng, o, {a}, [=] { return scale(a, s); });
  });
  t.emplace_back("add_rows", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t n = pick(rng, 1, 4);
    auto x = random_tensor<T>(rng, {pick(rng, 1, 3), 2, n}), r = random_tensor<T>(rng, {n});
    return projected<T>("add_rows", rng, o, {x, r}, [=] { return add_rows(x, r); });
  });
  t.emplace_back("sum", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 3});
    return grad_check<T>("sum", [=] { auto s = sum(x); return mul(s, s); }, {x}, o);
  });
  t.emplace_back("mean", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {3, 3});
    return grad_check<T>("mean", [=] { auto s = mean(x); return mul(s, s); }, {x}, o);
  });
  t.emplace_back("reshape", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 6});
    return projected<T>("reshape", rng, o, {x}, [=] { return reshape(x, {3, 4}); });
  });
  t.emplace_back("permute", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 3, 4});
    return projected<T>("permute", rng, o, {x}, [=] { return permute(x, {2, 0, 1}); });
  });
  t.emplace_back("concat", [](Rng& rng, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 2, 3}), b = random_tensor<T>(rng, {2, 1, 3});
    return projected<T>("concat", rng, o, {a, b}, [=] { return concat<T>({a, b}, 1); });
  });
  t.emplace_back("matmul", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
    auto a = random_tensor<T>(rng, {m, k}), b = random_tensor<T>(rng, {k, n});
    return projected<T>("matmul", rng, o, {a, b}, [=] { return matmul(a, b); });
  });
  t.emplace_back("bmm", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t g = pick(rng, 1, 3), m = pick(rng, 1, 3), k = pick(rng, 1, 3), n = pick(rng, 1, 3);
    const bool tb = rng.index(2) == 1;
    auto a = random_tensor<T>(rng, {g, m, k});
    auto b = random_tensor<T>(rng, tb ? Shape{g, n, k} : Shape{g, k, n});
    return projected<T>("bmm", rng, o, {a, b}, [=] { return bmm(a, b, tb); });
  });
  t.emplace_back("linear", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t in = pick(rng, 1, 4), out = pick(rng, 1, 4);
    auto x = random_tensor<T>(rng, {2, pick(rng, 1, 3), in});
    auto w = random_tensor<T>(rng, {in, out}), b = random_tensor<T>(rng, {out});
    return projected<T>("linear", rng, o, {x, w, b}, [=] { return linear(x, w, b); });
  });
  t.emplace_back("conv2d", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t kh = pick(rng, 1, 3), kw = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    auto x = random_tensor<T>(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 3, 5), pick(rng, 3, 5)});
    auto k = random_tensor<T>(rng, {pick(rng, 1, 3), x.dim(1), kh, kw});
    auto b = random_tensor<T>(rng, {k.dim(0)});
    return projected<T>("conv2d", rng, o, {x, k, b}, [=] { return conv2d(x, k, b, stride, pad); });
  });
  t.emplace_back("depthwise_conv2d", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t kh = pick(rng, 1, 3), stride = pick(rng, 1, 2), pad = pick(rng, 0, 1);
    auto x = random_tensor<T>(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 3, 5), pick(rng, 3, 5)});
    auto k = random_tensor<T>(rng, {x.dim(1), kh, kh});
    auto b = random_tensor<T>(rng, {x.dim(1)});
    return projected<T>("depthwise_conv2d", rng, o, {x, k, b}, [=] { return depthwise_conv2d(x, k, b, stride, pad); });
  });
  t.emplace_back("batchnorm2d", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t c = pick(rng, 1, 3);
    auto x = random_tensor<T>(rng, {pick(rng, 1, 2), c, 3, pick(rng, 2, 3)});
    auto g = random_tensor<T>(rng, {c}, 0.5, 1.5), b = random_tensor<T>(rng, {c});
    const bool train = rng.index(2) == 0;
    auto state = std::make_shared<BatchNormState<T>>(c);
    for (std::size_t i = 0; i < c; ++i) {
      state->running_mean[i] = static_cast<T>(rng.uniform(-0.5, 0.5));
      state->running_var[i] = static_cast<T>(rng.uniform(0.5, 1.5));
    }
    const BatchNormState<T> frozen = *state;
    return projected<T>("batchnorm2d", rng, o, {x, g, b}, [=] {
      *state = frozen;
      return batchnorm2d(x, g, b, *state, train ? BnMode::Train : BnMode::Infer);
    });
  });
  t.emplace_back("layer_norm", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t n = pick(rng, 2, 5);
    auto x = random_tensor<T>(rng, {pick(rng, 1, 3), n});
    auto g = random_tensor<T>(rng, {n}, 0.5, 1.5), b = random_tensor<T>(rng, {n});
    return projected<T>("layer_norm", rng, o, {x, g, b}, [=] { return layer_norm(x, g, b); });
  });
  t.emplace_back("silu", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 5}, -4.0, 4.0);
    return projected<T>("silu", rng, o, {x}, [=] { return silu(x); });
  });
  t.emplace_back("global_avg_pool", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)});
    return projected<T>("global_avg_pool", rng, o, {x}, [=] { return global_avg_pool(x); });
  });
  t.emplace_back("softmax", [](Rng& rng, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {pick(rng, 1, 3), pick(rng, 1, 5)}, -2.0, 2.0);
    return projected<T>("softmax", rng, o, {x}, [=] { return softmax(x); });
  });
  t.emplace_back("unfold_patches", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t pw = pick(rng, 1, 2), ph = pick(rng, 1, 2);
    auto x = random_tensor<T>(rng, {1, pick(rng, 1, 2), ph * pick(rng, 1, 2), pw * pick(rng, 1, 3)});
    return projected<T>("unfold_patches", rng, o, {x}, [=] { return unfold_patches(x, pw, ph); });
  });
  t.emplace_back("fold_patches", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t pw = pick(rng, 1, 2), ph = pick(rng, 1, 2), nh = pick(rng, 1, 2), nw = pick(rng, 1, 3);
    auto x = random_tensor<T>(rng, {1, nh * nw, pw * ph, pick(rng, 1, 2)});
    return projected<T>("fold_patches", rng, o, {x}, [=] { return fold_patches(x, nh * ph, nw * pw, pw, ph); });
  });
  t.emplace_back("cross_entropy", [](Rng& rng, const GradCheckOptions& o) {
    const std::size_t b = pick(rng, 1, 4), k = pick(rng, 2, 5);
    auto logits = random_tensor<T>(rng, {b, k}, -2.0, 2.0);
    std::vector<std::size_t> labels(b);
    for (auto& l : labels) l = rng.index(k);
    return grad_check<T>("cross_entropy", [=] { return cross_entropy(logits, std::span<const std::size_t>(labels)); },
                         {logits}, o);
  });
  return t;
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : op_table<double>()) names.push_back(name);
  return names;
}

template <typename T>
std::vector<GradCheckReport> op_gradcheck_suite(const GradSuiteOptions& options) {
  const GradCheckOptions opt{options.step, options.op_tolerance, 0};
  std::vector<GradCheckReport> reports;
  std::uint64_t salt = 0;
  for (const auto& [name, run] : op_table<T>()) {
    Rng rng(Rng::mix(options.seed, salt++));
    GradCheckReport worst;
    worst.op_name = name;
    worst.step = opt.step;
    worst.tolerance = opt.tolerance;
    for (std::size_t i = 0; i < options.instances; ++i) {
      GradCheckReport r = run(rng, opt);
      if (i == 0 || r.max_rel_error > worst.max_rel_error) {
        worst.max_rel_error = r.max_rel_error;
        worst.worst_index = r.worst_index;
      }
      worst.coordinates += r.coordinates;
    }
    worst.passed = worst.max_rel_error < opt.tolerance;
    reports.push_back(worst);
  }
  return reports;
}

template std::vector<GradCheckReport> op_gradcheck_suite<float>(const GradSuiteOptions&);
template std::vector<GradCheckReport> op_gradcheck_suite<double>(const GradSuiteOptions&);

}  // namespace smvit
