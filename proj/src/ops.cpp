#include "smvit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace smvit {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
Tensor<T> make_result(std::string_view op, Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      BackwardFn<T> fn) {
  auto node = std::make_shared<TensorNode<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) {
        if (in.defined()) node->parents.push_back(in.node());
      }
      node->backward = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
bool wants_grad(const NodePtr<T>& p) {
  return p && p->requires_grad;
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Shape, std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                               " differ");
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.rank() != rank) {
    fail(ErrorKind::Shape, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                               shape_str(x.shape()));
  }
}

template <typename T>
T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

/// Output element i reads input element src[i]; used by every pure relayout.
template <typename T>
Tensor<T> gather_op(std::string_view op, const Tensor<T>& x, Shape out_shape,
                    std::shared_ptr<const std::vector<std::size_t>> src) {
  const auto in = x.data();
  std::vector<T> out(src->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*src)[i]];
  NodePtr<T> px = x.node();
  return make_result<T>(op, std::move(out_shape), std::move(out), {x}, [px, src](TensorNode<T>& self) {
    auto& gx = px->grad_buffer();
    for (std::size_t i = 0; i < src->size(); ++i) gx[(*src)[i]] += self.grad[i];
  });
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* cols) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T{0});
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(W)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t Ho, std::size_t Wo, T* x) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const T* row = cols + ((c * kh + i) * kw + j) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(W)) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
    }
  }
}

void check_window(const char* op, const Shape& x, std::size_t kh, std::size_t kw, std::size_t stride,
                  std::size_t padding) {
  if (stride == 0) fail(ErrorKind::Shape, std::string(op) + ": stride must be >= 1");
  if (kh > x[2] + 2 * padding || kw > x[3] + 2 * padding) {
    fail(ErrorKind::Shape, std::string(op) + ": kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                               " larger than padded input " + shape_str(x));
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  return (input + 2 * padding - kernel) / stride + 1;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  NodePtr<T> pa = a.node(), pb = b.node();
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode<T>& self) {
    for (const auto& p : {pa, pb}) {
      if (!wants_grad(p)) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  NodePtr<T> pa = a.node(), pb = b.node();
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode<T>& self) {
    if (wants_grad(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  NodePtr<T> pa = a.node(), pb = b.node();
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [pa, pb](TensorNode<T>& self) {
    if (wants_grad(pa)) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (wants_grad(pb)) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  NodePtr<T> pa = a.node();
  return make_result<T>("scale", a.shape(), std::move(out), {a}, [pa, factor](TensorNode<T>& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_rows(const Tensor<T>& x, const Tensor<T>& row) {
  if (row.rank() != 1 || x.rank() == 0 || x.shape().back() != row.dim(0)) {
    fail(ErrorKind::Shape, "add_rows: row " + shape_str(row.shape()) + " does not match " + shape_str(x.shape()));
  }
  const std::size_t n = row.dim(0);
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto rv = row.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += rv[j];
  NodePtr<T> px = x.node(), pr = row.node();
  return make_result<T>("add_rows", x.shape(), std::move(out), {x, row}, [px, pr, n, rows](TensorNode<T>& self) {
    if (wants_grad(px)) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants_grad(pr)) {
      auto& g = pr->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  NodePtr<T> px = x.node();
  return make_result<T>("sum", {}, {total}, {x}, [px](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  const T inv = T{1} / static_cast<T>(x.numel());
  NodePtr<T> px = x.node();
  return make_result<T>("mean", {}, {total * inv}, {x}, [px, inv](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    for (auto& v : g) v += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    fail(ErrorKind::Shape, "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  NodePtr<T> px = x.node();
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [px](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const Shape& in = x.shape();
  std::vector<bool> used(in.size(), false);
  if (axes.size() != in.size()) fail(ErrorKind::Shape, "permute: axis count does not match " + shape_str(in));
  for (auto a : axes) {
    if (a >= in.size() || used[a]) fail(ErrorKind::Shape, "permute: invalid axes for " + shape_str(in));
    used[a] = true;
  }
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = in[axes[i]];
  const auto in_strides = strides_of(in);
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t flat = 0; flat < src->size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += idx[d] * in_strides[axes[d]];
    (*src)[flat] = off;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  return gather_op<T>("permute", x, std::move(out_shape), std::move(src));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::Shape, "concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) fail(ErrorKind::Shape, "concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) fail(ErrorKind::Shape, "concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> blocks;
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t blk = p.dim(axis) * inner;
      const auto v = p.data();
      std::copy(v.begin() + o * blk, v.begin() + (o + 1) * blk, out.begin() + pos);
      pos += blk;
    }
  }
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    blocks.push_back(p.dim(axis) * inner);
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts,
                        [nodes, blocks, outer](TensorNode<T>& self) {
                          std::size_t at = 0;
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t k = 0; k < nodes.size(); ++k) {
                              if (wants_grad(nodes[k])) {
                                auto& g = nodes[k]->grad_buffer();
                                for (std::size_t i = 0; i < blocks[k]; ++i) g[o * blocks[k] + i] += self.grad[at + i];
                              }
                              at += blocks[k];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorKind::Shape, "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T{0});
  detail::gemm_acc(false, false, m, n, k, a.data().data(), b.data().data(), out.data());
  NodePtr<T> pa = a.node(), pb = b.node();
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [pa, pb, m, k, n](TensorNode<T>& self) {
    if (wants_grad(pa)) detail::gemm_acc(false, true, m, k, n, self.grad.data(), pb->value.data(), pa->grad_buffer().data());
    if (wants_grad(pb)) detail::gemm_acc(true, false, k, n, m, pa->value.data(), self.grad.data(), pb->grad_buffer().data());
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    fail(ErrorKind::Shape, "bmm: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()) +
                               (transpose_b ? "^T" : ""));
  }
  const std::size_t G = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  std::vector<T> out(G * m * n, T{0});
  for (std::size_t g = 0; g < G; ++g) {
    detail::gemm_acc(false, transpose_b, m, n, k, a.data().data() + g * m * k, b.data().data() + g * k * n,
                     out.data() + g * m * n);
  }
  NodePtr<T> pa = a.node(), pb = b.node();
  return make_result<T>("bmm", {G, m, n}, std::move(out), {a, b},
                        [pa, pb, G, m, k, n, transpose_b](TensorNode<T>& self) {
                          for (std::size_t g = 0; g < G; ++g) {
                            const T* go = self.grad.data() + g * m * n;
                            const T* av = pa->value.data() + g * m * k;
                            const T* bv = pb->value.data() + g * k * n;
                            if (wants_grad(pa)) {
                              T* ga = pa->grad_buffer().data() + g * m * k;
                              if (transpose_b)
                                detail::gemm_acc(false, false, m, k, n, go, bv, ga);
                              else
                                detail::gemm_acc(false, true, m, k, n, go, bv, ga);
                            }
                            if (wants_grad(pb)) {
                              T* gb = pb->grad_buffer().data() + g * k * n;
                              if (transpose_b)
                                detail::gemm_acc(true, false, n, k, m, go, av, gb);
                              else
                                detail::gemm_acc(true, false, k, n, m, av, go, gb);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() == 0 || w.rank() != 2 || x.shape().back() != w.dim(0) ||
      (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(1)))) {
    fail(ErrorKind::Shape, "linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                               shape_str(w.shape()) + (b.defined() ? " and bias " + shape_str(b.shape()) : ""));
  }
  const std::size_t in = w.dim(0), outf = w.dim(1), rows = x.numel() / in;
  std::vector<T> out(rows * outf, T{0});
  if (b.defined()) {
    const auto bv = b.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * outf);
  }
  detail::gemm_acc(false, false, rows, outf, in, x.data().data(), w.data().data(), out.data());
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  NodePtr<T> px = x.node(), pw = w.node(), pb = b.defined() ? b.node() : nullptr;
  return make_result<T>("linear", std::move(out_shape), std::move(out), {x, w, b},
                        [px, pw, pb, in, outf, rows](TensorNode<T>& self) {
                          if (wants_grad(px))
                            detail::gemm_acc(false, true, rows, in, outf, self.grad.data(), pw->value.data(),
                                             px->grad_buffer().data());
                          if (wants_grad(pw))
                            detail::gemm_acc(true, false, in, outf, rows, px->value.data(), self.grad.data(),
                                             pw->grad_buffer().data());
                          if (wants_grad(pb)) {
                            auto& g = pb->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < outf; ++j) g[j] += self.grad[r * outf + j];
                          }
                        });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", k, 4);
  if (x.dim(1) != k.dim(1)) {
    fail(ErrorKind::Shape, "conv2d: input " + shape_str(x.shape()) + " has " + std::to_string(x.dim(1)) +
                               " channels, kernel " + shape_str(k.shape()) + " expects " + std::to_string(k.dim(1)));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != k.dim(0))) {
    fail(ErrorKind::Shape, "conv2d: bias " + shape_str(bias.shape()) + " for kernel " + shape_str(k.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  check_window("conv2d", x.shape(), kh, kw, stride, padding);
  const std::size_t Ho = conv_output_size(H, kh, stride, padding), Wo = conv_output_size(W, kw, stride, padding);
  const std::size_t ckk = C * kh * kw, hw = Ho * Wo;
  const bool direct = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  std::vector<T> out(B * O * hw, T{0});
  std::vector<T> cols(direct ? 0 : ckk * hw);
  for (std::size_t b = 0; b < B; ++b) {
    const T* xb = x.data().data() + b * C * H * W;
    T* ob = out.data() + b * O * hw;
    if (bias.defined()) {
      for (std::size_t o = 0; o < O; ++o) std::fill(ob + o * hw, ob + (o + 1) * hw, bias.data()[o]);
    }
    const T* c = xb;
    if (!direct) {
      im2col(xb, C, H, W, kh, kw, stride, padding, Ho, Wo, cols.data());
      c = cols.data();
    }
    detail::gemm_acc(false, false, O, hw, ckk, k.data().data(), c, ob);
  }

  NodePtr<T> px = x.node(), pk = k.node(), pb = bias.defined() ? bias.node() : nullptr;
  return make_result<T>(
      "conv2d", {B, O, Ho, Wo}, std::move(out), {x, k, bias},
      [=](TensorNode<T>& self) {
        std::vector<T> colbuf(direct ? 0 : ckk * hw);
        std::vector<T> gcols(direct ? 0 : ckk * hw);
        for (std::size_t b = 0; b < B; ++b) {
          const T* gb = self.grad.data() + b * O * hw;
          const T* xb = px->value.data() + b * C * H * W;
          if (wants_grad(pk)) {
            const T* c = xb;
            if (!direct) {
              im2col(xb, C, H, W, kh, kw, stride, padding, Ho, Wo, colbuf.data());
              c = colbuf.data();
            }
            detail::gemm_acc(false, true, O, ckk, hw, gb, c, pk->grad_buffer().data());
          }
          if (wants_grad(px)) {
            T* gx = px->grad_buffer().data() + b * C * H * W;
            if (direct) {
              detail::gemm_acc(true, false, ckk, hw, O, pk->value.data(), gb, gx);
            } else {
              std::fill(gcols.begin(), gcols.end(), T{0});
              detail::gemm_acc(true, false, ckk, hw, O, pk->value.data(), gb, gcols.data());
              col2im_add(gcols.data(), C, H, W, kh, kw, stride, padding, Ho, Wo, gx);
            }
          }
          if (wants_grad(pb)) {
            auto& g = pb->grad_buffer();
            for (std::size_t o = 0; o < O; ++o)
              for (std::size_t i = 0; i < hw; ++i) g[o] += gb[o * hw + i];
          }
        }
      });
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding) {
  require_rank("depthwise_conv2d", x, 4);
  require_rank("depthwise_conv2d", k, 3);
  if (x.dim(1) != k.dim(0)) {
    fail(ErrorKind::Shape, "depthwise_conv2d: input " + shape_str(x.shape()) + " vs kernel " + shape_str(k.shape()) +
                               " channel mismatch");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != k.dim(0))) {
    fail(ErrorKind::Shape, "depthwise_conv2d: bias " + shape_str(bias.shape()));
  }
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t kh = k.dim(1), kw = k.dim(2);
  check_window("depthwise_conv2d", x.shape(), kh, kw, stride, padding);
  const std::size_t Ho = conv_output_size(H, kh, stride, padding), Wo = conv_output_size(W, kw, stride, padding);

  // Visits every (output pixel, tap) pair that lands inside the input.
  auto for_taps = [=](std::size_t c, auto&& fn) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            fn((c * kh + i) * kw + j, static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix), oy * Wo + ox);
          }
        }
      }
    }
  };

  std::vector<T> out(B * C * Ho * Wo, T{0});
  const auto xv = x.data();
  const auto kv = k.data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* xp = xv.data() + (b * C + c) * H * W;
      T* op = out.data() + (b * C + c) * Ho * Wo;
      if (bias.defined()) std::fill(op, op + Ho * Wo, bias.data()[c]);
      for_taps(c, [&](std::size_t ki, std::size_t xi, std::size_t oi) { op[oi] += kv[ki] * xp[xi]; });
    }
  }
  NodePtr<T> px = x.node(), pk = k.node(), pb = bias.defined() ? bias.node() : nullptr;
  return make_result<T>("depthwise_conv2d", {B, C, Ho, Wo}, std::move(out), {x, k, bias},
                        [=](TensorNode<T>& self) {
                          const bool gx_on = wants_grad(px), gk_on = wants_grad(pk);
                          T* gx = gx_on ? px->grad_buffer().data() : nullptr;
                          T* gk = gk_on ? pk->grad_buffer().data() : nullptr;
                          for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t c = 0; c < C; ++c) {
                              const std::size_t xo = (b * C + c) * H * W;
                              const T* go = self.grad.data() + (b * C + c) * Ho * Wo;
                              for_taps(c, [&](std::size_t ki, std::size_t xi, std::size_t oi) {
                                if (gx_on) gx[xo + xi] += go[oi] * pk->value[ki];
                                if (gk_on) gk[ki] += go[oi] * px->value[xo + xi];
                              });
                              if (wants_grad(pb)) {
                                auto& g = pb->grad_buffer();
                                for (std::size_t i = 0; i < Ho * Wo; ++i) g[c] += go[i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                      BnMode mode, T eps) {
  require_rank("batchnorm2d", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || state.running_mean.size() != C || state.running_var.size() != C) {
    fail(ErrorKind::Shape, "batchnorm2d: parameters do not match channels of " + shape_str(x.shape()));
  }
  const std::size_t M = B * HW;
  if (mode == BnMode::Train && M < 2) {
    fail(ErrorKind::DegenerateBatch, "batchnorm2d: train mode needs at least 2 values per channel, got " +
                                         shape_str(x.shape()));
  }
  const auto xv = x.data();
  auto at = [&](std::size_t b, std::size_t c) { return (b * C + c) * HW; };

  std::vector<T> mu(C), inv_std(C);
  if (mode == BnMode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += xv[at(b, c) + i];
      const T m = s / static_cast<T>(M);
      T v{0};
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const T d = xv[at(b, c) + i] - m;
          v += d * d;
        }
      v /= static_cast<T>(M);
      mu[c] = m;
      inv_std[c] = T{1} / std::sqrt(v + eps);
      state.running_mean[c] = (T{1} - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] = (T{1} - state.momentum) * state.running_var[c] + state.momentum * v;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = T{1} / std::sqrt(state.running_var[c] + eps);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  std::vector<T> out(x.numel());
  const auto gv = gamma.data();
  const auto bv = beta.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t idx = at(b, c) + i;
        const T h = (xv[idx] - mu[c]) * inv_std[c];
        (*xhat)[idx] = h;
        out[idx] = gv[c] * h + bv[c];
      }

  NodePtr<T> px = x.node(), pg = gamma.node(), pbeta = beta.node();
  const bool train = mode == BnMode::Train;
  return make_result<T>(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [=, inv_std = std::move(inv_std)](TensorNode<T>& self) {
        auto idx = [&](std::size_t b, std::size_t c) { return (b * C + c) * HW; };
        const auto& g = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g{0}, sum_gh{0};
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = idx(b, c) + i;
              sum_g += g[k];
              sum_gh += g[k] * (*xhat)[k];
            }
          if (wants_grad(pg)) pg->grad_buffer()[c] += sum_gh;
          if (wants_grad(pbeta)) pbeta->grad_buffer()[c] += sum_g;
          if (!wants_grad(px)) continue;
          auto& gx = px->grad_buffer();
          const T gam = pg->value[c];
          if (train) {
            const T coef = gam * inv_std[c] / static_cast<T>(M);
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = idx(b, c) + i;
                gx[k] += coef * (static_cast<T>(M) * g[k] - sum_g - (*xhat)[k] * sum_gh);
              }
          } else {
            const T coef = gam * inv_std[c];
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = idx(b, c) + i;
                gx[k] += coef * g[k];
              }
          }
        }
      });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() == 0 || gamma.numel() != x.shape().back() || beta.numel() != x.shape().back()) {
    fail(ErrorKind::Shape, "layer_norm: parameters do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T s{0};
    for (std::size_t j = 0; j < n; ++j) s += row[j];
    const T m = s / static_cast<T>(n);
    T v{0};
    for (std::size_t j = 0; j < n; ++j) v += (row[j] - m) * (row[j] - m);
    v /= static_cast<T>(n);
    const T is = T{1} / std::sqrt(v + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - m) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = gv[j] * h + bv[j];
    }
  }
  NodePtr<T> px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [=](TensorNode<T>& self) {
                          const auto& g = self.grad;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g.data() + r * n;
                            const T* hr = xhat->data() + r * n;
                            if (wants_grad(pg)) {
                              auto& gg = pg->grad_buffer();
                              for (std::size_t j = 0; j < n; ++j) gg[j] += gr[j] * hr[j];
                            }
                            if (wants_grad(pb)) {
                              auto& gb = pb->grad_buffer();
                              for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
                            }
                            if (!wants_grad(px)) continue;
                            T sum_d{0}, sum_dh{0};
                            for (std::size_t j = 0; j < n; ++j) {
                              const T d = gr[j] * pg->value[j];
                              sum_d += d;
                              sum_dh += d * hr[j];
                            }
                            auto& gx = px->grad_buffer();
                            const T coef = (*inv_std)[r] / static_cast<T>(n);
                            for (std::size_t j = 0; j < n; ++j) {
                              const T d = gr[j] * pg->value[j];
                              gx[r * n + j] += coef * (static_cast<T>(n) * d - sum_d - hr[j] * sum_dh);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sigmoid(xv[i]);
  NodePtr<T> px = x.node();
  return make_result<T>("silu", x.shape(), std::move(out), {x}, [px](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = px->value[i];
      const T s = sigmoid(v);
      g[i] += self.grad[i] * s * (T{1} + v * (T{1} - s));
    }
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const auto xv = x.data();
  std::vector<T> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T s{0};
    for (std::size_t i = 0; i < HW; ++i) s += xv[bc * HW + i];
    out[bc] = s / static_cast<T>(HW);
  }
  NodePtr<T> px = x.node();
  return make_result<T>("global_avg_pool", {B, C}, std::move(out), {x}, [px, B, C, HW](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    const T inv = T{1} / static_cast<T>(HW);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const T v = self.grad[bc] * inv;
      for (std::size_t i = 0; i < HW; ++i) g[bc * HW + i] += v;
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) fail(ErrorKind::Shape, "softmax: scalar input");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  const auto xv = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T s{0};
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(row[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  NodePtr<T> px = x.node();
  return make_result<T>("softmax", x.shape(), std::move(out), {x}, [px, n, rows](TensorNode<T>& self) {
    auto& g = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* go = self.grad.data() + r * n;
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += go[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (go[j] - dot);
    }
  });
}

template <typename T>
Tensor<T> unfold_patches(const Tensor<T>& x, std::size_t patch_w, std::size_t patch_h) {
  if (x.rank() != 4) fail(ErrorKind::Tiling, "unfold_patches: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (patch_w == 0 || patch_h == 0 || H % patch_h != 0 || W % patch_w != 0) {
    fail(ErrorKind::Tiling, "unfold_patches: patch " + std::to_string(patch_w) + "x" + std::to_string(patch_h) +
                                " does not tile " + shape_str(x.shape()));
  }
  const std::size_t npw = W / patch_w, nph = H / patch_h, np = npw * nph, pp = patch_w * patch_h;
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::size_t flat = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < np; ++p)
      for (std::size_t q = 0; q < pp; ++q)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t y = (p / npw) * patch_h + q / patch_w;
          const std::size_t xx = (p % npw) * patch_w + q % patch_w;
          (*src)[flat++] = ((b * C + c) * H + y) * W + xx;
        }
  return gather_op<T>("unfold_patches", x, {B, np, pp, C}, std::move(src));
}

template <typename T>
Tensor<T> fold_patches(const Tensor<T>& t, std::size_t height, std::size_t width, std::size_t patch_w,
                       std::size_t patch_h) {
  const bool ok = t.rank() == 4 && patch_w > 0 && patch_h > 0 && height % patch_h == 0 && width % patch_w == 0 &&
                  t.dim(2) == patch_w * patch_h && t.dim(1) == (height / patch_h) * (width / patch_w);
  if (!ok) {
    fail(ErrorKind::Tiling, "fold_patches: " + shape_str(t.shape()) + " cannot fold into " + std::to_string(height) +
                                "x" + std::to_string(width) + " with patch " + std::to_string(patch_w) + "x" +
                                std::to_string(patch_h));
  }
  const std::size_t B = t.dim(0), np = t.dim(1), pp = t.dim(2), C = t.dim(3);
  const std::size_t npw = width / patch_w;
  auto src = std::make_shared<std::vector<std::size_t>>(t.numel());
  std::size_t flat = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t xx = 0; xx < width; ++xx) {
          const std::size_t p = (y / patch_h) * npw + xx / patch_w;
          const std::size_t q = (y % patch_h) * patch_w + xx % patch_w;
          (*src)[flat++] = ((b * np + p) * pp + q) * C + c;
        }
  return gather_op<T>("fold_patches", t, {B, C, height, width}, std::move(src));
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) {
    fail(ErrorKind::Label, "cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                               std::to_string(B));
  }
  for (std::size_t l : labels) {
    if (l >= K) fail(ErrorKind::Label, "cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(K) + ")");
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<T>>(B * K);
  T total{0};
  for (std::size_t b = 0; b < B; ++b) {
    const T* row = lv.data() + b * K;
    const T mx = *std::max_element(row, row + K);
    T s{0};
    for (std::size_t j = 0; j < K; ++j) {
      (*probs)[b * K + j] = std::exp(row[j] - mx);
      s += (*probs)[b * K + j];
    }
    for (std::size_t j = 0; j < K; ++j) (*probs)[b * K + j] /= s;
    total += (std::log(s) + mx) - row[labels[b]];
  }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  NodePtr<T> pl = logits.node();
  return make_result<T>("cross_entropy", {}, {total / static_cast<T>(B)}, {logits},
                        [pl, probs, lab, B, K](TensorNode<T>& self) {
                          auto& g = pl->grad_buffer();
                          const T c = self.grad[0] / static_cast<T>(B);
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t j = 0; j < K; ++j)
                              g[b * K + j] += c * ((*probs)[b * K + j] - (j == lab[b] ? T{1} : T{0}));
                        });
}

#define SMVIT_INSTANTIATE_OPS(T)                                                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                                               \
  template Tensor<T> add_rows(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                         \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                               \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                       \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                               \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool);                                            \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);   \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,       \
                                      std::size_t);                                                            \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, BatchNormState<T>&,     \
                                 BnMode, T);                                                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                      \
  template Tensor<T> silu(const Tensor<T>&);                                                                   \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                        \
  template Tensor<T> softmax(const Tensor<T>&);                                                                \
  template Tensor<T> unfold_patches(const Tensor<T>&, std::size_t, std::size_t);                               \
  template Tensor<T> fold_patches(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);       \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::size_t>);

SMVIT_INSTANTIATE_OPS(float)
SMVIT_INSTANTIATE_OPS(double)

#undef SMVIT_INSTANTIATE_OPS

}  // namespace smvit
