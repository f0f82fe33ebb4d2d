#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "smvit/tensor.hpp"

namespace smvit {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;  // flat index across the checked tensors, in order
  bool passed = false;
  double step = 0.0;
  double tolerance = 0.0;
  std::size_t coordinates = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  /// 0 checks every coordinate; otherwise an evenly strided subset per tensor.
  std::size_t max_coords_per_tensor = 0;
};

/// Compares backward() gradients of the scalar `f()` with respect to each of
/// `inputs` against central differences (f(x+h e_i) - f(x-h e_i)) / 2h.
/// Relative error uses the denominator max(1, |reference|).
template <typename T>
GradCheckReport grad_check(const std::string& name, const std::function<Tensor<T>()>& f,
                           std::vector<Tensor<T>> inputs, const GradCheckOptions& options = {});

template <typename T>
GradCheckReport grad_check(const std::string& name, const std::function<Tensor<T>()>& f, Tensor<T> x,
                           double step, double tolerance) {
  return grad_check<T>(name, f, std::vector<Tensor<T>>{std::move(x)}, GradCheckOptions{step, tolerance, 0});
}

}  // namespace smvit
