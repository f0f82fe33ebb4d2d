#include "smvit/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace smvit {

namespace {

template <typename T>
void require_finite(const std::string& name, T v, const char* what) {
  if (!std::isfinite(static_cast<double>(v))) fail(ErrorKind::Numeric, name + ": non-finite " + what);
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const std::string& name, const std::function<Tensor<T>()>& f,
                           std::vector<Tensor<T>> inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.op_name = name;
  report.step = options.step;
  report.tolerance = options.tolerance;

  for (auto& x : inputs) {
    for (T v : x.data()) require_finite(name, v, "input value");
    x.set_requires_grad(true);
    x.zero_grad();
  }
  const Tensor<T> y = f();
  require_finite(name, y.item(), "function value");
  y.backward();

  const T h = static_cast<T>(options.step);
  std::size_t offset = 0;
  for (auto& x : inputs) {
    const std::vector<T> analytic = x.has_grad() ? std::vector<T>(x.grad().begin(), x.grad().end())
                                                 : std::vector<T>(x.numel(), T{0});
    const std::size_t n = x.numel();
    const std::size_t stride =
        options.max_coords_per_tensor == 0 ? 1 : std::max<std::size_t>(1, n / options.max_coords_per_tensor);
    auto values = x.mutable_data();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = values[i];
      values[i] = saved + h;
      const double fp = static_cast<double>(f().item());
      values[i] = saved - h;
      const double fm = static_cast<double>(f().item());
      values[i] = saved;
      require_finite(name, fp, "perturbed value");
      require_finite(name, fm, "perturbed value");
      require_finite(name, analytic[i], "gradient");
      const double reference = (fp - fm) / (2.0 * static_cast<double>(h));
      const double err = std::abs(static_cast<double>(analytic[i]) - reference) / std::max(1.0, std::abs(reference));
      if (err > report.max_rel_error || report.coordinates == 0) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        if (err >= report.max_rel_error) report.worst_index = offset + i;
      }
      ++report.coordinates;
    }
    offset += n;
    x.zero_grad();
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

template GradCheckReport grad_check<float>(const std::string&, const std::function<Tensor<float>()>&,
                                           std::vector<Tensor<float>>, const GradCheckOptions&);
template GradCheckReport grad_check<double>(const std::string&, const std::function<Tensor<double>()>&,
                                            std::vector<Tensor<double>>, const GradCheckOptions&);

}  // namespace smvit
