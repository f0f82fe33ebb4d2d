#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "smvit/gradcheck.hpp"

namespace smvit {

struct GradSuiteOptions {
  std::size_t instances = 20;  // random instances per op
  double step = 1e-5;
  double op_tolerance = 1e-6;
  double model_tolerance = 1e-5;
  std::uint64_t seed = 7;
  bool include_model = true;
};

/// Names of every differentiable op covered by the suite, in report order.
std::vector<std::string> gradcheck_op_names();

/// One report per op: the worst instance over `instances` random inputs.
template <typename T>
std::vector<GradCheckReport> op_gradcheck_suite(const GradSuiteOptions& options);

/// End-to-end reports for a miniature Siamese model (paired loss with
/// respect to every parameter tensor and the input frames).
template <typename T>
std::vector<GradCheckReport> model_gradcheck_suite(const GradSuiteOptions& options);

template <typename T>
std::vector<GradCheckReport> run_gradcheck_suite(const GradSuiteOptions& options) {
  auto reports = op_gradcheck_suite<T>(options);
  if (options.include_model) {
    auto model = model_gradcheck_suite<T>(options);
    reports.insert(reports.end(), model.begin(), model.end());
  }
  return reports;
}

}  // namespace smvit
