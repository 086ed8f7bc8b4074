#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mlvae/nnet.hpp"

namespace mlvae::testutil {

struct GradCheckResult {
  int checked = 0;
  int failed = 0;
  double worst_rel = 0.0;
  std::string worst_name;
};

// Central-difference gradient check. loss_value() must evaluate the loss
// without touching gradients; analytic gradients are read from the tensor
// refs as filled by the caller beforehand. Near-zero gradients are compared
// with an absolute floor since relative error is meaningless there.
inline GradCheckResult check_gradients(const std::vector<TensorRef>& params,
                                       const std::function<double()>& loss_value,
                                       double step = 1e-5, double rel_tol = 1e-4,
                                       double abs_floor = 1e-7) {
  GradCheckResult res;
  for (const TensorRef& p : params) {
    for (Eigen::Index i = 0; i < p.size; ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double up = loss_value();
      p.value[i] = saved - step;
      const double down = loss_value();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.grad[i];
      const double denom = std::max(std::abs(numeric), std::abs(analytic));
      const double err = std::abs(numeric - analytic);
      const double rel = denom > 0 ? err / denom : 0.0;
      ++res.checked;
      if (err > abs_floor && rel > rel_tol) {
        ++res.failed;
        if (rel > res.worst_rel) {
          res.worst_rel = rel;
          res.worst_name = p.name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return res;
}

}  // namespace mlvae::testutil
