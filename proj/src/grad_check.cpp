#include "mat/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mat::gradcore {

GradCheckReport gradient_check(const std::function<Tensor()>& f,
                               std::vector<Tensor>& params, double h,
                               double tol, int max_coords_per_param) {
  GradCheckReport report;

  for (auto& p : params) p.zero_grad();
  Tensor out = f();
  backward(out);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.grad());

  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    int n = p.numel();
    int step = 1;
    if (max_coords_per_param > 0 && n > max_coords_per_param)
      step = n / max_coords_per_param;
    for (int i = 0; i < n; i += step) {
      double saved = p.data()[i];
      p.data()[i] = saved + h;
      double up = f().item();
      p.data()[i] = saved - h;
      double down = f().item();
      p.data()[i] = saved;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic[pi][i];
      double rel =
          std::fabs(a - numeric) /
          std::max({std::fabs(a), std::fabs(numeric), 1e-12});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param =
            p.name().empty() ? ("param[" + std::to_string(pi) + "]") : p.name();
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace mat::gradcore
