#pragma once
// Central-difference gradient verification for any scalar-valued graph.

#include <functional>
#include <string>
#include <vector>

#include "mat/tensor.hpp"

namespace mat::gradcore {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  int coords_checked = 0;
  bool pass = false;
};

// Evaluates f() once for the analytic gradients, then perturbs each checked
// coordinate by +/-h and compares. Relative error is
// |a-n| / max(|a|, |n|, 1e-12). `f` must be a pure function of `params`.
// If max_coords_per_param > 0, a deterministic stride subsample of that many
// coordinates per parameter is checked instead of all of them.
GradCheckReport gradient_check(const std::function<Tensor()>& f,
                               std::vector<Tensor>& params, double h = 1e-5,
                               double tol = 1e-6,
                               int max_coords_per_param = 0);

}  // namespace mat::gradcore
