#include "mat/adam.hpp"

#include <cmath>
#include <stdexcept>

#include "mat/common.hpp"

namespace mat::gradcore {

void Adam::step(Tensor& param) {
  if (!param.requires_grad())
    throw std::logic_error("Adam::step: parameter does not track gradients");
  if (param.name().empty())
    throw std::logic_error("Adam::step: parameter must be named");
  auto& g = param.grad();
  auto& st = states_[param.name()];
  size_t n = g.size();
  if (st.m.empty()) {
    st.m.assign(n, 0.0);
    st.v.assign(n, 0.0);
  } else if (st.m.size() != n) {
    throw std::logic_error("Adam::step: state size mismatch for " +
                           param.name());
  }
  st.t += 1;
  double b1 = cfg_.beta1, b2 = cfg_.beta2;
  double c1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  double c2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  double* p = param.data();
  for (size_t i = 0; i < n; ++i) {
    if (!std::isfinite(g[i]))
      throw NonFiniteError("Adam::step: non-finite gradient in parameter '" +
                           param.name() + "'");
    st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
    st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
    double mhat = st.m[i] / c1;
    double vhat = st.v[i] / c2;
    p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
  }
}

void Adam::step(std::vector<Tensor>& params) {
  for (auto& p : params) step(p);
}

}  // namespace mat::gradcore
