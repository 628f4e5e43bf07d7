#pragma once
// Adam with bias correction. Moment state is keyed by parameter name so it
// survives checkpointing; one optimizer instance may serve several parameter
// groups with different step counts (each parameter carries its own t).

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mat/tensor.hpp"

namespace mat::gradcore {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  int64_t t = 0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }

  // Applies one update from param.grad(). The parameter must be named; a
  // non-finite gradient component aborts with the parameter's name.
  void step(Tensor& param);
  void step(std::vector<Tensor>& params);

  // Ordered map: serialization iterates deterministically.
  const std::map<std::string, AdamState>& states() const { return states_; }
  std::map<std::string, AdamState>& states() { return states_; }

 private:
  AdamConfig cfg_;
  std::map<std::string, AdamState> states_;
};

}  // namespace mat::gradcore
