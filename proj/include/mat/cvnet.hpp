#pragma once
// Complex-valued convolutional classifier. The signal is carried through the
// conv stack as separate real/imaginary plane tensors [B,C,L]; complex
// multiply-accumulate is composed from four real convolutions per layer.
// Each block: ComplexConv -> split ReLU -> per-plane BatchNorm -> MaxPool
// (magnitude-routed by default). After the final block both planes are
// flattened, concatenated, and passed through the dense feature stack; a
// linear head produces class logits.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mat/ops.hpp"
#include "mat/tensor.hpp"

namespace mat::cvnet {

struct ModelConfig {
  int num_classes = 6;
  int num_blocks = 6;
  int channels = 64;  // complex channels per conv layer
  int kernel = 3;     // odd; convs are length-preserving
  int pool_window = 2;
  // "short": two dense layers 512 -> 128; "long": one dense layer of 1024.
  std::string dense_variant = "short";
  // Pool planes independently instead of routing both by magnitude.
  bool per_plane_pool = false;
  uint64_t init_seed = 0;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct FwdCtx {
  bool training = true;
  bool update_stats = true;   // fold batch stats into running buffers
  bool track_params = true;   // false: parameters enter the graph detached
};

class Network {
 public:
  explicit Network(const ModelConfig& cfg);

  // x: [B, 2, n], plane 0 = I, plane 1 = Q; n must be >= 2^num_blocks.
  gradcore::Tensor features(const gradcore::Tensor& x, const FwdCtx& ctx);
  gradcore::Tensor logits(const gradcore::Tensor& x, const FwdCtx& ctx);
  gradcore::Tensor logits_from_features(const gradcore::Tensor& f,
                                        const FwdCtx& ctx);

  // -1 until the lazy dense stack has been bound by a first forward (or a
  // checkpoint restore).
  int feature_dim() const;

  std::vector<gradcore::Tensor> parameters();       // trainable, named
  std::vector<gradcore::Tensor> running_buffers();  // BN stats, named

  // Restores parameters and buffers from named shapes/values, binding any
  // still-lazy dense layers. Throws if a required entry is missing or a
  // shape disagrees.
  void load_state(const std::map<std::string, gradcore::Tensor>& table);

  const ModelConfig& config() const { return cfg_; }

 private:
  struct ComplexConv {
    gradcore::Tensor w_re, w_im, b_re, b_im;
  };
  struct PlaneNorm {
    gradcore::Tensor gamma, beta, run_mean, run_var;
  };
  struct Block {
    ComplexConv conv;
    PlaneNorm bn_re, bn_im;
  };
  struct LazyDense {
    std::string name;
    int out_dim = 0;
    gradcore::Tensor w, b;
    bool bound() const { return w.defined(); }
  };

  void bind_dense(LazyDense& fc, int in_dim);
  gradcore::Tensor apply_dense(LazyDense& fc, const gradcore::Tensor& x,
                               bool track);

  ModelConfig cfg_;
  std::vector<Block> blocks_;
  std::vector<LazyDense> stack_;
  LazyDense head_;
};

}  // namespace mat::cvnet
