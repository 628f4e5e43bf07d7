#include "mat/cvnet.hpp"

#include <cmath>
#include <stdexcept>

#include "mat/common.hpp"

namespace mat::cvnet {

using namespace gradcore;

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes},
                     {"num_blocks", c.num_blocks},
                     {"channels", c.channels},
                     {"kernel", c.kernel},
                     {"pool_window", c.pool_window},
                     {"dense_variant", c.dense_variant},
                     {"per_plane_pool", c.per_plane_pool},
                     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.channels = j.value("channels", d.channels);
  c.kernel = j.value("kernel", d.kernel);
  c.pool_window = j.value("pool_window", d.pool_window);
  c.dense_variant = j.value("dense_variant", d.dense_variant);
  c.per_plane_pool = j.value("per_plane_pool", d.per_plane_pool);
  c.init_seed = j.value("init_seed", d.init_seed);
}

namespace {

// Values drawn from a stream keyed by (seed, parameter name): independent of
// construction and binding order.
void fill_uniform(Tensor& t, uint64_t seed, double bound) {
  Rng rng(derive_seed(seed, t.name()));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
}

// Window argmax of squared magnitude; ties take the earliest index, the tail
// window simply ends early (equivalent to -inf padding).
std::vector<int32_t> magnitude_argmax(const std::vector<double>& re,
                                      const std::vector<double>& im, int BC,
                                      int L, int window, int Lout) {
  std::vector<int32_t> idx(static_cast<size_t>(BC) * Lout);
  for (int bc = 0; bc < BC; ++bc) {
    const double* pr = re.data() + static_cast<size_t>(bc) * L;
    const double* pi = im.data() + static_cast<size_t>(bc) * L;
    int32_t* row = idx.data() + static_cast<size_t>(bc) * Lout;
    for (int j = 0; j < Lout; ++j) {
      int l0 = j * window, l1 = std::min(L, l0 + window);
      int best = l0;
      double best_mag = pr[l0] * pr[l0] + pi[l0] * pi[l0];
      for (int l = l0 + 1; l < l1; ++l) {
        double m = pr[l] * pr[l] + pi[l] * pi[l];
        if (m > best_mag) {
          best_mag = m;
          best = l;
        }
      }
      row[j] = best;
    }
  }
  return idx;
}

// Differentiable gather along L by precomputed indices (shared by both
// planes so the complex sample stays together).
Tensor gather_lanes(const Tensor& x, std::shared_ptr<std::vector<int32_t>> idx,
                    int Lout) {
  int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  int BC = B * C;
  std::vector<double> out(static_cast<size_t>(BC) * Lout);
  const double* xp = x.data();
  for (int bc = 0; bc < BC; ++bc) {
    const double* xr = xp + static_cast<size_t>(bc) * L;
    const int32_t* ir = idx->data() + static_cast<size_t>(bc) * Lout;
    double* orow = out.data() + static_cast<size_t>(bc) * Lout;
    for (int j = 0; j < Lout; ++j) orow[j] = xr[ir[j]];
  }
  NodePtr xn = x.node;
  return make_op({B, C, Lout}, std::move(out), {x},
                 [xn, idx, BC, L, Lout](const std::vector<double>& g,
                                        BackwardPass& pass) {
                   auto* gx = pass.buffer(xn);
                   if (!gx) return;
                   for (int bc = 0; bc < BC; ++bc) {
                     double* gxr = gx->data() + static_cast<size_t>(bc) * L;
                     const int32_t* ir =
                         idx->data() + static_cast<size_t>(bc) * Lout;
                     const double* gr = g.data() + static_cast<size_t>(bc) * Lout;
                     for (int j = 0; j < Lout; ++j) gxr[ir[j]] += gr[j];
                   }
                 });
}

void validate_config(const ModelConfig& cfg) {
  if (cfg.num_classes < 2)
    throw std::invalid_argument("cvnet: num_classes must be >= 2");
  if (cfg.num_blocks < 1)
    throw std::invalid_argument("cvnet: num_blocks must be >= 1");
  if (cfg.channels < 1)
    throw std::invalid_argument("cvnet: channels must be >= 1");
  if (cfg.kernel < 1 || cfg.kernel % 2 == 0)
    throw std::invalid_argument(
        "cvnet: kernel must be odd so convolutions preserve length");
  if (cfg.pool_window < 1)
    throw std::invalid_argument("cvnet: pool_window must be >= 1");
  if (cfg.dense_variant != "short" && cfg.dense_variant != "long")
    throw std::invalid_argument("cvnet: dense_variant must be short or long");
}

}  // namespace

Network::Network(const ModelConfig& cfg) : cfg_(cfg) {
  validate_config(cfg);
  const int C = cfg.channels, K = cfg.kernel;
  blocks_.resize(static_cast<size_t>(cfg.num_blocks));
  for (int i = 0; i < cfg.num_blocks; ++i) {
    Block& blk = blocks_[static_cast<size_t>(i)];
    int cin = i == 0 ? 1 : C;
    std::string prefix = "block" + std::to_string(i);
    double bound = 1.0 / std::sqrt(2.0 * cin * K);

    blk.conv.w_re = Tensor::zeros({C, cin, K}, true);
    blk.conv.w_re.set_name(prefix + ".conv.w_re");
    fill_uniform(blk.conv.w_re, cfg.init_seed, bound);
    blk.conv.w_im = Tensor::zeros({C, cin, K}, true);
    blk.conv.w_im.set_name(prefix + ".conv.w_im");
    fill_uniform(blk.conv.w_im, cfg.init_seed, bound);
    blk.conv.b_re = Tensor::zeros({C}, true);
    blk.conv.b_re.set_name(prefix + ".conv.b_re");
    blk.conv.b_im = Tensor::zeros({C}, true);
    blk.conv.b_im.set_name(prefix + ".conv.b_im");

    for (auto [bn, tag] : {std::pair{&blk.bn_re, ".bn_re"},
                           std::pair{&blk.bn_im, ".bn_im"}}) {
      bn->gamma = Tensor::full({C}, 1.0, true);
      bn->gamma.set_name(prefix + tag + ".gamma");
      bn->beta = Tensor::zeros({C}, true);
      bn->beta.set_name(prefix + tag + ".beta");
      bn->run_mean = Tensor::zeros({C});
      bn->run_mean.set_name(prefix + tag + ".running_mean");
      bn->run_var = Tensor::full({C}, 1.0);
      bn->run_var.set_name(prefix + tag + ".running_var");
    }
  }

  if (cfg.dense_variant == "long") {
    stack_.push_back({"fc0", 1024, {}, {}});
  } else {
    stack_.push_back({"fc0", 512, {}, {}});
    stack_.push_back({"fc1", 128, {}, {}});
  }
  head_ = {"head", cfg.num_classes, {}, {}};
}

void Network::bind_dense(LazyDense& fc, int in_dim) {
  fc.w = Tensor::zeros({fc.out_dim, in_dim}, true);
  fc.w.set_name(fc.name + ".w");
  fill_uniform(fc.w, cfg_.init_seed, 1.0 / std::sqrt(static_cast<double>(in_dim)));
  fc.b = Tensor::zeros({fc.out_dim}, true);
  fc.b.set_name(fc.name + ".b");
}

Tensor Network::apply_dense(LazyDense& fc, const Tensor& x, bool track) {
  if (!fc.bound()) bind_dense(fc, x.dim(1));
  if (x.dim(1) != fc.w.dim(1))
    throw std::invalid_argument("cvnet: input width changed after binding " +
                                fc.name);
  Tensor w = track ? fc.w : fc.w.detach();
  Tensor b = track ? fc.b : fc.b.detach();
  return dense(x, w, b);
}

Tensor Network::features(const Tensor& x, const FwdCtx& ctx) {
  if (x.shape().size() != 3 || x.dim(1) != 2)
    throw std::invalid_argument("cvnet: input must be [B,2,n]");
  // Each block must see at least one full pool window, i.e. n >= w^blocks.
  int64_t required = 1;
  for (int i = 0; i < cfg_.num_blocks && required <= x.dim(2); ++i)
    required *= cfg_.pool_window;
  if (x.dim(2) < required)
    throw std::invalid_argument(
        "cvnet: input too short for the configured number of blocks");

  Tensor re = slice_channels(x, 0, 1);
  Tensor im = slice_channels(x, 1, 2);

  BatchNormOpts bn_opts;
  bn_opts.training = ctx.training;
  bn_opts.update_running = ctx.training && ctx.update_stats;

  const int pad = (cfg_.kernel - 1) / 2;
  for (auto& blk : blocks_) {
    Tensor w_re = ctx.track_params ? blk.conv.w_re : blk.conv.w_re.detach();
    Tensor w_im = ctx.track_params ? blk.conv.w_im : blk.conv.w_im.detach();
    Tensor b_re = ctx.track_params ? blk.conv.b_re : blk.conv.b_re.detach();
    Tensor b_im = ctx.track_params ? blk.conv.b_im : blk.conv.b_im.detach();
    Tensor zero_bias = Tensor::zeros({cfg_.channels});

    // (a + jb)(w + jv) = (a*w - b*v) + j(a*v + b*w)
    Tensor conv_re = sub(conv1d(re, w_re, b_re, 1, pad),
                         conv1d(im, w_im, zero_bias, 1, pad));
    Tensor conv_im = add(conv1d(re, w_im, b_im, 1, pad),
                         conv1d(im, w_re, zero_bias, 1, pad));

    re = relu(conv_re);
    im = relu(conv_im);

    Tensor g_re = ctx.track_params ? blk.bn_re.gamma : blk.bn_re.gamma.detach();
    Tensor be_re = ctx.track_params ? blk.bn_re.beta : blk.bn_re.beta.detach();
    Tensor g_im = ctx.track_params ? blk.bn_im.gamma : blk.bn_im.gamma.detach();
    Tensor be_im = ctx.track_params ? blk.bn_im.beta : blk.bn_im.beta.detach();
    re = batchnorm1d(re, g_re, be_re, blk.bn_re.run_mean, blk.bn_re.run_var,
                     bn_opts);
    im = batchnorm1d(im, g_im, be_im, blk.bn_im.run_mean, blk.bn_im.run_var,
                     bn_opts);

    int L = re.dim(2);
    int Lout = (L + cfg_.pool_window - 1) / cfg_.pool_window;
    if (cfg_.per_plane_pool) {
      re = maxpool1d(re, cfg_.pool_window);
      im = maxpool1d(im, cfg_.pool_window);
    } else {
      auto idx = std::make_shared<std::vector<int32_t>>(magnitude_argmax(
          re.values(), im.values(), re.dim(0) * re.dim(1), L,
          cfg_.pool_window, Lout));
      re = gather_lanes(re, idx, Lout);
      im = gather_lanes(im, idx, Lout);
    }
  }

  int B = re.dim(0);
  int flat = re.dim(1) * re.dim(2);
  Tensor f = concat_cols(reshape(re, {B, flat}), reshape(im, {B, flat}));
  for (auto& fc : stack_) f = apply_dense(fc, f, ctx.track_params);
  return f;
}

Tensor Network::logits_from_features(const Tensor& f, const FwdCtx& ctx) {
  return apply_dense(head_, f, ctx.track_params);
}

Tensor Network::logits(const Tensor& x, const FwdCtx& ctx) {
  return logits_from_features(features(x, ctx), ctx);
}

int Network::feature_dim() const {
  return stack_.back().bound() ? stack_.back().out_dim : -1;
}

std::vector<Tensor> Network::parameters() {
  std::vector<Tensor> out;
  for (auto& blk : blocks_) {
    out.push_back(blk.conv.w_re);
    out.push_back(blk.conv.w_im);
    out.push_back(blk.conv.b_re);
    out.push_back(blk.conv.b_im);
    out.push_back(blk.bn_re.gamma);
    out.push_back(blk.bn_re.beta);
    out.push_back(blk.bn_im.gamma);
    out.push_back(blk.bn_im.beta);
  }
  for (auto& fc : stack_)
    if (fc.bound()) {
      out.push_back(fc.w);
      out.push_back(fc.b);
    }
  if (head_.bound()) {
    out.push_back(head_.w);
    out.push_back(head_.b);
  }
  return out;
}

std::vector<Tensor> Network::running_buffers() {
  std::vector<Tensor> out;
  for (auto& blk : blocks_) {
    out.push_back(blk.bn_re.run_mean);
    out.push_back(blk.bn_re.run_var);
    out.push_back(blk.bn_im.run_mean);
    out.push_back(blk.bn_im.run_var);
  }
  return out;
}

void Network::load_state(const std::map<std::string, Tensor>& table) {
  auto fetch = [&](const std::string& name) -> const Tensor& {
    auto it = table.find(name);
    if (it == table.end())
      throw std::invalid_argument("cvnet: checkpoint missing tensor " + name);
    return it->second;
  };
  auto copy_into = [&](Tensor& dst) {
    const Tensor& src = fetch(dst.name());
    if (src.shape() != dst.shape())
      throw std::invalid_argument("cvnet: shape mismatch restoring " +
                                  dst.name());
    dst.values() = src.values();
  };

  auto bind_from_table = [&](LazyDense& fc) {
    if (fc.bound()) return;
    const Tensor& src = fetch(fc.name + ".w");
    if (src.shape().size() != 2 || src.dim(0) != fc.out_dim)
      throw std::invalid_argument("cvnet: bad shape restoring " + fc.name);
    bind_dense(fc, src.dim(1));
  };
  for (auto& fc : stack_) bind_from_table(fc);
  bind_from_table(head_);

  for (auto& blk : blocks_) {
    copy_into(blk.conv.w_re);
    copy_into(blk.conv.w_im);
    copy_into(blk.conv.b_re);
    copy_into(blk.conv.b_im);
    for (auto* bn : {&blk.bn_re, &blk.bn_im}) {
      copy_into(bn->gamma);
      copy_into(bn->beta);
      copy_into(bn->run_mean);
      copy_into(bn->run_var);
    }
  }
  for (auto& fc : stack_) {
    copy_into(fc.w);
    copy_into(fc.b);
  }
  copy_into(head_.w);
  copy_into(head_.b);
}

}  // namespace mat::cvnet
