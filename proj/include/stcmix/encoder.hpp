// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "stcmix/rng.hpp"
#include "stcmix/tensor.hpp"

namespace stcmix {

enum class LayerKind { Conv3d, Relu, Pool, Flatten, Linear, L2Norm };

const char* layer_kind_name(LayerKind kind);

/// One manually-differentiated layer. forward() with cache=true stores
/// whatever backward() needs; backward() accumulates parameter gradients and
/// returns the gradient at the layer input. A stack's forward/backward pair
/// is therefore non-reentrant per layer.
class Layer {
public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual Tensor forward(const Tensor& x, bool cache) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Tensor*> params() { return {}; }
  virtual std::vector<Tensor*> grads() { return {}; }
  virtual std::vector<std::string> param_names() const { return {}; }
  bool has_cache() const { return has_cache_; }

protected:
  bool has_cache_ = false;
};

struct Conv3dSpec {
  size_t in_ch = 1, out_ch = 1;
  size_t kt = 3, kh = 3, kw = 3;
  size_t st = 1, sh = 1, sw = 1;
  size_t pt = 1, ph = 1, pw = 1;
};

std::unique_ptr<Layer> make_conv3d(const Conv3dSpec& spec, Rng& init);
std::unique_ptr<Layer> make_relu();
std::unique_ptr<Layer> make_global_pool(); // mean over (T,H,W), keeps rank 5
std::unique_ptr<Layer> make_flatten();     // (B, ...) -> (B, prod)
std::unique_ptr<Layer> make_linear(size_t in_features, size_t out_features, Rng& init);
std::unique_ptr<Layer> make_l2norm();      // row-normalizing output head

/// Pixel-space clips live in [0, 1]; the network consumes them centered at
/// zero. Every path that turns clips into encoder input (training, feature
/// extraction, fine-tuning) applies this same map after augmentation/mixing.
Tensor center_input(const Tensor& clip_batch);

/// Default per-modality architecture: four conv blocks (channels c, 2c, 4c,
/// 8c; spatial stride 2 on blocks 1 and 3, temporal stride 2 on block 2),
/// global average pool, then a two-layer projection head and an L2 output
/// head. Conv block outputs are the eligible mixing sites.
struct EncoderArch {
  size_t in_channels = 3;
  size_t frames = 8, height = 16, width = 16;
  size_t base_channels = 8;
  size_t embed_dim = 64;

  size_t backbone_width() const { return base_channels * 8; }
};

class EncoderStack {
public:
  EncoderStack() = default;

  static EncoderStack make_default(const EncoderArch& arch, uint64_t init_seed,
                                   std::string modality_tag);

  Tensor forward(const Tensor& x, bool cache = true);
  /// Applies layers [from_layer, to_layer). Chaining partial forwards over a
  /// split point reproduces forward() bitwise.
  Tensor partial_forward(const Tensor& x, size_t from_layer, size_t to_layer,
                         bool cache = true);
  /// Backpropagates grad_out (the gradient at layer to_layer's input, i.e.
  /// at layer to_layer-1's output) down to from_layer, accumulating parameter
  /// gradients along the way; returns the gradient at from_layer's input.
  Tensor backward_range(const Tensor& grad_out, size_t from_layer, size_t to_layer);
  void zero_grads();

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<Tensor*> gradients();
  std::vector<std::string> parameter_names() const; // "layer{idx}.{weight|bias}"

  size_t num_layers() const { return layers_.size(); }
  size_t num_blocks() const { return block_ends_.size(); }
  /// Layer index just past conv block `block` (1-based), i.e. the partial
  /// forward split point that exposes that block's activation.
  size_t block_output_layer(size_t block) const;
  size_t head_start() const { return head_start_; } // first projection-head layer

  Layer& layer(size_t i) { return *layers_.at(i); }
  const EncoderArch& arch() const { return arch_; }
  const std::string& modality_tag() const { return tag_; }
  uint64_t init_seed() const { return init_seed_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen) { frozen_ = frozen; }

  EncoderStack clone() const;
  uint64_t param_digest() const; // FNV over raw parameter bytes

private:
  EncoderArch arch_;
  std::string tag_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<size_t> block_ends_;
  size_t head_start_ = 0;
  uint64_t init_seed_ = 0;
  bool frozen_ = false;
};

// ---- optimizers ----

enum class OptKind { SgdMomentum, Adam };

struct OptimizerConfig {
  OptKind kind = OptKind::Adam;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double momentum = 0.9;                      // sgd
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8; // adam
};

class Optimizer {
public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  /// One update step. Weight decay is added to the gradient before the
  /// kind-specific rule. Throws std::runtime_error on non-finite gradients
  /// without touching the parameters.
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads);
  void reset();
  const OptimizerConfig& config() const { return cfg_; }

private:
  OptimizerConfig cfg_;
  size_t step_count_ = 0;
  std::vector<Tensor> m_, v_;
};

/// key <- m * key + (1 - m) * query, elementwise across aligned lists.
void ema_update(const std::vector<Tensor*>& key_params,
                const std::vector<const Tensor*>& query_params, double m);
void ema_update(EncoderStack& key, const EncoderStack& query, double m);

// Checkpoint format: directory with manifest.json (architecture, layer list,
// init seed, stage id) plus one tensor blob per parameter named
// "layer{idx}.{weight|bias}".
void save_encoder(const EncoderStack& enc, const std::string& dir, int stage_id);
EncoderStack load_encoder(const std::string& dir);

} // namespace stcmix
