// SPDX-License-Identifier: Apache-2.0

#include "stcmix/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace stcmix {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv3d: return "conv3d";
    case LayerKind::Relu: return "relu";
    case LayerKind::Pool: return "spatial-temporal-pool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Linear: return "linear";
    case LayerKind::L2Norm: return "l2norm-head";
  }
  return "unknown";
}

namespace {

// ---- conv3d ----
//
// im2col with per-sample column slabs of shape (taps, positions): each slab
// stays cache-resident through the forward product and both backward
// products. Slabs are cached for backward.

class Conv3dLayer final : public Layer {
public:
  Conv3dLayer(const Conv3dSpec& spec, Rng& init) : spec_(spec) {
    weight_ = Tensor({spec.out_ch, spec.in_ch, spec.kt, spec.kh, spec.kw});
    const double scale =
        std::sqrt(2.0 / static_cast<double>(spec.in_ch * spec.kt * spec.kh * spec.kw));
    for (size_t i = 0; i < weight_.size(); ++i) weight_[i] = init.normal() * scale;
    bias_ = Tensor({spec.out_ch});
    grad_weight_ = Tensor(weight_.shape());
    grad_bias_ = Tensor(bias_.shape());
  }

  LayerKind kind() const override { return LayerKind::Conv3d; }

  Tensor forward(const Tensor& x, bool cache) override {
    if (x.rank() != 5)
      throw std::invalid_argument("conv3d: expected rank-5 input, got " + x.shape_str());
    if (x.dim(1) != spec_.in_ch)
      throw std::invalid_argument("conv3d: input has " + std::to_string(x.dim(1)) +
                                  " channels, layer expects " + std::to_string(spec_.in_ch));
    const long long to = out_extent(x.dim(2), spec_.kt, spec_.st, spec_.pt);
    const long long ho = out_extent(x.dim(3), spec_.kh, spec_.sh, spec_.ph);
    const long long wo = out_extent(x.dim(4), spec_.kw, spec_.sw, spec_.pw);
    if (to < 1 || ho < 1 || wo < 1)
      throw std::invalid_argument("conv3d: input " + x.shape_str() +
                                  " too small for kernel/stride");
    const size_t batch = x.dim(0);
    const size_t taps = spec_.in_ch * spec_.kt * spec_.kh * spec_.kw;
    const size_t positions = static_cast<size_t>(to * ho * wo);

    Tensor col({batch, taps, positions});
    Tensor y({batch, spec_.out_ch, static_cast<size_t>(to), static_cast<size_t>(ho),
              static_cast<size_t>(wo)});
    for (size_t b = 0; b < batch; ++b) {
      double* slab = col.data() + b * taps * positions;
      fill_sample_columns(x, b, static_cast<size_t>(to), static_cast<size_t>(ho),
                          static_cast<size_t>(wo), slab);
      for (size_t co = 0; co < spec_.out_ch; ++co) {
        double* __restrict__ orow = y.data() + (b * spec_.out_ch + co) * positions;
        std::fill(orow, orow + positions, bias_[co]);
        const double* wrow = weight_.data() + co * taps;
        size_t t = 0;
        for (; t + 4 <= taps; t += 4) {
          const double w0 = wrow[t], w1 = wrow[t + 1], w2 = wrow[t + 2], w3 = wrow[t + 3];
          const double* __restrict__ c0 = slab + t * positions;
          const double* __restrict__ c1 = c0 + positions;
          const double* __restrict__ c2 = c1 + positions;
          const double* __restrict__ c3 = c2 + positions;
          for (size_t i = 0; i < positions; ++i)
            orow[i] += w0 * c0[i] + w1 * c1[i] + w2 * c2[i] + w3 * c3[i];
        }
        for (; t < taps; ++t) {
          const double wv = wrow[t];
          const double* __restrict__ crow = slab + t * positions;
          for (size_t i = 0; i < positions; ++i) orow[i] += wv * crow[i];
        }
      }
    }
    if (cache) {
      in_shape_ = x.shape();
      cached_col_ = std::move(col);
      has_cache_ = true;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("conv3d: backward called before forward");
    const size_t batch = in_shape_[0];
    const size_t taps = spec_.in_ch * spec_.kt * spec_.kh * spec_.kw;
    const size_t positions = grad_out.size() / (batch * spec_.out_ch);

    Tensor dx(in_shape_);
    Tensor dcol({taps, positions}); // per-sample scratch
    for (size_t b = 0; b < batch; ++b) {
      const double* slab = cached_col_.data() + b * taps * positions;
      dcol.fill(0.0);
      for (size_t co = 0; co < spec_.out_ch; ++co) {
        const double* __restrict__ dyr =
            grad_out.data() + (b * spec_.out_ch + co) * positions;
        double acc_bias = 0.0;
        for (size_t i = 0; i < positions; ++i) acc_bias += dyr[i];
        grad_bias_[co] += acc_bias;
      }
      size_t co = 0;
      for (; co + 4 <= spec_.out_ch; co += 4) {
        const double* __restrict__ d0 =
            grad_out.data() + (b * spec_.out_ch + co) * positions;
        const double* __restrict__ d1 = d0 + positions;
        const double* __restrict__ d2 = d1 + positions;
        const double* __restrict__ d3 = d2 + positions;
        double* dw0 = grad_weight_.data() + co * taps;
        double* dw1 = dw0 + taps;
        double* dw2 = dw1 + taps;
        double* dw3 = dw2 + taps;
        const double* w0 = weight_.data() + co * taps;
        const double* w1 = w0 + taps;
        const double* w2 = w1 + taps;
        const double* w3 = w2 + taps;
        for (size_t t = 0; t < taps; ++t) {
          const double* __restrict__ crow = slab + t * positions;
          double* __restrict__ drow = dcol.data() + t * positions;
          double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
          const double v0 = w0[t], v1 = w1[t], v2 = w2[t], v3 = w3[t];
          for (size_t i = 0; i < positions; ++i) {
            const double c = crow[i];
            s0 += d0[i] * c;
            s1 += d1[i] * c;
            s2 += d2[i] * c;
            s3 += d3[i] * c;
            drow[i] += v0 * d0[i] + v1 * d1[i] + v2 * d2[i] + v3 * d3[i];
          }
          dw0[t] += s0;
          dw1[t] += s1;
          dw2[t] += s2;
          dw3[t] += s3;
        }
      }
      for (; co < spec_.out_ch; ++co) {
        const double* __restrict__ dyr =
            grad_out.data() + (b * spec_.out_ch + co) * positions;
        double* dwr = grad_weight_.data() + co * taps;
        const double* wrow = weight_.data() + co * taps;
        for (size_t t = 0; t < taps; ++t) {
          const double* __restrict__ crow = slab + t * positions;
          double s = 0.0;
          for (size_t i = 0; i < positions; ++i) s += dyr[i] * crow[i];
          dwr[t] += s;
          const double wv = wrow[t];
          if (wv == 0.0) continue;
          double* __restrict__ drow = dcol.data() + t * positions;
          for (size_t i = 0; i < positions; ++i) drow[i] += wv * dyr[i];
        }
      }
      scatter_sample_columns(dcol, b, positions, dx);
    }
    return dx;
  }

  std::vector<Tensor*> params() override { return {&weight_, &bias_}; }
  std::vector<Tensor*> grads() override { return {&grad_weight_, &grad_bias_}; }
  std::vector<std::string> param_names() const override { return {"weight", "bias"}; }

private:
  static long long out_extent(size_t in, size_t k, size_t s, size_t p) {
    return (static_cast<long long>(in) + 2 * static_cast<long long>(p) -
            static_cast<long long>(k)) /
               static_cast<long long>(s) +
           1;
  }

  // Valid output range [lo, hi) for which in = out*stride + k - pad lands
  // inside [0, in_extent).
  static std::pair<long long, long long> tap_bounds(long long out_extent_v,
                                                    long long in_extent, size_t k,
                                                    long long stride, long long pad) {
    const long long off = static_cast<long long>(k) - pad;
    long long lo = 0;
    if (off < 0) lo = (-off + stride - 1) / stride;
    long long hi;
    const long long top = in_extent - 1 - off;
    if (top < 0)
      hi = 0;
    else
      hi = std::min<long long>(out_extent_v, top / stride + 1);
    return {lo, std::max(lo, hi)};
  }

  void fill_sample_columns(const Tensor& x, size_t b, size_t to, size_t ho, size_t wo,
                           double* slab) const {
    const long long t_in = x.dim(2), h_in = x.dim(3), w_in = x.dim(4);
    const size_t positions = to * ho * wo;
    const size_t in_plane = static_cast<size_t>(t_in * h_in * w_in);
    const long long st = spec_.st, sh = spec_.sh, sw = spec_.sw;
    std::fill(slab, slab + spec_.in_ch * spec_.kt * spec_.kh * spec_.kw * positions, 0.0);

    size_t tap = 0;
    for (size_t ci = 0; ci < spec_.in_ch; ++ci) {
      const double* xp = x.data() + (b * spec_.in_ch + ci) * in_plane;
      for (size_t kt = 0; kt < spec_.kt; ++kt)
        for (size_t kh = 0; kh < spec_.kh; ++kh)
          for (size_t kw = 0; kw < spec_.kw; ++kw, ++tap) {
            double* crow = slab + tap * positions;
            const auto [t_lo, t_hi] = tap_bounds(to, t_in, kt, st, spec_.pt);
            const auto [h_lo, h_hi] = tap_bounds(ho, h_in, kh, sh, spec_.ph);
            const auto [w_lo, w_hi] = tap_bounds(wo, w_in, kw, sw, spec_.pw);
            const long long koff_t = static_cast<long long>(kt) - spec_.pt;
            const long long koff_h = static_cast<long long>(kh) - spec_.ph;
            const long long koff_w = static_cast<long long>(kw) - spec_.pw;
            for (long long ot = t_lo; ot < t_hi; ++ot) {
              const long long ti = ot * st + koff_t;
              for (long long oh = h_lo; oh < h_hi; ++oh) {
                const long long hi2 = oh * sh + koff_h;
                const double* xr = xp + (ti * h_in + hi2) * w_in + (w_lo * sw + koff_w);
                double* dst = crow + (ot * static_cast<long long>(ho) + oh) *
                                         static_cast<long long>(wo) +
                              w_lo;
                const long long n = w_hi - w_lo;
                for (long long i = 0; i < n; ++i) dst[i] = xr[i * sw];
              }
            }
          }
    }
  }

  void scatter_sample_columns(const Tensor& dcol, size_t b, size_t positions,
                              Tensor& dx) const {
    const long long t_in = in_shape_[2], h_in = in_shape_[3], w_in = in_shape_[4];
    const size_t to = static_cast<size_t>(out_extent(in_shape_[2], spec_.kt, spec_.st, spec_.pt));
    const size_t ho = static_cast<size_t>(out_extent(in_shape_[3], spec_.kh, spec_.sh, spec_.ph));
    const size_t wo = static_cast<size_t>(out_extent(in_shape_[4], spec_.kw, spec_.sw, spec_.pw));
    const size_t in_plane = static_cast<size_t>(t_in * h_in * w_in);
    const long long st = spec_.st, sh = spec_.sh, sw = spec_.sw;

    size_t tap = 0;
    for (size_t ci = 0; ci < spec_.in_ch; ++ci) {
      double* xp = dx.data() + (b * spec_.in_ch + ci) * in_plane;
      for (size_t kt = 0; kt < spec_.kt; ++kt)
        for (size_t kh = 0; kh < spec_.kh; ++kh)
          for (size_t kw = 0; kw < spec_.kw; ++kw, ++tap) {
            const double* crow = dcol.data() + tap * positions;
            const auto [t_lo, t_hi] = tap_bounds(to, t_in, kt, st, spec_.pt);
            const auto [h_lo, h_hi] = tap_bounds(ho, h_in, kh, sh, spec_.ph);
            const auto [w_lo, w_hi] = tap_bounds(wo, w_in, kw, sw, spec_.pw);
            const long long koff_t = static_cast<long long>(kt) - spec_.pt;
            const long long koff_h = static_cast<long long>(kh) - spec_.ph;
            const long long koff_w = static_cast<long long>(kw) - spec_.pw;
            for (long long ot = t_lo; ot < t_hi; ++ot) {
              const long long ti = ot * st + koff_t;
              for (long long oh = h_lo; oh < h_hi; ++oh) {
                const long long hi2 = oh * sh + koff_h;
                double* xr = xp + (ti * h_in + hi2) * w_in + (w_lo * sw + koff_w);
                const double* src = crow + (ot * static_cast<long long>(ho) + oh) *
                                               static_cast<long long>(wo) +
                                    w_lo;
                const long long n = w_hi - w_lo;
                for (long long i = 0; i < n; ++i) xr[i * sw] += src[i];
              }
            }
          }
    }
  }

  Conv3dSpec spec_;
  Tensor weight_, bias_, grad_weight_, grad_bias_;
  Shape in_shape_;
  Tensor cached_col_;
};

// ---- relu ----

class ReluLayer final : public Layer {
public:
  LayerKind kind() const override { return LayerKind::Relu; }

  Tensor forward(const Tensor& x, bool cache) override {
    Tensor y = x;
    for (size_t i = 0; i < y.size(); ++i) y[i] = y[i] > 0.0 ? y[i] : 0.0;
    if (cache) {
      cached_input_ = x;
      has_cache_ = true;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("relu: backward called before forward");
    if (!grad_out.same_shape(cached_input_))
      throw std::invalid_argument("relu: gradient shape mismatch");
    Tensor grad_in = grad_out;
    for (size_t i = 0; i < grad_in.size(); ++i)
      if (cached_input_[i] <= 0.0) grad_in[i] = 0.0;
    return grad_in;
  }

private:
  Tensor cached_input_;
};

// ---- global average pool over (T,H,W) ----

class GlobalPoolLayer final : public Layer {
public:
  LayerKind kind() const override { return LayerKind::Pool; }

  Tensor forward(const Tensor& x, bool cache) override {
    if (x.rank() != 5)
      throw std::invalid_argument("pool: expected rank-5 input, got " + x.shape_str());
    const size_t b = x.dim(0), c = x.dim(1);
    const size_t cells = x.dim(2) * x.dim(3) * x.dim(4);
    Tensor y({b, c, 1, 1, 1});
    for (size_t i = 0; i < b * c; ++i) {
      const double* xp = x.data() + i * cells;
      double s = 0.0;
      for (size_t j = 0; j < cells; ++j) s += xp[j];
      y[i] = s / static_cast<double>(cells);
    }
    if (cache) {
      in_shape_ = x.shape();
      has_cache_ = true;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("pool: backward called before forward");
    const size_t cells = in_shape_[2] * in_shape_[3] * in_shape_[4];
    Tensor grad_in(in_shape_);
    for (size_t i = 0; i < in_shape_[0] * in_shape_[1]; ++i) {
      const double g = grad_out[i] / static_cast<double>(cells);
      double* gp = grad_in.data() + i * cells;
      for (size_t j = 0; j < cells; ++j) gp[j] = g;
    }
    return grad_in;
  }

private:
  Shape in_shape_;
};

// ---- flatten ----

class FlattenLayer final : public Layer {
public:
  LayerKind kind() const override { return LayerKind::Flatten; }

  Tensor forward(const Tensor& x, bool cache) override {
    if (x.rank() < 2)
      throw std::invalid_argument("flatten: expected rank >= 2, got " + x.shape_str());
    if (cache) {
      in_shape_ = x.shape();
      has_cache_ = true;
    }
    return x.reshape({x.dim(0), x.size() / x.dim(0)});
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("flatten: backward called before forward");
    return grad_out.reshape(in_shape_);
  }

private:
  Shape in_shape_;
};

// ---- linear ----

class LinearLayer final : public Layer {
public:
  LinearLayer(size_t in_features, size_t out_features, Rng& init)
      : in_(in_features), out_(out_features) {
    weight_ = Tensor({out_, in_});
    const double scale = std::sqrt(2.0 / static_cast<double>(in_));
    for (size_t i = 0; i < weight_.size(); ++i) weight_[i] = init.normal() * scale;
    bias_ = Tensor({out_});
    grad_weight_ = Tensor(weight_.shape());
    grad_bias_ = Tensor(bias_.shape());
  }

  LayerKind kind() const override { return LayerKind::Linear; }

  Tensor forward(const Tensor& x, bool cache) override {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw std::invalid_argument("linear: expected (B, " + std::to_string(in_) +
                                  "), got " + x.shape_str());
    const size_t b = x.dim(0);
    Tensor y({b, out_});
    for (size_t i = 0; i < b; ++i) {
      const double* xr = x.data() + i * in_;
      double* yr = y.data() + i * out_;
      for (size_t o = 0; o < out_; ++o) {
        const double* wr = weight_.data() + o * in_;
        double s = bias_[o];
        for (size_t j = 0; j < in_; ++j) s += wr[j] * xr[j];
        yr[o] = s;
      }
    }
    if (cache) {
      cached_input_ = x;
      has_cache_ = true;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("linear: backward called before forward");
    const size_t b = cached_input_.dim(0);
    if (grad_out.rank() != 2 || grad_out.dim(0) != b || grad_out.dim(1) != out_)
      throw std::invalid_argument("linear: gradient shape mismatch");
    Tensor grad_in({b, in_});
    for (size_t i = 0; i < b; ++i) {
      const double* xr = cached_input_.data() + i * in_;
      const double* gr = grad_out.data() + i * out_;
      double* gir = grad_in.data() + i * in_;
      for (size_t o = 0; o < out_; ++o) {
        const double g = gr[o];
        grad_bias_[o] += g;
        const double* wr = weight_.data() + o * in_;
        double* dwr = grad_weight_.data() + o * in_;
        for (size_t j = 0; j < in_; ++j) {
          dwr[j] += g * xr[j];
          gir[j] += g * wr[j];
        }
      }
    }
    return grad_in;
  }

  std::vector<Tensor*> params() override { return {&weight_, &bias_}; }
  std::vector<Tensor*> grads() override { return {&grad_weight_, &grad_bias_}; }
  std::vector<std::string> param_names() const override { return {"weight", "bias"}; }

private:
  size_t in_, out_;
  Tensor weight_, bias_, grad_weight_, grad_bias_;
  Tensor cached_input_;
};

// ---- l2 normalization head ----

class L2NormLayer final : public Layer {
public:
  LayerKind kind() const override { return LayerKind::L2Norm; }

  Tensor forward(const Tensor& x, bool cache) override {
    if (x.rank() != 2)
      throw std::invalid_argument("l2norm: expected (B, D), got " + x.shape_str());
    const size_t b = x.dim(0), d = x.dim(1);
    Tensor y = x;
    std::vector<double> norms(b);
    for (size_t i = 0; i < b; ++i) {
      double* row = y.data() + i * d;
      double ss = 0.0;
      for (size_t j = 0; j < d; ++j) ss += row[j] * row[j];
      const double norm = std::sqrt(ss);
      if (norm == 0.0)
        throw std::domain_error("l2norm: zero-norm embedding row " + std::to_string(i));
      for (size_t j = 0; j < d; ++j) row[j] /= norm;
      norms[i] = norm;
    }
    if (cache) {
      cached_output_ = y;
      norms_ = std::move(norms);
      has_cache_ = true;
    }
    return y;
  }

  Tensor backward(const Tensor& grad_out) override {
    if (!has_cache_) throw std::logic_error("l2norm: backward called before forward");
    if (!grad_out.same_shape(cached_output_))
      throw std::invalid_argument("l2norm: gradient shape mismatch");
    const size_t b = cached_output_.dim(0), d = cached_output_.dim(1);
    Tensor grad_in(grad_out.shape());
    for (size_t i = 0; i < b; ++i) {
      const double* g = grad_out.data() + i * d;
      const double* y = cached_output_.data() + i * d;
      double* gi = grad_in.data() + i * d;
      double dot = 0.0;
      for (size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      for (size_t j = 0; j < d; ++j) gi[j] = (g[j] - dot * y[j]) / norms_[i];
    }
    return grad_in;
  }

private:
  Tensor cached_output_;
  std::vector<double> norms_;
};

} // namespace

std::unique_ptr<Layer> make_conv3d(const Conv3dSpec& spec, Rng& init) {
  return std::make_unique<Conv3dLayer>(spec, init);
}
std::unique_ptr<Layer> make_relu() { return std::make_unique<ReluLayer>(); }
std::unique_ptr<Layer> make_global_pool() { return std::make_unique<GlobalPoolLayer>(); }
std::unique_ptr<Layer> make_flatten() { return std::make_unique<FlattenLayer>(); }
std::unique_ptr<Layer> make_linear(size_t in_features, size_t out_features, Rng& init) {
  return std::make_unique<LinearLayer>(in_features, out_features, init);
}
std::unique_ptr<Layer> make_l2norm() { return std::make_unique<L2NormLayer>(); }

Tensor center_input(const Tensor& clip_batch) {
  Tensor out = clip_batch;
  for (size_t i = 0; i < out.size(); ++i) out[i] -= 0.5;
  return out;
}

// ---- EncoderStack ----

EncoderStack EncoderStack::make_default(const EncoderArch& arch, uint64_t init_seed,
                                        std::string modality_tag) {
  EncoderStack enc;
  enc.arch_ = arch;
  enc.tag_ = std::move(modality_tag);
  enc.init_seed_ = init_seed;
  Rng init(init_seed);

  const size_t c = arch.base_channels;
  auto conv = [&](size_t in, size_t out, size_t st, size_t sh, size_t sw) {
    Conv3dSpec spec;
    spec.in_ch = in;
    spec.out_ch = out;
    spec.st = st;
    spec.sh = sh;
    spec.sw = sw;
    enc.layers_.push_back(make_conv3d(spec, init));
    enc.layers_.push_back(make_relu());
    enc.block_ends_.push_back(enc.layers_.size());
  };
  conv(arch.in_channels, c, 1, 2, 2);
  conv(c, 2 * c, 2, 1, 1);
  conv(2 * c, 4 * c, 1, 2, 2);
  conv(4 * c, 8 * c, 1, 1, 1);
  enc.layers_.push_back(make_global_pool());
  enc.layers_.push_back(make_flatten());
  enc.head_start_ = enc.layers_.size();
  enc.layers_.push_back(make_linear(arch.backbone_width(), arch.embed_dim, init));
  enc.layers_.push_back(make_relu());
  enc.layers_.push_back(make_linear(arch.embed_dim, arch.embed_dim, init));
  enc.layers_.push_back(make_l2norm());
  return enc;
}

Tensor EncoderStack::forward(const Tensor& x, bool cache) {
  return partial_forward(x, 0, layers_.size(), cache);
}

Tensor EncoderStack::partial_forward(const Tensor& x, size_t from_layer, size_t to_layer,
                                     bool cache) {
  if (from_layer >= to_layer || to_layer > layers_.size())
    throw std::invalid_argument("partial_forward: invalid layer range [" +
                                std::to_string(from_layer) + ", " +
                                std::to_string(to_layer) + ") of " +
                                std::to_string(layers_.size()));
  Tensor cur = x;
  for (size_t i = from_layer; i < to_layer; ++i) {
    try {
      cur = layers_[i]->forward(cur, cache);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("layer" + std::to_string(i) + " (" +
                                  layer_kind_name(layers_[i]->kind()) + "): " + e.what());
    }
  }
  return cur;
}

Tensor EncoderStack::backward_range(const Tensor& grad_out, size_t from_layer,
                                    size_t to_layer) {
  if (from_layer >= to_layer || to_layer > layers_.size())
    throw std::invalid_argument("backward_range: invalid layer range");
  Tensor cur = grad_out;
  for (size_t i = to_layer; i-- > from_layer;) cur = layers_[i]->backward(cur);
  return cur;
}

void EncoderStack::zero_grads() {
  for (auto& layer : layers_)
    for (Tensor* g : layer->grads()) g->fill(0.0);
}

std::vector<Tensor*> EncoderStack::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_)
    for (Tensor* p : layer->params()) out.push_back(p);
  return out;
}

std::vector<const Tensor*> EncoderStack::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& layer : layers_)
    for (Tensor* p : const_cast<Layer&>(*layer).params()) out.push_back(p);
  return out;
}

std::vector<Tensor*> EncoderStack::gradients() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_)
    for (Tensor* g : layer->grads()) out.push_back(g);
  return out;
}

std::vector<std::string> EncoderStack::parameter_names() const {
  std::vector<std::string> out;
  for (size_t i = 0; i < layers_.size(); ++i)
    for (const std::string& name : layers_[i]->param_names())
      out.push_back("layer" + std::to_string(i) + "." + name);
  return out;
}

size_t EncoderStack::block_output_layer(size_t block) const {
  if (block == 0 || block > block_ends_.size())
    throw std::invalid_argument("block_output_layer: block " + std::to_string(block) +
                                " not in [1, " + std::to_string(block_ends_.size()) + "]");
  return block_ends_[block - 1];
}

EncoderStack EncoderStack::clone() const {
  EncoderStack copy = make_default(arch_, init_seed_, tag_);
  auto dst = copy.parameters();
  auto src = parameters();
  for (size_t i = 0; i < src.size(); ++i) *dst[i] = *src[i];
  copy.frozen_ = frozen_;
  return copy;
}

uint64_t EncoderStack::param_digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Tensor* p : parameters()) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p->data());
    for (size_t i = 0; i < p->size() * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

// ---- optimizers ----

void Optimizer::step(const std::vector<Tensor*>& params, const std::vector<Tensor*>& grads) {
  if (params.size() != grads.size())
    throw std::invalid_argument("Optimizer::step: params/grads list size mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]))
      throw std::invalid_argument("Optimizer::step: shape mismatch at parameter " +
                                  std::to_string(i));
    if (!grads[i]->all_finite())
      throw std::runtime_error("Optimizer::step: non-finite gradient at parameter " +
                               std::to_string(i) + "; step aborted");
  }
  if (m_.empty()) {
    for (const Tensor* p : params) m_.emplace_back(p->shape());
    if (cfg_.kind == OptKind::Adam)
      for (const Tensor* p : params) v_.emplace_back(p->shape());
  }
  if (m_.size() != params.size())
    throw std::invalid_argument("Optimizer::step: parameter list changed between steps");

  ++step_count_;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    if (cfg_.kind == OptKind::SgdMomentum) {
      Tensor& vel = m_[i];
      for (size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j] + cfg_.weight_decay * p[j];
        vel[j] = cfg_.momentum * vel[j] + gj;
        p[j] -= cfg_.lr * vel[j];
      }
    } else {
      Tensor& m1 = m_[i];
      Tensor& m2 = v_[i];
      const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
      const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
      for (size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j] + cfg_.weight_decay * p[j];
        m1[j] = cfg_.beta1 * m1[j] + (1.0 - cfg_.beta1) * gj;
        m2[j] = cfg_.beta2 * m2[j] + (1.0 - cfg_.beta2) * gj * gj;
        p[j] -= cfg_.lr * (m1[j] / bc1) / (std::sqrt(m2[j] / bc2) + cfg_.eps);
      }
    }
  }
}

void Optimizer::reset() {
  m_.clear();
  v_.clear();
  step_count_ = 0;
}

void ema_update(const std::vector<Tensor*>& key_params,
                const std::vector<const Tensor*>& query_params, double m) {
  if (key_params.size() != query_params.size())
    throw std::invalid_argument("ema_update: parameter list size mismatch");
  if (!(m >= 0.0 && m <= 1.0))
    throw std::invalid_argument("ema_update: momentum must be in [0, 1]");
  if (m == 1.0) return;
  for (size_t i = 0; i < key_params.size(); ++i) {
    Tensor& k = *key_params[i];
    const Tensor& q = *query_params[i];
    if (!k.same_shape(q))
      throw std::invalid_argument("ema_update: shape mismatch at parameter " +
                                  std::to_string(i));
    if (m == 0.0) {
      k = q;
      continue;
    }
    // Incremental form: exact identity when key == query.
    const double a = 1.0 - m;
    for (size_t j = 0; j < k.size(); ++j) k[j] += a * (q[j] - k[j]);
  }
}

void ema_update(EncoderStack& key, const EncoderStack& query, double m) {
  ema_update(key.parameters(), query.parameters(), m);
}

// ---- checkpoints ----

void save_encoder(const EncoderStack& enc, const std::string& dir, int stage_id) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "stcmix-encoder-v1";
  manifest["stage_id"] = stage_id;
  manifest["modality_tag"] = enc.modality_tag();
  manifest["init_seed"] = enc.init_seed();
  const EncoderArch& a = enc.arch();
  manifest["architecture"] = {{"in_channels", a.in_channels}, {"frames", a.frames},
                              {"height", a.height},           {"width", a.width},
                              {"base_channels", a.base_channels},
                              {"embed_dim", a.embed_dim}};
  json layers = json::array();
  auto& mutable_enc = const_cast<EncoderStack&>(enc);
  for (size_t i = 0; i < enc.num_layers(); ++i) {
    json l;
    l["index"] = i;
    l["kind"] = layer_kind_name(mutable_enc.layer(i).kind());
    l["params"] = mutable_enc.layer(i).param_names();
    layers.push_back(l);
  }
  manifest["layers"] = layers;
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) throw std::runtime_error("save_encoder: cannot write manifest in " + dir);
  os << manifest.dump(2) << "\n";

  const auto names = enc.parameter_names();
  const auto params = enc.parameters();
  for (size_t i = 0; i < params.size(); ++i)
    save_tensor((fs::path(dir) / names[i]).string(), *params[i]);
}

EncoderStack load_encoder(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw std::runtime_error("load_encoder: missing manifest in " + dir);
  json manifest = json::parse(is);
  if (manifest.value("format", "") != "stcmix-encoder-v1")
    throw std::runtime_error("load_encoder: unrecognized checkpoint format in " + dir);
  EncoderArch arch;
  const json& a = manifest.at("architecture");
  arch.in_channels = a.at("in_channels").get<size_t>();
  arch.frames = a.at("frames").get<size_t>();
  arch.height = a.at("height").get<size_t>();
  arch.width = a.at("width").get<size_t>();
  arch.base_channels = a.at("base_channels").get<size_t>();
  arch.embed_dim = a.at("embed_dim").get<size_t>();
  EncoderStack enc = EncoderStack::make_default(
      arch, manifest.at("init_seed").get<uint64_t>(),
      manifest.at("modality_tag").get<std::string>());
  const auto names = enc.parameter_names();
  auto params = enc.parameters();
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor loaded = load_tensor((fs::path(dir) / names[i]).string());
    if (!loaded.same_shape(*params[i]))
      throw std::runtime_error("load_encoder: shape mismatch for " + names[i]);
    *params[i] = std::move(loaded);
  }
  return enc;
}

} // namespace stcmix
