// SPDX-License-Identifier: Apache-2.0

#include "stcmix/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "stcmix/contrastive.hpp"
#include "stcmix/encoder.hpp"
#include "stcmix/mixing.hpp"

namespace stcmix {

namespace {

constexpr double kStep = 1e-5;

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Max relative error between `analytic` and central differences of `loss_fn`
// taken coordinate-wise over `target`.
double fd_check(Tensor& target, const Tensor& analytic,
                const std::function<double()>& loss_fn) {
  double worst = 0.0;
  for (size_t i = 0; i < target.size(); ++i) {
    const double saved = target[i];
    target[i] = saved + kStep;
    const double up = loss_fn();
    target[i] = saved - kStep;
    const double down = loss_fn();
    target[i] = saved;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * kStep)));
  }
  return worst;
}

// Random upstream gradient fixed across evaluations; the probed scalar is
// sum(g_out * layer(x)).
double layer_check(Layer& layer, Tensor x, Rng& rng) {
  Tensor out = layer.forward(x, /*cache=*/true);
  Tensor g_out = Tensor::randn(out.shape(), rng);
  for (Tensor* g : layer.grads()) g->fill(0.0);
  Tensor grad_in = layer.backward(g_out);

  auto loss_fn = [&]() {
    Tensor y = layer.forward(x, /*cache=*/false);
    double s = 0.0;
    for (size_t i = 0; i < y.size(); ++i) s += g_out[i] * y[i];
    return s;
  };

  double worst = fd_check(x, grad_in, loss_fn);
  auto params = layer.params();
  auto grads = layer.grads();
  for (size_t p = 0; p < params.size(); ++p)
    worst = std::max(worst, fd_check(*params[p], *grads[p], loss_fn));
  return worst;
}

// Inputs bounded away from zero so the finite differences never straddle the
// ReLU kink.
Tensor signed_offset_randn(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::randn(shape, rng);
  for (size_t i = 0; i < t.size(); ++i) {
    const double sign = t[i] >= 0.0 ? 1.0 : -1.0;
    t[i] += sign * 0.05;
  }
  return t;
}

Tensor random_unit_rows(size_t b, size_t d, Rng& rng) {
  return l2_normalize(Tensor::randn({b, d}, rng));
}

double check_conv3d(Rng& rng) {
  Conv3dSpec spec;
  spec.in_ch = 2;
  spec.out_ch = 3;
  spec.sh = 2;
  spec.sw = 2;
  auto layer = make_conv3d(spec, rng);
  return layer_check(*layer, Tensor::randn({2, 2, 5, 6, 6}, rng), rng);
}

double check_relu(Rng& rng) {
  auto layer = make_relu();
  return layer_check(*layer, signed_offset_randn({2, 3, 4, 4, 4}, rng), rng);
}

double check_pool(Rng& rng) {
  auto layer = make_global_pool();
  return layer_check(*layer, Tensor::randn({2, 3, 2, 4, 4}, rng), rng);
}

double check_flatten(Rng& rng) {
  auto layer = make_flatten();
  return layer_check(*layer, Tensor::randn({2, 3, 1, 1, 1}, rng), rng);
}

double check_linear(Rng& rng) {
  auto layer = make_linear(5, 4, rng);
  return layer_check(*layer, Tensor::randn({3, 5}, rng), rng);
}

double check_l2norm(Rng& rng) {
  auto layer = make_l2norm();
  return layer_check(*layer, signed_offset_randn({3, 6}, rng), rng);
}

double check_info_nce(Rng& rng) {
  const size_t b = 3, d = 5;
  Tensor z = random_unit_rows(b, d, rng);
  const Tensor z_key = random_unit_rows(b, d, rng);
  MoCoQueue queue(16);
  queue.enqueue(random_unit_rows(8, d, rng));
  const double tau = 0.2;
  const Tensor analytic = info_nce(z, z_key, queue, tau).grad_query;
  auto loss_fn = [&]() { return info_nce(z, z_key, queue, tau).loss; };
  return fd_check(z, analytic, loss_fn);
}

double check_imix(Rng& rng) {
  const size_t b = 3, d = 5;
  Tensor z = random_unit_rows(b, d, rng);
  const Tensor z_key = random_unit_rows(b, d, rng);
  MoCoQueue queue(16);
  queue.enqueue(random_unit_rows(4, d, rng));
  const std::vector<size_t> partner = {1, 2, 0};
  std::vector<double> lambdas(b);
  for (double& l : lambdas) l = rng.uniform(0.2, 0.8);
  const double tau = 0.2;
  const Tensor analytic = imix_loss(z, z_key, queue, tau, partner, lambdas).grad_query;
  auto loss_fn = [&]() { return imix_loss(z, z_key, queue, tau, partner, lambdas).loss; };
  return fd_check(z, analytic, loss_fn);
}

// Full composite: partial forward to block k, cutmix with a donor feature
// tensor, resume to the embedding, i-mix loss. Checks the gradients the
// training step actually uses: block-1 parameters and the clip input.
double check_cmmc_path(Rng& rng) {
  EncoderArch arch;
  arch.in_channels = 2;
  arch.frames = 4;
  arch.height = 8;
  arch.width = 8;
  arch.base_channels = 2;
  arch.embed_dim = 8;
  EncoderStack f1 = EncoderStack::make_default(arch, rng.next_u64(), "gradcheck-1");
  EncoderStack f2 = EncoderStack::make_default(arch, rng.next_u64(), "gradcheck-2");

  // Keep every pre-activation strictly positive (positive weights, positive
  // bias, positive inputs) so the finite differences never straddle a ReLU
  // kink; the kink itself is already covered by the standalone relu check.
  for (EncoderStack* enc : {&f1, &f2}) {
    const auto names = enc->parameter_names();
    auto params = enc->parameters();
    for (size_t i = 0; i < names.size(); ++i) {
      if (names[i].ends_with(".weight")) {
        for (size_t j = 0; j < params[i]->size(); ++j)
          (*params[i])[j] = 0.3 * std::abs((*params[i])[j]);
      } else {
        params[i]->fill(0.1);
      }
    }
  }

  const size_t b = 2;
  Tensor x1 = Tensor::uniform({b, 2, 4, 8, 8}, rng, 0.05, 1.0);
  const Tensor x2 = Tensor::uniform({b, 2, 4, 8, 8}, rng, 0.05, 1.0);
  const std::vector<size_t> partner = {1, 0};
  const std::vector<double> lambdas(b, 0.5);
  const size_t block_k = 2, block_l = 2;
  const size_t split = f1.block_output_layer(block_k);
  const Tensor z_key = random_unit_rows(b, arch.embed_dim, rng);
  MoCoQueue queue(8);
  queue.enqueue(random_unit_rows(3, arch.embed_dim, rng));
  const double tau = 0.2;

  // Block-2 activations are (B, 4, 2, 4, 4); a fixed interior box.
  MaskBox box;
  box.lo = {1, 0, 1, 1};
  box.hi = {3, 2, 3, 4};
  const std::array<long long, 4> src_lo = {0, 0, 0, 0};

  auto run = [&](bool cache) {
    const Tensor g1 = f1.partial_forward(x1, 0, split, cache);
    const Tensor g2 = f2.partial_forward(x2, 0, f2.block_output_layer(block_l), false);
    const MixOutcome mo = cmmc_apply(g1, g2, partner, box, src_lo);
    const Tensor z = f1.partial_forward(mo.mixed, split, f1.num_layers(), cache);
    return imix_loss(z, z_key, queue, tau, partner, lambdas);
  };

  const ContrastiveResult res = run(true);
  f1.zero_grads();
  Tensor grad_mix = f1.backward_range(res.grad_query, split, f1.num_layers());
  zero_box(grad_mix, box);
  const Tensor grad_x1 = f1.backward_range(grad_mix, 0, split);

  auto loss_fn = [&]() { return run(false).loss; };

  // Copy analytic block-1 gradients before finite differences overwrite state.
  auto params = f1.parameters();
  auto grads = f1.gradients();
  const Tensor conv1_dw = *grads[0];
  const Tensor conv1_db = *grads[1];

  double worst = fd_check(*params[0], conv1_dw, loss_fn);
  worst = std::max(worst, fd_check(*params[1], conv1_db, loss_fn));
  worst = std::max(worst, fd_check(x1, grad_x1, loss_fn));
  return worst;
}

} // namespace

std::vector<GradCheckEntry> gradcheck_all(uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckEntry> report;
  report.push_back({"conv3d", check_conv3d(rng)});
  report.push_back({"relu", check_relu(rng)});
  report.push_back({"spatial-temporal-pool", check_pool(rng)});
  report.push_back({"flatten", check_flatten(rng)});
  report.push_back({"linear", check_linear(rng)});
  report.push_back({"l2norm-head", check_l2norm(rng)});
  report.push_back({"info_nce", check_info_nce(rng)});
  report.push_back({"imix_loss", check_imix(rng)});
  report.push_back({"cmmc_backward_path", check_cmmc_path(rng)});
  return report;
}

} // namespace stcmix
