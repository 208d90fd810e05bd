#pragma once

#include <cstdint>
#include <vector>

#include "prunekit/gates.hpp"
#include "prunekit/network.hpp"

namespace fixtures {

using namespace prunekit;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline std::vector<int> random_labels(int n, int classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return out;
}

/// Moves every BN away from the identity (gamma, beta, running stats) so that
/// equivalence checks exercise all terms.
inline void perturb_batch_norms(Network& net, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < net.spec().layers.size(); ++i) {
    if (net.spec().layers[i].kind != LayerKind::kBatchNorm) continue;
    LayerParams& p = net.layer_params()[i];
    for (auto& v : p.gamma.value.values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
    for (auto& v : p.beta.value.values()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    for (auto& v : p.running_mean.values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
    for (auto& v : p.running_var.values()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  }
}

/// conv(3->4) GBN ReLU conv(4->6) GBN ReLU avgpool flatten linear(6->3) on
/// 3x8x8 inputs, with non-trivial gates and shifts.
inline Network toy_gbn_net(std::uint64_t seed) {
  ModelSpec spec = build_plain_cnn({4, 6}, {3, 8, 8}, 3);
  Network net = Network::initialize(spec, seed);
  perturb_batch_norms(net, seed + 1);
  Network gated = decorate_model(net, GateMode::kGbn);
  Rng rng(seed + 2);
  for (auto& p : gated.layer_params()) {
    for (auto& v : p.phi.value.values()) v = static_cast<float>(rng.uniform(0.5, 1.5));
  }
  return gated;
}

inline ModelSpec small_plain_spec() { return build_plain_cnn({12, 12, 16, 16}, {3, 16, 16}, 4); }
inline ModelSpec small_resnet_spec() { return build_mini_resnet({12, 16}, {2, 2}, {3, 16, 16}, 4); }

}  // namespace fixtures
