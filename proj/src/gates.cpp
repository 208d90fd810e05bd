#include "prunekit/gates.hpp"

#include <algorithm>
#include <cmath>

#include "prunekit/error.hpp"

namespace prunekit {

namespace {

void require_kind(const LayerSpec& spec, LayerKind kind, const char* op) {
  if (spec.kind != kind) {
    fail(ErrorCode::kArgument, std::string(op) + " applied to layer '" + spec.id + "' of kind " + to_string(spec.kind));
  }
}

std::string join(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) out += (out.empty() ? "" : ", ") + id;
  return out;
}

}  // namespace

LayerParams bn_to_gbn(const LayerSpec& spec, const LayerParams& bn) {
  require_kind(spec, LayerKind::kBatchNorm, "bn_to_gbn");
  if (!bn.phi.empty()) fail(ErrorCode::kArgument, "layer '" + spec.id + "' is already gated");
  const std::size_t c = bn.gamma.value.numel();
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < c; ++i) {
    if (!(std::fabs(bn.gamma.value[i]) > kGammaFloor)) bad.push_back(std::to_string(i));
  }
  if (!bad.empty()) fail(ErrorCode::kDegenerateGamma, "layer '" + spec.id + "' channels " + join(bad));
  LayerParams out = bn;
  out.phi = Parameter(bn.gamma.value, false);
  for (std::size_t i = 0; i < c; ++i) {
    out.beta.value[i] = bn.beta.value[i] / bn.gamma.value[i];
    out.gamma.value[i] = 1.0f;
  }
  out.gamma.updatable = false;
  return out;
}

LayerParams gbn_to_bn(const LayerSpec& spec, const LayerParams& gbn) {
  require_kind(spec, LayerKind::kBatchNorm, "gbn_to_bn");
  if (gbn.phi.empty()) fail(ErrorCode::kArgument, "layer '" + spec.id + "' has no gate");
  LayerParams out = gbn;
  for (std::size_t i = 0; i < gbn.phi.value.numel(); ++i) {
    const float phi = gbn.phi.value[i];
    out.gamma.value[i] = phi * gbn.gamma.value[i];
    out.beta.value[i] = gbn.beta.value[i] * phi;
  }
  out.phi = Parameter();
  out.gamma.updatable = true;
  out.gamma.grad_observed = false;
  return out;
}

LayerParams conv_to_gated(const LayerSpec& spec, const LayerParams& conv) {
  require_kind(spec, LayerKind::kConv2d, "conv_to_gated");
  if (!conv.phi.empty()) fail(ErrorCode::kArgument, "layer '" + spec.id + "' is already gated");
  const Tensor& w = conv.weight.value;
  const int filters = w.dim(0);
  const std::size_t per = w.numel() / static_cast<std::size_t>(filters);
  const double ck2 = static_cast<double>(w.dim(1)) * w.dim(2) * w.dim(3);
  LayerParams out = conv;
  Tensor phi({filters});
  std::vector<std::string> bad;
  for (int f = 0; f < filters; ++f) {
    double sq = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double v = w[static_cast<std::size_t>(f) * per + i];
      sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) {
      bad.push_back(std::to_string(f));
      continue;
    }
    const auto g = static_cast<float>(norm / ck2);
    phi[static_cast<std::size_t>(f)] = g;
    for (std::size_t i = 0; i < per; ++i) out.weight.value[static_cast<std::size_t>(f) * per + i] /= g;
    if (!out.bias.empty()) out.bias.value[static_cast<std::size_t>(f)] /= g;
  }
  if (!bad.empty()) fail(ErrorCode::kDegenerateFilter, "layer '" + spec.id + "' zero-norm filters " + join(bad));
  out.phi = Parameter(std::move(phi), false);
  return out;
}

LayerParams gated_to_conv(const LayerSpec& spec, const LayerParams& gated) {
  require_kind(spec, LayerKind::kConv2d, "gated_to_conv");
  if (gated.phi.empty()) fail(ErrorCode::kArgument, "layer '" + spec.id + "' has no gate");
  LayerParams out = gated;
  const int filters = gated.weight.value.dim(0);
  const std::size_t per = gated.weight.value.numel() / static_cast<std::size_t>(filters);
  for (int f = 0; f < filters; ++f) {
    const float g = gated.phi.value[static_cast<std::size_t>(f)];
    for (std::size_t i = 0; i < per; ++i) out.weight.value[static_cast<std::size_t>(f) * per + i] *= g;
    if (!out.bias.empty()) out.bias.value[static_cast<std::size_t>(f)] *= g;
  }
  out.phi = Parameter();
  return out;
}

const char* to_string(GateMode mode) noexcept { return mode == GateMode::kGbn ? "gbn" : "gated-conv"; }

GateMode parse_gate_mode(std::string_view text) {
  if (text == "gbn") return GateMode::kGbn;
  if (text == "gated-conv") return GateMode::kGatedConv;
  fail(ErrorCode::kArgument, "unknown gate mode '" + std::string(text) + "'");
}

Network decorate_model(const Network& net, GateMode mode, DecorationManifest* manifest) {
  const ModelSpec& spec = net.spec();
  if (!gated_modules(spec).empty()) fail(ErrorCode::kStructural, "model is already decorated");
  ModelSpec out_spec = spec;
  std::vector<LayerParams> params = net.layer_params();
  std::vector<std::string> offending;
  std::vector<std::string> gated;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::kConv2d) continue;
    const std::vector<int> cons = spec.consumers(static_cast<int>(i));
    const bool feeds_bn = cons.size() == 1 && spec.layers[static_cast<std::size_t>(cons[0])].kind == LayerKind::kBatchNorm;
    const bool any_bn = std::any_of(cons.begin(), cons.end(), [&](int c) {
      return spec.layers[static_cast<std::size_t>(c)].kind == LayerKind::kBatchNorm;
    });
    if (mode == GateMode::kGbn) {
      if (!feeds_bn) {
        offending.push_back(l.id);
        continue;
      }
      const auto b = static_cast<std::size_t>(cons[0]);
      params[b] = bn_to_gbn(spec.layers[b], params[b]);
      out_spec.layers[b].gated = true;
      gated.push_back(spec.layers[b].id);
    } else {
      if (any_bn) {
        offending.push_back(l.id);
        continue;
      }
      params[i] = conv_to_gated(l, params[i]);
      out_spec.layers[i].gated = true;
      gated.push_back(l.id);
    }
  }
  if (!offending.empty()) {
    fail(ErrorCode::kStructural, std::string("cannot decorate in ") + to_string(mode) + " mode; offending convolutions: " +
                                     join(offending));
  }
  if (gated.empty()) fail(ErrorCode::kStructural, "model has no convolutions to decorate");
  if (manifest) *manifest = {mode, gated};
  return Network(std::move(out_spec), std::move(params));
}

Network undecorate_model(const Network& net) {
  ModelSpec spec = net.spec();
  std::vector<LayerParams> params = net.layer_params();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerSpec& l = spec.layers[i];
    if (!l.gated) continue;
    params[i] = l.kind == LayerKind::kBatchNorm ? gbn_to_bn(l, params[i]) : gated_to_conv(l, params[i]);
    l.gated = false;
  }
  for (auto& p : params) {
    for (Parameter* q : {&p.weight, &p.bias, &p.gamma, &p.beta}) {
      q->updatable = true;
      q->grad_observed = false;
    }
  }
  return Network(std::move(spec), std::move(params));
}

std::vector<std::string> gated_modules(const ModelSpec& spec) {
  std::vector<std::string> out;
  for (const auto& l : spec.layers) {
    if (l.gated) out.push_back(l.id);
  }
  return out;
}

std::optional<GateMode> decoration_mode(const ModelSpec& spec) {
  for (const auto& l : spec.layers) {
    if (l.gated) return l.kind == LayerKind::kBatchNorm ? GateMode::kGbn : GateMode::kGatedConv;
  }
  return std::nullopt;
}

double add_gate_l1(Network& net, double lambda) {
  double penalty = 0.0;
  const auto lam = static_cast<float>(lambda);
  for (auto& p : net.layer_params()) {
    if (p.phi.empty()) continue;
    if (p.phi.grad.shape() != p.phi.value.shape()) p.phi.zero_grad();
    for (std::size_t i = 0; i < p.phi.value.numel(); ++i) {
      const float v = p.phi.value[i];
      penalty += std::fabs(static_cast<double>(v));
      p.phi.grad[i] += v > 0.0f ? lam : (v < 0.0f ? -lam : 0.0f);
    }
  }
  return lambda * penalty;
}

double mean_abs_gate(const Network& net) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : net.layer_params()) {
    for (std::size_t i = 0; i < p.phi.value.numel(); ++i) sum += std::fabs(static_cast<double>(p.phi.value[i]));
    n += p.phi.value.numel();
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace prunekit
