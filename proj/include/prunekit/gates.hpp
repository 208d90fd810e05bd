#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prunekit/network.hpp"

namespace prunekit {

/// |gamma| at or below this makes the BN -> GBN transform undefined.
inline constexpr float kGammaFloor = 1e-8f;

// Module-level transforms. Each preserves the module's input->output function.

/// phi := gamma, beta := beta / gamma, gamma := 1; gamma becomes non-updatable.
LayerParams bn_to_gbn(const LayerSpec& spec, const LayerParams& bn);
/// gamma := phi * gamma, beta := beta * phi; the gate is removed.
LayerParams gbn_to_bn(const LayerSpec& spec, const LayerParams& gbn);
/// Per filter phi := ||W||_F / (c k^2), W := W / phi (bias scales alongside).
LayerParams conv_to_gated(const LayerSpec& spec, const LayerParams& conv);
/// W := phi * W (and bias := phi * bias); the gate is removed.
LayerParams gated_to_conv(const LayerSpec& spec, const LayerParams& gated);

enum class GateMode { kGbn, kGatedConv };

const char* to_string(GateMode mode) noexcept;
GateMode parse_gate_mode(std::string_view text);

/// Which modules were gated, so the model can be restored afterwards.
struct DecorationManifest {
  GateMode mode = GateMode::kGbn;
  std::vector<std::string> gated;
};

/// Converts every eligible module: in kGbn mode every BN that directly
/// follows a convolution, in kGatedConv mode every convolution. Throws a
/// structural error listing the offending layers when the topology does not
/// fit the mode.
Network decorate_model(const Network& net, GateMode mode, DecorationManifest* manifest = nullptr);

/// Merges every gate back into its module; the result has no gated layers.
Network undecorate_model(const Network& net);

/// Ids of gated layers in layer order.
std::vector<std::string> gated_modules(const ModelSpec& spec);
std::optional<GateMode> decoration_mode(const ModelSpec& spec);

/// Adds lambda * sign(phi) (0 at phi == 0) to every gate gradient and
/// returns the penalty value lambda * sum |phi|.
double add_gate_l1(Network& net, double lambda);

/// Mean |phi| over all gate entries (0 if there are none).
double mean_abs_gate(const Network& net);

}  // namespace prunekit
