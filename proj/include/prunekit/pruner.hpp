#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "prunekit/importance.hpp"
#include "prunekit/network.hpp"

namespace prunekit {

inline constexpr int kDefaultMinChannels = 9;

/// Gated (carrier) module id -> keep flag per output channel. Members of a
/// group must carry identical vectors; absent modules keep every channel.
using PruneMask = std::map<std::string, std::vector<bool>>;

struct CostReport;

/// Called after each selected candidate with the tentative mask; returning
/// true ends selection early.
using StopPredicate = std::function<bool(const PruneMask&)>;

struct PruneSelection {
  PruneMask mask;
  int removed = 0;
  /// Fewer than `count` legal candidates were available.
  bool partial = false;
};

/// Marks the `count` lowest-ranked candidates for removal, skipping any whose
/// layer or group would drop below `min_channels`.
PruneSelection select_prune_set(const std::vector<RankCandidate>& ranking, const ModelSpec& spec, int count,
                                int min_channels, const StopPredicate& stop = {});

/// The pruned spec alone (shapes only). Throws kGroupConstraint on group
/// disagreement; the input spec is never modified.
ModelSpec prune_spec(const ModelSpec& spec, const PruneMask& mask);

/// Rebuilds the network with removed filters, their per-channel parameters,
/// statistics, gates, and the matching consumer input slices deleted.
/// Atomic: on error `net` is untouched and nothing is returned.
Network apply_prune(const Network& net, const PruneMask& mask);

/// `spec` with the listed convolutions set to new output widths and every
/// downstream channel count recomputed.
ModelSpec with_widths(const ModelSpec& spec, const std::map<std::string, int>& conv_widths);

/// Every gated module with all channels kept.
PruneMask full_keep_mask(const ModelSpec& spec);

struct LayerCost {
  std::string id;
  LayerKind kind = LayerKind::kInput;
  int out_channels = 0;
  long long flops = 0;
  long long params = 0;
};

/// FLOPs count a multiply-accumulate as 2 operations:
///   conv 2*cin*cout*k^2*Hout*Wout, linear 2*in*out, BN 2*elements,
///   ReLU and add 1*elements, max pool k^2*output elements, global average
///   pool H*W*output elements. Params count every stored weight, bias,
///   gamma, beta, and gate entry (running statistics excluded).
struct CostReport {
  std::vector<LayerCost> layers;
  long long flops = 0;
  long long params = 0;
};

CostReport cost_report(const ModelSpec& spec);

/// 1 - current/baseline, per total.
double flops_reduction(const CostReport& current, const CostReport& baseline);
double params_reduction(const CostReport& current, const CostReport& baseline);

/// Report documents with per-layer rows. The baseline supplies the reduction
/// columns; layers absent from the baseline report 0.
std::string cost_report_json(const CostReport& current, const CostReport& baseline);
std::string cost_report_csv(const CostReport& current, const CostReport& baseline);

}  // namespace prunekit
