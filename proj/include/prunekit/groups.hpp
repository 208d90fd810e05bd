#pragma once

#include <string>
#include <vector>

#include "prunekit/model_spec.hpp"

namespace prunekit {

/// A set of output channels that must be pruned together: every layer whose
/// output lies in the space shares one channel index range.
struct ChannelSpace {
  int id = 0;
  int width = 0;
  /// Convolutions writing into the space, in layer order.
  std::vector<std::string> producers;
  /// Gate-carrying modules of the space: the BN directly after a producer, or
  /// the producer itself when it has no such BN.
  std::vector<std::string> carriers;
  /// False when the space touches the model input or the class outputs.
  bool prunable = false;
};

struct ChannelAnalysis {
  std::vector<ChannelSpace> spaces;
  /// Space of each layer's output (-1 for the linear classifier).
  std::vector<int> space_of;
  /// Space of each layer's first input (-1 for the input node).
  std::vector<int> input_space_of;
  /// Features per channel of a flatten output (1 otherwise).
  std::vector<int> repeat;

  const ChannelSpace* space_of_carrier(const std::string& id) const;
};

/// Union-find over channel identity: channel-preserving layers (BN, ReLU,
/// pooling, flatten) keep their input's space, add nodes merge the spaces of
/// both operands, convolutions and linear layers open a new one.
ChannelAnalysis analyze_channels(const ModelSpec& spec);

/// The gated module of a convolution at `conv_index` (see ChannelSpace::carriers).
std::string carrier_of(const ModelSpec& spec, int conv_index);

struct PruneGroup {
  int id = 0;
  std::vector<std::string> members;
  int width = 0;

  friend bool operator==(const PruneGroup&, const PruneGroup&) = default;
};

/// Groups of two or more gated modules coupled through pure shortcuts.
/// Depends only on topology; singleton spaces yield no group.
std::vector<PruneGroup> discover_groups(const ModelSpec& spec);

struct GroupMaskCheck {
  int kept = 0;
  int removed = 0;
};

/// Checks a shared keep-mask for `group`: length must equal the width and at
/// least `min_channels` channels must survive.
GroupMaskCheck validate_group_mask(const PruneGroup& group, const std::vector<bool>& keep, int min_channels);

std::string groups_to_json(const std::vector<PruneGroup>& groups);

}  // namespace prunekit
