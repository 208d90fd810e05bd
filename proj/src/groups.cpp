#include "prunekit/groups.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include <json.hpp>

#include "prunekit/error.hpp"

namespace prunekit {

namespace {

class UnionFind {
 public:
  int make() {
    parent_.push_back(static_cast<int>(parent_.size()));
    return parent_.back();
  }
  int find(int x) {
    while (parent_[static_cast<std::size_t>(x)] != x) {
      auto& p = parent_[static_cast<std::size_t>(x)];
      p = parent_[static_cast<std::size_t>(p)];
      x = p;
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }

 private:
  std::vector<int> parent_;
};

}  // namespace

const ChannelSpace* ChannelAnalysis::space_of_carrier(const std::string& id) const {
  for (const auto& s : spaces) {
    if (std::find(s.carriers.begin(), s.carriers.end(), id) != s.carriers.end()) return &s;
  }
  return nullptr;
}

std::string carrier_of(const ModelSpec& spec, int conv_index) {
  const std::vector<int> cons = spec.consumers(conv_index);
  if (cons.size() == 1 && spec.layers[static_cast<std::size_t>(cons[0])].kind == LayerKind::kBatchNorm) {
    return spec.layers[static_cast<std::size_t>(cons[0])].id;
  }
  return spec.layers[static_cast<std::size_t>(conv_index)].id;
}

ChannelAnalysis analyze_channels(const ModelSpec& spec) {
  validate(spec);
  const std::vector<FeatureShape> shapes = infer_shapes(spec);
  const std::size_t n = spec.layers.size();
  UnionFind uf;
  std::vector<int> raw(n, -1);
  std::vector<int> raw_in(n, -1);
  ChannelAnalysis out;
  out.repeat.assign(n, 1);
  std::vector<bool> fixed_raw;
  for (std::size_t i = 0; i < n; ++i) {
    const LayerSpec& l = spec.layers[i];
    if (!l.inputs.empty()) raw_in[i] = raw[static_cast<std::size_t>(spec.index_of(l.inputs[0]))];
    switch (l.kind) {
      case LayerKind::kInput:
        raw[i] = uf.make();
        fixed_raw.push_back(true);
        break;
      case LayerKind::kConv2d:
        raw[i] = uf.make();
        fixed_raw.push_back(false);
        break;
      case LayerKind::kLinear:
        raw[i] = -1;
        break;
      case LayerKind::kAdd:
        raw[i] = raw_in[i];
        uf.unite(raw_in[i], raw[static_cast<std::size_t>(spec.index_of(l.inputs[1]))]);
        break;
      case LayerKind::kFlatten: {
        const FeatureShape& s = shapes[static_cast<std::size_t>(spec.index_of(l.inputs[0]))];
        raw[i] = raw_in[i];
        out.repeat[i] = s.height * s.width;
        break;
      }
      default:
        raw[i] = raw_in[i];
        break;
    }
  }
  // Only spaces reachable from the model input are pinned.
  std::map<int, int> dense;
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] < 0) continue;
    const int root = uf.find(raw[i]);
    if (!dense.count(root)) {
      const int id = static_cast<int>(out.spaces.size());
      dense.emplace(root, id);
      ChannelSpace s;
      s.id = id;
      s.width = spec.layers[i].kind == LayerKind::kFlatten ? spec.layers[i].in_channels : spec.layers[i].out_channels;
      s.prunable = true;
      out.spaces.push_back(s);
    }
  }
  for (std::size_t r = 0; r < fixed_raw.size(); ++r) {
    if (fixed_raw[r]) out.spaces[static_cast<std::size_t>(dense.at(uf.find(static_cast<int>(r))))].prunable = false;
  }
  out.space_of.assign(n, -1);
  out.input_space_of.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (raw[i] >= 0) out.space_of[i] = dense.at(uf.find(raw[i]));
    if (raw_in[i] >= 0) out.input_space_of[i] = dense.at(uf.find(raw_in[i]));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (spec.layers[i].kind != LayerKind::kConv2d) continue;
    ChannelSpace& s = out.spaces[static_cast<std::size_t>(out.space_of[i])];
    s.producers.push_back(spec.layers[i].id);
    s.carriers.push_back(carrier_of(spec, static_cast<int>(i)));
  }
  return out;
}

std::vector<PruneGroup> discover_groups(const ModelSpec& spec) {
  const ChannelAnalysis analysis = analyze_channels(spec);
  std::vector<PruneGroup> groups;
  for (const auto& s : analysis.spaces) {
    if (s.carriers.size() < 2) continue;
    groups.push_back({static_cast<int>(groups.size()), s.carriers, s.width});
  }
  return groups;
}

GroupMaskCheck validate_group_mask(const PruneGroup& group, const std::vector<bool>& keep, int min_channels) {
  if (static_cast<int>(keep.size()) != group.width) {
    fail(ErrorCode::kArgument, "mask length " + std::to_string(keep.size()) + " != width " +
                                   std::to_string(group.width) + " of group " + std::to_string(group.id));
  }
  const int kept = static_cast<int>(std::count(keep.begin(), keep.end(), true));
  if (kept < min_channels || kept == 0) {
    fail(ErrorCode::kFloorViolation, "group " + std::to_string(group.id) + " would keep " + std::to_string(kept) +
                                         " channels, floor is " + std::to_string(min_channels));
  }
  return {kept, group.width - kept};
}

std::string groups_to_json(const std::vector<PruneGroup>& groups) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& g : groups) {
    arr.push_back({{"id", g.id}, {"width", g.width}, {"members", g.members}});
  }
  nlohmann::ordered_json doc;
  doc["groups"] = arr;
  return doc.dump(2) + "\n";
}

}  // namespace prunekit
