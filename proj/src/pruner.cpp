#include "prunekit/pruner.hpp"

#include <algorithm>
#include <charconv>

#include <json.hpp>

#include "prunekit/error.hpp"
#include "prunekit/groups.hpp"

namespace prunekit {

namespace {

int count_kept(const std::vector<bool>& keep) { return static_cast<int>(std::count(keep.begin(), keep.end(), true)); }

/// Keep vector per channel space; empty means keep everything.
std::vector<std::vector<bool>> space_masks(const ChannelAnalysis& analysis, const PruneMask& mask) {
  std::vector<std::vector<bool>> out(analysis.spaces.size());
  std::vector<std::string> owner(analysis.spaces.size());
  for (const auto& [id, keep] : mask) {
    const ChannelSpace* s = analysis.space_of_carrier(id);
    if (!s) fail(ErrorCode::kArgument, "mask names '" + id + "', which is not a gated module");
    if (static_cast<int>(keep.size()) != s->width) {
      fail(ErrorCode::kArgument, "mask for '" + id + "' has length " + std::to_string(keep.size()) + ", width is " +
                                     std::to_string(s->width));
    }
    auto& slot = out[static_cast<std::size_t>(s->id)];
    if (!slot.empty() && slot != keep) {
      fail(ErrorCode::kGroupConstraint, "masks of '" + owner[static_cast<std::size_t>(s->id)] + "' and '" + id +
                                            "' differ but the modules share one pruning pattern");
    }
    if (slot.empty()) {
      slot = keep;
      owner[static_cast<std::size_t>(s->id)] = id;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].empty()) continue;
    const int kept = count_kept(out[i]);
    if (kept == static_cast<int>(out[i].size())) {
      out[i].clear();
      continue;
    }
    if (!analysis.spaces[i].prunable) {
      fail(ErrorCode::kArgument, "channels of '" + owner[i] + "' are tied to the model input and cannot be pruned");
    }
    if (kept == 0) fail(ErrorCode::kFloorViolation, "mask for '" + owner[i] + "' removes every channel");
  }
  return out;
}

struct PrunePlan {
  ChannelAnalysis analysis;
  std::vector<std::vector<bool>> masks;
  ModelSpec spec;
};

PrunePlan plan(const ModelSpec& spec, const PruneMask& mask) {
  PrunePlan p{analyze_channels(spec), {}, spec};
  p.masks = space_masks(p.analysis, mask);
  auto kept_in = [&](int space, int width) {
    if (space < 0 || p.masks[static_cast<std::size_t>(space)].empty()) return width;
    return count_kept(p.masks[static_cast<std::size_t>(space)]);
  };
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerSpec& l = p.spec.layers[i];
    if (!l.inputs.empty()) l.in_channels = p.spec.layers[static_cast<std::size_t>(spec.index_of(l.inputs[0]))].out_channels;
    switch (l.kind) {
      case LayerKind::kInput:
      case LayerKind::kLinear:
        break;
      case LayerKind::kFlatten:
        l.out_channels = l.in_channels * p.analysis.repeat[i];
        break;
      default:
        l.out_channels = kept_in(p.analysis.space_of[i], l.out_channels);
        break;
    }
  }
  return p;
}

/// Keeps the indices along `axis` whose keep[index / block] is set.
Tensor slice_axis(const Tensor& t, int axis, const std::vector<bool>& keep, int block = 1) {
  if (keep.empty() || t.empty()) return t;
  Shape shape = t.shape();
  const int extent = shape[static_cast<std::size_t>(axis)];
  std::vector<int> idx;
  for (int j = 0; j < extent; ++j) {
    if (keep[static_cast<std::size_t>(j / block)]) idx.push_back(j);
  }
  std::size_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(a)]);
  for (int a = axis + 1; a < t.rank(); ++a) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(a)]);
  shape[static_cast<std::size_t>(axis)] = static_cast<int>(idx.size());
  Tensor out(shape);
  float* dst = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (int j : idx) {
      const float* src = t.ptr() + (o * static_cast<std::size_t>(extent) + static_cast<std::size_t>(j)) * inner;
      dst = std::copy(src, src + inner, dst);
    }
  }
  return out;
}

void slice_param(Parameter& p, int axis, const std::vector<bool>& keep, int block = 1) {
  if (p.empty() || keep.empty()) return;
  Parameter q(slice_axis(p.value, axis, keep, block), p.weight_decay);
  q.updatable = p.updatable;
  q.grad_observed = p.grad_observed;
  p = std::move(q);
}

}  // namespace

PruneSelection select_prune_set(const std::vector<RankCandidate>& ranking, const ModelSpec& spec, int count,
                                int min_channels, const StopPredicate& stop) {
  if (count < 1) fail(ErrorCode::kArgument, "prune count must be at least 1");
  const ChannelAnalysis analysis = analyze_channels(spec);
  std::vector<int> alive;
  for (const auto& s : analysis.spaces) alive.push_back(s.width);
  const int floor = std::max(min_channels, 1);
  PruneSelection sel;
  bool stopped = false;
  for (const auto& cand : ranking) {
    if (sel.removed == count) break;
    if (cand.space < 0 || cand.space >= static_cast<int>(alive.size())) {
      fail(ErrorCode::kState, "ranking does not match the model");
    }
    const ChannelSpace& s = analysis.spaces[static_cast<std::size_t>(cand.space)];
    if (!s.prunable || alive[static_cast<std::size_t>(cand.space)] - 1 < floor) continue;
    for (const auto& m : s.carriers) {
      auto& keep = sel.mask[m];
      if (keep.empty()) keep.assign(static_cast<std::size_t>(s.width), true);
      keep[static_cast<std::size_t>(cand.channel)] = false;
    }
    --alive[static_cast<std::size_t>(cand.space)];
    ++sel.removed;
    if (stop && stop(sel.mask)) {
      stopped = true;
      break;
    }
  }
  sel.partial = !stopped && sel.removed < count;
  return sel;
}

ModelSpec prune_spec(const ModelSpec& spec, const PruneMask& mask) {
  ModelSpec out = plan(spec, mask).spec;
  validate(out);
  return out;
}

Network apply_prune(const Network& net, const PruneMask& mask) {
  const ModelSpec& spec = net.spec();
  PrunePlan p = plan(spec, mask);
  std::vector<LayerParams> params = net.layer_params();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParams& lp = params[i];
    const int os = p.analysis.space_of[i];
    const int is = p.analysis.input_space_of[i];
    static const std::vector<bool> kAll;
    const std::vector<bool>& out_keep = os >= 0 ? p.masks[static_cast<std::size_t>(os)] : kAll;
    const std::vector<bool>& in_keep = is >= 0 ? p.masks[static_cast<std::size_t>(is)] : kAll;
    switch (l.kind) {
      case LayerKind::kConv2d:
        slice_param(lp.weight, 0, out_keep);
        slice_param(lp.weight, 1, in_keep);
        slice_param(lp.bias, 0, out_keep);
        slice_param(lp.phi, 0, out_keep);
        break;
      case LayerKind::kBatchNorm:
        slice_param(lp.gamma, 0, out_keep);
        slice_param(lp.beta, 0, out_keep);
        slice_param(lp.phi, 0, out_keep);
        lp.running_mean = slice_axis(lp.running_mean, 0, out_keep);
        lp.running_var = slice_axis(lp.running_var, 0, out_keep);
        break;
      case LayerKind::kLinear: {
        const int pred = spec.index_of(l.inputs[0]);
        slice_param(lp.weight, 1, in_keep, p.analysis.repeat[static_cast<std::size_t>(pred)]);
        break;
      }
      default:
        break;
    }
  }
  return Network(std::move(p.spec), std::move(params));
}

ModelSpec with_widths(const ModelSpec& spec, const std::map<std::string, int>& conv_widths) {
  const ChannelAnalysis analysis = analyze_channels(spec);
  ModelSpec out = spec;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (!l.inputs.empty()) l.in_channels = out.layers[static_cast<std::size_t>(out.index_of(l.inputs[0]))].out_channels;
    switch (l.kind) {
      case LayerKind::kInput:
      case LayerKind::kLinear:
        break;
      case LayerKind::kConv2d: {
        auto it = conv_widths.find(l.id);
        if (it != conv_widths.end()) l.out_channels = it->second;
        break;
      }
      case LayerKind::kFlatten:
        l.out_channels = l.in_channels * analysis.repeat[i];
        break;
      default:
        l.out_channels = l.in_channels;
        break;
    }
  }
  for (const auto& [id, w] : conv_widths) {
    if (out.index_of(id) < 0 || out.layer(id).kind != LayerKind::kConv2d) {
      fail(ErrorCode::kArgument, "'" + id + "' is not a convolution of the model");
    }
  }
  validate(out);
  return out;
}

PruneMask full_keep_mask(const ModelSpec& spec) {
  PruneMask mask;
  for (const auto& s : analyze_channels(spec).spaces) {
    for (const auto& c : s.carriers) mask[c].assign(static_cast<std::size_t>(s.width), true);
  }
  return mask;
}

CostReport cost_report(const ModelSpec& spec) {
  validate(spec);
  const std::vector<FeatureShape> shapes = infer_shapes(spec);
  CostReport r;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const FeatureShape& o = shapes[i];
    const long long elems = static_cast<long long>(o.channels) * o.height * o.width;
    LayerCost c{l.id, l.kind, l.out_channels, 0, 0};
    const long long cin = l.in_channels, cout = l.out_channels, k2 = static_cast<long long>(l.kernel) * l.kernel;
    switch (l.kind) {
      case LayerKind::kConv2d:
        c.flops = 2 * cin * cout * k2 * o.height * o.width;
        c.params = cin * cout * k2 + (l.bias ? cout : 0) + (l.gated ? cout : 0);
        break;
      case LayerKind::kBatchNorm:
        c.flops = 2 * elems;
        c.params = 2 * cout + (l.gated ? cout : 0);
        break;
      case LayerKind::kReLU:
      case LayerKind::kAdd:
        c.flops = elems;
        break;
      case LayerKind::kMaxPool:
        c.flops = k2 * elems;
        break;
      case LayerKind::kAvgPool: {
        const FeatureShape& in = shapes[static_cast<std::size_t>(spec.index_of(l.inputs[0]))];
        c.flops = static_cast<long long>(in.height) * in.width * elems;
        break;
      }
      case LayerKind::kLinear:
        c.flops = 2 * cin * cout;
        c.params = cin * cout + (l.bias ? cout : 0);
        break;
      default:
        break;
    }
    r.flops += c.flops;
    r.params += c.params;
    r.layers.push_back(std::move(c));
  }
  return r;
}

namespace {

double reduction(long long current, long long baseline) {
  return baseline > 0 ? 1.0 - static_cast<double>(current) / static_cast<double>(baseline) : 0.0;
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const LayerCost* find_layer(const CostReport& r, const std::string& id) {
  for (const auto& l : r.layers) {
    if (l.id == id) return &l;
  }
  return nullptr;
}

}  // namespace

double flops_reduction(const CostReport& current, const CostReport& baseline) {
  return reduction(current.flops, baseline.flops);
}

double params_reduction(const CostReport& current, const CostReport& baseline) {
  return reduction(current.params, baseline.params);
}

std::string cost_report_json(const CostReport& current, const CostReport& baseline) {
  nlohmann::ordered_json doc;
  doc["convention"] = "MAC = 2 FLOPs";
  doc["flops"] = current.flops;
  doc["params"] = current.params;
  doc["baseline_flops"] = baseline.flops;
  doc["baseline_params"] = baseline.params;
  doc["flops_reduction"] = flops_reduction(current, baseline);
  doc["params_reduction"] = params_reduction(current, baseline);
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (const auto& l : current.layers) {
    const LayerCost* b = find_layer(baseline, l.id);
    const int base_out = b ? b->out_channels : l.out_channels;
    layers.push_back({{"id", l.id},
                      {"kind", to_string(l.kind)},
                      {"out_channels", l.out_channels},
                      {"baseline_out_channels", base_out},
                      {"channel_reduction", reduction(l.out_channels, base_out)},
                      {"flops", l.flops},
                      {"params", l.params}});
  }
  doc["layers"] = layers;
  return doc.dump(2) + "\n";
}

std::string cost_report_csv(const CostReport& current, const CostReport& baseline) {
  std::string out = "# FLOPs count one multiply-accumulate as 2 operations\n";
  out += "id,kind,out_channels,baseline_out_channels,channel_reduction,flops,params\n";
  for (const auto& l : current.layers) {
    const LayerCost* b = find_layer(baseline, l.id);
    const int base_out = b ? b->out_channels : l.out_channels;
    out += l.id + "," + to_string(l.kind) + "," + std::to_string(l.out_channels) + "," + std::to_string(base_out) +
           "," + fmt(reduction(l.out_channels, base_out)) + "," + std::to_string(l.flops) + "," +
           std::to_string(l.params) + "\n";
  }
  out += "total,,,,," + std::to_string(current.flops) + "," + std::to_string(current.params) + "\n";
  return out;
}

}  // namespace prunekit
