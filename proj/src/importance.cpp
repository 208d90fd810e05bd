#include "prunekit/importance.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include "prunekit/error.hpp"
#include "prunekit/groups.hpp"

namespace prunekit {

const char* to_string(Ranker ranker) noexcept { return ranker == Ranker::kTaylor ? "taylor" : "magnitude"; }

Ranker parse_ranker(std::string_view text) {
  if (text == "taylor") return Ranker::kTaylor;
  if (text == "magnitude") return Ranker::kMagnitude;
  fail(ErrorCode::kArgument, "unknown ranker '" + std::string(text) + "'");
}

ImportanceTable ImportanceTable::for_model(const Network& net, Ranker ranker) {
  ImportanceTable t;
  t.ranker_ = ranker;
  const ModelSpec& spec = net.spec();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].gated) continue;
    const int width = spec.layers[i].out_channels;
    for (int c = 0; c < width; ++c) t.entries_.push_back({spec.layers[i].id, c, 0.0});
  }
  return t;
}

void ImportanceTable::accumulate(const Network& net, int batch_size) {
  const ModelSpec& spec = net.spec();
  std::size_t e = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!spec.layers[i].gated) continue;
    const Parameter& phi = net.layer_params()[i].phi;
    if (phi.grad.shape() != phi.value.shape()) {
      fail(ErrorCode::kState, "no gate gradient for '" + spec.layers[i].id + "'");
    }
    for (std::size_t c = 0; c < phi.value.numel(); ++c, ++e) {
      if (e >= entries_.size() || entries_[e].module != spec.layers[i].id ||
          entries_[e].channel != static_cast<int>(c)) {
        fail(ErrorCode::kState, "importance table does not match gates of '" + spec.layers[i].id + "'");
      }
      entries_[e].theta += std::fabs(static_cast<double>(phi.value[c]) * static_cast<double>(phi.grad[c]));
    }
  }
  if (e != entries_.size()) fail(ErrorCode::kState, "importance table has entries for missing gates");
  ++batches_;
  batch_size_ = batch_size;
}

void ImportanceTable::reset() {
  for (auto& e : entries_) e.theta = 0.0;
  batches_ = 0;
}

double ImportanceTable::theta(std::string_view module, int channel) const {
  for (const auto& e : entries_) {
    if (e.module == module && e.channel == channel) return e.theta;
  }
  fail(ErrorCode::kArgument, "no importance entry for " + std::string(module) + "[" + std::to_string(channel) + "]");
}

ImportanceTable magnitude_scores(const Network& net) {
  ImportanceTable t = ImportanceTable::for_model(net, Ranker::kMagnitude);
  for (auto& e : t.entries()) {
    e.theta = std::fabs(static_cast<double>(net.params_of(e.module).phi.value[static_cast<std::size_t>(e.channel)]));
  }
  return t;
}

std::vector<RankCandidate> global_rank(const ImportanceTable& table, const ModelSpec& spec, int min_channels) {
  const ChannelAnalysis analysis = analyze_channels(spec);
  std::map<std::string, std::vector<double>> scores;
  for (const auto& e : table.entries()) {
    auto& v = scores[e.module];
    if (e.channel != static_cast<int>(v.size())) fail(ErrorCode::kState, "importance table entries out of order");
    v.push_back(e.theta);
  }
  std::vector<RankCandidate> out;
  std::size_t seen = 0;
  for (const auto& s : analysis.spaces) {
    if (s.carriers.empty()) continue;
    for (const auto& m : s.carriers) {
      auto it = scores.find(m);
      if (it == scores.end()) fail(ErrorCode::kState, "importance table has no scores for '" + m + "'");
      if (static_cast<int>(it->second.size()) != s.width) {
        fail(ErrorCode::kState, "importance table width for '" + m + "' does not match the model");
      }
      ++seen;
    }
    if (!s.prunable || s.width <= min_channels) continue;
    const std::string rep = *std::min_element(s.carriers.begin(), s.carriers.end());
    for (int c = 0; c < s.width; ++c) {
      double sum = 0.0;
      for (const auto& m : s.carriers) sum += scores.at(m)[static_cast<std::size_t>(c)];
      out.push_back({sum, rep, c, s.id, s.carriers});
    }
  }
  if (seen != scores.size()) fail(ErrorCode::kState, "importance table has modules the model does not gate");
  std::sort(out.begin(), out.end(), [](const RankCandidate& a, const RankCandidate& b) {
    return std::tie(a.score, a.module, a.channel) < std::tie(b.score, b.module, b.channel);
  });
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string importance_csv(const ImportanceTable& table, const ModelSpec& spec) {
  const std::vector<RankCandidate> ranking = global_rank(table, spec, 0);
  std::map<std::pair<std::string, int>, std::size_t> rank;
  for (std::size_t r = 0; r < ranking.size(); ++r) {
    for (const auto& m : ranking[r].members) rank[{m, ranking[r].channel}] = r;
  }
  std::string out = "module_id,channel,theta,rank\n";
  for (const auto& e : table.entries()) {
    auto it = rank.find({e.module, e.channel});
    out += e.module + "," + std::to_string(e.channel) + "," + format_double(e.theta) + "," +
           (it == rank.end() ? std::string("-1") : std::to_string(it->second)) + "\n";
  }
  return out;
}

std::vector<TaylorCheck> taylor_estimate_vs_actual(Network& net, std::span<const LabeledBatch> batches) {
  std::size_t gates = 0;
  for (const auto& p : net.layer_params()) gates += p.phi.value.numel();
  if (gates == 0) fail(ErrorCode::kState, "model has no gates");
  if (gates > static_cast<std::size_t>(kBruteForceGateLimit)) {
    fail(ErrorCode::kSize, "brute-force check limited to " + std::to_string(kBruteForceGateLimit) +
                               " gate channels, model has " + std::to_string(gates));
  }
  if (batches.empty()) fail(ErrorCode::kArgument, "brute-force check needs at least one batch");
  // Mean of the per-batch losses, so every batch weighs the same in both terms.
  auto total_loss = [&] {
    double sum = 0.0;
    for (const auto& b : batches) sum += net.loss(b.images, b.labels, kTrainNoUpdate);
    return sum / static_cast<double>(batches.size());
  };
  ImportanceTable table = ImportanceTable::for_model(net);
  for (const auto& b : batches) {
    net.backward(net.forward(b.images, b.labels, kTrainNoUpdate));
    table.accumulate(net, static_cast<int>(b.labels.size()));
  }
  const double base = total_loss();
  std::vector<TaylorCheck> out;
  for (const auto& e : table.entries()) {
    float& phi = net.params_of(e.module).phi.value[static_cast<std::size_t>(e.channel)];
    const float saved = phi;
    phi = 0.0f;
    const double zeroed = total_loss();
    phi = saved;
    out.push_back({e.module, e.channel, e.theta, std::fabs(base - zeroed)});
  }
  return out;
}

std::vector<TaylorCheck> taylor_estimate_vs_actual(Network& net, const Tensor& batch, std::span<const int> labels) {
  const LabeledBatch one{batch, std::vector<int>(labels.begin(), labels.end())};
  return taylor_estimate_vs_actual(net, std::span<const LabeledBatch>(&one, 1));
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) fail(ErrorCode::kArgument, "spearman needs two equal-length samples");
  const std::vector<double> ra = average_ranks(a);
  const std::vector<double> rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace prunekit
