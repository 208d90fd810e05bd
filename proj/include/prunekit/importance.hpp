#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prunekit/network.hpp"

namespace prunekit {

enum class Ranker { kTaylor, kMagnitude };

const char* to_string(Ranker ranker) noexcept;
Ranker parse_ranker(std::string_view text);

struct ImportanceEntry {
  std::string module;
  int channel = 0;
  double theta = 0.0;
};

/// Per-channel scores of every gated module, in layer then channel order.
class ImportanceTable {
 public:
  ImportanceTable() = default;

  /// Zero scores for every gate channel of `net`.
  static ImportanceTable for_model(const Network& net, Ranker ranker = Ranker::kTaylor);

  /// Theta += |phi * dL/dphi| for every gate channel. Call after backward.
  void accumulate(const Network& net, int batch_size);
  void reset();

  const std::vector<ImportanceEntry>& entries() const noexcept { return entries_; }
  std::vector<ImportanceEntry>& entries() noexcept { return entries_; }
  double theta(std::string_view module, int channel) const;
  Ranker ranker() const noexcept { return ranker_; }
  int batches() const noexcept { return batches_; }
  int batch_size() const noexcept { return batch_size_; }

 private:
  std::vector<ImportanceEntry> entries_;
  Ranker ranker_ = Ranker::kTaylor;
  int batches_ = 0;
  int batch_size_ = 0;
};

/// Theta = |phi|.
ImportanceTable magnitude_scores(const Network& net);

/// One prunable channel index: a single gated channel, or the same channel
/// of every member of a group with the summed score.
struct RankCandidate {
  double score = 0.0;
  /// Smallest member id; breaks score ties before `channel`.
  std::string module;
  int channel = 0;
  int space = 0;
  std::vector<std::string> members;
};

/// Candidates sorted ascending by (score, module, channel). Channels of a
/// layer or group at or below `min_channels` alive channels are omitted.
std::vector<RankCandidate> global_rank(const ImportanceTable& table, const ModelSpec& spec, int min_channels);

/// CSV with header module_id,channel,theta,rank. Rank is the 0-based position
/// of the channel's candidate in the unfloored global ranking.
std::string importance_csv(const ImportanceTable& table, const ModelSpec& spec);

struct TaylorCheck {
  std::string module;
  int channel = 0;
  double theta = 0.0;
  double actual = 0.0;
};

struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;
};

inline constexpr int kBruteForceGateLimit = 64;

/// Theta accumulated over `batches` (one forward/backward each) next to the
/// exact |L(phi) - L(phi with phi_c = 0)| for every gate channel, where L is
/// the mean loss over the same batches. Batch statistics are used and running
/// statistics stay untouched; every phi is restored bit-exactly. Refuses
/// models with more than kBruteForceGateLimit gates.
std::vector<TaylorCheck> taylor_estimate_vs_actual(Network& net, std::span<const LabeledBatch> batches);
std::vector<TaylorCheck> taylor_estimate_vs_actual(Network& net, const Tensor& batch, std::span<const int> labels);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace prunekit
