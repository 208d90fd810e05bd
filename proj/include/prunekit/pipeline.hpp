#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "prunekit/dataset.hpp"
#include "prunekit/gates.hpp"
#include "prunekit/importance.hpp"
#include "prunekit/pruner.hpp"

namespace prunekit {

enum class PipelineMode { kOneShot, kTickOnly, kTickTock };

const char* to_string(PipelineMode mode) noexcept;
PipelineMode parse_pipeline_mode(std::string_view text);

struct PipelineConfig {
  PipelineMode mode = PipelineMode::kTickTock;
  GateMode gate_mode = GateMode::kGbn;
  Ranker ranker = Ranker::kTaylor;
  /// Each tick removes ceil(fraction * alive candidates).
  double tick_prune_fraction = 0.01;
  int ticks_per_tock = 10;
  int tock_epochs = 10;
  double lambda = 1e-3;
  int finetune_epochs = 40;
  /// Stop once FLOPs <= flops_target * baseline FLOPs.
  double flops_target = 0.6;
  /// 0 uses the full training split, otherwise the first N per class.
  int subset_per_class = 0;
  double tick_lr = 1e-3;
  double lr_low = 1e-3;
  double lr_high = 1e-2;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 64;
  int min_channels = kDefaultMinChannels;
  /// Whether beta trains during ticks (gamma never does).
  bool tick_train_beta = false;
  /// Also train a freshly initialized copy of the pruned architecture.
  bool scratch = false;
  int max_ticks = 10000;
  std::uint64_t seed = 1;

  /// Throws kConfig naming the first out-of-range field.
  void validate() const;
};

struct RunRecord {
  std::string phase;  // rank, prune, tick, tock, finetune
  int index = 0;
  int epochs = 0;
  double loss = 0.0;
  double test_accuracy = 0.0;
  int alive = 0;
  int removed = 0;
  long long flops = 0;
  long long params = 0;
  /// Tock only: mean |phi| before and after.
  double mean_abs_phi_before = 0.0;
  double mean_abs_phi_after = 0.0;
  double elapsed_s = 0.0;
};

struct RunLog {
  std::vector<RunRecord> records;

  std::vector<std::string> phases() const;
  std::string to_jsonl() const;
  static RunLog from_jsonl(std::string_view text);
};

/// Mutable state of one pruning run over a decorated model.
struct PipelineState {
  PipelineConfig config;
  const DatasetBundle* data = nullptr;
  Network net;
  CostReport baseline;
  RunLog log;
  /// Scores from the most recent tick or rank pass.
  ImportanceTable table;
  /// importance_csv of every ranking pass, in order.
  std::vector<std::string> importance_exports;
  int ticks = 0;
  int tocks = 0;
  bool partial = false;
  std::string note;
  std::chrono::steady_clock::time_point start;

  /// Decorates `baseline` and records its cost.
  PipelineState(const PipelineConfig& config, const DatasetBundle& data, const Network& baseline);

  bool target_reached() const;
  /// Gated channel candidates still prunable (ignoring floors).
  int alive() const;
};

/// One epoch on the configured subset with only gates and the classifier
/// updatable, accumulating importance, then one prune step. Returns the number
/// of removed candidates.
int tick(PipelineState& state);
/// tock_epochs of 1-cycle training on the full split with the gate L1 term.
void tock(PipelineState& state);
/// One accumulation pass without updates, then a single prune to the target.
void one_shot(PipelineState& state);
void finetune(PipelineState& state);

struct PipelineResult {
  Network merged;
  RunLog log;
  CostReport baseline_cost;
  CostReport final_cost;
  double baseline_accuracy = 0.0;
  double gated_accuracy = 0.0;
  double final_accuracy = 0.0;
  /// Max |logit difference| between the gated model and its merge.
  double merge_max_abs_diff = 0.0;
  std::optional<double> scratch_accuracy;
  std::vector<std::string> importance_exports;
  bool partial = false;
  std::string note;
};

/// decorate -> mode loop -> fine-tune -> merge.
PipelineResult run(const PipelineConfig& config, const Network& baseline, const DatasetBundle& data);

/// Cost with gate entries left out, comparable to an undecorated model.
CostReport vanilla_cost(const ModelSpec& spec);

/// mode,seed,baseline_accuracy,flops_reduction,params_reduction,finetune_accuracy,scratch_accuracy,status
std::string summary_csv_header();
std::string summary_csv_row(const PipelineConfig& config, const PipelineResult& result);

}  // namespace prunekit
