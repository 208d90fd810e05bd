#include "prunekit/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "prunekit/error.hpp"
#include "prunekit/groups.hpp"
#include "prunekit/train.hpp"

namespace prunekit {

const char* to_string(PipelineMode mode) noexcept {
  switch (mode) {
    case PipelineMode::kOneShot:
      return "one-shot";
    case PipelineMode::kTickOnly:
      return "tick-only";
    case PipelineMode::kTickTock:
      return "tick-tock";
  }
  return "?";
}

PipelineMode parse_pipeline_mode(std::string_view text) {
  if (text == "one-shot") return PipelineMode::kOneShot;
  if (text == "tick-only") return PipelineMode::kTickOnly;
  if (text == "tick-tock") return PipelineMode::kTickTock;
  fail(ErrorCode::kConfig, "unknown mode '" + std::string(text) + "' (one-shot, tick-only, tick-tock)");
}

void PipelineConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) { fail(ErrorCode::kConfig, field + " " + why); };
  if (!(tick_prune_fraction > 0.0 && tick_prune_fraction < 1.0)) bad("tick_prune_fraction", "must be in (0, 1)");
  if (ticks_per_tock < 1) bad("ticks_per_tock", "must be >= 1");
  if (!(flops_target > 0.0 && flops_target < 1.0)) bad("flops_target", "must be in (0, 1)");
  if (tock_epochs < 0) bad("tock_epochs", "must be >= 0");
  if (finetune_epochs < 0) bad("finetune_epochs", "must be >= 0");
  if (lambda < 0.0) bad("lambda", "must be >= 0");
  if (subset_per_class < 0) bad("subset", "per-class count must be positive");
  if (!(tick_lr > 0.0)) bad("tick_lr", "must be positive");
  if (!(lr_low > 0.0 && lr_low <= lr_high)) bad("lr_low", "must be positive and <= lr_high");
  if (!(momentum >= 0.0 && momentum < 1.0)) bad("momentum", "must be in [0, 1)");
  if (weight_decay < 0.0) bad("weight_decay", "must be >= 0");
  if (batch_size < 1) bad("batch_size", "must be >= 1");
  if (min_channels < 1) bad("min_channels", "must be >= 1");
  if (max_ticks < 1) bad("max_ticks", "must be >= 1");
}

std::vector<std::string> RunLog::phases() const {
  std::vector<std::string> out;
  for (const auto& r : records) out.push_back(r.phase);
  return out;
}

std::string RunLog::to_jsonl() const {
  std::string out;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["phase"] = r.phase;
    j["index"] = r.index;
    j["epochs"] = r.epochs;
    j["loss"] = r.loss;
    j["test_accuracy"] = r.test_accuracy;
    j["alive"] = r.alive;
    j["removed"] = r.removed;
    j["flops"] = r.flops;
    j["params"] = r.params;
    if (r.phase == "tock") {
      j["mean_abs_phi_before"] = r.mean_abs_phi_before;
      j["mean_abs_phi_after"] = r.mean_abs_phi_after;
    }
    j["elapsed_s"] = r.elapsed_s;
    out += j.dump() + "\n";
  }
  return out;
}

RunLog RunLog::from_jsonl(std::string_view text) {
  RunLog log;
  std::size_t start = 0;
  int line_no = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RunRecord r;
      r.phase = j.at("phase").get<std::string>();
      r.index = j.at("index").get<int>();
      r.epochs = j.at("epochs").get<int>();
      r.loss = j.at("loss").get<double>();
      r.test_accuracy = j.at("test_accuracy").get<double>();
      r.alive = j.at("alive").get<int>();
      r.removed = j.at("removed").get<int>();
      r.flops = j.at("flops").get<long long>();
      r.params = j.at("params").get<long long>();
      r.mean_abs_phi_before = j.value("mean_abs_phi_before", 0.0);
      r.mean_abs_phi_after = j.value("mean_abs_phi_after", 0.0);
      r.elapsed_s = j.value("elapsed_s", 0.0);
      log.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kData, "run log line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return log;
}

CostReport vanilla_cost(const ModelSpec& spec) {
  ModelSpec plain = spec;
  for (auto& l : plain.layers) l.gated = false;
  return cost_report(plain);
}

PipelineState::PipelineState(const PipelineConfig& cfg, const DatasetBundle& dataset, const Network& baseline_net)
    : config(cfg), data(&dataset), start(std::chrono::steady_clock::now()) {
  config.validate();
  if (decoration_mode(baseline_net.spec())) fail(ErrorCode::kState, "baseline model is already decorated");
  baseline = vanilla_cost(baseline_net.spec());
  net = decorate_model(baseline_net, config.gate_mode);
  table = ImportanceTable::for_model(net, config.ranker);
}

bool PipelineState::target_reached() const {
  return static_cast<double>(vanilla_cost(net.spec()).flops) <= config.flops_target * static_cast<double>(baseline.flops);
}

int PipelineState::alive() const {
  int n = 0;
  for (const auto& s : analyze_channels(net.spec()).spaces) {
    if (s.prunable && !s.carriers.empty()) n += s.width;
  }
  return n;
}

namespace {

std::uint64_t phase_seed(std::uint64_t seed, std::uint64_t tag, int index) {
  Rng rng(seed ^ (tag * 0x9E3779B97F4A7C15ULL) ^ (static_cast<std::uint64_t>(index) << 20));
  return rng.next_u64();
}

enum class Trainable { kNone, kTick, kAll };

/// kTick: gates and the classifier (plus beta if configured); kAll: everything
/// but the gamma of gated batch norms; kNone: gradients for gates only.
void set_trainable(Network& net, Trainable mode, bool tick_train_beta) {
  const ModelSpec& spec = net.spec();
  const int head = spec.output_index();
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerParams& p = net.layer_params()[i];
    const bool all = mode == Trainable::kAll;
    const bool is_head = static_cast<int>(i) == head;
    p.weight.updatable = all || (mode == Trainable::kTick && is_head);
    p.bias.updatable = p.weight.updatable;
    p.gamma.updatable = all && !l.gated;
    p.beta.updatable = all || (mode == Trainable::kTick && tick_train_beta);
    p.phi.updatable = mode != Trainable::kNone;
    p.phi.grad_observed = true;
  }
}

RunRecord make_record(PipelineState& st, const std::string& phase, int index, int epochs, double loss) {
  RunRecord r;
  r.phase = phase;
  r.index = index;
  r.epochs = epochs;
  r.loss = loss;
  r.test_accuracy = evaluate(st.net, *st.data, st.data->test);
  r.alive = st.alive();
  const CostReport cost = vanilla_cost(st.net.spec());
  r.flops = cost.flops;
  r.params = cost.params;
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - st.start).count();
  return r;
}

Split subset_of(const PipelineState& st) {
  Split s = st.config.subset_per_class > 0
                ? per_class_subset(st.data->train, st.data->classes, st.config.subset_per_class)
                : st.data->train;
  if (s.size() == 0) fail(ErrorCode::kConfig, "tick subset is empty");
  return s;
}

/// Removes up to `count` candidates, stopping as soon as the FLOPs target is met.
int prune_step(PipelineState& st, int count) {
  const std::vector<RankCandidate> ranking = global_rank(st.table, st.net.spec(), st.config.min_channels);
  if (ranking.empty() || count < 1) return 0;
  const double target = st.config.flops_target * static_cast<double>(st.baseline.flops);
  const ModelSpec& spec = st.net.spec();
  const PruneSelection sel = select_prune_set(ranking, spec, count, st.config.min_channels, [&](const PruneMask& m) {
    return static_cast<double>(vanilla_cost(prune_spec(spec, m)).flops) <= target;
  });
  if (sel.removed > 0) st.net = apply_prune(st.net, sel.mask);
  return sel.removed;
}

double mean_loss(const std::vector<EpochResult>& results) {
  return results.empty() ? 0.0 : results.back().mean_loss;
}

TrainOptions phase_options(const PipelineConfig& c, int epochs, std::uint64_t seed) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = c.batch_size;
  o.schedule = LrSchedule::kOneCycle;
  o.lr_low = c.lr_low;
  o.lr_high = c.lr_high;
  o.momentum = c.momentum;
  o.weight_decay = c.weight_decay;
  o.seed = seed;
  return o;
}

}  // namespace

int tick(PipelineState& st) {
  const PipelineConfig& c = st.config;
  const Split subset = subset_of(st);
  set_trainable(st.net, Trainable::kTick, c.tick_train_beta);
  st.table = ImportanceTable::for_model(st.net, c.ranker);
  TrainOptions o;
  o.epochs = 1;
  o.batch_size = c.batch_size;
  o.schedule = LrSchedule::kConstant;
  o.lr = c.tick_lr;
  o.momentum = c.momentum;
  o.weight_decay = c.weight_decay;
  o.seed = phase_seed(c.seed, 1, st.ticks);
  ImportanceTable& table = st.table;
  const auto results = train(st.net, *st.data, subset, o, [&](Network& n, const ForwardCache& cache) {
    if (c.ranker == Ranker::kTaylor) table.accumulate(n, static_cast<int>(cache.labels.size()));
  });
  if (c.ranker == Ranker::kMagnitude) st.table = magnitude_scores(st.net);
  st.importance_exports.push_back(importance_csv(st.table, st.net.spec()));
  const int count = static_cast<int>(std::ceil(c.tick_prune_fraction * st.alive() - 1e-9));
  const int removed = prune_step(st, std::max(count, 1));
  RunRecord r = make_record(st, "tick", st.ticks, 1, mean_loss(results));
  r.removed = removed;
  st.log.records.push_back(r);
  ++st.ticks;
  return removed;
}

void tock(PipelineState& st) {
  const PipelineConfig& c = st.config;
  set_trainable(st.net, Trainable::kAll, c.tick_train_beta);
  const double before = mean_abs_gate(st.net);
  TrainOptions o = phase_options(c, c.tock_epochs, phase_seed(c.seed, 2, st.tocks));
  o.gate_l1 = c.lambda;
  const auto results = train(st.net, *st.data, st.data->train, o);
  RunRecord r = make_record(st, "tock", st.tocks, c.tock_epochs, mean_loss(results));
  r.mean_abs_phi_before = before;
  r.mean_abs_phi_after = mean_abs_gate(st.net);
  st.log.records.push_back(r);
  ++st.tocks;
}

void one_shot(PipelineState& st) {
  const PipelineConfig& c = st.config;
  const Split subset = subset_of(st);
  set_trainable(st.net, Trainable::kNone, false);
  st.table = ImportanceTable::for_model(st.net, c.ranker);
  double loss_sum = 0.0;
  if (c.ranker == Ranker::kTaylor) {
    std::vector<int> idx;
    for (int s = 0; s < subset.size(); s += c.batch_size) {
      const int e = std::min(subset.size(), s + c.batch_size);
      idx.resize(static_cast<std::size_t>(e - s));
      std::iota(idx.begin(), idx.end(), s);
      const std::vector<int> labels = gather_labels(subset, idx);
      const ForwardCache cache = st.net.forward(make_batch(*st.data, subset, idx), labels, kTrainNoUpdate);
      st.net.backward(cache);
      st.table.accumulate(st.net, e - s);
      loss_sum += cache.loss * (e - s);
    }
  } else {
    st.table = magnitude_scores(st.net);
  }
  st.importance_exports.push_back(importance_csv(st.table, st.net.spec()));
  st.log.records.push_back(make_record(st, "rank", 0, 0, loss_sum / subset.size()));
  const int removed = prune_step(st, std::max(st.alive(), 1));
  RunRecord r = make_record(st, "prune", 0, 0, 0.0);
  r.removed = removed;
  st.log.records.push_back(r);
}

void finetune(PipelineState& st) {
  const PipelineConfig& c = st.config;
  set_trainable(st.net, Trainable::kAll, c.tick_train_beta);
  const auto results = train(st.net, *st.data, st.data->train, phase_options(c, c.finetune_epochs, phase_seed(c.seed, 3, 0)));
  st.log.records.push_back(make_record(st, "finetune", 0, c.finetune_epochs, mean_loss(results)));
}

PipelineResult run(const PipelineConfig& config, const Network& baseline, const DatasetBundle& data) {
  PipelineResult res;
  Network base = baseline;
  res.baseline_accuracy = evaluate(base, data, data.test);
  PipelineState st(config, data, baseline);
  switch (config.mode) {
    case PipelineMode::kOneShot:
      one_shot(st);
      if (!st.target_reached()) {
        st.partial = true;
        st.note = "ranking exhausted by channel floors before the FLOPs target";
      }
      break;
    case PipelineMode::kTickOnly:
    case PipelineMode::kTickTock:
      while (!st.target_reached()) {
        if (st.ticks >= config.max_ticks) {
          st.partial = true;
          st.note = "max_ticks reached before the FLOPs target";
          break;
        }
        if (tick(st) == 0) {
          st.partial = true;
          st.note = "no prunable channels left above the floor before the FLOPs target";
          break;
        }
        if (config.mode == PipelineMode::kTickTock && st.ticks % config.ticks_per_tock == 0 && !st.target_reached()) {
          tock(st);
        }
      }
      break;
  }
  finetune(st);
  res.gated_accuracy = evaluate(st.net, data, data.test);
  res.merged = undecorate_model(st.net);
  {
    const int n = std::min(data.test.size(), 256);
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    const Tensor batch = make_batch(data, data.test, idx);
    res.merge_max_abs_diff = max_abs_diff(st.net.logits(batch), res.merged.logits(batch));
  }
  res.final_accuracy = evaluate(res.merged, data, data.test);
  res.baseline_cost = st.baseline;
  res.final_cost = cost_report(res.merged.spec());
  if (config.scratch) {
    Network fresh = Network::initialize(res.merged.spec(), phase_seed(config.seed, 4, 0));
    train(fresh, data, data.train, phase_options(config, config.finetune_epochs, phase_seed(config.seed, 5, 0)));
    res.scratch_accuracy = evaluate(fresh, data, data.test);
  }
  res.log = std::move(st.log);
  res.importance_exports = std::move(st.importance_exports);
  res.partial = st.partial;
  res.note = st.note;
  return res;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

std::string summary_csv_header() {
  return "mode,seed,baseline_accuracy,flops_reduction,params_reduction,finetune_accuracy,scratch_accuracy,status\n";
}

std::string summary_csv_row(const PipelineConfig& config, const PipelineResult& r) {
  return std::string(to_string(config.mode)) + "," + std::to_string(config.seed) + "," + fmt(r.baseline_accuracy) +
         "," + fmt(flops_reduction(r.final_cost, r.baseline_cost)) + "," +
         fmt(params_reduction(r.final_cost, r.baseline_cost)) + "," + fmt(r.final_accuracy) + "," +
         (r.scratch_accuracy ? fmt(*r.scratch_accuracy) : std::string()) + "," + (r.partial ? "partial" : "ok") + "\n";
}

}  // namespace prunekit
