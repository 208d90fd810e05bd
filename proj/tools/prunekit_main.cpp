#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "prunekit/checkpoint.hpp"
#include "prunekit/config.hpp"
#include "prunekit/error.hpp"
#include "prunekit/groups.hpp"
#include "prunekit/pipeline.hpp"

namespace fs = std::filesystem;
using namespace prunekit;

namespace {

enum Exit { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3, kPartial = 4 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArgument:
    case ErrorCode::kConfig:
      return kUsage;
    case ErrorCode::kNumeric:
    case ErrorCode::kDegenerateGamma:
    case ErrorCode::kDegenerateFilter:
      return kNumericError;
    default:
      return kDataError;
  }
}

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out_dir = ".";
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path.string());
  os << text;
  if (!os) fail(ErrorCode::kIo, "failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

KeyValues config_values(const Globals& g) { return g.config.empty() ? KeyValues{} : read_key_values(g.config); }

std::string conv_widths_field(const ModelSpec& spec) {
  std::string out;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::kConv2d) out += (out.empty() ? "" : ",") + l.id + ":" + std::to_string(l.out_channels);
  }
  return out;
}

std::map<std::string, int> parse_conv_widths(const std::string& field) {
  std::map<std::string, int> out;
  std::stringstream ss(field);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.rfind(':');
    if (colon == std::string::npos) fail(ErrorCode::kData, "malformed baseline_widths entry '" + item + "'");
    out[item.substr(0, colon)] = std::stoi(item.substr(colon + 1));
  }
  return out;
}

std::string widths_csv(const CostReport& current, const CostReport& baseline) {
  std::string out = "layer,baseline_width,width,pruned_fraction\n";
  for (const auto& l : current.layers) {
    if (l.kind != LayerKind::kConv2d) continue;
    int base = l.out_channels;
    for (const auto& b : baseline.layers) {
      if (b.id == l.id) base = b.out_channels;
    }
    char frac[32];
    std::snprintf(frac, sizeof frac, "%.6f", base ? 1.0 - static_cast<double>(l.out_channels) / base : 0.0);
    out += l.id + "," + std::to_string(base) + "," + std::to_string(l.out_channels) + "," + frac + "\n";
  }
  return out;
}

int cmd_generate(const Globals& g, const SyntheticOptions& opts, const std::string& out) {
  if (opts.classes < 2) fail(ErrorCode::kArgument, "classes must be >= 2");
  if (opts.per_class < 1) fail(ErrorCode::kArgument, "per-class must be >= 1");
  const fs::path path = out.empty() ? out_path(g, "dataset.pkds") : fs::path(out);
  save_dataset(generate_synthetic(opts), path);
  std::cout << "wrote " << path.string() << "\n";
  return kOk;
}

int cmd_train(const Globals& g, const std::string& data_path, const std::string& out) {
  TrainConfig cfg = train_config(config_values(g));
  if (g.seed) {
    cfg.seed = *g.seed;
    cfg.train.seed = *g.seed;
  }
  const DatasetBundle data = load_dataset(data_path);
  Network net = Network::initialize(build_model(cfg, data.image_shape(), data.classes), cfg.seed);
  const auto epochs = train(net, data, data.train, cfg.train);
  const double acc = evaluate(net, data, data.test);
  std::string log;
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    nlohmann::ordered_json j{{"epoch", e}, {"loss", epochs[e].mean_loss}, {"train_accuracy", epochs[e].train_accuracy}};
    log += j.dump() + "\n";
  }
  log += nlohmann::ordered_json{{"test_accuracy", acc}}.dump() + "\n";
  CheckpointMeta meta;
  meta.seed = cfg.seed;
  meta.epoch = cfg.train.epochs;
  meta.accuracy = acc;
  const fs::path path = out.empty() ? out_path(g, "baseline.ckpt") : fs::path(out);
  save_checkpoint(net, meta, path);
  write_file(path.string() + ".log.jsonl", log);
  std::cout << "test accuracy " << acc << "\nwrote " << path.string() << "\n";
  return kOk;
}

int cmd_prune(const Globals& g, const std::string& ckpt_path, const std::string& data_path) {
  PipelineConfig cfg = pipeline_config(config_values(g));
  if (g.seed) cfg.seed = *g.seed;
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const DatasetBundle data = load_dataset(data_path);
  const PipelineResult r = run(cfg, ckpt.network, data);
  CheckpointMeta meta;
  meta.seed = cfg.seed;
  meta.epoch = cfg.finetune_epochs;
  meta.accuracy = r.final_accuracy;
  meta.extra["mode"] = to_string(cfg.mode);
  meta.extra["baseline_accuracy"] = std::to_string(r.baseline_accuracy);
  meta.extra["baseline_widths"] = conv_widths_field(ckpt.network.spec());
  meta.extra["status"] = r.partial ? "partial" : "ok";
  save_checkpoint(r.merged, meta, out_path(g, "pruned.ckpt"));
  write_file(out_path(g, "runlog.jsonl"), r.log.to_jsonl());
  write_file(out_path(g, "cost.json"), cost_report_json(r.final_cost, r.baseline_cost));
  write_file(out_path(g, "cost.csv"), cost_report_csv(r.final_cost, r.baseline_cost));
  write_file(out_path(g, "summary.csv"), summary_csv_header() + summary_csv_row(cfg, r));
  if (!r.importance_exports.empty()) write_file(out_path(g, "importance.csv"), r.importance_exports.back());
  std::cout << "accuracy " << r.baseline_accuracy << " -> " << r.final_accuracy << ", FLOPs reduction "
            << flops_reduction(r.final_cost, r.baseline_cost) << "\nwrote " << g.out_dir << "\n";
  if (r.partial) {
    std::cerr << "partial result: " << r.note << "\n";
    return kPartial;
  }
  return kOk;
}

int cmd_report(const Globals& g, const std::string& ckpt_path, const std::string& baseline_path,
               const std::string& runlog_path) {
  if (ckpt_path.empty() && runlog_path.empty()) fail(ErrorCode::kArgument, "report needs --checkpoint or --runlog");
  if (!ckpt_path.empty()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const ModelSpec& spec = ckpt.network.spec();
    CostReport current = cost_report(spec);
    CostReport baseline = current;
    if (!baseline_path.empty()) {
      baseline = cost_report(load_checkpoint(baseline_path).network.spec());
    } else if (auto it = ckpt.meta.extra.find("baseline_widths"); it != ckpt.meta.extra.end()) {
      baseline = cost_report(with_widths(spec, parse_conv_widths(it->second)));
    }
    write_file(out_path(g, "report_cost.json"), cost_report_json(current, baseline));
    write_file(out_path(g, "report_cost.csv"), cost_report_csv(current, baseline));
    write_file(out_path(g, "report_widths.csv"), widths_csv(current, baseline));
    write_file(out_path(g, "report_groups.json"), groups_to_json(discover_groups(spec)));
    std::cout << "flops " << current.flops << " (" << 100.0 * flops_reduction(current, baseline) << "% down), params "
              << current.params << " (" << 100.0 * params_reduction(current, baseline) << "% down), accuracy "
              << ckpt.meta.accuracy << "\n";
  }
  if (!runlog_path.empty()) {
    const RunLog log = RunLog::from_jsonl(read_file(runlog_path));
    std::string csv = "phase,index,epochs,loss,test_accuracy,alive,removed,flops,params\n";
    for (const auto& r : log.records) {
      std::ostringstream row;
      row.precision(17);
      row << r.phase << ',' << r.index << ',' << r.epochs << ',' << r.loss << ',' << r.test_accuracy << ',' << r.alive
          << ',' << r.removed << ',' << r.flops << ',' << r.params << '\n';
      csv += row.str();
    }
    write_file(out_path(g, "report_runlog.csv"), csv);
    std::cout << log.records.size() << " run log records\n";
  }
  std::cout << "wrote " << g.out_dir << "\n";
  return kOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  const DatasetBundle data = load_dataset(data_path);
  std::cout << "test accuracy " << evaluate(ckpt.network, data, data.test) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gate Decorator filter pruning"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Override the seed")->capture_default_str();
  app.add_option("--config", g.config, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

  SyntheticOptions syn;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate-synthetic", "Write a deterministic synthetic dataset");
  gen->add_option("--classes", syn.classes)->capture_default_str();
  gen->add_option("--per-class", syn.per_class)->capture_default_str();
  gen->add_option("--image-size", syn.image_size)->capture_default_str();
  gen->add_option("--noise", syn.noise)->capture_default_str();
  gen->add_option("--test-fraction", syn.test_fraction)->capture_default_str();
  gen->add_option("--out", gen_out, "Dataset file (default <out-dir>/dataset.pkds)");

  std::string data_path, ckpt_path, train_out, baseline_path, runlog_path;
  auto* tr = app.add_subcommand("train", "Train a baseline model");
  tr->add_option("--data", data_path)->required();
  tr->add_option("--out", train_out, "Checkpoint path (default <out-dir>/baseline.ckpt)");

  auto* pr = app.add_subcommand("prune", "Run the pruning pipeline on a baseline checkpoint");
  pr->add_option("--checkpoint", ckpt_path)->required();
  pr->add_option("--data", data_path)->required();

  auto* rep = app.add_subcommand("report", "Emit cost, width, group, and run-log reports");
  rep->add_option("--checkpoint", ckpt_path);
  rep->add_option("--baseline", baseline_path, "Baseline checkpoint for reduction columns");
  rep->add_option("--runlog", runlog_path);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  ev->add_option("--checkpoint", ckpt_path)->required();
  ev->add_option("--data", data_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  if (seed_opt->count()) g.seed = seed;

  try {
    if (*gen) {
      if (g.seed) syn.seed = *g.seed;
      return cmd_generate(g, syn, gen_out);
    }
    if (*tr) return cmd_train(g, data_path, train_out);
    if (*pr) return cmd_prune(g, ckpt_path, data_path);
    if (*rep) return cmd_report(g, ckpt_path, baseline_path, runlog_path);
    if (*ev) return cmd_eval(ckpt_path, data_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error (io): " << e.what() << "\n";
    return kDataError;
  }
  return kUsage;
}
