#include "prunekit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "prunekit/error.hpp"

namespace prunekit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T number(const std::string& key, const std::string& text) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    fail(ErrorCode::kConfig, "key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool boolean(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorCode::kConfig, "key '" + key + "': expected true or false, got '" + text + "'");
}

std::vector<int> int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const std::string item = trim(std::string_view(text).substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    out.push_back(number<int>(key, item));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;

void apply(const KeyValues& kv, const std::map<std::string, Setter>& setters) {
  for (const auto& [k, v] : kv) {
    auto it = setters.find(k);
    if (it == setters.end()) fail(ErrorCode::kConfig, "unknown config key '" + k + "'");
    try {
      it->second(k, v);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::kConfig) throw;
      fail(ErrorCode::kConfig, "key '" + k + "': " + e.what());
    }
  }
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::istringstream is{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) fail(ErrorCode::kConfig, "line " + std::to_string(line_no) + ": empty key");
    if (!kv.emplace(key, value).second) fail(ErrorCode::kConfig, "key '" + key + "' given twice");
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

PipelineConfig pipeline_config(const KeyValues& kv, PipelineConfig c) {
  const std::map<std::string, Setter> setters{
      {"mode", [&](auto&, auto& v) { c.mode = parse_pipeline_mode(v); }},
      {"gate_mode", [&](auto&, auto& v) { c.gate_mode = parse_gate_mode(v); }},
      {"ranker", [&](auto&, auto& v) { c.ranker = parse_ranker(v); }},
      {"tick_prune_fraction", [&](auto& k, auto& v) { c.tick_prune_fraction = number<double>(k, v); }},
      {"ticks_per_tock", [&](auto& k, auto& v) { c.ticks_per_tock = number<int>(k, v); }},
      {"tock_epochs", [&](auto& k, auto& v) { c.tock_epochs = number<int>(k, v); }},
      {"lambda", [&](auto& k, auto& v) { c.lambda = number<double>(k, v); }},
      {"finetune_epochs", [&](auto& k, auto& v) { c.finetune_epochs = number<int>(k, v); }},
      {"flops_target", [&](auto& k, auto& v) { c.flops_target = number<double>(k, v); }},
      {"subset",
       [&](auto& k, auto& v) {
         if (v == "full") {
           c.subset_per_class = 0;
         } else if (v.rfind("per_class:", 0) == 0) {
           c.subset_per_class = number<int>(k, v.substr(10));
           if (c.subset_per_class < 1) fail(ErrorCode::kConfig, "key 'subset': per-class count must be >= 1");
         } else {
           fail(ErrorCode::kConfig, "key 'subset': expected full or per_class:N");
         }
       }},
      {"tick_lr", [&](auto& k, auto& v) { c.tick_lr = number<double>(k, v); }},
      {"lr_low", [&](auto& k, auto& v) { c.lr_low = number<double>(k, v); }},
      {"lr_high", [&](auto& k, auto& v) { c.lr_high = number<double>(k, v); }},
      {"momentum", [&](auto& k, auto& v) { c.momentum = number<double>(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { c.weight_decay = number<double>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.batch_size = number<int>(k, v); }},
      {"min_channels", [&](auto& k, auto& v) { c.min_channels = number<int>(k, v); }},
      {"tick_train_beta", [&](auto& k, auto& v) { c.tick_train_beta = boolean(k, v); }},
      {"scratch", [&](auto& k, auto& v) { c.scratch = boolean(k, v); }},
      {"max_ticks", [&](auto& k, auto& v) { c.max_ticks = number<int>(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = number<std::uint64_t>(k, v); }},
  };
  apply(kv, setters);
  c.validate();
  return c;
}

TrainConfig train_config(const KeyValues& kv, TrainConfig c) {
  const std::map<std::string, Setter> setters{
      {"arch", [&](auto&, auto& v) { c.arch = parse_architecture(v); }},
      {"widths", [&](auto& k, auto& v) { c.widths = int_list(k, v); }},
      {"blocks", [&](auto& k, auto& v) { c.blocks = int_list(k, v); }},
      {"pool_every", [&](auto& k, auto& v) { c.pool_every = number<int>(k, v); }},
      {"epochs", [&](auto& k, auto& v) { c.train.epochs = number<int>(k, v); }},
      {"batch_size", [&](auto& k, auto& v) { c.train.batch_size = number<int>(k, v); }},
      {"schedule",
       [&](auto& k, auto& v) {
         if (v == "one_cycle") {
           c.train.schedule = LrSchedule::kOneCycle;
         } else if (v == "constant") {
           c.train.schedule = LrSchedule::kConstant;
         } else {
           fail(ErrorCode::kConfig, "key '" + k + "': expected one_cycle or constant");
         }
       }},
      {"lr", [&](auto& k, auto& v) { c.train.lr = number<double>(k, v); }},
      {"lr_low", [&](auto& k, auto& v) { c.train.lr_low = number<double>(k, v); }},
      {"lr_high", [&](auto& k, auto& v) { c.train.lr_high = number<double>(k, v); }},
      {"momentum", [&](auto& k, auto& v) { c.train.momentum = number<double>(k, v); }},
      {"weight_decay", [&](auto& k, auto& v) { c.train.weight_decay = number<double>(k, v); }},
      {"seed", [&](auto& k, auto& v) { c.seed = number<std::uint64_t>(k, v); }},
  };
  apply(kv, setters);
  if (c.train.epochs < 1) fail(ErrorCode::kConfig, "key 'epochs': must be >= 1");
  if (c.train.batch_size < 1) fail(ErrorCode::kConfig, "key 'batch_size': must be >= 1");
  c.train.seed = c.seed;
  return c;
}

ModelSpec build_model(const TrainConfig& config, FeatureShape input, int classes) {
  if (config.arch == Architecture::kPlain) {
    PlainCnnOptions o;
    o.pool_every = config.pool_every;
    return build_plain_cnn(config.widths, input, classes, o);
  }
  return build_mini_resnet(config.widths, config.blocks, input, classes);
}

}  // namespace prunekit
