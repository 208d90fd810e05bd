#include "prunekit/checkpoint.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include "prunekit/error.hpp"

namespace prunekit {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

[[noreturn]] void bad_manifest(const std::string& what) { fail(ErrorCode::kManifestMismatch, what); }

template <typename T>
T parse_number(std::string_view text, const char* field) {
  T v{};
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    bad_manifest(std::string("cannot parse ") + field + " from '" + std::string(text) + "'");
  }
  return v;
}

std::vector<std::string> split(std::string_view text, char sep) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    out.emplace_back(text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> tokens(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string t;
  while (is >> t) out.push_back(t);
  return out;
}

std::map<std::string, std::string> key_values(const std::vector<std::string>& toks, std::size_t from) {
  std::map<std::string, std::string> kv;
  for (std::size_t i = from; i < toks.size(); ++i) {
    const auto eq = toks[i].find('=');
    if (eq == std::string::npos) bad_manifest("expected key=value, got '" + toks[i] + "'");
    kv[toks[i].substr(0, eq)] = toks[i].substr(eq + 1);
  }
  return kv;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) bad_manifest("missing field '" + key + "'");
  return it->second;
}

std::string shape_field(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Tensor* slot_for(LayerParams& p, const std::string& field) {
  if (field == "weight") return &p.weight.value;
  if (field == "bias") return &p.bias.value;
  if (field == "gamma") return &p.gamma.value;
  if (field == "beta") return &p.beta.value;
  if (field == "phi") return &p.phi.value;
  if (field == "running_mean") return &p.running_mean;
  if (field == "running_var") return &p.running_var;
  return nullptr;
}

}  // namespace

std::string serialize_checkpoint(const Network& net, const CheckpointMeta& meta) {
  const ModelSpec& spec = net.spec();
  std::ostringstream h;
  h << kCheckpointVersion << '\n';
  h << "arch " << to_string(spec.arch) << '\n';
  h << "input " << spec.input.channels << ' ' << spec.input.height << ' ' << spec.input.width << '\n';
  h << "classes " << spec.classes << '\n';
  h << "layers " << spec.layers.size() << '\n';
  for (const auto& l : spec.layers) {
    h << "layer id=" << l.id << " kind=" << to_string(l.kind) << " in=" << l.in_channels << " out=" << l.out_channels
      << " k=" << l.kernel << " s=" << l.stride << " p=" << l.padding << " bias=" << (l.bias ? 1 : 0)
      << " gated=" << (l.gated ? 1 : 0) << " inputs=";
    for (std::size_t i = 0; i < l.inputs.size(); ++i) h << (i ? "," : "") << l.inputs[i];
    h << '\n';
  }
  h << "meta seed=" << meta.seed << " epoch=" << meta.epoch << " accuracy=" << format_double(meta.accuracy) << '\n';
  for (const auto& [k, v] : meta.extra) {
    if (k.find_first_of(" \t\n=") != std::string::npos || v.find_first_of(" \t\n") != std::string::npos || v.empty()) {
      fail(ErrorCode::kArgument, "metadata entry '" + k + "' must be non-empty and whitespace-free");
    }
    h << "extra " << k << '=' << v << '\n';
  }
  const auto mode = decoration_mode(spec);
  h << "decoration " << (mode ? to_string(*mode) : "none");
  for (const auto& id : gated_modules(spec)) h << ' ' << id;
  h << '\n';
  const std::vector<BufferRef> tensors = net.named_tensors();
  h << "params " << tensors.size() << '\n';
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    const std::size_t bytes = t.tensor->numel() * sizeof(float);
    h << "param " << t.name << " offset=" << offset << " bytes=" << bytes << " shape=" << shape_field(t.tensor->shape())
      << '\n';
    offset += bytes;
  }
  h << "blob " << offset << '\n';
  h << "end\n";
  std::string out = h.str();
  const std::size_t header = out.size();
  out.resize(header + offset);
  std::size_t pos = header;
  for (const auto& t : tensors) {
    const std::size_t bytes = t.tensor->numel() * sizeof(float);
    std::memcpy(out.data() + pos, t.tensor->ptr(), bytes);
    pos += bytes;
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&](const char* what) {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string::npos) fail(ErrorCode::kTruncatedBlob, std::string("header ends before ") + what);
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string version = next_line("version");
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kVersionMismatch, "expected '" + std::string(kCheckpointVersion) + "', found '" +
                                          version.substr(0, 64) + "'");
  }
  ModelSpec spec;
  CheckpointMeta meta;
  std::optional<DecorationManifest> decoration;
  struct Entry {
    std::string name;
    std::size_t offset, bytes;
    Shape shape;
  };
  std::vector<Entry> entries;
  std::size_t blob = 0;
  bool have_blob = false;
  std::size_t declared_layers = 0;
  std::size_t declared_params = 0;
  while (true) {
    const std::string line = next_line("'end'");
    if (line == "end") break;
    const auto toks = tokens(line);
    if (toks.empty()) continue;
    const std::string& key = toks[0];
    if (key == "arch" && toks.size() == 2) {
      try {
        spec.arch = parse_architecture(toks[1]);
      } catch (const Error& e) {
        bad_manifest(e.what());
      }
    } else if (key == "input" && toks.size() == 4) {
      spec.input = {parse_number<int>(toks[1], "input"), parse_number<int>(toks[2], "input"),
                    parse_number<int>(toks[3], "input")};
    } else if (key == "classes" && toks.size() == 2) {
      spec.classes = parse_number<int>(toks[1], "classes");
    } else if (key == "layers" && toks.size() == 2) {
      declared_layers = parse_number<std::size_t>(toks[1], "layers");
    } else if (key == "layer") {
      const auto kv = key_values(toks, 1);
      LayerSpec l;
      l.id = require(kv, "id");
      try {
        l.kind = parse_layer_kind(require(kv, "kind"));
      } catch (const Error& e) {
        bad_manifest(e.what());
      }
      l.in_channels = parse_number<int>(require(kv, "in"), "in");
      l.out_channels = parse_number<int>(require(kv, "out"), "out");
      l.kernel = parse_number<int>(require(kv, "k"), "k");
      l.stride = parse_number<int>(require(kv, "s"), "s");
      l.padding = parse_number<int>(require(kv, "p"), "p");
      l.bias = require(kv, "bias") == "1";
      l.gated = require(kv, "gated") == "1";
      l.inputs = split(require(kv, "inputs"), ',');
      spec.layers.push_back(std::move(l));
    } else if (key == "meta") {
      const auto kv = key_values(toks, 1);
      meta.seed = parse_number<std::uint64_t>(require(kv, "seed"), "seed");
      meta.epoch = parse_number<int>(require(kv, "epoch"), "epoch");
      meta.accuracy = parse_number<double>(require(kv, "accuracy"), "accuracy");
    } else if (key == "extra" && toks.size() == 2) {
      const auto eq = toks[1].find('=');
      if (eq == std::string::npos) bad_manifest("malformed extra entry");
      meta.extra[toks[1].substr(0, eq)] = toks[1].substr(eq + 1);
    } else if (key == "decoration" && toks.size() >= 2) {
      if (toks[1] != "none") {
        DecorationManifest m;
        try {
          m.mode = parse_gate_mode(toks[1]);
        } catch (const Error& e) {
          bad_manifest(e.what());
        }
        m.gated.assign(toks.begin() + 2, toks.end());
        decoration = std::move(m);
      }
    } else if (key == "params" && toks.size() == 2) {
      declared_params = parse_number<std::size_t>(toks[1], "params");
    } else if (key == "param" && toks.size() == 5) {
      const auto kv = key_values(toks, 2);
      Entry e;
      e.name = toks[1];
      e.offset = parse_number<std::size_t>(require(kv, "offset"), "offset");
      e.bytes = parse_number<std::size_t>(require(kv, "bytes"), "bytes");
      for (const auto& d : split(require(kv, "shape"), 'x')) e.shape.push_back(parse_number<int>(d, "shape"));
      entries.push_back(std::move(e));
    } else if (key == "blob" && toks.size() == 2) {
      blob = parse_number<std::size_t>(toks[1], "blob");
      have_blob = true;
    } else {
      bad_manifest("unrecognized header line '" + line.substr(0, 80) + "'");
    }
  }
  if (!have_blob) bad_manifest("missing blob size");
  if (declared_layers != spec.layers.size()) bad_manifest("layer count disagrees with header");
  if (declared_params != entries.size()) bad_manifest("param count disagrees with header");
  const std::size_t available = bytes.size() - pos;
  if (available < blob) {
    fail(ErrorCode::kTruncatedBlob, "blob has " + std::to_string(available) + " of " + std::to_string(blob) + " bytes");
  }
  if (available > blob) bad_manifest(std::to_string(available - blob) + " trailing bytes after blob");

  std::size_t expect_offset = 0;
  std::vector<LayerParams> params(spec.layers.size());
  std::vector<int> index_of_layer;
  for (const auto& e : entries) {
    if (e.offset != expect_offset) bad_manifest("parameter '" + e.name + "' offset is not contiguous");
    std::size_t count = 1;
    for (int d : e.shape) {
      if (d <= 0) bad_manifest("parameter '" + e.name + "' has a non-positive extent");
      count *= static_cast<std::size_t>(d);
    }
    if (count * sizeof(float) != e.bytes) bad_manifest("parameter '" + e.name + "' byte count disagrees with shape");
    expect_offset += e.bytes;
    const auto dot = e.name.rfind('.');
    if (dot == std::string::npos) bad_manifest("parameter name '" + e.name + "' lacks a field");
    const int li = spec.index_of(e.name.substr(0, dot));
    if (li < 0) bad_manifest("parameter '" + e.name + "' names an unknown layer");
    Tensor* slot = slot_for(params[static_cast<std::size_t>(li)], e.name.substr(dot + 1));
    if (!slot) bad_manifest("parameter '" + e.name + "' has an unknown field");
    if (!slot->empty()) bad_manifest("parameter '" + e.name + "' appears twice");
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes.data() + pos + e.offset, e.bytes);
    *slot = Tensor(e.shape, std::move(values));
  }
  if (expect_offset != blob) bad_manifest("manifest covers " + std::to_string(expect_offset) + " of " +
                                          std::to_string(blob) + " blob bytes");
  for (std::size_t i = 0; i < params.size(); ++i) {
    LayerParams& p = params[i];
    for (Parameter* q : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.phi}) {
      if (!q->value.empty()) q->grad = Tensor(q->value.shape());
    }
    p.phi.weight_decay = false;
    if (spec.layers[i].gated && spec.layers[i].kind == LayerKind::kBatchNorm) p.gamma.updatable = false;
  }
  try {
    Network net(std::move(spec), std::move(params));
    if (decoration && decoration->gated != gated_modules(net.spec())) {
      bad_manifest("decoration list disagrees with gated layers");
    }
    return {std::move(net), meta, decoration};
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kManifestMismatch) throw;
    bad_manifest(std::string("stored model is inconsistent: ") + e.what());
  }
}

void save_checkpoint(const Network& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net, meta);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) fail(ErrorCode::kIo, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace prunekit
