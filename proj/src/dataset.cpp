#include "prunekit/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "prunekit/error.hpp"

namespace prunekit {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

FeatureShape DatasetBundle::image_shape() const {
  const Tensor& t = train.images.empty() ? test.images : train.images;
  if (t.rank() != 4) fail(ErrorCode::kData, "dataset has no images");
  return {t.dim(1), t.dim(2), t.dim(3)};
}

namespace {

constexpr double kPi = std::numbers::pi;

double pattern_value(int family, double x, double y, double freq, double phase, double cx, double cy) {
  switch (family) {
    case 0: return std::sin(2 * kPi * freq * y + phase);
    case 1: return std::sin(2 * kPi * freq * x + phase);
    case 2: return std::sin(2 * kPi * freq * (x + y) / std::numbers::sqrt2 + phase);
    case 3: {
      const double s = std::sin(2 * kPi * freq * x + phase) * std::sin(2 * kPi * freq * y + phase);
      return s >= 0 ? 1.0 : -1.0;
    }
    case 4: {
      const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
      return 2.0 * std::exp(-r2 / (2 * 0.03 / freq)) - 1.0;
    }
    case 5: return std::sin(2 * kPi * freq * (x - y) / std::numbers::sqrt2 + phase);
    case 6: {
      const double w = 0.08 + 0.02 * freq;
      return (std::fabs(x - cx) < w || std::fabs(y - cy) < w) ? 1.0 : -1.0;
    }
    default: {
      const double r = std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy));
      return std::sin(2 * kPi * freq * r * 1.5 + phase);
    }
  }
}

void render(Rng& rng, int cls, int size, double noise, float* out) {
  const int family = cls % 8;
  const int variant = cls / 8;
  const double freq = 1.5 + variant * 1.25 + rng.uniform(0.0, 1.0);
  const double phase = rng.uniform(0.0, 2 * kPi);
  const double contrast = rng.uniform(0.5, 1.0);
  const double cx = rng.uniform(0.3, 0.7);
  const double cy = rng.uniform(0.3, 0.7);
  const double offset = rng.uniform(-0.1, 0.1);
  for (int py = 0; py < size; ++py) {
    for (int px = 0; px < size; ++px) {
      const double x = (px + 0.5) / size;
      const double y = (py + 0.5) / size;
      double v = 0.5 + offset + 0.5 * contrast * pattern_value(family, x, y, freq, phase, cx, cy);
      v += noise * rng.normal();
      out[py * size + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) fail(ErrorCode::kData, std::string("truncated dataset at ") + what);
  return v;
}

void write_split(std::ostream& os, const Split& s) {
  for (int l : s.labels) put<std::int32_t>(os, l);
  os.write(reinterpret_cast<const char*>(s.images.ptr()), static_cast<std::streamsize>(s.images.numel() * sizeof(float)));
}

Split read_split(std::istream& is, int n, FeatureShape shape, int classes) {
  Split s;
  s.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : s.labels) {
    l = get<std::int32_t>(is, "labels");
    if (l < 0 || l >= classes) fail(ErrorCode::kData, "label " + std::to_string(l) + " outside [0, classes)");
  }
  if (n == 0) return s;
  s.images = Tensor({n, shape.channels, shape.height, shape.width});
  if (!is.read(reinterpret_cast<char*>(s.images.ptr()), static_cast<std::streamsize>(s.images.numel() * sizeof(float)))) {
    fail(ErrorCode::kData, "truncated dataset image block");
  }
  return s;
}

std::uint32_t read_be32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::kData, "truncated IDX header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

Split read_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels) {
  std::ifstream fi(images, std::ios::binary), fl(labels, std::ios::binary);
  if (!fi) fail(ErrorCode::kData, "cannot open " + images.string());
  if (!fl) fail(ErrorCode::kData, "cannot open " + labels.string());
  const std::uint32_t magic_i = read_be32(fi);
  if (magic_i != 0x00000803) fail(ErrorCode::kData, images.string() + " is not an IDX3 ubyte file");
  const int n = static_cast<int>(read_be32(fi));
  const int h = static_cast<int>(read_be32(fi));
  const int w = static_cast<int>(read_be32(fi));
  const std::uint32_t magic_l = read_be32(fl);
  if (magic_l != 0x00000801) fail(ErrorCode::kData, labels.string() + " is not an IDX1 ubyte file");
  const int nl = static_cast<int>(read_be32(fl));
  if (nl != n) fail(ErrorCode::kData, "IDX image/label counts differ");
  Split s;
  s.images = Tensor({n, 1, h, w});
  std::vector<unsigned char> buf(static_cast<std::size_t>(n) * h * w);
  if (!fi.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    fail(ErrorCode::kData, "truncated IDX image data");
  }
  for (std::size_t i = 0; i < buf.size(); ++i) s.images[i] = static_cast<float>(buf[i]) / 255.0f;
  s.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : s.labels) {
    char c;
    if (!fl.get(c)) fail(ErrorCode::kData, "truncated IDX label data");
    l = static_cast<unsigned char>(c);
  }
  return s;
}

}  // namespace

DatasetBundle generate_synthetic(const SyntheticOptions& options) {
  if (options.classes < 2) fail(ErrorCode::kArgument, "synthetic data needs at least 2 classes");
  if (options.per_class < 2) fail(ErrorCode::kArgument, "per_class must be >= 2");
  if (options.image_size < 4) fail(ErrorCode::kArgument, "image size must be >= 4");
  if (!(options.test_fraction > 0.0 && options.test_fraction < 1.0)) {
    fail(ErrorCode::kArgument, "test_fraction must be in (0,1)");
  }
  const int n_test_pc = std::max(1, static_cast<int>(std::lround(options.per_class * options.test_fraction)));
  const int n_train_pc = options.per_class - n_test_pc;
  if (n_train_pc < 1) fail(ErrorCode::kArgument, "per_class too small for the test fraction");
  const int s = options.image_size;
  DatasetBundle data;
  data.classes = options.classes;
  data.provenance = Provenance::kSynthetic;
  const int n_train = n_train_pc * options.classes;
  const int n_test = n_test_pc * options.classes;
  data.train.images = Tensor({n_train, 1, s, s});
  data.test.images = Tensor({n_test, 1, s, s});
  // Train and test draw from distinct streams; samples interleave classes.
  Rng train_rng(options.seed * 2 + 1);
  Rng test_rng(options.seed * 2 + 2);
  auto fill = [&](Split& split, int per_class, Rng& rng) {
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    int idx = 0;
    for (int k = 0; k < per_class; ++k) {
      for (int c = 0; c < options.classes; ++c, ++idx) {
        render(rng, c, s, options.noise, split.images.ptr() + static_cast<std::size_t>(idx) * plane);
        split.labels.push_back(c);
      }
    }
  };
  fill(data.train, n_train_pc, train_rng);
  fill(data.test, n_test_pc, test_rng);
  compute_normalization(data);
  return data;
}

void compute_normalization(DatasetBundle& data) {
  const FeatureShape shape = data.image_shape();
  const Tensor& t = data.train.images;
  const int n = t.dim(0);
  const std::size_t hw = static_cast<std::size_t>(shape.height) * shape.width;
  data.mean.assign(static_cast<std::size_t>(shape.channels), 0.0f);
  data.stddev.assign(static_cast<std::size_t>(shape.channels), 1.0f);
  for (int c = 0; c < shape.channels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * shape.channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        sum += t[off + i];
        sq += static_cast<double>(t[off + i]) * t[off + i];
      }
    }
    const double count = static_cast<double>(n) * hw;
    const double mean = sum / count;
    const double var = std::max(sq / count - mean * mean, 1e-12);
    data.mean[static_cast<std::size_t>(c)] = static_cast<float>(mean);
    data.stddev[static_cast<std::size_t>(c)] = static_cast<float>(std::sqrt(var));
  }
}

void save_dataset(const DatasetBundle& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorCode::kIo, "cannot write " + path.string());
  const FeatureShape shape = data.image_shape();
  os.write("PKDS", 4);
  put<std::uint32_t>(os, 1);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.classes));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.channels));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.height));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(shape.width));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.train.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(data.test.size()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(data.provenance));
  for (float m : data.mean) put<float>(os, m);
  for (float s : data.stddev) put<float>(os, s);
  write_split(os, data.train);
  write_split(os, data.test);
  if (!os) fail(ErrorCode::kIo, "failed writing " + path.string());
}

DatasetBundle load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::kData, "cannot open dataset " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "PKDS", 4) != 0) fail(ErrorCode::kData, path.string() + " is not a dataset file");
  if (get<std::uint32_t>(is, "version") != 1) fail(ErrorCode::kData, "unsupported dataset version");
  DatasetBundle data;
  data.classes = static_cast<int>(get<std::uint32_t>(is, "classes"));
  FeatureShape shape;
  shape.channels = static_cast<int>(get<std::uint32_t>(is, "channels"));
  shape.height = static_cast<int>(get<std::uint32_t>(is, "height"));
  shape.width = static_cast<int>(get<std::uint32_t>(is, "width"));
  const int n_train = static_cast<int>(get<std::uint32_t>(is, "n_train"));
  const int n_test = static_cast<int>(get<std::uint32_t>(is, "n_test"));
  const auto prov = get<std::uint8_t>(is, "provenance");
  if (prov > 1) fail(ErrorCode::kData, "unknown provenance tag");
  data.provenance = static_cast<Provenance>(prov);
  if (data.classes < 2 || shape.channels < 1 || shape.height < 1 || shape.width < 1) {
    fail(ErrorCode::kData, "invalid dataset header");
  }
  for (int c = 0; c < shape.channels; ++c) data.mean.push_back(get<float>(is, "mean"));
  for (int c = 0; c < shape.channels; ++c) data.stddev.push_back(get<float>(is, "stddev"));
  data.train = read_split(is, n_train, shape, data.classes);
  data.test = read_split(is, n_test, shape, data.classes);
  if (is.peek() != std::char_traits<char>::eof()) fail(ErrorCode::kData, "trailing bytes after dataset");
  return data;
}

DatasetBundle load_idx(const std::filesystem::path& train_images, const std::filesystem::path& train_labels,
                       const std::filesystem::path& test_images, const std::filesystem::path& test_labels) {
  DatasetBundle data;
  data.provenance = Provenance::kIdx;
  data.train = read_idx_pair(train_images, train_labels);
  data.test = read_idx_pair(test_images, test_labels);
  int max_label = 0;
  for (int l : data.train.labels) max_label = std::max(max_label, l);
  for (int l : data.test.labels) max_label = std::max(max_label, l);
  data.classes = max_label + 1;
  if (data.classes < 2) fail(ErrorCode::kData, "IDX data has fewer than 2 classes");
  compute_normalization(data);
  return data;
}

Tensor make_batch(const DatasetBundle& data, const Split& split, std::span<const int> indices) {
  const FeatureShape shape = data.image_shape();
  const std::size_t hw = static_cast<std::size_t>(shape.height) * shape.width;
  const std::size_t per = hw * shape.channels;
  Tensor batch({static_cast<int>(indices.size()), shape.channels, shape.height, shape.width});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const int idx = indices[b];
    if (idx < 0 || idx >= split.size()) fail(ErrorCode::kArgument, "batch index out of range");
    const float* src = split.images.ptr() + static_cast<std::size_t>(idx) * per;
    float* dst = batch.ptr() + b * per;
    for (int c = 0; c < shape.channels; ++c) {
      const float m = data.mean[static_cast<std::size_t>(c)];
      const float inv = 1.0f / data.stddev[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < hw; ++i) dst[c * hw + i] = (src[c * hw + i] - m) * inv;
    }
  }
  return batch;
}

std::vector<int> gather_labels(const Split& split, std::span<const int> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(split.labels.at(static_cast<std::size_t>(i)));
  return out;
}

Split per_class_subset(const Split& split, int classes, int per_class) {
  if (per_class < 1) fail(ErrorCode::kConfig, "per-class subset size must be >= 1");
  std::vector<int> taken(static_cast<std::size_t>(classes), 0);
  std::vector<int> keep;
  for (int i = 0; i < split.size(); ++i) {
    const int l = split.labels[static_cast<std::size_t>(i)];
    if (taken[static_cast<std::size_t>(l)] < per_class) {
      ++taken[static_cast<std::size_t>(l)];
      keep.push_back(i);
    }
  }
  if (keep.empty()) fail(ErrorCode::kConfig, "subset is empty");
  Split out;
  const int c = split.images.dim(1), h = split.images.dim(2), w = split.images.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  out.images = Tensor({static_cast<int>(keep.size()), c, h, w});
  for (std::size_t k = 0; k < keep.size(); ++k) {
    std::copy_n(split.images.ptr() + static_cast<std::size_t>(keep[k]) * per, per, out.images.ptr() + k * per);
    out.labels.push_back(split.labels[static_cast<std::size_t>(keep[k])]);
  }
  return out;
}

}  // namespace prunekit
