#pragma once

// Loop-based double-precision re-implementation of the network forward pass,
// written independently of the library's kernels. Used as the reference for
// loss values and central finite differences.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "prunekit/network.hpp"

namespace oracle {

using prunekit::LayerKind;
using prunekit::ModelSpec;
using prunekit::Network;

struct Act {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(int i, int ch, int y, int x) { return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  double at(int i, int ch, int y, int x) const { return v[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
};

/// Every parameter of a network as doubles, keyed by "layer.field".
using Params = std::map<std::string, std::vector<double>>;

inline Params params_of(const Network& net) {
  Params p;
  for (const auto& t : net.named_tensors()) {
    p[t.name] = std::vector<double>(t.tensor->vec().begin(), t.tensor->vec().end());
  }
  return p;
}

struct Result {
  double loss = 0.0;
  std::vector<double> logits;
  /// Sign of every ReLU input, to detect kinks crossed by a perturbation.
  std::vector<bool> relu_signs;
};

inline Result forward(const ModelSpec& spec, const Params& P, const prunekit::Tensor& batch,
                      const std::vector<int>& labels, double eps = 1e-5) {
  std::map<std::string, Act> out;
  Result res;
  auto get = [&](const std::string& key) -> const std::vector<double>& {
    static const std::vector<double> kEmpty;
    auto it = P.find(key);
    return it == P.end() ? kEmpty : it->second;
  };
  for (const auto& l : spec.layers) {
    Act y;
    switch (l.kind) {
      case LayerKind::kInput: {
        y.n = batch.dim(0), y.c = batch.dim(1), y.h = batch.dim(2), y.w = batch.dim(3);
        y.v.assign(batch.vec().begin(), batch.vec().end());
        break;
      }
      case LayerKind::kConv2d: {
        const Act& x = out.at(l.inputs[0]);
        const auto& W = get(l.id + ".weight");
        const auto& B = get(l.id + ".bias");
        const auto& phi = get(l.id + ".phi");
        const int k = l.kernel, s = l.stride, pd = l.padding;
        y.n = x.n, y.c = l.out_channels;
        y.h = (x.h + 2 * pd - k) / s + 1;
        y.w = (x.w + 2 * pd - k) / s + 1;
        y.v.assign(static_cast<std::size_t>(y.n) * y.c * y.h * y.w, 0.0);
        for (int i = 0; i < y.n; ++i)
          for (int f = 0; f < y.c; ++f)
            for (int oy = 0; oy < y.h; ++oy)
              for (int ox = 0; ox < y.w; ++ox) {
                double acc = B.empty() ? 0.0 : B[static_cast<std::size_t>(f)];
                for (int c = 0; c < x.c; ++c)
                  for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                      const int iy = oy * s - pd + ky, ix = ox * s - pd + kx;
                      if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                      acc += W[((static_cast<std::size_t>(f) * x.c + c) * k + ky) * k + kx] * x.at(i, c, iy, ix);
                    }
                if (!phi.empty()) acc *= phi[static_cast<std::size_t>(f)];
                y.at(i, f, oy, ox) = acc;
              }
        break;
      }
      case LayerKind::kBatchNorm: {
        const Act& x = out.at(l.inputs[0]);
        y = x;
        const auto& g = get(l.id + ".gamma");
        const auto& b = get(l.id + ".beta");
        const auto& phi = get(l.id + ".phi");
        const double m = static_cast<double>(x.n) * x.h * x.w;
        for (int c = 0; c < x.c; ++c) {
          double mean = 0.0, var = 0.0;
          for (int i = 0; i < x.n; ++i)
            for (int yy = 0; yy < x.h; ++yy)
              for (int xx = 0; xx < x.w; ++xx) mean += x.at(i, c, yy, xx);
          mean /= m;
          for (int i = 0; i < x.n; ++i)
            for (int yy = 0; yy < x.h; ++yy)
              for (int xx = 0; xx < x.w; ++xx) var += (x.at(i, c, yy, xx) - mean) * (x.at(i, c, yy, xx) - mean);
          var /= m;
          const double inv = 1.0 / std::sqrt(var + eps);
          const double gate = phi.empty() ? 1.0 : phi[static_cast<std::size_t>(c)];
          for (int i = 0; i < x.n; ++i)
            for (int yy = 0; yy < x.h; ++yy)
              for (int xx = 0; xx < x.w; ++xx) {
                const double zhat = (x.at(i, c, yy, xx) - mean) * inv;
                y.at(i, c, yy, xx) = gate * (g[static_cast<std::size_t>(c)] * zhat + b[static_cast<std::size_t>(c)]);
              }
        }
        break;
      }
      case LayerKind::kReLU: {
        y = out.at(l.inputs[0]);
        for (auto& v : y.v) {
          res.relu_signs.push_back(v > 0.0);
          v = v > 0.0 ? v : 0.0;
        }
        break;
      }
      case LayerKind::kMaxPool: {
        const Act& x = out.at(l.inputs[0]);
        const int k = l.kernel;
        y.n = x.n, y.c = x.c, y.h = x.h / k, y.w = x.w / k;
        y.v.assign(static_cast<std::size_t>(y.n) * y.c * y.h * y.w, 0.0);
        for (int i = 0; i < y.n; ++i)
          for (int c = 0; c < y.c; ++c)
            for (int oy = 0; oy < y.h; ++oy)
              for (int ox = 0; ox < y.w; ++ox) {
                double best = -1e300;
                for (int ky = 0; ky < k; ++ky)
                  for (int kx = 0; kx < k; ++kx) best = std::max(best, x.at(i, c, oy * k + ky, ox * k + kx));
                y.at(i, c, oy, ox) = best;
              }
        break;
      }
      case LayerKind::kAvgPool: {
        const Act& x = out.at(l.inputs[0]);
        y.n = x.n, y.c = x.c, y.h = 1, y.w = 1;
        y.v.assign(static_cast<std::size_t>(y.n) * y.c, 0.0);
        for (int i = 0; i < x.n; ++i)
          for (int c = 0; c < x.c; ++c) {
            double s = 0.0;
            for (int yy = 0; yy < x.h; ++yy)
              for (int xx = 0; xx < x.w; ++xx) s += x.at(i, c, yy, xx);
            y.at(i, c, 0, 0) = s / (x.h * x.w);
          }
        break;
      }
      case LayerKind::kAdd: {
        y = out.at(l.inputs[0]);
        const Act& b = out.at(l.inputs[1]);
        for (std::size_t j = 0; j < y.v.size(); ++j) y.v[j] += b.v[j];
        break;
      }
      case LayerKind::kFlatten: {
        const Act& x = out.at(l.inputs[0]);
        y = x;
        y.c = x.c * x.h * x.w, y.h = 1, y.w = 1;
        break;
      }
      case LayerKind::kLinear: {
        const Act& x = out.at(l.inputs[0]);
        const auto& W = get(l.id + ".weight");
        const auto& B = get(l.id + ".bias");
        y.n = x.n, y.c = l.out_channels, y.h = 1, y.w = 1;
        y.v.assign(static_cast<std::size_t>(y.n) * y.c, 0.0);
        for (int i = 0; i < y.n; ++i)
          for (int o = 0; o < y.c; ++o) {
            double acc = B.empty() ? 0.0 : B[static_cast<std::size_t>(o)];
            for (int j = 0; j < x.c; ++j) acc += W[static_cast<std::size_t>(o) * x.c + j] * x.v[static_cast<std::size_t>(i) * x.c + j];
            y.at(i, o, 0, 0) = acc;
          }
        break;
      }
    }
    out[l.id] = std::move(y);
  }
  const Act& logits = out.at(spec.layers[static_cast<std::size_t>(spec.output_index())].id);
  res.logits = logits.v;
  if (!labels.empty()) {
    double total = 0.0;
    for (int i = 0; i < logits.n; ++i) {
      double mx = -1e300;
      for (int o = 0; o < logits.c; ++o) mx = std::max(mx, logits.at(i, o, 0, 0));
      double z = 0.0;
      for (int o = 0; o < logits.c; ++o) z += std::exp(logits.at(i, o, 0, 0) - mx);
      total += -(logits.at(i, labels[static_cast<std::size_t>(i)], 0, 0) - mx - std::log(z));
    }
    res.loss = total / logits.n;
  }
  return res;
}

struct FiniteDifference {
  double value = 0.0;
  /// A ReLU input changed sign between the two evaluations.
  bool kink = false;
};

inline FiniteDifference central_difference(const ModelSpec& spec, Params P, const std::string& key, std::size_t index,
                                           const prunekit::Tensor& batch, const std::vector<int>& labels,
                                           double h = 1e-3) {
  const double saved = P.at(key)[index];
  P.at(key)[index] = saved + h;
  const Result plus = forward(spec, P, batch, labels);
  P.at(key)[index] = saved - h;
  const Result minus = forward(spec, P, batch, labels);
  return {(plus.loss - minus.loss) / (2.0 * h), plus.relu_signs != minus.relu_signs};
}

}  // namespace oracle
