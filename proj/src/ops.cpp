#include "prunekit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prunekit/error.hpp"

namespace prunekit::ops {

void gemm(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0f);
  // Four output rows share each B row load; every C element still sums over
  // p in increasing order.
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    float* c0 = c + static_cast<std::size_t>(i) * n;
    float* c1 = c0 + n;
    float* c2 = c1 + n;
    float* c3 = c2 + n;
    const float* a0 = a + static_cast<std::size_t>(i) * k;
    const float* a1 = a0 + k;
    const float* a2 = a1 + k;
    const float* a3 = a2 + k;
    for (int p = 0; p < k; ++p) {
      const float v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) {
        const float bv = brow[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    float* crow = c + static_cast<std::size_t>(i) * n;
    const float* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const float av = arow[p];
      const float* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void transpose(int rows, int cols, const float* src, float* dst) {
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
    }
  }
}

int conv_out_extent(int in, int kernel, int stride, int padding) {
  if (stride < 1) fail(ErrorCode::kArgument, "stride must be >= 1");
  const int span = in + 2 * padding - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace {

void check_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    fail(ErrorCode::kStructural, std::string(what) + " expects rank " + std::to_string(rank) +
                                     ", got " + shape_str(t.shape()));
  }
}

// col[(c*k + ky)*k + kx, oy*ow + ox]
void im2col(const float* x, int channels, int h, int w, int k, Conv2dGeometry geo, int oh, int ow,
            float* col) {
  const int hw_out = oh * ow;
  for (int c = 0; c < channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * hw_out;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * geo.stride - geo.padding + ky;
          float* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * geo.stride - geo.padding + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int channels, int h, int w, int k, Conv2dGeometry geo, int oh, int ow,
            float* x) {
  const int hw_out = oh * ow;
  for (int c = 0; c < channels; ++c) {
    float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * hw_out;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * geo.stride - geo.padding + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = xc + static_cast<std::size_t>(iy) * w;
          const float* src = row + oy * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * geo.stride - geo.padding + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dGeometry geo) {
  check_rank(x, 4, "conv2d input");
  check_rank(w, 4, "conv2d weight");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int f = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(3) != k) {
    fail(ErrorCode::kStructural, "conv2d weight " + shape_str(w.shape()) + " incompatible with input " +
                                     shape_str(x.shape()));
  }
  const int oh = conv_out_extent(h, k, geo.stride, geo.padding);
  const int ow = conv_out_extent(wd, k, geo.stride, geo.padding);
  if (oh <= 0 || ow <= 0) fail(ErrorCode::kStructural, "conv2d output is empty for input " + shape_str(x.shape()));
  const int ckk = c * k * k;
  const int hw_out = oh * ow;
  Tensor y({n, f, oh, ow});
  std::vector<float> col(static_cast<std::size_t>(ckk) * hw_out);
  for (int s = 0; s < n; ++s) {
    im2col(x.ptr() + static_cast<std::size_t>(s) * c * h * wd, c, h, wd, k, geo, oh, ow, col.data());
    float* ys = y.ptr() + static_cast<std::size_t>(s) * f * hw_out;
    gemm(f, hw_out, ckk, w.ptr(), col.data(), ys, false);
    if (!bias.empty()) {
      for (int o = 0; o < f; ++o) {
        float* yo = ys + static_cast<std::size_t>(o) * hw_out;
        const float b = bias[static_cast<std::size_t>(o)];
        for (int i = 0; i < hw_out; ++i) yo[i] += b;
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Conv2dGeometry geo,
                     Tensor* dx, Tensor* dw, Tensor* dbias) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int f = w.dim(0), k = w.dim(2);
  const int oh = dy.dim(2), ow = dy.dim(3);
  const int ckk = c * k * k;
  const int hw_out = oh * ow;
  std::vector<float> col(static_cast<std::size_t>(ckk) * hw_out);
  std::vector<float> col_t;
  std::vector<float> w_t;
  if (dw) {
    *dw = Tensor(w.shape());
    col_t.resize(col.size());
  }
  if (dbias) *dbias = Tensor({f});
  if (dx) {
    *dx = Tensor(x.shape());
    w_t.resize(static_cast<std::size_t>(f) * ckk);
    transpose(f, ckk, w.ptr(), w_t.data());
  }
  for (int s = 0; s < n; ++s) {
    const float* dys = dy.ptr() + static_cast<std::size_t>(s) * f * hw_out;
    if (dw) {
      im2col(x.ptr() + static_cast<std::size_t>(s) * c * h * wd, c, h, wd, k, geo, oh, ow, col.data());
      transpose(ckk, hw_out, col.data(), col_t.data());
      gemm(f, ckk, hw_out, dys, col_t.data(), dw->ptr(), s > 0);
    }
    if (dbias) {
      for (int o = 0; o < f; ++o) {
        const float* d = dys + static_cast<std::size_t>(o) * hw_out;
        float acc = 0.0f;
        for (int i = 0; i < hw_out; ++i) acc += d[i];
        (*dbias)[static_cast<std::size_t>(o)] += acc;
      }
    }
    if (dx) {
      gemm(ckk, hw_out, f, w_t.data(), dys, col.data(), false);
      col2im(col.data(), c, h, wd, k, geo, oh, ow, dx->ptr() + static_cast<std::size_t>(s) * c * h * wd);
    }
  }
}

namespace {
std::size_t spatial_size(const Tensor& t) {
  std::size_t s = 1;
  for (int i = 2; i < t.rank(); ++i) s *= static_cast<std::size_t>(t.dim(i));
  return s;
}
}  // namespace

Tensor scale_channels(const Tensor& x, const Tensor& phi) {
  const int n = x.dim(0), c = x.dim(1);
  if (static_cast<int>(phi.numel()) != c) fail(ErrorCode::kStructural, "gate length does not match channels");
  const std::size_t hw = spatial_size(x);
  Tensor y(x.shape());
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      const float g = phi[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < hw; ++i) y[off + i] = g * x[off + i];
    }
  }
  return y;
}

void scale_channels_backward(const Tensor& x, const Tensor& phi, const Tensor& dy, Tensor* dx,
                             Tensor* dphi) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = spatial_size(x);
  std::vector<double> acc(static_cast<std::size_t>(c), 0.0);
  if (dx) *dx = Tensor(x.shape());
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      const float g = phi[static_cast<std::size_t>(ch)];
      double a = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        a += static_cast<double>(dy[off + i]) * x[off + i];
        if (dx) (*dx)[off + i] = g * dy[off + i];
      }
      acc[static_cast<std::size_t>(ch)] += a;
    }
  }
  if (dphi) {
    *dphi = Tensor({c});
    for (int ch = 0; ch < c; ++ch) (*dphi)[static_cast<std::size_t>(ch)] = static_cast<float>(acc[static_cast<std::size_t>(ch)]);
  }
}

Tensor batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          const Tensor& phi, Tensor& running_mean, Tensor& running_var,
                          bool batch_stats, bool update_running, float momentum, float eps,
                          BatchNormCache* cache) {
  check_rank(x, 4, "batch norm input");
  const int n = x.dim(0), c = x.dim(1);
  if (static_cast<int>(gamma.numel()) != c || static_cast<int>(beta.numel()) != c ||
      (!phi.empty() && static_cast<int>(phi.numel()) != c)) {
    fail(ErrorCode::kStructural, "batch norm parameters do not match " + std::to_string(c) + " channels");
  }
  const std::size_t hw = spatial_size(x);
  const double count = static_cast<double>(n) * static_cast<double>(hw);
  Tensor z(x.shape());
  Tensor xhat(x.shape());
  std::vector<float> inv_std(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    const auto cu = static_cast<std::size_t>(ch);
    double mean = 0.0, var = 0.0;
    if (batch_stats) {
      for (int s = 0; s < n; ++s) {
        const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) mean += x[off + i];
      }
      mean /= count;
      for (int s = 0; s < n; ++s) {
        const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = x[off + i] - mean;
          var += d * d;
        }
      }
      var /= count;
      if (update_running) {
        running_mean[cu] = static_cast<float>((1.0 - momentum) * running_mean[cu] + momentum * mean);
        running_var[cu] = static_cast<float>((1.0 - momentum) * running_var[cu] + momentum * var);
      }
    } else {
      mean = running_mean[cu];
      var = running_var[cu];
    }
    const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float mu = static_cast<float>(mean);
    inv_std[cu] = istd;
    const float g = gamma[cu], b = beta[cu];
    const float gate = phi.empty() ? 1.0f : phi[cu];
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const float xh = (x[off + i] - mu) * istd;
        xhat[off + i] = xh;
        const float y = g * xh + b;
        z[off + i] = phi.empty() ? y : gate * y;
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->batch_stats = batch_stats;
  }
  return z;
}

void batch_norm_backward(const Tensor& dz, const Tensor& gamma, const Tensor& beta,
                         const Tensor& phi, const BatchNormCache& cache, Tensor* dx,
                         Tensor* dgamma, Tensor* dbeta, Tensor* dphi) {
  const Tensor& xhat = cache.xhat;
  const int n = xhat.dim(0), c = xhat.dim(1);
  const std::size_t hw = spatial_size(xhat);
  const double count = static_cast<double>(n) * static_cast<double>(hw);
  if (dx) *dx = Tensor(xhat.shape());
  if (dgamma) *dgamma = Tensor({c});
  if (dbeta) *dbeta = Tensor({c});
  if (dphi) *dphi = Tensor({c});
  for (int ch = 0; ch < c; ++ch) {
    const auto cu = static_cast<std::size_t>(ch);
    const float g = gamma[cu], b = beta[cu];
    const float gate = phi.empty() ? 1.0f : phi[cu];
    double sum_dy = 0.0, sum_dy_xhat = 0.0, sum_dphi = 0.0;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = dz[off + i];
        const double xh = xhat[off + i];
        sum_dphi += d * (static_cast<double>(g) * xh + b);
        const double dy = d * gate;
        sum_dy += dy;
        sum_dy_xhat += dy * xh;
      }
    }
    if (dgamma) (*dgamma)[cu] = static_cast<float>(sum_dy_xhat);
    if (dbeta) (*dbeta)[cu] = static_cast<float>(sum_dy);
    if (dphi) (*dphi)[cu] = static_cast<float>(sum_dphi);
    if (!dx) continue;
    const double scale = static_cast<double>(g) * cache.inv_std[cu];
    const double mean_dy = sum_dy / count;
    const double mean_dy_xhat = sum_dy_xhat / count;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const double dy = static_cast<double>(dz[off + i]) * gate;
        const double v = cache.batch_stats ? scale * (dy - mean_dy - xhat[off + i] * mean_dy_xhat) : scale * dy;
        (*dx)[off + i] = static_cast<float>(v);
      }
    }
  }
}

Tensor relu_forward(const Tensor& x) {
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) dx[i] = x[i] > 0.0f ? dy[i] : 0.0f;
  return dx;
}

Tensor max_pool_forward(const Tensor& x, int kernel, std::vector<int>* argmax) {
  check_rank(x, 4, "max pool input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / kernel, ow = w / kernel;
  if (oh <= 0 || ow <= 0) fail(ErrorCode::kStructural, "max pool output is empty for input " + shape_str(x.shape()));
  Tensor y({n, c, oh, ow});
  if (argmax) argmax->assign(y.numel(), 0);
  std::size_t out = 0;
  for (int plane = 0; plane < n * c; ++plane) {
    const std::size_t base = static_cast<std::size_t>(plane) * h * w;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox, ++out) {
        std::size_t best = base + static_cast<std::size_t>(oy * kernel) * w + ox * kernel;
        float bv = x[best];
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = base + static_cast<std::size_t>(oy * kernel + ky) * w + ox * kernel + kx;
            if (x[idx] > bv) {
              bv = x[idx];
              best = idx;
            }
          }
        }
        y[out] = bv;
        if (argmax) (*argmax)[out] = static_cast<int>(best);
      }
    }
  }
  return y;
}

Tensor max_pool_backward(const Shape& x_shape, const Tensor& dy, const std::vector<int>& argmax) {
  Tensor dx(x_shape);
  for (std::size_t i = 0; i < dy.numel(); ++i) dx[static_cast<std::size_t>(argmax[i])] += dy[i];
  return dx;
}

Tensor global_avg_pool_forward(const Tensor& x) {
  check_rank(x, 4, "avg pool input");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t hw = spatial_size(x);
  Tensor y({n, c, 1, 1});
  for (std::size_t plane = 0; plane < static_cast<std::size_t>(n) * c; ++plane) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[plane * hw + i];
    y[plane] = static_cast<float>(acc / static_cast<double>(hw));
  }
  return y;
}

Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy) {
  Tensor dx(x_shape);
  const std::size_t hw = static_cast<std::size_t>(x_shape[2]) * x_shape[3];
  const float inv = 1.0f / static_cast<float>(hw);
  for (std::size_t plane = 0; plane < dy.numel(); ++plane) {
    const float g = dy[plane] * inv;
    for (std::size_t i = 0; i < hw; ++i) dx[plane * hw + i] = g;
  }
  return dx;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias) {
  check_rank(x, 2, "linear input");
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) {
    fail(ErrorCode::kStructural, "linear weight " + shape_str(w.shape()) + " incompatible with input " +
                                     shape_str(x.shape()));
  }
  std::vector<float> wt(static_cast<std::size_t>(in) * out);
  transpose(out, in, w.ptr(), wt.data());
  Tensor y({n, out});
  gemm(n, out, in, x.ptr(), wt.data(), y.ptr(), false);
  if (!bias.empty()) {
    for (int s = 0; s < n; ++s) {
      for (int o = 0; o < out; ++o) y[static_cast<std::size_t>(s) * out + o] += bias[static_cast<std::size_t>(o)];
    }
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw,
                     Tensor* dbias) {
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (dw) {
    std::vector<float> dyt(static_cast<std::size_t>(n) * out);
    transpose(n, out, dy.ptr(), dyt.data());
    *dw = Tensor(w.shape());
    gemm(out, in, n, dyt.data(), x.ptr(), dw->ptr(), false);
  }
  if (dbias) {
    *dbias = Tensor({out});
    for (int s = 0; s < n; ++s) {
      for (int o = 0; o < out; ++o) (*dbias)[static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(s) * out + o];
    }
  }
  if (dx) {
    *dx = Tensor(x.shape());
    gemm(n, in, out, dy.ptr(), w.ptr(), dx->ptr(), false);
  }
}

Tensor add_forward(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorCode::kStructural, "elementwise add operands differ: " + shape_str(a.shape()) + " vs " +
                                     shape_str(b.shape()));
  }
  Tensor y(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) y[i] = a[i] + b[i];
  return y;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
  check_rank(logits, 2, "softmax cross-entropy logits");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    fail(ErrorCode::kStructural, "label count " + std::to_string(labels.size()) + " != batch size " +
                                     std::to_string(n));
  }
  if (dlogits) *dlogits = Tensor(logits.shape());
  double total = 0.0;
  std::vector<double> p(static_cast<std::size_t>(k));
  for (int s = 0; s < n; ++s) {
    const int label = labels[static_cast<std::size_t>(s)];
    if (label < 0 || label >= k) fail(ErrorCode::kArgument, "label " + std::to_string(label) + " out of range");
    const float* row = logits.ptr() + static_cast<std::size_t>(s) * k;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      p[static_cast<std::size_t>(j)] = std::exp(row[j] - mx);
      sum += p[static_cast<std::size_t>(j)];
    }
    total += std::log(sum) + mx - row[label];
    if (dlogits) {
      float* drow = dlogits->ptr() + static_cast<std::size_t>(s) * k;
      for (int j = 0; j < k; ++j) {
        const double pj = p[static_cast<std::size_t>(j)] / sum;
        drow[j] = static_cast<float>((pj - (j == label ? 1.0 : 0.0)) / n);
      }
    }
  }
  return total / n;
}

}  // namespace prunekit::ops
