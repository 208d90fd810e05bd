#pragma once

#include <span>
#include <vector>

#include "prunekit/tensor.hpp"

// Forward/backward kernels. All reductions run sequentially in a fixed index
// order so results are bit-reproducible.
namespace prunekit::ops {

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major. Each C element accumulates
/// over k in increasing order.
void gemm(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);

/// dst[cols, rows] = src[rows, cols]
void transpose(int rows, int cols, const float* src, float* dst);

struct Conv2dGeometry {
  int stride = 1;
  int padding = 0;
};

int conv_out_extent(int in, int kernel, int stride, int padding);

/// x (N,C,H,W), w (F,C,k,k), bias (F) or empty. Returns (N,F,H',W').
Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dGeometry geo);

/// Null outputs are skipped. Gradients are overwritten, not accumulated.
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Conv2dGeometry geo,
                     Tensor* dx, Tensor* dw, Tensor* dbias);

/// y[n,c,...] = phi[c] * x[n,c,...]
Tensor scale_channels(const Tensor& x, const Tensor& phi);

/// dx = phi * dy, dphi[c] = sum over (n, spatial) of dy * x.
void scale_channels_backward(const Tensor& x, const Tensor& phi, const Tensor& dy, Tensor* dx,
                             Tensor* dphi);

struct BatchNormCache {
  Tensor xhat;
  std::vector<float> inv_std;
  bool batch_stats = false;
};

/// z = phi * (gamma * xhat + beta) per channel; phi may be empty (vanilla BN).
/// With batch_stats the biased batch variance is used and, when
/// update_running is set, running stats move with `momentum`.
Tensor batch_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          const Tensor& phi, Tensor& running_mean, Tensor& running_var,
                          bool batch_stats, bool update_running, float momentum, float eps,
                          BatchNormCache* cache);

void batch_norm_backward(const Tensor& dz, const Tensor& gamma, const Tensor& beta,
                         const Tensor& phi, const BatchNormCache& cache, Tensor* dx,
                         Tensor* dgamma, Tensor* dbeta, Tensor* dphi);

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& dy);

/// Square window, stride == kernel, floor output size. `argmax` receives the
/// flat input index selected for each output element.
Tensor max_pool_forward(const Tensor& x, int kernel, std::vector<int>* argmax);
Tensor max_pool_backward(const Shape& x_shape, const Tensor& dy, const std::vector<int>& argmax);

/// Global average pooling: (N,C,H,W) -> (N,C,1,1).
Tensor global_avg_pool_forward(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy);

/// x (N,in), w (out,in), bias (out). Returns (N,out).
Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& bias);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw,
                     Tensor* dbias);

Tensor add_forward(const Tensor& a, const Tensor& b);

/// Mean softmax cross-entropy over the batch. When dlogits is non-null it
/// receives d(loss)/d(logits).
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits);

}  // namespace prunekit::ops
