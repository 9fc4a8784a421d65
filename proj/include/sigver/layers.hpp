#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/parallel.hpp"
#include "sigver/tensor.hpp"

namespace sigver {

/// Output extent of a conv/pool window: floor((in + 2p - k)/s) + 1, or a
/// non-positive value when the window does not fit.
inline long window_out_dim(long in, long kernel, long stride, long pad) {
  const long span = in + 2 * pad - kernel;
  if (span < 0) return 0;
  return span / stride + 1;
}

namespace detail {

inline std::size_t checked_out_dim(std::size_t in, std::size_t k, std::size_t s, std::size_t p,
                                   const char* what) {
  require(s >= 1 && k >= 1, Errc::InvalidArgument, std::string(what) + ": kernel and stride must be >= 1");
  const long d = window_out_dim(static_cast<long>(in), static_cast<long>(k), static_cast<long>(s),
                                static_cast<long>(p));
  require(d >= 1, Errc::ShapeMismatch, std::string(what) + ": window does not fit input");
  return static_cast<std::size_t>(d);
}

// Lays out the receptive fields of one sample as col[k_index][out_pixel].
template <typename T>
void im2col(const T* in, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t s,
            std::size_t p, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = in + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(W)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::size_t s,
                std::size_t p, std::size_t Ho, std::size_t Wo, T* out) {
  const std::size_t P = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * P;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          T* dst = out + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
            if (ix >= 0 && ix < static_cast<long>(W)) dst[ix] += row[oy * Wo + ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------- conv2d

/// Cross-correlation of input [B,C,H,W] with weights [F,C,k,k] plus bias [F].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding, unsigned threads = 1) {
  require(input.rank() == 4 && weights.rank() == 4, Errc::ShapeMismatch, "conv2d expects 4-d input and weights");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weights.dim(0), k = weights.dim(2);
  require(weights.dim(1) == C, Errc::ShapeMismatch,
          "conv2d channel mismatch: input " + shape_str(input.shape()) + " weights " + shape_str(weights.shape()));
  require(weights.dim(3) == k, Errc::ShapeMismatch, "conv2d expects square kernels");
  require(bias.size() == F, Errc::ShapeMismatch, "conv2d bias length must equal filter count");
  const std::size_t Ho = detail::checked_out_dim(H, k, stride, padding, "conv2d");
  const std::size_t Wo = detail::checked_out_dim(W, k, stride, padding, "conv2d");
  const std::size_t K = C * k * k, P = Ho * Wo;

  Tensor<T> out({B, F, Ho, Wo});
  const T* wt = weights.ptr();
  parallel_for(B, threads, [&](std::size_t n) {
    std::vector<T> col(K * P);
    detail::im2col(input.ptr() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, col.data());
    T* o = out.ptr() + n * F * P;
    for (std::size_t f = 0; f < F; ++f) {
      T* orow = o + f * P;
      std::fill(orow, orow + P, bias[f]);
      for (std::size_t kk = 0; kk < K; ++kk) {
        const T wv = wt[f * K + kk];
        const T* crow = col.data() + kk * P;
        for (std::size_t q = 0; q < P; ++q) orow[q] += wv * crow[q];
      }
    }
  });
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

/// Exact gradients of conv2d. Per-sample weight gradients are reduced in
/// sample order, independent of `threads`.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const Tensor<T>& weights, std::size_t stride,
                             std::size_t padding, const Tensor<T>& grad_out, bool want_input_grad = true,
                             unsigned threads = 1) {
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weights.dim(0), k = weights.dim(2);
  const std::size_t Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  require(grad_out.dim(0) == B && grad_out.dim(1) == F, Errc::ShapeMismatch, "conv2d_backward grad shape");
  const std::size_t K = C * k * k, P = Ho * Wo;

  ConvGrads<T> g;
  g.weights = Tensor<T>(weights.shape());
  g.bias = Tensor<T>({F});
  if (want_input_grad) g.input = Tensor<T>(input.shape());

  std::vector<T> per_sample_w(B * F * K, T(0));
  std::vector<T> per_sample_b(B * F, T(0));
  const T* wt = weights.ptr();
  parallel_for(B, threads, [&](std::size_t n) {
    std::vector<T> col(K * P), colT(P * K);
    detail::im2col(input.ptr() + n * C * H * W, C, H, W, k, stride, padding, Ho, Wo, col.data());
    for (std::size_t kk = 0; kk < K; ++kk)
      for (std::size_t q = 0; q < P; ++q) colT[q * K + kk] = col[kk * P + q];
    const T* go = grad_out.ptr() + n * F * P;
    T* gw = per_sample_w.data() + n * F * K;
    T* gb = per_sample_b.data() + n * F;
    for (std::size_t f = 0; f < F; ++f) {
      const T* grow = go + f * P;
      T* gwrow = gw + f * K;
      T bsum = 0;
      for (std::size_t q = 0; q < P; ++q) {
        const T gv = grow[q];
        bsum += gv;
        if (gv == T(0)) continue;
        const T* ct = colT.data() + q * K;
        for (std::size_t kk = 0; kk < K; ++kk) gwrow[kk] += gv * ct[kk];
      }
      gb[f] = bsum;
    }
    if (want_input_grad) {
      std::fill(col.begin(), col.end(), T(0));
      for (std::size_t f = 0; f < F; ++f) {
        const T* grow = go + f * P;
        for (std::size_t kk = 0; kk < K; ++kk) {
          const T wv = wt[f * K + kk];
          T* crow = col.data() + kk * P;
          for (std::size_t q = 0; q < P; ++q) crow[q] += wv * grow[q];
        }
      }
      detail::col2im_add(col.data(), C, H, W, k, stride, padding, Ho, Wo, g.input.ptr() + n * C * H * W);
    }
  });
  for (std::size_t n = 0; n < B; ++n) {
    const T* gw = per_sample_w.data() + n * F * K;
    for (std::size_t i = 0; i < F * K; ++i) g.weights[i] += gw[i];
    for (std::size_t f = 0; f < F; ++f) g.bias[f] += per_sample_b[n * F + f];
  }
  return g;
}

// ---------------------------------------------------------------- max pool

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

template <typename T>
PoolResult<T> max_pool(const Tensor<T>& input, std::size_t size, std::size_t stride, std::size_t padding) {
  require(input.rank() == 4, Errc::ShapeMismatch, "max_pool expects 4-d input");
  require(padding < size, Errc::ShapeMismatch, "max_pool padding must be smaller than the window");
  const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = detail::checked_out_dim(H, size, stride, padding, "max_pool");
  const std::size_t Wo = detail::checked_out_dim(W, size, stride, padding, "max_pool");
  PoolResult<T> r{Tensor<T>({B, C, Ho, Wo}), std::vector<std::size_t>(B * C * Ho * Wo)};
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < B * C; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox, ++o) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        for (std::size_t ky = 0; ky < size; ++ky) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          for (std::size_t kx = 0; kx < size; ++kx) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
            if (ix < 0 || ix >= static_cast<long>(W)) continue;
            const std::size_t idx = base + static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
            if (best_idx == std::numeric_limits<std::size_t>::max() || input[idx] > best) {
              best = input[idx];
              best_idx = idx;
            }
          }
        }
        require(best_idx != std::numeric_limits<std::size_t>::max(), Errc::ShapeMismatch,
                "max_pool window lies entirely in padding");
        r.output[o] = best;
        r.argmax[o] = best_idx;
      }
  }
  return r;
}

/// Routes each output gradient to its window's first maximum.
template <typename T>
Tensor<T> max_pool_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                            const Tensor<T>& grad_out) {
  require(argmax.size() == grad_out.size(), Errc::ShapeMismatch, "max_pool_backward size mismatch");
  Tensor<T> g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

// ---------------------------------------------------------------- dense

/// Affine map: input [B,D] x weights [D,U] + bias [U].
template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require(input.rank() == 2 && weights.rank() == 2, Errc::ShapeMismatch, "dense expects 2-d operands");
  const std::size_t B = input.dim(0), D = input.dim(1), U = weights.dim(1);
  require(weights.dim(0) == D, Errc::ShapeMismatch,
          "dense dims: input " + shape_str(input.shape()) + " weights " + shape_str(weights.shape()));
  require(bias.size() == U, Errc::ShapeMismatch, "dense bias length must equal unit count");
  Tensor<T> out({B, U});
  for (std::size_t b = 0; b < B; ++b) {
    T* o = out.ptr() + b * U;
    std::copy(bias.ptr(), bias.ptr() + U, o);
    for (std::size_t d = 0; d < D; ++d) {
      const T x = input[b * D + d];
      if (x == T(0)) continue;
      const T* wrow = weights.ptr() + d * U;
      for (std::size_t u = 0; u < U; ++u) o[u] += x * wrow[u];
    }
  }
  return out;
}

template <typename T>
struct DenseGrads {
  Tensor<T> input;
  Tensor<T> weights;
  Tensor<T> bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& grad_out,
                             bool want_input_grad = true) {
  const std::size_t B = input.dim(0), D = input.dim(1), U = weights.dim(1);
  require(grad_out.dim(0) == B && grad_out.dim(1) == U, Errc::ShapeMismatch, "dense_backward grad shape");
  DenseGrads<T> g{want_input_grad ? Tensor<T>(input.shape()) : Tensor<T>(), Tensor<T>(weights.shape()),
                  Tensor<T>({U})};
  for (std::size_t b = 0; b < B; ++b) {
    const T* go = grad_out.ptr() + b * U;
    for (std::size_t u = 0; u < U; ++u) g.bias[u] += go[u];
    for (std::size_t d = 0; d < D; ++d) {
      const T x = input[b * D + d];
      T* gw = g.weights.ptr() + d * U;
      if (x != T(0))
        for (std::size_t u = 0; u < U; ++u) gw[u] += x * go[u];
      if (want_input_grad) {
        const T* wrow = weights.ptr() + d * U;
        T acc = 0;
        for (std::size_t u = 0; u < U; ++u) acc += wrow[u] * go[u];
        g.input[b * D + d] = acc;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------- batch norm

enum class Mode { train, infer };

template <typename T>
struct BatchNormState {
  std::vector<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels, T momentum_ = T(0.9), T epsilon_ = T(1e-5))
      : gamma(channels, T(1)), beta(channels, T(0)), running_mean(channels, T(0)),
        running_var(channels, T(1)), momentum(momentum_), epsilon(epsilon_) {}

  std::size_t channels() const noexcept { return gamma.size(); }
};

template <typename T>
struct BatchNormCache {
  Tensor<T> xhat;
  std::vector<T> inv_std;
};

namespace detail {
inline void bn_layout(const Shape& s, std::size_t& B, std::size_t& C, std::size_t& S) {
  require(s.size() >= 2, Errc::ShapeMismatch, "batch_norm expects [B,C,...] input");
  B = s[0];
  C = s[1];
  S = 1;
  for (std::size_t i = 2; i < s.size(); ++i) S *= s[i];
}
}  // namespace detail

/// Per-channel normalization over batch and spatial positions (train) or
/// with running statistics (infer). Train mode updates the running stats.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, Mode mode, BatchNormCache<T>* cache = nullptr) {
  std::size_t B, C, S;
  detail::bn_layout(input.shape(), B, C, S);
  require(state.channels() == C, Errc::ShapeMismatch, "batch_norm channel count mismatch");
  require(state.epsilon > T(0), Errc::InvalidArgument, "batch_norm epsilon must be positive");
  Tensor<T> out(input.shape());
  if (mode == Mode::infer) {
    for (std::size_t c = 0; c < C; ++c) {
      const T inv = T(1) / std::sqrt(state.running_var[c] + state.epsilon);
      const T scale = state.gamma[c] * inv;
      const T shift = state.beta[c] - state.running_mean[c] * scale;
      for (std::size_t b = 0; b < B; ++b) {
        const T* x = input.ptr() + (b * C + c) * S;
        T* y = out.ptr() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) y[i] = x[i] * scale + shift;
      }
    }
    return out;
  }

  require(B >= 2, Errc::BatchTooSmall, "train-mode batch_norm needs at least 2 samples, got " + std::to_string(B));
  const std::size_t count = B * S;
  if (cache) {
    cache->xhat = Tensor<T>(input.shape());
    cache->inv_std.assign(C, T(0));
  }
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* x = input.ptr() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) sum += x[i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* x = input.ptr() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const double d = x[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
    const T m = static_cast<T>(mean);
    for (std::size_t b = 0; b < B; ++b) {
      const T* x = input.ptr() + (b * C + c) * S;
      T* y = out.ptr() + (b * C + c) * S;
      T* xh = cache ? cache->xhat.ptr() + (b * C + c) * S : nullptr;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = (x[i] - m) * inv;
        if (xh) xh[i] = h;
        y[i] = state.gamma[c] * h + state.beta[c];
      }
    }
    if (cache) cache->inv_std[c] = inv;
    const double unbiased = sq / static_cast<double>(count - 1);
    state.running_mean[c] = static_cast<T>(state.momentum * state.running_mean[c] + (1 - state.momentum) * mean);
    state.running_var[c] = static_cast<T>(state.momentum * state.running_var[c] + (1 - state.momentum) * unbiased);
  }
  return out;
}

template <typename T>
struct BatchNormGrads {
  Tensor<T> input;
  std::vector<T> gamma, beta;
};

/// Exact gradients through train-mode normalization.
template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormState<T>& state, const BatchNormCache<T>& cache,
                                      const Tensor<T>& grad_out) {
  std::size_t B, C, S;
  detail::bn_layout(grad_out.shape(), B, C, S);
  const double count = static_cast<double>(B * S);
  BatchNormGrads<T> g{Tensor<T>(grad_out.shape()), std::vector<T>(C, T(0)), std::vector<T>(C, T(0))};
  for (std::size_t c = 0; c < C; ++c) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t b = 0; b < B; ++b) {
      const T* dy = grad_out.ptr() + (b * C + c) * S;
      const T* xh = cache.xhat.ptr() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    g.gamma[c] = static_cast<T>(sum_dy_xhat);
    g.beta[c] = static_cast<T>(sum_dy);
    const double k = state.gamma[c] * cache.inv_std[c] / count;
    const double mean_dy = sum_dy, mean_dyx = sum_dy_xhat;
    for (std::size_t b = 0; b < B; ++b) {
      const T* dy = grad_out.ptr() + (b * C + c) * S;
      const T* xh = cache.xhat.ptr() + (b * C + c) * S;
      T* dx = g.input.ptr() + (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i)
        dx[i] = static_cast<T>(k * (count * dy[i] - mean_dy - xh[i] * mean_dyx));
    }
  }
  return g;
}

// ---------------------------------------------------------------- relu / softmax

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

/// Gradient passes where the forward input was strictly positive.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require(logits.rank() == 2, Errc::ShapeMismatch, "softmax expects [B,M] logits");
  const std::size_t B = logits.dim(0), M = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * M;
    T* q = p.ptr() + b * M;
    const T mx = *std::max_element(z, z + M);
    double sum = 0;
    for (std::size_t m = 0; m < M; ++m) {
      q[m] = static_cast<T>(std::exp(static_cast<double>(z[m] - mx)));
      sum += q[m];
    }
    for (std::size_t m = 0; m < M; ++m) q[m] = static_cast<T>(q[m] / sum);
  }
  return p;
}

template <typename T>
struct LossAndGrad {
  double loss = 0;
  Tensor<T> grad;
  Tensor<T> probs;
};

/// Mean negative log-likelihood and its gradient (softmax - onehot)/B.
template <typename T>
LossAndGrad<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, Errc::ShapeMismatch, "softmax_cross_entropy expects [B,M] logits");
  const std::size_t B = logits.dim(0), M = logits.dim(1);
  require(labels.size() == B, Errc::ShapeMismatch, "one label per row required");
  for (int l : labels)
    require(l >= 0 && static_cast<std::size_t>(l) < M, Errc::LabelOutOfRange,
            "label " + std::to_string(l) + " outside [0," + std::to_string(M) + ")");
  LossAndGrad<T> r;
  r.probs = softmax(logits);
  r.grad = Tensor<T>(logits.shape());
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* z = logits.ptr() + b * M;
    const T mx = *std::max_element(z, z + M);
    double sum = 0;
    for (std::size_t m = 0; m < M; ++m) sum += std::exp(static_cast<double>(z[m] - mx));
    const auto y = static_cast<std::size_t>(labels[b]);
    loss += -(static_cast<double>(z[y] - mx) - std::log(sum));
    for (std::size_t m = 0; m < M; ++m)
      r.grad[b * M + m] = static_cast<T>((r.probs[b * M + m] - (m == y ? 1.0 : 0.0)) / static_cast<double>(B));
  }
  r.loss = loss / static_cast<double>(B);
  return r;
}

}  // namespace sigver
