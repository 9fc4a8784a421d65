#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sigver/error.hpp"
#include "sigver/layers.hpp"
#include "sigver/netspec.hpp"
#include "sigver/optim.hpp"
#include "sigver/rng.hpp"
#include "sigver/tensor.hpp"

namespace sigver {

template <std::floating_point T>
struct ParamRef {
  std::string name;
  LayerKind kind;  // layer type owning the parameter
  std::span<T> value;
  std::span<T> grad;
};

/// A network instantiated from a NetworkSpec. Conv/dense layers that feed a
/// batchnorm carry no bias (the batchnorm shift subsumes it); the head does.
template <std::floating_point T>
class Network {
 public:
  using value_type = T;

  struct Layer {
    LayerSpec spec;
    bool has_bias = false;
    Tensor<T> weights, bias, grad_weights, grad_bias;
    BatchNormState<T> bn;
    std::vector<T> grad_gamma, grad_beta;

    // forward caches
    Tensor<T> input;
    BatchNormCache<T> bn_cache;
    std::vector<std::size_t> argmax;
  };

  Network() = default;

  /// Glorot-uniform weights, zero biases, gamma 1, beta 0.
  Network(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    validate_spec(spec_);
    const auto plan = shape_plan(spec_);
    Rng rng(seed);
    std::size_t c = 1, h = spec_.input_h, w = spec_.input_w;
    layers_.resize(spec_.layers.size());
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
      Layer& L = layers_[i];
      L.spec = spec_.layers[i];
      const bool feeds_bn = i + 1 < spec_.layers.size() && spec_.layers[i + 1].kind == LayerKind::batchnorm;
      switch (L.spec.kind) {
        case LayerKind::conv: {
          const std::size_t k = L.spec.kernel, f = L.spec.units;
          L.weights = Tensor<T>({f, c, k, k});
          glorot(L.weights, c * k * k, f * k * k, rng);
          L.has_bias = !feeds_bn;
          L.bias = Tensor<T>({f});
          break;
        }
        case LayerKind::dense: {
          const std::size_t d = c * h * w, u = L.spec.units;
          L.weights = Tensor<T>({d, u});
          glorot(L.weights, d, u, rng);
          L.has_bias = !feeds_bn;
          L.bias = Tensor<T>({u});
          break;
        }
        case LayerKind::batchnorm:
          L.bn = BatchNormState<T>(c, T(0.9), T(1e-5));
          break;
        default:
          break;
      }
      c = plan[i].channels;
      h = plan[i].height;
      w = plan[i].width;
    }
    zero_grads();
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::vector<Layer>& layers() noexcept { return layers_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }

  void set_threads(unsigned t) { threads_ = std::max(1u, t); }
  unsigned threads() const noexcept { return threads_; }

  void set_bn_momentum(T m) {
    for (auto& L : layers_)
      if (L.spec.kind == LayerKind::batchnorm) L.bn.momentum = m;
  }

  /// Hash of the ReLU on/off pattern and pooling argmax of the last forward
  /// pass (tracked only when enabled); used to detect kink crossings.
  void track_pattern(bool on) { track_pattern_ = on; }
  std::uint64_t pattern_hash() const noexcept { return pattern_hash_; }

  /// Runs layers [0, stop) and returns the activation. Train mode caches
  /// what backward() needs.
  Tensor<T> forward_range(const Tensor<T>& input, Mode mode, std::size_t stop) {
    require(input.rank() == 4 && input.dim(1) == 1 && input.dim(2) == spec_.input_h &&
                input.dim(3) == spec_.input_w,
            Errc::ShapeMismatch,
            "network expects [B,1," + std::to_string(spec_.input_h) + "," + std::to_string(spec_.input_w) +
                "] input, got " + shape_str(input.shape()));
    input.check_finite("network input");
    pattern_hash_ = 0xCBF29CE484222325ULL;
    const bool cache = mode == Mode::train;
    Tensor<T> x = input;
    for (std::size_t i = 0; i < stop; ++i) {
      Layer& L = layers_[i];
      if (cache) L.input = x;
      switch (L.spec.kind) {
        case LayerKind::conv:
          x = conv2d(x, L.weights, L.bias, L.spec.stride, L.spec.padding, threads_);
          break;
        case LayerKind::pool: {
          auto r = max_pool(x, L.spec.kernel, L.spec.stride, L.spec.padding);
          if (track_pattern_)
            for (auto a : r.argmax) mix(a);
          if (cache) L.argmax = std::move(r.argmax);
          x = std::move(r.output);
          break;
        }
        case LayerKind::dense: {
          if (x.rank() != 2) x = x.reshaped({x.dim(0), x.size() / x.dim(0)});
          if (cache) L.input = x;
          x = dense(x, L.weights, L.bias);
          break;
        }
        case LayerKind::batchnorm:
          x = batch_norm(x, L.bn, mode, cache ? &L.bn_cache : nullptr);
          break;
        case LayerKind::relu:
          if (track_pattern_)
            for (std::size_t j = 0; j < x.size(); ++j) mix(x[j] > T(0));
          x = relu(x);
          break;
        case LayerKind::softmax:
          break;  // the loss consumes logits directly
      }
    }
    return x;
  }

  /// Logits (head output) for a batch.
  Tensor<T> forward(const Tensor<T>& input, Mode mode) { return forward_range(input, mode, layers_.size()); }

  /// Backpropagates d(loss)/d(logits) through the cached train-mode pass.
  /// Parameter gradients are overwritten; the input gradient is kept.
  void backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = grad_logits;
    for (std::size_t idx = layers_.size(); idx-- > 0;) {
      Layer& L = layers_[idx];
      switch (L.spec.kind) {
        case LayerKind::softmax:
          break;
        case LayerKind::dense: {
          auto d = dense_backward(L.input, L.weights, g, true);
          store(L, d.weights, d.bias);
          g = std::move(d.input);
          break;
        }
        case LayerKind::batchnorm: {
          if (g.shape() != L.bn_cache.xhat.shape()) g = g.reshaped(L.bn_cache.xhat.shape());
          auto d = batch_norm_backward(L.bn, L.bn_cache, g);
          std::copy(d.gamma.begin(), d.gamma.end(), L.grad_gamma.begin());
          std::copy(d.beta.begin(), d.beta.end(), L.grad_beta.begin());
          g = std::move(d.input);
          break;
        }
        case LayerKind::relu:
          if (g.shape() != L.input.shape()) g = g.reshaped(L.input.shape());
          g = relu_backward(L.input, g);
          break;
        case LayerKind::pool:
          if (g.shape().size() != 4) g = g.reshaped(pool_out_shape(L));
          g = max_pool_backward(L.input.shape(), L.argmax, g);
          break;
        case LayerKind::conv: {
          if (g.rank() != 4) g = g.reshaped(conv_out_shape(L));
          auto d = conv2d_backward(L.input, L.weights, L.spec.stride, L.spec.padding, g, idx > 0 || want_input_grad_,
                                   threads_);
          store(L, d.weights, d.bias);
          g = std::move(d.input);
          break;
        }
      }
    }
    input_grad_ = std::move(g);
  }

  void want_input_grad(bool on) { want_input_grad_ = on; }
  const Tensor<T>& input_grad() const noexcept { return input_grad_; }

  /// Trainable parameters with their gradient buffers.
  std::vector<ParamRef<T>> parameters() {
    std::vector<ParamRef<T>> out;
    for (auto& L : layers_) {
      switch (L.spec.kind) {
        case LayerKind::conv:
        case LayerKind::dense:
          out.push_back({L.spec.name + ".weights", L.spec.kind, L.weights.data(), L.grad_weights.data()});
          if (L.has_bias) out.push_back({L.spec.name + ".bias", L.spec.kind, L.bias.data(), L.grad_bias.data()});
          break;
        case LayerKind::batchnorm:
          out.push_back({L.spec.name + ".gamma", L.spec.kind, L.bn.gamma, L.grad_gamma});
          out.push_back({L.spec.name + ".beta", L.spec.kind, L.bn.beta, L.grad_beta});
          break;
        default:
          break;
      }
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto& p : parameters()) n += p.value.size();
    return n;
  }

  void zero_grads() {
    for (auto& L : layers_) {
      if (L.spec.kind == LayerKind::conv || L.spec.kind == LayerKind::dense) {
        if (L.grad_weights.shape() != L.weights.shape()) L.grad_weights = Tensor<T>(L.weights.shape());
        if (L.grad_bias.shape() != L.bias.shape()) L.grad_bias = Tensor<T>(L.bias.shape());
        L.grad_weights.fill(T(0));
        L.grad_bias.fill(T(0));
      } else if (L.spec.kind == LayerKind::batchnorm) {
        L.grad_gamma.assign(L.bn.channels(), T(0));
        L.grad_beta.assign(L.bn.channels(), T(0));
      }
    }
  }

  /// Inference-mode activations after the batchnorm+relu of an embedding
  /// layer (FC1 or FC2). Shape [B, N].
  Tensor<T> extract_embedding(const Tensor<T>& images, std::string_view layer_name) {
    const auto emb = spec_.embedding_layers();
    require(std::find(emb.begin(), emb.end(), layer_name) != emb.end(), Errc::NoSuchLayer,
            "'" + std::string(layer_name) + "' is not an embedding layer of this " +
                std::string(family_name(spec_.family)) + " network");
    std::size_t stop = spec_.index_of(layer_name) + 1;
    while (stop < layers_.size() &&
           (layers_[stop].spec.kind == LayerKind::batchnorm || layers_[stop].spec.kind == LayerKind::relu))
      ++stop;
    return forward_range(images, Mode::infer, stop);
  }

  /// Class predictions in inference mode.
  std::vector<int> predict(const Tensor<T>& images) {
    const Tensor<T> logits = forward(images, Mode::infer);
    const std::size_t B = logits.dim(0), M = logits.dim(1);
    std::vector<int> out(B);
    for (std::size_t b = 0; b < B; ++b) {
      const T* z = logits.ptr() + b * M;
      out[b] = static_cast<int>(std::max_element(z, z + M) - z);
    }
    return out;
  }

 private:
  static void glorot(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  }

  Shape conv_out_shape(const Layer& L) const {
    const auto& in = L.input.shape();
    return {in[0], L.spec.units,
            static_cast<std::size_t>(window_out_dim(static_cast<long>(in[2]), static_cast<long>(L.spec.kernel),
                                                    static_cast<long>(L.spec.stride), static_cast<long>(L.spec.padding))),
            static_cast<std::size_t>(window_out_dim(static_cast<long>(in[3]), static_cast<long>(L.spec.kernel),
                                                    static_cast<long>(L.spec.stride), static_cast<long>(L.spec.padding)))};
  }
  Shape pool_out_shape(const Layer& L) const {
    Shape s = conv_out_shape(L);
    s[1] = L.input.dim(1);
    return s;
  }

  // Writes into the existing buffers so ParamRef spans stay valid.
  static void store(Layer& L, const Tensor<T>& gw, const Tensor<T>& gb) {
    std::copy(gw.data().begin(), gw.data().end(), L.grad_weights.data().begin());
    if (L.has_bias) std::copy(gb.data().begin(), gb.data().end(), L.grad_bias.data().begin());
    else L.grad_bias.fill(T(0));
  }

  void mix(std::uint64_t v) {
    pattern_hash_ ^= v + 0x9E3779B97F4A7C15ULL + (pattern_hash_ << 6) + (pattern_hash_ >> 2);
  }

  NetworkSpec spec_;
  std::vector<Layer> layers_;
  unsigned threads_ = 1;
  bool track_pattern_ = false;
  bool want_input_grad_ = false;
  std::uint64_t pattern_hash_ = 0;
  Tensor<T> input_grad_;
};

// ---------------------------------------------------------------- training

/// Packs a subset of samples from [N,1,H,W] storage into a batch tensor.
template <typename T>
Tensor<T> gather_batch(const Tensor<T>& images, std::span<const std::size_t> idx) {
  const std::size_t per = images.size() / images.dim(0);
  Shape s = images.shape();
  s[0] = idx.size();
  Tensor<T> out(s);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.ptr() + idx[i] * per, per, out.ptr() + i * per);
  return out;
}

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double val_accuracy = -1;  // -1 when no validation data was given
};

template <typename T>
double classification_accuracy(Network<T>& net, const Tensor<T>& images, std::span<const int> labels,
                               std::size_t batch = 64) {
  const std::size_t n = images.dim(0);
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < n; lo += batch) {
    std::vector<std::size_t> idx(std::min(batch, n - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto pred = net.predict(gather_batch(images, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == labels[lo + i];
  }
  return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

/// Mini-batch SGD with momentum on softmax cross-entropy. Batch order comes
/// from `hyper.seed`; trailing batches smaller than 2 are dropped (train-mode
/// batchnorm needs two samples).
template <typename T>
std::vector<EpochLog> train_classifier(Network<T>& net, const Tensor<T>& images, std::span<const int> labels,
                                       const TrainHyper& hyper, const Tensor<T>* val_images = nullptr,
                                       std::span<const int> val_labels = {},
                                       const std::function<void(const EpochLog&)>& on_epoch = {}) {
  hyper.validate();
  require(images.dim(0) == labels.size(), Errc::ShapeMismatch, "one label per training image required");
  const std::size_t n = images.dim(0);
  auto params = net.parameters();
  std::vector<std::vector<T>> velocity;
  for (auto& p : params) velocity.emplace_back(p.value.size(), T(0));

  std::vector<EpochLog> logs;
  std::vector<std::size_t> order(n);
  double lr = hyper.learning_rate;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(hyper.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    for (std::size_t lo = 0; lo < n; lo += hyper.batch_size) {
      const std::size_t hi = std::min(n, lo + hyper.batch_size);
      if (hi - lo < 2) continue;
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      const Tensor<T> batch = gather_batch(images, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) y[i] = labels[idx[i]];
      const Tensor<T> logits = net.forward(batch, Mode::train);
      auto lg = softmax_cross_entropy<T>(logits, y);
      require(std::isfinite(lg.loss), Errc::NonFinite, "training loss diverged at epoch " + std::to_string(epoch));
      net.backward(lg.grad);
      for (std::size_t p = 0; p < params.size(); ++p)
        sgd_step<T>(params[p].value, params[p].grad, velocity[p], lr, hyper.momentum);
      loss_sum += lg.loss * static_cast<double>(idx.size());
      seen += idx.size();
      const std::size_t M = logits.dim(1);
      for (std::size_t b = 0; b < idx.size(); ++b) {
        const T* z = lg.probs.ptr() + b * M;
        correct += static_cast<int>(std::max_element(z, z + M) - z) == y[b];
      }
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.learning_rate = lr;
    log.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (val_images && val_images->dim(0) > 0) log.val_accuracy = classification_accuracy(net, *val_images, val_labels);
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
    lr *= hyper.lr_decay;
  }
  return logs;
}

// ---------------------------------------------------------------- gradient check

struct GradCheckReport {
  double max_rel_error = 0;
  double max_rel_conv = 0, max_rel_dense = 0, max_rel_batchnorm = 0, max_rel_input = 0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Central-difference check of backward() on a train-mode pass. Samples up to
/// `per_type` coordinates for each of conv, dense, batchnorm parameters and
/// the input (which exercises pooling/relu routing). Coordinates whose
/// perturbation flips a ReLU or pooling decision are resampled.
inline GradCheckReport finite_difference_check(Network<double>& net, const Tensor<double>& input,
                                               std::span<const int> labels, double epsilon = 1e-5,
                                               std::size_t per_type = 100, std::uint64_t seed = 7) {
  GradCheckReport rep;
  net.track_pattern(true);
  net.want_input_grad(true);

  auto loss_at = [&](const Tensor<double>& x, std::uint64_t& hash) {
    const auto logits = net.forward(x, Mode::train);
    hash = net.pattern_hash();
    return softmax_cross_entropy<double>(logits, labels).loss;
  };

  std::uint64_t base_hash = 0;
  const auto logits = net.forward(input, Mode::train);
  base_hash = net.pattern_hash();
  const auto base = softmax_cross_entropy<double>(logits, labels);
  net.backward(base.grad);

  // Below this both gradients are indistinguishable from roundoff in the
  // central difference and the pair counts as an exact zero.
  const double noise = 100 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(base.loss)) / epsilon;
  auto rel = [noise](double a, double n) {
    if (std::abs(a) < noise && std::abs(n) < noise) return 0.0;
    const double denom = std::max({std::abs(a), std::abs(n), 1e-8});
    return std::abs(a - n) / denom;
  };

  struct Coord {
    std::span<double> value;
    std::size_t index;
    double analytic;
  };
  auto params = net.parameters();
  Tensor<double> x = input;
  Tensor<double> input_grad = net.input_grad();

  const std::pair<LayerKind, double*> kinds[] = {{LayerKind::conv, &rep.max_rel_conv},
                                                  {LayerKind::dense, &rep.max_rel_dense},
                                                  {LayerKind::batchnorm, &rep.max_rel_batchnorm}};
  Rng rng(seed);
  auto check_pool = [&](std::vector<Coord> pool, double* slot) {
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t done = 0;
    for (auto& c : pool) {
      if (done >= per_type) break;
      const double orig = c.value[c.index];
      std::uint64_t hp = 0, hm = 0;
      c.value[c.index] = orig + epsilon;
      const double lp = loss_at(x, hp);
      c.value[c.index] = orig - epsilon;
      const double lm = loss_at(x, hm);
      c.value[c.index] = orig;
      if (hp != base_hash || hm != base_hash) {
        ++rep.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2 * epsilon);
      const double e = rel(c.analytic, numeric);
      *slot = std::max(*slot, e);
      rep.max_rel_error = std::max(rep.max_rel_error, e);
      ++rep.checked;
      ++done;
    }
  };

  for (const auto& [kind, slot] : kinds) {
    std::vector<Coord> pool;
    for (auto& p : params)
      if (p.kind == kind)
        for (std::size_t i = 0; i < p.value.size(); ++i) pool.push_back({p.value, i, p.grad[i]});
    check_pool(std::move(pool), slot);
  }
  {
    std::vector<Coord> pool;
    for (std::size_t i = 0; i < x.size(); ++i) pool.push_back({x.data(), i, input_grad[i]});
    check_pool(std::move(pool), &rep.max_rel_input);
  }
  net.track_pattern(false);
  net.want_input_grad(false);
  return rep;
}

}  // namespace sigver
