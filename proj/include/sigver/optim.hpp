#pragma once

#include <cstdint>
#include <span>

#include "sigver/error.hpp"

namespace sigver {

struct TrainHyper {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::uint64_t seed = 1;
  double lr_decay = 0.95;

  void validate() const {
    require(learning_rate > 0, Errc::InvalidArgument, "learning_rate must be positive");
    require(momentum >= 0 && momentum < 1, Errc::InvalidArgument, "momentum must be in [0,1)");
    require(batch_size >= 1, Errc::InvalidArgument, "batch_size must be positive");
    require(epochs >= 1, Errc::InvalidArgument, "epochs must be positive");
    require(lr_decay > 0 && lr_decay <= 1, Errc::InvalidArgument, "lr_decay must be in (0,1]");
  }
};

/// Classical momentum: v <- m*v - lr*g; p <- p + v.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double learning_rate,
              double momentum) {
  require(params.size() == grads.size() && params.size() == velocity.size(), Errc::ShapeMismatch,
          "sgd_step: params, grads and velocity must have equal length");
  const T m = static_cast<T>(momentum), lr = static_cast<T>(learning_rate);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] - lr * grads[i];
    params[i] += velocity[i];
  }
}

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, const TrainHyper& hyper) {
  sgd_step(params, grads, velocity, hyper.learning_rate, hyper.momentum);
}

}  // namespace sigver
