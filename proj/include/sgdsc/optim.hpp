#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "sgdsc/tensor.hpp"

namespace sgdsc {

struct AdamOptions {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
  float weight_decay = 0.0f;  // L2 term folded into the gradient
};

struct AdamState {
  AdamOptions options;
  std::uint64_t step_count = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
};

/// One bias-corrected Adam update over `params`, in place. A parameter with
/// no accumulated gradient is treated as having gradient zero.
inline void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0f);
      state.second_moment.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ShapeError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].numel()) {
      throw ShapeError("adam_step: moment buffer " + std::to_string(k) + " does not match parameter shape " +
                       shape_str(params[k].shape()));
    }
  }

  ++state.step_count;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step_count);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(o.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(o.beta2), t));

  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    auto w = p.mutable_data();
    const auto g = p.grad();
    const bool has = p.has_grad();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      float gi = has ? g[i] : 0.0f;
      if (o.weight_decay != 0.0f) gi += o.weight_decay * w[i];
      m[i] = o.beta1 * m[i] + (1.0f - o.beta1) * gi;
      v[i] = o.beta2 * v[i] + (1.0f - o.beta2) * gi * gi;
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      w[i] -= o.lr * mhat / (std::sqrt(vhat) + o.epsilon);
    }
  }
}

inline void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace sgdsc
