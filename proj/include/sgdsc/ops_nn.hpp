#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sgdsc/tensor.hpp"

namespace sgdsc {

/// Learned affine parameters plus running statistics for one normalisation site.
struct BatchNorm {
  Tensor gamma;  // [C], learned scale
  Tensor beta;   // [C], learned shift
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  static BatchNorm make(std::size_t channels) {
    BatchNorm bn;
    bn.gamma = Tensor::full({channels}, 1.0f).set_requires_grad();
    bn.beta = Tensor::zeros({channels}).set_requires_grad();
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0f);
    return bn;
  }

  std::size_t channels() const { return gamma.numel(); }
};

/// Per-channel standardisation of [N, C, ...] (channel axis 1).
/// Training mode uses batch statistics and updates the running estimates;
/// evaluation mode applies the running estimates as a fixed affine map.
inline Tensor batch_norm(const Tensor& x, BatchNorm& state, bool training) {
  if (x.dim() < 2) throw ShapeError("batch_norm: input needs a channel axis, got " + shape_str(x.shape()));
  const std::size_t batch = x.size(0), channels = x.size(1);
  if (channels != state.channels()) {
    throw ShapeError("batch_norm: input channels (dim 1) = " + std::to_string(channels) +
                     " but state has " + std::to_string(state.channels()));
  }
  const std::size_t inner = x.numel() / (batch * channels);
  const std::size_t count = batch * inner;
  const float* xd = x.data().data();
  std::vector<float> out(x.numel());
  std::vector<float> mean(channels), invstd(channels);

  if (training) {
    if (count < 2) throw ShapeError("batch_norm: training mode needs more than one value per channel");
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const float* p = xd + (n * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const float* p = xd + (n * channels + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = static_cast<float>(mu);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[c] = (1.0f - state.momentum) * rm[c] + state.momentum * static_cast<float>(mu);
      rv[c] = (1.0f - state.momentum) * rv[c] + state.momentum * static_cast<float>(unbiased);
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0f / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const float* p = xd + (n * channels + c) * inner;
      float* q = out.data() + (n * channels + c) * inner;
      const float a = state.gamma[c] * invstd[c];
      const float b = state.beta[c] - a * mean[c];
      for (std::size_t i = 0; i < inner; ++i) q[i] = a * p[i] + b;
    }

  return detail::make_result(
      x.shape(), std::move(out), {x, state.gamma, state.beta},
      [xi = x.impl(), gi = state.gamma.impl(), bi = state.beta.impl(), mean, invstd, batch, channels,
       inner, count, training](const detail::TensorImpl& o) {
        const float* xd = xi->data.data();
        const float* go = o.grad.data();
        float* gx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        float* gg = gi->requires_grad ? gi->ensure_grad().data() : nullptr;
        float* gb = bi->requires_grad ? bi->ensure_grad().data() : nullptr;
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              const double xhat = (xd[off + i] - mean[c]) * invstd[c];
              sum_g += go[off + i];
              sum_gx += go[off + i] * xhat;
            }
          }
          if (gg) gg[c] += static_cast<float>(sum_gx);
          if (gb) gb[c] += static_cast<float>(sum_g);
          if (!gx) continue;
          const float gamma = gi->data[c];
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
              if (training) {
                const double xhat = (xd[off + i] - mean[c]) * invstd[c];
                gx[off + i] += static_cast<float>(gamma * invstd[c] *
                                                  (go[off + i] - sum_g / m - xhat * sum_gx / m));
              } else {
                gx[off + i] += gamma * invstd[c] * go[off + i];
              }
            }
          }
        }
      });
}

/// [N, C, ...] -> [N, C], mean over all trailing axes.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.dim() < 2) throw ShapeError("global_avg_pool: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t rows = x.size(0) * x.size(1);
  const std::size_t inner = x.numel() / rows;
  std::vector<float> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t i = 0; i < inner; ++i) acc += x[r * inner + i];
    out[r] = static_cast<float>(acc / static_cast<double>(inner));
  }
  return detail::make_result(Shape{x.size(0), x.size(1)}, std::move(out), {x},
                             [xi = x.impl(), rows, inner](const detail::TensorImpl& o) {
                               auto& g = xi->ensure_grad();
                               const float inv = 1.0f / static_cast<float>(inner);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t i = 0; i < inner; ++i) g[r * inner + i] += o.grad[r] * inv;
                             });
}

/// y = x w^T + b with x [N, F], w [O, F], b [O].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.dim() != 2 || w.dim() != 2 || b.dim() != 1) {
    throw ShapeError("linear: expected x [N,F], w [O,F], b [O]; got " + shape_str(x.shape()) + ", " +
                     shape_str(w.shape()) + ", " + shape_str(b.shape()));
  }
  const std::size_t n = x.size(0), f = x.size(1), o = w.size(0);
  if (w.size(1) != f) {
    throw ShapeError("linear: weight dim 1 = " + std::to_string(w.size(1)) + " but input features = " +
                     std::to_string(f));
  }
  if (b.size(0) != o) {
    throw ShapeError("linear: bias dim 0 = " + std::to_string(b.size(0)) + " but outputs = " + std::to_string(o));
  }
  std::vector<float> out(n * o);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < o; ++j) {
      double acc = b[j];
      for (std::size_t k = 0; k < f; ++k) acc += static_cast<double>(x[i * f + k]) * w[j * f + k];
      out[i * o + j] = static_cast<float>(acc);
    }
  return detail::make_result(
      Shape{n, o}, std::move(out), {x, w, b},
      [xi = x.impl(), wi = w.impl(), bi = b.impl(), n, f, o](const detail::TensorImpl& r) {
        const float* g = r.grad.data();
        if (xi->requires_grad) {
          auto& gx = xi->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j)
              for (std::size_t k = 0; k < f; ++k) gx[i * f + k] += g[i * o + j] * wi->data[j * f + k];
        }
        if (wi->requires_grad) {
          auto& gw = wi->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j)
              for (std::size_t k = 0; k < f; ++k) gw[j * f + k] += g[i * o + j] * xi->data[i * f + k];
        }
        if (bi->requires_grad) {
          auto& gb = bi->ensure_grad();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < o; ++j) gb[j] += g[i * o + j];
        }
      });
}

/// Row-wise softmax of [N, C] logits.
inline std::vector<float> softmax_rows(std::span<const float> logits, std::size_t rows, std::size_t cols) {
  std::vector<float> p(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const float* z = logits.data() + i * cols;
    const float zmax = *std::max_element(z, z + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(static_cast<double>(z[j] - zmax));
    for (std::size_t j = 0; j < cols; ++j) {
      p[i * cols + j] = static_cast<float>(std::exp(static_cast<double>(z[j] - zmax)) / total);
    }
  }
  return p;
}

/// Mean cross-entropy of [N, C] logits against 0-based class indices.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.dim() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N, C], got " + shape_str(logits.shape()));
  const std::size_t n = logits.size(0), c = logits.size(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const float* z = logits.data().data() + i * c;
    const double zmax = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(z[j] - zmax);
    loss += std::log(total) + zmax - z[labels[i]];
  }
  loss /= static_cast<double>(n);
  std::vector<int> lab(labels.begin(), labels.end());
  return detail::make_result(Shape{}, {static_cast<float>(loss)}, {logits},
                             [li = logits.impl(), lab, n, c](const detail::TensorImpl& o) {
                               auto& g = li->ensure_grad();
                               const auto p = softmax_rows(li->data, n, c);
                               const float s = o.grad[0] / static_cast<float>(n);
                               for (std::size_t i = 0; i < n; ++i)
                                 for (std::size_t j = 0; j < c; ++j) {
                                   const float onehot = static_cast<int>(j) == lab[i] ? 1.0f : 0.0f;
                                   g[i * c + j] += s * (p[i * c + j] - onehot);
                                 }
                             });
}

}  // namespace sgdsc
