#pragma once

// Dense float tensor with a dynamic reverse-mode tape.
//
// Every op that sees at least one input with requires_grad (while grad mode
// is on) attaches a Node to its result. backward() walks the graph in
// reverse topological order and then drops the Nodes, so the tape lives for
// exactly one forward/backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sgdsc/error.hpp"

namespace sgdsc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl;

struct Node {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs that require grad.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  std::vector<float>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables tape recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (values.size() != shape_numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }
  static Tensor from(Shape shape, std::initializer_list<float> values) {
    return Tensor(std::move(shape), std::vector<float>(values));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const float> data() const { return impl_->data; }
  // Parameter updates and in-place initialisation only; never on tape values.
  std::span<float> mutable_data() { return impl_->data; }
  const std::vector<float>& values() const { return impl_->data; }

  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  float operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Fresh leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), impl_->data); }
  Tensor clone() const { return detach(); }

  Tensor reshape(Shape new_shape) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Wraps freshly computed values into a tensor and, when needed, records the
/// backward closure against the given inputs.
inline Tensor make_result(Shape shape, std::vector<float> values, std::vector<Tensor> inputs,
                          std::function<void(const TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->grad_fn = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

inline bool wants_grad(const TensorImpl& t) { return t.requires_grad; }

}  // namespace detail

/// Reverse-mode sweep from a scalar (or seeded) root. Leaves keep their
/// accumulated grads; interior nodes are released afterwards.
inline void backward(const Tensor& root, std::span<const float> seed = {}) {
  using detail::TensorImpl;
  if (!root.requires_grad()) throw ShapeError("backward() on a tensor that does not require grad");
  if (seed.empty() && root.numel() != 1) {
    throw ShapeError("backward() without seed needs a scalar root, got " + shape_str(root.shape()));
  }

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{root.impl().get(), 0}};
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& fn = node->grad_fn;
    if (fn && next < fn->inputs.size()) {
      TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  auto& g = root.impl()->ensure_grad();
  if (seed.empty()) {
    g[0] += 1.0f;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    if (node->grad.size() == node->data.size()) node->grad_fn->backward(*node);
  }
  for (TensorImpl* node : order) {
    if (node->grad_fn) {
      node->grad_fn.reset();
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

inline Tensor Tensor::reshape(Shape new_shape) const {
  if (shape_numel(new_shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
  }
  return detail::make_result(std::move(new_shape), impl_->data, {*this},
                             [src = impl_](const detail::TensorImpl& out) {
                               auto& g = src->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
                             });
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& o) {
                               for (auto* t : {ai.get(), bi.get()}) {
                                 if (!t->requires_grad) continue;
                                 auto& g = t->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                             });
}

/// Sum of equally shaped tensors.
inline Tensor add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  for (const auto& t : terms) require_same_shape(terms[0], t, "add_n");
  std::vector<float> out(terms[0].numel(), 0.0f);
  std::vector<Tensor> inputs(terms.begin(), terms.end());
  for (const auto& t : terms) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
  }
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const auto& t : terms) impls.push_back(t.impl());
  return detail::make_result(terms[0].shape(), std::move(out), inputs,
                             [impls](const detail::TensorImpl& o) {
                               for (const auto& t : impls) {
                                 if (!t->requires_grad) continue;
                                 auto& g = t->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [ai = a.impl(), bi = b.impl()](const detail::TensorImpl& o) {
                               if (ai->requires_grad) {
                                 auto& g = ai->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
                               }
                               if (bi->requires_grad) {
                                 auto& g = bi->ensure_grad();
                                 for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [ai = a.impl(), s](const detail::TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * s;
                             });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return detail::make_result(Shape{}, {static_cast<float>(acc)}, {a},
                             [ai = a.impl()](const detail::TensorImpl& o) {
                               auto& g = ai->ensure_grad();
                               for (auto& v : g) v += o.grad[0];
                             });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(x.numel());
  // NaN passes through so that divergence reaches the loss.
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] <= 0.0f ? 0.0f : x[i];
  return detail::make_result(x.shape(), std::move(out), {x},
                             [xi = x.impl()](const detail::TensorImpl& o) {
                               auto& g = xi->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 if (xi->data[i] > 0.0f) g[i] += o.grad[i];
                               }
                             });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return detail::make_result(x.shape(), std::move(out), {x},
                             [xi = x.impl()](const detail::TensorImpl& o) {
                               auto& g = xi->ensure_grad();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const float y = o.data[i];
                                 g[i] += o.grad[i] * (1.0f - y * y);
                               }
                             });
}

/// Concatenates [N, C_i, ...] tensors along the channel axis.
inline Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& ref = parts[0].shape();
  if (ref.size() < 2) throw ShapeError("concat_channels: need rank >= 2, got " + shape_str(ref));
  if (parts.size() == 1) return parts[0];
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == ref[d];
    if (!ok) {
      throw ShapeError("concat_channels: " + shape_str(s) + " incompatible with " + shape_str(ref));
    }
    channels += s[1];
  }
  const std::size_t batch = ref[0];
  const std::size_t inner = shape_numel(ref) / (ref[0] * ref[1]);
  Shape out_shape = ref;
  out_shape[1] = channels;
  std::vector<float> out(batch * channels * inner);
  std::vector<std::size_t> channel_base;
  std::size_t base = 0;
  for (const auto& p : parts) {
    channel_base.push_back(base);
    const std::size_t c = p.size(1);
    for (std::size_t n = 0; n < batch; ++n) {
      std::copy_n(p.data().begin() + n * c * inner, c * inner,
                  out.begin() + (n * channels + base) * inner);
    }
    base += c;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return detail::make_result(
      std::move(out_shape), std::move(out), inputs,
      [impls, channel_base, batch, channels, inner](const detail::TensorImpl& o) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          auto* t = impls[k].get();
          if (!t->requires_grad) continue;
          auto& g = t->ensure_grad();
          const std::size_t c = t->shape[1];
          for (std::size_t n = 0; n < batch; ++n) {
            const float* src = o.grad.data() + (n * channels + channel_base[k]) * inner;
            float* dst = g.data() + n * c * inner;
            for (std::size_t i = 0; i < c * inner; ++i) dst[i] += src[i];
          }
        }
      });
}

inline Tensor concat_channels(std::initializer_list<Tensor> parts) {
  std::vector<Tensor> v(parts);
  return concat_channels(std::span<const Tensor>(v));
}

/// Total scalar parameter count of a tensor collection.
inline std::size_t count_params(std::span<const Tensor> params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.numel();
  return total;
}

}  // namespace sgdsc
