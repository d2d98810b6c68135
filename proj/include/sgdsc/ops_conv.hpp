#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "sgdsc/tensor.hpp"

namespace sgdsc {

using Extent3 = std::array<std::size_t, 3>;  // (depth, height, width)

namespace detail {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
  if (t.dim() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t batch, in_ch, out_ch, groups;
  Extent3 in, kernel, stride, pad, out;
  std::size_t in_per_group() const { return in_ch / groups; }
  std::size_t out_per_group() const { return out_ch / groups; }
  std::size_t in_vol() const { return in[0] * in[1] * in[2]; }
  std::size_t out_vol() const { return out[0] * out[1] * out[2]; }
  std::size_t kernel_vol() const { return kernel[0] * kernel[1] * kernel[2]; }
  bool pointwise() const {
    return kernel_vol() == 1 && pad == Extent3{0, 0, 0} && stride == Extent3{1, 1, 1};
  }
};

// col has shape [in_per_group * kvol, out_vol] for one sample and group.
// Output positions xo with 0 <= xo * stride + offset - pad < extent.
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t stride, std::size_t offset,
                                                       std::size_t pad, std::size_t extent) {
  auto first_at_least = [&](std::ptrdiff_t bound) {
    // smallest xo with xo * stride + offset - pad >= bound
    const std::ptrdiff_t need = bound + static_cast<std::ptrdiff_t>(pad) - static_cast<std::ptrdiff_t>(offset);
    if (need <= 0) return std::size_t{0};
    return static_cast<std::size_t>((need + static_cast<std::ptrdiff_t>(stride) - 1) /
                                    static_cast<std::ptrdiff_t>(stride));
  };
  const std::size_t lo = std::min(out, first_at_least(0));
  const std::size_t hi = std::min(out, first_at_least(static_cast<std::ptrdiff_t>(extent)));
  return {lo, std::max(lo, hi)};
}

// Visits every (column row, output row) pair of the unfolded input. For each
// it passes the column offset, the input offset of the first valid xo, and
// the valid xo range (empty when the whole row is padding).
template <class Fn>
inline void for_each_col_row(const ConvGeometry& g, Fn&& fn) {
  const auto [D, H, W] = g.in;
  const auto [kd, kh, kw] = g.kernel;
  const auto [od, oh, ow] = g.out;
  const std::size_t ovol = g.out_vol();
  for (std::size_t c = 0; c < g.in_per_group(); ++c)
    for (std::size_t a = 0; a < kd; ++a)
      for (std::size_t b = 0; b < kh; ++b)
        for (std::size_t e = 0; e < kw; ++e) {
          const std::size_t row = (((c * kd + a) * kh + b) * kw + e) * ovol;
          const auto [xlo, xhi] = valid_range(ow, g.stride[2], e, g.pad[2], W);
          for (std::size_t z = 0; z < od; ++z) {
            const auto iz = static_cast<std::ptrdiff_t>(z * g.stride[0] + a) - static_cast<std::ptrdiff_t>(g.pad[0]);
            for (std::size_t y = 0; y < oh; ++y) {
              const auto iy =
                  static_cast<std::ptrdiff_t>(y * g.stride[1] + b) - static_cast<std::ptrdiff_t>(g.pad[1]);
              const std::size_t out = row + (z * oh + y) * ow;
              const bool inside = iz >= 0 && iy >= 0 && iz < static_cast<std::ptrdiff_t>(D) &&
                                  iy < static_cast<std::ptrdiff_t>(H);
              if (!inside) {
                fn(out, std::size_t{0}, std::size_t{0}, std::size_t{0});
                continue;
              }
              const std::size_t in_row = c * g.in_vol() + (static_cast<std::size_t>(iz) * H +
                                                           static_cast<std::size_t>(iy)) * W;
              const std::size_t x0 = xlo < xhi ? xlo * g.stride[2] + e - g.pad[2] : 0;
              fn(out, in_row + x0, xlo, xhi);
            }
          }
        }
}

inline void im2col(const float* x, const ConvGeometry& g, float* col) {
  const std::size_t ow = g.out[2], s = g.stride[2];
  for_each_col_row(g, [&](std::size_t out, std::size_t in, std::size_t lo, std::size_t hi) {
    float* r = col + out;
    std::fill(r, r + lo, 0.0f);
    const float* src = x + in;
    if (s == 1) {
      std::copy(src, src + (hi - lo), r + lo);
    } else {
      for (std::size_t xo = lo; xo < hi; ++xo, src += s) r[xo] = *src;
    }
    std::fill(r + hi, r + ow, 0.0f);
  });
}

inline void col2im_add(const float* col, const ConvGeometry& g, float* gx) {
  const std::size_t s = g.stride[2];
  for_each_col_row(g, [&](std::size_t out, std::size_t in, std::size_t lo, std::size_t hi) {
    const float* r = col + out;
    float* dst = gx + in;
    for (std::size_t xo = lo; xo < hi; ++xo, dst += s) *dst += r[xo];
  });
}

}  // namespace detail

struct Conv3dOptions {
  std::size_t groups = 1;
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
};

/// Grouped 3D cross-correlation.
///   x:      [N, C, D, H, W]
///   weight: [Cout, C/groups, kd, kh, kw]
///   bias:   optional [Cout]
inline Tensor conv3d(const Tensor& x, const Tensor& weight, const std::optional<Tensor>& bias,
                     const Conv3dOptions& opt = {}) {
  detail::require_rank(x, 5, "conv3d", "input");
  detail::require_rank(weight, 5, "conv3d", "weight");
  if (opt.groups == 0) throw ShapeError("conv3d: groups must be positive");
  if (opt.stride[0] == 0 || opt.stride[1] == 0 || opt.stride[2] == 0) {
    throw ShapeError("conv3d: stride must be positive");
  }
  detail::ConvGeometry g{};
  g.batch = x.size(0);
  g.in_ch = x.size(1);
  g.out_ch = weight.size(0);
  g.groups = opt.groups;
  g.in = {x.size(2), x.size(3), x.size(4)};
  g.kernel = {weight.size(2), weight.size(3), weight.size(4)};
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (g.in_ch % g.groups != 0) {
    throw ShapeError("conv3d: input channels (dim 1) = " + std::to_string(g.in_ch) +
                     " not divisible by groups = " + std::to_string(g.groups));
  }
  if (g.out_ch % g.groups != 0) {
    throw ShapeError("conv3d: output channels (weight dim 0) = " + std::to_string(g.out_ch) +
                     " not divisible by groups = " + std::to_string(g.groups));
  }
  if (weight.size(1) != g.in_per_group()) {
    throw ShapeError("conv3d: weight dim 1 = " + std::to_string(weight.size(1)) +
                     " but input channels per group = " + std::to_string(g.in_per_group()));
  }
  static const char* const kAxis[] = {"depth (dim 2)", "height (dim 3)", "width (dim 4)"};
  for (int d = 0; d < 3; ++d) {
    const std::size_t padded = g.in[d] + 2 * g.pad[d];
    if (g.kernel[d] == 0 || g.kernel[d] > padded) {
      throw ShapeError(std::string("conv3d: kernel extent ") + std::to_string(g.kernel[d]) +
                       " does not fit padded input " + kAxis[d] + " = " + std::to_string(padded));
    }
    g.out[d] = (padded - g.kernel[d]) / g.stride[d] + 1;
  }
  if (bias && (bias->dim() != 1 || bias->size(0) != g.out_ch)) {
    throw ShapeError("conv3d: bias must be [" + std::to_string(g.out_ch) + "], got " +
                     shape_str(bias->shape()));
  }

  const std::size_t cig = g.in_per_group(), cog = g.out_per_group();
  const std::size_t kvol = g.kernel_vol(), ovol = g.out_vol(), ivol = g.in_vol();
  const std::size_t krows = cig * kvol;
  std::vector<float> out(g.batch * g.out_ch * ovol, 0.0f);
  std::vector<float> col(g.pointwise() ? 0 : krows * ovol);
  const float* xd = x.data().data();
  const float* wd = weight.data().data();

  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t gr = 0; gr < g.groups; ++gr) {
      const float* xg = xd + (n * g.in_ch + gr * cig) * ivol;
      const float* src = xg;
      if (!g.pointwise()) {
        detail::im2col(xg, g, col.data());
        src = col.data();
      }
      detail::ConstMatMap wm(wd + gr * cog * krows, static_cast<Eigen::Index>(cog),
                             static_cast<Eigen::Index>(krows));
      detail::ConstMatMap cm(src, static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ovol));
      detail::MatMap om(out.data() + (n * g.out_ch + gr * cog) * ovol, static_cast<Eigen::Index>(cog),
                        static_cast<Eigen::Index>(ovol));
      om.noalias() = wm * cm;
    }
    if (bias) {
      for (std::size_t c = 0; c < g.out_ch; ++c) {
        float* o = out.data() + (n * g.out_ch + c) * ovol;
        const float b = (*bias)[c];
        for (std::size_t p = 0; p < ovol; ++p) o[p] += b;
      }
    }
  }

  std::vector<Tensor> inputs{x, weight};
  std::shared_ptr<detail::TensorImpl> bias_impl;
  if (bias) {
    inputs.push_back(*bias);
    bias_impl = bias->impl();
  }
  return detail::make_result(
      Shape{g.batch, g.out_ch, g.out[0], g.out[1], g.out[2]}, std::move(out), inputs,
      [g, xi = x.impl(), wi = weight.impl(), bias_impl](const detail::TensorImpl& o) {
        const std::size_t cig = g.in_per_group(), cog = g.out_per_group();
        const std::size_t kvol = g.kernel_vol(), ovol = g.out_vol(), ivol = g.in_vol();
        const std::size_t krows = cig * kvol;
        const bool need_x = xi->requires_grad, need_w = wi->requires_grad;
        float* gx = need_x ? xi->ensure_grad().data() : nullptr;
        float* gw = need_w ? wi->ensure_grad().data() : nullptr;
        std::vector<float> col(krows * ovol);
        for (std::size_t n = 0; n < g.batch; ++n) {
          for (std::size_t gr = 0; gr < g.groups; ++gr) {
            const float* go = o.grad.data() + (n * g.out_ch + gr * cog) * ovol;
            detail::ConstMatMap gom(go, static_cast<Eigen::Index>(cog), static_cast<Eigen::Index>(ovol));
            const float* xg = xi->data.data() + (n * g.in_ch + gr * cig) * ivol;
            if (need_w) {
              const float* src = xg;
              if (!g.pointwise()) {
                detail::im2col(xg, g, col.data());
                src = col.data();
              }
              detail::ConstMatMap cm(src, static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ovol));
              detail::MatMap gwm(gw + gr * cog * krows, static_cast<Eigen::Index>(cog),
                                 static_cast<Eigen::Index>(krows));
              gwm.noalias() += gom * cm.transpose();
            }
            if (need_x) {
              detail::ConstMatMap wm(wi->data.data() + gr * cog * krows, static_cast<Eigen::Index>(cog),
                                     static_cast<Eigen::Index>(krows));
              float* gxg = gx + (n * g.in_ch + gr * cig) * ivol;
              if (g.pointwise()) {
                detail::MatMap gxm(gxg, static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ovol));
                gxm.noalias() += wm.transpose() * gom;
              } else {
                detail::MatMap cm(col.data(), static_cast<Eigen::Index>(krows), static_cast<Eigen::Index>(ovol));
                cm.noalias() = wm.transpose() * gom;
                detail::col2im_add(col.data(), g, gxg);
              }
            }
          }
        }
        if (bias_impl && bias_impl->requires_grad) {
          auto& gb = bias_impl->ensure_grad();
          for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t c = 0; c < g.out_ch; ++c) {
              const float* go = o.grad.data() + (n * g.out_ch + c) * ovol;
              double acc = 0.0;
              for (std::size_t p = 0; p < ovol; ++p) acc += go[p];
              gb[c] += static_cast<float>(acc);
            }
        }
      });
}

inline Tensor conv3d(const Tensor& x, const Tensor& weight, const Conv3dOptions& opt = {}) {
  return conv3d(x, weight, std::nullopt, opt);
}

/// Mean over non-overlapping or strided windows of [N, C, D, H, W]. No padding.
inline Tensor avg_pool3d(const Tensor& x, Extent3 window, Extent3 stride) {
  detail::require_rank(x, 5, "avg_pool3d", "input");
  const Extent3 in{x.size(2), x.size(3), x.size(4)};
  Extent3 out{};
  for (int d = 0; d < 3; ++d) {
    if (window[d] == 0 || stride[d] == 0) throw ShapeError("avg_pool3d: window and stride must be positive");
    if (window[d] > in[d]) {
      throw ShapeError("avg_pool3d: window " + std::to_string(window[d]) + " exceeds input extent " +
                       std::to_string(in[d]) + " on spatial axis " + std::to_string(d));
    }
    out[d] = (in[d] - window[d]) / stride[d] + 1;
  }
  const std::size_t planes = x.size(0) * x.size(1);
  const std::size_t ivol = in[0] * in[1] * in[2], ovol = out[0] * out[1] * out[2];
  const float inv = 1.0f / static_cast<float>(window[0] * window[1] * window[2]);
  std::vector<float> result(planes * ovol);
  const float* xd = x.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const float* src = xd + pl * ivol;
    float* dst = result.data() + pl * ovol;
    for (std::size_t z = 0; z < out[0]; ++z)
      for (std::size_t y = 0; y < out[1]; ++y)
        for (std::size_t w = 0; w < out[2]; ++w) {
          float acc = 0.0f;
          for (std::size_t a = 0; a < window[0]; ++a)
            for (std::size_t b = 0; b < window[1]; ++b)
              for (std::size_t c = 0; c < window[2]; ++c)
                acc += src[((z * stride[0] + a) * in[1] + y * stride[1] + b) * in[2] + w * stride[2] + c];
          dst[(z * out[1] + y) * out[2] + w] = acc * inv;
        }
  }
  return detail::make_result(
      Shape{x.size(0), x.size(1), out[0], out[1], out[2]}, std::move(result), {x},
      [xi = x.impl(), in, out, window, stride, planes, ivol, ovol, inv](const detail::TensorImpl& o) {
        auto& g = xi->ensure_grad();
        for (std::size_t pl = 0; pl < planes; ++pl) {
          float* dst = g.data() + pl * ivol;
          const float* src = o.grad.data() + pl * ovol;
          for (std::size_t z = 0; z < out[0]; ++z)
            for (std::size_t y = 0; y < out[1]; ++y)
              for (std::size_t w = 0; w < out[2]; ++w) {
                const float v = src[(z * out[1] + y) * out[2] + w] * inv;
                for (std::size_t a = 0; a < window[0]; ++a)
                  for (std::size_t b = 0; b < window[1]; ++b)
                    for (std::size_t c = 0; c < window[2]; ++c)
                      dst[((z * stride[0] + a) * in[1] + y * stride[1] + b) * in[2] + w * stride[2] + c] += v;
              }
        }
      });
}

}  // namespace sgdsc
