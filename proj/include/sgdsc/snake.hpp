#pragma once

// Dynamic snake convolution.
//
// A snake kernel is a line of `length` cells through the output position.
// Along its primary axis the cells sit at integer distances -half..+half from
// the centre. Across the primary axis every cell is displaced relative to its
// predecessor by a bounded step delta in [-1, 1], so the perpendicular
// coordinate of the cell at distance c is the centre plus the sum of the c
// deltas on that side of the line. Fractional coordinates are read with
// separable bilinear weights and border replication.
//
// Tensor layouts:
//   feature map  [N, C, D, H, W]   (D spectral, H rows / y, W columns / x)
//   offsets      [N, perp * (length - 1), D, H, W]
//                channel pd * (length - 1) + s holds the step for
//                  s in [0, half):      + side, step s + 1
//                  s in [half, 2 half): - side, step s - half + 1
//                perp = 1 for X and Y axes (the y resp. x displacement),
//                perp = 2 for the spectral axis (y then x).
//   weights      [Cout, Cin, taps, length]
//                taps = 3 spectral neighbours for X/Y kernels, 1 for SPECTRAL.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "sgdsc/ops_conv.hpp"
#include "sgdsc/tensor.hpp"

namespace sgdsc {

enum class SnakeAxis { X, Y, Spectral };

inline const char* to_string(SnakeAxis axis) {
  switch (axis) {
    case SnakeAxis::X: return "x";
    case SnakeAxis::Y: return "y";
    case SnakeAxis::Spectral: return "spectral";
  }
  return "?";
}

struct SnakeKernelSpec {
  std::size_t length = 9;
  SnakeAxis axis = SnakeAxis::X;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  static constexpr float max_step = 1.0f;

  std::size_t half() const { return (length - 1) / 2; }
  std::size_t steps() const { return length - 1; }
  std::size_t perpendicular_dims() const { return axis == SnakeAxis::Spectral ? 2 : 1; }
  std::size_t offset_channels() const { return steps() * perpendicular_dims(); }
  std::size_t spectral_taps() const { return axis == SnakeAxis::Spectral ? 1 : 3; }

  void validate() const {
    if (length < 1 || length % 2 == 0) {
      throw ConfigError("snake kernel length must be odd and positive, got " + std::to_string(length));
    }
    if (in_channels == 0 || out_channels == 0) throw ConfigError("snake kernel channel counts must be positive");
  }
};

/// Fractional sampling coordinate (d is always integral for snake kernels).
struct GridPoint {
  float d = 0.0f;
  float y = 0.0f;
  float x = 0.0f;
};

/// Sampling coordinates of one kernel line, cell k at signed distance k - half.
/// For X and Y kernels the spectral taps reuse these (y, x) at d - 1, d, d + 1.
struct SnakePositionSet {
  std::vector<GridPoint> cells;
};

struct OffsetField {
  Tensor delta;  // [N, perp * (length - 1), D, H, W], entries in [-1, 1]
};

namespace detail {

/// Walks outward from `center`, accumulating one delta per step on each side.
/// `delta_at(channel)` yields the step for that offset channel.
template <class DeltaAt>
inline void trace_line(const GridPoint& center, const SnakeKernelSpec& spec, DeltaAt&& delta_at, GridPoint* out) {
  const std::size_t half = spec.half();
  const std::size_t steps = spec.steps();
  out[half] = center;
  for (int side = 0; side < 2; ++side) {
    const float dir = side == 0 ? 1.0f : -1.0f;
    const std::size_t base = side == 0 ? 0 : half;
    float acc0 = 0.0f, acc1 = 0.0f;
    for (std::size_t c = 1; c <= half; ++c) {
      acc0 += delta_at(base + c - 1);
      if (spec.axis == SnakeAxis::Spectral) acc1 += delta_at(steps + base + c - 1);
      GridPoint p = center;
      const float along = dir * static_cast<float>(c);
      switch (spec.axis) {
        case SnakeAxis::X:
          p.x += along;
          p.y += acc0;
          break;
        case SnakeAxis::Y:
          p.y += along;
          p.x += acc0;
          break;
        case SnakeAxis::Spectral:
          p.d += along;
          p.y += acc0;
          p.x += acc1;
          break;
      }
      out[side == 0 ? half + c : half - c] = p;
    }
  }
}

inline std::size_t clamp_index(std::ptrdiff_t i, std::size_t extent) {
  if (i < 0) return 0;
  if (i >= static_cast<std::ptrdiff_t>(extent)) return extent - 1;
  return static_cast<std::size_t>(i);
}

/// Four-neighbour bilinear read of one (d, y, x) within a single channel
/// volume of extents D x H x W, with border replication.
struct SampleTap {
  std::array<std::uint32_t, 4> index;  // (y0,x0) (y0,x1) (y1,x0) (y1,x1)
  std::array<float, 4> weight;
};

/// SampleTap plus what the position derivative needs. Below/above use
/// ceil(c) - 1 and ceil(c) so that the derivative at an integer coordinate is
/// its left limit.
struct BilinearTap : SampleTap {
  std::array<std::uint32_t, 4> dy_index;  // (lo,x0) (lo,x1) (hi,x0) (hi,x1)
  std::array<std::uint32_t, 4> dx_index;  // (y0,lo) (y0,hi) (y1,lo) (y1,hi)
  float ly = 0.0f;
  float lx = 0.0f;
};

template <class Tap>
inline Tap make_tap(const GridPoint& p, std::size_t D, std::size_t H, std::size_t W) {
  Tap t;
  const std::size_t di = clamp_index(static_cast<std::ptrdiff_t>(std::lround(p.d)), D);
  const float fy = std::floor(p.y), fx = std::floor(p.x);
  const float ly = p.y - fy, lx = p.x - fx;
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  const std::size_t ya = clamp_index(y0, H), yb = clamp_index(y0 + 1, H);
  const std::size_t xa = clamp_index(x0, W), xb = clamp_index(x0 + 1, W);
  const std::size_t plane = di * H * W;
  auto at = [&](std::size_t y, std::size_t x) { return static_cast<std::uint32_t>(plane + y * W + x); };
  t.index = {at(ya, xa), at(ya, xb), at(yb, xa), at(yb, xb)};
  const float wy0 = 1.0f - ly, wx0 = 1.0f - lx;
  t.weight = {wy0 * wx0, wy0 * lx, ly * wx0, ly * lx};
  if constexpr (std::is_same_v<Tap, BilinearTap>) {
    t.ly = ly;
    t.lx = lx;
    const auto gy = static_cast<std::ptrdiff_t>(std::ceil(p.y)) - 1;
    const auto gx = static_cast<std::ptrdiff_t>(std::ceil(p.x)) - 1;
    const std::size_t ylo = clamp_index(gy, H), yhi = clamp_index(gy + 1, H);
    const std::size_t xlo = clamp_index(gx, W), xhi = clamp_index(gx + 1, W);
    t.dy_index = {at(ylo, xa), at(ylo, xb), at(yhi, xa), at(yhi, xb)};
    t.dx_index = {at(ya, xlo), at(ya, xhi), at(yb, xlo), at(yb, xhi)};
  }
  return t;
}

inline float tap_value(const SampleTap& t, const float* v) {
  return t.weight[0] * v[t.index[0]] + t.weight[1] * v[t.index[1]] + t.weight[2] * v[t.index[2]] +
         t.weight[3] * v[t.index[3]];
}

inline float tap_dy(const BilinearTap& t, const float* v) {
  return (1.0f - t.lx) * (v[t.dy_index[2]] - v[t.dy_index[0]]) + t.lx * (v[t.dy_index[3]] - v[t.dy_index[1]]);
}

inline float tap_dx(const BilinearTap& t, const float* v) {
  return (1.0f - t.ly) * (v[t.dx_index[1]] - v[t.dx_index[0]]) + t.ly * (v[t.dx_index[3]] - v[t.dx_index[2]]);
}

/// Sampling plan for one batch item: a tap per (spectral tap, cell, position).
/// The forward pass uses SampleTap; the backward pass rebuilds it with
/// BilinearTap for the position derivative.
template <class Tap>
struct SnakePlan {
  std::size_t taps = 0, length = 0, positions = 0;
  std::vector<Tap> entries;  // [(e * length + k) * positions + p]
};

template <class Tap>
inline SnakePlan<Tap> build_plan(const float* offsets, const SnakeKernelSpec& spec, std::size_t D, std::size_t H,
                                 std::size_t W) {
  if (D * H * W > std::numeric_limits<std::uint32_t>::max()) {
    throw ShapeError("snake_conv: feature volume too large for 32-bit sample indices");
  }
  SnakePlan<Tap> plan;
  plan.taps = spec.spectral_taps();
  plan.length = spec.length;
  plan.positions = D * H * W;
  plan.entries.resize(plan.taps * plan.length * plan.positions);
  std::vector<GridPoint> line(spec.length);
  const std::size_t vol = plan.positions;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const std::size_t p = (d * H + h) * W + w;
        const GridPoint center{static_cast<float>(d), static_cast<float>(h), static_cast<float>(w)};
        trace_line(center, spec, [&](std::size_t ch) { return offsets[ch * vol + p]; }, line.data());
        for (const auto& q : line) {
          if (!std::isfinite(q.d) || !std::isfinite(q.y) || !std::isfinite(q.x)) {
            throw NumericError("snake_conv: non-finite sampling position at (" + std::to_string(d) + ", " +
                               std::to_string(h) + ", " + std::to_string(w) + ")");
          }
        }
        for (std::size_t e = 0; e < plan.taps; ++e) {
          const float shift = plan.taps == 1 ? 0.0f : static_cast<float>(e) - 1.0f;
          for (std::size_t k = 0; k < spec.length; ++k) {
            GridPoint q = line[k];
            q.d += shift;
            plan.entries[(e * plan.length + k) * vol + p] = make_tap<Tap>(q, D, H, W);
          }
        }
      }
  return plan;
}

// S[(ci * taps + e) * length + k][p]. Each tap is read once and applied to
// every channel.
template <class Tap>
inline void gather_columns(const float* x, std::size_t cin, const SnakePlan<Tap>& plan, float* cols) {
  const std::size_t vol = plan.positions;
  const std::size_t rows_per_channel = plan.taps * plan.length;
  for (std::size_t r = 0; r < rows_per_channel; ++r) {
    const Tap* taps = plan.entries.data() + r * vol;
    for (std::size_t p = 0; p < vol; ++p) {
      const SampleTap t = taps[p];
      const float* xc = x;
      float* out = cols + r * vol + p;
      for (std::size_t ci = 0; ci < cin; ++ci, xc += vol, out += rows_per_channel * vol) *out = tap_value(t, xc);
    }
  }
}

}  // namespace detail

/// Cell coordinates of one snake line centred on `center`. `deltas` holds the
/// offset channels for that centre in the layout documented above.
inline SnakePositionSet accumulate_positions(const GridPoint& center, std::span<const float> deltas,
                                             const SnakeKernelSpec& spec) {
  spec.validate();
  if (deltas.size() != spec.offset_channels()) {
    throw ShapeError("accumulate_positions: expected " + std::to_string(spec.offset_channels()) + " deltas, got " +
                     std::to_string(deltas.size()));
  }
  SnakePositionSet set;
  set.cells.resize(spec.length);
  detail::trace_line(center, spec, [&](std::size_t ch) { return deltas[ch]; }, set.cells.data());
  return set;
}

/// Bilinear read of fractional points from one feature volume.
///   x:      [C, D, H, W]
///   points: [Q, 3] holding (d, y, x); d is rounded to the nearest slice.
/// Returns [C, Q]. Differentiable with respect to x and to the y, x columns.
inline Tensor bilinear_sample(const Tensor& x, const Tensor& points) {
  if (x.dim() != 4) throw ShapeError("bilinear_sample: feature map must be [C,D,H,W], got " + shape_str(x.shape()));
  if (points.dim() != 2 || points.size(1) != 3) {
    throw ShapeError("bilinear_sample: points must be [Q,3], got " + shape_str(points.shape()));
  }
  const std::size_t C = x.size(0), D = x.size(1), H = x.size(2), W = x.size(3), Q = points.size(0);
  const std::size_t vol = D * H * W;
  std::vector<detail::BilinearTap> taps(Q);
  for (std::size_t q = 0; q < Q; ++q) {
    const GridPoint p{points[q * 3], points[q * 3 + 1], points[q * 3 + 2]};
    if (!std::isfinite(p.d) || !std::isfinite(p.y) || !std::isfinite(p.x)) {
      throw NumericError("bilinear_sample: non-finite point at row " + std::to_string(q));
    }
    taps[q] = detail::make_tap<detail::BilinearTap>(p, D, H, W);
  }
  std::vector<float> out(C * Q);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < Q; ++q) out[c * Q + q] = detail::tap_value(taps[q], x.data().data() + c * vol);
  return detail::make_result(Shape{C, Q}, std::move(out), {x, points},
                             [xi = x.impl(), pi = points.impl(), taps, C, Q, vol](const detail::TensorImpl& o) {
                               if (xi->requires_grad) {
                                 auto& g = xi->ensure_grad();
                                 for (std::size_t c = 0; c < C; ++c)
                                   for (std::size_t q = 0; q < Q; ++q)
                                     for (int j = 0; j < 4; ++j)
                                       g[c * vol + taps[q].index[j]] += taps[q].weight[j] * o.grad[c * Q + q];
                               }
                               if (pi->requires_grad) {
                                 auto& g = pi->ensure_grad();
                                 for (std::size_t c = 0; c < C; ++c) {
                                   const float* v = xi->data.data() + c * vol;
                                   for (std::size_t q = 0; q < Q; ++q) {
                                     g[q * 3 + 1] += o.grad[c * Q + q] * detail::tap_dy(taps[q], v);
                                     g[q * 3 + 2] += o.grad[c * Q + q] * detail::tap_dx(taps[q], v);
                                   }
                                 }
                               }
                             });
}

/// Weighted aggregation over snake-sampled cells:
///   out[n, co, p] = sum_{ci, e, k} weights[co, ci, e, k] * x~[n, ci, cell(e, k, p)]
/// with cell positions accumulated from `offsets`. Same spatial extents as x.
inline Tensor snake_sample_conv(const Tensor& x, const Tensor& offsets, const Tensor& weights,
                                const SnakeKernelSpec& spec) {
  spec.validate();
  detail::require_rank(x, 5, "snake_conv", "input");
  detail::require_rank(offsets, 5, "snake_conv", "offsets");
  detail::require_rank(weights, 4, "snake_conv", "weights");
  const std::size_t N = x.size(0), Cin = x.size(1), D = x.size(2), H = x.size(3), W = x.size(4);
  if (Cin != spec.in_channels) {
    throw ShapeError("snake_conv: input channels (dim 1) = " + std::to_string(Cin) + " but kernel expects " +
                     std::to_string(spec.in_channels));
  }
  const Shape want_off{N, spec.offset_channels(), D, H, W};
  if (offsets.shape() != want_off) {
    throw ShapeError("snake_conv: offsets " + shape_str(offsets.shape()) + " but expected " + shape_str(want_off));
  }
  const Shape want_w{spec.out_channels, Cin, spec.spectral_taps(), spec.length};
  if (weights.shape() != want_w) {
    throw ShapeError("snake_conv: weights " + shape_str(weights.shape()) + " but expected " + shape_str(want_w));
  }
  const std::size_t Cout = spec.out_channels, vol = D * H * W;
  const std::size_t rows = Cin * spec.spectral_taps() * spec.length;
  std::vector<float> out(N * Cout * vol);
  std::vector<float> cols(rows * vol);
  detail::ConstMatMap wm(weights.data().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(rows));
  for (std::size_t n = 0; n < N; ++n) {
    const auto plan = detail::build_plan<detail::SampleTap>(offsets.data().data() + n * spec.offset_channels() * vol, spec, D, H, W);
    detail::gather_columns(x.data().data() + n * Cin * vol, Cin, plan, cols.data());
    detail::ConstMatMap cm(cols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(vol));
    detail::MatMap om(out.data() + n * Cout * vol, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(vol));
    om.noalias() = wm * cm;
  }

  return detail::make_result(
      Shape{N, Cout, D, H, W}, std::move(out), {x, offsets, weights},
      [xi = x.impl(), oi = offsets.impl(), wi = weights.impl(), spec, N, Cin, Cout, D, H, W, vol,
       rows](const detail::TensorImpl& o) {
        const std::size_t taps = spec.spectral_taps(), length = spec.length, half = spec.half();
        const std::size_t steps = spec.steps(), offc = spec.offset_channels();
        const std::size_t rows_per_channel = taps * length;
        std::vector<float> cols(rows * vol), dcols(rows * vol);
        std::vector<float> gpos(spec.perpendicular_dims() * length * vol);
        detail::ConstMatMap wm(wi->data.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(rows));
        float* gw = wi->requires_grad ? wi->ensure_grad().data() : nullptr;
        float* gx = xi->requires_grad ? xi->ensure_grad().data() : nullptr;
        float* goff = oi->requires_grad ? oi->ensure_grad().data() : nullptr;

        for (std::size_t n = 0; n < N; ++n) {
          const float* xn = xi->data.data() + n * Cin * vol;
          const auto plan = detail::build_plan<detail::BilinearTap>(oi->data.data() + n * offc * vol, spec, D, H, W);
          detail::ConstMatMap gom(o.grad.data() + n * Cout * vol, static_cast<Eigen::Index>(Cout),
                                  static_cast<Eigen::Index>(vol));
          if (gw) {
            detail::gather_columns(xn, Cin, plan, cols.data());
            detail::ConstMatMap cm(cols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(vol));
            detail::MatMap gwm(gw, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(rows));
            gwm.noalias() += gom * cm.transpose();
          }
          if (!gx && !goff) continue;
          detail::MatMap dm(dcols.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(vol));
          dm.noalias() = wm.transpose() * gom;

          if (gx) {
            float* gxn = gx + n * Cin * vol;
            const std::size_t stride = rows_per_channel * vol;
            for (std::size_t r = 0; r < rows_per_channel; ++r) {
              const detail::BilinearTap* tp = plan.entries.data() + r * vol;
              for (std::size_t p = 0; p < vol; ++p) {
                const detail::SampleTap t = tp[p];
                const float* drow = dcols.data() + r * vol + p;
                float* gc = gxn;
                for (std::size_t ci = 0; ci < Cin; ++ci, drow += stride, gc += vol) {
                  const float g = *drow;
                  for (int j = 0; j < 4; ++j) gc[t.index[j]] += t.weight[j] * g;
                }
              }
            }
          }
          if (!goff) continue;

          // Gradient w.r.t. each cell's perpendicular coordinate(s), summed over
          // channels and spectral taps.
          std::fill(gpos.begin(), gpos.end(), 0.0f);
          const std::size_t stride = rows_per_channel * vol;
          const bool two = spec.axis == SnakeAxis::Spectral;
          for (std::size_t e = 0; e < taps; ++e)
            for (std::size_t k = 0; k < length; ++k) {
              const std::size_t r = e * length + k;
              const detail::BilinearTap* tp = plan.entries.data() + r * vol;
              float* g0 = gpos.data() + k * vol;
              float* g1 = two ? gpos.data() + (length + k) * vol : nullptr;
              for (std::size_t p = 0; p < vol; ++p) {
                const detail::BilinearTap& t = tp[p];
                const float* drow = dcols.data() + r * vol + p;
                const float* xc = xn;
                float a0 = 0.0f, a1 = 0.0f;
                for (std::size_t ci = 0; ci < Cin; ++ci, drow += stride, xc += vol) {
                  switch (spec.axis) {
                    case SnakeAxis::X: a0 += *drow * detail::tap_dy(t, xc); break;
                    case SnakeAxis::Y: a0 += *drow * detail::tap_dx(t, xc); break;
                    case SnakeAxis::Spectral:
                      a0 += *drow * detail::tap_dy(t, xc);
                      a1 += *drow * detail::tap_dx(t, xc);
                      break;
                  }
                }
                g0[p] += a0;
                if (two) g1[p] += a1;
              }
            }
          // A step on one side moves every cell beyond it: suffix sums.
          float* gon = goff + n * offc * vol;
          for (std::size_t pd = 0; pd < spec.perpendicular_dims(); ++pd) {
            const float* gp = gpos.data() + pd * length * vol;
            for (std::size_t p = 0; p < vol; ++p) {
              float plus = 0.0f, minus = 0.0f;
              for (std::size_t c = half; c >= 1; --c) {
                plus += gp[(half + c) * vol + p];
                minus += gp[(half - c) * vol + p];
                gon[(pd * steps + c - 1) * vol + p] += plus;
                gon[(pd * steps + half + c - 1) * vol + p] += minus;
              }
            }
          }
        }
      });
}

/// Learned snake kernel plus the small convolution that predicts its offsets.
struct SnakeConvLayer {
  SnakeKernelSpec spec;
  Tensor kernel_weights;  // [Cout, Cin, taps, length]
  Tensor offset_weight;   // [perp * (length - 1), Cin, 3, 3, 3]
  Tensor offset_bias;     // [perp * (length - 1)]

  /// He-normal kernel weights; offset predictor starts at zero so training
  /// begins from straight kernels.
  static SnakeConvLayer make(const SnakeKernelSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    SnakeConvLayer layer;
    layer.spec = spec;
    const std::size_t fan_in = spec.in_channels * spec.spectral_taps() * spec.length;
    std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
    layer.kernel_weights = Tensor::zeros({spec.out_channels, spec.in_channels, spec.spectral_taps(), spec.length});
    for (auto& v : layer.kernel_weights.mutable_data()) v = dist(rng);
    layer.kernel_weights.set_requires_grad();
    layer.offset_weight = Tensor::zeros({spec.offset_channels(), spec.in_channels, 3, 3, 3}).set_requires_grad();
    layer.offset_bias = Tensor::zeros({spec.offset_channels()}).set_requires_grad();
    return layer;
  }

  std::vector<Tensor> parameters() const { return {kernel_weights, offset_weight, offset_bias}; }
};

/// Per-position step offsets: 3x3x3 convolution over the layer input squashed
/// by tanh into [-1, 1].
inline OffsetField predict_offsets(const Tensor& x, const SnakeConvLayer& layer) {
  detail::require_rank(x, 5, "predict_offsets", "input");
  if (x.size(1) != layer.spec.in_channels) {
    throw ShapeError("predict_offsets: input channels (dim 1) = " + std::to_string(x.size(1)) +
                     " but layer expects " + std::to_string(layer.spec.in_channels));
  }
  Conv3dOptions opt;
  opt.padding = {1, 1, 1};
  return OffsetField{tanh(conv3d(x, layer.offset_weight, layer.offset_bias, opt))};
}

inline Tensor snake_conv_forward(const Tensor& x, const SnakeConvLayer& layer) {
  const OffsetField offsets = predict_offsets(x, layer);
  return snake_sample_conv(x, offsets.delta, layer.kernel_weights, layer.spec);
}

}  // namespace sgdsc
