#pragma once

// Additive 2D Gaussian rasterizer with optional region masking, plus the
// analytic backward pass.
//
// pixel(x, y) = sum_i [lm absent or r_i == lm(x, y)] * a_i * w_i(x, y) * c_i
// w_i(p)      = exp(-0.5 * (p - mu_i)^T Sigma_i^-1 (p - mu_i)),  Sigma_i = L_i L_i^T
//
// Pixels are sampled at their centers (x + 0.5, y + 0.5). Contributions with
// Mahalanobis distance above the truncation radius are exactly zero.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "cgs/core.hpp"

namespace cgs {

struct RenderSettings {
  // Mahalanobis cut-off; +inf disables truncation.
  double truncation_sigma = 3.0;
  int tile_size = 16;
  int threads = 0;

  static RenderSettings from(const TrainConfig& cfg) {
    return RenderSettings{cfg.truncation_radius_sigma, cfg.tile_size, cfg.threads};
  }

  static RenderSettings untruncated(int tile_size = 16, int threads = 0) {
    return RenderSettings{std::numeric_limits<double>::infinity(), tile_size, threads};
  }
};

/// Worker count: explicit request, else CGS_THREADS, else the OpenMP default.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("CGS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<int>(v);
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace detail {

// exp(x) for x <= 0. The float overload is a branch-free Cephes-style
// polynomial (about 2 ulp) so the pixel loops vectorize; exp(0) == 1 exactly.
inline float exp_nonpositive(float x) {
  x = x < -87.0f ? -87.0f : x;
  // Round to nearest via the 1.5 * 2^23 shifter; |x * log2(e)| < 2^22 here.
  constexpr float kShifter = 12582912.0f;
  const float n = (x * 1.44269504088896341f + kShifter) - kShifter;
  const float r = x - n * 0.693359375f + n * 2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return y * std::bit_cast<float>(bits);
}

inline double exp_nonpositive(double x) { return std::exp(x); }

// Flattened per-Gaussian parameters read by the pixel loops.
template <typename T>
struct Packed {
  T mx, my;
  T l11, l21, l22;
  T alpha;
  T c[3];
  T ac[3];
  std::int32_t region;
};

template <typename T>
std::vector<Packed<T>> pack(const GaussianSet<T>& gs) {
  std::vector<Packed<T>> out(gs.size());
  for (std::size_t i = 0; i < gs.size(); ++i) {
    auto& p = out[i];
    p.mx = gs.means[i].x;
    p.my = gs.means[i].y;
    p.l11 = gs.chol[i].l11;
    p.l21 = gs.chol[i].l21;
    p.l22 = gs.chol[i].l22;
    p.alpha = gs.opacities[i];
    for (int c = 0; c < 3; ++c) {
      p.c[c] = gs.colors[i][c];
      p.ac[c] = p.alpha * p.c[c];
    }
    p.region = gs.region_ids[i];
  }
  return out;
}

// Squared Mahalanobis distance through the triangular solve z = L^-1 d.
template <typename T>
inline T mahalanobis_sq(T dx, T dy, T l11, T l21, T l22, T& z1, T& z2) {
  z1 = dx / l11;
  z2 = (dy - l21 * z1) / l22;
  return z1 * z1 + z2 * z2;
}

template <typename T>
inline T pixel_center(int i) {
  return static_cast<T>(i) + static_cast<T>(0.5);
}

template <typename T>
void check_inputs(const GaussianSet<T>& gs, const LabelMap* labels, int width, int height) {
  if (width < 0 || height < 0) {
    throw Error(ErrorCode::DimensionMismatch, "negative render size");
  }
  if (labels) {
    if (labels->width() != width || labels->height() != height) {
      throw Error(ErrorCode::DimensionMismatch, "label map " + std::to_string(labels->width()) + "x" +
                                                    std::to_string(labels->height()) + " vs render " +
                                                    std::to_string(width) + "x" + std::to_string(height));
    }
    validate_set(gs, labels);
  } else {
    validate_set(gs);
    if (gs.guided()) {
      throw Error(ErrorCode::RegionIdOutOfRange, "guided model rendered without a label map");
    }
  }
}

// One tile row of the forward pass for a single Gaussian. Masked and
// truncated pixels add an exact zero.
template <bool Guided, typename T>
inline void forward_row(const Packed<T>& g, int x0, int nx, T dy, T r2, const std::int32_t* lab,
                        T* const (&acc)[3]) {
  T* __restrict a0 = acc[0];
  T* __restrict a1 = acc[1];
  T* __restrict a2 = acc[2];
  for (int x = 0; x < nx; ++x) {
    const T dx = pixel_center<T>(x0 + x) - g.mx;
    T z1, z2;
    const T q = mahalanobis_sq(dx, dy, g.l11, g.l21, g.l22, z1, z2);
    const T w = exp_nonpositive(static_cast<T>(-0.5) * q);
    bool keep = q <= r2;
    if constexpr (Guided) keep = keep & (lab[x] == g.region);
    const T wk = keep ? w : T(0);
    a0[x] += wk * g.ac[0];
    a1[x] += wk * g.ac[1];
    a2[x] += wk * g.ac[2];
  }
}

// Per-column partial sums of the backward pass for one Gaussian over a
// tile, one lane array per learnable field.
template <typename T>
struct GradLanes {
  T* mx;
  T* my;
  T* l11;
  T* l21;
  T* l22;
  T* c0;
  T* c1;
  T* c2;
  T* alpha;

  static GradLanes over(T* base, int stride) {
    return {base, base + stride, base + 2 * stride, base + 3 * stride, base + 4 * stride,
            base + 5 * stride, base + 6 * stride, base + 7 * stride, base + 8 * stride};
  }
};

// The pointer arguments are spelled out so __restrict applies to each of them.
template <bool Guided, typename T>
inline void backward_row_impl(const Packed<T>& g, int x0, int nx, T dy, T r2, const std::int32_t* __restrict lab,
                              const T* __restrict u0, const T* __restrict u1, const T* __restrict u2,
                              T* __restrict d_mx, T* __restrict d_my, T* __restrict d_l11, T* __restrict d_l21,
                              T* __restrict d_l22, T* __restrict d_c0, T* __restrict d_c1, T* __restrict d_c2,
                              T* __restrict d_a) {
  const T mx = g.mx, l11 = g.l11, l21 = g.l21, l22 = g.l22, alpha = g.alpha;
  const T c0 = g.c[0], c1 = g.c[1], c2 = g.c[2];
  const std::int32_t region = g.region;
  for (int x = 0; x < nx; ++x) {
    const T dx = pixel_center<T>(x0 + x) - mx;
    T z1, z2;
    const T q = mahalanobis_sq(dx, dy, l11, l21, l22, z1, z2);
    const T w = exp_nonpositive(static_cast<T>(-0.5) * q);
    bool keep = q <= r2;
    if constexpr (Guided) keep = keep & (lab[x] == region);
    const T wk = keep ? w : T(0);
    const T aw = alpha * wk;
    const T gc = u0[x] * c0 + u1[x] * c1 + u2[x] * c2;
    const T s = aw * gc;
    // v = Sigma^-1 d through the transposed solve L^T v = z.
    const T v2 = z2 / l22;
    const T v1 = (z1 - l21 * v2) / l11;
    d_c0[x] += u0[x] * aw;
    d_c1[x] += u1[x] * aw;
    d_c2[x] += u2[x] * aw;
    d_a[x] += gc * wk;
    d_mx[x] += s * v1;
    d_my[x] += s * v2;
    d_l11[x] += s * v1 * z1;
    d_l21[x] += s * v2 * z1;
    d_l22[x] += s * v2 * z2;
  }
}

template <bool Guided, typename T>
inline void backward_row(const Packed<T>& g, int x0, int nx, T dy, T r2, const std::int32_t* lab,
                         const T* const (&up)[3], const GradLanes<T>& d) {
  backward_row_impl<Guided>(g, x0, nx, dy, r2, lab, up[0], up[1], up[2], d.mx, d.my, d.l11, d.l21, d.l22, d.c0,
                            d.c1, d.c2, d.alpha);
}

// Which region ids occur inside a tile.
inline std::vector<char> tile_regions(const LabelMap& lm, int x0, int x1, int y0, int y1) {
  std::vector<char> present(static_cast<std::size_t>(lm.region_count()) + 1, 0);
  for (int y = y0; y < y1; ++y) {
    const std::int32_t* row = lm.row(y);
    for (int x = x0; x < x1; ++x) present[static_cast<std::size_t>(row[x])] = 1;
  }
  return present;
}

}  // namespace detail

template <typename T>
T kernel_weight(const Vec2<T>& mean, const Chol<T>& l, const Vec2<T>& p) {
  if (!(l.l11 > 0) || !(l.l22 > 0)) {
    throw Error(ErrorCode::NonPositiveCholDiagonal, "kernel_weight");
  }
  T z1, z2;
  const T q = detail::mahalanobis_sq(p.x - mean.x, p.y - mean.y, l.l11, l.l21, l.l22, z1, z2);
  return detail::exp_nonpositive(static_cast<T>(-0.5) * q);
}

template <typename T>
T kernel_weight(const GaussianSet<T>& gs, std::size_t i, const Vec2<T>& p) {
  return kernel_weight(gs.means[i], gs.chol[i], p);
}

/// Per-tile lists of Gaussian indices (ascending) whose truncation box
/// touches the tile.
struct TileIndex {
  int tile_size = 16;
  int width = 0;
  int height = 0;
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<std::vector<std::uint32_t>> lists;

  std::size_t tile_count() const { return lists.size(); }
  const std::vector<std::uint32_t>& at(int tx, int ty) const {
    return lists[static_cast<std::size_t>(ty) * tiles_x + tx];
  }
  int x0(std::size_t t) const { return static_cast<int>(t % tiles_x) * tile_size; }
  int y0(std::size_t t) const { return static_cast<int>(t / tiles_x) * tile_size; }
  int x1(std::size_t t) const { return std::min(width, x0(t) + tile_size); }
  int y1(std::size_t t) const { return std::min(height, y0(t) + tile_size); }
};

template <typename T>
TileIndex build_tile_index(const GaussianSet<T>& gs, int width, int height, const RenderSettings& settings) {
  TileIndex index;
  index.tile_size = settings.tile_size;
  index.width = width;
  index.height = height;
  const int ts = settings.tile_size;
  index.tiles_x = (width + ts - 1) / ts;
  index.tiles_y = (height + ts - 1) / ts;
  index.lists.resize(static_cast<std::size_t>(index.tiles_x) * index.tiles_y);
  if (index.lists.empty()) return index;

  const double radius = settings.truncation_sigma;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    int px0 = 0, px1 = width - 1, py0 = 0, py1 = height - 1;
    if (std::isfinite(radius)) {
      const double l11 = gs.chol[i].l11;
      const double l21 = gs.chol[i].l21;
      const double l22 = gs.chol[i].l22;
      // Half extents of the ellipse's bounding box, padded against rounding.
      const double hx = radius * std::abs(l11) * (1 + 1e-6) + 1e-6;
      const double hy = radius * std::sqrt(l21 * l21 + l22 * l22) * (1 + 1e-6) + 1e-6;
      const double mx = gs.means[i].x;
      const double my = gs.means[i].y;
      const double lo_x = std::ceil(mx - hx - 0.5), hi_x = std::floor(mx + hx - 0.5);
      const double lo_y = std::ceil(my - hy - 0.5), hi_y = std::floor(my + hy - 0.5);
      if (!(hi_x >= 0 && lo_x <= width - 1 && hi_y >= 0 && lo_y <= height - 1)) continue;
      px0 = static_cast<int>(std::max(lo_x, 0.0));
      px1 = static_cast<int>(std::min(hi_x, static_cast<double>(width - 1)));
      py0 = static_cast<int>(std::max(lo_y, 0.0));
      py1 = static_cast<int>(std::min(hi_y, static_cast<double>(height - 1)));
    }
    for (int ty = py0 / ts; ty <= py1 / ts; ++ty) {
      for (int tx = px0 / ts; tx <= px1 / ts; ++tx) {
        index.lists[static_cast<std::size_t>(ty) * index.tiles_x + tx].push_back(static_cast<std::uint32_t>(i));
      }
    }
  }
  return index;
}

/// Tiled forward pass. With a label map, each Gaussian only reaches pixels
/// whose label equals its region id.
template <typename T>
ImageBuffer<T> render(const GaussianSet<T>& gs, const LabelMap* labels, int width, int height,
                      const RenderSettings& settings = {}) {
  detail::check_inputs(gs, labels, width, height);
  ImageBuffer<T> out(width, height);
  if (gs.empty() || width == 0 || height == 0) return out;

  const auto packed = detail::pack(gs);
  const TileIndex index = build_tile_index(gs, width, height, settings);
  const T r2 = static_cast<T>(settings.truncation_sigma * settings.truncation_sigma);
  const int ts = settings.tile_size;
  const auto tiles = static_cast<std::ptrdiff_t>(index.tile_count());
  const int threads = resolve_threads(settings.threads);

#pragma omp parallel num_threads(threads)
  {
    std::vector<T> acc(static_cast<std::size_t>(3) * ts * ts);
#pragma omp for schedule(dynamic, 1)
    for (std::ptrdiff_t t = 0; t < tiles; ++t) {
      const auto& list = index.lists[static_cast<std::size_t>(t)];
      if (list.empty()) continue;
      const int x0 = index.x0(t), x1 = index.x1(t), y0 = index.y0(t), y1 = index.y1(t);
      const int nx = x1 - x0;
      std::fill(acc.begin(), acc.end(), T(0));
      T* a0 = acc.data();
      T* a1 = a0 + ts * ts;
      T* a2 = a1 + ts * ts;
      std::vector<char> present;
      if (labels) present = detail::tile_regions(*labels, x0, x1, y0, y1);

      for (std::uint32_t gid : list) {
        const auto& g = packed[gid];
        if (labels && !present[static_cast<std::size_t>(g.region)]) continue;
        for (int y = y0; y < y1; ++y) {
          const T dy = detail::pixel_center<T>(y) - g.my;
          const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(y - y0) * ts;
          T* rows[3] = {a0 + row, a1 + row, a2 + row};
          if (labels) {
            detail::forward_row<true>(g, x0, nx, dy, r2, labels->row(y) + x0, rows);
          } else {
            detail::forward_row<false>(g, x0, nx, dy, r2, nullptr, rows);
          }
        }
      }
      for (int y = y0; y < y1; ++y) {
        const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(y - y0) * ts;
        T* dst = out.pixel(x0, y);
        for (int x = 0; x < nx; ++x) {
          dst[3 * x + 0] = a0[row + x];
          dst[3 * x + 1] = a1[row + x];
          dst[3 * x + 2] = a2[row + x];
        }
      }
    }
  }
  return out;
}

/// Reference forward pass: every pixel against every Gaussian, no tiling.
/// No truncation by default; a finite `truncation_sigma` applies the same
/// Mahalanobis cut-off as `render`.
template <typename T>
ImageBuffer<T> render_naive(const GaussianSet<T>& gs, const LabelMap* labels, int width, int height,
                            double truncation_sigma = std::numeric_limits<double>::infinity()) {
  detail::check_inputs(gs, labels, width, height);
  ImageBuffer<T> out(width, height);
  const auto packed = detail::pack(gs);
  const T r2 = static_cast<T>(truncation_sigma * truncation_sigma);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      T* px = out.pixel(x, y);
      for (const auto& g : packed) {
        if (labels && labels->at(x, y) != g.region) continue;
        T z1, z2;
        const T q = detail::mahalanobis_sq(detail::pixel_center<T>(x) - g.mx,
                                           detail::pixel_center<T>(y) - g.my, g.l11, g.l21, g.l22, z1, z2);
        if (!(q <= r2)) continue;
        const T w = detail::exp_nonpositive(static_cast<T>(-0.5) * q);
        px[0] += w * g.ac[0];
        px[1] += w * g.ac[1];
        px[2] += w * g.ac[2];
      }
    }
  }
  return out;
}

/// Gradients of a scalar loss with respect to every learnable parameter,
/// given dL/dpixel. With `clamp_active`, channels of `rendered` outside
/// [0, 1] pass no gradient (derivative of the clamp). The reduction is
/// per-tile partials merged in tile order, so results do not depend on the
/// thread count.
template <typename T>
GradientSet<T> backward(const GaussianSet<T>& gs, const LabelMap* labels, int width, int height,
                        const ImageBuffer<T>& dloss_dpixels, bool clamp_active, const ImageBuffer<T>& rendered,
                        const RenderSettings& settings = {}) {
  detail::check_inputs(gs, labels, width, height);
  if (dloss_dpixels.width() != width || dloss_dpixels.height() != height || !rendered.same_size(dloss_dpixels)) {
    throw Error(ErrorCode::DimensionMismatch, "backward: gradient image or render has the wrong size");
  }
  GradientSet<T> grads(gs.size());
  if (gs.empty() || width == 0 || height == 0) return grads;

  const auto packed = detail::pack(gs);
  const TileIndex index = build_tile_index(gs, width, height, settings);
  const T r2 = static_cast<T>(settings.truncation_sigma * settings.truncation_sigma);
  const int ts = settings.tile_size;
  const auto tiles = static_cast<std::ptrdiff_t>(index.tile_count());
  const int threads = resolve_threads(settings.threads);

  constexpr int kFields = 9;  // mx, my, l11, l21, l22, r, g, b, alpha
  std::vector<std::vector<std::array<T, kFields>>> partials(index.tile_count());

#pragma omp parallel num_threads(threads)
  {
    std::vector<T> upstream(static_cast<std::size_t>(3) * ts * ts);
    std::vector<T> lanes(static_cast<std::size_t>(kFields) * ts);
    const auto lane_ptrs = detail::GradLanes<T>::over(lanes.data(), ts);
#pragma omp for schedule(dynamic, 1)
    for (std::ptrdiff_t t = 0; t < tiles; ++t) {
      const auto& list = index.lists[static_cast<std::size_t>(t)];
      if (list.empty()) continue;
      auto& part = partials[static_cast<std::size_t>(t)];
      part.assign(list.size(), std::array<T, kFields>{});
      const int x0 = index.x0(t), x1 = index.x1(t), y0 = index.y0(t), y1 = index.y1(t);
      const int nx = x1 - x0;

      T* g0 = upstream.data();
      T* g1 = g0 + ts * ts;
      T* g2 = g1 + ts * ts;
      for (int y = y0; y < y1; ++y) {
        const T* src = dloss_dpixels.pixel(x0, y);
        const T* ren = rendered.pixel(x0, y);
        const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(y - y0) * ts;
        for (int x = 0; x < nx; ++x) {
          T* dst[3] = {g0 + row + x, g1 + row + x, g2 + row + x};
          for (int c = 0; c < 3; ++c) {
            const T v = ren[3 * x + c];
            const bool saturated = clamp_active && (v < T(0) || v > T(1));
            *dst[c] = saturated ? T(0) : src[3 * x + c];
          }
        }
      }
      std::vector<char> present;
      if (labels) present = detail::tile_regions(*labels, x0, x1, y0, y1);

      for (std::size_t j = 0; j < list.size(); ++j) {
        const auto& g = packed[list[j]];
        if (labels && !present[static_cast<std::size_t>(g.region)]) continue;
        std::fill(lanes.begin(), lanes.end(), T(0));
        for (int y = y0; y < y1; ++y) {
          const T dy = detail::pixel_center<T>(y) - g.my;
          const std::ptrdiff_t row = static_cast<std::ptrdiff_t>(y - y0) * ts;
          const T* up[3] = {g0 + row, g1 + row, g2 + row};
          if (labels) {
            detail::backward_row<true>(g, x0, nx, dy, r2, labels->row(y) + x0, up, lane_ptrs);
          } else {
            detail::backward_row<false>(g, x0, nx, dy, r2, nullptr, up, lane_ptrs);
          }
        }
        auto& out = part[j];
        for (int f = 0; f < kFields; ++f) {
          T sum = 0;
          const T* lane = lanes.data() + static_cast<std::ptrdiff_t>(f) * ts;
          for (int x = 0; x < nx; ++x) sum += lane[x];
          out[static_cast<std::size_t>(f)] = sum;
        }
      }
    }
  }

  for (std::size_t t = 0; t < index.tile_count(); ++t) {
    const auto& list = index.lists[t];
    const auto& part = partials[t];
    for (std::size_t j = 0; j < part.size(); ++j) {
      const std::uint32_t i = list[j];
      const auto& p = part[j];
      grads.means[i].x += p[0];
      grads.means[i].y += p[1];
      grads.chol[i].l11 += p[2];
      grads.chol[i].l21 += p[3];
      grads.chol[i].l22 += p[4];
      grads.colors[i].r += p[5];
      grads.colors[i].g += p[6];
      grads.colors[i].b += p[7];
      grads.opacities[i] += p[8];
    }
  }
  return grads;
}

}  // namespace cgs
