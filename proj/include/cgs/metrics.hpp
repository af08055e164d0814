#pragma once

// Image quality metrics: PSNR, SSIM, MS-SSIM, and their edge-focused
// variants restricted to a band around segmentation boundaries.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "cgs/core.hpp"

namespace cgs {

inline constexpr double kPsnrCap = 99.0;
inline constexpr int kDefaultBandRadius = 5;

/// Pixels within Euclidean distance `radius` of a segmentation boundary.
struct EdgeBandMask {
  int width = 0;
  int height = 0;
  int radius = kDefaultBandRadius;
  std::vector<std::uint8_t> in_band;

  bool at(int x, int y) const { return in_band[static_cast<std::size_t>(y) * width + x] != 0; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(in_band.begin(), in_band.end(), std::uint8_t{1}));
  }

  static EdgeBandMask all(int width, int height) {
    return EdgeBandMask{width, height, 0, std::vector<std::uint8_t>(static_cast<std::size_t>(width) * height, 1)};
  }
};

struct MetricsBundle {
  double psnr = 0;
  std::optional<double> ms_ssim;
  std::optional<double> ef_psnr;
  std::optional<double> ef_ssim;
  std::size_t band_pixels = 0;
};

/// A pixel is a boundary pixel when one of its 4-neighbors has another label.
inline std::vector<std::uint8_t> boundary_pixels(const LabelMap& lm) {
  const int w = lm.width(), h = lm.height();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::int32_t l = lm.at(x, y);
      const bool edge = (x > 0 && lm.at(x - 1, y) != l) || (x + 1 < w && lm.at(x + 1, y) != l) ||
                        (y > 0 && lm.at(x, y - 1) != l) || (y + 1 < h && lm.at(x, y + 1) != l);
      out[static_cast<std::size_t>(y) * w + x] = edge ? 1 : 0;
    }
  }
  return out;
}

namespace detail {

// Exact 1D squared distance transform (Felzenszwalb & Huttenlocher) over
// integer sample positions. `f` holds 0 at sites and a large value elsewhere.
inline void distance_transform_1d(const std::vector<std::int64_t>& f, std::vector<std::int64_t>& d,
                                  std::vector<int>& v, std::vector<double>& z) {
  const int n = static_cast<int>(f.size());
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  d.assign(static_cast<std::size_t>(n), kInf);
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] >= kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -std::numeric_limits<double>::infinity();
      z[1] = std::numeric_limits<double>::infinity();
      continue;
    }
    auto intersect = [&](int p) {
      return (static_cast<double>(f[static_cast<std::size_t>(q)] + std::int64_t{q} * q) -
              static_cast<double>(f[static_cast<std::size_t>(p)] + std::int64_t{p} * p)) /
             (2.0 * (q - p));
    };
    double s = intersect(v[static_cast<std::size_t>(k)]);
    // z[0] is -inf, so this stops at k == 0.
    while (s <= z[static_cast<std::size_t>(k)]) {
      --k;
      s = intersect(v[static_cast<std::size_t>(k)]);
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    d[static_cast<std::size_t>(q)] = std::int64_t{q - p} * (q - p) + f[static_cast<std::size_t>(p)];
  }
}

template <typename T>
inline double clamp01(T v) {
  return std::clamp(static_cast<double>(v), 0.0, 1.0);
}

template <typename T>
void check_same_size(const ImageBuffer<T>& a, const ImageBuffer<T>& b) {
  if (!a.same_size(b)) throw Error(ErrorCode::DimensionMismatch, "metric inputs differ in size");
}

inline void check_mask(const EdgeBandMask* mask, int width, int height) {
  if (mask && (mask->width != width || mask->height != height)) {
    throw Error(ErrorCode::DimensionMismatch, "mask size differs from image size");
  }
}

}  // namespace detail

/// Exact squared Euclidean distance from every pixel to the nearest boundary
/// pixel, by two separable passes.
inline std::vector<std::int64_t> boundary_distance_sq(const LabelMap& lm) {
  const int w = lm.width(), h = lm.height();
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  const auto boundary = boundary_pixels(lm);
  std::vector<std::int64_t> grid(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = boundary[i] ? 0 : kInf;

  std::vector<std::int64_t> f, d;
  std::vector<int> v;
  std::vector<double> z;
  f.resize(static_cast<std::size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[static_cast<std::size_t>(y)] = grid[static_cast<std::size_t>(y) * w + x];
    detail::distance_transform_1d(f, d, v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = d[static_cast<std::size_t>(y)];
  }
  f.resize(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y) * w, w, f.begin());
    detail::distance_transform_1d(f, d, v, z);
    std::copy_n(d.begin(), w, grid.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  return grid;
}

inline EdgeBandMask edge_band(const LabelMap& lm, int radius = kDefaultBandRadius) {
  if (radius < 0) throw Error(ErrorCode::BadSpec, "band radius must be >= 0");
  if (lm.region_count() < 2) throw Error(ErrorCode::SingleRegion, "label map has no boundary");
  const auto dist = boundary_distance_sq(lm);
  EdgeBandMask mask{lm.width(), lm.height(), radius, std::vector<std::uint8_t>(dist.size(), 0)};
  const std::int64_t r2 = std::int64_t{radius} * radius;
  for (std::size_t i = 0; i < dist.size(); ++i) mask.in_band[i] = dist[i] <= r2 ? 1 : 0;
  return mask;
}

/// PSNR in dB with both images clamped to [0, 1]; capped at 99 dB.
template <typename T>
double psnr(const ImageBuffer<T>& a, const ImageBuffer<T>& b, const EdgeBandMask* mask = nullptr) {
  detail::check_same_size(a, b);
  detail::check_mask(mask, a.width(), a.height());
  double sum = 0;
  std::size_t count = 0;
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) {
      if (mask && !mask->at(x, y)) continue;
      const T* pa = a.pixel(x, y);
      const T* pb = b.pixel(x, y);
      for (int c = 0; c < 3; ++c) {
        const double d = detail::clamp01(pa[c]) - detail::clamp01(pb[c]);
        sum += d * d;
      }
      count += 3;
    }
  }
  if (count == 0) throw Error(ErrorCode::EmptyMask, "no pixels to compare");
  const double mse = sum / static_cast<double>(count);
  if (mse == 0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline std::array<double, kSsimWindow> ssim_window() {
  std::array<double, kSsimWindow> w{};
  double total = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double t = i - kSsimWindow / 2;
    w[static_cast<std::size_t>(i)] = std::exp(-t * t / (2 * kSsimSigma * kSsimSigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Single-channel plane of doubles.
struct Plane {
  int width = 0;
  int height = 0;
  std::vector<double> v;
  double at(int x, int y) const { return v[static_cast<std::size_t>(y) * width + x]; }
};

// "Valid" separable Gaussian filter: output (w - 10) x (h - 10).
inline Plane filter_valid(const Plane& in) {
  static const auto win = ssim_window();
  const int ow = in.width - kSsimWindow + 1, oh = in.height - kSsimWindow + 1;
  Plane tmp{ow, in.height, std::vector<double>(static_cast<std::size_t>(ow) * in.height)};
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += win[static_cast<std::size_t>(k)] * in.at(x + k, y);
      tmp.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  Plane out{ow, oh, std::vector<double>(static_cast<std::size_t>(ow) * oh)};
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0;
      for (int k = 0; k < kSsimWindow; ++k) s += win[static_cast<std::size_t>(k)] * tmp.at(x, y + k);
      out.v[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  return out;
}

// SSIM and contrast-structure maps over valid window centers.
struct SsimMaps {
  Plane ssim;
  Plane cs;
};

inline SsimMaps ssim_maps(const Plane& a, const Plane& b) {
  auto product = [](const Plane& p, const Plane& q) {
    Plane out{p.width, p.height, std::vector<double>(p.v.size())};
    for (std::size_t i = 0; i < p.v.size(); ++i) out.v[i] = p.v[i] * q.v[i];
    return out;
  };
  const Plane mu_a = filter_valid(a);
  const Plane mu_b = filter_valid(b);
  const Plane aa = filter_valid(product(a, a));
  const Plane bb = filter_valid(product(b, b));
  const Plane ab = filter_valid(product(a, b));
  SsimMaps maps{{mu_a.width, mu_a.height, std::vector<double>(mu_a.v.size())},
                {mu_a.width, mu_a.height, std::vector<double>(mu_a.v.size())}};
  for (std::size_t i = 0; i < mu_a.v.size(); ++i) {
    const double ma = mu_a.v[i], mb = mu_b.v[i];
    const double va = aa.v[i] - ma * ma;
    const double vb = bb.v[i] - mb * mb;
    const double cov = ab.v[i] - ma * mb;
    const double cs = (2 * cov + kSsimC2) / (va + vb + kSsimC2);
    const double lum = (2 * ma * mb + kSsimC1) / (ma * ma + mb * mb + kSsimC1);
    maps.cs.v[i] = cs;
    maps.ssim.v[i] = lum * cs;
  }
  return maps;
}

template <typename T>
Plane channel_plane(const ImageBuffer<T>& img, int c) {
  Plane p{img.width(), img.height(), std::vector<double>(img.pixel_count())};
  for (std::size_t i = 0; i < p.v.size(); ++i) p.v[i] = clamp01(img.data()[i * 3 + static_cast<std::size_t>(c)]);
  return p;
}

// Mean of a map whose (x, y) entry is centered on image pixel (x + 5, y + 5);
// with a mask only centers inside it are averaged.
inline double map_mean(const Plane& map, const EdgeBandMask* mask) {
  const int off = kSsimWindow / 2;
  double sum = 0;
  std::size_t count = 0;
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (mask && !mask->at(x + off, y + off)) continue;
      sum += map.at(x, y);
      ++count;
    }
  }
  if (count == 0) throw Error(ErrorCode::EmptyMask, "mask has no pixel with a full SSIM window");
  return sum / static_cast<double>(count);
}

inline Plane downsample2(const Plane& p) {
  Plane out{p.width / 2, p.height / 2, {}};
  out.v.resize(static_cast<std::size_t>(out.width) * out.height);
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      out.v[static_cast<std::size_t>(y) * out.width + x] =
          0.25 * (p.at(2 * x, 2 * y) + p.at(2 * x + 1, 2 * y) + p.at(2 * x, 2 * y + 1) + p.at(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

}  // namespace detail

/// SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1),
/// per channel then averaged. With a mask, the SSIM map is averaged over
/// masked window centers only.
template <typename T>
double ssim(const ImageBuffer<T>& a, const ImageBuffer<T>& b, const EdgeBandMask* mask = nullptr) {
  detail::check_same_size(a, b);
  detail::check_mask(mask, a.width(), a.height());
  if (a.width() < detail::kSsimWindow || a.height() < detail::kSsimWindow) {
    throw Error(ErrorCode::ImageTooSmall, "SSIM needs at least 11x11 pixels");
  }
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    const auto maps = detail::ssim_maps(detail::channel_plane(a, c), detail::channel_plane(b, c));
    total += detail::map_mean(maps.ssim, mask);
  }
  return total / 3.0;
}

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Five-scale MS-SSIM with 2x average-pool downsampling between scales.
template <typename T>
double ms_ssim(const ImageBuffer<T>& a, const ImageBuffer<T>& b) {
  detail::check_same_size(a, b);
  constexpr int kMin = detail::kSsimWindow << (kMsSsimWeights.size() - 1);
  if (a.width() < kMin || a.height() < kMin) {
    throw Error(ErrorCode::ImageTooSmall, "MS-SSIM needs at least 176 pixels per side");
  }
  double total = 0;
  for (int c = 0; c < 3; ++c) {
    detail::Plane pa = detail::channel_plane(a, c);
    detail::Plane pb = detail::channel_plane(b, c);
    double score = 1.0;
    for (std::size_t s = 0; s < kMsSsimWeights.size(); ++s) {
      const auto maps = detail::ssim_maps(pa, pb);
      const bool last = s + 1 == kMsSsimWeights.size();
      const double v = detail::map_mean(last ? maps.ssim : maps.cs, nullptr);
      score *= std::pow(std::max(v, 0.0), kMsSsimWeights[s]);
      if (!last) {
        pa = detail::downsample2(pa);
        pb = detail::downsample2(pb);
      }
    }
    total += score;
  }
  return total / 3.0;
}

/// Full evaluation bundle. Edge-focused fields stay empty when no label map
/// is given or it has a single region; MS-SSIM stays empty on small images.
template <typename T>
MetricsBundle evaluate(const ImageBuffer<T>& reference, const ImageBuffer<T>& test, const LabelMap* labels,
                       int band_radius = kDefaultBandRadius) {
  MetricsBundle m;
  m.psnr = psnr(reference, test);
  try {
    m.ms_ssim = ms_ssim(reference, test);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::ImageTooSmall) throw;
  }
  if (labels && labels->region_count() >= 2) {
    if (!labels->matches(reference)) throw Error(ErrorCode::DimensionMismatch, "labels vs image");
    const EdgeBandMask band = edge_band(*labels, band_radius);
    m.band_pixels = band.count();
    m.ef_psnr = psnr(reference, test, &band);
    try {
      m.ef_ssim = ssim(reference, test, &band);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::ImageTooSmall && e.code() != ErrorCode::EmptyMask) throw;
    }
  }
  return m;
}

}  // namespace cgs
