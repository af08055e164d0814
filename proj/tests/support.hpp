#pragma once

// Generators and independent oracles shared by the unit and acceptance tests.
// Nothing here calls into the code under test except to build inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <vector>

#include "cgs/cgs.hpp"

namespace cgs::testing {

/// Code of the cgs::Error thrown by `f`, or nullopt when nothing is thrown.
template <typename F>
std::optional<ErrorCode> error_code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }
  bool coin() { return integer(0, 1) == 1; }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

/// Random label map with exactly `regions` ids, every one present. Voronoi
/// cells around distinct seeds, or (speckle) independent pixels.
inline LabelMap random_label_map(Rng& rng, int w, int h, int regions, bool speckle = false) {
  std::vector<std::int32_t> labels(static_cast<std::size_t>(w) * h);
  if (speckle) {
    for (auto& l : labels) l = rng.integer(1, regions);
    // Force presence of every id at distinct random pixels.
    std::vector<std::size_t> idx(labels.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (int r = 0; r < regions; ++r) labels[idx[static_cast<std::size_t>(r)]] = r + 1;
  } else {
    std::vector<std::pair<int, int>> seeds;
    while (static_cast<int>(seeds.size()) < regions) {
      std::pair<int, int> s{rng.integer(0, w - 1), rng.integer(0, h - 1)};
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int best = 0;
        long best_d = std::numeric_limits<long>::max();
        for (int k = 0; k < regions; ++k) {
          const long dx = x - seeds[static_cast<std::size_t>(k)].first;
          const long dy = y - seeds[static_cast<std::size_t>(k)].second;
          if (dx * dx + dy * dy < best_d) {
            best_d = dx * dx + dy * dy;
            best = k;
          }
        }
        labels[static_cast<std::size_t>(y) * w + x] = best + 1;
      }
    }
  }
  return LabelMap(w, h, std::move(labels), regions);
}

struct SceneOptions {
  double color_lo = -0.5;
  double color_hi = 1.5;
  double opacity_lo = 0.2;
  double opacity_hi = 1.5;
};

/// Random valid Gaussian set over a w x h image. Means may fall slightly
/// outside the image; factors range from sub-pixel to a quarter image.
template <typename T>
GaussianSet<T> random_gaussians(Rng& rng, int w, int h, int n, int regions = 0, const SceneOptions& o = {}) {
  GaussianSet<T> gs;
  const double big = std::max(w, h) / 4.0;
  for (int i = 0; i < n; ++i) {
    const Vec2<T> mean{static_cast<T>(rng.uniform(-0.1 * w, 1.1 * w)), static_cast<T>(rng.uniform(-0.1 * h, 1.1 * h))};
    const Chol<T> l{static_cast<T>(rng.uniform(0.5, big)), static_cast<T>(rng.uniform(-big / 2, big / 2)),
                    static_cast<T>(rng.uniform(0.5, big))};
    const Rgb<T> c{static_cast<T>(rng.uniform(o.color_lo, o.color_hi)),
                   static_cast<T>(rng.uniform(o.color_lo, o.color_hi)),
                   static_cast<T>(rng.uniform(o.color_lo, o.color_hi))};
    const T alpha = static_cast<T>(rng.uniform(o.opacity_lo, o.opacity_hi));
    gs.push_back(mean, l, c, alpha, regions > 0 ? rng.integer(1, regions) : 0);
  }
  return gs;
}

template <typename T>
ImageBuffer<T> random_image(Rng& rng, int w, int h, double lo = 0.0, double hi = 1.0) {
  ImageBuffer<T> img(w, h);
  for (auto& v : img.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return img;
}

// ---------------------------------------------------------------------------
// Oracles

/// Boundary pixels by direct 4-neighbor comparison.
inline std::vector<std::pair<int, int>> brute_boundary(const LabelMap& lm) {
  std::vector<std::pair<int, int>> out;
  for (int y = 0; y < lm.height(); ++y) {
    for (int x = 0; x < lm.width(); ++x) {
      const int l = lm.at(x, y);
      const bool edge = (x > 0 && lm.at(x - 1, y) != l) || (x + 1 < lm.width() && lm.at(x + 1, y) != l) ||
                        (y > 0 && lm.at(x, y - 1) != l) || (y + 1 < lm.height() && lm.at(x, y + 1) != l);
      if (edge) out.emplace_back(x, y);
    }
  }
  return out;
}

/// Band membership by scanning every boundary pixel for every pixel.
inline std::vector<std::uint8_t> brute_band(const LabelMap& lm, int radius) {
  const auto boundary = brute_boundary(lm);
  std::vector<std::uint8_t> band(static_cast<std::size_t>(lm.width()) * lm.height(), 0);
  const long r2 = static_cast<long>(radius) * radius;
  for (int y = 0; y < lm.height(); ++y) {
    for (int x = 0; x < lm.width(); ++x) {
      for (const auto& [bx, by] : boundary) {
        const long dx = x - bx, dy = y - by;
        if (dx * dx + dy * dy <= r2) {
          band[static_cast<std::size_t>(y) * lm.width() + x] = 1;
          break;
        }
      }
    }
  }
  return band;
}

/// Forward pass written out directly from the model definition, in double:
/// explicit covariance inverse, explicit indicator, optional cut-off.
template <typename T>
ImageBuffer<double> oracle_render(const GaussianSet<T>& gs, const LabelMap* lm, int w, int h,
                                  double truncation = std::numeric_limits<double>::infinity()) {
  ImageBuffer<double> out(w, h);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const double a = gs.chol[i].l11, b = gs.chol[i].l21, c = gs.chol[i].l22;
    const double sxx = a * a, sxy = a * b, syy = b * b + c * c;
    const double det = sxx * syy - sxy * sxy;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (lm && lm->at(x, y) != gs.region_ids[i]) continue;
        const double dx = x + 0.5 - gs.means[i].x, dy = y + 0.5 - gs.means[i].y;
        const double q = (syy * dx * dx - 2 * sxy * dx * dy + sxx * dy * dy) / det;
        if (q > truncation * truncation) continue;
        const double wgt = std::exp(-0.5 * q);
        for (int k = 0; k < 3; ++k) out.at(x, y, k) += gs.opacities[i] * wgt * gs.colors[i][k];
      }
    }
  }
  return out;
}

/// Reference SSIM: explicit 2D window per output position (no separable
/// filtering), per-channel mean of the map, optional mask over window centers.
template <typename T>
double oracle_ssim(const ImageBuffer<T>& a, const ImageBuffer<T>& b, const std::vector<std::uint8_t>* mask = nullptr) {
  constexpr int kWin = 11;
  double g[kWin][kWin];
  double total = 0;
  for (int i = 0; i < kWin; ++i) {
    for (int j = 0; j < kWin; ++j) {
      const double di = i - 5, dj = j - 5;
      g[i][j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
      total += g[i][j];
    }
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  auto cl = [](double v) { return std::clamp(v, 0.0, 1.0); };
  double sum = 0;
  for (int ch = 0; ch < 3; ++ch) {
    double acc = 0;
    long count = 0;
    for (int y = 0; y + kWin <= a.height(); ++y) {
      for (int x = 0; x + kWin <= a.width(); ++x) {
        if (mask && !(*mask)[static_cast<std::size_t>(y + 5) * a.width() + (x + 5)]) continue;
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < kWin; ++i) {
          for (int j = 0; j < kWin; ++j) {
            const double wt = g[i][j] / total;
            const double va = cl(a.at(x + j, y + i, ch)), vb = cl(b.at(x + j, y + i, ch));
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++count;
      }
    }
    sum += acc / static_cast<double>(count);
  }
  return sum / 3.0;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Every learnable scalar of a Gaussian set, addressed by (gaussian, field).
/// Field order: mx, my, l11, l21, l22, r, g, b, alpha.
inline constexpr int kFields = 9;
inline constexpr const char* kFieldNames[kFields] = {"mean.x", "mean.y", "l11", "l21", "l22",
                                                     "color.r", "color.g", "color.b", "alpha"};

template <typename T>
T& param(GaussianSet<T>& gs, std::size_t i, int field) {
  switch (field) {
    case 0: return gs.means[i].x;
    case 1: return gs.means[i].y;
    case 2: return gs.chol[i].l11;
    case 3: return gs.chol[i].l21;
    case 4: return gs.chol[i].l22;
    case 5: return gs.colors[i].r;
    case 6: return gs.colors[i].g;
    case 7: return gs.colors[i].b;
    default: return gs.opacities[i];
  }
}

template <typename T>
T grad_of(const GradientSet<T>& g, std::size_t i, int field) {
  switch (field) {
    case 0: return g.means[i].x;
    case 1: return g.means[i].y;
    case 2: return g.chol[i].l11;
    case 3: return g.chol[i].l21;
    case 4: return g.chol[i].l22;
    case 5: return g.colors[i].r;
    case 6: return g.colors[i].g;
    case 7: return g.colors[i].b;
    default: return g.opacities[i];
  }
}

/// Relative error with an absolute floor for tiny analytic values.
struct GradCheck {
  double analytic = 0;
  double numeric = 0;
  bool ok = false;
  double error = 0;
};

inline GradCheck compare_gradient(double analytic, double numeric, double rel_tol = 1e-3, double abs_floor = 1e-6) {
  GradCheck c{analytic, numeric, false, 0};
  if (std::abs(analytic) < abs_floor) {
    c.error = std::abs(analytic - numeric);
    c.ok = c.error < abs_floor;
  } else {
    c.error = std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric));
    c.ok = c.error < rel_tol;
  }
  return c;
}

/// Scalar objective for gradient checks: sum_p u_p * f(render_p) where f is
/// the identity or the [0, 1] clamp. Linear in the render, so the only kinks
/// are the clamp boundaries.
struct LinearObjective {
  ImageBuffer<double> weights;
  bool clamp = false;

  double operator()(const ImageBuffer<double>& rendered) const {
    double s = 0;
    for (std::size_t k = 0; k < rendered.data().size(); ++k) {
      const double v = clamp ? std::clamp(rendered.data()[k], 0.0, 1.0) : rendered.data()[k];
      s += weights.data()[k] * v;
    }
    return s;
  }
};

/// True if some channel moves across 0 or 1 between the two renders, where
/// the clamped objective is not differentiable.
inline bool crosses_clamp_kink(const ImageBuffer<double>& lo, const ImageBuffer<double>& hi) {
  for (std::size_t k = 0; k < lo.data().size(); ++k) {
    const double a = lo.data()[k], b = hi.data()[k];
    for (double edge : {0.0, 1.0}) {
      if ((a - edge) * (b - edge) <= 0 && a != b) return true;
    }
  }
  return false;
}

struct GradientSweep {
  int probes = 0;
  int skipped = 0;
  int failures = 0;
  double worst = 0;
};

/// Checks every analytic partial of `backward` against central differences
/// of the linear objective, truncation disabled.
inline GradientSweep sweep_gradients(const GaussianSet<double>& gs, const LabelMap* lm, int w, int h,
                                     const LinearObjective& obj, double step = 1e-4) {
  const RenderSettings settings = RenderSettings::untruncated();
  const auto rendered = render(gs, lm, w, h, settings);
  const auto grads = backward(gs, lm, w, h, obj.weights, obj.clamp, rendered, settings);
  GradientSweep sweep;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    for (int f = 0; f < kFields; ++f) {
      GaussianSet<double> plus = gs, minus = gs;
      param(plus, i, f) += step;
      param(minus, i, f) -= step;
      const auto rp = render(plus, lm, w, h, settings);
      const auto rm = render(minus, lm, w, h, settings);
      if (obj.clamp && crosses_clamp_kink(rm, rp)) {
        ++sweep.skipped;
        continue;
      }
      const double numeric = (obj(rp) - obj(rm)) / (2 * step);
      const auto check = compare_gradient(grad_of(grads, i, f), numeric);
      ++sweep.probes;
      sweep.worst = std::max(sweep.worst, check.error);
      if (!check.ok) ++sweep.failures;
    }
  }
  return sweep;
}

}  // namespace cgs::testing
