#pragma once

// Fitting loop: initialization, region assignment with warm-up refreshes,
// mean-absolute-error loss with an optional [0, 1] clamp, and Adam.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "cgs/core.hpp"
#include "cgs/metrics.hpp"
#include "cgs/rasterizer.hpp"

namespace cgs {

template <typename T>
struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  GradientSet<T> m;
  GradientSet<T> v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(std::size_t n) : m(n), v(n) {}
};

struct LogEntry {
  int iteration = 0;
  double loss = 0;
  double psnr = 0;
};

struct TrainReport {
  TrainConfig config;
  std::vector<LogEntry> history;
  // Iterations at which region ids were re-derived (initial assignment excluded).
  std::vector<int> region_refreshes;
  MetricsBundle final_metrics;
  double final_loss = 0;
  double wall_clock_seconds = 0;
  std::size_t model_bytes = 0;
};

template <typename T>
struct LossResult {
  double loss = 0;
  GradientSet<T> grads;
  // Raw (unclamped) forward output.
  ImageBuffer<T> rendered;
};

template <typename T>
struct FitResult {
  GaussianSet<T> model;
  TrainReport report;
};

/// Bytes of the binary model file for `n` Gaussians.
inline std::size_t model_file_bytes(std::size_t n) { return 4 + 8 + 40 * n; }

/// r_i = M(floor(mu_x), floor(mu_y)), lookup coordinate clamped to the image.
template <typename T>
void assign_regions_in_place(GaussianSet<T>& gs, const LabelMap& lm) {
  for (std::size_t i = 0; i < gs.size(); ++i) {
    const double fx = std::floor(static_cast<double>(gs.means[i].x));
    const double fy = std::floor(static_cast<double>(gs.means[i].y));
    const int x = static_cast<int>(std::clamp(std::isnan(fx) ? 0.0 : fx, 0.0, lm.width() - 1.0));
    const int y = static_cast<int>(std::clamp(std::isnan(fy) ? 0.0 : fy, 0.0, lm.height() - 1.0));
    gs.region_ids[i] = lm.at(x, y);
  }
}

template <typename T>
GaussianSet<T> assign_regions(GaussianSet<T> gs, const LabelMap& lm) {
  assign_regions_in_place(gs, lm);
  return gs;
}

/// Warm-up refresh schedule: every `warmup_refresh_interval` iterations up to
/// and including T/2, only with guidance and warm-up both enabled.
inline bool warmup_due(int iteration, const TrainConfig& cfg) {
  if (!cfg.warm_up || !cfg.contour_guidance) return false;
  if (iteration < 1 || iteration % cfg.warmup_refresh_interval != 0) return false;
  return 2 * static_cast<std::int64_t>(iteration) <= cfg.total_iterations;
}

/// Uniform means, isotropic factors with side s = sqrt(W H / N) / 2, colors
/// sampled under each mean, unit opacity.
template <typename T>
GaussianSet<T> initialize(const ImageBuffer<T>& target, const LabelMap* lm, const TrainConfig& cfg) {
  cfg.validate();
  const int w = target.width(), h = target.height();
  if (w <= 0 || h <= 0) throw Error(ErrorCode::DimensionMismatch, "empty target image");
  const auto n = static_cast<std::size_t>(cfg.num_gaussians);
  std::mt19937_64 rng(cfg.rng_seed);
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(w));
  std::uniform_real_distribution<double> uy(0.0, static_cast<double>(h));
  const double side = std::sqrt(static_cast<double>(w) * h / static_cast<double>(n)) / 2.0;

  GaussianSet<T> gs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ux(rng);
    const double y = uy(rng);
    gs.means[i] = {static_cast<T>(x), static_cast<T>(y)};
    gs.chol[i] = {static_cast<T>(side), T(0), static_cast<T>(side)};
    const int px = std::clamp(static_cast<int>(std::floor(x)), 0, w - 1);
    const int py = std::clamp(static_cast<int>(std::floor(y)), 0, h - 1);
    const T* c = target.pixel(px, py);
    gs.colors[i] = {c[0], c[1], c[2]};
    gs.opacities[i] = T(1);
  }
  if (cfg.contour_guidance && lm) {
    if (!lm->matches(target)) throw Error(ErrorCode::DimensionMismatch, "labels vs target");
    assign_regions_in_place(gs, *lm);
  }
  return gs;
}

/// Mean absolute error over all pixels and channels and its gradient. The
/// render is clamped to [0, 1] before the loss unless `remove_clamp`; `lm`
/// enables region masking.
template <typename T>
LossResult<T> loss_and_grad(const GaussianSet<T>& gs, const ImageBuffer<T>& target, const LabelMap* lm,
                            const TrainConfig& cfg) {
  if (lm && !lm->matches(target)) throw Error(ErrorCode::DimensionMismatch, "labels vs target");
  const RenderSettings settings = RenderSettings::from(cfg);
  LossResult<T> out;
  out.rendered = render(gs, lm, target.width(), target.height(), settings);

  const bool clamp = !cfg.remove_clamp;
  const auto& pred = out.rendered.data();
  const auto& gt = target.data();
  ImageBuffer<T> dloss(target.width(), target.height());
  auto& g = dloss.data();
  const double count = static_cast<double>(gt.size());
  const T unit = static_cast<T>(1.0 / count);
  double sum = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    T p = pred[i];
    if (clamp) p = std::clamp(p, T(0), T(1));
    const T r = p - gt[i];
    sum += std::abs(static_cast<double>(r));
    // Subgradient 0 at a zero residual.
    g[i] = r > 0 ? unit : (r < 0 ? -unit : T(0));
  }
  out.loss = count > 0 ? sum / count : 0.0;
  out.grads = backward(gs, lm, target.width(), target.height(), dloss, clamp, out.rendered, settings);
  return out;
}

/// One Adam update with per-group learning rates, then the Cholesky
/// diagonal floor.
template <typename T>
void step(GaussianSet<T>& gs, AdamState<T>& adam, const GradientSet<T>& grads, const TrainConfig& cfg) {
  const std::size_t n = gs.size();
  if (grads.size() != n) throw Error(ErrorCode::DimensionMismatch, "gradient count differs from model");
  if (adam.m.size() != n) adam = AdamState<T>(n);
  ++adam.step;
  const double bc1 = 1.0 - std::pow(AdamState<T>::kBeta1, static_cast<double>(adam.step));
  const double bc2 = 1.0 - std::pow(AdamState<T>::kBeta2, static_cast<double>(adam.step));
  auto update = [&](T& param, T grad, T& m, T& v, double lr) {
    const double g = grad;
    const double mm = AdamState<T>::kBeta1 * m + (1 - AdamState<T>::kBeta1) * g;
    const double vv = AdamState<T>::kBeta2 * v + (1 - AdamState<T>::kBeta2) * g * g;
    m = static_cast<T>(mm);
    v = static_cast<T>(vv);
    const double delta = lr * (mm / bc1) / (std::sqrt(vv / bc2) + AdamState<T>::kEps);
    param = static_cast<T>(param - delta);
  };
  for (std::size_t i = 0; i < n; ++i) {
    update(gs.means[i].x, grads.means[i].x, adam.m.means[i].x, adam.v.means[i].x, cfg.lr_mean);
    update(gs.means[i].y, grads.means[i].y, adam.m.means[i].y, adam.v.means[i].y, cfg.lr_mean);
    update(gs.chol[i].l11, grads.chol[i].l11, adam.m.chol[i].l11, adam.v.chol[i].l11, cfg.lr_chol);
    update(gs.chol[i].l21, grads.chol[i].l21, adam.m.chol[i].l21, adam.v.chol[i].l21, cfg.lr_chol);
    update(gs.chol[i].l22, grads.chol[i].l22, adam.m.chol[i].l22, adam.v.chol[i].l22, cfg.lr_chol);
    for (int c = 0; c < 3; ++c) {
      update(gs.colors[i][c], grads.colors[i][c], adam.m.colors[i][c], adam.v.colors[i][c], cfg.lr_color);
    }
    update(gs.opacities[i], grads.opacities[i], adam.m.opacities[i], adam.v.opacities[i], cfg.lr_opacity);
    const T floor = static_cast<T>(kCholDiagonalFloor);
    if (!(gs.chol[i].l11 >= floor)) gs.chol[i].l11 = floor;
    if (!(gs.chol[i].l22 >= floor)) gs.chol[i].l22 = floor;
  }
}

/// Called after every iteration with the updated model.
template <typename T>
using FitObserver = std::function<void(int iteration, const GaussianSet<T>& model, double loss)>;

template <typename T>
FitResult<T> fit(const ImageBuffer<T>& target, const LabelMap* lm, const TrainConfig& cfg,
                 const FitObserver<T>& observer = {}) {
  cfg.validate();
  if (cfg.contour_guidance && lm == nullptr) {
    throw Error(ErrorCode::InvalidConfig, "contour guidance needs a label map");
  }
  if (lm && !lm->matches(target)) throw Error(ErrorCode::DimensionMismatch, "labels vs target");
  const auto start = std::chrono::steady_clock::now();

  FitResult<T> result;
  TrainReport& report = result.report;
  report.config = cfg;
  const LabelMap* mask = cfg.contour_guidance ? lm : nullptr;

  GaussianSet<T>& gs = result.model;
  gs = initialize(target, mask, cfg);
  AdamState<T> adam(gs.size());

  for (int it = 1; it <= cfg.total_iterations; ++it) {
    auto res = loss_and_grad(gs, target, mask, cfg);
    if (it % cfg.log_interval == 0 || it == cfg.total_iterations) {
      report.history.push_back({it, res.loss, psnr(target, res.rendered)});
    }
    report.final_loss = res.loss;
    step(gs, adam, res.grads, cfg);
    if (warmup_due(it, cfg)) {
      assign_regions_in_place(gs, *mask);
      report.region_refreshes.push_back(it);
    }
    if (observer) observer(it, gs, res.loss);
  }

  const auto final_render = render(gs, mask, target.width(), target.height(), RenderSettings::from(cfg));
  report.final_metrics = evaluate(target, final_render, lm);
  report.model_bytes = model_file_bytes(gs.size());
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace cgs
