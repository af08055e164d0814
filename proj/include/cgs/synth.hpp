#pragma once

// Synthetic color-chart targets with exact ground-truth label maps.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cgs/core.hpp"

namespace cgs {

enum class ChartKind { Grid, Pie };

struct ChartSpec {
  ChartKind kind = ChartKind::Grid;
  int width = 300;
  int height = 200;
  std::vector<Rgb<double>> colors;

  // Grid charts.
  int rows = 2;
  int cols = 3;

  // Pie charts. The center is in continuous pixel coordinates; angles run
  // counter-clockwise (as displayed) from the +x axis.
  double center_x = 150.0;
  double center_y = 150.0;
  double radius = 120.0;
  std::vector<double> fractions;
  Rgb<double> background{1.0, 1.0, 1.0};
};

namespace palette {
inline constexpr Rgb<double> kDarkGreen{0.0, 0.39, 0.0};
inline constexpr Rgb<double> kOrange{1.0, 0.55, 0.0};
inline constexpr Rgb<double> kPurple{0.5, 0.0, 0.5};
inline constexpr Rgb<double> kCyan{0.0, 0.75, 0.8};
inline constexpr Rgb<double> kYellow{0.95, 0.85, 0.1};
inline constexpr Rgb<double> kBlue{0.1, 0.2, 0.75};
inline constexpr Rgb<double> kRed{0.85, 0.1, 0.15};
}  // namespace palette

/// 2 x 3 blocks at 300 x 200 (W x H). Block ids run row-major from 1.
inline ChartSpec default_grid_spec() {
  ChartSpec s;
  s.kind = ChartKind::Grid;
  s.colors = {palette::kDarkGreen, palette::kOrange, palette::kPurple,
              palette::kCyan,      palette::kYellow, palette::kBlue};
  return s;
}

/// Six equal sectors in a 300 x 300 image on a white background.
inline ChartSpec default_pie_spec() {
  ChartSpec s;
  s.kind = ChartKind::Pie;
  s.width = 300;
  s.height = 300;
  s.colors = {palette::kRed, palette::kOrange, palette::kYellow,
              palette::kDarkGreen, palette::kCyan, palette::kPurple};
  s.fractions.assign(6, 1.0 / 6.0);
  return s;
}

/// Label id (1-based) of the block holding `palette::kOrange` in the
/// default grid.
inline constexpr int kDefaultGridOrangeBlock = 2;

template <typename T = float>
struct Chart {
  ImageBuffer<T> image;
  LabelMap labels;
};

template <typename T = float>
Chart<T> gen_grid_chart(const ChartSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0 || spec.rows <= 0 || spec.cols <= 0) {
    throw Error(ErrorCode::BadSpec, "grid dimensions must be positive");
  }
  if (spec.width % spec.cols != 0 || spec.height % spec.rows != 0) {
    throw Error(ErrorCode::BadSpec, "grid does not divide the image");
  }
  if (spec.colors.size() != static_cast<std::size_t>(spec.rows) * spec.cols) {
    throw Error(ErrorCode::BadSpec, "need one color per block");
  }
  const int bw = spec.width / spec.cols;
  const int bh = spec.height / spec.rows;
  ImageBuffer<T> img(spec.width, spec.height);
  std::vector<std::int32_t> labels(static_cast<std::size_t>(spec.width) * spec.height);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const int id = (y / bh) * spec.cols + (x / bw) + 1;
      labels[static_cast<std::size_t>(y) * spec.width + x] = id;
      const auto& c = spec.colors[static_cast<std::size_t>(id - 1)];
      for (int k = 0; k < 3; ++k) img.at(x, y, k) = static_cast<T>(c[k]);
    }
  }
  return {std::move(img), LabelMap(spec.width, spec.height, std::move(labels), spec.rows * spec.cols)};
}

/// Sector id (1-based) of a point, or 0 when outside the disc. A point at
/// the exact center belongs to sector 1.
inline int pie_sector_at(const ChartSpec& spec, double px, double py) {
  const double dx = px - spec.center_x;
  const double dy = spec.center_y - py;
  if (dx * dx + dy * dy > spec.radius * spec.radius) return 0;
  if (dx == 0 && dy == 0) return 1;
  double angle = std::atan2(dy, dx);
  if (angle < 0) angle += 2 * std::numbers::pi;
  const double turn = angle / (2 * std::numbers::pi);
  double cumulative = 0;
  for (std::size_t k = 0; k < spec.fractions.size(); ++k) {
    cumulative += spec.fractions[k];
    if (turn < cumulative) return static_cast<int>(k) + 1;
  }
  return static_cast<int>(spec.fractions.size());
}

template <typename T = float>
Chart<T> gen_pie_chart(const ChartSpec& spec) {
  if (spec.width <= 0 || spec.height <= 0) throw Error(ErrorCode::BadSpec, "pie dimensions must be positive");
  if (spec.fractions.empty() || spec.colors.size() != spec.fractions.size()) {
    throw Error(ErrorCode::BadSpec, "need one color per sector");
  }
  double total = 0;
  for (double f : spec.fractions) {
    if (!(f > 0)) throw Error(ErrorCode::BadSpec, "sector fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::BadSpec, "sector fractions must sum to 1");
  if (!(spec.radius > 0) || spec.center_x - spec.radius < 0 || spec.center_x + spec.radius > spec.width ||
      spec.center_y - spec.radius < 0 || spec.center_y + spec.radius > spec.height) {
    throw Error(ErrorCode::BadSpec, "pie radius does not fit in the image");
  }

  const int sectors = static_cast<int>(spec.fractions.size());
  const int background_id = sectors + 1;
  ImageBuffer<T> sharp(spec.width, spec.height);
  std::vector<std::int32_t> labels(static_cast<std::size_t>(spec.width) * spec.height);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const int s = pie_sector_at(spec, x + 0.5, y + 0.5);
      const int id = s == 0 ? background_id : s;
      labels[static_cast<std::size_t>(y) * spec.width + x] = id;
      const auto& c = s == 0 ? spec.background : spec.colors[static_cast<std::size_t>(s - 1)];
      for (int k = 0; k < 3; ++k) sharp.at(x, y, k) = static_cast<T>(c[k]);
    }
  }

  // 1-pixel anti-alias: separable [1 2 1] / 4 with edge replication. Labels
  // stay hard.
  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  ImageBuffer<T> tmp(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const int xl = clampi(x - 1, spec.width - 1), xr = clampi(x + 1, spec.width - 1);
      for (int k = 0; k < 3; ++k) {
        tmp.at(x, y, k) = (sharp.at(xl, y, k) + 2 * sharp.at(x, y, k) + sharp.at(xr, y, k)) / 4;
      }
    }
  }
  ImageBuffer<T> img(spec.width, spec.height);
  for (int y = 0; y < spec.height; ++y) {
    const int yu = clampi(y - 1, spec.height - 1), yd = clampi(y + 1, spec.height - 1);
    for (int x = 0; x < spec.width; ++x) {
      for (int k = 0; k < 3; ++k) {
        img.at(x, y, k) = (tmp.at(x, yu, k) + 2 * tmp.at(x, y, k) + tmp.at(x, yd, k)) / 4;
      }
    }
  }
  try {
    return {std::move(img), LabelMap(spec.width, spec.height, std::move(labels), background_id)};
  } catch (const Error& e) {
    throw Error(ErrorCode::BadSpec, std::string("a sector or the background covers no pixel: ") + e.what());
  }
}

template <typename T = float>
Chart<T> gen_chart(const ChartSpec& spec) {
  return spec.kind == ChartKind::Grid ? gen_grid_chart<T>(spec) : gen_pie_chart<T>(spec);
}

}  // namespace cgs
