#pragma once

// Domain types shared by every module: the Gaussian model, label maps,
// image buffers, gradients and the training configuration.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgs {

enum class ErrorCode {
  DimensionMismatch,
  NonPositiveCholDiagonal,
  RegionIdOutOfRange,
  EmptyMask,
  ImageTooSmall,
  SingleRegion,
  BadSpec,
  FileNotFound,
  UnsupportedFormat,
  TooManyRegions,
  IoFailure,
  BadMagic,
  TruncatedFile,
  InvalidConfig,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonPositiveCholDiagonal: return "NonPositiveCholDiagonal";
    case ErrorCode::RegionIdOutOfRange: return "RegionIdOutOfRange";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::ImageTooSmall: return "ImageTooSmall";
    case ErrorCode::SingleRegion: return "SingleRegion";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::FileNotFound: return "FileNotFound";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::TooManyRegions: return "TooManyRegions";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Lower bound applied to l11 and l22 after every optimizer step.
inline constexpr double kCholDiagonalFloor = 1e-4;

// Region id carried by every Gaussian of an unguided model.
inline constexpr std::int32_t kUnguidedRegion = 0;

template <typename T>
struct Vec2 {
  T x{};
  T y{};
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

// Lower-triangular factor L = [[l11, 0], [l21, l22]] of a 2x2 covariance.
template <typename T>
struct Chol {
  T l11{1};
  T l21{0};
  T l22{1};
  friend bool operator==(const Chol&, const Chol&) = default;
};

template <typename T>
struct Rgb {
  T r{};
  T g{};
  T b{};

  T& operator[](int c) { return c == 0 ? r : (c == 1 ? g : b); }
  const T& operator[](int c) const { return c == 0 ? r : (c == 1 ? g : b); }
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Symmetric 2x2 matrix [[xx, xy], [xy, yy]].
template <typename T>
struct Sym2 {
  T xx{};
  T xy{};
  T yy{};

  T det() const { return xx * yy - xy * xy; }
  T trace() const { return xx + yy; }
  friend bool operator==(const Sym2&, const Sym2&) = default;
};

/// Structure-of-arrays model of N anisotropic 2D Gaussians.
///
/// Means are continuous pixel coordinates (x right, y down, origin at the
/// top-left pixel corner). Covariance is only ever stored through its
/// Cholesky factor. Opacities and colors are unbounded.
template <typename T>
struct GaussianSet {
  std::vector<Vec2<T>> means;
  std::vector<Chol<T>> chol;
  std::vector<Rgb<T>> colors;
  std::vector<T> opacities;
  std::vector<std::int32_t> region_ids;

  GaussianSet() = default;
  explicit GaussianSet(std::size_t n)
      : means(n), chol(n), colors(n), opacities(n, T(1)), region_ids(n, kUnguidedRegion) {}

  std::size_t size() const { return means.size(); }
  bool empty() const { return means.empty(); }

  void push_back(Vec2<T> mean, Chol<T> l, Rgb<T> color, T opacity,
                 std::int32_t region = kUnguidedRegion) {
    means.push_back(mean);
    chol.push_back(l);
    colors.push_back(color);
    opacities.push_back(opacity);
    region_ids.push_back(region);
  }

  bool guided() const {
    return std::any_of(region_ids.begin(), region_ids.end(),
                       [](std::int32_t r) { return r != kUnguidedRegion; });
  }

  friend bool operator==(const GaussianSet&, const GaussianSet&) = default;
};

/// Per-Gaussian gradients of a scalar loss, mirroring the learnable fields.
template <typename T>
struct GradientSet {
  std::vector<Vec2<T>> means;
  std::vector<Chol<T>> chol;
  std::vector<Rgb<T>> colors;
  std::vector<T> opacities;

  GradientSet() = default;
  explicit GradientSet(std::size_t n) : means(n), chol(n, Chol<T>{0, 0, 0}), colors(n), opacities(n) {}

  std::size_t size() const { return means.size(); }

  void set_zero() {
    std::fill(means.begin(), means.end(), Vec2<T>{});
    std::fill(chol.begin(), chol.end(), Chol<T>{0, 0, 0});
    std::fill(colors.begin(), colors.end(), Rgb<T>{});
    std::fill(opacities.begin(), opacities.end(), T(0));
  }

  bool all_finite() const {
    auto f = [](T v) { return std::isfinite(v); };
    for (std::size_t i = 0; i < size(); ++i) {
      if (!f(means[i].x) || !f(means[i].y) || !f(chol[i].l11) || !f(chol[i].l21) ||
          !f(chol[i].l22) || !f(colors[i].r) || !f(colors[i].g) || !f(colors[i].b) ||
          !f(opacities[i])) {
        return false;
      }
    }
    return true;
  }

  friend bool operator==(const GradientSet&, const GradientSet&) = default;
};

/// H x W x 3 raster, row-major with interleaved channels.
template <typename T>
class ImageBuffer {
 public:
  ImageBuffer() = default;
  ImageBuffer(int width, int height, T fill = T(0))
      : width_(width), height_(height) {
    if (width < 0 || height < 0) {
      throw Error(ErrorCode::DimensionMismatch, "negative image size");
    }
    data_.assign(static_cast<std::size_t>(width) * height * 3, fill);
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  T& at(int x, int y, int c) { return data_[index(x, y) * 3 + c]; }
  const T& at(int x, int y, int c) const { return data_[index(x, y) * 3 + c]; }

  T* pixel(int x, int y) { return data_.data() + index(x, y) * 3; }
  const T* pixel(int x, int y) const { return data_.data() + index(x, y) * 3; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_size(const ImageBuffer& other) const {
    return width_ == other.width_ && height_ == other.height_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  template <typename U>
  ImageBuffer<U> cast() const {
    ImageBuffer<U> out(width_, height_);
    std::transform(data_.begin(), data_.end(), out.data().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }

  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// Per-pixel region ids in 1..R.
///
/// `source_values[id - 1]` records the raw value a region carried in the file
/// it was loaded from, so saving can reproduce the original encoding.
class LabelMap {
 public:
  LabelMap() = default;

  // Labels must already be contiguous in 1..region_count, each id present.
  LabelMap(int width, int height, std::vector<std::int32_t> labels, int region_count,
           std::vector<int> source_values = {})
      : width_(width), height_(height), region_count_(region_count),
        labels_(std::move(labels)), source_values_(std::move(source_values)) {
    if (width <= 0 || height <= 0 ||
        labels_.size() != static_cast<std::size_t>(width) * height) {
      throw Error(ErrorCode::DimensionMismatch, "label buffer does not match dimensions");
    }
    if (region_count < 1) {
      throw Error(ErrorCode::RegionIdOutOfRange, "region count must be at least 1");
    }
    std::vector<bool> seen(static_cast<std::size_t>(region_count) + 1, false);
    for (std::int32_t l : labels_) {
      if (l < 1 || l > region_count) {
        throw Error(ErrorCode::RegionIdOutOfRange, "label " + std::to_string(l) + " outside 1.." +
                                                       std::to_string(region_count));
      }
      seen[static_cast<std::size_t>(l)] = true;
    }
    for (int r = 1; r <= region_count; ++r) {
      if (!seen[static_cast<std::size_t>(r)]) {
        throw Error(ErrorCode::RegionIdOutOfRange, "region " + std::to_string(r) + " never occurs");
      }
    }
    if (source_values_.empty()) {
      for (int r = 1; r <= region_count; ++r) source_values_.push_back(r);
    } else if (source_values_.size() != static_cast<std::size_t>(region_count)) {
      throw Error(ErrorCode::DimensionMismatch, "remap table size differs from region count");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int region_count() const { return region_count_; }

  std::int32_t at(int x, int y) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  const std::int32_t* row(int y) const { return labels_.data() + static_cast<std::size_t>(y) * width_; }
  const std::vector<std::int32_t>& labels() const { return labels_; }
  const std::vector<int>& source_values() const { return source_values_; }

  template <typename T>
  bool matches(const ImageBuffer<T>& img) const {
    return width_ == img.width() && height_ == img.height();
  }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  int region_count_ = 0;
  std::vector<std::int32_t> labels_;
  std::vector<int> source_values_;
};

struct TrainConfig {
  int num_gaussians = 20;
  int total_iterations = 50000;
  double lr_mean = 5e-1;
  double lr_chol = 5e-1;
  double lr_color = 5e-3;
  double lr_opacity = 5e-3;
  bool contour_guidance = true;
  bool warm_up = true;
  bool remove_clamp = true;
  int warmup_refresh_interval = 1000;
  std::uint64_t rng_seed = 0;
  double truncation_radius_sigma = 3.0;
  int tile_size = 16;
  // 0 defers to CGS_THREADS, then to the OpenMP default.
  int threads = 0;
  int log_interval = 100;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::InvalidConfig, m); };
    if (num_gaussians < 1) fail("num_gaussians must be >= 1");
    if (total_iterations < 1) fail("total_iterations must be >= 1");
    if (!(lr_mean > 0) || !(lr_chol > 0) || !(lr_color > 0) || !(lr_opacity > 0)) {
      fail("learning rates must be > 0");
    }
    if (!(truncation_radius_sigma > 0)) fail("truncation_radius_sigma must be > 0");
    if (warmup_refresh_interval < 1) fail("warmup_refresh_interval must be >= 1");
    if (tile_size < 1) fail("tile_size must be >= 1");
    if (threads < 0) fail("threads must be >= 0");
    if (log_interval < 1) fail("log_interval must be >= 1");
  }
};

template <typename T>
Sym2<T> covariance_of(const Chol<T>& l) {
  if (!(l.l11 > 0) || !(l.l22 > 0)) {
    throw Error(ErrorCode::NonPositiveCholDiagonal, "Cholesky diagonal must be positive");
  }
  return Sym2<T>{l.l11 * l.l11, l.l11 * l.l21, l.l21 * l.l21 + l.l22 * l.l22};
}

/// Throws unless every GaussianSet invariant holds; with a label map, also
/// requires region ids in 1..R.
template <typename T>
void validate_set(const GaussianSet<T>& gs, const LabelMap* labels = nullptr) {
  const std::size_t n = gs.means.size();
  if (gs.chol.size() != n || gs.colors.size() != n || gs.opacities.size() != n ||
      gs.region_ids.size() != n) {
    throw Error(ErrorCode::DimensionMismatch, "GaussianSet field lengths differ");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!(gs.chol[i].l11 > 0) || !(gs.chol[i].l22 > 0)) {
      throw Error(ErrorCode::NonPositiveCholDiagonal, "Gaussian " + std::to_string(i));
    }
  }
  if (n == 0) return;
  const bool unguided = std::all_of(gs.region_ids.begin(), gs.region_ids.end(),
                                    [](std::int32_t r) { return r == kUnguidedRegion; });
  if (unguided && labels == nullptr) return;
  const std::int32_t upper = labels ? labels->region_count() : std::numeric_limits<std::int32_t>::max();
  for (std::size_t i = 0; i < n; ++i) {
    if (gs.region_ids[i] < 1 || gs.region_ids[i] > upper) {
      throw Error(ErrorCode::RegionIdOutOfRange,
                  "Gaussian " + std::to_string(i) + " has region " + std::to_string(gs.region_ids[i]));
    }
  }
}

}  // namespace cgs
