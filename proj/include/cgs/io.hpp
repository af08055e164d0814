#pragma once

// File formats: PNG images and label maps, the CGS1 binary model, and the
// JSON / CSV side files (config, report, model export, chart spec).
//
// CGS1 layout, little-endian:
//   "CGS1" | u32 N | u32 R | N x 10 float32
//   (mu_x, mu_y, l11, l21, l22, r, g, b, alpha, region_id)

#include <png.h>

#include <array>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cgs/core.hpp"
#include "cgs/metrics.hpp"
#include "cgs/synth.hpp"
#include "cgs/trainer.hpp"

namespace cgs {

namespace detail {

struct RawPng {
  int width = 0;
  int height = 0;
  int color_type = 0;
  int bit_depth = 0;
  int channels = 0;
  // Rows of width * channels samples; 16-bit samples are big-endian pairs.
  std::vector<std::uint8_t> data;
  std::size_t row_bytes = 0;
};

struct PngFile {
  std::FILE* fp = nullptr;
  explicit PngFile(const std::string& path, const char* mode) : fp(std::fopen(path.c_str(), mode)) {}
  ~PngFile() {
    if (fp) std::fclose(fp);
  }
  PngFile(const PngFile&) = delete;
  PngFile& operator=(const PngFile&) = delete;
};

inline void png_error_to_longjmp(png_structp png, png_const_charp) { png_longjmp(png, 1); }
inline void png_warning_ignore(png_structp, png_const_charp) {}

// Decodes without color conversion; sub-byte samples are unpacked to one
// byte each, keeping their raw values (palette indices stay indices).
inline RawPng read_png_raw(const std::string& path, bool expand_palette = false) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::FileNotFound, path);
  PngFile file(path, "rb");
  if (!file.fp) throw Error(ErrorCode::FileNotFound, path);
  std::array<unsigned char, 8> sig{};
  if (std::fread(sig.data(), 1, sig.size(), file.fp) != sig.size() || png_sig_cmp(sig.data(), 0, sig.size()) != 0) {
    throw Error(ErrorCode::UnsupportedFormat, path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp, png_warning_ignore);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::IoFailure, "libpng initialization failed");
  }
  RawPng raw;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::UnsupportedFormat, path + ": corrupt PNG");
  }
  png_init_io(png, file.fp);
  png_set_sig_bytes(png, static_cast<int>(sig.size()));
  png_read_info(png, info);
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.color_type = png_get_color_type(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  if (expand_palette && raw.color_type == PNG_COLOR_TYPE_PALETTE) {
    png_set_palette_to_rgb(png);
    raw.bit_depth = 8;
  } else if (raw.bit_depth < 8) {
    png_set_packing(png);
  }
  png_read_update_info(png, info);
  raw.channels = png_get_channels(png, info);
  raw.row_bytes = png_get_rowbytes(png, info);
  raw.data.resize(raw.row_bytes * static_cast<std::size_t>(raw.height));
  rows.resize(static_cast<std::size_t>(raw.height));
  for (int y = 0; y < raw.height; ++y) rows[static_cast<std::size_t>(y)] = raw.data.data() + raw.row_bytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

// 8-bit writer for grayscale (channels == 1) or RGB (channels == 3).
inline void write_png_8bit(const std::string& path, int width, int height, int channels,
                           const std::vector<std::uint8_t>& data) {
  PngFile file(path, "wb");
  if (!file.fp) throw Error(ErrorCode::IoFailure, "cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_to_longjmp, png_warning_ignore);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::IoFailure, "libpng initialization failed");
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(data.data() + static_cast<std::size_t>(y) * width * channels);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::IoFailure, "failed writing " + path);
  }
  png_init_io(png, file.fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t* put_u32(std::uint8_t* out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) *out++ = static_cast<std::uint8_t>(v >> (8 * i));
  return out;
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

inline std::uint8_t* put_f32(std::uint8_t* out, float v) { return put_u32(out, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace detail

/// Loads an 8- or 16-bit RGB(A) PNG scaled to [0, 1]; alpha is dropped.
/// Grayscale and palette images are expanded to RGB.
template <typename T = float>
ImageBuffer<T> load_image(const std::string& path) {
  const detail::RawPng raw = detail::read_png_raw(path, true);
  const bool sixteen = raw.bit_depth == 16;
  const double scale = sixteen ? 65535.0 : (raw.bit_depth == 8 ? 255.0 : static_cast<double>((1 << raw.bit_depth) - 1));
  const int bytes = sixteen ? 2 : 1;
  auto sample = [&](int x, int y, int c) {
    const std::uint8_t* p = raw.data.data() + raw.row_bytes * y + static_cast<std::size_t>(x * raw.channels + c) * bytes;
    const unsigned v = sixteen ? (unsigned{p[0]} << 8) | p[1] : p[0];
    return static_cast<double>(v) / scale;
  };
  ImageBuffer<T> img(raw.width, raw.height);
  const bool gray = raw.channels < 3;
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<T>(sample(x, y, gray ? 0 : c));
    }
  }
  return img;
}

/// Clamps to [0, 1] and quantizes with round-half-up to 8 bits.
inline std::uint8_t quantize_8bit(double v) {
  if (!(v > 0)) return 0;
  if (v >= 1) return 255;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

template <typename T>
void save_image(const ImageBuffer<T>& img, const std::string& path) {
  std::vector<std::uint8_t> bytes(img.data().size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = quantize_8bit(static_cast<double>(img.data()[i]));
  detail::write_png_8bit(path, img.width(), img.height(), 3, bytes);
}

inline constexpr int kMaxRegions = 255;

/// Raw per-pixel values remapped to contiguous ids 1..R in first-occurrence
/// (raster) order.
inline LabelMap label_map_from_values(int width, int height, const std::vector<int>& values) {
  std::map<int, int> remap;
  std::vector<int> source;
  std::vector<std::int32_t> labels(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto [it, inserted] = remap.try_emplace(values[i], static_cast<int>(remap.size()) + 1);
    if (inserted) {
      source.push_back(values[i]);
      if (remap.size() > static_cast<std::size_t>(kMaxRegions)) {
        throw Error(ErrorCode::TooManyRegions, "more than 255 distinct labels");
      }
    }
    labels[i] = it->second;
  }
  const int regions = static_cast<int>(remap.size());
  return LabelMap(width, height, std::move(labels), regions, std::move(source));
}

/// Single-channel 8-bit PNG (intensity = region) or indexed PNG (palette
/// index = region). Color-coded masks are rejected.
inline LabelMap load_label_map(const std::string& path) {
  const detail::RawPng raw = detail::read_png_raw(path);
  const bool gray = raw.color_type == PNG_COLOR_TYPE_GRAY;
  const bool indexed = raw.color_type == PNG_COLOR_TYPE_PALETTE;
  if ((!gray && !indexed) || raw.bit_depth > 8 || raw.channels != 1) {
    throw Error(ErrorCode::UnsupportedFormat,
                path + ": label maps must be 8-bit single-channel or indexed PNGs (convert color masks first)");
  }
  std::vector<int> values(static_cast<std::size_t>(raw.width) * raw.height);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      values[static_cast<std::size_t>(y) * raw.width + x] = raw.data[raw.row_bytes * y + static_cast<std::size_t>(x)];
    }
  }
  return label_map_from_values(raw.width, raw.height, values);
}

/// Writes the original source values (8-bit grayscale) so a reload yields
/// the same ids.
inline void save_label_map(const LabelMap& lm, const std::string& path) {
  std::vector<std::uint8_t> bytes(lm.labels().size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const int v = lm.source_values()[static_cast<std::size_t>(lm.labels()[i] - 1)];
    if (v < 0 || v > 255) throw Error(ErrorCode::IoFailure, "label value does not fit in 8 bits");
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  detail::write_png_8bit(path, lm.width(), lm.height(), 1, bytes);
}

struct StoredModel {
  GaussianSet<float> gaussians;
  std::uint32_t region_count = 0;
  friend bool operator==(const StoredModel&, const StoredModel&) = default;
};

inline std::vector<std::uint8_t> encode_model(const StoredModel& model) {
  const auto& gs = model.gaussians;
  validate_set(gs);
  std::vector<std::uint8_t> bytes(model_file_bytes(gs.size()));
  std::uint8_t* out = bytes.data();
  for (char c : {'C', 'G', 'S', '1'}) *out++ = static_cast<std::uint8_t>(c);
  out = detail::put_u32(out, static_cast<std::uint32_t>(gs.size()));
  out = detail::put_u32(out, model.region_count);
  for (std::size_t i = 0; i < gs.size(); ++i) {
    for (float v : {gs.means[i].x, gs.means[i].y, gs.chol[i].l11, gs.chol[i].l21, gs.chol[i].l22, gs.colors[i].r,
                    gs.colors[i].g, gs.colors[i].b, gs.opacities[i], static_cast<float>(gs.region_ids[i])}) {
      out = detail::put_f32(out, v);
    }
  }
  return bytes;
}

inline StoredModel decode_model(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || bytes[0] != 'C' || bytes[1] != 'G' || bytes[2] != 'S' || bytes[3] != '1') {
    throw Error(ErrorCode::BadMagic, "not a CGS1 model");
  }
  if (bytes.size() < 12) throw Error(ErrorCode::TruncatedFile, "header too short");
  const std::uint32_t n = detail::get_u32(bytes.data() + 4);
  StoredModel model;
  model.region_count = detail::get_u32(bytes.data() + 8);
  if (bytes.size() != model_file_bytes(n)) {
    throw Error(ErrorCode::TruncatedFile, "header says " + std::to_string(n) + " Gaussians but payload is " +
                                              std::to_string(bytes.size() - 12) + " bytes");
  }
  auto& gs = model.gaussians;
  gs = GaussianSet<float>(n);
  const std::uint8_t* p = bytes.data() + 12;
  for (std::uint32_t i = 0; i < n; ++i, p += 40) {
    auto f = [&](int k) { return detail::get_f32(p + 4 * k); };
    gs.means[i] = {f(0), f(1)};
    gs.chol[i] = {f(2), f(3), f(4)};
    gs.colors[i] = {f(5), f(6), f(7)};
    gs.opacities[i] = f(8);
    const float r = f(9);
    if (!(r >= 0) || r != std::floor(r) || r > static_cast<float>(kMaxRegions)) {
      throw Error(ErrorCode::UnsupportedFormat, "region id is not a small non-negative integer");
    }
    gs.region_ids[i] = static_cast<std::int32_t>(r);
  }
  return model;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path);
}

inline std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::FileNotFound, path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void save_model(const StoredModel& model, const std::string& path) { write_bytes(path, encode_model(model)); }
inline StoredModel load_model(const std::string& path) { return decode_model(read_bytes(path)); }

// ---------------------------------------------------------------------------
// JSON

using json = nlohmann::ordered_json;

inline json model_to_json(const StoredModel& model) {
  const auto& gs = model.gaussians;
  json items = json::array();
  for (std::size_t i = 0; i < gs.size(); ++i) {
    items.push_back({{"mean", {gs.means[i].x, gs.means[i].y}},
                     {"chol", {gs.chol[i].l11, gs.chol[i].l21, gs.chol[i].l22}},
                     {"color", {gs.colors[i].r, gs.colors[i].g, gs.colors[i].b}},
                     {"opacity", gs.opacities[i]},
                     {"region_id", gs.region_ids[i]}});
  }
  return {{"format", "CGS1"}, {"N", gs.size()}, {"R", model.region_count}, {"gaussians", items}};
}

inline json metrics_to_json(const MetricsBundle& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"psnr", m.psnr},
          {"ms_ssim", opt(m.ms_ssim)},
          {"ef_psnr", opt(m.ef_psnr)},
          {"ef_ssim", opt(m.ef_ssim)},
          {"band_pixels", m.band_pixels}};
}

inline json config_to_json(const TrainConfig& c) {
  return {{"num_gaussians", c.num_gaussians},
          {"total_iterations", c.total_iterations},
          {"lr_mean", c.lr_mean},
          {"lr_chol", c.lr_chol},
          {"lr_color", c.lr_color},
          {"lr_opacity", c.lr_opacity},
          {"contour_guidance", c.contour_guidance},
          {"warm_up", c.warm_up},
          {"remove_clamp", c.remove_clamp},
          {"warmup_refresh_interval", c.warmup_refresh_interval},
          {"rng_seed", c.rng_seed},
          {"truncation_radius_sigma", c.truncation_radius_sigma},
          {"tile_size", c.tile_size},
          {"threads", c.threads},
          {"log_interval", c.log_interval}};
}

/// Overlays flat keys onto `base`. Unknown keys and wrong types are
/// InvalidConfig.
inline TrainConfig config_from_json(const json& j, TrainConfig base = {}) {
  if (!j.is_object()) throw Error(ErrorCode::InvalidConfig, "config must be a JSON object");
  auto get = [&](const std::string& key, const json& v, auto& field) {
    using F = std::decay_t<decltype(field)>;
    const bool ok = std::is_same_v<F, bool> ? v.is_boolean()
                    : std::is_integral_v<F> ? v.is_number_integer() || v.is_number_unsigned()
                                            : v.is_number();
    if (!ok) throw Error(ErrorCode::InvalidConfig, "wrong type for key '" + key + "'");
    field = v.get<F>();
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "num_gaussians") get(key, value, base.num_gaussians);
    else if (key == "total_iterations") get(key, value, base.total_iterations);
    else if (key == "lr_mean") get(key, value, base.lr_mean);
    else if (key == "lr_chol") get(key, value, base.lr_chol);
    else if (key == "lr_color") get(key, value, base.lr_color);
    else if (key == "lr_opacity") get(key, value, base.lr_opacity);
    else if (key == "contour_guidance") get(key, value, base.contour_guidance);
    else if (key == "warm_up") get(key, value, base.warm_up);
    else if (key == "remove_clamp") get(key, value, base.remove_clamp);
    else if (key == "warmup_refresh_interval") get(key, value, base.warmup_refresh_interval);
    else if (key == "rng_seed") get(key, value, base.rng_seed);
    else if (key == "truncation_radius_sigma") get(key, value, base.truncation_radius_sigma);
    else if (key == "tile_size") get(key, value, base.tile_size);
    else if (key == "threads") get(key, value, base.threads);
    else if (key == "log_interval") get(key, value, base.log_interval);
    else throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  }
  base.validate();
  return base;
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::FileNotFound, path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
  }
  return config_from_json(j, base);
}

inline json report_to_json(const TrainReport& r) {
  json history = json::array();
  for (const auto& e : r.history) history.push_back({{"iteration", e.iteration}, {"loss", e.loss}, {"psnr", e.psnr}});
  json out = metrics_to_json(r.final_metrics);
  out["final_loss"] = r.final_loss;
  out["model_bytes"] = r.model_bytes;
  out["wall_clock_seconds"] = r.wall_clock_seconds;
  out["region_refreshes"] = r.region_refreshes;
  out["config"] = config_to_json(r.config);
  out["history"] = history;
  return out;
}

/// iteration,loss,psnr rows.
inline std::string loss_curve_csv(const TrainReport& r) {
  std::ostringstream out;
  out.precision(10);
  out << "iteration,loss,psnr\n";
  for (const auto& e : r.history) out << e.iteration << ',' << e.loss << ',' << e.psnr << '\n';
  return out.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path);
}

inline ChartSpec chart_spec_from_json(const json& j, ChartKind kind) {
  ChartSpec s = kind == ChartKind::Grid ? default_grid_spec() : default_pie_spec();
  if (!j.is_object()) throw Error(ErrorCode::BadSpec, "chart spec must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "kind") {
        const auto k = v.get<std::string>();
        if (k != (kind == ChartKind::Grid ? "grid" : "pie")) throw Error(ErrorCode::BadSpec, "kind mismatch");
      } else if (key == "width") s.width = v.get<int>();
      else if (key == "height") s.height = v.get<int>();
      else if (key == "rows") s.rows = v.get<int>();
      else if (key == "cols") s.cols = v.get<int>();
      else if (key == "center") {
        s.center_x = v.at(0).get<double>();
        s.center_y = v.at(1).get<double>();
      } else if (key == "radius") s.radius = v.get<double>();
      else if (key == "fractions") s.fractions = v.get<std::vector<double>>();
      else if (key == "background") {
        s.background = {v.at(0).get<double>(), v.at(1).get<double>(), v.at(2).get<double>()};
      } else if (key == "colors") {
        s.colors.clear();
        for (const auto& c : v) s.colors.push_back({c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()});
      } else {
        throw Error(ErrorCode::BadSpec, "unknown chart key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::BadSpec, e.what());
  }
  return s;
}

}  // namespace cgs
