// cgs: fit, render and evaluate contour-aware Gaussian image models.
//
// Exit codes: 0 ok, 1 usage (bad flags, bad config), 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "cgs/cgs.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::optional<cgs::LabelMap> maybe_labels(const std::string& path) {
  if (path.empty()) return std::nullopt;
  return cgs::load_label_map(path);
}

// Sibling output paths: model.cgs -> model.render.png etc.
std::string sibling(const std::string& model_path, const std::string& suffix) {
  fs::path p(model_path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

cgs::TrainConfig preset_config(const std::string& preset) {
  cgs::TrainConfig c;
  if (preset.empty() || preset == "chart") {
    c.num_gaussians = 20;
  } else if (preset == "davis-few") {
    c.num_gaussians = 1250;
  } else if (preset == "davis-many") {
    c.num_gaussians = 7500;
  } else {
    throw UsageError("unknown preset '" + preset + "'");
  }
  c.total_iterations = 50000;
  return c;
}

// ---------------------------------------------------------------------------

struct GenChartArgs {
  std::string kind = "grid";
  std::string out_dir;
  std::string spec;
};

int cmd_gen_chart(const GenChartArgs& a) {
  const cgs::ChartKind kind = a.kind == "grid" ? cgs::ChartKind::Grid : cgs::ChartKind::Pie;
  cgs::ChartSpec spec = kind == cgs::ChartKind::Grid ? cgs::default_grid_spec() : cgs::default_pie_spec();
  if (!a.spec.empty()) {
    std::ifstream in(a.spec);
    if (!in) throw cgs::Error(cgs::ErrorCode::FileNotFound, a.spec);
    cgs::json j;
    try {
      j = cgs::json::parse(in);
    } catch (const cgs::json::parse_error& e) {
      throw cgs::Error(cgs::ErrorCode::BadSpec, e.what());
    }
    spec = cgs::chart_spec_from_json(j, kind);
  }
  if (!fs::is_directory(a.out_dir)) throw cgs::Error(cgs::ErrorCode::IoFailure, "no such directory: " + a.out_dir);
  const auto chart = cgs::gen_chart<float>(spec);
  cgs::save_image(chart.image, (fs::path(a.out_dir) / "target.png").string());
  cgs::save_label_map(chart.labels, (fs::path(a.out_dir) / "labels.png").string());
  cgs::json out = {{"width", spec.width},
                   {"height", spec.height},
                   {"regions", chart.labels.region_count()},
                   {"target", (fs::path(a.out_dir) / "target.png").string()},
                   {"labels", (fs::path(a.out_dir) / "labels.png").string()}};
  std::cout << out.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string image;
  std::string labels;
  std::string config;
  std::string out;
  std::string preset;
  bool no_guidance = false;
  bool no_warmup = false;
  bool clamp = false;
  int threads = 0;
  int seed = -1;
  int progress = 5000;
};

cgs::TrainConfig resolve_fit_config(const FitArgs& a) {
  if (a.no_guidance && !a.no_warmup) {
    throw UsageError("--no-guidance requires --no-warmup (warm-up only refreshes region ids)");
  }
  cgs::TrainConfig cfg = preset_config(a.preset);
  if (!a.config.empty()) cfg = cgs::load_config(a.config, cfg);
  if (a.no_guidance) cfg.contour_guidance = false;
  if (a.no_warmup) cfg.warm_up = false;
  if (a.clamp) cfg.remove_clamp = false;
  if (a.threads > 0) cfg.threads = a.threads;
  if (a.seed >= 0) cfg.rng_seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();
  return cfg;
}

cgs::FitResult<float> run_fit(const cgs::ImageBuffer<float>& target, const cgs::LabelMap* lm,
                              const cgs::TrainConfig& cfg, int progress) {
  cgs::FitObserver<float> observer;
  if (progress > 0) {
    observer = [progress, total = cfg.total_iterations](int it, const cgs::GaussianSet<float>&, double loss) {
      if (it % progress == 0 || it == total) std::fprintf(stderr, "iter %6d/%d  loss %.6f\n", it, total, loss);
    };
  }
  return cgs::fit(target, lm, cfg, observer);
}

int cmd_fit(const FitArgs& a) {
  const cgs::TrainConfig cfg = resolve_fit_config(a);
  if (cfg.contour_guidance && a.labels.empty()) throw UsageError("contour guidance needs --labels");
  const auto target = cgs::load_image<float>(a.image);
  const auto lm = maybe_labels(a.labels);
  const cgs::LabelMap* lmp = lm ? &*lm : nullptr;

  auto res = run_fit(target, lmp, cfg, a.progress);
  const cgs::StoredModel stored{res.model, static_cast<std::uint32_t>(lm ? lm->region_count() : 0)};
  cgs::save_model(stored, a.out);
  const auto rendered = cgs::render(res.model, cfg.contour_guidance ? lmp : nullptr, target.width(),
                                    target.height(), cgs::RenderSettings::from(cfg));
  cgs::save_image(rendered, sibling(a.out, ".render.png"));
  const auto report = cgs::report_to_json(res.report);
  cgs::write_text(sibling(a.out, ".report.json"), report.dump(2) + "\n");
  cgs::write_text(sibling(a.out, ".loss.csv"), cgs::loss_curve_csv(res.report));

  cgs::json summary = cgs::metrics_to_json(res.report.final_metrics);
  summary["final_loss"] = res.report.final_loss;
  summary["model_bytes"] = res.report.model_bytes;
  summary["wall_clock_seconds"] = res.report.wall_clock_seconds;
  summary["model"] = a.out;
  std::cout << summary.dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct RenderArgs {
  std::string model;
  std::string labels;
  std::string out;
  int width = 0;
  int height = 0;
  int src_width = 0;
  int src_height = 0;
  int threads = 0;
};

int cmd_render(const RenderArgs& a) {
  auto stored = cgs::load_model(a.model);
  auto& gs = stored.gaussians;
  if (gs.guided() && a.labels.empty()) throw UsageError("model is region-guided; --labels is required");
  const double sx = a.src_width > 0 ? static_cast<double>(a.width) / a.src_width : 1.0;
  const double sy = a.src_height > 0 ? static_cast<double>(a.height) / a.src_height : 1.0;
  // Scaling the means and the rows of L by diag(sx, sy) maps Sigma to S Sigma S.
  for (std::size_t i = 0; i < gs.size(); ++i) {
    gs.means[i].x = static_cast<float>(gs.means[i].x * sx);
    gs.means[i].y = static_cast<float>(gs.means[i].y * sy);
    gs.chol[i].l11 = static_cast<float>(gs.chol[i].l11 * sx);
    gs.chol[i].l21 = static_cast<float>(gs.chol[i].l21 * sy);
    gs.chol[i].l22 = static_cast<float>(gs.chol[i].l22 * sy);
  }
  std::optional<cgs::LabelMap> lm;
  if (gs.guided()) {
    lm = cgs::load_label_map(a.labels);
    if (lm->width() != a.width || lm->height() != a.height) {
      throw cgs::Error(cgs::ErrorCode::DimensionMismatch, "labels must match the output resolution");
    }
  }
  cgs::RenderSettings settings;
  settings.threads = a.threads;
  const auto img = cgs::render(gs, lm ? &*lm : nullptr, a.width, a.height, settings);
  cgs::save_image(img, a.out);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string ref;
  std::string test;
  std::string labels;
  int band = cgs::kDefaultBandRadius;
};

int cmd_eval(const EvalArgs& a) {
  const auto ref = cgs::load_image<double>(a.ref);
  const auto test = cgs::load_image<double>(a.test);
  if (!ref.same_size(test)) throw cgs::Error(cgs::ErrorCode::DimensionMismatch, "reference vs test");
  const auto lm = cgs::load_label_map(a.labels);
  if (lm.region_count() < 2) {
    std::cerr << "warning: label map has a single region; edge-focused metrics are undefined\n";
  }
  const auto m = cgs::evaluate(ref, test, &lm, a.band);
  std::cout << cgs::metrics_to_json(m).dump(2) << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string image;
  std::string labels;
  std::string config;
  std::string out_dir;
  std::string preset;
  int threads = 0;
  int progress = 0;
};

int cmd_ablate(const AblateArgs& a) {
  cgs::TrainConfig base = preset_config(a.preset);
  if (!a.config.empty()) base = cgs::load_config(a.config, base);
  if (a.threads > 0) base.threads = a.threads;
  if (!fs::is_directory(a.out_dir)) throw cgs::Error(cgs::ErrorCode::IoFailure, "no such directory: " + a.out_dir);
  const auto target = cgs::load_image<float>(a.image);
  const auto lm = cgs::load_label_map(a.labels);

  // Rows of the ablation table: guidance / warm-up / clamp removal.
  constexpr bool kRows[6][3] = {{0, 0, 0}, {0, 0, 1}, {1, 0, 0}, {1, 0, 1}, {1, 1, 0}, {1, 1, 1}};
  std::ostringstream csv;
  csv.precision(10);
  csv << "row,contour_guidance,warm_up,remove_clamp,psnr,ef_psnr,ms_ssim,ef_ssim,model_bytes\n";
  auto opt = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string(); };
  for (int r = 0; r < 6; ++r) {
    cgs::TrainConfig cfg = base;
    cfg.contour_guidance = kRows[r][0];
    cfg.warm_up = kRows[r][1];
    cfg.remove_clamp = kRows[r][2];
    std::fprintf(stderr, "row %d: guidance=%d warm_up=%d remove_clamp=%d\n", r + 1, kRows[r][0], kRows[r][1],
                 kRows[r][2]);
    const auto res = run_fit(target, &lm, cfg, a.progress);
    const auto img = cgs::render(res.model, cfg.contour_guidance ? &lm : nullptr, target.width(), target.height(),
                                 cgs::RenderSettings::from(cfg));
    cgs::save_image(img, (fs::path(a.out_dir) / ("row" + std::to_string(r + 1) + ".png")).string());
    const auto& m = res.report.final_metrics;
    csv << r + 1 << ',' << kRows[r][0] << ',' << kRows[r][1] << ',' << kRows[r][2] << ',' << m.psnr << ','
        << opt(m.ef_psnr) << ',' << opt(m.ms_ssim) << ',' << opt(m.ef_ssim) << ',' << res.report.model_bytes << '\n';
  }
  const std::string path = (fs::path(a.out_dir) / "ablation.csv").string();
  cgs::write_text(path, csv.str());
  std::cout << csv.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contour-aware 2D Gaussian splatting"};
  app.require_subcommand(1);

  GenChartArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-chart", "Write a synthetic color chart and its label map");
  gen_cmd->add_option("--kind", gen.kind, "grid or pie")->check(CLI::IsMember({"grid", "pie"}));
  gen_cmd->add_option("--out-dir", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--spec", gen.spec, "Chart spec JSON");

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a Gaussian model to an image");
  fit_cmd->add_option("--image", fit.image, "Target PNG")->required();
  fit_cmd->add_option("--labels", fit.labels, "Label map PNG (single-channel or indexed)");
  fit_cmd->add_option("--config", fit.config, "Config JSON");
  fit_cmd->add_option("--out", fit.out, "Model file (CGS1)")->required();
  fit_cmd->add_option("--preset", fit.preset, "chart | davis-few | davis-many");
  fit_cmd->add_flag("--no-guidance", fit.no_guidance, "Disable contour guidance");
  fit_cmd->add_flag("--no-warmup", fit.no_warmup, "Disable warm-up region refreshes");
  fit_cmd->add_flag("--clamp", fit.clamp, "Clamp the render to [0,1] inside the loss");
  fit_cmd->add_option("--threads", fit.threads, "Worker threads (0: CGS_THREADS or OpenMP default)");
  fit_cmd->add_option("--seed", fit.seed, "Override rng_seed");
  fit_cmd->add_option("--progress", fit.progress, "Print the loss every N iterations (0: off)");

  RenderArgs ren;
  auto* render_cmd = app.add_subcommand("render", "Render a saved model");
  render_cmd->add_option("--model", ren.model, "Model file")->required();
  render_cmd->add_option("--labels", ren.labels, "Label map at the output resolution");
  render_cmd->add_option("--width", ren.width, "Output width")->required()->check(CLI::PositiveNumber);
  render_cmd->add_option("--height", ren.height, "Output height")->required()->check(CLI::PositiveNumber);
  render_cmd->add_option("--out", ren.out, "Output PNG")->required();
  render_cmd->add_option("--src-width", ren.src_width, "Training width (enables rescaling)")
      ->check(CLI::PositiveNumber);
  render_cmd->add_option("--src-height", ren.src_height, "Training height (enables rescaling)")
      ->check(CLI::PositiveNumber);
  render_cmd->add_option("--threads", ren.threads, "Worker threads");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Print quality metrics as JSON");
  eval_cmd->add_option("--ref", ev.ref, "Reference PNG")->required();
  eval_cmd->add_option("--test", ev.test, "Test PNG")->required();
  eval_cmd->add_option("--labels", ev.labels, "Label map PNG")->required();
  eval_cmd->add_option("--band", ev.band, "Edge band radius in pixels")->check(CLI::NonNegativeNumber);

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Run the six ablation rows");
  ablate_cmd->add_option("--image", ab.image, "Target PNG")->required();
  ablate_cmd->add_option("--labels", ab.labels, "Label map PNG")->required();
  ablate_cmd->add_option("--config", ab.config, "Config JSON");
  ablate_cmd->add_option("--out-dir", ab.out_dir, "Output directory")->required();
  ablate_cmd->add_option("--preset", ab.preset, "chart | davis-few | davis-many");
  ablate_cmd->add_option("--threads", ab.threads, "Worker threads");
  ablate_cmd->add_option("--progress", ab.progress, "Print the loss every N iterations (0: off)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_chart(gen);
    if (*fit_cmd) return cmd_fit(fit);
    if (*render_cmd) return cmd_render(ren);
    if (*eval_cmd) return cmd_eval(ev);
    if (*ablate_cmd) return cmd_ablate(ab);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const cgs::Error& e) {
    std::cerr << "error [" << cgs::to_string(e.code()) << "]: " << e.what() << '\n';
    return e.code() == cgs::ErrorCode::InvalidConfig ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
