#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "incnerf/config.hpp"
#include "incnerf/continual.hpp"
#include "incnerf/metrics.hpp"
#include "incnerf/report.hpp"
#include "incnerf/runtime.hpp"

namespace fs = std::filesystem;
using namespace incnerf;
using config::ExperimentConfig;
using train::json;

namespace {

std::uint32_t manifest_crc(const fs::path& dataset_root) {
  std::ifstream is(dataset_root / "manifest.json", std::ios::binary);
  if (!is) throw DataError("cannot open manifest: " + (dataset_root / "manifest.json").string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return crc32(bytes.data(), bytes.size());
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

template <typename R>
Image render_full_view(const field::FieldModel<R>& model, const geom::Pose6DoF& pose,
                       const geom::Intrinsics& K, const render::RenderContext& ctx, Rng& rng) {
  auto results = render::render_view(model, pose, K, geom::all_pixels(K), ctx, rng);
  Image im = Image::zero(K.width, K.height);
  std::size_t i = 0;
  for (int r = 0; r < K.height; r++) {
    for (int c = 0; c < K.width; c++, i++) {
      for (int ch = 0; ch < 3; ch++) {
        im.at(r, c, ch) = static_cast<float>(results[i].color[static_cast<std::size_t>(ch)]);
      }
    }
  }
  return im;
}

render::RenderContext context_for(const ExperimentConfig& cfg, const scene::StepDataset& step) {
  render::RenderContext ctx;
  ctx.sampling = cfg.sampling;
  ctx.t_near = step.t_near;
  ctx.t_far = step.t_far;
  ctx.beta_min = static_cast<double>(cfg.loss.beta_min);
  ctx.background = step.background;
  return ctx;
}

int cmd_gen(const ExperimentConfig& cfg) {
  auto scene_spec = cfg.resolve_scene();
  auto steps = scene::generate_incremental_dataset(scene_spec, cfg.trajectory,
                                                   cfg.dataset_params, cfg.seed);
  scene::write_dataset(cfg.dataset, steps);
  write_json(fs::path(cfg.dataset) / "gen_config.json", cfg.to_json());
  std::printf("gen: wrote %zu steps to %s\n", steps.size(), cfg.dataset.c_str());
  return 0;
}

template <typename R>
int run_training(const ExperimentConfig& cfg, bool resume) {
  auto steps = scene::read_dataset(cfg.dataset);
  const auto dataset_id = manifest_crc(cfg.dataset);
  for (const auto& name : cfg.strategies) {
    const auto strategy = train::strategy_from_name(name);
    const fs::path out_dir = fs::path(cfg.out) / name;
    fs::create_directories(out_dir);
    train::StrategyTag tag{strategy, cfg.kr_keyframes_per_step};
    train::ExperimentRunner<R> runner(steps, tag, cfg.trainer_config<R>(), out_dir, cfg.dataset,
                                      dataset_id);
    std::printf("train: strategy %s -> %s\n", name.c_str(), out_dir.string().c_str());
    std::fflush(stdout);
    auto record = runner.run(resume);
    record.config_echo = cfg.to_json();
    write_json(out_dir / "record.json", record.to_json());
    runner.model().save(out_dir / "final_model");
    std::printf("train: %s avg PSNR %.2f dB, avg SSIM %.4f\n", name.c_str(), record.avg_psnr,
                record.avg_ssim);
    std::fflush(stdout);
  }
  return 0;
}

std::vector<train::ExperimentRecord> load_records(const ExperimentConfig& cfg) {
  std::vector<train::ExperimentRecord> records;
  for (const auto& name : cfg.strategies) {
    const fs::path record_path = fs::path(cfg.out) / name / "record.json";
    std::ifstream is(record_path);
    if (!is) throw DataError("missing record: " + record_path.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw DataError("malformed record " + record_path.string() + ": " + e.what());
    }
    records.push_back(train::ExperimentRecord::from_json(j));
  }
  return records;
}

template <typename R>
int cmd_eval(const ExperimentConfig& cfg) {
  auto steps = scene::read_dataset(cfg.dataset);
  const auto dataset_id = manifest_crc(cfg.dataset);
  std::printf("strategy        split  step   PSNR    SSIM\n");
  for (const auto& name : cfg.strategies) {
    const fs::path run_dir = fs::path(cfg.out) / name;
    auto model = field::FieldModel<R>::load(run_dir / "final_model");
    const auto ctx = context_for(cfg, steps[0]);

    json eval_out;
    eval_out["strategy"] = name;
    eval_out["dataset_id"] = dataset_id;
    eval_out["config"] = cfg.to_json();
    for (const char* split : {"test", "train"}) {
      Rng rng = derive_rng(cfg.seed, "cli-eval");
      json entries = json::array();
      for (const auto& step : steps) {
        const auto& views = std::string(split) == "test" ? step.test_views : step.train_views;
        double psnr_acc = 0, ssim_acc = 0;
        for (const auto& view : views) {
          const Image im = render_full_view(model, view.pose, step.intrinsics, ctx, rng);
          psnr_acc += metrics::psnr(im, view.image);
          ssim_acc += metrics::ssim(im, view.image);
        }
        json e;
        e["step"] = step.step_index;
        e["psnr"] = psnr_acc / static_cast<double>(views.size());
        e["ssim"] = ssim_acc / static_cast<double>(views.size());
        entries.push_back(e);
        std::printf("%-15s %-6s %4d  %6.2f  %6.4f\n", name.c_str(), split, step.step_index,
                    e["psnr"].get<double>(), e["ssim"].get<double>());
      }
      eval_out[split] = entries;
    }
    write_json(run_dir / "eval.json", eval_out);
  }
  return 0;
}

template <typename R>
int cmd_report(const ExperimentConfig& cfg) {
  auto records = load_records(cfg);
  const fs::path report_dir = fs::path(cfg.out) / "report";
  report::build_report(records, report_dir);
  write_json(report_dir / "report_config.json", cfg.to_json());

  // side-by-side grids: ground-truth row, then one row per strategy
  auto steps = scene::read_dataset(cfg.dataset);
  std::vector<Image> rows;
  {
    std::vector<Image> gt_row;
    for (const auto& step : steps) gt_row.push_back(step.test_views.at(0).image);
    rows.push_back(report::image_strip(gt_row));
  }
  const auto ctx = context_for(cfg, steps[0]);
  for (const auto& name : cfg.strategies) {
    auto model = field::FieldModel<R>::load(fs::path(cfg.out) / name / "final_model");
    Rng rng = derive_rng(cfg.seed, "cli-grid");
    std::vector<Image> row;
    for (const auto& step : steps) {
      row.push_back(render_full_view(model, step.test_views.at(0).pose, step.intrinsics, ctx, rng));
    }
    rows.push_back(report::image_strip(row));
  }
  write_ppm(report_dir / "grid.ppm", report::image_stack(rows));

  std::printf("strategy         avg PSNR  avg SSIM  aux MiB\n");
  for (const auto& r : records) {
    std::printf("%-15s  %8.2f  %8.4f  %7.2f\n", r.strategy.c_str(), r.avg_psnr, r.avg_ssim,
                static_cast<double>(r.memory.aux_bytes) / (1024.0 * 1024.0));
  }
  std::printf("report: wrote %s\n", report_dir.string().c_str());
  return 0;
}

// Fast invariant checks; exit code 5 on any failure.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](const char* name, bool ok) {
    std::printf("%-44s %s\n", name, ok ? "ok" : "FAIL");
    if (!ok) failures++;
  };

  {
    Rng rng(1);
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; trial++) {
      const int n = 1 + static_cast<int>(rng.uniform_index(64));
      std::vector<double> ts;
      double t = rng.uniform(0, 0.2);
      for (int i = 0; i < n; i++) {
        t += rng.uniform(0.001, 0.1);
        ts.push_back(t);
      }
      std::vector<field::FieldSample<double>> samples(static_cast<std::size_t>(n));
      for (auto& sm : samples) sm.sigma = rng.uniform(0, 40);
      auto cw = render::composite_weights<double>(samples, ts, t + 0.1);
      double wsum = 0;
      for (double w : cw.weights) wsum += w;
      ok = std::abs(wsum + cw.t_end - 1.0) < 1e-6;
    }
    check("compositing partition of unity", ok);
  }
  {
    bool ok = true;
    for (double x : {-1e6, -745.0, -30.0, 0.0, 30.0, 745.0, 1e6}) {
      const double v = diff::detail::softplus_scalar(x);
      ok = ok && std::isfinite(v) && v > 0.0;
    }
    check("softplus stable and strictly positive", ok);
  }
  {
    Rng rng(2);
    diff::ParameterSet<double> ps;
    auto& w = ps.add("w", 16, 16);
    for (Eigen::Index i = 0; i < w.value.size(); i++) w.value.data()[i] = rng.uniform(-1, 1);
    const auto path = fs::temp_directory_path() / "incnerf_selftest.unkd";
    ps.save(path);
    auto loaded = diff::ParameterSet<double>::load(path);
    check("parameter checkpoint round-trip", loaded.checksum() == ps.checksum());
    fs::remove(path);
  }
  {
    Rng rng(3);
    bool ok = true;
    for (int trial = 0; trial < 10 && ok; trial++) {
      const double sigma = rng.uniform(0.05, 3.0);
      const double t0 = rng.uniform(0, 1), t1 = t0 + rng.uniform(0.5, 3.0);
      geom::Ray ray;
      ray.origin = geom::Vec3(0, 0, 0);
      ray.dir = geom::Vec3(0, 0, -1);
      ray.t_near = t0;
      ray.t_far = t1;
      auto ts = render::stratified_samples(ray, render::SamplingConfig{256, 0, false}, nullptr);
      std::vector<field::FieldSample<double>> samples(256);
      for (auto& sm : samples) {
        sm.sigma = sigma;
        sm.color = {1, 1, 1};
      }
      auto c = render::composite_color<double>(samples, ts, t1, {0, 0, 0});
      ok = std::abs(c[0] - (-std::expm1(-sigma * (t1 - t0)))) < 1e-3;
    }
    check("homogeneous-medium analytic agreement", ok);
  }
  {
    field::FieldConfig fc;
    fc.trunk_depth = 2;
    fc.trunk_width = 16;
    fc.head_width = 8;
    fc.pos_enc_levels = 2;
    fc.dir_enc_levels = 1;
    auto model = field::FieldModel<double>::init(fc, 11);
    field::FieldModel<double>::Points px(2, 3), pd(2, 3);
    px << 0.2, -0.1, 0.4, -0.3, 0.2, 0.0;
    pd << 0, 0, -1, 0, 1, 0;
    auto builder = [&](diff::Graph<double>& g) {
      auto q = model.build_query(g, px, pd, true);
      return g.mean(g.square(g.concat_cols(g.concat_cols(q.sigma, q.color), q.beta_raw)));
    };
    auto rep = diff::finite_diff_check<double>(builder, model.params(), 1e-4, 1e-4);
    check("field gradients vs finite differences", rep.passed);
  }
  if (failures > 0) {
    std::printf("selftest: %d failure(s)\n", failures);
    return 5;
  }
  std::printf("selftest: all checks passed\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_runtime();

  CLI::App app{"incremental neural radiance field training testbed"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags remain valid after the subcommand name

  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  std::vector<std::string> strategy_override;
  bool resume = false;

  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--seed", seed_override, "override the config seed");
  app.add_option("--out", out_override, "override the output directory");
  app.add_option("--strategy", strategy_override, "override strategies (repeatable)");

  auto* gen = app.add_subcommand("gen", "generate the synthetic incremental dataset");
  auto* train_cmd = app.add_subcommand("train", "train the configured strategies");
  train_cmd->add_flag("--resume", resume, "resume from per-step checkpoints");
  auto* eval = app.add_subcommand("eval", "evaluate final checkpoints on train/test splits");
  auto* report_cmd = app.add_subcommand("report", "emit CSV/SVG/PPM report from records");
  app.add_subcommand("selftest", "run fast invariant checks");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = ExperimentConfig::from_file(config_path);
    } else {
      cfg = ExperimentConfig::from_json(json::object());
    }
    if (seed_override) cfg.seed = *seed_override;
    if (out_override) cfg.out = *out_override;
    if (!strategy_override.empty()) cfg.strategies = strategy_override;
    cfg.validate();

    if (app.got_subcommand("selftest")) return cmd_selftest();
    if (app.got_subcommand(gen)) return cmd_gen(cfg);
    if (app.got_subcommand(train_cmd)) {
      return cfg.precision == "f32" ? run_training<float>(cfg, resume)
                                    : run_training<double>(cfg, resume);
    }
    if (app.got_subcommand(eval)) {
      return cfg.precision == "f32" ? cmd_eval<float>(cfg) : cmd_eval<double>(cfg);
    }
    if (app.got_subcommand(report_cmd)) {
      return cfg.precision == "f32" ? cmd_report<float>(cfg) : cmd_report<double>(cfg);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error kind=%s msg=\"%s\"\n",
                 e.kind() == ErrorKind::config   ? "config"
                 : e.kind() == ErrorKind::data   ? "data"
                 : e.kind() == ErrorKind::numeric ? "numeric"
                                                  : "usage",
                 e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error kind=internal msg=\"%s\"\n", e.what());
    return 1;
  }
  return 0;
}
