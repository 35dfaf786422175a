#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "incnerf/continual.hpp"

using namespace incnerf;
using train::DatasetAudit;
using train::ExperimentRunner;
using train::FilterConfig;
using train::Strategy;
using train::StrategyTag;
using train::TrainerConfig;
using train::TrainSchedule;

namespace {

std::vector<scene::StepDataset> tiny_dataset(int n_steps = 3, int res = 8) {
  auto s = scene::make_default_scene();
  scene::TrajectorySpec traj;
  traj.n_views = 4 * n_steps;
  traj.n_steps = n_steps;
  scene::DatasetParams params;
  const double f = 1.125 * res;
  params.intrinsics = geom::Intrinsics{res, res, f, f, res / 2.0, res / 2.0};
  params.test_fraction = 0.25;
  return scene::generate_incremental_dataset(s, traj, params, 13);
}

TrainerConfig<double> tiny_config(std::uint64_t seed = 5) {
  TrainerConfig<double> cfg;
  cfg.schedule = TrainSchedule{1, 1, 8, 32};
  cfg.filter.calibration_poses = 8;
  cfg.filter.candidate_views_per_round = 4;
  cfg.filter.max_resample_rounds = 2;
  cfg.filter.rays_per_candidate_view = 8;
  cfg.filter.views_per_distill_batch = 4;
  cfg.sampling = render::SamplingConfig{4, 4, true};
  cfg.field_cfg.trunk_depth = 2;
  cfg.field_cfg.trunk_width = 16;
  cfg.field_cfg.head_width = 8;
  cfg.field_cfg.pos_enc_levels = 2;
  cfg.field_cfg.dir_enc_levels = 1;
  cfg.seed = seed;
  return cfg;
}

field::FieldModel<double> transparent_model() {
  field::FieldConfig fcfg;
  fcfg.trunk_depth = 2;
  fcfg.trunk_width = 16;
  fcfg.head_width = 8;
  fcfg.pos_enc_levels = 2;
  fcfg.dir_enc_levels = 1;
  auto m = field::FieldModel<double>::init(fcfg, 3);
  m.params().at("density.b").value.array() = -100.0;  // relu clamps sigma to 0
  return m;
}

}  // namespace

TEST_CASE("schedule alternation") {
  SECTION("1:1 over 10 iterations alternates S,D,S,D,...") {
    TrainSchedule s{1, 1, 10, 32};
    std::string pattern;
    for (int i = 0; i < 10; i++) pattern += s.is_supervised_slot(i) ? 'S' : 'D';
    REQUIRE(pattern == "SDSDSDSDSD");
  }

  SECTION("supervised count matches ceil(L*x/(x+y)) within 1") {
    for (auto [x, y, total] : std::vector<std::array<int, 3>>{
             {1, 1, 10}, {9, 1, 10}, {1, 9, 10}, {2, 1, 15}, {3, 2, 17}, {1, 4, 23}}) {
      TrainSchedule s{x, y, total, 32};
      const int count = s.supervised_count(total);
      const int expected = static_cast<int>(
          std::ceil(static_cast<double>(total) * x / static_cast<double>(x + y)));
      REQUIRE(std::abs(count - expected) <= 1);
    }
  }
}

TEST_CASE("score_view") {
  geom::Intrinsics K{8, 8, 9.0, 9.0, 4.0, 4.0};
  render::RenderContext ctx;
  ctx.sampling = render::SamplingConfig{4, 4, true};
  ctx.t_near = 0.5;
  ctx.t_far = 3.0;
  ctx.beta_min = 0.01;
  geom::Pose6DoF pose{0, 0, 2, 0, 0, 0};

  SECTION("fully transparent field scores exactly beta_min") {
    auto m = transparent_model();
    Rng rng(4);
    REQUIRE(train::score_view(m, pose, K, 8, ctx, rng) == 0.01);
  }

  SECTION("same rng seed gives identical scores") {
    auto m = transparent_model();
    m.params().at("density.b").value.array() = 0.5;
    Rng a(9), b(9);
    REQUIRE(train::score_view(m, pose, K, 8, ctx, a) ==
            train::score_view(m, pose, K, 8, ctx, b));
  }

  SECTION("opaque constant-beta field scores near softplus(raw-1) + beta_min") {
    auto m = transparent_model();
    m.params().at("density.b").value.array() = 100.0;  // opaque everywhere
    // zero the uncertainty head weights, fix raw beta via the bias
    m.params().at("uncert.1.w").value.array() = 0.0;
    m.params().at("uncert.1.b").value.array() = 1.0;  // softplus(1-1) = ln 2
    Rng rng(2);
    const double score = train::score_view(m, pose, K, 8, ctx, rng);
    REQUIRE(score == Catch::Approx(std::log(2.0) + 0.01).epsilon(1e-6));
  }
}

TEST_CASE("filter_views") {
  geom::Intrinsics K{8, 8, 9.0, 9.0, 4.0, 4.0};
  render::RenderContext ctx;
  ctx.sampling = render::SamplingConfig{4, 4, true};
  ctx.t_near = 0.5;
  ctx.t_far = 3.0;
  ctx.beta_min = 0.01;
  std::vector<geom::PoseRange> ranges{
      geom::PoseRange::from_pose(geom::Pose6DoF{0, 0, 2, 0, 0, 0}, 0)};
  FilterConfig fcfg;
  fcfg.candidate_views_per_round = 4;
  fcfg.max_resample_rounds = 2;
  fcfg.rays_per_candidate_view = 8;
  fcfg.views_per_distill_batch = 3;

  auto m = transparent_model();  // every view scores exactly beta_min = 0.01

  SECTION("accepts strictly below the threshold up to the quota") {
    Rng rng(1);
    auto out = train::filter_views(m, ranges, fcfg, 0.02, K, ctx, rng);
    REQUIRE(out.accepted.size() == 3);
    REQUIRE(out.fallbacks == 0);
    for (const auto& a : out.accepted) {
      REQUIRE(a.score < 0.02);
      REQUIRE(a.source_step == 0);
      REQUIRE(ranges[0].contains(a.pose));
    }
  }

  SECTION("score equal to the threshold is rejected (strict inequality)") {
    Rng rng(1);
    auto out = train::filter_views(m, ranges, fcfg, 0.01, K, ctx, rng);
    // every candidate scores exactly 0.01, none strictly below
    REQUIRE(out.rejected == fcfg.candidate_views_per_round * fcfg.max_resample_rounds);
    REQUIRE(out.fallbacks == 3);
    for (const auto& a : out.accepted) REQUIRE(a.via_fallback);
  }

  SECTION("skip-distill fallback returns an empty batch") {
    FilterConfig skip = fcfg;
    skip.fallback = FilterConfig::Fallback::skip_distill;
    Rng rng(1);
    auto out = train::filter_views(m, ranges, skip, 0.01, K, ctx, rng);
    REQUIRE(out.accepted.empty());
  }
}

TEST_CASE("memory footprint formulas") {
  auto cfg = tiny_config();
  auto model = field::FieldModel<double>::init(cfg.field_cfg, 1);
  train::TeacherBundle<double> bundle;
  bundle.teacher = std::make_shared<const field::FieldModel<double>>(model.snapshot_as_teacher());

  SECTION("unikd: teacher bytes plus 96 bytes per stored range") {
    for (int t : {2, 5, 10}) {
      bundle.pose_ranges.assign(static_cast<std::size_t>(t),
                                geom::PoseRange::from_pose(geom::Pose6DoF{}, 0));
      auto m = train::memory_footprint<double>(Strategy::unikd, &bundle, 0, 0, 0);
      REQUIRE(m.aux_bytes == model.params_view().total_count() * sizeof(double) +
                                 static_cast<std::size_t>(96 * t));
    }
  }

  SECTION("keyframe replay grows linearly with stored frames") {
    const std::size_t image_bytes = 8 * 8 * 3 * sizeof(float);
    for (int t : {2, 5, 10}) {
      auto m = train::memory_footprint<double>(Strategy::keyframe_replay, nullptr,
                                               static_cast<std::size_t>(2 * t), image_bytes, 0);
      REQUIRE(m.aux_bytes == static_cast<std::size_t>(2 * t) * image_bytes);
    }
  }

  SECTION("naive stores nothing; batch stores the dataset") {
    REQUIRE(train::memory_footprint<double>(Strategy::naive, nullptr, 0, 0, 0).aux_bytes == 0);
    REQUIRE(train::memory_footprint<double>(Strategy::batch, nullptr, 0, 0, 12345).aux_bytes ==
            12345);
  }
}

TEST_CASE("train_one_step bookkeeping") {
  auto data = tiny_dataset(3);
  auto cfg = tiny_config();

  SECTION("unikd: step 0 is supervised-only, later steps alternate") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::unikd, 2}, cfg);
    auto s0 = runner.train_one_step(0);
    REQUIRE(s0.sup_iters == 8);
    REQUIRE(s0.dis_iters == 0);
    REQUIRE(runner.bundle()->pose_ranges.size() == 1);
    REQUIRE(runner.bundle()->pose_ranges[0].step_index == 0);
    const auto teacher0 = runner.bundle()->teacher->checksum();

    auto s1 = runner.train_one_step(1);
    REQUIRE(s1.sup_iters == 4);
    REQUIRE(s1.dis_iters + s1.dis_skipped == 4);
    REQUIRE(runner.bundle()->pose_ranges.size() == 2);
    REQUIRE(runner.bundle()->teacher->checksum() != teacher0);
    REQUIRE(runner.bundle()->teacher->checksum() == runner.model().checksum());
    REQUIRE(s1.beta_thr > 0.01);
  }

  SECTION("steps must run in order") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::unikd, 2}, cfg);
    REQUIRE_THROWS_AS(runner.train_one_step(1), UsageError);
  }

  SECTION("batch strategy rejects stepwise training") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::batch, 2}, cfg);
    REQUIRE_THROWS_AS(runner.train_one_step(0), UsageError);
  }

  SECTION("unikd never reads past-step images or poses during step t") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::unikd, 2}, cfg);
    runner.train_one_step(0);
    runner.train_one_step(1);
    runner.train_one_step(2);
    for (int current = 0; current < 3; current++) {
      for (int past = 0; past < current; past++) {
        const auto reads = runner.audit().reads(current, past);
        REQUIRE(reads.images == 0);
        REQUIRE(reads.poses == 0);
      }
    }
  }

  SECTION("keyframe replay stores the configured keyframes per step") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::keyframe_replay, 2}, cfg);
    runner.train_one_step(0);
    REQUIRE(runner.current_memory().keyframe_bytes == 2 * 8 * 8 * 3 * sizeof(float));
    runner.train_one_step(1);
    REQUIRE(runner.current_memory().keyframe_bytes == 4 * 8 * 8 * 3 * sizeof(float));
    // replay deliberately reads stored copies, not the past dataset
    REQUIRE(runner.audit().reads(1, 0).images == 0);
  }
}

TEST_CASE("run_experiment") {
  auto data = tiny_dataset(2, 12);  // SSIM needs at least the 11x11 window
  auto cfg = tiny_config(21);

  SECTION("deterministic rerun gives an identical record") {
    ExperimentRunner<double> a(data, StrategyTag{Strategy::unikd, 2}, cfg);
    ExperimentRunner<double> b(data, StrategyTag{Strategy::unikd, 2}, cfg);
    const auto ra = a.run().to_json().dump();
    const auto rb = b.run().to_json().dump();
    REQUIRE(ra == rb);
  }

  SECTION("different seeds give different records") {
    ExperimentRunner<double> a(data, StrategyTag{Strategy::naive, 2}, cfg);
    auto cfg2 = cfg;
    cfg2.seed = 22;
    ExperimentRunner<double> b(data, StrategyTag{Strategy::naive, 2}, cfg2);
    REQUIRE(a.run().to_json().dump() != b.run().to_json().dump());
  }

  SECTION("batch strategy trains once and evaluates per step") {
    ExperimentRunner<double> runner(data, StrategyTag{Strategy::batch, 2}, cfg);
    auto record = runner.run();
    REQUIRE(record.eval_test.size() == 2);
    REQUIRE(record.steps.size() == 2);
    REQUIRE(record.steps[0].sup_iters == 8 * 2);
    REQUIRE(record.memory.dataset_bytes == runner.audit().train_image_bytes());
  }

  SECTION("resume from a checkpoint matches the uninterrupted run") {
    const auto out_a = std::filesystem::temp_directory_path() / "incnerf_resume_a";
    const auto out_b = std::filesystem::temp_directory_path() / "incnerf_resume_b";
    std::filesystem::remove_all(out_a);
    std::filesystem::remove_all(out_b);

    ExperimentRunner<double> full(data, StrategyTag{Strategy::unikd, 2}, cfg, out_a, "ds", 1);
    const auto record_full = full.run().to_json().dump();

    {
      ExperimentRunner<double> first(data, StrategyTag{Strategy::unikd, 2}, cfg, out_b, "ds", 1);
      first.train_one_step(0);  // interrupted before step 1
    }
    ExperimentRunner<double> resumed(data, StrategyTag{Strategy::unikd, 2}, cfg, out_b, "ds", 1);
    const auto record_resumed = resumed.run(/*resume=*/true).to_json().dump();

    REQUIRE(record_full == record_resumed);
    std::filesystem::remove_all(out_a);
    std::filesystem::remove_all(out_b);
  }
}

TEST_CASE("chunked gradient accumulation") {
  auto data = tiny_dataset(2);

  SECTION("two chunks match the single-chunk result when draws are frozen") {
    // midpoint sampling without a fine pass consumes no randomness inside a
    // chunk, so chunk count only changes the reduction grouping
    auto cfg1 = tiny_config(31);
    cfg1.chunks = 1;
    cfg1.sampling = render::SamplingConfig{8, 0, false};
    cfg1.schedule.iters_per_step = 1;
    auto cfg2 = cfg1;
    cfg2.chunks = 2;
    ExperimentRunner<double> a(data, StrategyTag{Strategy::naive, 2}, cfg1);
    ExperimentRunner<double> b(data, StrategyTag{Strategy::naive, 2}, cfg2);
    auto sa = a.train_one_step(0);
    auto sb = b.train_one_step(0);
    REQUIRE(sa.last_sup_loss == Catch::Approx(sb.last_sup_loss).epsilon(1e-10));
    const auto& pa = a.model().params_view().entries();
    const auto& pb = b.model().params_view().entries();
    for (std::size_t e = 0; e < pa.size(); e++) {
      const double scale = std::max(1e-9, pa[e].value.cwiseAbs().maxCoeff());
      REQUIRE((pa[e].value - pb[e].value).cwiseAbs().maxCoeff() / scale < 1e-8);
    }
  }

  SECTION("fixed chunk count is bit-deterministic") {
    auto cfg = tiny_config(32);
    cfg.chunks = 2;
    ExperimentRunner<double> a(data, StrategyTag{Strategy::unikd, 2}, cfg);
    ExperimentRunner<double> b(data, StrategyTag{Strategy::unikd, 2}, cfg);
    a.train_one_step(0);
    b.train_one_step(0);
    auto s1a = a.train_one_step(1);
    auto s1b = b.train_one_step(1);
    REQUIRE(s1a.model_checksum == s1b.model_checksum);
  }
}
