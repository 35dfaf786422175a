#pragma once

#include <algorithm>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "incnerf/diff.hpp"
#include "incnerf/errors.hpp"
#include "incnerf/field.hpp"
#include "incnerf/geometry.hpp"
#include "incnerf/metrics.hpp"
#include "incnerf/objectives.hpp"
#include "incnerf/record.hpp"
#include "incnerf/renderer.hpp"
#include "incnerf/rng.hpp"
#include "incnerf/scene.hpp"

namespace incnerf::train {

struct TrainSchedule {
  int sup_iters = 1;  // x in the x:y alternation
  int dis_iters = 1;  // y
  int iters_per_step = 500;
  int rays_per_batch = 512;

  void validate() const {
    if (sup_iters < 0 || dis_iters < 0 || sup_iters + dis_iters < 1) {
      throw ConfigError("schedule: need x, y >= 0 with x + y >= 1");
    }
    if (iters_per_step < 1) throw ConfigError("schedule: iters_per_step must be >= 1");
    if (rays_per_batch < 1) throw ConfigError("schedule: rays_per_batch must be >= 1");
  }

  // true = supervised slot, following blocks of x supervised then y distill
  bool is_supervised_slot(int iteration) const {
    const int block = sup_iters + dis_iters;
    return iteration % block < sup_iters;
  }

  int supervised_count(int total) const {
    int n = 0;
    for (int i = 0; i < total; i++) n += is_supervised_slot(i) ? 1 : 0;
    return n;
  }
};

struct FilterConfig {
  enum class ThresholdMode { percentile, fixed } mode = ThresholdMode::percentile;
  double fixed_beta_thr = 0.1;
  double percentile = 0.9;     // fraction of calibration scores admitted
  int calibration_poses = 64;
  int candidate_views_per_round = 12;
  int max_resample_rounds = 4;
  int rays_per_candidate_view = 24;
  int views_per_distill_batch = 8;
  enum class Fallback { lowest_uncertainty, skip_distill } fallback = Fallback::lowest_uncertainty;
  bool use_teacher_uncertainty = false;  // score with the teacher instead of the student

  void validate(double beta_min) const {
    if (mode == ThresholdMode::fixed && fixed_beta_thr <= beta_min) {
      throw ConfigError("filter: beta_thr must exceed beta_min");
    }
    if (percentile <= 0.0 || percentile > 1.0) throw ConfigError("filter: percentile in (0,1]");
    if (calibration_poses < 1 || candidate_views_per_round < 1 || max_resample_rounds < 1 ||
        rays_per_candidate_view < 1 || views_per_distill_batch < 1) {
      throw ConfigError("filter: counts must be >= 1");
    }
  }
};

enum class Strategy { unikd, naive, keyframe_replay, batch };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::unikd: return "unikd";
    case Strategy::naive: return "naive";
    case Strategy::keyframe_replay: return "keyframe-replay";
    case Strategy::batch: return "batch";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  if (name == "unikd") return Strategy::unikd;
  if (name == "naive") return Strategy::naive;
  if (name == "keyframe-replay") return Strategy::keyframe_replay;
  if (name == "batch") return Strategy::batch;
  throw ConfigError("unknown strategy: " + name);
}

struct StrategyTag {
  Strategy kind = Strategy::unikd;
  int kr_keyframes_per_step = 2;

  void validate() const {
    if (kind == Strategy::keyframe_replay && kr_keyframes_per_step < 1) {
      throw ConfigError("keyframe-replay: kr_keyframes_per_step must be >= 1");
    }
  }
};

template <typename R>
struct TeacherBundle {
  std::shared_ptr<const field::FieldModel<R>> teacher;
  std::vector<geom::PoseRange> pose_ranges;  // exactly one per completed step
};

// ---------------------------------------------------------------------------
// Access-audited dataset view. Incremental strategies must not touch images
// or poses of past steps; the counters prove it.

class DatasetAudit {
 public:
  explicit DatasetAudit(const std::vector<scene::StepDataset>& steps) : steps_(&steps) {
    counts_.resize(steps.size());
    for (auto& row : counts_) row.resize(steps.size());
  }

  int step_count() const { return static_cast<int>(steps_->size()); }
  void set_current_step(int t) { current_ = t; }
  // final-model evaluation reads everything by design; exempt it
  void set_eval_mode(bool on) { eval_ = on; }

  const geom::Intrinsics& intrinsics() const { return (*steps_)[0].intrinsics; }
  double t_near() const { return (*steps_)[0].t_near; }
  double t_far() const { return (*steps_)[0].t_far; }
  std::array<double, 3> background() const { return (*steps_)[0].background; }

  int train_view_count(int step) const { return static_cast<int>(at(step).train_views.size()); }
  int test_view_count(int step) const { return static_cast<int>(at(step).test_views.size()); }

  const Image& train_image(int step, int idx) {
    if (!eval_) counts_[index(current_)][index(step)].images++;
    return at(step).train_views[static_cast<std::size_t>(idx)].image;
  }
  const geom::Pose6DoF& train_pose(int step, int idx) {
    if (!eval_) counts_[index(current_)][index(step)].poses++;
    return at(step).train_views[static_cast<std::size_t>(idx)].pose;
  }
  const Image& test_image(int step, int idx) {
    if (!eval_) counts_[index(current_)][index(step)].images++;
    return at(step).test_views[static_cast<std::size_t>(idx)].image;
  }
  const geom::Pose6DoF& test_pose(int step, int idx) {
    if (!eval_) counts_[index(current_)][index(step)].poses++;
    return at(step).test_views[static_cast<std::size_t>(idx)].pose;
  }

  struct Counts {
    long images = 0;
    long poses = 0;
  };

  // reads of data_step's payload that happened while current_step was active
  Counts reads(int current_step, int data_step) const {
    return counts_[index(current_step)][index(data_step)];
  }

  std::size_t train_image_bytes() const {
    std::size_t total = 0;
    for (const auto& s : *steps_) {
      for (const auto& v : s.train_views) total += v.image.byte_size();
    }
    return total;
  }

 private:
  bool eval_ = false;

  const scene::StepDataset& at(int step) const {
    if (step < 0 || step >= step_count()) throw UsageError("dataset step out of range");
    return (*steps_)[static_cast<std::size_t>(step)];
  }
  std::size_t index(int step) const {
    if (step < 0 || step >= step_count()) throw UsageError("dataset step out of range");
    return static_cast<std::size_t>(step);
  }

  const std::vector<scene::StepDataset>* steps_;
  std::vector<std::vector<Counts>> counts_;
  int current_ = 0;
};

// ---------------------------------------------------------------------------
// View scoring and the uncertainty filter

// Mean composited uncertainty over a random pixel subset of one view,
// rendered with the fine pass. No gradients are recorded.
template <typename R>
double score_view(const field::FieldModel<R>& model, const geom::Pose6DoF& pose,
                  const geom::Intrinsics& K, int rays_per_view,
                  const render::RenderContext& ctx, Rng& rng) {
  std::vector<geom::PixelCoord> pixels;
  pixels.reserve(static_cast<std::size_t>(rays_per_view));
  for (int i = 0; i < rays_per_view; i++) {
    pixels.push_back({static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.height))),
                      static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.width)))});
  }
  auto results = render::render_view(model, pose, K, pixels, ctx, rng);
  double acc = 0.0;
  for (const auto& r : results) acc += static_cast<double>(r.uncertainty);
  return acc / static_cast<double>(results.size());
}

struct ScoredPose {
  geom::Pose6DoF pose;
  int source_step = 0;
  double score = 0.0;
  bool via_fallback = false;
};

struct FilterOutcome {
  std::vector<ScoredPose> accepted;
  int rejected = 0;
  int fallbacks = 0;
};

// Random-inquirer + filter loop: sample poses from stored ranges, keep those
// scoring strictly below beta_thr, stop at the batch quota or when the round
// budget runs out; the fallback fills (or skips) an empty batch.
template <typename R>
FilterOutcome filter_views(const field::FieldModel<R>& scoring_model,
                           const std::vector<geom::PoseRange>& ranges, const FilterConfig& cfg,
                           double beta_thr, const geom::Intrinsics& K,
                           const render::RenderContext& ctx, Rng& rng) {
  if (ranges.empty()) throw UsageError("filter_views: no stored pose ranges");
  FilterOutcome out;
  std::vector<ScoredPose> rejected_pool;
  for (int round = 0; round < cfg.max_resample_rounds; round++) {
    for (int c = 0; c < cfg.candidate_views_per_round; c++) {
      auto sampled = geom::sample_pose(ranges, rng);
      ScoredPose sp;
      sp.pose = sampled.pose;
      sp.source_step = sampled.step_index;
      sp.score = score_view(scoring_model, sp.pose, K, cfg.rays_per_candidate_view, ctx, rng);
      if (sp.score < beta_thr) {
        out.accepted.push_back(sp);
        if (static_cast<int>(out.accepted.size()) >= cfg.views_per_distill_batch) return out;
      } else {
        rejected_pool.push_back(sp);
        out.rejected++;
      }
    }
  }
  if (out.accepted.empty() && cfg.fallback == FilterConfig::Fallback::lowest_uncertainty &&
      !rejected_pool.empty()) {
    std::sort(rejected_pool.begin(), rejected_pool.end(),
              [](const ScoredPose& a, const ScoredPose& b) { return a.score < b.score; });
    const int take = std::min<int>(cfg.views_per_distill_batch,
                                   static_cast<int>(rejected_pool.size()));
    for (int i = 0; i < take; i++) {
      rejected_pool[static_cast<std::size_t>(i)].via_fallback = true;
      out.accepted.push_back(rejected_pool[static_cast<std::size_t>(i)]);
      out.fallbacks++;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Memory accounting

template <typename R>
MemoryReport memory_footprint(Strategy strategy, const TeacherBundle<R>* bundle,
                              std::size_t keyframe_count, std::size_t image_bytes,
                              std::size_t dataset_bytes) {
  MemoryReport m;
  m.strategy = strategy_name(strategy);
  switch (strategy) {
    case Strategy::unikd:
      if (bundle && bundle->teacher) {
        m.teacher_bytes = bundle->teacher->params_view().total_count() * sizeof(R);
      }
      if (bundle) m.ranges_bytes = bundle->pose_ranges.size() * 12 * sizeof(double);
      m.aux_bytes = m.teacher_bytes + m.ranges_bytes;
      break;
    case Strategy::keyframe_replay:
      m.keyframe_bytes = keyframe_count * image_bytes;
      m.aux_bytes = m.keyframe_bytes;
      break;
    case Strategy::naive:
      m.aux_bytes = 0;
      break;
    case Strategy::batch:
      m.dataset_bytes = dataset_bytes;
      m.aux_bytes = m.dataset_bytes;
      break;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Experiment runner

template <typename R>
struct TrainerConfig {
  TrainSchedule schedule;
  FilterConfig filter;
  objectives::LossConfig<R> loss;
  render::SamplingConfig sampling;
  diff::AdamConfig<R> adam;
  field::FieldConfig field_cfg;
  std::uint64_t seed = 0;
  // ray chunks evaluated in parallel; gradients merge in fixed chunk order,
  // so results are deterministic for a given chunk count
  int chunks = 1;

  void validate() const {
    schedule.validate();
    filter.validate(static_cast<double>(loss.beta_min));
    loss.validate();
    sampling.validate();
    field_cfg.validate();
    if (chunks < 1) throw ConfigError("trainer: chunks must be >= 1");
  }
};

template <typename R>
class ExperimentRunner {
 public:
  ExperimentRunner(const std::vector<scene::StepDataset>& steps, StrategyTag strategy,
                   TrainerConfig<R> cfg, std::filesystem::path out_dir = {},
                   std::string dataset_path = "", std::uint32_t dataset_id = 0)
      : audit_(steps),
        strategy_(strategy),
        cfg_(std::move(cfg)),
        out_dir_(std::move(out_dir)),
        dataset_path_(std::move(dataset_path)),
        dataset_id_(dataset_id) {
    strategy_.validate();
    cfg_.validate();
    ctx_.sampling = cfg_.sampling;
    ctx_.t_near = audit_.t_near();
    ctx_.t_far = audit_.t_far();
    ctx_.beta_min = static_cast<double>(cfg_.loss.beta_min);
    ctx_.background = audit_.background();
    if (strategy_.kind == Strategy::unikd && !cfg_.field_cfg.uncertainty_head_enabled) {
      throw ConfigError("unikd requires the uncertainty head");
    }
  }

  DatasetAudit& audit() { return audit_; }
  const render::RenderContext& render_ctx() const { return ctx_; }
  const field::FieldModel<R>& model() const { return *model_; }
  const std::optional<TeacherBundle<R>>& bundle() const { return bundle_; }

  // One incremental step: supervised/distill alternation per the schedule,
  // then the teacher snapshot and pose-range fold.
  StepStats train_one_step(int t) {
    if (strategy_.kind == Strategy::batch) {
      throw UsageError("train_one_step: batch strategy trains in one pass; use run()");
    }
    if (t != completed_steps_) throw UsageError("train_one_step: steps must run in order");
    audit_.set_current_step(t);

    if (!model_) {
      model_ = field::FieldModel<R>::init(cfg_.field_cfg, cfg_.seed);
    } else if (strategy_.kind == Strategy::unikd) {
      model_ = bundle_->teacher->init_student_from_teacher();
    }
    diff::AdamState<R> adam_state(model_->params());

    const std::uint64_t teacher_checksum_before =
        bundle_ && bundle_->teacher ? bundle_->teacher->checksum() : 0;

    StepStats stats;
    stats.step = t;
    Rng sup_rng = derive_rng(cfg_.seed, "sup", static_cast<std::uint64_t>(t));
    Rng dis_rng = derive_rng(cfg_.seed, "dis", static_cast<std::uint64_t>(t));

    const bool can_distill = strategy_.kind == Strategy::unikd && bundle_ &&
                             !bundle_->pose_ranges.empty();
    double beta_thr = cfg_.filter.fixed_beta_thr;
    if (can_distill && cfg_.filter.mode == FilterConfig::ThresholdMode::percentile) {
      beta_thr = calibrate_threshold(dis_rng);
    }
    stats.beta_thr = can_distill ? beta_thr : 0.0;

    for (int i = 0; i < cfg_.schedule.iters_per_step; i++) {
      const bool supervised = cfg_.schedule.is_supervised_slot(i) || !can_distill;
      if (supervised) {
        stats.last_sup_loss = supervised_iteration(t, sup_rng, adam_state);
        stats.sup_iters++;
      } else {
        if (distill_iteration(beta_thr, dis_rng, adam_state, stats)) {
          stats.dis_iters++;
        } else {
          stats.dis_skipped++;
        }
      }
    }

    if (bundle_ && bundle_->teacher) {
      if (bundle_->teacher->checksum() != teacher_checksum_before) {
        throw NumericError("teacher parameters changed during a training step");
      }
    }

    // fold this step's training poses; the only artifact kept besides the model
    std::vector<geom::Pose6DoF> poses;
    for (int v = 0; v < audit_.train_view_count(t); v++) poses.push_back(audit_.train_pose(t, v));
    TeacherBundle<R> next;
    next.pose_ranges = bundle_ ? bundle_->pose_ranges : std::vector<geom::PoseRange>{};
    next.pose_ranges.push_back(geom::fold_poses(poses, t));
    model_->set_step_trained_through(t);
    next.teacher = std::make_shared<const field::FieldModel<R>>(model_->snapshot_as_teacher());
    bundle_ = std::move(next);

    if (strategy_.kind == Strategy::keyframe_replay) absorb_keyframes(t);

    stats.model_checksum = model_->checksum();
    stats.memory_aux_bytes = current_memory().aux_bytes;
    completed_steps_ = t + 1;
    saved_steps_json_.push_back(stats.to_json());
    if (!out_dir_.empty()) save_checkpoint(t);
    return stats;
  }

  ExperimentRecord run(bool resume = false) {
    ExperimentRecord record;
    record.strategy = strategy_name(strategy_.kind);
    record.seed = cfg_.seed;
    record.dataset_path = dataset_path_;
    record.dataset_id = dataset_id_;

    timing_.clear();
    if (strategy_.kind == Strategy::batch) {
      const auto t0 = std::chrono::steady_clock::now();
      train_batch();
      timing_.push_back(seconds_since(t0));
      StepStats stats;
      stats.step = 0;
      stats.sup_iters = cfg_.schedule.iters_per_step * audit_.step_count();
      stats.model_checksum = model_->checksum();
      stats.memory_aux_bytes = current_memory().aux_bytes;
      record.steps.push_back(stats);
      // memory series for the chart: batch holds the union from the start
      for (int t = 1; t < audit_.step_count(); t++) {
        StepStats s;
        s.step = t;
        s.model_checksum = stats.model_checksum;
        s.memory_aux_bytes = stats.memory_aux_bytes;
        record.steps.push_back(s);
      }
    } else {
      int start = 0;
      if (resume && !out_dir_.empty()) start = load_checkpoint();
      for (int t = start; t < audit_.step_count(); t++) {
        const auto t0 = std::chrono::steady_clock::now();
        record.steps.push_back(train_one_step(t));
        timing_.push_back(seconds_since(t0));
      }
      if (resume && start > 0) {
        // stats for already-completed steps come from the saved record
        auto prior = load_saved_steps(start);
        record.steps.insert(record.steps.begin(), prior.begin(), prior.end());
      }
    }

    evaluate_final(record);
    record.memory = current_memory();
    if (!out_dir_.empty()) {
      save_record(record);
      save_timing();
    }
    return record;
  }

  // Final-model metrics on each step's test views.
  void evaluate_final(ExperimentRecord& record) {
    record.eval_test.clear();
    audit_.set_eval_mode(true);
    Rng eval_rng = derive_rng(cfg_.seed, "eval");
    double psnr_acc = 0.0, ssim_acc = 0.0;
    for (int t = 0; t < audit_.step_count(); t++) {
      EvalEntry e;
      e.step = t;
      double p = 0, s = 0;
      const int n = audit_.test_view_count(t);
      for (int v = 0; v < n; v++) {
        const Image rendered = render_model_view(audit_.test_pose(t, v), eval_rng);
        const Image& gt = audit_.test_image(t, v);
        p += metrics::psnr(rendered, gt);
        s += metrics::ssim(rendered, gt);
      }
      e.psnr = p / n;
      e.ssim = s / n;
      psnr_acc += e.psnr;
      ssim_acc += e.ssim;
      record.eval_test.push_back(e);
    }
    record.avg_psnr = psnr_acc / audit_.step_count();
    record.avg_ssim = ssim_acc / audit_.step_count();
    audit_.set_eval_mode(false);
  }

  Image render_model_view(const geom::Pose6DoF& pose, Rng& rng) const {
    const auto& K = audit_.intrinsics();
    auto results = render::render_view(*model_, pose, K, geom::all_pixels(K), ctx_, rng);
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

  MemoryReport current_memory() const {
    return memory_footprint<R>(strategy_.kind, bundle_ ? &*bundle_ : nullptr, kr_buffer_.size(),
                               image_bytes(), strategy_.kind == Strategy::batch
                                                  ? audit_.train_image_bytes()
                                                  : 0);
  }

  const std::vector<double>& step_timings() const { return timing_; }

 private:
  struct Keyframe {
    Image image;
    geom::Pose6DoF pose;
  };

  std::size_t image_bytes() const {
    const auto& K = audit_.intrinsics();
    return static_cast<std::size_t>(K.width) * K.height * 3 * sizeof(float);
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  struct RayBatch {
    std::vector<geom::Ray> rays;
    diff::Mat<R> colors;  // ground-truth or teacher targets
  };

  RayBatch sample_supervised_batch(int t, Rng& rng) {
    RayBatch batch;
    const auto& K = audit_.intrinsics();
    const int n = cfg_.schedule.rays_per_batch;
    batch.colors.resize(n, 3);

    // keyframe replay mixes the buffer into the candidate view list
    const int live_views = audit_.train_view_count(t);
    const int total_views = live_views + static_cast<int>(kr_buffer_.size());
    for (int i = 0; i < n; i++) {
      const int v = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(total_views)));
      const int row = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.height)));
      const int col = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.width)));
      const geom::Pose6DoF& pose =
          v < live_views ? audit_.train_pose(t, v) : kr_buffer_[static_cast<std::size_t>(v - live_views)].pose;
      const Image& image =
          v < live_views ? audit_.train_image(t, v) : kr_buffer_[static_cast<std::size_t>(v - live_views)].image;
      auto rays = geom::rays_for_view(pose, K, {{row, col}}, ctx_.t_near, ctx_.t_far);
      batch.rays.push_back(rays[0]);
      for (int ch = 0; ch < 3; ch++) batch.colors(i, ch) = static_cast<R>(image.at(row, col, ch));
    }
    return batch;
  }

  // Builds coarse+fine losses for a ray chunk on one graph.
  std::int32_t chunk_loss(diff::Graph<R>& g, const render::TwoPassNodes<R>& nodes,
                          const diff::Mat<R>& targets, bool heteroscedastic) {
    if (heteroscedastic) {
      const auto lc = objectives::supervised_loss(g, nodes.coarse.color, nodes.coarse.uncertainty,
                                                  targets, cfg_.loss);
      const auto lf = objectives::supervised_loss(g, nodes.fine.color, nodes.fine.uncertainty,
                                                  targets, cfg_.loss);
      return g.scale_add(R(1), lc, R(1), lf);
    }
    const auto lc = objectives::rgb_loss(g, nodes.coarse.color, targets, cfg_.loss.reduction);
    const auto lf = objectives::rgb_loss(g, nodes.fine.color, targets, cfg_.loss.reduction);
    return g.scale_add(R(1), lc, R(1), lf);
  }

  // Parallel forward/backward over ray chunks. Each chunk works on its own
  // model copy and rng stream; gradients and the loss recombine in chunk
  // order with mean-reduction weights, then one Adam step runs on the master.
  double chunked_fwd_bwd(const std::vector<geom::Ray>& rays, const diff::Mat<R>& targets,
                         bool heteroscedastic, Rng& rng, diff::AdamState<R>& adam_state) {
    const int n_chunks = std::min<int>(cfg_.chunks, static_cast<int>(rays.size()));
    const auto total = static_cast<Eigen::Index>(rays.size());
    std::vector<std::uint64_t> sub_seeds;
    for (int c = 0; c < n_chunks; c++) sub_seeds.push_back(rng.next_u64());

    std::vector<field::FieldModel<R>> locals(static_cast<std::size_t>(n_chunks), *model_);
    std::vector<double> losses(static_cast<std::size_t>(n_chunks), 0.0);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(n_chunks), 0);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));

    auto work = [&](int c) {
      try {
        const Eigen::Index begin = total * c / n_chunks;
        const Eigen::Index end = total * (c + 1) / n_chunks;
        counts[static_cast<std::size_t>(c)] = end - begin;
        std::span<const geom::Ray> chunk(rays.data() + begin, static_cast<std::size_t>(end - begin));
        const diff::Mat<R> chunk_targets = targets.middleRows(begin, end - begin);
        Rng chunk_rng(sub_seeds[static_cast<std::size_t>(c)]);
        auto& local = locals[static_cast<std::size_t>(c)];
        local.params().zero_grads();
        diff::Graph<R> g;
        auto nodes = render::render_rays_graph<R>(g, local, chunk, ctx_, chunk_rng, true);
        const auto loss = chunk_loss(g, nodes, chunk_targets, heteroscedastic);
        losses[static_cast<std::size_t>(c)] = static_cast<double>(g.scalar(loss));
        g.backward(loss);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    };

    std::vector<std::thread> pool;
    for (int c = 1; c < n_chunks; c++) pool.emplace_back(work, c);
    work(0);
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }

    model_->params().zero_grads();
    auto& master = model_->params().entries();
    double loss_value = 0.0;
    for (int c = 0; c < n_chunks; c++) {
      const R w = cfg_.loss.reduction == objectives::Reduction::mean
                      ? static_cast<R>(counts[static_cast<std::size_t>(c)]) / static_cast<R>(total)
                      : R(1);
      const auto& local = locals[static_cast<std::size_t>(c)].params_view().entries();
      for (std::size_t e = 0; e < master.size(); e++) {
        master[e].grad += w * local[e].grad;
      }
      loss_value += static_cast<double>(w) * losses[static_cast<std::size_t>(c)];
    }
    diff::adam_step(model_->params(), adam_state, cfg_.adam);
    return loss_value;
  }

  // Fine-pass colors of a frozen model over a ray batch, chunk-parallel.
  diff::Mat<R> render_colors(const field::FieldModel<R>& frozen,
                             const std::vector<geom::Ray>& rays, Rng& rng) {
    const int n_chunks = std::min<int>(cfg_.chunks, static_cast<int>(rays.size()));
    const auto total = static_cast<Eigen::Index>(rays.size());
    std::vector<std::uint64_t> sub_seeds;
    for (int c = 0; c < n_chunks; c++) sub_seeds.push_back(rng.next_u64());

    diff::Mat<R> colors(total, 3);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n_chunks));
    auto work = [&](int c) {
      try {
        const Eigen::Index begin = total * c / n_chunks;
        const Eigen::Index end = total * (c + 1) / n_chunks;
        std::span<const geom::Ray> chunk(rays.data() + begin, static_cast<std::size_t>(end - begin));
        Rng chunk_rng(sub_seeds[static_cast<std::size_t>(c)]);
        diff::Graph<R> g;
        auto nodes = render::render_rays_graph<R>(g, frozen, chunk, ctx_, chunk_rng, false);
        colors.middleRows(begin, end - begin) = g.value(nodes.fine.color);
      } catch (...) {
        errors[static_cast<std::size_t>(c)] = std::current_exception();
      }
    };
    std::vector<std::thread> pool;
    for (int c = 1; c < n_chunks; c++) pool.emplace_back(work, c);
    work(0);
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    return colors;
  }

  double supervised_iteration(int t, Rng& rng, diff::AdamState<R>& adam_state) {
    auto batch = sample_supervised_batch(t, rng);
    return chunked_fwd_bwd(batch.rays, batch.colors, strategy_.kind == Strategy::unikd, rng,
                           adam_state);
  }

  double calibrate_threshold(Rng& rng) {
    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(cfg_.filter.calibration_poses));
    for (int i = 0; i < cfg_.filter.calibration_poses; i++) {
      auto sampled = geom::sample_pose(bundle_->pose_ranges, rng);
      scores.push_back(score_view(*model_, sampled.pose, audit_.intrinsics(),
                                  cfg_.filter.rays_per_candidate_view, ctx_, rng));
    }
    std::sort(scores.begin(), scores.end());
    const auto idx = std::min(scores.size() - 1,
                              static_cast<std::size_t>(cfg_.filter.percentile * scores.size()));
    return std::max(scores[idx], ctx_.beta_min * (1.0 + 1e-9));
  }

  bool distill_iteration(double beta_thr, Rng& rng, diff::AdamState<R>& adam_state,
                         StepStats& stats) {
    const field::FieldModel<R>& scorer =
        cfg_.filter.use_teacher_uncertainty ? *bundle_->teacher : *model_;
    auto outcome = filter_views(scorer, bundle_->pose_ranges, cfg_.filter, beta_thr,
                                audit_.intrinsics(), ctx_, rng);
    stats.filter_accepted += static_cast<int>(outcome.accepted.size()) - outcome.fallbacks;
    stats.filter_rejected += outcome.rejected;
    stats.filter_fallbacks += outcome.fallbacks;
    if (outcome.accepted.empty()) return false;

    // spread the ray budget across the accepted views
    const auto& K = audit_.intrinsics();
    const int n_views = static_cast<int>(outcome.accepted.size());
    const int n_rays = cfg_.schedule.rays_per_batch;
    std::vector<geom::Ray> rays;
    rays.reserve(static_cast<std::size_t>(n_rays));
    for (int i = 0; i < n_rays; i++) {
      const auto& sp = outcome.accepted[static_cast<std::size_t>(i % n_views)];
      const int row = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.height)));
      const int col = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.width)));
      auto r = geom::rays_for_view(sp.pose, K, {{row, col}}, ctx_.t_near, ctx_.t_far);
      rays.push_back(r[0]);
    }

    // teacher answers once per batch, outside the gradient path
    const diff::Mat<R> teacher_colors = render_colors(*bundle_->teacher, rays, rng);
    chunked_fwd_bwd(rays, teacher_colors, /*heteroscedastic=*/true, rng, adam_state);
    return true;
  }

  void train_batch() {
    audit_.set_current_step(audit_.step_count() - 1);
    model_ = field::FieldModel<R>::init(cfg_.field_cfg, cfg_.seed);
    diff::AdamState<R> adam_state(model_->params());
    Rng rng = derive_rng(cfg_.seed, "batch-train");
    const auto& K = audit_.intrinsics();
    const int total = cfg_.schedule.iters_per_step * audit_.step_count();

    std::vector<std::pair<int, int>> views;  // (step, view index)
    for (int t = 0; t < audit_.step_count(); t++) {
      for (int v = 0; v < audit_.train_view_count(t); v++) views.push_back({t, v});
    }
    for (int i = 0; i < total; i++) {
      const int n = cfg_.schedule.rays_per_batch;
      RayBatch batch;
      batch.colors.resize(n, 3);
      for (int r = 0; r < n; r++) {
        const auto& [vt, vv] = views[rng.uniform_index(views.size())];
        const int row = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.height)));
        const int col = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(K.width)));
        auto rs = geom::rays_for_view(audit_.train_pose(vt, vv), K, {{row, col}}, ctx_.t_near,
                                      ctx_.t_far);
        batch.rays.push_back(rs[0]);
        const Image& im = audit_.train_image(vt, vv);
        for (int ch = 0; ch < 3; ch++) batch.colors(r, ch) = static_cast<R>(im.at(row, col, ch));
      }
      chunked_fwd_bwd(batch.rays, batch.colors, /*heteroscedastic=*/false, rng, adam_state);
    }
    model_->set_step_trained_through(audit_.step_count() - 1);
  }

  void absorb_keyframes(int t) {
    // first frame plus evenly spaced frames from this step
    const int n_views = audit_.train_view_count(t);
    const int want = std::min(strategy_.kr_keyframes_per_step, n_views);
    for (int k = 0; k < want; k++) {
      const int idx = want == 1 ? 0 : static_cast<int>(std::lround(
                                          k * static_cast<double>(n_views - 1) / (want - 1)));
      Keyframe kf;
      kf.image = audit_.train_image(t, idx);
      kf.pose = audit_.train_pose(t, idx);
      kr_buffer_.push_back(std::move(kf));
    }
  }

  // ---- checkpointing ----

  std::filesystem::path step_stem(int t) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "step_%02d_model", t);
    return out_dir_ / buf;
  }

  void save_checkpoint(int t) {
    std::filesystem::create_directories(out_dir_);
    model_->save(step_stem(t));

    json ranges = json::array();
    for (const auto& r : bundle_->pose_ranges) {
      json e;
      e["step"] = r.step_index;
      json vals = json::array();
      for (int a = 0; a < 6; a++) {
        vals.push_back(r.lo[static_cast<std::size_t>(a)]);
        vals.push_back(r.hi[static_cast<std::size_t>(a)]);
      }
      e["range"] = vals;
      ranges.push_back(e);
    }
    json progress;
    progress["completed_steps"] = t + 1;
    progress["pose_ranges"] = ranges;
    progress["steps_stats"] = saved_steps_json_;
    std::ofstream os(out_dir_ / "progress.json");
    os << progress.dump(2) << "\n";

    if (strategy_.kind == Strategy::keyframe_replay) {
      std::filesystem::create_directories(out_dir_ / "kr_buffer");
      json buf = json::array();
      for (std::size_t i = 0; i < kr_buffer_.size(); i++) {
        char name[32];
        std::snprintf(name, sizeof(name), "kf_%04zu.f32rgb", i);
        write_f32rgb(out_dir_ / "kr_buffer" / name, kr_buffer_[i].image);
        json e;
        e["file"] = name;
        const auto& p = kr_buffer_[i].pose;
        e["pose"] = json::array({p.x, p.y, p.z, p.alpha, p.beta, p.gamma});
        buf.push_back(e);
      }
      std::ofstream bs(out_dir_ / "kr_buffer" / "buffer.json");
      bs << buf.dump(2) << "\n";
    }
  }

  int load_checkpoint() {
    const auto progress_path = out_dir_ / "progress.json";
    std::ifstream is(progress_path);
    if (!is) return 0;
    json progress;
    try {
      is >> progress;
    } catch (const json::exception& e) {
      throw DataError("malformed progress file: " + std::string(e.what()));
    }
    const int done = progress.at("completed_steps").get<int>();
    if (done < 1) return 0;

    model_ = field::FieldModel<R>::load(step_stem(done - 1));
    TeacherBundle<R> bundle;
    bundle.teacher = std::make_shared<const field::FieldModel<R>>(model_->snapshot_as_teacher());
    for (const auto& e : progress.at("pose_ranges")) {
      geom::PoseRange r;
      r.step_index = e.at("step").get<int>();
      const auto vals = e.at("range");
      for (int a = 0; a < 6; a++) {
        r.lo[static_cast<std::size_t>(a)] = vals[2 * a].get<double>();
        r.hi[static_cast<std::size_t>(a)] = vals[2 * a + 1].get<double>();
      }
      bundle.pose_ranges.push_back(r);
    }
    bundle_ = std::move(bundle);
    saved_steps_json_ = progress.at("steps_stats");

    if (strategy_.kind == Strategy::keyframe_replay) {
      std::ifstream bs(out_dir_ / "kr_buffer" / "buffer.json");
      if (bs) {
        json buf;
        bs >> buf;
        const auto& K = audit_.intrinsics();
        for (const auto& e : buf) {
          Keyframe kf;
          kf.image = read_f32rgb(out_dir_ / "kr_buffer" / e.at("file").get<std::string>(),
                                 K.width, K.height);
          const auto p = e.at("pose");
          kf.pose = geom::Pose6DoF{p[0].get<double>(), p[1].get<double>(), p[2].get<double>(),
                                   p[3].get<double>(), p[4].get<double>(), p[5].get<double>()};
          kr_buffer_.push_back(std::move(kf));
        }
      }
    }
    completed_steps_ = done;
    return done;
  }

  std::vector<StepStats> load_saved_steps(int count) {
    std::vector<StepStats> out;
    for (int i = 0; i < count && i < static_cast<int>(saved_steps_json_.size()); i++) {
      out.push_back(StepStats::from_json(saved_steps_json_[static_cast<std::size_t>(i)]));
    }
    return out;
  }

  void save_record(const ExperimentRecord& record) {
    std::ofstream os(out_dir_ / "record.json");
    if (!os) throw DataError("cannot write record: " + (out_dir_ / "record.json").string());
    os << record.to_json().dump(2) << "\n";
  }

  void save_timing() {
    json t;
    t["per_step_seconds"] = timing_;
    double total = 0;
    for (double s : timing_) total += s;
    t["total_seconds"] = total;
    std::ofstream os(out_dir_ / "timing.json");
    os << t.dump(2) << "\n";
  }

  DatasetAudit audit_;
  StrategyTag strategy_;
  TrainerConfig<R> cfg_;
  render::RenderContext ctx_;
  std::filesystem::path out_dir_;
  std::string dataset_path_;
  std::uint32_t dataset_id_ = 0;

  std::optional<field::FieldModel<R>> model_;
  std::optional<TeacherBundle<R>> bundle_;
  std::vector<Keyframe> kr_buffer_;
  std::vector<double> timing_;
  json saved_steps_json_ = json::array();
  int completed_steps_ = 0;
};

}  // namespace incnerf::train
