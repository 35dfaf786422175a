#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "incnerf/continual.hpp"
#include "incnerf/errors.hpp"
#include "incnerf/field.hpp"
#include "incnerf/objectives.hpp"
#include "incnerf/renderer.hpp"
#include "incnerf/scene.hpp"

namespace incnerf::config {

using json = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                                const std::string& context) {
  if (!j.is_object()) throw ConfigError("config: " + context + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("config: unknown key '" + context + "/" + key + "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for key '" + key + "'");
  }
}

}  // namespace detail

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string precision = "f64";
  int threads = 0;  // 0 = library default
  std::string out = "runs/default";
  std::string dataset = "data/default";

  // generation
  std::string scene_preset = "default";
  std::optional<json> scene_json;  // explicit primitive list overrides the preset
  scene::TrajectorySpec trajectory;
  scene::DatasetParams dataset_params;

  // training
  std::vector<std::string> strategies{"naive", "unikd", "batch"};
  int kr_keyframes_per_step = 2;
  train::TrainSchedule schedule{1, 1, 500, 512};
  train::FilterConfig filter;
  objectives::LossConfig<double> loss;
  render::SamplingConfig sampling{32, 32, true};
  field::FieldConfig field;
  diff::AdamConfig<double> optimizer;

  void validate() const {
    if (precision != "f64" && precision != "f32") {
      throw ConfigError("config: precision must be 'f64' or 'f32'");
    }
    if (threads < 0) throw ConfigError("config: threads must be >= 0");
    if (dataset_params.test_fraction < 0.0 || dataset_params.test_fraction >= 1.0) {
      throw ConfigError("config: invalid value for key 'dataset_params/test_fraction'");
    }
    if (strategies.empty()) throw ConfigError("config: strategies must not be empty");
    for (const auto& s : strategies) train::strategy_from_name(s);
    trajectory.validate();
    schedule.validate();
    filter.validate(static_cast<double>(loss.beta_min));
    loss.validate();
    sampling.validate();
    field.validate();
  }

  json to_json() const {
    json j;
    j["seed"] = seed;
    j["precision"] = precision;
    j["threads"] = threads;
    j["out"] = out;
    j["dataset"] = dataset;
    if (scene_json) {
      j["scene"] = *scene_json;
    } else {
      j["scene"] = json{{"preset", scene_preset}};
    }
    j["trajectory"] = {
        {"kind", trajectory.kind == scene::TrajectorySpec::Kind::orbit ? "orbit" : "sweep"},
        {"n_views", trajectory.n_views},
        {"n_steps", trajectory.n_steps},
        {"radius", trajectory.radius},
        {"height", trajectory.height},
        {"jitter", json::array({trajectory.jitter[0], trajectory.jitter[1], trajectory.jitter[2]})},
        {"sweep_span", trajectory.sweep_span}};
    j["dataset_params"] = {{"width", dataset_params.intrinsics.width},
                           {"height", dataset_params.intrinsics.height},
                           {"fx", dataset_params.intrinsics.fx},
                           {"fy", dataset_params.intrinsics.fy},
                           {"cx", dataset_params.intrinsics.cx},
                           {"cy", dataset_params.intrinsics.cy},
                           {"t_near", dataset_params.t_near},
                           {"t_far", dataset_params.t_far},
                           {"test_fraction", dataset_params.test_fraction}};
    j["strategies"] = strategies;
    j["kr_keyframes_per_step"] = kr_keyframes_per_step;
    j["schedule"] = {{"sup_iters", schedule.sup_iters},
                     {"dis_iters", schedule.dis_iters},
                     {"iters_per_step", schedule.iters_per_step},
                     {"rays_per_batch", schedule.rays_per_batch}};
    j["filter"] = {
        {"mode", filter.mode == train::FilterConfig::ThresholdMode::percentile ? "percentile"
                                                                               : "fixed"},
        {"fixed_beta_thr", filter.fixed_beta_thr},
        {"percentile", filter.percentile},
        {"calibration_poses", filter.calibration_poses},
        {"candidate_views_per_round", filter.candidate_views_per_round},
        {"max_resample_rounds", filter.max_resample_rounds},
        {"rays_per_candidate_view", filter.rays_per_candidate_view},
        {"views_per_distill_batch", filter.views_per_distill_batch},
        {"fallback", filter.fallback == train::FilterConfig::Fallback::lowest_uncertainty
                         ? "lowest-uncertainty"
                         : "skip-distill"},
        {"use_teacher_uncertainty", filter.use_teacher_uncertainty}};
    j["loss"] = {{"eta", loss.eta},
                 {"beta_min", loss.beta_min},
                 {"reduction", loss.reduction == objectives::Reduction::mean ? "mean" : "sum"}};
    j["sampling"] = {{"n_coarse", sampling.n_coarse},
                     {"n_fine", sampling.n_fine},
                     {"stratified", sampling.stratified}};
    json skip;
    if (field.skip_layer_index) skip = *field.skip_layer_index;
    j["field"] = {{"trunk_depth", field.trunk_depth},
                  {"trunk_width", field.trunk_width},
                  {"head_width", field.head_width},
                  {"pos_enc_levels", field.pos_enc_levels},
                  {"dir_enc_levels", field.dir_enc_levels},
                  {"skip_layer_index", skip},
                  {"uncertainty_head_enabled", field.uncertainty_head_enabled}};
    j["optimizer"] = {{"lr", optimizer.lr},
                      {"beta1", optimizer.beta1},
                      {"beta2", optimizer.beta2},
                      {"eps", optimizer.eps}};
    return j;
  }

  static ExperimentConfig from_json(const json& j) {
    detail::reject_unknown_keys(
        j,
        {"seed", "precision", "threads", "out", "dataset", "scene", "trajectory",
         "dataset_params", "strategies", "kr_keyframes_per_step", "schedule", "filter", "loss",
         "sampling", "field", "optimizer"},
        "");
    ExperimentConfig c;
    c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
    c.precision = detail::get_or<std::string>(j, "precision", c.precision);
    c.threads = detail::get_or<int>(j, "threads", c.threads);
    c.out = detail::get_or<std::string>(j, "out", c.out);
    c.dataset = detail::get_or<std::string>(j, "dataset", c.dataset);

    if (j.contains("scene")) {
      const auto& sj = j.at("scene");
      if (sj.contains("preset")) {
        detail::reject_unknown_keys(sj, {"preset"}, "scene");
        c.scene_preset = sj.at("preset").get<std::string>();
        if (c.scene_preset != "default") {
          throw ConfigError("config: unknown scene preset '" + c.scene_preset + "'");
        }
      } else {
        detail::reject_unknown_keys(sj, {"background", "primitives"}, "scene");
        c.scene_json = sj;
      }
    }

    if (j.contains("trajectory")) {
      const auto& tj = j.at("trajectory");
      detail::reject_unknown_keys(
          tj, {"kind", "n_views", "n_steps", "radius", "height", "jitter", "sweep_span"},
          "trajectory");
      const auto kind = detail::get_or<std::string>(tj, "kind", "orbit");
      if (kind == "orbit") {
        c.trajectory.kind = scene::TrajectorySpec::Kind::orbit;
      } else if (kind == "sweep") {
        c.trajectory.kind = scene::TrajectorySpec::Kind::sweep;
      } else {
        throw ConfigError("config: trajectory/kind must be 'orbit' or 'sweep'");
      }
      c.trajectory.n_views = detail::get_or<int>(tj, "n_views", c.trajectory.n_views);
      c.trajectory.n_steps = detail::get_or<int>(tj, "n_steps", c.trajectory.n_steps);
      c.trajectory.radius = detail::get_or<double>(tj, "radius", c.trajectory.radius);
      c.trajectory.height = detail::get_or<double>(tj, "height", c.trajectory.height);
      c.trajectory.jitter =
          detail::get_or<std::array<double, 3>>(tj, "jitter", c.trajectory.jitter);
      c.trajectory.sweep_span = detail::get_or<double>(tj, "sweep_span", c.trajectory.sweep_span);
    }

    if (j.contains("dataset_params")) {
      const auto& dj = j.at("dataset_params");
      detail::reject_unknown_keys(
          dj, {"width", "height", "fx", "fy", "cx", "cy", "t_near", "t_far", "test_fraction"},
          "dataset_params");
      auto& K = c.dataset_params.intrinsics;
      K.width = detail::get_or<int>(dj, "width", K.width);
      K.height = detail::get_or<int>(dj, "height", K.height);
      K.fx = detail::get_or<double>(dj, "fx", K.fx);
      K.fy = detail::get_or<double>(dj, "fy", K.fy);
      K.cx = detail::get_or<double>(dj, "cx", static_cast<double>(K.width) / 2.0);
      K.cy = detail::get_or<double>(dj, "cy", static_cast<double>(K.height) / 2.0);
      c.dataset_params.t_near = detail::get_or<double>(dj, "t_near", c.dataset_params.t_near);
      c.dataset_params.t_far = detail::get_or<double>(dj, "t_far", c.dataset_params.t_far);
      c.dataset_params.test_fraction =
          detail::get_or<double>(dj, "test_fraction", c.dataset_params.test_fraction);
    }

    c.strategies = detail::get_or<std::vector<std::string>>(j, "strategies", c.strategies);
    c.kr_keyframes_per_step =
        detail::get_or<int>(j, "kr_keyframes_per_step", c.kr_keyframes_per_step);

    if (j.contains("schedule")) {
      const auto& sj = j.at("schedule");
      detail::reject_unknown_keys(sj, {"sup_iters", "dis_iters", "iters_per_step", "rays_per_batch"},
                                  "schedule");
      c.schedule.sup_iters = detail::get_or<int>(sj, "sup_iters", c.schedule.sup_iters);
      c.schedule.dis_iters = detail::get_or<int>(sj, "dis_iters", c.schedule.dis_iters);
      c.schedule.iters_per_step =
          detail::get_or<int>(sj, "iters_per_step", c.schedule.iters_per_step);
      c.schedule.rays_per_batch =
          detail::get_or<int>(sj, "rays_per_batch", c.schedule.rays_per_batch);
    }

    if (j.contains("filter")) {
      const auto& fj = j.at("filter");
      detail::reject_unknown_keys(
          fj,
          {"mode", "fixed_beta_thr", "percentile", "calibration_poses",
           "candidate_views_per_round", "max_resample_rounds", "rays_per_candidate_view",
           "views_per_distill_batch", "fallback", "use_teacher_uncertainty"},
          "filter");
      const auto mode = detail::get_or<std::string>(fj, "mode", "percentile");
      if (mode == "percentile") {
        c.filter.mode = train::FilterConfig::ThresholdMode::percentile;
      } else if (mode == "fixed") {
        c.filter.mode = train::FilterConfig::ThresholdMode::fixed;
      } else {
        throw ConfigError("config: filter/mode must be 'percentile' or 'fixed'");
      }
      c.filter.fixed_beta_thr = detail::get_or<double>(fj, "fixed_beta_thr", c.filter.fixed_beta_thr);
      c.filter.percentile = detail::get_or<double>(fj, "percentile", c.filter.percentile);
      c.filter.calibration_poses =
          detail::get_or<int>(fj, "calibration_poses", c.filter.calibration_poses);
      c.filter.candidate_views_per_round =
          detail::get_or<int>(fj, "candidate_views_per_round", c.filter.candidate_views_per_round);
      c.filter.max_resample_rounds =
          detail::get_or<int>(fj, "max_resample_rounds", c.filter.max_resample_rounds);
      c.filter.rays_per_candidate_view =
          detail::get_or<int>(fj, "rays_per_candidate_view", c.filter.rays_per_candidate_view);
      c.filter.views_per_distill_batch =
          detail::get_or<int>(fj, "views_per_distill_batch", c.filter.views_per_distill_batch);
      const auto fb = detail::get_or<std::string>(fj, "fallback", "lowest-uncertainty");
      if (fb == "lowest-uncertainty") {
        c.filter.fallback = train::FilterConfig::Fallback::lowest_uncertainty;
      } else if (fb == "skip-distill") {
        c.filter.fallback = train::FilterConfig::Fallback::skip_distill;
      } else {
        throw ConfigError("config: filter/fallback must be 'lowest-uncertainty' or 'skip-distill'");
      }
      c.filter.use_teacher_uncertainty =
          detail::get_or<bool>(fj, "use_teacher_uncertainty", c.filter.use_teacher_uncertainty);
    }

    if (j.contains("loss")) {
      const auto& lj = j.at("loss");
      detail::reject_unknown_keys(lj, {"eta", "beta_min", "reduction"}, "loss");
      c.loss.eta = detail::get_or<double>(lj, "eta", c.loss.eta);
      c.loss.beta_min = detail::get_or<double>(lj, "beta_min", c.loss.beta_min);
      const auto red = detail::get_or<std::string>(lj, "reduction", "mean");
      if (red == "mean") {
        c.loss.reduction = objectives::Reduction::mean;
      } else if (red == "sum") {
        c.loss.reduction = objectives::Reduction::sum;
      } else {
        throw ConfigError("config: loss/reduction must be 'mean' or 'sum'");
      }
    }

    if (j.contains("sampling")) {
      const auto& sj = j.at("sampling");
      detail::reject_unknown_keys(sj, {"n_coarse", "n_fine", "stratified"}, "sampling");
      c.sampling.n_coarse = detail::get_or<int>(sj, "n_coarse", c.sampling.n_coarse);
      c.sampling.n_fine = detail::get_or<int>(sj, "n_fine", c.sampling.n_fine);
      c.sampling.stratified = detail::get_or<bool>(sj, "stratified", c.sampling.stratified);
    }

    if (j.contains("field")) {
      const auto& fj = j.at("field");
      detail::reject_unknown_keys(fj,
                                  {"trunk_depth", "trunk_width", "head_width", "pos_enc_levels",
                                   "dir_enc_levels", "skip_layer_index",
                                   "uncertainty_head_enabled"},
                                  "field");
      c.field.trunk_depth = detail::get_or<int>(fj, "trunk_depth", c.field.trunk_depth);
      c.field.trunk_width = detail::get_or<int>(fj, "trunk_width", c.field.trunk_width);
      c.field.head_width = detail::get_or<int>(fj, "head_width", c.field.head_width);
      c.field.pos_enc_levels = detail::get_or<int>(fj, "pos_enc_levels", c.field.pos_enc_levels);
      c.field.dir_enc_levels = detail::get_or<int>(fj, "dir_enc_levels", c.field.dir_enc_levels);
      if (fj.contains("skip_layer_index") && !fj.at("skip_layer_index").is_null()) {
        c.field.skip_layer_index = fj.at("skip_layer_index").get<int>();
      }
      c.field.uncertainty_head_enabled =
          detail::get_or<bool>(fj, "uncertainty_head_enabled", c.field.uncertainty_head_enabled);
    }

    if (j.contains("optimizer")) {
      const auto& oj = j.at("optimizer");
      detail::reject_unknown_keys(oj, {"lr", "beta1", "beta2", "eps"}, "optimizer");
      c.optimizer.lr = detail::get_or<double>(oj, "lr", c.optimizer.lr);
      c.optimizer.beta1 = detail::get_or<double>(oj, "beta1", c.optimizer.beta1);
      c.optimizer.beta2 = detail::get_or<double>(oj, "beta2", c.optimizer.beta2);
      c.optimizer.eps = detail::get_or<double>(oj, "eps", c.optimizer.eps);
    }

    c.validate();
    return c;
  }

  static ExperimentConfig from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError("malformed config " + path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  scene::SceneSpec resolve_scene() const {
    if (!scene_json) return scene::make_default_scene();
    scene::SceneSpec spec;
    const auto& sj = *scene_json;
    spec.background = detail::get_or<std::array<double, 3>>(sj, "background", {0, 0, 0});
    if (!sj.contains("primitives") || !sj.at("primitives").is_array()) {
      throw ConfigError("config: scene/primitives must be an array");
    }
    for (const auto& pj : sj.at("primitives")) {
      detail::reject_unknown_keys(
          pj, {"type", "center", "radius", "min", "max", "density", "albedo"},
          "scene/primitives[]");
      scene::Primitive p;
      const auto type = detail::get_or<std::string>(pj, "type", "sphere");
      if (type == "sphere") {
        p.kind = scene::Primitive::Kind::sphere;
        const auto c = detail::get_or<std::array<double, 3>>(pj, "center", {0, 0, 0});
        p.center = geom::Vec3(c[0], c[1], c[2]);
        p.radius = detail::get_or<double>(pj, "radius", 0.25);
      } else if (type == "box") {
        p.kind = scene::Primitive::Kind::box;
        const auto lo = detail::get_or<std::array<double, 3>>(pj, "min", {0, 0, 0});
        const auto hi = detail::get_or<std::array<double, 3>>(pj, "max", {1, 1, 1});
        p.box_min = geom::Vec3(lo[0], lo[1], lo[2]);
        p.box_max = geom::Vec3(hi[0], hi[1], hi[2]);
      } else {
        throw ConfigError("config: primitive type must be 'sphere' or 'box'");
      }
      p.density = detail::get_or<double>(pj, "density", 1.0);
      p.albedo = detail::get_or<std::array<double, 3>>(pj, "albedo", {1, 1, 1});
      spec.primitives.push_back(p);
    }
    spec.validate();
    return spec;
  }

  template <typename R>
  train::TrainerConfig<R> trainer_config() const {
    train::TrainerConfig<R> tc;
    tc.schedule = schedule;
    tc.filter = filter;
    tc.loss.eta = static_cast<R>(loss.eta);
    tc.loss.beta_min = static_cast<R>(loss.beta_min);
    tc.loss.reduction = loss.reduction;
    tc.sampling = sampling;
    tc.adam.lr = static_cast<R>(optimizer.lr);
    tc.adam.beta1 = static_cast<R>(optimizer.beta1);
    tc.adam.beta2 = static_cast<R>(optimizer.beta2);
    tc.adam.eps = static_cast<R>(optimizer.eps);
    tc.field_cfg = field;
    tc.seed = seed;
    tc.chunks = threads > 0 ? threads : 1;
    return tc;
  }
};

}  // namespace incnerf::config
