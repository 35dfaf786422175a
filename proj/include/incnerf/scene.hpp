#pragma once

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "incnerf/errors.hpp"
#include "incnerf/geometry.hpp"
#include "incnerf/image.hpp"
#include "incnerf/rng.hpp"

namespace incnerf::scene {

using json = nlohmann::ordered_json;
using geom::Vec3;

// Emissive-absorptive primitives: constant density and albedo inside, exactly
// the medium the volume renderer integrates, so ground truth is closed-form.
struct Primitive {
  enum class Kind { sphere, box } kind = Kind::sphere;
  Vec3 center = Vec3::Zero();   // sphere
  double radius = 0.0;          // sphere
  Vec3 box_min = Vec3::Zero();  // box
  Vec3 box_max = Vec3::Zero();  // box
  double density = 1.0;
  std::array<double, 3> albedo{1, 1, 1};
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  std::array<double, 3> background{0, 0, 0};
  Vec3 bounds_min = Vec3(-1, -1, -1);
  Vec3 bounds_max = Vec3(1, 1, 1);

  void validate() const {
    for (const auto& p : primitives) {
      if (p.density < 0) throw ConfigError("scene: primitive density must be >= 0");
      for (double a : p.albedo) {
        if (a < 0 || a > 1) throw ConfigError("scene: albedo must be in [0,1]");
      }
      if (p.kind == Primitive::Kind::sphere && p.radius <= 0) {
        throw ConfigError("scene: sphere radius must be > 0");
      }
      if (p.kind == Primitive::Kind::box &&
          ((p.box_max - p.box_min).array() <= 0).any()) {
        throw ConfigError("scene: box extent must be positive");
      }
    }
  }
};

namespace detail {

struct Interval {
  double t0 = 0, t1 = 0;
  const Primitive* prim = nullptr;
};

inline std::optional<std::pair<double, double>> intersect(const Primitive& p,
                                                          const geom::Ray& ray) {
  if (p.kind == Primitive::Kind::sphere) {
    const Vec3 oc = ray.origin - p.center;
    const double b = oc.dot(ray.dir);
    const double c = oc.squaredNorm() - p.radius * p.radius;
    const double disc = b * b - c;
    if (disc <= 0) return std::nullopt;
    const double s = std::sqrt(disc);
    return std::make_pair(-b - s, -b + s);
  }
  // slab test
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; a++) {
    const double o = ray.origin[a], d = ray.dir[a];
    if (std::abs(d) < 1e-15) {
      if (o < p.box_min[a] || o > p.box_max[a]) return std::nullopt;
      continue;
    }
    double ta = (p.box_min[a] - o) / d;
    double tb = (p.box_max[a] - o) / d;
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 >= t1) return std::nullopt;
  return std::make_pair(t0, t1);
}

}  // namespace detail

// Exact transmittance integration of the piecewise-constant medium along the
// full ray. Overlapping primitives superpose: sigma adds, emission is the
// density-weighted albedo mix.
inline std::array<double, 3> trace_ray_gt(const SceneSpec& scene, const geom::Ray& ray) {
  std::vector<detail::Interval> spans;
  for (const auto& p : scene.primitives) {
    auto hit = detail::intersect(p, ray);
    if (!hit) continue;
    const double t0 = std::max(hit->first, 0.0);
    const double t1 = hit->second;
    if (t1 <= t0 || p.density <= 0.0) continue;
    spans.push_back({t0, t1, &p});
  }

  std::vector<double> cuts;
  cuts.reserve(spans.size() * 2);
  for (const auto& s : spans) {
    cuts.push_back(s.t0);
    cuts.push_back(s.t1);
  }
  std::sort(cuts.begin(), cuts.end());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

  std::array<double, 3> color{0, 0, 0};
  double transmittance = 1.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); i++) {
    const double a = cuts[i], b = cuts[i + 1];
    const double mid = 0.5 * (a + b);
    double sigma = 0.0;
    std::array<double, 3> emission{0, 0, 0};
    for (const auto& s : spans) {
      if (s.t0 <= mid && mid < s.t1) {
        sigma += s.prim->density;
        for (int ch = 0; ch < 3; ch++) {
          emission[static_cast<std::size_t>(ch)] +=
              s.prim->density * s.prim->albedo[static_cast<std::size_t>(ch)];
        }
      }
    }
    if (sigma <= 0.0) continue;
    const double absorbed = -std::expm1(-sigma * (b - a));
    for (int ch = 0; ch < 3; ch++) {
      color[static_cast<std::size_t>(ch)] +=
          transmittance * absorbed * emission[static_cast<std::size_t>(ch)] / sigma;
    }
    transmittance *= std::exp(-sigma * (b - a));
  }
  for (int ch = 0; ch < 3; ch++) {
    color[static_cast<std::size_t>(ch)] +=
        transmittance * scene.background[static_cast<std::size_t>(ch)];
  }
  return color;
}

inline Image render_gt_image(const SceneSpec& scene, const geom::Pose6DoF& pose,
                             const geom::Intrinsics& K) {
  Image im = Image::zero(K.width, K.height);
  auto rays = geom::rays_for_view(pose, K, geom::all_pixels(K), 0.0, 1.0);
  for (const auto& ray : rays) {
    auto c = trace_ray_gt(scene, ray);
    for (int ch = 0; ch < 3; ch++) {
      im.at(ray.row, ray.col, ch) = static_cast<float>(c[static_cast<std::size_t>(ch)]);
    }
  }
  return im;
}

// ---------------------------------------------------------------------------
// Trajectories and incremental step datasets

struct TrajectorySpec {
  enum class Kind { orbit, sweep } kind = Kind::orbit;
  int n_views = 100;
  int n_steps = 10;
  double radius = 2.2;        // orbit radius / sweep standoff distance
  double height = 1.0;        // camera height above the scene center plane
  std::array<double, 3> jitter{0.02, 0.02, 0.02};  // positional jitter amplitudes
  double sweep_span = 2.4;    // total x travel of the sweep

  void validate() const {
    if (n_views < 1 || n_steps < 1) throw ConfigError("trajectory: counts must be >= 1");
    if (n_views % n_steps != 0) {
      throw ConfigError("trajectory: n_views must be divisible by n_steps");
    }
  }
};

struct View {
  Image image;
  geom::Pose6DoF pose;
};

struct StepDataset {
  int step_index = 0;
  std::vector<View> train_views;
  std::vector<View> test_views;
  geom::Intrinsics intrinsics;
  double t_near = 0.5;
  double t_far = 4.5;
  std::array<double, 3> background{0, 0, 0};
};

inline geom::Pose6DoF look_at_pose(const Vec3& position, const Vec3& target) {
  const Vec3 forward = (target - position).normalized();
  const Vec3 z_cam = -forward;
  Vec3 up(0, 0, 1);
  if (std::abs(up.dot(z_cam)) > 0.999) up = Vec3(0, 1, 0);
  const Vec3 x_cam = up.cross(z_cam).normalized();
  const Vec3 y_cam = z_cam.cross(x_cam);
  geom::Mat4 m = geom::Mat4::Identity();
  m.block<3, 1>(0, 0) = x_cam;
  m.block<3, 1>(0, 1) = y_cam;
  m.block<3, 1>(0, 2) = z_cam;
  m.block<3, 1>(0, 3) = position;
  return geom::pose_from_matrix(m);
}

inline std::vector<geom::Pose6DoF> synthesize_trajectory(const TrajectorySpec& traj, Rng& rng) {
  traj.validate();
  std::vector<geom::Pose6DoF> poses;
  poses.reserve(static_cast<std::size_t>(traj.n_views));
  for (int i = 0; i < traj.n_views; i++) {
    Vec3 jitter(rng.uniform(-traj.jitter[0], traj.jitter[0]),
                rng.uniform(-traj.jitter[1], traj.jitter[1]),
                rng.uniform(-traj.jitter[2], traj.jitter[2]));
    Vec3 position;
    if (traj.kind == TrajectorySpec::Kind::orbit) {
      // half-spacing offset keeps jittered azimuths clear of the 0/2pi cut
      const double phi = geom::kTwoPi * (i + 0.5) / traj.n_views;
      position = Vec3(traj.radius * std::cos(phi), traj.radius * std::sin(phi), traj.height);
    } else {
      const double x = -0.5 * traj.sweep_span + traj.sweep_span * i / (traj.n_views - 1.0);
      position = Vec3(x, -traj.radius, traj.height);
    }
    poses.push_back(look_at_pose(position + jitter, Vec3(0, 0, 0)));
  }
  return poses;
}

// Largest-remainder style split: per-step test counts follow the cumulative
// floor of fraction*views_per_step so the global total matches the fraction.
inline std::vector<int> per_step_test_counts(int n_steps, int views_per_step, double fraction) {
  std::vector<int> counts(static_cast<std::size_t>(n_steps));
  int prev = 0;
  for (int s = 0; s < n_steps; s++) {
    const int cum = static_cast<int>(std::floor(fraction * views_per_step * (s + 1) + 1e-9));
    counts[static_cast<std::size_t>(s)] = cum - prev;
    prev = cum;
  }
  return counts;
}

struct DatasetParams {
  geom::Intrinsics intrinsics{64, 64, 68.0, 68.0, 32.0, 32.0};
  double t_near = 0.5;
  double t_far = 4.5;
  double test_fraction = 0.125;
};

inline std::vector<StepDataset> generate_incremental_dataset(const SceneSpec& scene,
                                                             const TrajectorySpec& traj,
                                                             const DatasetParams& params,
                                                             std::uint64_t seed) {
  scene.validate();
  traj.validate();
  if (params.test_fraction < 0.0 || params.test_fraction >= 1.0) {
    throw ConfigError("dataset: test_fraction must be in [0, 1)");
  }
  Rng traj_rng = derive_rng(seed, "trajectory");
  auto poses = synthesize_trajectory(traj, traj_rng);

  const int per_step = traj.n_views / traj.n_steps;
  const auto test_counts = per_step_test_counts(traj.n_steps, per_step, params.test_fraction);

  std::vector<StepDataset> steps;
  steps.reserve(static_cast<std::size_t>(traj.n_steps));
  for (int s = 0; s < traj.n_steps; s++) {
    StepDataset step;
    step.step_index = s;
    step.intrinsics = params.intrinsics;
    step.t_near = params.t_near;
    step.t_far = params.t_far;
    step.background = scene.background;

    // choose test view indices within the step without replacement
    Rng split_rng = derive_rng(seed, "split", static_cast<std::uint64_t>(s));
    std::vector<int> indices(static_cast<std::size_t>(per_step));
    for (int i = 0; i < per_step; i++) indices[static_cast<std::size_t>(i)] = i;
    std::vector<int> test_idx;
    for (int k = 0; k < test_counts[static_cast<std::size_t>(s)]; k++) {
      const auto pick = static_cast<std::size_t>(split_rng.uniform_index(indices.size()));
      test_idx.push_back(indices[pick]);
      indices.erase(indices.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    std::sort(test_idx.begin(), test_idx.end());

    for (int i = 0; i < per_step; i++) {
      const auto& pose = poses[static_cast<std::size_t>(s * per_step + i)];
      View v;
      v.pose = pose;
      v.image = render_gt_image(scene, pose, params.intrinsics);
      const bool is_test = std::binary_search(test_idx.begin(), test_idx.end(), i);
      (is_test ? step.test_views : step.train_views).push_back(std::move(v));
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + one header-less f32rgb file per view.

namespace detail {

inline json pose_to_json(const geom::Pose6DoF& p) {
  return json::array({p.x, p.y, p.z, p.alpha, p.beta, p.gamma});
}

inline geom::Pose6DoF pose_from_json(const json& j) {
  if (!j.is_array() || j.size() != 6) throw DataError("manifest: pose must be a 6-array");
  return geom::Pose6DoF{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
                        j[3].get<double>(), j[4].get<double>(), j[5].get<double>()};
}

template <typename T>
T require_key(const json& j, const std::string& key, const std::string& context) {
  if (!j.contains(key)) throw DataError("manifest: missing key " + context + "/" + key);
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError("manifest: bad value at " + context + "/" + key);
  }
}

}  // namespace detail

inline void write_dataset(const std::filesystem::path& root,
                          const std::vector<StepDataset>& steps) {
  if (steps.empty()) throw UsageError("write_dataset: no steps");
  std::filesystem::create_directories(root);
  json manifest;
  manifest["format"] = "incnerf-dataset";
  manifest["version"] = 1;
  const auto& K = steps[0].intrinsics;
  manifest["intrinsics"] = {{"width", K.width},   {"height", K.height}, {"fx", K.fx},
                            {"fy", K.fy},         {"cx", K.cx},         {"cy", K.cy}};
  manifest["t_near"] = steps[0].t_near;
  manifest["t_far"] = steps[0].t_far;
  manifest["background"] = json::array(
      {steps[0].background[0], steps[0].background[1], steps[0].background[2]});

  int view_counter = 0;
  json steps_json = json::array();
  for (const auto& step : steps) {
    json step_json;
    step_json["step"] = step.step_index;
    json views = json::array();
    auto emit = [&](const View& v, const char* split) {
      char name[32];
      std::snprintf(name, sizeof(name), "view_%04d.f32rgb", view_counter++);
      write_f32rgb(root / name, v.image);
      json vj;
      vj["file"] = name;
      vj["pose"] = detail::pose_to_json(v.pose);
      vj["split"] = split;
      vj["crc32"] = image_crc32(v.image);
      views.push_back(std::move(vj));
    };
    for (const auto& v : step.train_views) emit(v, "train");
    for (const auto& v : step.test_views) emit(v, "test");
    step_json["views"] = std::move(views);
    steps_json.push_back(std::move(step_json));
  }
  manifest["steps"] = std::move(steps_json);
  std::ofstream os(root / "manifest.json", std::ios::binary);
  if (!os) throw DataError("cannot write manifest: " + (root / "manifest.json").string());
  os << manifest.dump(2) << "\n";
}

inline std::vector<StepDataset> read_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.json";
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest: " + manifest_path.string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  const json kj = detail::require_key<json>(manifest, "intrinsics", "");
  geom::Intrinsics K;
  K.width = detail::require_key<int>(kj, "width", "intrinsics");
  K.height = detail::require_key<int>(kj, "height", "intrinsics");
  K.fx = detail::require_key<double>(kj, "fx", "intrinsics");
  K.fy = detail::require_key<double>(kj, "fy", "intrinsics");
  K.cx = detail::require_key<double>(kj, "cx", "intrinsics");
  K.cy = detail::require_key<double>(kj, "cy", "intrinsics");
  const auto t_near = detail::require_key<double>(manifest, "t_near", "");
  const auto t_far = detail::require_key<double>(manifest, "t_far", "");
  const auto bg = detail::require_key<std::array<double, 3>>(manifest, "background", "");

  std::vector<StepDataset> steps;
  const json steps_json = detail::require_key<json>(manifest, "steps", "");
  for (const auto& step_json : steps_json) {
    StepDataset step;
    step.step_index = detail::require_key<int>(step_json, "step", "steps[]");
    step.intrinsics = K;
    step.t_near = t_near;
    step.t_far = t_far;
    step.background = bg;
    const json views = detail::require_key<json>(step_json, "views", "steps[]");
    for (const auto& vj : views) {
      const auto file = detail::require_key<std::string>(vj, "file", "steps[]/views[]");
      const auto split = detail::require_key<std::string>(vj, "split", "steps[]/views[]");
      const auto expected_crc = detail::require_key<std::uint32_t>(vj, "crc32", "steps[]/views[]");
      View v;
      v.pose = detail::pose_from_json(
          detail::require_key<json>(vj, "pose", "steps[]/views[]"));
      v.image = read_f32rgb(root / file, K.width, K.height);
      if (image_crc32(v.image) != expected_crc) {
        throw DataError("checksum mismatch in " + (root / file).string());
      }
      if (split == "train") {
        step.train_views.push_back(std::move(v));
      } else if (split == "test") {
        step.test_views.push_back(std::move(v));
      } else {
        throw DataError("manifest: unknown split '" + split + "' in " + file);
      }
    }
    steps.push_back(std::move(step));
  }
  return steps;
}

// Seven distinct-albedo primitives in a unit-scale room; opaque enough that
// occlusion differs across the orbit, which is what makes forgetting visible.
inline SceneSpec make_default_scene() {
  SceneSpec s;
  s.background = {0, 0, 0};
  auto sphere = [](Vec3 c, double r, double d, std::array<double, 3> a) {
    Primitive p;
    p.kind = Primitive::Kind::sphere;
    p.center = c;
    p.radius = r;
    p.density = d;
    p.albedo = a;
    return p;
  };
  auto box = [](Vec3 lo, Vec3 hi, double d, std::array<double, 3> a) {
    Primitive p;
    p.kind = Primitive::Kind::box;
    p.box_min = lo;
    p.box_max = hi;
    p.density = d;
    p.albedo = a;
    return p;
  };
  s.primitives = {
      sphere(Vec3(0.0, 0.0, 0.45), 0.32, 14.0, {0.92, 0.18, 0.15}),
      sphere(Vec3(0.55, 0.3, -0.25), 0.26, 12.0, {0.15, 0.75, 0.92}),
      sphere(Vec3(-0.55, 0.35, -0.1), 0.22, 10.0, {0.2, 0.85, 0.25}),
      sphere(Vec3(0.3, -0.55, 0.05), 0.2, 16.0, {0.95, 0.8, 0.2}),
      sphere(Vec3(-0.35, -0.5, 0.35), 0.18, 9.0, {0.8, 0.3, 0.85}),
      box(Vec3(-0.85, -0.15, -0.55), Vec3(-0.35, 0.35, -0.05), 11.0, {0.95, 0.55, 0.15}),
      box(Vec3(0.15, 0.45, 0.1), Vec3(0.75, 0.9, 0.6), 8.0, {0.35, 0.4, 0.95}),
  };
  return s;
}

}  // namespace incnerf::scene
