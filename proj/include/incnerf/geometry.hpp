#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "incnerf/errors.hpp"
#include "incnerf/rng.hpp"

namespace incnerf::geom {

using Vec3 = Eigen::Vector3d;
using Mat4 = Eigen::Matrix4d;

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

// wrap into (-pi, pi]
inline double wrap_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a <= -kPi) a += kTwoPi;
  if (a > kPi) a -= kTwoPi;
  return a;
}

struct Intrinsics {
  int width = 0, height = 0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
};

// Translation plus intrinsic Rz(gamma)*Ry(beta)*Rx(alpha) Euler rotation.
// Angles live in (-pi, pi].
struct Pose6DoF {
  double x = 0, y = 0, z = 0;
  double alpha = 0, beta = 0, gamma = 0;

  double axis(int i) const {
    switch (i) {
      case 0: return x;
      case 1: return y;
      case 2: return z;
      case 3: return alpha;
      case 4: return beta;
      case 5: return gamma;
    }
    throw UsageError("pose axis out of range");
  }
};

inline Mat4 pose_to_matrix(const Pose6DoF& p) {
  const double ca = std::cos(p.alpha), sa = std::sin(p.alpha);
  const double cb = std::cos(p.beta), sb = std::sin(p.beta);
  const double cg = std::cos(p.gamma), sg = std::sin(p.gamma);
  Mat4 m = Mat4::Identity();
  // Rz * Ry * Rx, expanded
  m(0, 0) = cg * cb;
  m(0, 1) = cg * sb * sa - sg * ca;
  m(0, 2) = cg * sb * ca + sg * sa;
  m(1, 0) = sg * cb;
  m(1, 1) = sg * sb * sa + cg * ca;
  m(1, 2) = sg * sb * ca - cg * sa;
  m(2, 0) = -sb;
  m(2, 1) = cb * sa;
  m(2, 2) = cb * ca;
  m(0, 3) = p.x;
  m(1, 3) = p.y;
  m(2, 3) = p.z;
  return m;
}

// Euler extraction; valid away from gimbal lock (|cos beta| > 0).
inline Pose6DoF pose_from_matrix(const Mat4& m) {
  Pose6DoF p;
  p.x = m(0, 3);
  p.y = m(1, 3);
  p.z = m(2, 3);
  p.beta = std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
  p.alpha = std::atan2(m(2, 1), m(2, 2));
  p.gamma = std::atan2(m(1, 0), m(0, 0));
  p.alpha = wrap_angle(p.alpha);
  p.beta = wrap_angle(p.beta);
  p.gamma = wrap_angle(p.gamma);
  return p;
}

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 dir = Vec3::Zero();  // unit length
  double t_near = 0, t_far = 0;
  int row = 0, col = 0;
};

struct PixelCoord {
  int row = 0, col = 0;
};

// Pinhole rays through pixel centers; camera looks down -z in its own frame,
// image rows grow downward while camera y points up.
inline std::vector<Ray> rays_for_view(const Pose6DoF& pose, const Intrinsics& K,
                                      const std::vector<PixelCoord>& pixels, double t_near,
                                      double t_far) {
  const Mat4 m = pose_to_matrix(pose);
  const Eigen::Matrix3d rot = m.topLeftCorner<3, 3>();
  const Vec3 origin = m.topRightCorner<3, 1>();
  std::vector<Ray> rays;
  rays.reserve(pixels.size());
  for (const auto& px : pixels) {
    if (px.col < 0 || px.col >= K.width || px.row < 0 || px.row >= K.height) {
      throw UsageError("pixel (" + std::to_string(px.row) + "," + std::to_string(px.col) +
                       ") outside " + std::to_string(K.width) + "x" + std::to_string(K.height) +
                       " image");
    }
    const double u = (px.col + 0.5 - K.cx) / K.fx;
    const double v = (px.row + 0.5 - K.cy) / K.fy;
    Vec3 d_cam(u, -v, -1.0);
    Ray r;
    r.origin = origin;
    r.dir = (rot * d_cam).normalized();
    r.t_near = t_near;
    r.t_far = t_far;
    r.row = px.row;
    r.col = px.col;
    rays.push_back(r);
  }
  return rays;
}

inline std::vector<PixelCoord> all_pixels(const Intrinsics& K) {
  std::vector<PixelCoord> px;
  px.reserve(static_cast<std::size_t>(K.width) * K.height);
  for (int r = 0; r < K.height; r++) {
    for (int c = 0; c < K.width; c++) px.push_back({r, c});
  }
  return px;
}

// Per-axis extrema of a step's poses. Translation axes are plain intervals.
// Angle axes are stored as a covering arc [lo, hi] with lo in (-pi, pi] and
// hi - lo < 2*pi; when the arc crosses +-pi, hi simply runs past pi, which is
// the unwrapped form of the two sub-ranges on either side of the cut.
struct PoseRange {
  int step_index = 0;
  std::array<double, 6> lo{};
  std::array<double, 6> hi{};

  static PoseRange from_pose(const Pose6DoF& p, int step) {
    PoseRange r;
    r.step_index = step;
    for (int i = 0; i < 6; i++) {
      const double v = (i < 3) ? p.axis(i) : wrap_angle(p.axis(i));
      r.lo[i] = v;
      r.hi[i] = v;
    }
    return r;
  }

  bool contains(const Pose6DoF& p, double tol = 0.0) const {
    for (int i = 0; i < 3; i++) {
      if (p.axis(i) < lo[i] - tol || p.axis(i) > hi[i] + tol) return false;
    }
    for (int i = 3; i < 6; i++) {
      const double a = wrap_angle(p.axis(i));
      bool inside = false;
      for (int k = -1; k <= 1 && !inside; k++) {
        const double cand = a + k * kTwoPi;
        inside = cand >= lo[i] - tol && cand <= hi[i] + tol;
      }
      if (!inside) return false;
    }
    return true;
  }
};

// Componentwise min/max fold. Angles fold onto the representative nearest the
// current arc midpoint so that small ranges straddling +-pi stay small.
inline PoseRange update_range(const PoseRange& range, const Pose6DoF& p) {
  PoseRange r = range;
  for (int i = 0; i < 3; i++) {
    r.lo[i] = std::min(r.lo[i], p.axis(i));
    r.hi[i] = std::max(r.hi[i], p.axis(i));
  }
  for (int i = 3; i < 6; i++) {
    const double mid = 0.5 * (r.lo[i] + r.hi[i]);
    double a = wrap_angle(p.axis(i));
    a += kTwoPi * std::round((mid - a) / kTwoPi);
    r.lo[i] = std::min(r.lo[i], a);
    r.hi[i] = std::max(r.hi[i], a);
    // canonical representative: lo in (-pi, pi]
    while (r.lo[i] <= -kPi) {
      r.lo[i] += kTwoPi;
      r.hi[i] += kTwoPi;
    }
    while (r.lo[i] > kPi) {
      r.lo[i] -= kTwoPi;
      r.hi[i] -= kTwoPi;
    }
  }
  return r;
}

inline PoseRange fold_poses(const std::vector<Pose6DoF>& poses, int step) {
  if (poses.empty()) throw UsageError("fold_poses: empty pose list");
  PoseRange r = PoseRange::from_pose(poses[0], step);
  for (std::size_t i = 1; i < poses.size(); i++) r = update_range(r, poses[i]);
  return r;
}

struct SampledPose {
  Pose6DoF pose;
  int step_index = 0;
};

// Uniform step choice over the stored past, then independent uniform draws
// inside that step's per-axis bounds.
inline SampledPose sample_pose(const std::vector<PoseRange>& ranges, Rng& rng) {
  if (ranges.empty()) throw UsageError("sample_pose: no stored pose ranges");
  const auto k = static_cast<std::size_t>(rng.uniform_index(ranges.size()));
  const PoseRange& r = ranges[k];
  std::array<double, 6> v{};
  for (int i = 0; i < 6; i++) {
    v[i] = (r.lo[i] == r.hi[i]) ? r.lo[i] : rng.uniform(r.lo[i], r.hi[i]);
    if (i >= 3) v[i] = wrap_angle(v[i]);
  }
  SampledPose out;
  out.pose = Pose6DoF{v[0], v[1], v[2], v[3], v[4], v[5]};
  out.step_index = r.step_index;
  return out;
}

}  // namespace incnerf::geom
