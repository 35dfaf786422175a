#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "incnerf/diff.hpp"
#include "incnerf/errors.hpp"
#include "incnerf/field.hpp"
#include "incnerf/geometry.hpp"
#include "incnerf/rng.hpp"

namespace incnerf::render {

struct SamplingConfig {
  int n_coarse = 32;
  int n_fine = 32;
  bool stratified = true;

  void validate() const {
    if (n_coarse < 1) throw ConfigError("sampling: n_coarse must be >= 1");
    if (n_fine < 0) throw ConfigError("sampling: n_fine must be >= 0");
  }
};

struct RenderContext {
  SamplingConfig sampling;
  double t_near = 0.1;
  double t_far = 6.0;
  double beta_min = 0.01;
  std::array<double, 3> background{0.0, 0.0, 0.0};
};

template <typename R>
struct RenderResult {
  std::array<R, 3> color{};
  R uncertainty = 0;
  R depth = 0;
  std::vector<R> weights;
  R t_end = 0;  // transmittance remaining past the last sample
};

// One draw per equal-width bin of [t_near, t_far]; bin midpoints when not
// stratified. Values are strictly increasing by construction.
inline std::vector<double> stratified_samples(const geom::Ray& ray, const SamplingConfig& cfg,
                                              Rng* rng) {
  cfg.validate();
  if (!(ray.t_near < ray.t_far)) throw UsageError("stratified_samples: empty ray interval");
  const double width = (ray.t_far - ray.t_near) / cfg.n_coarse;
  std::vector<double> ts(static_cast<std::size_t>(cfg.n_coarse));
  for (int i = 0; i < cfg.n_coarse; i++) {
    const double u = (cfg.stratified && rng) ? rng->uniform() : 0.5;
    ts[static_cast<std::size_t>(i)] = ray.t_near + (i + u) * width;
  }
  return ts;
}

// Inverse-transform draws from the per-bin weight histogram, merged with the
// coarse values. Bins are the equal-width stratification bins of
// [t_near, t_far]; weights[i] belongs to bin i. Zero total weight falls back
// to uniform draws over the whole interval.
inline std::vector<double> importance_resample(const std::vector<double>& ts,
                                               std::span<const double> weights, int n_fine,
                                               Rng& rng, double t_near, double t_far) {
  if (ts.size() != weights.size()) throw UsageError("importance_resample: weight count mismatch");
  const int n_bins = static_cast<int>(ts.size());
  const double width = (t_far - t_near) / n_bins;

  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw UsageError("importance_resample: negative weight");
    total += w;
  }

  std::vector<double> merged = ts;
  merged.reserve(ts.size() + static_cast<std::size_t>(n_fine));
  if (total <= 0.0) {
    for (int i = 0; i < n_fine; i++) merged.push_back(rng.uniform(t_near, t_far));
  } else {
    std::vector<double> cdf(static_cast<std::size_t>(n_bins) + 1, 0.0);
    for (int i = 0; i < n_bins; i++) {
      cdf[static_cast<std::size_t>(i) + 1] =
          cdf[static_cast<std::size_t>(i)] + weights[static_cast<std::size_t>(i)] / total;
    }
    cdf[static_cast<std::size_t>(n_bins)] = 1.0;
    for (int i = 0; i < n_fine; i++) {
      const double u = rng.uniform();
      const auto it = std::upper_bound(cdf.begin(), cdf.end() - 1, u);
      const auto bin = static_cast<int>(std::distance(cdf.begin(), it)) - 1;
      const double lo = cdf[static_cast<std::size_t>(bin)];
      const double hi = cdf[static_cast<std::size_t>(bin) + 1];
      const double frac = hi > lo ? (u - lo) / (hi - lo) : 0.5;
      merged.push_back(t_near + (bin + frac) * width);
    }
  }
  std::sort(merged.begin(), merged.end());
  // exact duplicates would produce a zero-length interval; nudge them apart
  for (std::size_t i = 1; i < merged.size(); i++) {
    if (merged[i] <= merged[i - 1]) merged[i] = std::nextafter(merged[i - 1], t_far + 1.0);
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Numeric compositing (double precision; the oracle-facing route)

namespace detail {

inline void check_increasing(std::span<const double> ts) {
  if (ts.empty()) throw UsageError("composite: need at least one sample");
  for (std::size_t i = 1; i < ts.size(); i++) {
    if (!(ts[i] > ts[i - 1])) throw UsageError("composite: t-values must be strictly increasing");
  }
}

inline std::vector<double> deltas(std::span<const double> ts, double t_far) {
  std::vector<double> d(ts.size());
  for (std::size_t i = 0; i + 1 < ts.size(); i++) d[i] = ts[i + 1] - ts[i];
  d[ts.size() - 1] = std::max(t_far - ts.back(), 0.0);
  return d;
}

}  // namespace detail

struct CompositeWeights {
  std::vector<double> weights;
  double t_end = 1.0;
};

template <typename R>
CompositeWeights composite_weights(std::span<const field::FieldSample<R>> samples,
                                   std::span<const double> ts, double t_far) {
  detail::check_increasing(ts);
  if (samples.size() != ts.size()) throw UsageError("composite: sample/t count mismatch");
  const auto d = detail::deltas(ts, t_far);
  CompositeWeights out;
  out.weights.resize(ts.size());
  double transmittance = 1.0;
  for (std::size_t i = 0; i < ts.size(); i++) {
    const double od = static_cast<double>(samples[i].sigma) * d[i];
    const double alpha = -std::expm1(-od);
    out.weights[i] = transmittance * alpha;
    transmittance *= std::exp(-od);
  }
  out.t_end = transmittance;
  return out;
}

template <typename R>
std::array<double, 3> composite_color(std::span<const field::FieldSample<R>> samples,
                                      std::span<const double> ts, double t_far,
                                      const std::array<double, 3>& background,
                                      CompositeWeights* weights_out = nullptr) {
  auto cw = composite_weights(samples, ts, t_far);
  std::array<double, 3> c{};
  for (std::size_t i = 0; i < samples.size(); i++) {
    for (int ch = 0; ch < 3; ch++) {
      c[static_cast<std::size_t>(ch)] +=
          cw.weights[i] * static_cast<double>(samples[i].color[static_cast<std::size_t>(ch)]);
    }
  }
  for (int ch = 0; ch < 3; ch++) {
    c[static_cast<std::size_t>(ch)] += cw.t_end * background[static_cast<std::size_t>(ch)];
  }
  if (weights_out) *weights_out = std::move(cw);
  return c;
}

template <typename R>
double composite_uncertainty(std::span<const field::FieldSample<R>> samples,
                             std::span<const double> ts, double t_far, double beta_min) {
  auto cw = composite_weights(samples, ts, t_far);
  double b = beta_min;
  for (std::size_t i = 0; i < samples.size(); i++) {
    b += cw.weights[i] * diff::detail::softplus_scalar(static_cast<double>(samples[i].beta_raw) - 1.0);
  }
  return b;
}

template <typename R>
double composite_depth(std::span<const field::FieldSample<R>> samples, std::span<const double> ts,
                       double t_far) {
  auto cw = composite_weights(samples, ts, t_far);
  double depth = 0.0;
  for (std::size_t i = 0; i < ts.size(); i++) depth += cw.weights[i] * ts[i];
  return depth;
}

// ---------------------------------------------------------------------------
// Tape compositing; same math built from graph ops so rays render
// differentiably end to end.

struct PassNodes {
  std::int32_t color = -1;       // [N,3], background included
  std::int32_t uncertainty = -1; // [N,1], composited + beta_min; -1 without head
  std::int32_t depth = -1;       // [N,1]
  std::int32_t weights = -1;     // [N,S]
  std::int32_t weight_sum = -1;  // [N,1]
  std::int32_t t_end = -1;       // [N,1]
};

template <typename R>
PassNodes composite_graph(diff::Graph<R>& g, const field::QueryNodes& q, Eigen::Index n_rays,
                          Eigen::Index n_samples, const diff::Mat<R>& ts_mat,
                          const diff::Mat<R>& delta_mat, const RenderContext& ctx) {
  const auto sigma = g.reshape(q.sigma, n_rays, n_samples);
  const auto delta = g.input(delta_mat);
  const auto od = g.mul(sigma, delta);
  // T_i = exp(-sum_{j<i} od_j); alpha_i = 1 - exp(-od_i)
  const auto transmittance = g.exp(g.axpb(g.cumsum_exclusive(od), R(-1), R(0)));
  const auto alpha = g.axpb(g.exp(g.axpb(od, R(-1), R(0))), R(-1), R(1));
  const auto w = g.mul(transmittance, alpha);
  const auto w_sum = g.rowsum(w);
  const auto t_end = g.exp(g.axpb(g.rowsum(od), R(-1), R(0)));

  PassNodes out;
  out.weights = w;
  out.weight_sum = w_sum;
  out.t_end = t_end;

  std::int32_t color = -1;
  for (int ch = 0; ch < 3; ch++) {
    const auto c_ch = g.reshape(g.slice_cols(q.color, ch, 1), n_rays, n_samples);
    auto comp = g.rowsum(g.mul(w, c_ch));
    const R bg = static_cast<R>(ctx.background[static_cast<std::size_t>(ch)]);
    if (bg != R(0)) comp = g.scale_add(R(1), comp, bg, t_end);
    color = (ch == 0) ? comp : g.concat_cols(color, comp);
  }
  out.color = color;

  if (q.beta_raw >= 0) {
    const auto beta_hat = g.softplus(g.axpb(q.beta_raw, R(1), R(-1)));
    const auto b = g.reshape(beta_hat, n_rays, n_samples);
    out.uncertainty = g.axpb(g.rowsum(g.mul(w, b)), R(1), static_cast<R>(ctx.beta_min));
  }

  out.depth = g.rowsum(g.mul(w, g.input(ts_mat)));
  return out;
}

template <typename R>
field::QueryNodes query_model(diff::Graph<R>& g, field::FieldModel<R>& model,
                              const typename field::FieldModel<R>::Points& pos,
                              const typename field::FieldModel<R>::Points& dirs, bool trainable) {
  return model.build_query(g, pos, dirs, trainable);
}

template <typename R>
field::QueryNodes query_model(diff::Graph<R>& g, const field::FieldModel<R>& model,
                              const typename field::FieldModel<R>::Points& pos,
                              const typename field::FieldModel<R>::Points& dirs, bool trainable) {
  if (trainable) throw UsageError("trainable render of a const model");
  return model.build_query(g, pos, dirs);
}

// Coarse-pass then importance-driven fine-pass render of a ray batch on one
// graph. Fine sample placement is driven by detached coarse weights.
template <typename R>
struct TwoPassNodes {
  PassNodes coarse;
  PassNodes fine;
  Eigen::Index n_rays = 0;
  Eigen::Index n_fine_samples = 0;
};

// `capture_fine`/`replay_fine` freeze the fine-pass sample placement across
// repeated builds; finite-difference probes need that because placement is
// detached from the gradient path.
template <typename R, typename ModelRef>
TwoPassNodes<R> render_rays_graph(diff::Graph<R>& g, ModelRef& model,
                                  std::span<const geom::Ray> rays, const RenderContext& ctx,
                                  Rng& rng, bool trainable,
                                  std::vector<std::vector<double>>* capture_fine = nullptr,
                                  const std::vector<std::vector<double>>* replay_fine = nullptr) {
  ctx.sampling.validate();
  const auto n = static_cast<Eigen::Index>(rays.size());
  if (n == 0) throw UsageError("render: empty ray batch");

  using Points = typename field::FieldModel<R>::Points;
  auto expand = [&](const std::vector<std::vector<double>>& ts_per_ray, Eigen::Index s,
                    Points& pos, Points& dirs, diff::Mat<R>& ts_mat, diff::Mat<R>& delta_mat) {
    pos.resize(n * s, 3);
    dirs.resize(n * s, 3);
    ts_mat.resize(n, s);
    delta_mat.resize(n, s);
    for (Eigen::Index i = 0; i < n; i++) {
      const auto& ray = rays[static_cast<std::size_t>(i)];
      const auto& ts = ts_per_ray[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < s; j++) {
        const double t = ts[static_cast<std::size_t>(j)];
        const geom::Vec3 p = ray.origin + t * ray.dir;
        pos.row(i * s + j) = p.transpose();
        dirs.row(i * s + j) = ray.dir.transpose();
        ts_mat(i, j) = static_cast<R>(t);
        const double next = (j + 1 < s) ? ts[static_cast<std::size_t>(j) + 1] : ray.t_far;
        delta_mat(i, j) = static_cast<R>(std::max(next - t, 0.0));
      }
    }
  };

  TwoPassNodes<R> out;
  out.n_rays = n;

  // coarse pass
  std::vector<std::vector<double>> coarse_ts(rays.size());
  for (std::size_t i = 0; i < rays.size(); i++) {
    coarse_ts[i] = stratified_samples(rays[i], ctx.sampling, &rng);
  }
  const Eigen::Index s_coarse = ctx.sampling.n_coarse;
  {
    Points pos, dirs;
    diff::Mat<R> ts_mat, delta_mat;
    expand(coarse_ts, s_coarse, pos, dirs, ts_mat, delta_mat);
    auto q = query_model(g, model, pos, dirs, trainable);
    out.coarse = composite_graph(g, q, n, s_coarse, ts_mat, delta_mat, ctx);
  }

  if (ctx.sampling.n_fine == 0) {
    out.fine = out.coarse;
    out.n_fine_samples = s_coarse;
    return out;
  }

  // fine pass over the union of coarse and importance-drawn samples
  std::vector<std::vector<double>> fine_ts(rays.size());
  if (replay_fine) {
    if (replay_fine->size() != rays.size()) throw UsageError("render: replay sample count mismatch");
    fine_ts = *replay_fine;
  } else {
    const auto& w = g.value(out.coarse.weights);
    for (std::size_t i = 0; i < rays.size(); i++) {
      std::vector<double> wrow(static_cast<std::size_t>(s_coarse));
      for (Eigen::Index j = 0; j < s_coarse; j++) {
        wrow[static_cast<std::size_t>(j)] = static_cast<double>(w(static_cast<Eigen::Index>(i), j));
      }
      fine_ts[i] = importance_resample(coarse_ts[i], wrow, ctx.sampling.n_fine, rng,
                                       rays[i].t_near, rays[i].t_far);
    }
  }
  if (capture_fine) *capture_fine = fine_ts;
  const Eigen::Index s_fine = s_coarse + ctx.sampling.n_fine;
  {
    Points pos, dirs;
    diff::Mat<R> ts_mat, delta_mat;
    expand(fine_ts, s_fine, pos, dirs, ts_mat, delta_mat);
    auto q = query_model(g, model, pos, dirs, trainable);
    out.fine = composite_graph(g, q, n, s_fine, ts_mat, delta_mat, ctx);
  }
  out.n_fine_samples = s_fine;
  return out;
}

// Spec-level render: fine-pass results per pixel, no gradients recorded.
template <typename R>
std::vector<RenderResult<R>> render_view(const field::FieldModel<R>& model,
                                         const geom::Pose6DoF& pose, const geom::Intrinsics& K,
                                         const std::vector<geom::PixelCoord>& pixels,
                                         const RenderContext& ctx, Rng& rng,
                                         std::size_t chunk = 512) {
  auto rays = geom::rays_for_view(pose, K, pixels, ctx.t_near, ctx.t_far);
  std::vector<RenderResult<R>> results;
  results.reserve(rays.size());
  for (std::size_t start = 0; start < rays.size(); start += chunk) {
    const std::size_t count = std::min(chunk, rays.size() - start);
    diff::Graph<R> g;
    auto nodes = render_rays_graph<R>(g, model, std::span(rays).subspan(start, count), ctx, rng,
                                      /*trainable=*/false);
    const auto& color = g.value(nodes.fine.color);
    const auto& depth = g.value(nodes.fine.depth);
    const auto& w = g.value(nodes.fine.weights);
    const auto& t_end = g.value(nodes.fine.t_end);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(count); i++) {
      RenderResult<R> r;
      for (int ch = 0; ch < 3; ch++) r.color[static_cast<std::size_t>(ch)] = color(i, ch);
      r.uncertainty = nodes.fine.uncertainty >= 0 ? g.value(nodes.fine.uncertainty)(i, 0)
                                                  : static_cast<R>(ctx.beta_min);
      r.depth = depth(i, 0);
      r.t_end = t_end(i, 0);
      r.weights.resize(static_cast<std::size_t>(w.cols()));
      for (Eigen::Index j = 0; j < w.cols(); j++) r.weights[static_cast<std::size_t>(j)] = w(i, j);
      results.push_back(std::move(r));
    }
  }
  return results;
}

}  // namespace incnerf::render
