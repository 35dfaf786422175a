#pragma once

#include <cmath>

#include "incnerf/diff.hpp"
#include "incnerf/errors.hpp"

namespace incnerf::objectives {

enum class Reduction { mean, sum };

template <typename R>
struct LossConfig {
  R eta = R(5);          // margin keeping the per-ray loss non-negative
  R beta_min = R(0.01);  // floor the renderer guarantees on composited beta
  Reduction reduction = Reduction::mean;

  void validate() const {
    if (eta < R(0)) throw ConfigError("loss: eta must be >= 0");
    if (beta_min <= R(0)) throw ConfigError("loss: beta_min must be > 0");
  }
};

namespace detail {

template <typename R>
std::int32_t reduce(diff::Graph<R>& g, std::int32_t per_ray, Reduction reduction) {
  return reduction == Reduction::mean ? g.mean(per_ray) : g.sum(per_ray);
}

}  // namespace detail

// Plain rendering loss: sum_r ||c*(r) - c(r)||^2 with the configured
// reduction over rays. pred is a [N,3] node, gt a [N,3] constant.
template <typename R>
std::int32_t rgb_loss(diff::Graph<R>& g, std::int32_t pred, const diff::Mat<R>& gt,
                      Reduction reduction = Reduction::mean) {
  if (g.value(pred).rows() != gt.rows() || g.value(pred).cols() != 3 || gt.cols() != 3) {
    throw UsageError("rgb_loss: prediction/target count mismatch");
  }
  const auto err = g.scale_add(R(1), g.input(gt), R(-1), pred);
  return detail::reduce(g, g.rowsum(g.square(err)), reduction);
}

// Heteroscedastic per-ray loss shared by the supervised and distillation
// objectives: ||c*-c||^2/2 + ||c*-c||^2/(2 b^2) + log b + eta, reduced over
// rays. `beta` is the composited uncertainty node [N,1] (floored upstream).
template <typename R>
std::int32_t uncertainty_weighted_loss(diff::Graph<R>& g, std::int32_t pred_color,
                                       std::int32_t beta, const diff::Mat<R>& target_colors,
                                       const LossConfig<R>& cfg) {
  cfg.validate();
  const auto n = g.value(pred_color).rows();
  if (target_colors.rows() != n || target_colors.cols() != 3 || g.value(pred_color).cols() != 3) {
    throw UsageError("uncertainty loss: prediction/target count mismatch");
  }
  if (g.value(beta).rows() != n || g.value(beta).cols() != 1) {
    throw UsageError("uncertainty loss: beta shape mismatch");
  }
  if ((g.value(beta).array() < cfg.beta_min - std::numeric_limits<R>::epsilon() * R(8)).any()) {
    throw NumericError("uncertainty loss: beta below the configured floor");
  }
  const auto err2 = g.rowsum(g.square(g.scale_add(R(1), g.input(target_colors), R(-1), pred_color)));
  const auto weighted = g.div(err2, g.square(beta));
  const auto data_terms = g.scale_add(R(0.5), err2, R(0.5), weighted);
  const auto per_ray = g.scale_add(R(1), data_terms, R(1), g.axpb(g.log(beta), R(1), cfg.eta));
  return detail::reduce(g, per_ray, cfg.reduction);
}

// Supervised objective: targets are ground-truth colors.
template <typename R>
std::int32_t supervised_loss(diff::Graph<R>& g, std::int32_t pred_color, std::int32_t beta,
                             const diff::Mat<R>& gt_colors, const LossConfig<R>& cfg) {
  return uncertainty_weighted_loss(g, pred_color, beta, gt_colors, cfg);
}

// Distillation objective: identical functional with teacher colors as the
// target. Teacher colors enter as constants, so no gradient can reach the
// teacher.
template <typename R>
std::int32_t distill_loss(diff::Graph<R>& g, std::int32_t student_color, std::int32_t student_beta,
                          const diff::Mat<R>& teacher_colors, const LossConfig<R>& cfg) {
  return uncertainty_weighted_loss(g, student_color, student_beta, teacher_colors, cfg);
}

// Numeric reference evaluation, kept independent of the graph route for
// oracle checks.
template <typename R>
double uncertainty_weighted_loss_ref(const diff::Mat<R>& pred, const diff::Mat<R>& beta,
                                     const diff::Mat<R>& target, const LossConfig<R>& cfg) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < pred.rows(); i++) {
    double e2 = 0.0;
    for (int ch = 0; ch < 3; ch++) {
      const double d = static_cast<double>(target(i, ch)) - static_cast<double>(pred(i, ch));
      e2 += d * d;
    }
    const double b = static_cast<double>(beta(i, 0));
    acc += 0.5 * e2 + 0.5 * e2 / (b * b) + std::log(b) + static_cast<double>(cfg.eta);
  }
  if (cfg.reduction == Reduction::mean) acc /= static_cast<double>(pred.rows());
  return acc;
}

}  // namespace incnerf::objectives
