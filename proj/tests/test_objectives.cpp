#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "incnerf/objectives.hpp"
#include "incnerf/rng.hpp"

using namespace incnerf;
using diff::Graph;
using diff::Mat;
using objectives::LossConfig;
using objectives::Reduction;

namespace {

Mat<double> random_colors(Rng& rng, Eigen::Index n) {
  Mat<double> m(n, 3);
  for (Eigen::Index i = 0; i < m.size(); i++) m.data()[i] = rng.uniform(0.0, 1.0);
  return m;
}

}  // namespace

TEST_CASE("rgb_loss") {
  SECTION("perfect prediction is zero") {
    Rng rng(1);
    auto gt = random_colors(rng, 5);
    Graph<double> g;
    REQUIRE(g.scalar(objectives::rgb_loss(g, g.input(gt), gt)) == 0.0);
  }

  SECTION("single ray squared-norm with sum reduction") {
    Mat<double> gt(1, 3), pred(1, 3);
    gt << 0.5, 0.5, 0.5;
    pred << 0.6, 0.5, 0.5;
    Graph<double> g;
    auto loss = objectives::rgb_loss(g, g.input(pred), gt, Reduction::sum);
    REQUIRE(g.scalar(loss) == Catch::Approx(0.01).epsilon(1e-12));
  }

  SECTION("random batch matches an independent summation oracle") {
    Rng rng(2);
    auto gt = random_colors(rng, 64);
    auto pred = random_colors(rng, 64);
    double expected = 0.0;
    for (Eigen::Index i = 0; i < 64; i++) {
      for (int c = 0; c < 3; c++) {
        const double d = gt(i, c) - pred(i, c);
        expected += d * d;
      }
    }
    Graph<double> g;
    auto loss = objectives::rgb_loss(g, g.input(pred), gt, Reduction::sum);
    REQUIRE(g.scalar(loss) == Catch::Approx(expected).epsilon(1e-12));
  }

  SECTION("count mismatch is a usage error") {
    Rng rng(3);
    auto gt = random_colors(rng, 4);
    auto pred = random_colors(rng, 5);
    Graph<double> g;
    REQUIRE_THROWS_AS(objectives::rgb_loss(g, g.input(pred), gt), UsageError);
  }
}

TEST_CASE("supervised loss values") {
  LossConfig<double> cfg;  // eta = 5, beta_min = 0.01

  SECTION("perfect prediction at beta 1 leaves only the margin") {
    Rng rng(4);
    auto gt = random_colors(rng, 3);
    Graph<double> g;
    auto beta = g.input(Mat<double>::Ones(3, 1));
    auto loss = objectives::supervised_loss(g, g.input(gt), beta, gt, cfg);
    REQUIRE(g.scalar(loss) == Catch::Approx(cfg.eta).epsilon(1e-12));
  }

  SECTION("perfect prediction at the beta floor") {
    Rng rng(5);
    auto gt = random_colors(rng, 2);
    Graph<double> g;
    Mat<double> b = Mat<double>::Constant(2, 1, 0.01);
    auto loss = objectives::supervised_loss(g, g.input(gt), g.input(b), gt, cfg);
    REQUIRE(g.scalar(loss) == Catch::Approx(std::log(0.01) + 5.0).epsilon(1e-9));
    REQUIRE(g.scalar(loss) == Catch::Approx(0.3948298).margin(1e-6));
  }

  SECTION("matches the independent reference on random batches") {
    Rng rng(6);
    for (int trial = 0; trial < 10; trial++) {
      auto gt = random_colors(rng, 32);
      auto pred = random_colors(rng, 32);
      Mat<double> b(32, 1);
      for (Eigen::Index i = 0; i < 32; i++) b(i, 0) = rng.uniform(0.01, 2.0);
      Graph<double> g;
      auto loss = objectives::supervised_loss(g, g.input(pred), g.input(b), gt, cfg);
      REQUIRE(g.scalar(loss) ==
              Catch::Approx(objectives::uncertainty_weighted_loss_ref(pred, b, gt, cfg))
                  .epsilon(1e-12));
    }
  }

  SECTION("beta below the floor aborts") {
    Rng rng(7);
    auto gt = random_colors(rng, 2);
    Mat<double> b = Mat<double>::Constant(2, 1, 0.001);
    Graph<double> g;
    REQUIRE_THROWS_AS(objectives::supervised_loss(g, g.input(gt), g.input(b), gt, cfg),
                      NumericError);
  }

  SECTION("stationary point of the beta profile sits at |e|") {
    // d/db [e^2/(2 b^2) + log b] = 0 at b = |e|
    Mat<double> gt(1, 3), pred(1, 3);
    gt << 0.8, 0.2, 0.4;
    pred << 0.5, 0.1, 0.2;
    const double e = std::sqrt(0.09 + 0.01 + 0.04);
    diff::ParameterSet<double> ps;
    auto& beta = ps.add("beta", 1, 1);

    auto loss_at = [&](double b) {
      Graph<double> g;
      Mat<double> bm = Mat<double>::Constant(1, 1, b);
      return g.scalar(objectives::supervised_loss(g, g.input(pred), g.input(bm), gt, cfg));
    };
    const double h = 1e-6;
    REQUIRE(std::abs((loss_at(e + h) - loss_at(e - h)) / (2 * h)) < 1e-6);

    beta.value(0, 0) = e;
    ps.zero_grads();
    Graph<double> g;
    g.backward(objectives::supervised_loss(g, g.input(pred), g.param(beta), gt, cfg));
    REQUIRE(std::abs(beta.grad(0, 0)) < 1e-12);
  }

  SECTION("monotone decrease below |e| and increase above it") {
    Mat<double> gt(1, 3), pred(1, 3);
    gt << 1.0, 0.0, 0.0;
    pred << 0.7, 0.0, 0.0;
    const double e = 0.3;
    auto loss_at = [&](double b) {
      Graph<double> g;
      Mat<double> bm = Mat<double>::Constant(1, 1, b);
      return g.scalar(objectives::supervised_loss(g, g.input(pred), g.input(bm), gt, cfg));
    };
    double prev = loss_at(0.011);
    for (double b = 0.02; b < e; b += 0.02) {
      const double cur = loss_at(b);
      REQUIRE(cur < prev);
      prev = cur;
    }
    prev = loss_at(e);
    for (double b = e + 0.05; b < 3.0; b += 0.05) {
      const double cur = loss_at(b);
      REQUIRE(cur > prev);
      prev = cur;
    }
  }

  SECTION("non-negative at perfect prediction whenever eta >= -log beta_min") {
    LossConfig<double> tight;
    tight.beta_min = 0.01;
    tight.eta = -std::log(tight.beta_min);  // 4.6052
    Rng rng(8);
    auto gt = random_colors(rng, 1);
    for (double b : {0.01, 0.05, 0.3, 1.0, 7.0}) {
      Graph<double> g;
      Mat<double> bm = Mat<double>::Constant(1, 1, b);
      REQUIRE(g.scalar(objectives::supervised_loss(g, g.input(gt), g.input(bm), gt, tight)) >=
              -1e-12);
    }
  }
}

TEST_CASE("distill loss") {
  LossConfig<double> cfg;

  SECTION("student matching teacher at beta 1 leaves only the margin") {
    Rng rng(9);
    auto teacher = random_colors(rng, 4);
    Graph<double> g;
    auto beta = g.input(Mat<double>::Ones(4, 1));
    auto loss = objectives::distill_loss(g, g.input(teacher), beta, teacher, cfg);
    REQUIRE(g.scalar(loss) == Catch::Approx(cfg.eta).epsilon(1e-12));
  }

  SECTION("swapping targets reproduces the supervised loss bit-exactly") {
    Rng rng(10);
    auto colors = random_colors(rng, 16);
    auto pred = random_colors(rng, 16);
    Mat<double> b(16, 1);
    for (Eigen::Index i = 0; i < 16; i++) b(i, 0) = rng.uniform(0.05, 1.5);
    Graph<double> g1, g2;
    const double sup = g1.scalar(objectives::supervised_loss(g1, g1.input(pred), g1.input(b), colors, cfg));
    const double dis = g2.scalar(objectives::distill_loss(g2, g2.input(pred), g2.input(b), colors, cfg));
    REQUIRE(sup == dis);
  }

  SECTION("fixed beta reduces to a scaled rgb loss plus the regular terms") {
    Rng rng(11);
    auto teacher = random_colors(rng, 8);
    auto student = random_colors(rng, 8);
    const double b = 0.7;
    Mat<double> bm = Mat<double>::Constant(8, 1, b);
    LossConfig<double> sum_cfg = cfg;
    sum_cfg.reduction = Reduction::sum;
    Graph<double> g;
    const double dis =
        g.scalar(objectives::distill_loss(g, g.input(student), g.input(bm), teacher, sum_cfg));
    Graph<double> g2;
    const double rgb = g2.scalar(objectives::rgb_loss(g2, g2.input(student), teacher, Reduction::sum));
    const double expected = rgb * (0.5 + 0.5 / (b * b)) + 8.0 * (std::log(b) + cfg.eta);
    REQUIRE(dis == Catch::Approx(expected).epsilon(1e-12));
  }

  SECTION("no gradient reaches teacher color inputs") {
    Rng rng(12);
    auto teacher = random_colors(rng, 4);
    diff::ParameterSet<double> ps;
    auto& student = ps.add("student", 4, 3);
    auto& beta = ps.add("beta", 4, 1);
    student.value = random_colors(rng, 4);
    beta.value = Mat<double>::Constant(4, 1, 0.5);
    ps.zero_grads();
    Graph<double> g;
    const auto teacher_node = g.input(teacher);  // constant: grads cannot reach it
    const auto err2 = g.rowsum(g.square(g.scale_add(1.0, teacher_node, -1.0, g.param(student))));
    const auto weighted = g.div(err2, g.square(g.param(beta)));
    const auto loss = g.mean(g.scale_add(0.5, err2, 0.5, weighted));
    g.backward(loss);
    REQUIRE(student.grad.cwiseAbs().maxCoeff() > 0.0);
    REQUIRE(beta.grad.cwiseAbs().maxCoeff() > 0.0);
  }
}
