#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "incnerf/field.hpp"

using namespace incnerf;
using field::FieldConfig;
using field::FieldModel;
using geom::Vec3;

namespace {

FieldConfig small_config() {
  FieldConfig cfg;
  cfg.trunk_depth = 2;
  cfg.trunk_width = 16;
  cfg.head_width = 8;
  cfg.pos_enc_levels = 2;
  cfg.dir_enc_levels = 1;
  return cfg;
}

}  // namespace

TEST_CASE("positional encoding") {
  SECTION("zero levels is the identity") {
    auto e = field::encode_position(Vec3(1, 2, 3), 0);
    REQUIRE(e[0] == 1.0);
    REQUIRE(e[1] == 2.0);
    REQUIRE(e[2] == 3.0);
  }

  SECTION("one level at the origin") {
    auto e = field::encode_position(Vec3(0, 0, 0), 1);
    // (x, sin 0 x3, cos 0 x3)
    for (int i = 0; i < 6; i++) REQUIRE(e[static_cast<std::size_t>(i)] == 0.0);
    for (int i = 6; i < 9; i++) REQUIRE(e[static_cast<std::size_t>(i)] == 1.0);
  }

  SECTION("two levels at x=(0.5,0,0)") {
    auto e = field::encode_position(Vec3(0.5, 0, 0), 2);
    REQUIRE(e[0] == Catch::Approx(0.5));
    REQUIRE(e[3] == Catch::Approx(1.0).margin(1e-12));    // sin(pi/2)
    REQUIRE(e[6] == Catch::Approx(0.0).margin(1e-12));    // cos(pi/2)
    REQUIRE(e[9] == Catch::Approx(0.0).margin(1e-12));    // sin(pi)
    REQUIRE(e[12] == Catch::Approx(-1.0).margin(1e-12));  // cos(pi)
  }

  SECTION("doubled harmonics match direct evaluation") {
    Rng rng(8);
    for (int trial = 0; trial < 20; trial++) {
      const double v = rng.uniform(-2.0, 2.0);
      auto e = field::encode_position(Vec3(v, 0, 0), 2);
      REQUIRE(e[3] == Catch::Approx(std::sin(geom::kPi * v)).margin(1e-12));
      REQUIRE(e[9] == Catch::Approx(std::sin(2 * geom::kPi * v)).margin(1e-12));
      REQUIRE(e[12] == Catch::Approx(std::cos(2 * geom::kPi * v)).margin(1e-12));
    }
  }
}

TEST_CASE("field query") {
  auto model = FieldModel<double>::init(small_config(), 31);

  SECTION("head activation contracts hold for random inputs") {
    Rng rng(4);
    for (int i = 0; i < 200; i++) {
      Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      Vec3 d(rng.normal(), rng.normal(), rng.normal());
      d.normalize();
      auto s = model.query(x, d);
      REQUIRE(std::isfinite(s.sigma));
      REQUIRE(s.sigma >= 0.0);
      for (double c : s.color) {
        REQUIRE(c >= 0.0);
        REQUIRE(c <= 1.0);
      }
      REQUIRE(std::isfinite(s.beta_raw));
    }
  }

  SECTION("identical query twice is bit-identical") {
    Vec3 x(0.1, -0.2, 0.3), d(0, 0, -1);
    auto a = model.query(x, d);
    auto b = model.query(x, d);
    REQUIRE(a.sigma == b.sigma);
    REQUIRE(a.color == b.color);
    REQUIRE(a.beta_raw == b.beta_raw);
  }

  SECTION("non-normalized direction is a usage error") {
    REQUIRE_THROWS_AS(model.query(Vec3(0, 0, 0), Vec3(0, 0, -2)), UsageError);
  }

  SECTION("query gradients match finite differences") {
    FieldModel<double>::Points px(2, 3), pd(2, 3);
    px << 0.2, -0.1, 0.4, -0.3, 0.2, 0.0;
    pd << 0, 0, -1, 0, 1, 0;
    auto builder = [&](diff::Graph<double>& g) {
      auto q = model.build_query(g, px, pd, true);
      auto parts = g.concat_cols(g.concat_cols(q.sigma, q.color), q.beta_raw);
      return g.mean(g.square(parts));
    };
    auto report = diff::finite_diff_check<double>(builder, model.params(), 1e-4, 1e-4);
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.passed);
  }
}

TEST_CASE("skip connection changes trunk input width") {
  auto cfg = small_config();
  cfg.skip_layer_index = 1;
  auto model = FieldModel<double>::init(cfg, 2);
  REQUIRE(model.params_view().at("trunk.1.w").value.rows() ==
          cfg.trunk_width + cfg.pos_enc_dim());
  auto s = model.query(Vec3(0.3, 0.1, 0.2), Vec3(0, 0, -1));
  REQUIRE(std::isfinite(s.sigma));
}

TEST_CASE("teacher snapshot") {
  auto student = FieldModel<double>::init(small_config(), 5);
  student.set_step_trained_through(3);
  auto teacher = student.snapshot_as_teacher();

  SECTION("same outputs on the same input") {
    Vec3 x(0.4, 0.1, -0.5), d(0, 0, -1);
    auto a = student.query(x, d);
    auto b = teacher.query(x, d);
    REQUIRE(a.sigma == b.sigma);
    REQUIRE(a.color == b.color);
  }

  SECTION("snapshot records the step and role") {
    REQUIRE(teacher.role() == field::Role::teacher);
    REQUIRE(teacher.step_trained_through() == 3);
    REQUIRE(teacher.checksum() == student.checksum());
  }

  SECTION("mutating the student leaves the teacher unchanged") {
    const auto before = teacher.checksum();
    Vec3 x(0.4, 0.1, -0.5), d(0, 0, -1);
    const auto teacher_out_before = teacher.query(x, d);
    student.params().at("density.b").value.array() += 1.0;
    REQUIRE(teacher.checksum() == before);
    auto after = teacher.query(x, d);
    REQUIRE(after.sigma == teacher_out_before.sigma);
  }

  SECTION("teacher refuses mutable access and trainable queries") {
    REQUIRE_THROWS_AS(teacher.params(), UsageError);
    diff::Graph<double> g;
    FieldModel<double>::Points px(1, 3), pd(1, 3);
    px << 0, 0, 0;
    pd << 0, 0, -1;
    REQUIRE_THROWS_AS(teacher.build_query(g, px, pd, true), UsageError);
  }

  SECTION("snapshot of a teacher is rejected") {
    REQUIRE_THROWS_AS(teacher.snapshot_as_teacher(), UsageError);
  }
}

TEST_CASE("student from teacher") {
  auto s0 = FieldModel<double>::init(small_config(), 6);
  auto teacher = s0.snapshot_as_teacher();
  auto s1 = teacher.init_student_from_teacher();

  SECTION("parameters are bitwise equal, role is student") {
    REQUIRE(s1.role() == field::Role::student);
    REQUIRE(s1.checksum() == teacher.checksum());
  }

  SECTION("round trip preserves the function on 1000 probes") {
    Rng rng(17);
    double max_dev = 0.0;
    for (int i = 0; i < 1000; i++) {
      Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
      Vec3 d(rng.normal(), rng.normal(), rng.normal());
      d.normalize();
      auto a = s0.query(x, d);
      auto b = s1.query(x, d);
      max_dev = std::max(max_dev, std::abs(a.sigma - b.sigma));
      for (int c = 0; c < 3; c++) {
        max_dev = std::max(max_dev, std::abs(a.color[static_cast<std::size_t>(c)] -
                                             b.color[static_cast<std::size_t>(c)]));
      }
    }
    REQUIRE(max_dev == 0.0);
  }

  SECTION("init from a student is rejected") {
    REQUIRE_THROWS_AS(s0.init_student_from_teacher(), UsageError);
  }
}

TEST_CASE("field checkpoint with sidecar") {
  auto cfg = small_config();
  cfg.skip_layer_index = 1;
  auto model = FieldModel<double>::init(cfg, 12);
  model.set_step_trained_through(7);
  auto teacher = model.snapshot_as_teacher();

  auto stem = std::filesystem::temp_directory_path() / "incnerf_field_test";
  teacher.save(stem);
  auto loaded = FieldModel<double>::load(stem);
  REQUIRE(loaded.config() == cfg);
  REQUIRE(loaded.role() == field::Role::teacher);
  REQUIRE(loaded.step_trained_through() == 7);
  REQUIRE(loaded.checksum() == teacher.checksum());
  std::filesystem::remove(stem.string() + ".unkd");
  std::filesystem::remove(stem.string() + ".json");
}

TEST_CASE("uncertainty head can be disabled") {
  auto cfg = small_config();
  cfg.uncertainty_head_enabled = false;
  auto model = FieldModel<double>::init(cfg, 3);
  auto s = model.query(Vec3(0, 0, 0), Vec3(0, 0, -1));
  REQUIRE(s.beta_raw == 0.0);
  REQUIRE_THROWS_AS(model.params_view().at("uncert.0.w"), UsageError);
}
