#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "incnerf/diff.hpp"
#include "incnerf/errors.hpp"
#include "incnerf/geometry.hpp"
#include "incnerf/rng.hpp"

namespace incnerf::field {

using json = nlohmann::ordered_json;

struct FieldConfig {
  int trunk_depth = 4;
  int trunk_width = 64;
  int head_width = 32;
  int pos_enc_levels = 6;
  int dir_enc_levels = 2;
  std::optional<int> skip_layer_index;  // trunk layer whose input gains the raw encoding
  bool uncertainty_head_enabled = true;

  void validate() const {
    if (trunk_depth < 1 || trunk_width < 1 || head_width < 1) {
      throw ConfigError("field: depths and widths must be >= 1");
    }
    if (pos_enc_levels < 0 || dir_enc_levels < 0) {
      throw ConfigError("field: encoding levels must be >= 0");
    }
    if (skip_layer_index && (*skip_layer_index < 1 || *skip_layer_index >= trunk_depth)) {
      throw ConfigError("field: skip_layer_index must be in [1, trunk_depth)");
    }
  }

  int pos_enc_dim() const { return 3 + 6 * pos_enc_levels; }
  int dir_enc_dim() const { return 3 + 6 * dir_enc_levels; }

  json to_json() const {
    json j;
    j["trunk_depth"] = trunk_depth;
    j["trunk_width"] = trunk_width;
    j["head_width"] = head_width;
    j["pos_enc_levels"] = pos_enc_levels;
    j["dir_enc_levels"] = dir_enc_levels;
    if (skip_layer_index) {
      j["skip_layer_index"] = *skip_layer_index;
    } else {
      j["skip_layer_index"] = nullptr;
    }
    j["uncertainty_head_enabled"] = uncertainty_head_enabled;
    return j;
  }

  static FieldConfig from_json(const json& j) {
    FieldConfig c;
    c.trunk_depth = j.at("trunk_depth").get<int>();
    c.trunk_width = j.at("trunk_width").get<int>();
    c.head_width = j.at("head_width").get<int>();
    c.pos_enc_levels = j.at("pos_enc_levels").get<int>();
    c.dir_enc_levels = j.at("dir_enc_levels").get<int>();
    if (j.contains("skip_layer_index") && !j.at("skip_layer_index").is_null()) {
      c.skip_layer_index = j.at("skip_layer_index").get<int>();
    }
    c.uncertainty_head_enabled = j.at("uncertainty_head_enabled").get<bool>();
    c.validate();
    return c;
  }

  bool operator==(const FieldConfig&) const = default;
};

// Frequency features [v, sin(2^k pi v), cos(2^k pi v)] for k = 0..L-1,
// grouped as [v(3) | sin_0(3) cos_0(3) | sin_1(3) cos_1(3) | ...].
// Higher harmonics come from angle doubling of the base sin/cos pair.
template <typename R>
diff::Mat<R> encode_points(const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>& pts,
                           int levels) {
  const Eigen::Index n = pts.rows();
  diff::Mat<R> out(n, 3 + 6 * levels);
  for (Eigen::Index i = 0; i < n; i++) {
    for (int a = 0; a < 3; a++) {
      const double v = pts(i, a);
      out(i, a) = static_cast<R>(v);
      double s = std::sin(geom::kPi * v);
      double c = std::cos(geom::kPi * v);
      for (int k = 0; k < levels; k++) {
        out(i, 3 + 6 * k + a) = static_cast<R>(s);
        out(i, 3 + 6 * k + 3 + a) = static_cast<R>(c);
        const double s2 = 2.0 * s * c;
        const double c2 = c * c - s * s;
        s = s2;
        c = c2;
      }
    }
  }
  return out;
}

inline std::array<double, 15> encode_position(const geom::Vec3& x, int levels) {
  if (levels > 2) throw UsageError("encode_position: fixed-size helper supports levels <= 2");
  Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> m(1, 3);
  m.row(0) = x.transpose();
  auto enc = encode_points<double>(m, levels);
  std::array<double, 15> out{};
  for (Eigen::Index i = 0; i < enc.cols(); i++) out[static_cast<std::size_t>(i)] = enc(0, i);
  return out;
}

enum class Role { student, teacher };

template <typename R>
struct FieldSample {
  std::array<R, 3> color{};
  R sigma = 0;
  R beta_raw = 0;
};

// Query heads as graph nodes; shapes [Q,1], [Q,3], [Q,1].
struct QueryNodes {
  std::int32_t sigma = -1;
  std::int32_t color = -1;
  std::int32_t beta_raw = -1;  // -1 when the uncertainty head is disabled
};

template <typename R>
class FieldModel {
 public:
  using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

  FieldModel() = default;

  static FieldModel init(const FieldConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    FieldModel m;
    m.cfg_ = cfg;
    Rng rng(splitmix64(seed ^ 0x6669656c64ULL));
    int in = cfg.pos_enc_dim();
    for (int l = 0; l < cfg.trunk_depth; l++) {
      if (cfg.skip_layer_index && *cfg.skip_layer_index == l) in += cfg.pos_enc_dim();
      m.add_linear("trunk." + std::to_string(l), in, cfg.trunk_width, rng);
      in = cfg.trunk_width;
    }
    m.add_linear("density", cfg.trunk_width, 1, rng);
    // start slightly opaque: a relu density head with a dead field at init
    // receives no gradient at all, so give the pre-activation a positive bias
    m.params_.at("density.b").value.array() += R(0.5);
    const int head_in = cfg.trunk_width + cfg.dir_enc_dim();
    m.add_linear("color.0", head_in, cfg.head_width, rng);
    m.add_linear("color.1", cfg.head_width, 3, rng);
    if (cfg.uncertainty_head_enabled) {
      m.add_linear("uncert.0", head_in, cfg.head_width, rng);
      m.add_linear("uncert.1", cfg.head_width, 1, rng);
    }
    return m;
  }

  const FieldConfig& config() const { return cfg_; }
  Role role() const { return role_; }
  int step_trained_through() const { return step_trained_through_; }
  void set_step_trained_through(int t) { step_trained_through_ = t; }

  diff::ParameterSet<R>& params() {
    if (role_ != Role::student) throw UsageError("mutable access to a teacher model");
    return params_;
  }
  const diff::ParameterSet<R>& params_view() const { return params_; }
  std::uint64_t checksum() const { return params_.checksum(); }

  // Build the field heads on a graph. `trainable` binds parameters so that
  // backward reaches them; a teacher model only ever offers the const route.
  QueryNodes build_query(diff::Graph<R>& g, const Points& positions, const Points& dirs,
                         bool trainable) {
    if (trainable && role_ != Role::student) {
      throw UsageError("trainable query on a teacher model");
    }
    return build_query_impl(g, positions, dirs, trainable);
  }
  QueryNodes build_query(diff::Graph<R>& g, const Points& positions, const Points& dirs) const {
    return const_cast<FieldModel*>(this)->build_query_impl(g, positions, dirs, false);
  }

  FieldSample<R> query(const geom::Vec3& x, const geom::Vec3& d) const {
    Points px(1, 3), pd(1, 3);
    px.row(0) = x.transpose();
    pd.row(0) = d.transpose();
    diff::Graph<R> g;
    auto q = build_query(g, px, pd);
    FieldSample<R> s;
    s.sigma = g.value(q.sigma)(0, 0);
    for (int i = 0; i < 3; i++) s.color[static_cast<std::size_t>(i)] = g.value(q.color)(0, i);
    s.beta_raw = q.beta_raw >= 0 ? g.value(q.beta_raw)(0, 0) : R(0);
    return s;
  }

  FieldModel snapshot_as_teacher() const {
    if (role_ != Role::student) throw UsageError("snapshot_as_teacher: model is not a student");
    FieldModel t = *this;
    t.role_ = Role::teacher;
    return t;
  }

  FieldModel init_student_from_teacher() const {
    if (role_ != Role::teacher) throw UsageError("init_student_from_teacher: model is not a teacher");
    FieldModel s = *this;
    s.role_ = Role::student;
    return s;
  }

  // Writes <stem>.unkd (parameters) and <stem>.json (config sidecar).
  void save(const std::filesystem::path& stem) const {
    params_.save(stem.string() + ".unkd");
    json j;
    j["config"] = cfg_.to_json();
    j["role"] = role_ == Role::teacher ? "teacher" : "student";
    j["step_trained_through"] = step_trained_through_;
    std::ofstream os(stem.string() + ".json");
    if (!os) throw DataError("cannot write sidecar: " + stem.string() + ".json");
    os << j.dump(2) << "\n";
  }

  static FieldModel load(const std::filesystem::path& stem) {
    std::ifstream is(stem.string() + ".json");
    if (!is) throw DataError("cannot open sidecar: " + stem.string() + ".json");
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw DataError("malformed sidecar " + stem.string() + ".json: " + e.what());
    }
    FieldModel m;
    m.cfg_ = FieldConfig::from_json(j.at("config"));
    m.role_ = j.at("role").get<std::string>() == "teacher" ? Role::teacher : Role::student;
    m.step_trained_through_ = j.at("step_trained_through").get<int>();
    m.params_ = diff::ParameterSet<R>::load(stem.string() + ".unkd");
    return m;
  }

 private:
  void add_linear(const std::string& name, int in, int out, Rng& rng) {
    auto& w = params_.add(name + ".w", in, out);
    auto& b = params_.add(name + ".b", 1, out);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index i = 0; i < w.value.size(); i++) {
      w.value.data()[i] = static_cast<R>(rng.uniform(-bound, bound));
    }
    for (Eigen::Index i = 0; i < b.value.size(); i++) {
      b.value.data()[i] = static_cast<R>(rng.uniform(-bound, bound));
    }
  }

  std::int32_t bind(diff::Graph<R>& g, const std::string& name, bool trainable) {
    if (trainable) return g.param(params_.at(name));
    return g.input(params_.at(name).value);
  }

  std::int32_t linear(diff::Graph<R>& g, const std::string& name, std::int32_t x, bool trainable) {
    return g.affine(x, bind(g, name + ".w", trainable), bind(g, name + ".b", trainable));
  }

  std::int32_t linear_relu(diff::Graph<R>& g, const std::string& name, std::int32_t x,
                           bool trainable) {
    return g.affine_relu(x, bind(g, name + ".w", trainable), bind(g, name + ".b", trainable));
  }

  QueryNodes build_query_impl(diff::Graph<R>& g, const Points& positions, const Points& dirs,
                              bool trainable) {
    if (positions.rows() != dirs.rows()) throw UsageError("query: positions/dirs count mismatch");
    for (Eigen::Index i = 0; i < dirs.rows(); i++) {
      if (std::abs(dirs.row(i).norm() - 1.0) > 1e-6) {
        throw UsageError("query: direction not normalized");
      }
    }
    const auto x_enc = g.input(encode_points<R>(positions, cfg_.pos_enc_levels));
    const auto d_enc = g.input(encode_points<R>(dirs, cfg_.dir_enc_levels));

    auto h = linear_relu(g, "trunk.0", x_enc, trainable);
    for (int l = 1; l < cfg_.trunk_depth; l++) {
      auto in = (cfg_.skip_layer_index && *cfg_.skip_layer_index == l) ? g.concat_cols(h, x_enc) : h;
      h = linear_relu(g, "trunk." + std::to_string(l), in, trainable);
    }

    QueryNodes out;
    out.sigma = g.relu(linear(g, "density", h, trainable));
    const auto hd = g.concat_cols(h, d_enc);
    out.color = g.sigmoid(linear(g, "color.1", linear_relu(g, "color.0", hd, trainable), trainable));
    if (cfg_.uncertainty_head_enabled) {
      out.beta_raw = linear(g, "uncert.1", linear_relu(g, "uncert.0", hd, trainable), trainable);
    }
    return out;
  }

  FieldConfig cfg_;
  diff::ParameterSet<R> params_;
  Role role_ = Role::student;
  int step_trained_through_ = -1;
};

}  // namespace incnerf::field
