#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "incnerf/errors.hpp"

namespace incnerf::diff {

template <typename R>
using Mat = Eigen::Matrix<R, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

// log(1 + e^x) with the stable branch; clamped away from zero so the result
// stays strictly positive even when e^x underflows.
template <typename R>
inline R softplus_scalar(R x) {
  const R v = std::max(x, R(0)) + std::log1p(std::exp(-std::abs(x)));
  return std::max(v, std::numeric_limits<R>::denorm_min());
}

template <typename R>
inline R sigmoid_scalar(R x) {
  if (x >= R(0)) {
    const R e = std::exp(-x);
    return R(1) / (R(1) + e);
  }
  const R e = std::exp(x);
  return e / (R(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameters

template <typename R>
struct Parameter {
  std::string name;
  Mat<R> value;
  Mat<R> grad;  // empty until zero_grads()/backward touches it

  bool grad_live() const { return grad.size() != 0; }
};

template <typename R>
class ParameterSet {
 public:
  Parameter<R>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    for (const auto& p : params_) {
      if (p.name == name) throw UsageError("duplicate parameter name: " + name);
    }
    params_.push_back(Parameter<R>{name, Mat<R>::Zero(rows, cols), Mat<R>()});
    return params_.back();
  }

  Parameter<R>& at(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return p;
    }
    throw UsageError("unknown parameter: " + name);
  }
  const Parameter<R>& at(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->at(name);
  }

  std::deque<Parameter<R>>& entries() { return params_; }
  const std::deque<Parameter<R>>& entries() const { return params_; }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p.grad = Mat<R>::Zero(p.value.rows(), p.value.cols());
  }

  void clear_grads() {
    for (auto& p : params_) p.grad.resize(0, 0);
  }

  // FNV-1a over the raw value bytes, in entry order.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(data);
      for (std::size_t i = 0; i < n; i++) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params_) {
      mix(p.name.data(), p.name.size());
      mix(p.value.data(), sizeof(R) * static_cast<std::size_t>(p.value.size()));
    }
    return h;
  }

  void save(const std::filesystem::path& path) const;
  static ParameterSet load(const std::filesystem::path& path);

 private:
  std::deque<Parameter<R>> params_;
};

// ---------------------------------------------------------------------------
// Checkpoint format: "UNKD" magic, u32 version, u32 block count, then per
// block: u32 name length, name bytes, u32 rank, u32 dims[rank], float64
// values row-major. Everything little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError(std::string("truncated checkpoint: ") + what);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; i++) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is, const char* what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError(std::string("truncated checkpoint: ") + what);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; i++) u |= std::uint64_t(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

}  // namespace detail

template <typename R>
void ParameterSet<R>::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open checkpoint for writing: " + path.string());
  os.write("UNKD", 4);
  detail::put_u32(os, 1);  // version
  detail::put_u32(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    detail::put_u32(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::put_u32(os, 2);
    detail::put_u32(os, static_cast<std::uint32_t>(p.value.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(p.value.cols()));
    for (Eigen::Index i = 0; i < p.value.size(); i++) {
      detail::put_f64(os, static_cast<double>(p.value.data()[i]));
    }
  }
  if (!os) throw DataError("write failed: " + path.string());
}

template <typename R>
ParameterSet<R> ParameterSet<R>::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "UNKD", 4) != 0) {
    throw DataError("bad checkpoint magic: " + path.string());
  }
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != 1) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "block count");
  ParameterSet<R> ps;
  for (std::uint32_t i = 0; i < count; i++) {
    const std::uint32_t name_len = detail::get_u32(is, "name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw DataError("truncated checkpoint: name");
    const std::uint32_t rank = detail::get_u32(is, "rank");
    if (rank != 2) throw DataError("unsupported block rank " + std::to_string(rank));
    const std::uint32_t rows = detail::get_u32(is, "rows");
    const std::uint32_t cols = detail::get_u32(is, "cols");
    auto& p = ps.add(name, rows, cols);
    for (Eigen::Index k = 0; k < p.value.size(); k++) {
      p.value.data()[k] = static_cast<R>(detail::get_f64(is, "values"));
    }
  }
  return ps;
}

// ---------------------------------------------------------------------------
// Computation record (define-by-run tape)

enum class OpKind : std::uint8_t {
  input,
  param,
  affine,
  affine_relu,
  relu,
  softplus,
  sigmoid,
  exp,
  log,
  square,
  mul,
  div,
  scale_add,
  axpb,
  concat_cols,
  slice_cols,
  reshape,
  rowsum,
  cumsum_exclusive,
  sum,
  mean,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::input: return "input";
    case OpKind::param: return "param";
    case OpKind::affine: return "affine";
    case OpKind::affine_relu: return "affine-relu";
    case OpKind::relu: return "relu";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::square: return "square";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::scale_add: return "scale-add";
    case OpKind::axpb: return "axpb";
    case OpKind::concat_cols: return "concat";
    case OpKind::slice_cols: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::rowsum: return "rowsum";
    case OpKind::cumsum_exclusive: return "cumsum-exclusive";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
  }
  return "?";
}

template <typename R>
class Graph {
 public:
  using NodeId = std::int32_t;

  explicit Graph(bool check_finite = true) : check_finite_(check_finite) {}

  NodeId input(Mat<R> v) {
    Node n;
    n.kind = OpKind::input;
    n.val = std::move(v);
    n.needs_grad = false;
    return push(std::move(n), /*check=*/false);
  }

  // Leaf bound to a parameter; backward accumulates into p.grad.
  NodeId param(Parameter<R>& p) {
    Node n;
    n.kind = OpKind::param;
    n.val = p.value;
    n.bound = &p;
    n.needs_grad = true;
    return push(std::move(n), /*check=*/false);
  }

  // x:[N,in] * w:[in,out] + b:[1,out] broadcast over rows.
  NodeId affine(NodeId x, NodeId w, NodeId b) {
    const Mat<R>& X = val(x);
    const Mat<R>& W = val(w);
    const Mat<R>& B = val(b);
    if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) {
      throw shape_error(OpKind::affine, {x, w, b});
    }
    Node n = make(OpKind::affine, x, w, b);
    n.val.noalias() = X * W;
    n.val.rowwise() += B.row(0);
    return push(std::move(n));
  }

  NodeId relu(NodeId x) {
    Node n = make(OpKind::relu, x);
    n.val = val(x).cwiseMax(R(0));
    return push(std::move(n));
  }

  // fused affine followed by relu; one buffer instead of two
  NodeId affine_relu(NodeId x, NodeId w, NodeId b) {
    const Mat<R>& X = val(x);
    const Mat<R>& W = val(w);
    const Mat<R>& B = val(b);
    if (X.cols() != W.rows() || B.rows() != 1 || B.cols() != W.cols()) {
      throw shape_error(OpKind::affine_relu, {x, w, b});
    }
    Node n = make(OpKind::affine_relu, x, w, b);
    n.val = B.row(0).replicate(X.rows(), 1);
    n.val.noalias() += X * W;
    n.val = n.val.cwiseMax(R(0));
    return push(std::move(n));
  }

  NodeId softplus(NodeId x) {
    Node n = make(OpKind::softplus, x);
    n.val = val(x).unaryExpr([](R v) { return detail::softplus_scalar(v); });
    return push(std::move(n));
  }

  NodeId sigmoid(NodeId x) {
    Node n = make(OpKind::sigmoid, x);
    n.val = val(x).unaryExpr([](R v) { return detail::sigmoid_scalar(v); });
    return push(std::move(n));
  }

  NodeId exp(NodeId x) {
    Node n = make(OpKind::exp, x);
    n.val = val(x).array().exp().matrix();
    return push(std::move(n));
  }

  NodeId log(NodeId x) {
    if ((val(x).array() <= R(0)).any()) {
      throw NumericError("log: non-positive input");
    }
    Node n = make(OpKind::log, x);
    n.val = val(x).array().log().matrix();
    return push(std::move(n));
  }

  NodeId square(NodeId x) {
    Node n = make(OpKind::square, x);
    n.val = val(x).array().square().matrix();
    return push(std::move(n));
  }

  NodeId mul(NodeId a, NodeId b) {
    require_same_shape(OpKind::mul, a, b);
    Node n = make(OpKind::mul, a, b);
    n.val = val(a).cwiseProduct(val(b));
    return push(std::move(n));
  }

  NodeId div(NodeId a, NodeId b) {
    require_same_shape(OpKind::div, a, b);
    Node n = make(OpKind::div, a, b);
    n.val = val(a).cwiseQuotient(val(b));
    return push(std::move(n));
  }

  // alpha*x + beta*y, elementwise
  NodeId scale_add(R alpha, NodeId x, R beta, NodeId y) {
    require_same_shape(OpKind::scale_add, x, y);
    Node n = make(OpKind::scale_add, x, y);
    n.alpha = alpha;
    n.beta = beta;
    n.val = alpha * val(x) + beta * val(y);
    return push(std::move(n));
  }

  // a*x + b, elementwise with scalar a, b
  NodeId axpb(NodeId x, R a, R b) {
    Node n = make(OpKind::axpb, x);
    n.alpha = a;
    n.beta = b;
    n.val = (a * val(x)).array() + b;
    return push(std::move(n));
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    if (val(a).rows() != val(b).rows()) throw shape_error(OpKind::concat_cols, {a, b});
    Node n = make(OpKind::concat_cols, a, b);
    n.val.resize(val(a).rows(), val(a).cols() + val(b).cols());
    n.val.leftCols(val(a).cols()) = val(a);
    n.val.rightCols(val(b).cols()) = val(b);
    return push(std::move(n));
  }

  NodeId slice_cols(NodeId x, Eigen::Index c0, Eigen::Index count) {
    if (c0 < 0 || count < 1 || c0 + count > val(x).cols()) {
      throw shape_error(OpKind::slice_cols, {x});
    }
    Node n = make(OpKind::slice_cols, x);
    n.i0 = c0;
    n.i1 = count;
    n.val = val(x).middleCols(c0, count);
    return push(std::move(n));
  }

  // Row-major data reinterpretation; rows*cols must match.
  NodeId reshape(NodeId x, Eigen::Index rows, Eigen::Index cols) {
    if (rows * cols != val(x).size()) throw shape_error(OpKind::reshape, {x});
    Node n = make(OpKind::reshape, x);
    n.val = Eigen::Map<const Mat<R>>(val(x).data(), rows, cols);
    return push(std::move(n), /*check=*/false);
  }

  // [N,M] -> [N,1]
  NodeId rowsum(NodeId x) {
    Node n = make(OpKind::rowsum, x);
    n.val = val(x).rowwise().sum();
    return push(std::move(n));
  }

  // y[r,j] = sum_{k<j} x[r,k]
  NodeId cumsum_exclusive(NodeId x) {
    const Mat<R>& X = val(x);
    Node n = make(OpKind::cumsum_exclusive, x);
    n.val.resize(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); r++) {
      R acc = 0;
      for (Eigen::Index j = 0; j < X.cols(); j++) {
        n.val(r, j) = acc;
        acc += X(r, j);
      }
    }
    return push(std::move(n));
  }

  NodeId sum(NodeId x) {
    Node n = make(OpKind::sum, x);
    n.val.resize(1, 1);
    n.val(0, 0) = val(x).sum();
    return push(std::move(n));
  }

  NodeId mean(NodeId x) {
    Node n = make(OpKind::mean, x);
    n.val.resize(1, 1);
    n.val(0, 0) = val(x).mean();
    return push(std::move(n));
  }

  const Mat<R>& value(NodeId id) const { return val(id); }

  R scalar(NodeId id) const {
    const Mat<R>& v = val(id);
    if (v.size() != 1) throw UsageError("scalar() on non-scalar node");
    return v(0, 0);
  }

  std::size_t size() const { return nodes_.size(); }

  // Reverse-mode accumulation from a scalar loss into bound parameter grads.
  // Call ParameterSet::zero_grads() first; accumulation is +=.
  void backward(NodeId loss) {
    if (val(loss).size() != 1) throw UsageError("backward: loss must be scalar");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    grad_of(loss) = Mat<R>::Ones(1, 1);

    for (NodeId id = loss; id >= 0; id--) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      const Mat<R>& g = n.grad;
      switch (n.kind) {
        case OpKind::input:
          break;
        case OpKind::param:
          if (n.bound->grad.size() == 0) {
            throw UsageError("backward: parameter grads not zeroed (" + n.bound->name + ")");
          }
          n.bound->grad += g;
          break;
        case OpKind::affine: {
          const Mat<R>& X = val(n.a);
          const Mat<R>& W = val(n.b);
          if (needs(n.a)) grad_of(n.a).noalias() += g * W.transpose();
          if (needs(n.b)) grad_of(n.b).noalias() += X.transpose() * g;
          if (needs(n.c)) grad_of(n.c).row(0) += g.colwise().sum();
          break;
        }
        case OpKind::affine_relu: {
          // y = max(xW + b, 0); y > 0 iff the pre-activation was positive
          const Mat<R>& X = val(n.a);
          const Mat<R>& W = val(n.b);
          const Mat<R> gm =
              (g.array() * (n.val.array() > R(0)).template cast<R>()).matrix();
          if (needs(n.a)) grad_of(n.a).noalias() += gm * W.transpose();
          if (needs(n.b)) grad_of(n.b).noalias() += X.transpose() * gm;
          if (needs(n.c)) grad_of(n.c).row(0) += gm.colwise().sum();
          break;
        }
        case OpKind::relu:
          if (needs(n.a)) {
            grad_of(n.a).array() +=
                g.array() * (val(n.a).array() > R(0)).template cast<R>();
          }
          break;
        case OpKind::softplus:
          if (needs(n.a)) {
            grad_of(n.a).array() +=
                g.array() * val(n.a).unaryExpr([](R v) { return detail::sigmoid_scalar(v); }).array();
          }
          break;
        case OpKind::sigmoid:
          if (needs(n.a)) {
            grad_of(n.a).array() += g.array() * (n.val.array() * (R(1) - n.val.array()));
          }
          break;
        case OpKind::exp:
          if (needs(n.a)) grad_of(n.a).array() += g.array() * n.val.array();
          break;
        case OpKind::log:
          if (needs(n.a)) grad_of(n.a).array() += g.array() / val(n.a).array();
          break;
        case OpKind::square:
          if (needs(n.a)) grad_of(n.a).array() += R(2) * g.array() * val(n.a).array();
          break;
        case OpKind::mul:
          if (needs(n.a)) grad_of(n.a).array() += g.array() * val(n.b).array();
          if (needs(n.b)) grad_of(n.b).array() += g.array() * val(n.a).array();
          break;
        case OpKind::div:
          if (needs(n.a)) grad_of(n.a).array() += g.array() / val(n.b).array();
          if (needs(n.b)) {
            grad_of(n.b).array() -= g.array() * val(n.a).array() / val(n.b).array().square();
          }
          break;
        case OpKind::scale_add:
          if (needs(n.a)) grad_of(n.a) += n.alpha * g;
          if (needs(n.b)) grad_of(n.b) += n.beta * g;
          break;
        case OpKind::axpb:
          if (needs(n.a)) grad_of(n.a) += n.alpha * g;
          break;
        case OpKind::concat_cols:
          if (needs(n.a)) grad_of(n.a) += g.leftCols(val(n.a).cols());
          if (needs(n.b)) grad_of(n.b) += g.rightCols(val(n.b).cols());
          break;
        case OpKind::slice_cols:
          if (needs(n.a)) grad_of(n.a).middleCols(n.i0, n.i1) += g;
          break;
        case OpKind::reshape:
          if (needs(n.a)) {
            grad_of(n.a) +=
                Eigen::Map<const Mat<R>>(g.data(), val(n.a).rows(), val(n.a).cols());
          }
          break;
        case OpKind::rowsum:
          if (needs(n.a)) grad_of(n.a).colwise() += g.col(0);
          break;
        case OpKind::cumsum_exclusive:
          if (needs(n.a)) {
            Mat<R>& ga = grad_of(n.a);
            for (Eigen::Index r = 0; r < g.rows(); r++) {
              R acc = 0;
              for (Eigen::Index j = g.cols() - 1; j >= 0; j--) {
                acc += g(r, j);
                // exclusive: grad of x[r,j] collects outputs strictly after j
                ga(r, j) += acc - g(r, j);
              }
            }
          }
          break;
        case OpKind::sum:
          if (needs(n.a)) grad_of(n.a).array() += g(0, 0);
          break;
        case OpKind::mean:
          if (needs(n.a)) grad_of(n.a).array() += g(0, 0) / R(val(n.a).size());
          break;
      }
    }
  }

 private:
  struct Node {
    OpKind kind = OpKind::input;
    NodeId a = -1, b = -1, c = -1;
    R alpha = 0, beta = 0;
    Eigen::Index i0 = 0, i1 = 0;
    Mat<R> val;
    Mat<R> grad;
    Parameter<R>* bound = nullptr;
    bool needs_grad = false;
  };

  Node make(OpKind kind, NodeId a, NodeId b = -1, NodeId c = -1) {
    Node n;
    n.kind = kind;
    n.a = a;
    n.b = b;
    n.c = c;
    n.needs_grad = needs(a) || (b >= 0 && needs(b)) || (c >= 0 && needs(c));
    return n;
  }

  NodeId push(Node n, bool check = true) {
    // a single fused reduction: any NaN/Inf element drives the sum non-finite
    if (check && check_finite_ && !std::isfinite(static_cast<double>(n.val.sum()))) {
      throw NumericError(std::string("non-finite value produced by op '") + op_name(n.kind) + "'");
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const Mat<R>& val(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).val; }

  bool needs(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  Mat<R>& grad_of(NodeId id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad = Mat<R>::Zero(n.val.rows(), n.val.cols());
    return n.grad;
  }

  UsageError shape_error(OpKind kind, std::initializer_list<NodeId> ids) const {
    std::string msg = std::string("shape mismatch in op '") + op_name(kind) + "':";
    for (NodeId id : ids) {
      msg += " [" + std::to_string(val(id).rows()) + "x" + std::to_string(val(id).cols()) + "]";
    }
    return UsageError(msg);
  }

  void require_same_shape(OpKind kind, NodeId a, NodeId b) const {
    if (val(a).rows() != val(b).rows() || val(a).cols() != val(b).cols()) {
      throw shape_error(kind, {a, b});
    }
  }

  std::vector<Node> nodes_;
  bool check_finite_;
};

// ---------------------------------------------------------------------------
// Adam

template <typename R>
struct AdamConfig {
  R lr = R(5e-4);
  R beta1 = R(0.9);
  R beta2 = R(0.999);
  R eps = R(1e-8);
};

template <typename R>
class AdamState {
 public:
  AdamState() = default;
  explicit AdamState(const ParameterSet<R>& ps) {
    for (const auto& p : ps.entries()) {
      m_.push_back(Mat<R>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Mat<R>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  std::int64_t step_count() const { return step_count_; }
  std::vector<Mat<R>>& first_moment() { return m_; }
  std::vector<Mat<R>>& second_moment() { return v_; }

  template <typename R2>
  friend void adam_step(ParameterSet<R2>&, AdamState<R2>&, const AdamConfig<R2>&);

 private:
  std::vector<Mat<R>> m_, v_;
  std::int64_t step_count_ = 0;
};

template <typename R>
void adam_step(ParameterSet<R>& ps, AdamState<R>& st, const AdamConfig<R>& cfg) {
  auto& entries = ps.entries();
  if (st.m_.size() != entries.size()) throw UsageError("adam_step: state does not match parameters");
  for (std::size_t i = 0; i < entries.size(); i++) {
    if (!entries[i].grad_live()) {
      throw UsageError("adam_step: missing grad for parameter " + entries[i].name);
    }
    if (st.m_[i].rows() != entries[i].value.rows() || st.m_[i].cols() != entries[i].value.cols()) {
      throw UsageError("adam_step: moment shape mismatch for " + entries[i].name);
    }
  }
  st.step_count_++;
  const R t = static_cast<R>(st.step_count_);
  const R bc1 = R(1) - std::pow(cfg.beta1, t);
  const R bc2 = R(1) - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < entries.size(); i++) {
    auto& p = entries[i];
    st.m_[i] = cfg.beta1 * st.m_[i] + (R(1) - cfg.beta1) * p.grad;
    st.v_[i].array() = cfg.beta2 * st.v_[i].array() + (R(1) - cfg.beta2) * p.grad.array().square();
    p.value.array() -=
        cfg.lr * (st.m_[i].array() / bc1) / ((st.v_[i].array() / bc2).sqrt() + cfg.eps);
  }
  ps.clear_grads();
}

// ---------------------------------------------------------------------------
// Finite-difference harness. The builder constructs the scalar loss on a
// fresh graph from the current parameter values; central differences then
// probe every scalar parameter.

struct FiniteDiffBlock {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool zero_zero = true;  // both routes vanished everywhere in this block
};

struct FiniteDiffReport {
  std::vector<FiniteDiffBlock> blocks;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool passed = true;
};

template <typename R>
FiniteDiffReport finite_diff_check(const std::function<typename Graph<R>::NodeId(Graph<R>&)>& builder,
                                   ParameterSet<R>& params, double h, double tol) {
  if (h <= 0) throw UsageError("finite_diff_check: h must be positive");

  params.zero_grads();
  Graph<R> g;
  g.backward(builder(g));
  std::vector<Mat<R>> analytic;
  for (auto& p : params.entries()) analytic.push_back(p.grad);
  params.clear_grads();

  auto eval = [&]() -> double {
    Graph<R> ge;
    return static_cast<double>(ge.scalar(builder(ge)));
  };

  FiniteDiffReport report;
  report.tol = tol;
  const double denom_floor = 1e-10;
  for (std::size_t bi = 0; bi < params.entries().size(); bi++) {
    auto& p = params.entries()[bi];
    FiniteDiffBlock block;
    block.name = p.name;
    for (Eigen::Index k = 0; k < p.value.size(); k++) {
      const R saved = p.value.data()[k];
      p.value.data()[k] = saved + static_cast<R>(h);
      const double fp = eval();
      p.value.data()[k] = saved - static_cast<R>(h);
      const double fm = eval();
      p.value.data()[k] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double ad = static_cast<double>(analytic[bi].data()[k]);
      const double abs_err = std::abs(ad - fd);
      const double denom = std::max(std::abs(ad), std::abs(fd));
      block.max_abs_err = std::max(block.max_abs_err, abs_err);
      if (denom > denom_floor) {
        block.zero_zero = false;
        block.max_rel_err = std::max(block.max_rel_err, abs_err / denom);
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
    report.blocks.push_back(std::move(block));
  }
  report.passed = report.max_rel_err < tol;
  return report;
}

}  // namespace incnerf::diff
