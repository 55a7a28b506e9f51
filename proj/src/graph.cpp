#include "rigidreg/graph.hpp"

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rigidreg/geom3d.hpp"
#include "rigidreg/random.hpp"

namespace rigidreg::ad {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const EMat> cmap(const Tensor& t) {
  return Eigen::Map<const EMat>(t.data.data(), t.dim(0), t.dim(1));
}

Eigen::Map<EMat> mmap(Tensor& t) {
  return Eigen::Map<EMat>(t.data.data(), t.dim(0), t.dim(1));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Sum of a multiset in a canonical order: sort ascending, collapse runs of
// equal values into count*value, accumulate run by run. The result does not
// depend on the original element order, and duplicating every element exactly
// doubles it (count scaling and the subsequent adds commute with rounding).
// The set-level normalizations rely on both properties.
double canonical_sum(std::vector<double>& buf) {
  std::sort(buf.begin(), buf.end());
  double total = 0.0;
  size_t i = 0;
  const size_t n = buf.size();
  while (i < n) {
    size_t j = i + 1;
    while (j < n && buf[j] == buf[i]) ++j;
    double v = buf[i] == 0.0 ? 0.0 : buf[i];
    total += static_cast<double>(j - i) * v;
    i = j;
  }
  return total;
}

// Canonical sum of (x - mu)^2 given x already sorted ascending. The squared
// deviations form two monotone runs around mu (descending then ascending), so
// the sorted order is recovered by a linear merge instead of a second sort.
// Equal values from both runs collapse into one count, exactly as if the
// squared deviations had been sorted and run-grouped.
double canonical_sq_dev_sum(const std::vector<double>& xs, double mu) {
  const size_t n = xs.size();
  size_t split = std::lower_bound(xs.begin(), xs.end(), mu) - xs.begin();
  // left run: indices [0, split) traversed backwards gives ascending d
  // right run: indices [split, n) traversed forwards gives ascending d
  size_t li = split, ri = split;
  double total = 0.0;
  double run_value = 0.0;
  double run_count = 0.0;
  bool have_run = false;
  auto flush = [&]() {
    if (have_run) total += run_count * (run_value == 0.0 ? 0.0 : run_value);
  };
  while (li > 0 || ri < n) {
    double dl = li > 0 ? (xs[li - 1] - mu) * (xs[li - 1] - mu)
                       : std::numeric_limits<double>::infinity();
    double dr = ri < n ? (xs[ri] - mu) * (xs[ri] - mu)
                       : std::numeric_limits<double>::infinity();
    double d = dl <= dr ? dl : dr;
    if (dl <= dr)
      --li;
    else
      ++ri;
    if (have_run && d == run_value) {
      run_count += 1.0;
    } else {
      flush();
      run_value = d;
      run_count = 1.0;
      have_run = true;
    }
  }
  flush();
  return total;
}

// Forward products accumulate over k in sequence, with an identical
// instruction path for every output row. Unlike blocked GEMM (where a row's
// rounding depends on which block it lands in), a row's result is independent
// of its position, which the permutation/duplication guarantees require.
// Backward passes have no such contract and use Eigen's products.
void rowwise_matmul(const Tensor& x, const Tensor& b, Tensor& y, const Tensor* bias) {
  const int n = x.dim(0), kk = x.dim(1), m = b.dim(1);
  for (int i = 0; i < n; ++i) {
    double* yr = &y.data[static_cast<size_t>(i) * m];
    if (bias) {
      for (int j = 0; j < m; ++j) yr[j] = bias->data[static_cast<size_t>(j)];
    } else {
      for (int j = 0; j < m; ++j) yr[j] = 0.0;
    }
    const double* xr = &x.data[static_cast<size_t>(i) * kk];
    for (int k = 0; k < kk; ++k) {
      const double a = xr[k];
      const double* br = &b.data[static_cast<size_t>(k) * m];
      for (int j = 0; j < m; ++j) yr[j] += a * br[j];
    }
  }
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_scalar(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

Eigen::Matrix3d mat3_of(const Tensor& t, int64_t offset = 0) {
  Eigen::Matrix3d m;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m(i, j) = t.data[static_cast<size_t>(offset + i * 3 + j)];
  return m;
}

void mat3_into(const Eigen::Matrix3d& m, Tensor& t, int64_t offset = 0) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t.data[static_cast<size_t>(offset + i * 3 + j)] = m(i, j);
}

void mat3_add(const Eigen::Matrix3d& m, Tensor& t, int64_t offset = 0) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t.data[static_cast<size_t>(offset + i * 3 + j)] += m(i, j);
}

Eigen::Vector3d vee_asym3(const Eigen::Matrix3d& a) {
  return Eigen::Vector3d(a(2, 1) - a(1, 2), a(0, 2) - a(2, 0), a(1, 0) - a(0, 1));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Affine: return "affine";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddRow: return "add_row";
    case Op::RowScale: return "row_scale";
    case Op::ScaleByScalar: return "scale_by";
    case Op::Reciprocal: return "reciprocal";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Abs: return "abs";
    case Op::Square: return "square";
    case Op::ContextNorm: return "context_norm";
    case Op::MaxPoolRows: return "max_pool_rows";
    case Op::Conv2d: return "conv2d";
    case Op::ConcatRows: return "concat_rows";
    case Op::ConcatCols: return "concat_cols";
    case Op::Reshape: return "reshape";
    case Op::Slice: return "slice";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowSum: return "row_sum";
    case Op::SumCanon: return "sum_canon";
    case Op::ColSumCanon: return "col_sum_canon";
    case Op::WeightedCorr3: return "weighted_corr3";
    case Op::GemanMcClure: return "geman_mcclure";
    case Op::BceWithLogits: return "bce_with_logits";
    case Op::Svd3: return "svd3";
    case Op::DetCorr3: return "det_corr3";
    case Op::ThresholdMask: return "threshold_mask";
    case Op::So3Exp: return "so3_exp";
    case Op::QuatToRot: return "quat_to_rot";
    case Op::Detach: return "detach";
  }
  return "?";
}

Ref Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return Ref{static_cast<int>(nodes_.size()) - 1, 0};
}

const std::vector<int>& Graph::dims_of(Ref r) const {
  return nodes_[static_cast<size_t>(r.node)].out_dims[static_cast<size_t>(r.slot)];
}

Ref Graph::input(const std::string& name, std::vector<int> dims) {
  Node n;
  n.op = Op::Input;
  n.name = name;
  n.out_dims = {std::move(dims)};
  Ref r = push(std::move(n));
  inputs_.emplace_back(name, r);
  return r;
}

Ref Graph::param(const std::string& name, std::vector<int> dims) {
  Node n;
  n.op = Op::Param;
  n.name = name;
  n.out_dims = {std::move(dims)};
  Ref r = push(std::move(n));
  params_.emplace_back(name, r);
  return r;
}

Ref Graph::affine(Ref x, Ref w, Ref b) {
  const auto& dx = dims_of(x);
  const auto& dw = dims_of(w);
  const auto& db = dims_of(b);
  require(dx.size() == 2 && dw.size() == 2 && db.size() == 1, "affine: rank mismatch");
  require(dx[1] == dw[0] && dw[1] == db[0], "affine: shape mismatch");
  Node n;
  n.op = Op::Affine;
  n.args = {x, w, b};
  n.out_dims = {{dx[0], dw[1]}};
  return push(std::move(n));
}

Ref Graph::matmul(Ref a, Ref b) {
  const auto& da = dims_of(a);
  const auto& db = dims_of(b);
  require(da.size() == 2 && db.size() == 2 && da[1] == db[0], "matmul: shape mismatch");
  Node n;
  n.op = Op::MatMul;
  n.args = {a, b};
  n.out_dims = {{da[0], db[1]}};
  return push(std::move(n));
}

Ref Graph::transpose(Ref a) {
  const auto& da = dims_of(a);
  require(da.size() == 2, "transpose: need rank 2");
  Node n;
  n.op = Op::Transpose;
  n.args = {a};
  n.out_dims = {{da[1], da[0]}};
  return push(std::move(n));
}

Ref Graph::add(Ref a, Ref b) {
  require(dims_of(a) == dims_of(b), "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.args = {a, b};
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

Ref Graph::sub(Ref a, Ref b) {
  require(dims_of(a) == dims_of(b), "sub: shape mismatch");
  Node n;
  n.op = Op::Sub;
  n.args = {a, b};
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

Ref Graph::mul(Ref a, Ref b) {
  require(dims_of(a) == dims_of(b), "mul: shape mismatch");
  Node n;
  n.op = Op::Mul;
  n.args = {a, b};
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

Ref Graph::scale(Ref a, double c) {
  Node n;
  n.op = Op::Scale;
  n.args = {a};
  n.a0 = c;
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

Ref Graph::add_row(Ref x, Ref r) {
  const auto& dx = dims_of(x);
  const auto& dr = dims_of(r);
  require(dx.size() == 2 && dr.size() == 1 && dx[1] == dr[0], "add_row: shape mismatch");
  Node n;
  n.op = Op::AddRow;
  n.args = {x, r};
  n.out_dims = {dx};
  return push(std::move(n));
}

Ref Graph::row_scale(Ref x, Ref w) {
  const auto& dx = dims_of(x);
  const auto& dw = dims_of(w);
  require(dx.size() == 2 && dw.size() == 1 && dx[0] == dw[0], "row_scale: shape mismatch");
  Node n;
  n.op = Op::RowScale;
  n.args = {x, w};
  n.out_dims = {dx};
  return push(std::move(n));
}

Ref Graph::scale_by(Ref x, Ref s) {
  require(Tensor::count(dims_of(s)) == 1, "scale_by: scalar expected");
  Node n;
  n.op = Op::ScaleByScalar;
  n.args = {x, s};
  n.out_dims = {dims_of(x)};
  return push(std::move(n));
}

Ref Graph::reciprocal(Ref a) {
  Node n;
  n.op = Op::Reciprocal;
  n.args = {a};
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

#define RIGIDREG_UNARY(fn, opk)            \
  Ref Graph::fn(Ref a) {                   \
    Node n;                                \
    n.op = opk;                            \
    n.args = {a};                          \
    n.out_dims = {dims_of(a)};             \
    return push(std::move(n));             \
  }

RIGIDREG_UNARY(relu, Op::Relu)
RIGIDREG_UNARY(tanh, Op::Tanh)
RIGIDREG_UNARY(sigmoid, Op::Sigmoid)
RIGIDREG_UNARY(abs, Op::Abs)
RIGIDREG_UNARY(square, Op::Square)
#undef RIGIDREG_UNARY

Ref Graph::context_norm(Ref x, double eps) {
  const auto& dx = dims_of(x);
  require(dx.size() == 2, "context_norm: need rank 2");
  Node n;
  n.op = Op::ContextNorm;
  n.args = {x};
  n.a0 = eps;
  n.out_dims = {dx};
  return push(std::move(n));
}

Ref Graph::max_pool_rows(Ref x) {
  const auto& dx = dims_of(x);
  require(dx.size() == 2, "max_pool_rows: need rank 2");
  Node n;
  n.op = Op::MaxPoolRows;
  n.args = {x};
  n.out_dims = {{dx[1]}};
  return push(std::move(n));
}

Ref Graph::concat_rows(const std::vector<Ref>& parts) {
  require(!parts.empty(), "concat_rows: empty");
  int c = dims_of(parts[0])[0];
  for (Ref p : parts)
    require(dims_of(p).size() == 1 && dims_of(p)[0] == c, "concat_rows: shape mismatch");
  Node n;
  n.op = Op::ConcatRows;
  n.args = parts;
  n.out_dims = {{static_cast<int>(parts.size()), c}};
  return push(std::move(n));
}

Ref Graph::concat_cols(Ref a, Ref b) {
  const auto& da = dims_of(a);
  const auto& db = dims_of(b);
  require(da.size() == 2 && db.size() == 2 && da[0] == db[0], "concat_cols: shape mismatch");
  Node n;
  n.op = Op::ConcatCols;
  n.args = {a, b};
  n.out_dims = {{da[0], da[1] + db[1]}};
  return push(std::move(n));
}

Ref Graph::reshape(Ref a, std::vector<int> dims) {
  require(Tensor::count(dims) == Tensor::count(dims_of(a)), "reshape: element count mismatch");
  Node n;
  n.op = Op::Reshape;
  n.args = {a};
  n.out_dims = {std::move(dims)};
  return push(std::move(n));
}

Ref Graph::slice(Ref a, int from, int to) {
  const auto& da = dims_of(a);
  require(da.size() == 1 && from >= 0 && from < to && to <= da[0], "slice: bad range");
  Node n;
  n.op = Op::Slice;
  n.args = {a};
  n.i0 = from;
  n.i1 = to;
  n.out_dims = {{to - from}};
  return push(std::move(n));
}

Ref Graph::sum(Ref a) {
  Node n;
  n.op = Op::Sum;
  n.args = {a};
  n.out_dims = {{}};
  return push(std::move(n));
}

Ref Graph::mean(Ref a) {
  Node n;
  n.op = Op::Mean;
  n.args = {a};
  n.out_dims = {{}};
  return push(std::move(n));
}

Ref Graph::row_sum(Ref a) {
  const auto& da = dims_of(a);
  require(da.size() == 2, "row_sum: need rank 2");
  Node n;
  n.op = Op::RowSum;
  n.args = {a};
  n.out_dims = {{da[0]}};
  return push(std::move(n));
}

Ref Graph::sum_canon(Ref a) {
  Node n;
  n.op = Op::SumCanon;
  n.args = {a};
  n.out_dims = {{}};
  return push(std::move(n));
}

Ref Graph::col_sum_canon(Ref a) {
  const auto& da = dims_of(a);
  require(da.size() == 2, "col_sum_canon: need rank 2");
  Node n;
  n.op = Op::ColSumCanon;
  n.args = {a};
  n.out_dims = {{da[1]}};
  return push(std::move(n));
}

Ref Graph::weighted_corr3(Ref a, Ref b, Ref w) {
  const auto& da = dims_of(a);
  const auto& db = dims_of(b);
  const auto& dw = dims_of(w);
  require(da.size() == 2 && da[1] == 3 && da == db, "weighted_corr3: need matching [N,3] inputs");
  require(dw.size() == 1 && dw[0] == da[0], "weighted_corr3: weight length mismatch");
  Node n;
  n.op = Op::WeightedCorr3;
  n.args = {a, b, w};
  n.out_dims = {{3, 3}};
  return push(std::move(n));
}

Ref Graph::conv2d(Ref x, Ref k, Ref b, int stride_row, int stride_col) {
  const auto& dx = dims_of(x);
  const auto& dk = dims_of(k);
  const auto& db = dims_of(b);
  require(dx.size() == 2 && dk.size() == 3 && db.size() == 1, "conv2d: rank mismatch");
  require(dk[0] == db[0], "conv2d: bias/kernel channel mismatch");
  require(stride_row >= 1 && stride_col >= 1, "conv2d: strides must be >= 1");
  require(dx[0] >= dk[1] && dx[1] >= dk[2], "conv2d: kernel does not fit input");
  int ho = (dx[0] - dk[1]) / stride_row + 1;
  int wo = (dx[1] - dk[2]) / stride_col + 1;
  Node n;
  n.op = Op::Conv2d;
  n.args = {x, k, b};
  n.i0 = stride_row;
  n.i1 = stride_col;
  n.out_dims = {{dk[0], ho, wo}};
  return push(std::move(n));
}

Ref Graph::geman_mcclure(Ref sq, double mu) {
  require(mu > 0.0, "geman_mcclure: mu must be positive");
  Node n;
  n.op = Op::GemanMcClure;
  n.args = {sq};
  n.a0 = mu;
  n.out_dims = {dims_of(sq)};
  return push(std::move(n));
}

Ref Graph::bce_with_logits(Ref logits, Ref labels, Ref weights) {
  const auto& d = dims_of(logits);
  require(d.size() == 1, "bce_with_logits: logits must be rank 1");
  require(dims_of(labels) == d && dims_of(weights) == d, "bce_with_logits: length mismatch");
  Node n;
  n.op = Op::BceWithLogits;
  n.args = {logits, labels, weights};
  n.out_dims = {{}};
  return push(std::move(n));
}

std::array<Ref, 3> Graph::svd3(Ref m) {
  const auto& dm = dims_of(m);
  require(dm.size() >= 2 && dm[dm.size() - 1] == 3 && dm[dm.size() - 2] == 3,
          "svd3: trailing dims must be 3x3");
  std::vector<int> lead(dm.begin(), dm.end() - 2);
  std::vector<int> sd = lead;
  sd.push_back(3);
  Node n;
  n.op = Op::Svd3;
  n.args = {m};
  n.out_dims = {dm, sd, dm};
  int id = push(std::move(n)).node;
  return {Ref{id, 0}, Ref{id, 1}, Ref{id, 2}};
}

Ref Graph::det_corr3(Ref u, Ref v) {
  require(dims_of(u) == std::vector<int>({3, 3}) && dims_of(v) == std::vector<int>({3, 3}),
          "det_corr3: need 3x3 inputs");
  Node n;
  n.op = Op::DetCorr3;
  n.args = {u, v};
  n.out_dims = {{3, 3}};
  return push(std::move(n));
}

Ref Graph::threshold_mask(Ref w, double tau, int min_count) {
  require(dims_of(w).size() == 1, "threshold_mask: need rank 1");
  Node n;
  n.op = Op::ThresholdMask;
  n.args = {w};
  n.a0 = tau;
  n.min_count = min_count;
  n.out_dims = {dims_of(w)};
  return push(std::move(n));
}

Ref Graph::so3_exp(Ref omega) {
  require(dims_of(omega) == std::vector<int>({3}), "so3_exp: need a 3-vector");
  Node n;
  n.op = Op::So3Exp;
  n.args = {omega};
  n.out_dims = {{3, 3}};
  return push(std::move(n));
}

Ref Graph::quat_to_rot(Ref q) {
  require(dims_of(q) == std::vector<int>({4}), "quat_to_rot: need a 4-vector");
  Node n;
  n.op = Op::QuatToRot;
  n.args = {q};
  n.out_dims = {{3, 3}};
  return push(std::move(n));
}

Ref Graph::detach(Ref a) {
  Node n;
  n.op = Op::Detach;
  n.args = {a};
  n.out_dims = {dims_of(a)};
  return push(std::move(n));
}

void Graph::mark_output(const std::string& name, Ref r) { outputs_.emplace_back(name, r); }

Ref Graph::output(const std::string& name) const {
  for (const auto& [n, r] : outputs_)
    if (n == name) return r;
  throw std::invalid_argument("graph: no output named " + name);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

void eval(const Graph& g, const TensorMap& bindings, Workspace& ws,
          const TensorMap* shared) {
  const auto& nodes = g.nodes();
  ws.values.assign(nodes.size(), {});
  ws.stash.assign(nodes.size(), {});

  for (size_t ni = 0; ni < nodes.size(); ++ni) {
    const Node& n = nodes[ni];
    auto& out = ws.values[ni];
    auto arg = [&](int i) -> const Tensor& { return ws.at(n.args[static_cast<size_t>(i)]); };

    switch (n.op) {
      case Op::Input:
      case Op::Param: {
        const Tensor* bound = nullptr;
        if (auto it = bindings.find(n.name); it != bindings.end()) {
          bound = &it->second;
        } else if (shared) {
          if (auto it2 = shared->find(n.name); it2 != shared->end()) bound = &it2->second;
        }
        if (!bound) throw std::invalid_argument("eval: unbound leaf '" + n.name + "'");
        if (bound->dims != n.out_dims[0])
          throw std::invalid_argument("eval: shape mismatch for leaf '" + n.name + "'");
        out.push_back(*bound);
        break;
      }
      case Op::Affine: {
        Tensor y = Tensor::zeros(n.out_dims[0]);
        rowwise_matmul(arg(0), arg(1), y, &arg(2));
        out.push_back(std::move(y));
        break;
      }
      case Op::MatMul: {
        Tensor y = Tensor::zeros(n.out_dims[0]);
        rowwise_matmul(arg(0), arg(1), y, nullptr);
        out.push_back(std::move(y));
        break;
      }
      case Op::Transpose: {
        Tensor y = Tensor::zeros(n.out_dims[0]);
        mmap(y) = cmap(arg(0)).transpose();
        out.push_back(std::move(y));
        break;
      }
      case Op::Add: {
        Tensor y = arg(0);
        for (int64_t i = 0; i < y.size(); ++i) y.data[static_cast<size_t>(i)] += arg(1).data[static_cast<size_t>(i)];
        out.push_back(std::move(y));
        break;
      }
      case Op::Sub: {
        Tensor y = arg(0);
        for (int64_t i = 0; i < y.size(); ++i) y.data[static_cast<size_t>(i)] -= arg(1).data[static_cast<size_t>(i)];
        out.push_back(std::move(y));
        break;
      }
      case Op::Mul: {
        Tensor y = arg(0);
        for (int64_t i = 0; i < y.size(); ++i) y.data[static_cast<size_t>(i)] *= arg(1).data[static_cast<size_t>(i)];
        out.push_back(std::move(y));
        break;
      }
      case Op::Scale: {
        Tensor y = arg(0);
        for (double& v : y.data) v *= n.a0;
        out.push_back(std::move(y));
        break;
      }
      case Op::AddRow: {
        Tensor y = arg(0);
        const Tensor& r = arg(1);
        for (int i = 0; i < y.dim(0); ++i)
          for (int j = 0; j < y.dim(1); ++j) y(i, j) += r(j);
        out.push_back(std::move(y));
        break;
      }
      case Op::RowScale: {
        Tensor y = arg(0);
        const Tensor& w = arg(1);
        for (int i = 0; i < y.dim(0); ++i)
          for (int j = 0; j < y.dim(1); ++j) y(i, j) *= w(i);
        out.push_back(std::move(y));
        break;
      }
      case Op::ScaleByScalar: {
        Tensor y = arg(0);
        double s = arg(1).data[0];
        for (double& v : y.data) v *= s;
        out.push_back(std::move(y));
        break;
      }
      case Op::Reciprocal: {
        Tensor y = arg(0);
        for (double& v : y.data) v = 1.0 / v;
        out.push_back(std::move(y));
        break;
      }
      case Op::Relu: {
        Tensor y = arg(0);
        for (double& v : y.data) v = v > 0.0 ? v : 0.0;
        out.push_back(std::move(y));
        break;
      }
      case Op::Tanh: {
        Tensor y = arg(0);
        for (double& v : y.data) v = std::tanh(v);
        out.push_back(std::move(y));
        break;
      }
      case Op::Sigmoid: {
        Tensor y = arg(0);
        for (double& v : y.data) v = sigmoid_scalar(v);
        out.push_back(std::move(y));
        break;
      }
      case Op::Abs: {
        Tensor y = arg(0);
        for (double& v : y.data) v = std::abs(v);
        out.push_back(std::move(y));
        break;
      }
      case Op::Square: {
        Tensor y = arg(0);
        for (double& v : y.data) v = v * v;
        out.push_back(std::move(y));
        break;
      }
      case Op::ContextNorm: {
        const Tensor& x = arg(0);
        const int rows = x.dim(0), cols = x.dim(1);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        auto& st = ws.stash[ni];
        st.assign(static_cast<size_t>(2 * cols), 0.0);
        std::vector<double> buf(static_cast<size_t>(rows));
        for (int c = 0; c < cols; ++c) {
          for (int i = 0; i < rows; ++i) buf[static_cast<size_t>(i)] = x(i, c);
          double mu = canonical_sum(buf) / rows;  // sorts buf
          double sigma = std::sqrt(canonical_sq_dev_sum(buf, mu) / rows);
          double s = sigma + n.a0;
          for (int i = 0; i < rows; ++i) y(i, c) = (x(i, c) - mu) / s;
          st[static_cast<size_t>(c)] = mu;
          st[static_cast<size_t>(cols + c)] = sigma;
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::MaxPoolRows: {
        const Tensor& x = arg(0);
        const int rows = x.dim(0), cols = x.dim(1);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        auto& st = ws.stash[ni];
        st.assign(static_cast<size_t>(cols), 0.0);
        for (int c = 0; c < cols; ++c) {
          int best = 0;
          double bv = x(0, c);
          for (int i = 1; i < rows; ++i) {
            if (x(i, c) > bv) {  // strict: first index wins ties
              bv = x(i, c);
              best = i;
            }
          }
          y(c) = bv;
          st[static_cast<size_t>(c)] = best;
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::Conv2d: {
        const Tensor& x = arg(0);
        const Tensor& k = arg(1);
        const Tensor& b = arg(2);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        const int kc = k.dim(0), kh = k.dim(1), kw = k.dim(2);
        const int ho = y.dim(1), wo = y.dim(2);
        for (int ch = 0; ch < kc; ++ch)
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
              double acc = b(ch);
              for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v)
                  acc += x(i * n.i0 + u, j * n.i1 + v) * k(ch, u, v);
              y(ch, i, j) = acc;
            }
        out.push_back(std::move(y));
        break;
      }
      case Op::ConcatRows: {
        Tensor y = Tensor::zeros(n.out_dims[0]);
        for (size_t p = 0; p < n.args.size(); ++p) {
          const Tensor& part = ws.at(n.args[p]);
          for (int c = 0; c < part.dim(0); ++c) y(static_cast<int>(p), c) = part(c);
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::ConcatCols: {
        const Tensor& a = arg(0);
        const Tensor& b = arg(1);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        for (int i = 0; i < y.dim(0); ++i) {
          for (int j = 0; j < a.dim(1); ++j) y(i, j) = a(i, j);
          for (int j = 0; j < b.dim(1); ++j) y(i, a.dim(1) + j) = b(i, j);
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::Reshape: {
        Tensor y = arg(0);
        y.dims = n.out_dims[0];
        out.push_back(std::move(y));
        break;
      }
      case Op::Slice: {
        const Tensor& x = arg(0);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        for (int i = n.i0; i < n.i1; ++i) y(i - n.i0) = x(i);
        out.push_back(std::move(y));
        break;
      }
      case Op::Sum: {
        double acc = 0.0;
        for (double v : arg(0).data) acc += v;
        out.push_back(Tensor::scalar(acc));
        break;
      }
      case Op::Mean: {
        double acc = 0.0;
        for (double v : arg(0).data) acc += v;
        out.push_back(Tensor::scalar(acc / static_cast<double>(arg(0).size())));
        break;
      }
      case Op::RowSum: {
        const Tensor& x = arg(0);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        for (int i = 0; i < x.dim(0); ++i) {
          double acc = 0.0;
          for (int j = 0; j < x.dim(1); ++j) acc += x(i, j);
          y(i) = acc;
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::SumCanon: {
        std::vector<double> buf(arg(0).data);
        out.push_back(Tensor::scalar(canonical_sum(buf)));
        break;
      }
      case Op::ColSumCanon: {
        const Tensor& x = arg(0);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        std::vector<double> buf(static_cast<size_t>(x.dim(0)));
        for (int c = 0; c < x.dim(1); ++c) {
          for (int i = 0; i < x.dim(0); ++i) buf[static_cast<size_t>(i)] = x(i, c);
          y(c) = canonical_sum(buf);
        }
        out.push_back(std::move(y));
        break;
      }
      case Op::WeightedCorr3: {
        const Tensor& a = arg(0);
        const Tensor& b = arg(1);
        const Tensor& w = arg(2);
        const int rows = a.dim(0);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        std::vector<double> buf(static_cast<size_t>(rows));
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) {
            for (int i = 0; i < rows; ++i)
              buf[static_cast<size_t>(i)] = w(i) * a(i, r) * b(i, c);
            y(r, c) = canonical_sum(buf);
          }
        out.push_back(std::move(y));
        break;
      }
      case Op::GemanMcClure: {
        Tensor y = arg(0);
        for (double& v : y.data) v = n.a0 * v / (n.a0 + v);
        out.push_back(std::move(y));
        break;
      }
      case Op::BceWithLogits: {
        const Tensor& o = arg(0);
        const Tensor& yl = arg(1);
        const Tensor& wt = arg(2);
        double acc = 0.0;
        for (int64_t i = 0; i < o.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          acc += wt.data[k] * (softplus(o.data[k]) - yl.data[k] * o.data[k]);
        }
        out.push_back(Tensor::scalar(acc / static_cast<double>(o.size())));
        break;
      }
      case Op::Svd3: {
        const Tensor& m = arg(0);
        Tensor u = Tensor::zeros(n.out_dims[0]);
        Tensor s = Tensor::zeros(n.out_dims[1]);
        Tensor v = Tensor::zeros(n.out_dims[2]);
        int64_t batches = m.size() / 9;
        for (int64_t bi = 0; bi < batches; ++bi) {
          Eigen::JacobiSVD<Eigen::Matrix3d> svd(mat3_of(m, bi * 9),
                                                Eigen::ComputeFullU | Eigen::ComputeFullV);
          mat3_into(svd.matrixU(), u, bi * 9);
          mat3_into(svd.matrixV(), v, bi * 9);
          for (int i = 0; i < 3; ++i)
            s.data[static_cast<size_t>(bi * 3 + i)] = svd.singularValues()(i);
        }
        out.push_back(std::move(u));
        out.push_back(std::move(s));
        out.push_back(std::move(v));
        break;
      }
      case Op::DetCorr3: {
        Eigen::Matrix3d u = mat3_of(arg(0));
        Eigen::Matrix3d v = mat3_of(arg(1));
        Tensor y = Tensor::zeros(n.out_dims[0]);
        y(0, 0) = 1.0;
        y(1, 1) = 1.0;
        y(2, 2) = (u * v.transpose()).determinant();
        out.push_back(std::move(y));
        break;
      }
      case Op::ThresholdMask: {
        const Tensor& w = arg(0);
        Tensor y = Tensor::zeros(n.out_dims[0]);
        int selected = 0;
        for (int64_t i = 0; i < w.size(); ++i) {
          bool in = w.data[static_cast<size_t>(i)] >= n.a0;
          y.data[static_cast<size_t>(i)] = in ? 1.0 : 0.0;
          selected += in ? 1 : 0;
        }
        if (selected < n.min_count)
          throw std::runtime_error("threshold_mask: fewer than " + std::to_string(n.min_count) +
                                   " entries selected");
        out.push_back(std::move(y));
        break;
      }
      case Op::So3Exp: {
        const Tensor& w = arg(0);
        Eigen::Matrix3d r = rigidreg::so3_exp(Eigen::Vector3d(w(0), w(1), w(2)));
        Tensor y = Tensor::zeros(n.out_dims[0]);
        mat3_into(r, y);
        out.push_back(std::move(y));
        break;
      }
      case Op::QuatToRot: {
        const Tensor& q = arg(0);
        Eigen::Matrix3d r = rigidreg::quat_to_rot(Eigen::Vector4d(q(0), q(1), q(2), q(3)));
        Tensor y = Tensor::zeros(n.out_dims[0]);
        mat3_into(r, y);
        out.push_back(std::move(y));
        break;
      }
      case Op::Detach: {
        out.push_back(arg(0));
        break;
      }
    }

    for (const Tensor& t : out) {
      if (!t.all_finite())
        throw std::runtime_error(std::string("eval: non-finite output from ") + op_name(n.op));
    }
  }
}

TensorMap eval_outputs(const Graph& g, const TensorMap& bindings, const TensorMap* shared) {
  Workspace ws;
  eval(g, bindings, ws, shared);
  TensorMap out;
  for (const auto& [name, r] : g.outputs()) out[name] = ws.at(r);
  return out;
}

double eval_scalar(const Graph& g, Ref r, const TensorMap& bindings, const TensorMap* shared) {
  Workspace ws;
  eval(g, bindings, ws, shared);
  const Tensor& t = ws.at(r);
  if (t.size() != 1) throw std::invalid_argument("eval_scalar: ref is not scalar");
  return t.data[0];
}

// ---------------------------------------------------------------------------
// Reverse mode
// ---------------------------------------------------------------------------

TensorMap grad(const Graph& g, Ref loss, const TensorMap& bindings, double* loss_value,
               const TensorMap* shared) {
  Workspace ws;
  eval(g, bindings, ws, shared);

  const auto& nodes = g.nodes();
  const Tensor& lt = ws.at(loss);
  if (lt.size() != 1) throw std::invalid_argument("grad: loss must be scalar");
  if (loss_value) *loss_value = lt.data[0];

  // Cotangent per (node, slot); empty data means "not yet touched".
  std::vector<std::vector<Tensor>> cot(nodes.size());
  for (size_t i = 0; i < nodes.size(); ++i)
    cot[i].resize(nodes[i].out_dims.size());

  auto acc = [&](Ref r) -> Tensor& {
    Tensor& t = cot[static_cast<size_t>(r.node)][static_cast<size_t>(r.slot)];
    if (t.data.empty()) t = Tensor::zeros(g.dims_of(r));
    return t;
  };

  acc(loss).data[0] = 1.0;

  for (int ni = static_cast<int>(nodes.size()) - 1; ni >= 0; --ni) {
    const Node& n = nodes[static_cast<size_t>(ni)];
    bool any = false;
    for (size_t s = 0; s < n.out_dims.size(); ++s)
      if (!cot[static_cast<size_t>(ni)][s].data.empty()) any = true;
    if (!any) continue;

    auto arg = [&](int i) -> const Tensor& { return ws.at(n.args[static_cast<size_t>(i)]); };
    auto gslot = [&](int s) -> const Tensor& {
      Tensor& t = cot[static_cast<size_t>(ni)][static_cast<size_t>(s)];
      if (t.data.empty()) t = Tensor::zeros(n.out_dims[static_cast<size_t>(s)]);
      return t;
    };
    const Tensor& gy = gslot(0);

    switch (n.op) {
      case Op::Input:
      case Op::Param:
        break;
      case Op::Affine: {
        Tensor& gx = acc(n.args[0]);
        Tensor& gw = acc(n.args[1]);
        Tensor& gb = acc(n.args[2]);
        mmap(gx).noalias() += cmap(gy) * cmap(arg(1)).transpose();
        mmap(gw).noalias() += cmap(arg(0)).transpose() * cmap(gy);
        for (int i = 0; i < gy.dim(0); ++i)
          for (int j = 0; j < gy.dim(1); ++j) gb(j) += gy(i, j);
        break;
      }
      case Op::MatMul: {
        Tensor& ga = acc(n.args[0]);
        Tensor& gb = acc(n.args[1]);
        mmap(ga).noalias() += cmap(gy) * cmap(arg(1)).transpose();
        mmap(gb).noalias() += cmap(arg(0)).transpose() * cmap(gy);
        break;
      }
      case Op::Transpose: {
        Tensor& ga = acc(n.args[0]);
        mmap(ga).noalias() += cmap(gy).transpose();
        break;
      }
      case Op::Add: {
        Tensor& ga = acc(n.args[0]);
        Tensor& gb = acc(n.args[1]);
        for (int64_t i = 0; i < gy.size(); ++i) {
          ga.data[static_cast<size_t>(i)] += gy.data[static_cast<size_t>(i)];
          gb.data[static_cast<size_t>(i)] += gy.data[static_cast<size_t>(i)];
        }
        break;
      }
      case Op::Sub: {
        Tensor& ga = acc(n.args[0]);
        Tensor& gb = acc(n.args[1]);
        for (int64_t i = 0; i < gy.size(); ++i) {
          ga.data[static_cast<size_t>(i)] += gy.data[static_cast<size_t>(i)];
          gb.data[static_cast<size_t>(i)] -= gy.data[static_cast<size_t>(i)];
        }
        break;
      }
      case Op::Mul: {
        Tensor& ga = acc(n.args[0]);
        Tensor& gb = acc(n.args[1]);
        const Tensor& a = arg(0);
        const Tensor& b = arg(1);
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          ga.data[k] += gy.data[k] * b.data[k];
          gb.data[k] += gy.data[k] * a.data[k];
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = acc(n.args[0]);
        for (int64_t i = 0; i < gy.size(); ++i)
          ga.data[static_cast<size_t>(i)] += n.a0 * gy.data[static_cast<size_t>(i)];
        break;
      }
      case Op::AddRow: {
        Tensor& gx = acc(n.args[0]);
        Tensor& gr = acc(n.args[1]);
        for (int i = 0; i < gy.dim(0); ++i)
          for (int j = 0; j < gy.dim(1); ++j) {
            gx(i, j) += gy(i, j);
            gr(j) += gy(i, j);
          }
        break;
      }
      case Op::RowScale: {
        Tensor& gx = acc(n.args[0]);
        Tensor& gw = acc(n.args[1]);
        const Tensor& x = arg(0);
        const Tensor& w = arg(1);
        for (int i = 0; i < gy.dim(0); ++i)
          for (int j = 0; j < gy.dim(1); ++j) {
            gx(i, j) += gy(i, j) * w(i);
            gw(i) += gy(i, j) * x(i, j);
          }
        break;
      }
      case Op::ScaleByScalar: {
        Tensor& gx = acc(n.args[0]);
        Tensor& gs = acc(n.args[1]);
        const Tensor& x = arg(0);
        double s = arg(1).data[0];
        double acc_s = 0.0;
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          gx.data[k] += s * gy.data[k];
          acc_s += gy.data[k] * x.data[k];
        }
        gs.data[0] += acc_s;
        break;
      }
      case Op::Reciprocal: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& y = ws.at(Ref{ni, 0});
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          gx.data[k] -= gy.data[k] * y.data[k] * y.data[k];
        }
        break;
      }
      case Op::Relu: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& x = arg(0);
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          if (x.data[k] > 0.0) gx.data[k] += gy.data[k];
        }
        break;
      }
      case Op::Tanh: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& y = ws.at(Ref{ni, 0});
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          gx.data[k] += gy.data[k] * (1.0 - y.data[k] * y.data[k]);
        }
        break;
      }
      case Op::Sigmoid: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& y = ws.at(Ref{ni, 0});
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          gx.data[k] += gy.data[k] * y.data[k] * (1.0 - y.data[k]);
        }
        break;
      }
      case Op::Abs: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& x = arg(0);
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          if (x.data[k] > 0.0)
            gx.data[k] += gy.data[k];
          else if (x.data[k] < 0.0)
            gx.data[k] -= gy.data[k];
        }
        break;
      }
      case Op::Square: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& x = arg(0);
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          gx.data[k] += 2.0 * x.data[k] * gy.data[k];
        }
        break;
      }
      case Op::ContextNorm: {
        Tensor& gx = acc(n.args[0]);
        const Tensor& x = arg(0);
        const auto& st = ws.stash[static_cast<size_t>(ni)];
        const int rows = x.dim(0), cols = x.dim(1);
        for (int c = 0; c < cols; ++c) {
          double mu = st[static_cast<size_t>(c)];
          double sigma = st[static_cast<size_t>(cols + c)];
          double s = sigma + n.a0;
          double gsum = 0.0, gdot = 0.0;
          for (int i = 0; i < rows; ++i) {
            gsum += gy(i, c);
            gdot += gy(i, c) * (x(i, c) - mu);
          }
          double inv_s = 1.0 / s;
          double k2 = sigma > 1e-30 ? gdot / (rows * sigma * s * s) : 0.0;
          for (int i = 0; i < rows; ++i)
            gx(i, c) += inv_s * (gy(i, c) - gsum / rows) - (x(i, c) - mu) * k2;
        }
        break;
      }
      case Op::MaxPoolRows: {
        Tensor& gx = acc(n.args[0]);
        const auto& st = ws.stash[static_cast<size_t>(ni)];
        for (int c = 0; c < gx.dim(1); ++c)
          gx(static_cast<int>(st[static_cast<size_t>(c)]), c) += gy(c);
        break;
      }
      case Op::Conv2d: {
        Tensor& gx = acc(n.args[0]);
        Tensor& gk = acc(n.args[1]);
        Tensor& gb = acc(n.args[2]);
        const Tensor& x = arg(0);
        const Tensor& k = arg(1);
        const int kc = k.dim(0), kh = k.dim(1), kw = k.dim(2);
        const int ho = gy.dim(1), wo = gy.dim(2);
        for (int ch = 0; ch < kc; ++ch)
          for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j) {
              double go = gy(ch, i, j);
              gb(ch) += go;
              for (int u = 0; u < kh; ++u)
                for (int v = 0; v < kw; ++v) {
                  gx(i * n.i0 + u, j * n.i1 + v) += go * k(ch, u, v);
                  gk(ch, u, v) += go * x(i * n.i0 + u, j * n.i1 + v);
                }
            }
        break;
      }
      case Op::ConcatRows: {
        for (size_t p = 0; p < n.args.size(); ++p) {
          Tensor& gp = acc(n.args[p]);
          for (int c = 0; c < gp.dim(0); ++c) gp(c) += gy(static_cast<int>(p), c);
        }
        break;
      }
      case Op::ConcatCols: {
        Tensor& ga = acc(n.args[0]);
        Tensor& gb = acc(n.args[1]);
        for (int i = 0; i < gy.dim(0); ++i) {
          for (int j = 0; j < ga.dim(1); ++j) ga(i, j) += gy(i, j);
          for (int j = 0; j < gb.dim(1); ++j) gb(i, j) += gy(i, ga.dim(1) + j);
        }
        break;
      }
      case Op::Reshape: {
        Tensor& ga = acc(n.args[0]);
        for (int64_t i = 0; i < gy.size(); ++i)
          ga.data[static_cast<size_t>(i)] += gy.data[static_cast<size_t>(i)];
        break;
      }
      case Op::Slice: {
        Tensor& ga = acc(n.args[0]);
        for (int i = n.i0; i < n.i1; ++i) ga(i) += gy(i - n.i0);
        break;
      }
      case Op::Sum: {
        Tensor& ga = acc(n.args[0]);
        double gv = gy.data[0];
        for (double& v : ga.data) v += gv;
        break;
      }
      case Op::Mean: {
        Tensor& ga = acc(n.args[0]);
        double gv = gy.data[0] / static_cast<double>(ga.size());
        for (double& v : ga.data) v += gv;
        break;
      }
      case Op::RowSum: {
        Tensor& ga = acc(n.args[0]);
        for (int i = 0; i < ga.dim(0); ++i)
          for (int j = 0; j < ga.dim(1); ++j) ga(i, j) += gy(i);
        break;
      }
      case Op::SumCanon: {
        Tensor& ga = acc(n.args[0]);
        double gv = gy.data[0];
        for (double& v : ga.data) v += gv;
        break;
      }
      case Op::ColSumCanon: {
        Tensor& ga = acc(n.args[0]);
        for (int i = 0; i < ga.dim(0); ++i)
          for (int j = 0; j < ga.dim(1); ++j) ga(i, j) += gy(j);
        break;
      }
      case Op::WeightedCorr3: {
        Tensor& gA = acc(n.args[0]);
        Tensor& gB = acc(n.args[1]);
        Tensor& gw = acc(n.args[2]);
        const Tensor& a = arg(0);
        const Tensor& b = arg(1);
        const Tensor& w = arg(2);
        for (int i = 0; i < a.dim(0); ++i) {
          double dw = 0.0;
          for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) {
              double go = gy(r, c);
              gA(i, r) += go * w(i) * b(i, c);
              gB(i, c) += go * w(i) * a(i, r);
              dw += go * a(i, r) * b(i, c);
            }
          gw(i) += dw;
        }
        break;
      }
      case Op::GemanMcClure: {
        Tensor& ga = acc(n.args[0]);
        const Tensor& sv = arg(0);
        for (int64_t i = 0; i < gy.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          double d = n.a0 + sv.data[k];
          ga.data[k] += gy.data[k] * n.a0 * n.a0 / (d * d);
        }
        break;
      }
      case Op::BceWithLogits: {
        Tensor& go = acc(n.args[0]);
        const Tensor& o = arg(0);
        const Tensor& yl = arg(1);
        const Tensor& wt = arg(2);
        double gv = gy.data[0] / static_cast<double>(o.size());
        for (int64_t i = 0; i < o.size(); ++i) {
          size_t k = static_cast<size_t>(i);
          go.data[k] += gv * wt.data[k] * (sigmoid_scalar(o.data[k]) - yl.data[k]);
        }
        break;
      }
      case Op::Svd3: {
        Tensor& gm = acc(n.args[0]);
        const Tensor& ut = ws.at(Ref{ni, 0});
        const Tensor& st = ws.at(Ref{ni, 1});
        const Tensor& vt = ws.at(Ref{ni, 2});
        const Tensor& gu = gslot(0);
        const Tensor& gs = gslot(1);
        const Tensor& gv = gslot(2);
        int64_t batches = ut.size() / 9;
        for (int64_t bi = 0; bi < batches; ++bi) {
          Eigen::Matrix3d U = mat3_of(ut, bi * 9);
          Eigen::Matrix3d V = mat3_of(vt, bi * 9);
          Eigen::Vector3d s(st.data[static_cast<size_t>(bi * 3)],
                            st.data[static_cast<size_t>(bi * 3 + 1)],
                            st.data[static_cast<size_t>(bi * 3 + 2)]);
          Eigen::Matrix3d Ub = mat3_of(gu, bi * 9);
          Eigen::Matrix3d Vb = mat3_of(gv, bi * 9);
          Eigen::Vector3d Sb(gs.data[static_cast<size_t>(bi * 3)],
                             gs.data[static_cast<size_t>(bi * 3 + 1)],
                             gs.data[static_cast<size_t>(bi * 3 + 2)]);
          Eigen::Matrix3d F = Eigen::Matrix3d::Zero();
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              if (i == j) continue;
              double d = s(j) * s(j) - s(i) * s(i);
              if (std::abs(d) < 1e-8) d = d >= 0 ? 1e-8 : -1e-8;
              F(i, j) = 1.0 / d;
            }
          Eigen::Matrix3d A = U.transpose() * Ub;
          Eigen::Matrix3d B = V.transpose() * Vb;
          Eigen::Matrix3d mid = F.cwiseProduct(A - A.transpose()) * s.asDiagonal();
          mid += s.asDiagonal() * F.cwiseProduct(B - B.transpose());
          mid += Sb.asDiagonal();
          Eigen::Matrix3d Mb = U * mid * V.transpose();
          mat3_add(Mb, gm, bi * 9);
        }
        break;
      }
      case Op::DetCorr3:
      case Op::ThresholdMask:
      case Op::Detach:
        break;  // no gradient
      case Op::So3Exp: {
        Tensor& gw = acc(n.args[0]);
        const Tensor& w = arg(0);
        const Tensor& rt = ws.at(Ref{ni, 0});
        Eigen::Vector3d omega(w(0), w(1), w(2));
        Eigen::Matrix3d R = mat3_of(rt);
        Eigen::Matrix3d Rb = mat3_of(gy);
        double theta2 = omega.squaredNorm();
        double theta = std::sqrt(theta2);
        Eigen::Matrix3d K;
        K << 0, -omega.z(), omega.y(), omega.z(), 0, -omega.x(), -omega.y(), omega.x(), 0;
        double c1, c2;  // right Jacobian J_r = I - c1 K + c2 K^2
        if (theta < 1e-7) {
          c1 = 0.5 - theta2 / 24.0;
          c2 = 1.0 / 6.0 - theta2 / 120.0;
        } else {
          c1 = (1.0 - std::cos(theta)) / theta2;
          c2 = (theta - std::sin(theta)) / (theta2 * theta);
        }
        Eigen::Matrix3d Jr = Eigen::Matrix3d::Identity() - c1 * K + c2 * (K * K);
        Eigen::Vector3d gout = Jr.transpose() * vee_asym3(R.transpose() * Rb);
        gw(0) += gout(0);
        gw(1) += gout(1);
        gw(2) += gout(2);
        break;
      }
      case Op::QuatToRot: {
        Tensor& gq = acc(n.args[0]);
        const Tensor& qt = arg(0);
        Eigen::Vector4d q(qt(0), qt(1), qt(2), qt(3));
        double nq = q.norm();
        Eigen::Vector4d qh = q / nq;
        double w = qh(0), x = qh(1), y = qh(2), z = qh(3);
        Eigen::Matrix3d Rb = mat3_of(gy);
        Eigen::Matrix3d dw, dx, dy, dz;
        dw << 0, -z, y, z, 0, -x, -y, x, 0;
        dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
        dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
        dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
        Eigen::Vector4d ghat(2.0 * (Rb.cwiseProduct(dw)).sum(), 2.0 * (Rb.cwiseProduct(dx)).sum(),
                             2.0 * (Rb.cwiseProduct(dy)).sum(), 2.0 * (Rb.cwiseProduct(dz)).sum());
        Eigen::Vector4d gfull = (ghat - qh * qh.dot(ghat)) / nq;
        for (int i = 0; i < 4; ++i) gq(i) += gfull(i);
        break;
      }
    }
  }

  TensorMap out;
  for (const auto& [name, r] : g.params()) {
    Tensor& t = cot[static_cast<size_t>(r.node)][static_cast<size_t>(r.slot)];
    out[name] = t.data.empty() ? Tensor::zeros(g.dims_of(r)) : std::move(t);
  }
  return out;
}

GradCheckResult grad_check(const Graph& g, Ref loss, const TensorMap& bindings, double h,
                           const std::vector<std::string>& which, int64_t max_coords,
                           uint64_t seed) {
  TensorMap analytic = grad(g, loss, bindings);
  TensorMap probe = bindings;

  GradCheckResult res;
  for (const std::string& name : which) {
    auto it = probe.find(name);
    if (it == probe.end()) throw std::invalid_argument("grad_check: unknown tensor " + name);
    Tensor& t = it->second;
    std::vector<int64_t> coords;
    if (max_coords > 0 && t.size() > max_coords) {
      Rng rng(derive_seed(seed, std::hash<std::string>{}(name)));
      std::vector<int64_t> all(static_cast<size_t>(t.size()));
      for (int64_t i = 0; i < t.size(); ++i) all[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < max_coords; ++i) {
        int64_t j = i + rng.uniform_int(static_cast<int>(t.size() - i));
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
        coords.push_back(all[static_cast<size_t>(i)]);
      }
    } else {
      for (int64_t i = 0; i < t.size(); ++i) coords.push_back(i);
    }

    const Tensor& a = analytic.at(name);
    for (int64_t idx : coords) {
      double saved = t.data[static_cast<size_t>(idx)];
      t.data[static_cast<size_t>(idx)] = saved + h;
      double lp = eval_scalar(g, loss, probe);
      t.data[static_cast<size_t>(idx)] = saved - h;
      double lm = eval_scalar(g, loss, probe);
      t.data[static_cast<size_t>(idx)] = saved;
      double num = (lp - lm) / (2.0 * h);
      double av = a.data[static_cast<size_t>(idx)];
      double rel = std::abs(av - num) / std::max(1e-8, std::abs(av) + std::abs(num));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = idx;
      }
    }
  }
  return res;
}

}  // namespace rigidreg::ad
