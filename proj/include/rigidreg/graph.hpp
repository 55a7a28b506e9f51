#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rigidreg/tensor.hpp"

namespace rigidreg::ad {

// Value handle: a node and one of its output slots (slot > 0 only for svd3).
struct Ref {
  int node = -1;
  int slot = 0;
};

enum class Op {
  Input, Param,
  Affine, MatMul, Transpose,
  Add, Sub, Mul, Scale, AddRow, RowScale, ScaleByScalar, Reciprocal,
  Relu, Tanh, Sigmoid, Abs, Square,
  ContextNorm, MaxPoolRows, Conv2d, ConcatRows, ConcatCols,
  Reshape, Slice,
  Sum, Mean, RowSum, SumCanon, ColSumCanon, WeightedCorr3,
  GemanMcClure, BceWithLogits,
  Svd3, DetCorr3, ThresholdMask,
  So3Exp, QuatToRot, Detach,
};

const char* op_name(Op op);

struct Node {
  Op op;
  std::vector<Ref> args;
  std::vector<std::vector<int>> out_dims;  // per slot
  std::string name;                        // leaves only
  double a0 = 0.0;                         // scale factor / eps / mu / tau
  int i0 = 0, i1 = 0;                      // slice bounds or conv strides
  int min_count = 0;                       // ThresholdMask minimum selection
};

// Static computation graph over named leaves. Nodes are appended in build
// order, so inputs always precede their consumers and evaluation is a single
// forward sweep. Construction validates shapes; binding values are checked at
// evaluation time. A built graph is immutable and can be evaluated from many
// threads at once (all evaluation state lives in the Workspace).
class Graph {
 public:
  Ref input(const std::string& name, std::vector<int> dims);
  Ref param(const std::string& name, std::vector<int> dims);

  // Shared map applied to each row: [N,in] x [in,out] + [out] -> [N,out].
  Ref affine(Ref x, Ref w, Ref b);
  Ref matmul(Ref a, Ref b);
  Ref transpose(Ref a);

  Ref add(Ref a, Ref b);
  Ref sub(Ref a, Ref b);
  Ref mul(Ref a, Ref b);
  Ref scale(Ref a, double c);
  Ref add_row(Ref x, Ref r);    // [N,C] + [C], r added to every row
  Ref row_scale(Ref x, Ref w);  // row i scaled by w[i]
  Ref scale_by(Ref x, Ref s);   // x times a scalar node
  Ref reciprocal(Ref a);

  Ref relu(Ref a);
  Ref tanh(Ref a);
  Ref sigmoid(Ref a);
  Ref abs(Ref a);
  Ref square(Ref a);

  // Per-channel normalization over the row axis: subtract the mean, divide by
  // stddev + eps. Reductions use a canonical (sorted, run-collapsed) order so
  // the output is bit-identical under row permutation and row duplication.
  Ref context_norm(Ref x, double eps = 1e-6);
  Ref max_pool_rows(Ref x);  // [N,C] -> [C]; gradient goes to the first argmax
  Ref concat_rows(const std::vector<Ref>& parts);  // k vectors [C] -> [k,C]
  Ref concat_cols(Ref a, Ref b);                   // [N,Ca],[N,Cb] -> [N,Ca+Cb]

  Ref reshape(Ref a, std::vector<int> dims);
  Ref slice(Ref a, int from, int to);  // 1-D range [from, to)

  Ref sum(Ref a);   // scalar
  Ref mean(Ref a);  // scalar
  Ref row_sum(Ref a);  // [N,C] -> [N]
  // Reductions over the row axis in the canonical order (see context_norm);
  // used where a reduced value feeds a permutation-invariant output.
  Ref sum_canon(Ref a);      // scalar
  Ref col_sum_canon(Ref a);  // [N,C] -> [C]
  // sum_n w[n] * a_row[n] * b_row[n]^T for [N,3] a, b: the weighted 3x3
  // correlation of two centered point sets, canonically accumulated.
  Ref weighted_corr3(Ref a, Ref b, Ref w);

  // Single input channel, kernel [K,kh,kw], bias [K], no padding.
  Ref conv2d(Ref x, Ref k, Ref b, int stride_row, int stride_col);

  // mu*s/(mu+s) elementwise; s is a squared residual, so the output equals
  // e^2*mu/(mu+e^2) for residual norm e.
  Ref geman_mcclure(Ref sq, double mu);
  // (1/N) sum_i weights[i] * H(labels[i], sigmoid(logits[i])), stabilized;
  // gradient flows to the logits only.
  Ref bce_with_logits(Ref logits, Ref labels, Ref weights);

  // Full 3x3 SVD of each trailing 3x3 slice -> {U, S, V}. The backward pass
  // uses the analytic differential; cross terms 1/(s_i^2 - s_j^2) are clamped
  // at 1e-8, which degrades accuracy near repeated singular values.
  std::array<Ref, 3> svd3(Ref m);
  // diag(1, 1, det(U V^T)); piecewise constant, so no gradient.
  Ref det_corr3(Ref u, Ref v);
  // 0/1 mask (w >= tau); throws at evaluation when fewer than min_count pass.
  // Piecewise constant, no gradient.
  Ref threshold_mask(Ref w, double tau, int min_count = 0);
  Ref so3_exp(Ref omega);   // [3] -> [3,3]
  Ref quat_to_rot(Ref q);   // [4] (w,x,y,z) -> [3,3]
  // Identity forward, no gradient; cuts a value out of the backward pass.
  Ref detach(Ref a);

  void mark_output(const std::string& name, Ref r);

  const std::vector<int>& dims_of(Ref r) const;
  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::pair<std::string, Ref>>& outputs() const { return outputs_; }
  const std::vector<std::pair<std::string, Ref>>& params() const { return params_; }
  const std::vector<std::pair<std::string, Ref>>& inputs() const { return inputs_; }
  Ref output(const std::string& name) const;

 private:
  Ref push(Node n);

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Ref>> outputs_;
  std::vector<std::pair<std::string, Ref>> params_;
  std::vector<std::pair<std::string, Ref>> inputs_;
};

// Forward values (and per-node stashes) for one evaluation.
struct Workspace {
  std::vector<std::vector<Tensor>> values;
  std::vector<std::vector<double>> stash;  // ContextNorm moments, argmax indices

  const Tensor& at(Ref r) const {
    return values[static_cast<size_t>(r.node)][static_cast<size_t>(r.slot)];
  }
};

// Deterministic forward pass. Every leaf must be bound with matching dims;
// every primitive output is checked finite (NaN/Inf raises). Leaves are looked
// up in `bindings` first, then in `shared` (typically the parameter store,
// passed by pointer so per-example bindings stay small).
void eval(const Graph& g, const TensorMap& bindings, Workspace& ws,
          const TensorMap* shared = nullptr);

// Convenience: forward pass returning the marked outputs by name.
TensorMap eval_outputs(const Graph& g, const TensorMap& bindings,
                       const TensorMap* shared = nullptr);

double eval_scalar(const Graph& g, Ref r, const TensorMap& bindings,
                   const TensorMap* shared = nullptr);

// Reverse-mode gradients for every Param leaf (zero tensors for unreachable
// parameters). `loss` must be scalar. Subgradient conventions: ReLU'(0) = 0,
// |x|'(0) = 0, max-pool routes to the first argmax.
TensorMap grad(const Graph& g, Ref loss, const TensorMap& bindings,
               double* loss_value = nullptr, const TensorMap* shared = nullptr);

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
};

// Central finite differences against the analytic gradient over the named
// parameters; relative error |a - n| / max(1e-8, |a| + |n|). When a tensor has
// more than max_coords entries, a seeded subset of coordinates is probed.
GradCheckResult grad_check(const Graph& g, Ref loss, const TensorMap& bindings, double h,
                           const std::vector<std::string>& which, int64_t max_coords = 0,
                           uint64_t seed = 0);

}  // namespace rigidreg::ad
