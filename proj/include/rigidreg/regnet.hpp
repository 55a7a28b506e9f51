#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "rigidreg/estimators.hpp"
#include "rigidreg/graph.hpp"

namespace rigidreg {

enum class HeadKind { Dnn, Procrustes };
enum class Metric { L1, L2, WeightedL2, GemanMcClure };

const char* head_name(HeadKind h);
HeadKind head_from_name(const std::string& name);
const char* metric_name(Metric m);
Metric metric_from_name(const std::string& name);

// One network: a classification trunk of `blocks` residual units over
// width-dimensional per-correspondence features, plus a registration head.
struct RegNetConfig {
  int blocks = 8;  // C
  int width = 128;
  RotationMode rotation = RotationMode::Lie;
  HeadKind head = HeadKind::Dnn;
  int conv_channels = 8;
  int conv_kh = 3, conv_kw = 3;
  int conv_stride_row = 1, conv_stride_col = 2;  // row = stage axis, col = feature axis
  int head_hidden = 256;
  double weight_threshold = 0.5;  // T

  void validate() const;
};

struct LossConfig {
  double alpha = 0.5;
  double beta = 1e-3;
  Metric metric = Metric::L1;
  double gm_mu = 1.0;

  void validate() const;
};

// Learnable tensors for one network or a two-stage cascade; names carry the
// "s1." / "s2." stage prefix.
struct ModelParams {
  std::vector<RegNetConfig> configs;
  ad::TensorMap tensors;

  // Affine weights drawn uniform in +-sqrt(6/(fan_in+fan_out)), biases zero.
  static ModelParams init(const std::vector<RegNetConfig>& configs, uint64_t seed);
};

// Expected tensor names and shapes for one stage of the given config.
std::vector<std::pair<std::string, std::vector<int>>> stage_tensor_shapes(
    const RegNetConfig& cfg, const std::string& prefix);

struct StageRefs {
  ad::Ref logits;   // [N]
  ad::Ref weights;  // [N], tanh(relu(logits))
  std::vector<ad::Ref> stage_features;  // C+1 maps of [N, width]
  ad::Ref v;        // rotation parameters [M] (DNN head only; node = -1 otherwise)
  ad::Ref rot;      // [3,3]
  ad::Ref trans;    // [3]
};

struct ModelGraph {
  ad::Graph g;
  int n = 0;
  std::vector<StageRefs> stages;
  ad::Ref rot_total, trans_total;
  ad::Ref loss_c, loss_r, loss_total;  // present when built with a LossConfig
  bool has_loss = false;
};

// Forward graph for n correspondences; inputs "P" [n,3] and "Q" [n,3]. With a
// LossConfig, also inputs "labels" and "gamma" [n] and the three loss nodes.
// Two configs chain into the refinement cascade: stage-2 consumes
// (w1*(R1 p + t1), w1*q) and the cumulative motion is R2 R1, R2 t1 + t2.
// With include_heads = false only the classification trunks are built.
ModelGraph build_model_graph(const std::vector<RegNetConfig>& configs, int n,
                             const LossConfig* loss, bool include_heads = true);

// Bindings for one correspondence set (P, Q, and labels/gamma when needed).
ad::TensorMap make_bindings(const CorrespondenceSet& corrs, bool with_labels);

// Per-class loss balance: 0.5*N/N_pos for inliers, 0.5*N/N_neg for outliers,
// zero when the class is absent.
Eigen::VectorXd class_balance(const std::vector<uint8_t>& labels);

// ---------------------------------------------------------------------------
// Operations on concrete data
// ---------------------------------------------------------------------------

struct ClassifyResult {
  WeightVector weights;
  Eigen::VectorXd logits;
  std::vector<Eigen::MatrixXd> stage_features;  // C+1 of N x width
};

// Classification trunk of the first (or only) network.
ClassifyResult forward_classify(const ModelParams& params, const CorrespondenceSet& corrs);

struct RegressOut {
  RotationParam v;
  Eigen::Vector3d t;
};

// DNN registration head on externally supplied stage features.
RegressOut forward_register_dnn(const std::vector<Eigen::MatrixXd>& stage_features,
                                const ModelParams& params);

RigidTransform decode_pose(const RotationParam& v, const Eigen::Vector3d& t);

// Parameter-free differentiable alignment layer: hard-select w >= tau, then a
// weighted SVD fit over the selected correspondences. Matches
// estimators::procrustes restricted to the selected set.
RigidTransform forward_register_procrustes(const CorrespondenceSet& corrs,
                                           const WeightVector& weights, double tau);

struct RefinedResult {
  WeightVector w1, w2;
  RigidTransform T;  // cumulative over both stages
};

// Two-stage cascade forward (params must hold two configs).
RefinedResult forward_refined(const ModelParams& params, const CorrespondenceSet& corrs);

struct ForwardResult {
  WeightVector weights;  // stage-1 weights (the classification of raw input)
  RigidTransform T;      // final (cumulative) transform
};

// Single or cascade forward, per params.configs.
ForwardResult forward_model(const ModelParams& params, const CorrespondenceSet& corrs);

// ---------------------------------------------------------------------------
// Reference loss computations (mirrored by graph nodes during training)
// ---------------------------------------------------------------------------

// Class-balanced cross-entropy on logits: (1/N) sum gamma_i H(y_i, sigmoid(o_i)).
double loss_classification(const Eigen::VectorXd& logits, const std::vector<uint8_t>& labels);

// (1/N) sum rho(q_i, R p_i + t); weights required for Metric::WeightedL2.
double loss_registration(const CorrespondenceSet& corrs, const RigidTransform& T, Metric metric,
                         const Eigen::VectorXd* weights = nullptr, double gm_mu = 1.0);

double loss_total(double loss_c, double loss_r, double alpha, double beta);

// Cascade variant: per-term means over the two stages, then the same blend.
double loss_total_refined(double lc1, double lc2, double lr1, double lr2, double alpha,
                          double beta);

}  // namespace rigidreg
