#include "rigidreg/regnet.hpp"

#include <cmath>
#include <stdexcept>

#include "rigidreg/random.hpp"

namespace rigidreg {

using ad::Graph;
using ad::Ref;
using ad::Tensor;
using ad::TensorMap;

const char* head_name(HeadKind h) { return h == HeadKind::Dnn ? "dnn" : "procrustes"; }

HeadKind head_from_name(const std::string& name) {
  if (name == "dnn") return HeadKind::Dnn;
  if (name == "procrustes") return HeadKind::Procrustes;
  throw std::invalid_argument("unknown head: " + name);
}

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::L1: return "l1";
    case Metric::L2: return "l2";
    case Metric::WeightedL2: return "weighted-l2";
    case Metric::GemanMcClure: return "geman-mcclure";
  }
  return "?";
}

Metric metric_from_name(const std::string& name) {
  if (name == "l1") return Metric::L1;
  if (name == "l2") return Metric::L2;
  if (name == "weighted-l2" || name == "wl2") return Metric::WeightedL2;
  if (name == "geman-mcclure" || name == "gm") return Metric::GemanMcClure;
  throw std::invalid_argument("unknown metric: " + name);
}

void RegNetConfig::validate() const {
  if (blocks < 1) throw std::invalid_argument("config: blocks must be >= 1");
  if (width < 1 || head_hidden < 1 || conv_channels < 1)
    throw std::invalid_argument("config: widths must be >= 1");
  if (!(weight_threshold >= 0.0 && weight_threshold < 1.0))
    throw std::invalid_argument("config: weight threshold must lie in [0, 1)");
  if (head == HeadKind::Dnn && blocks + 1 < conv_kh)
    throw std::invalid_argument("config: conv kernel does not fit the pooled stages (C+1 rows)");
}

void LossConfig::validate() const {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("loss: coefficients must be >= 0");
  if (!(gm_mu > 0.0)) throw std::invalid_argument("loss: gm_mu must be positive");
}

std::vector<std::pair<std::string, std::vector<int>>> stage_tensor_shapes(
    const RegNetConfig& cfg, const std::string& prefix) {
  cfg.validate();
  std::vector<std::pair<std::string, std::vector<int>>> out;
  out.emplace_back(prefix + "in.W", std::vector<int>{6, cfg.width});
  out.emplace_back(prefix + "in.b", std::vector<int>{cfg.width});
  for (int c = 0; c < cfg.blocks; ++c) {
    std::string b = prefix + "blk" + std::to_string(c) + ".";
    out.emplace_back(b + "fc1.W", std::vector<int>{cfg.width, cfg.width});
    out.emplace_back(b + "fc1.b", std::vector<int>{cfg.width});
    out.emplace_back(b + "fc2.W", std::vector<int>{cfg.width, cfg.width});
    out.emplace_back(b + "fc2.b", std::vector<int>{cfg.width});
  }
  out.emplace_back(prefix + "out.W", std::vector<int>{cfg.width, 1});
  out.emplace_back(prefix + "out.b", std::vector<int>{1});
  if (cfg.head == HeadKind::Dnn) {
    int m = rotation_param_count(cfg.rotation);
    int ho = (cfg.blocks + 1 - cfg.conv_kh) / cfg.conv_stride_row + 1;
    int wo = (cfg.width - cfg.conv_kw) / cfg.conv_stride_col + 1;
    int flat = cfg.conv_channels * ho * wo;
    out.emplace_back(prefix + "conv.K",
                     std::vector<int>{cfg.conv_channels, cfg.conv_kh, cfg.conv_kw});
    out.emplace_back(prefix + "conv.b", std::vector<int>{cfg.conv_channels});
    out.emplace_back(prefix + "head1.W", std::vector<int>{flat, cfg.head_hidden});
    out.emplace_back(prefix + "head1.b", std::vector<int>{cfg.head_hidden});
    out.emplace_back(prefix + "head2.W", std::vector<int>{cfg.head_hidden, m + 3});
    out.emplace_back(prefix + "head2.b", std::vector<int>{m + 3});
  }
  return out;
}

ModelParams ModelParams::init(const std::vector<RegNetConfig>& configs, uint64_t seed) {
  if (configs.empty() || configs.size() > 2)
    throw std::invalid_argument("params: one or two network configs expected");
  ModelParams p;
  p.configs = configs;
  uint64_t counter = 0;
  for (size_t s = 0; s < configs.size(); ++s) {
    std::string prefix = "s" + std::to_string(s + 1) + ".";
    for (const auto& [name, dims] : stage_tensor_shapes(configs[s], prefix)) {
      Tensor t = Tensor::zeros(dims);
      bool is_weight = name.ends_with(".W") || name.ends_with(".K");
      if (is_weight) {
        Rng rng(derive_seed(seed, counter));
        int fan_in, fan_out;
        if (dims.size() == 2) {
          fan_in = dims[0];
          fan_out = dims[1];
        } else {  // conv kernel [K, kh, kw], one input channel
          fan_in = dims[1] * dims[2];
          fan_out = dims[0] * dims[1] * dims[2];
        }
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (double& v : t.data) v = rng.uniform(-bound, bound);
      }
      p.tensors[name] = std::move(t);
      ++counter;
    }
  }
  return p;
}

namespace {

struct StageBuild {
  StageRefs refs;
  Ref x_in;  // [N,6] classification input
};

// Classification trunk: shared 6->width affine + ReLU, then C residual blocks
// of two (context-norm -> affine -> ReLU) units with an identity skip, then a
// width->1 affine for logits and w = tanh(relu(o)).
StageRefs build_classification(Graph& g, const RegNetConfig& cfg, const std::string& prefix,
                               Ref x, int n) {
  StageRefs s;
  Ref in_w = g.param(prefix + "in.W", {6, cfg.width});
  Ref in_b = g.param(prefix + "in.b", {cfg.width});
  Ref h = g.relu(g.affine(x, in_w, in_b));
  s.stage_features.push_back(h);
  for (int c = 0; c < cfg.blocks; ++c) {
    std::string b = prefix + "blk" + std::to_string(c) + ".";
    Ref w1 = g.param(b + "fc1.W", {cfg.width, cfg.width});
    Ref b1 = g.param(b + "fc1.b", {cfg.width});
    Ref w2 = g.param(b + "fc2.W", {cfg.width, cfg.width});
    Ref b2 = g.param(b + "fc2.b", {cfg.width});
    Ref u = g.relu(g.affine(g.context_norm(h), w1, b1));
    u = g.relu(g.affine(g.context_norm(u), w2, b2));
    h = g.add(h, u);
    s.stage_features.push_back(h);
  }
  Ref out_w = g.param(prefix + "out.W", {cfg.width, 1});
  Ref out_b = g.param(prefix + "out.b", {1});
  s.logits = g.reshape(g.affine(h, out_w, out_b), {n});
  s.weights = g.tanh(g.relu(s.logits));
  return s;
}

// DNN head: max-pool each of the C+1 stage maps, normalize the pooled
// (C+1) x width map across the stage axis, convolve, then two affine layers
// down to M+3 outputs.
void build_dnn_head(Graph& g, const RegNetConfig& cfg, const std::string& prefix, StageRefs& s) {
  int m = rotation_param_count(cfg.rotation);
  std::vector<Ref> pooled;
  for (Ref f : s.stage_features) pooled.push_back(g.max_pool_rows(f));
  Ref stack = g.concat_rows(pooled);  // [C+1, width]
  Ref norm = g.context_norm(stack);
  Ref k = g.param(prefix + "conv.K", {cfg.conv_channels, cfg.conv_kh, cfg.conv_kw});
  Ref kb = g.param(prefix + "conv.b", {cfg.conv_channels});
  Ref conv = g.conv2d(norm, k, kb, cfg.conv_stride_row, cfg.conv_stride_col);
  const auto& cd = g.dims_of(conv);
  int flat = cd[0] * cd[1] * cd[2];
  Ref h1w = g.param(prefix + "head1.W", {flat, cfg.head_hidden});
  Ref h1b = g.param(prefix + "head1.b", {cfg.head_hidden});
  Ref h2w = g.param(prefix + "head2.W", {cfg.head_hidden, m + 3});
  Ref h2b = g.param(prefix + "head2.b", {m + 3});
  Ref hh = g.relu(g.affine(g.reshape(conv, {1, flat}), h1w, h1b));
  Ref o = g.reshape(g.affine(hh, h2w, h2b), {m + 3});
  s.v = g.slice(o, 0, m);
  s.trans = g.slice(o, m, m + 3);
  switch (cfg.rotation) {
    case RotationMode::Lie:
      s.rot = g.so3_exp(s.v);
      break;
    case RotationMode::Quaternion:
      s.rot = g.quat_to_rot(s.v);
      break;
    case RotationMode::Linear: {
      auto [u, sv, v] = g.svd3(g.reshape(s.v, {3, 3}));
      (void)sv;
      Ref d = g.det_corr3(u, v);
      s.rot = g.matmul(g.matmul(u, d), g.transpose(v));
      break;
    }
  }
}

// Differentiable alignment head: hard selection by threshold (piecewise
// constant, so gradients only flow through the surviving weights), weighted
// centroid shift, weighted SVD fit.
void build_procrustes_head(Graph& g, double tau, StageRefs& s, Ref p, Ref q, int n) {
  Ref mask = g.threshold_mask(s.weights, tau, 3);
  Ref wm = g.mul(s.weights, mask);
  Ref inv_sw = g.reciprocal(g.sum_canon(wm));
  Ref cp = g.scale_by(g.reshape(g.col_sum_canon(g.row_scale(p, wm)), {1, 3}), inv_sw);
  Ref cq = g.scale_by(g.reshape(g.col_sum_canon(g.row_scale(q, wm)), {1, 3}), inv_sw);
  Ref pc = g.add_row(p, g.reshape(g.scale(cp, -1.0), {3}));
  Ref qc = g.add_row(q, g.reshape(g.scale(cq, -1.0), {3}));
  Ref m = g.weighted_corr3(pc, qc, wm);  // sum w pbar qbar^T
  auto [u, sv, v] = g.svd3(m);
  (void)sv;
  Ref d = g.det_corr3(v, u);
  s.rot = g.matmul(g.matmul(v, d), g.transpose(u));
  s.trans = g.reshape(g.sub(cq, g.matmul(cp, g.transpose(s.rot))), {3});
  (void)n;
}

Ref build_registration_loss(Graph& g, Ref p, Ref q, Ref rot, Ref trans, Ref weights,
                            const LossConfig& loss, int n) {
  Ref e = g.sub(q, g.add_row(g.matmul(p, g.transpose(rot)), trans));
  switch (loss.metric) {
    case Metric::L1:
      return g.scale(g.sum(g.abs(e)), 1.0 / n);
    case Metric::L2:
      return g.scale(g.sum(g.square(e)), 1.0 / n);
    case Metric::WeightedL2:
      return g.scale(g.sum(g.mul(g.row_sum(g.square(e)), weights)), 1.0 / n);
    case Metric::GemanMcClure:
      return g.scale(g.sum(g.geman_mcclure(g.row_sum(g.square(e)), loss.gm_mu)), 1.0 / n);
  }
  throw std::invalid_argument("unknown metric");
}

}  // namespace

ModelGraph build_model_graph(const std::vector<RegNetConfig>& configs, int n,
                             const LossConfig* loss, bool include_heads) {
  if (configs.empty() || configs.size() > 2)
    throw std::invalid_argument("build_model_graph: one or two configs expected");
  for (const auto& c : configs) c.validate();
  if (loss) loss->validate();
  if (n < 1) throw std::invalid_argument("build_model_graph: need n >= 1");

  ModelGraph mg;
  mg.n = n;
  Graph& g = mg.g;
  Ref p = g.input("P", {n, 3});
  Ref q = g.input("Q", {n, 3});

  Ref labels, gamma;
  if (loss) {
    labels = g.input("labels", {n});
    gamma = g.input("gamma", {n});
  }

  Ref x = g.concat_cols(p, q);
  std::vector<Ref> lc_terms, lr_terms;
  Ref rot_prev, trans_prev;

  for (size_t si = 0; si < configs.size(); ++si) {
    const RegNetConfig& cfg = configs[si];
    std::string prefix = "s" + std::to_string(si + 1) + ".";
    StageRefs s = build_classification(g, cfg, prefix, x, n);
    g.mark_output(prefix + "logits", s.logits);
    g.mark_output(prefix + "w", s.weights);
    for (size_t f = 0; f < s.stage_features.size(); ++f)
      g.mark_output(prefix + "f" + std::to_string(f), s.stage_features[f]);

    if (include_heads) {
      if (cfg.head == HeadKind::Dnn)
        build_dnn_head(g, cfg, prefix, s);
      else
        build_procrustes_head(g, cfg.weight_threshold, s, p, q, n);

      // cumulative motion after this stage
      Ref rot_cum = s.rot, trans_cum = s.trans;
      if (si > 0) {
        rot_cum = g.matmul(s.rot, rot_prev);
        trans_cum = g.add(
            g.reshape(g.matmul(g.reshape(trans_prev, {1, 3}), g.transpose(s.rot)), {3}), s.trans);
      }
      g.mark_output(prefix + "R", s.rot);
      g.mark_output(prefix + "t", s.trans);
      mg.rot_total = rot_cum;
      mg.trans_total = trans_cum;

      if (loss) {
        lc_terms.push_back(g.bce_with_logits(s.logits, labels, gamma));
        lr_terms.push_back(
            build_registration_loss(g, p, q, rot_cum, trans_cum, s.weights, *loss, n));
      }

      // Stage-2 input: first scan pre-aligned by stage 1, both scans scaled by
      // w1. The hand-off is detached, so each stage trains on its own loss
      // terms (deep supervision); forward values are unaffected.
      if (si + 1 < configs.size()) {
        Ref w_d = g.detach(s.weights);
        Ref rot_d = g.detach(s.rot);
        Ref trans_d = g.detach(s.trans);
        Ref p2 = g.row_scale(g.add_row(g.matmul(p, g.transpose(rot_d)), trans_d), w_d);
        Ref q2 = g.row_scale(q, w_d);
        x = g.concat_cols(p2, q2);
        rot_prev = rot_d;
        trans_prev = trans_d;
      }
    } else if (si + 1 < configs.size()) {
      throw std::invalid_argument("build_model_graph: cascade requires heads");
    }

    mg.stages.push_back(std::move(s));
  }

  if (include_heads) {
    g.mark_output("R", mg.rot_total);
    g.mark_output("t", mg.trans_total);
  }

  if (loss && include_heads) {
    Ref lc = lc_terms[0], lr = lr_terms[0];
    if (lc_terms.size() == 2) {
      lc = g.scale(g.add(lc_terms[0], lc_terms[1]), 0.5);
      lr = g.scale(g.add(lr_terms[0], lr_terms[1]), 0.5);
    }
    mg.loss_c = lc;
    mg.loss_r = lr;
    mg.loss_total = g.add(g.scale(lc, loss->alpha), g.scale(lr, loss->beta));
    g.mark_output("loss_c", mg.loss_c);
    g.mark_output("loss_r", mg.loss_r);
    g.mark_output("loss", mg.loss_total);
    mg.has_loss = true;
  }
  return mg;
}

Eigen::VectorXd class_balance(const std::vector<uint8_t>& labels) {
  const int n = static_cast<int>(labels.size());
  int pos = 0;
  for (uint8_t y : labels) pos += y ? 1 : 0;
  int neg = n - pos;
  Eigen::VectorXd gamma(n);
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)])
      gamma(i) = pos > 0 ? 0.5 * n / pos : 0.0;
    else
      gamma(i) = neg > 0 ? 0.5 * n / neg : 0.0;
  }
  return gamma;
}

ad::TensorMap make_bindings(const CorrespondenceSet& corrs, bool with_labels) {
  corrs.validate();
  const int n = corrs.size();
  TensorMap b;
  Tensor p = Tensor::zeros({n, 3});
  Tensor q = Tensor::zeros({n, 3});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j) {
      p(i, j) = corrs.P(i, j);
      q(i, j) = corrs.Q(i, j);
    }
  b["P"] = std::move(p);
  b["Q"] = std::move(q);
  if (with_labels) {
    if (!corrs.labels) throw std::invalid_argument("bindings: correspondence set has no labels");
    Eigen::VectorXd gamma = class_balance(*corrs.labels);
    Tensor y = Tensor::zeros({n});
    Tensor gt = Tensor::zeros({n});
    for (int i = 0; i < n; ++i) {
      y(i) = (*corrs.labels)[static_cast<size_t>(i)] ? 1.0 : 0.0;
      gt(i) = gamma(i);
    }
    b["labels"] = std::move(y);
    b["gamma"] = std::move(gt);
  }
  return b;
}

namespace {

TensorMap merged_bindings(const ModelParams& params, const CorrespondenceSet& corrs,
                          bool with_labels) {
  TensorMap b = make_bindings(corrs, with_labels);
  for (const auto& [name, t] : params.tensors) b[name] = t;
  return b;
}

WeightVector weights_from(const Tensor& t) {
  WeightVector w;
  w.w = Eigen::VectorXd(t.size());
  for (int64_t i = 0; i < t.size(); ++i) w.w(static_cast<int>(i)) = t.data[static_cast<size_t>(i)];
  return w;
}

RigidTransform transform_from(const Tensor& r, const Tensor& t) {
  RigidTransform out;
  for (int i = 0; i < 3; ++i) {
    out.t(i) = t(i);
    for (int j = 0; j < 3; ++j) out.R(i, j) = r(i, j);
  }
  return out;
}

}  // namespace

ClassifyResult forward_classify(const ModelParams& params, const CorrespondenceSet& corrs) {
  if (params.configs.empty()) throw std::invalid_argument("forward_classify: empty params");
  const RegNetConfig& cfg = params.configs[0];
  ModelGraph mg = build_model_graph({cfg}, corrs.size(), nullptr, /*include_heads=*/false);
  TensorMap out = eval_outputs(mg.g, merged_bindings(params, corrs, false));

  ClassifyResult res;
  res.weights = weights_from(out.at("s1.w"));
  const Tensor& lt = out.at("s1.logits");
  res.logits = Eigen::VectorXd(lt.size());
  for (int64_t i = 0; i < lt.size(); ++i)
    res.logits(static_cast<int>(i)) = lt.data[static_cast<size_t>(i)];
  for (int f = 0; f <= cfg.blocks; ++f) {
    const Tensor& ft = out.at("s1.f" + std::to_string(f));
    Eigen::MatrixXd m(ft.dim(0), ft.dim(1));
    for (int i = 0; i < ft.dim(0); ++i)
      for (int j = 0; j < ft.dim(1); ++j) m(i, j) = ft(i, j);
    res.stage_features.push_back(std::move(m));
  }
  return res;
}

RegressOut forward_register_dnn(const std::vector<Eigen::MatrixXd>& stage_features,
                                const ModelParams& params) {
  if (params.configs.empty()) throw std::invalid_argument("forward_register_dnn: empty params");
  const RegNetConfig& cfg = params.configs[0];
  if (cfg.head != HeadKind::Dnn)
    throw std::invalid_argument("forward_register_dnn: config head is not dnn");
  if (static_cast<int>(stage_features.size()) != cfg.blocks + 1)
    throw std::invalid_argument("forward_register_dnn: expected C+1 stage feature maps");

  const int n = static_cast<int>(stage_features[0].rows());
  Graph g;
  TensorMap bind;
  StageRefs s;
  for (size_t f = 0; f < stage_features.size(); ++f) {
    std::string name = "f" + std::to_string(f);
    Ref r = g.input(name, {n, cfg.width});
    s.stage_features.push_back(r);
    const Eigen::MatrixXd& m = stage_features[f];
    if (m.rows() != n || m.cols() != cfg.width)
      throw std::invalid_argument("forward_register_dnn: stage feature shape mismatch");
    Tensor t = Tensor::zeros({n, cfg.width});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.width; ++j) t(i, j) = m(i, j);
    bind[name] = std::move(t);
  }
  build_dnn_head(g, cfg, "s1.", s);
  g.mark_output("v", s.v);
  g.mark_output("t", s.trans);
  for (const auto& [name, t] : params.tensors) bind[name] = t;
  TensorMap out = eval_outputs(g, bind);

  RegressOut res;
  res.v.mode = cfg.rotation;
  const Tensor& vt = out.at("v");
  res.v.values = Eigen::VectorXd(vt.size());
  for (int64_t i = 0; i < vt.size(); ++i)
    res.v.values(static_cast<int>(i)) = vt.data[static_cast<size_t>(i)];
  for (int i = 0; i < 3; ++i) res.t(i) = out.at("t")(i);
  return res;
}

RigidTransform decode_pose(const RotationParam& v, const Eigen::Vector3d& t) {
  return RigidTransform(v.to_rotation(), t);
}

RigidTransform forward_register_procrustes(const CorrespondenceSet& corrs,
                                           const WeightVector& weights, double tau) {
  corrs.validate();
  weights.validate(corrs.size());
  if (!(tau >= 0.0 && tau < 1.0))
    throw std::invalid_argument("forward_register_procrustes: tau must lie in [0, 1)");
  const int n = corrs.size();
  Graph g;
  Ref p = g.input("P", {n, 3});
  Ref q = g.input("Q", {n, 3});
  Ref w = g.input("w", {n});
  StageRefs s;
  s.weights = w;
  build_procrustes_head(g, tau, s, p, q, n);
  g.mark_output("R", s.rot);
  g.mark_output("t", s.trans);

  TensorMap bind = make_bindings(corrs, false);
  Tensor wt = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) wt(i) = weights.w(i);
  bind["w"] = std::move(wt);
  TensorMap out = eval_outputs(g, bind);
  return transform_from(out.at("R"), out.at("t"));
}

RefinedResult forward_refined(const ModelParams& params, const CorrespondenceSet& corrs) {
  if (params.configs.size() != 2)
    throw std::invalid_argument("forward_refined: params must hold two configs");
  ModelGraph mg = build_model_graph(params.configs, corrs.size(), nullptr);
  TensorMap out = eval_outputs(mg.g, merged_bindings(params, corrs, false));
  RefinedResult res;
  res.w1 = weights_from(out.at("s1.w"));
  res.w2 = weights_from(out.at("s2.w"));
  res.T = transform_from(out.at("R"), out.at("t"));
  return res;
}

ForwardResult forward_model(const ModelParams& params, const CorrespondenceSet& corrs) {
  ModelGraph mg = build_model_graph(params.configs, corrs.size(), nullptr);
  TensorMap out = eval_outputs(mg.g, merged_bindings(params, corrs, false));
  ForwardResult res;
  res.weights = weights_from(out.at("s1.w"));
  res.T = transform_from(out.at("R"), out.at("t"));
  return res;
}

double loss_classification(const Eigen::VectorXd& logits, const std::vector<uint8_t>& labels) {
  const int n = static_cast<int>(logits.size());
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("loss_classification: length mismatch");
  Eigen::VectorXd gamma = class_balance(labels);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    double o = logits(i);
    double y = labels[static_cast<size_t>(i)] ? 1.0 : 0.0;
    double softplus = std::max(o, 0.0) + std::log1p(std::exp(-std::abs(o)));
    acc += gamma(i) * (softplus - y * o);
  }
  return acc / n;
}

double loss_registration(const CorrespondenceSet& corrs, const RigidTransform& T, Metric metric,
                         const Eigen::VectorXd* weights, double gm_mu) {
  // Unlike the estimators, a loss is well defined for any N >= 1.
  const int n = corrs.size();
  if (n < 1 || corrs.P.rows() != corrs.Q.rows() || !corrs.P.allFinite() || !corrs.Q.allFinite())
    throw std::invalid_argument("loss_registration: bad correspondence set");
  if (metric == Metric::WeightedL2 && weights == nullptr)
    throw std::invalid_argument("loss_registration: weighted metric requires weights");
  if (weights && weights->size() != n)
    throw std::invalid_argument("loss_registration: weight length mismatch");
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d e =
        corrs.Q.row(i).transpose() - (T.R * corrs.P.row(i).transpose() + T.t);
    switch (metric) {
      case Metric::L1:
        acc += e.cwiseAbs().sum();
        break;
      case Metric::L2:
        acc += e.squaredNorm();
        break;
      case Metric::WeightedL2:
        acc += (*weights)(i)*e.squaredNorm();
        break;
      case Metric::GemanMcClure: {
        double s = e.squaredNorm();
        acc += gm_mu * s / (gm_mu + s);
        break;
      }
    }
  }
  return acc / n;
}

double loss_total(double loss_c, double loss_r, double alpha, double beta) {
  if (alpha < 0.0 || beta < 0.0) throw std::invalid_argument("loss_total: negative coefficient");
  return alpha * loss_c + beta * loss_r;
}

double loss_total_refined(double lc1, double lc2, double lr1, double lr2, double alpha,
                          double beta) {
  return loss_total(0.5 * (lc1 + lc2), 0.5 * (lr1 + lr2), alpha, beta);
}

}  // namespace rigidreg
