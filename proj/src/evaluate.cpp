#include "rigidreg/evaluate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "rigidreg/parallel.hpp"
#include "rigidreg/random.hpp"

namespace rigidreg {

const char* method_name(EvalMethod m) {
  switch (m) {
    case EvalMethod::Regnet: return "regnet";
    case EvalMethod::RegnetIcp: return "regnet+icp";
    case EvalMethod::RegnetUmeyama: return "regnet+umeyama";
    case EvalMethod::Ransac: return "ransac";
    case EvalMethod::RansacUmeyama: return "ransac+umeyama";
    case EvalMethod::Icp: return "icp";
  }
  return "?";
}

EvalMethod method_from_name(const std::string& name) {
  for (EvalMethod m : all_methods())
    if (name == method_name(m)) return m;
  throw std::invalid_argument("unknown method: " + name);
}

std::vector<EvalMethod> all_methods() {
  return {EvalMethod::Regnet,        EvalMethod::RegnetIcp, EvalMethod::RegnetUmeyama,
          EvalMethod::Ransac,        EvalMethod::RansacUmeyama, EvalMethod::Icp};
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

CorrespondenceSet subsample(const CorrespondenceSet& c, double fraction, uint64_t seed) {
  int keep = static_cast<int>(std::lround(fraction * c.size()));
  keep = std::max(3, std::min(keep, c.size()));
  if (keep == c.size()) return c;
  std::vector<int> order(static_cast<size_t>(c.size()));
  for (int i = 0; i < c.size(); ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, 0x5AB5A + c.pair_id));
  rng.shuffle(order);
  CorrespondenceSet out;
  out.pair_id = c.pair_id;
  out.gt = c.gt;
  out.P.resize(keep, 3);
  out.Q.resize(keep, 3);
  if (c.labels) out.labels = std::vector<uint8_t>(static_cast<size_t>(keep));
  for (int i = 0; i < keep; ++i) {
    int src = order[static_cast<size_t>(i)];
    out.P.row(i) = c.P.row(src);
    out.Q.row(i) = c.Q.row(src);
    if (c.labels) (*out.labels)[static_cast<size_t>(i)] = (*c.labels)[static_cast<size_t>(src)];
  }
  return out;
}

struct PairOutcome {
  double rot = 0.0, trans = 0.0, seconds = 0.0;
  double acc = -1.0;  // < 0: not applicable
  bool failed = false;
};

double mask_accuracy(const std::vector<uint8_t>& mask, const std::vector<uint8_t>& labels) {
  int correct = 0;
  for (size_t i = 0; i < mask.size(); ++i)
    if ((mask[i] != 0) == (labels[i] != 0)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(mask.size());
}

}  // namespace

EvalReport evaluate(const ModelParams* model, const std::vector<CorrespondenceSet>& dataset,
                    const std::vector<EvalMethod>& methods, const EvalOptions& opts) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (methods.empty()) throw std::invalid_argument("evaluate: no methods requested");
  bool needs_model = false;
  for (EvalMethod m : methods)
    needs_model |= (m == EvalMethod::Regnet || m == EvalMethod::RegnetIcp ||
                    m == EvalMethod::RegnetUmeyama);
  if (needs_model && model == nullptr)
    throw std::invalid_argument("evaluate: network methods need a checkpoint");
  for (const auto& c : dataset)
    if (!c.gt) throw std::invalid_argument("evaluate: dataset has pairs without ground truth");

  // deterministic subsample for the correspondence-count sweep
  std::vector<CorrespondenceSet> data;
  data.reserve(dataset.size());
  for (const auto& c : dataset)
    data.push_back(opts.correspondence_fraction < 1.0
                       ? subsample(c, opts.correspondence_fraction, opts.seed)
                       : c);

  // forward graphs per distinct N, built before the parallel section
  std::map<int, std::unique_ptr<ModelGraph>> graphs;
  if (needs_model) {
    for (const auto& c : data)
      if (!graphs.count(c.size()))
        graphs.emplace(c.size(),
                       std::make_unique<ModelGraph>(build_model_graph(model->configs, c.size(),
                                                                      nullptr)));
  }

  const size_t n_methods = methods.size();
  std::vector<std::vector<PairOutcome>> table(n_methods,
                                              std::vector<PairOutcome>(data.size()));

  parallel_for(static_cast<int>(data.size()), [&](int pi) {
    const CorrespondenceSet& c = data[static_cast<size_t>(pi)];

    // network forward shared by the regnet rows
    bool net_done = false, net_failed = false;
    double net_seconds = 0.0;
    RigidTransform net_T;
    std::vector<uint8_t> net_mask;
    auto run_net = [&]() {
      if (net_done) return;
      net_done = true;
      auto t0 = Clock::now();
      try {
        const ModelGraph& mg = *graphs.at(c.size());
        ad::TensorMap out = eval_outputs(mg.g, make_bindings(c, false), &model->tensors);
        const ad::Tensor& w = out.at("s1.w");
        net_mask.resize(static_cast<size_t>(c.size()));
        for (int k = 0; k < c.size(); ++k)
          net_mask[static_cast<size_t>(k)] = w.data[static_cast<size_t>(k)] >= opts.tau ? 1 : 0;
        for (int a = 0; a < 3; ++a) {
          net_T.t(a) = out.at("t")(a);
          for (int b = 0; b < 3; ++b) net_T.R(a, b) = out.at("R")(a, b);
        }
      } catch (const std::exception&) {
        net_failed = true;
        net_T = RigidTransform();
        net_mask.assign(static_cast<size_t>(c.size()), 0);
      }
      net_seconds = seconds_since(t0);
    };

    bool ransac_done = false, ransac_failed = false;
    double ransac_seconds = 0.0;
    RigidTransform ransac_T;
    std::vector<uint8_t> ransac_mask;
    auto run_ransac = [&]() {
      if (ransac_done) return;
      ransac_done = true;
      auto t0 = Clock::now();
      try {
        RansacResult r = ransac(c, opts.ransac_threshold_m, opts.ransac_iters,
                                derive_seed(opts.seed, c.pair_id));
        ransac_T = r.T;
        ransac_mask = std::move(r.inliers);
      } catch (const std::exception&) {
        ransac_failed = true;
        ransac_T = RigidTransform();
        ransac_mask.assign(static_cast<size_t>(c.size()), 0);
      }
      ransac_seconds = seconds_since(t0);
    };

    for (size_t qi = 0; qi < n_methods; ++qi) {
      PairOutcome o;
      RigidTransform T;
      switch (methods[qi]) {
        case EvalMethod::Regnet: {
          run_net();
          T = net_T;
          o.failed = net_failed;
          o.seconds = net_seconds;
          if (c.labels) o.acc = mask_accuracy(net_mask, *c.labels);
          break;
        }
        case EvalMethod::RegnetIcp: {
          run_net();
          auto t0 = Clock::now();
          T = icp(c.P, c.Q, net_T, opts.icp_max_iters, opts.icp_tol_m);
          o.seconds = net_seconds + seconds_since(t0);
          o.failed = net_failed;
          if (c.labels) o.acc = mask_accuracy(net_mask, *c.labels);
          break;
        }
        case EvalMethod::RegnetUmeyama: {
          run_net();
          auto t0 = Clock::now();
          try {
            T = umeyama(c, net_mask);
          } catch (const std::exception&) {
            T = net_T;  // too few selected: keep the unrefined transform
            o.failed = true;
          }
          o.seconds = net_seconds + seconds_since(t0);
          o.failed = o.failed || net_failed;
          if (c.labels) o.acc = mask_accuracy(net_mask, *c.labels);
          break;
        }
        case EvalMethod::Ransac: {
          run_ransac();
          T = ransac_T;
          o.failed = ransac_failed;
          o.seconds = ransac_seconds;
          if (c.labels) o.acc = mask_accuracy(ransac_mask, *c.labels);
          break;
        }
        case EvalMethod::RansacUmeyama: {
          run_ransac();
          auto t0 = Clock::now();
          try {
            T = umeyama(c, ransac_mask);
          } catch (const std::exception&) {
            T = ransac_T;
            o.failed = true;
          }
          o.seconds = ransac_seconds + seconds_since(t0);
          o.failed = o.failed || ransac_failed;
          if (c.labels) o.acc = mask_accuracy(ransac_mask, *c.labels);
          break;
        }
        case EvalMethod::Icp: {
          auto t0 = Clock::now();
          T = icp(c.P, c.Q, RigidTransform(), opts.icp_max_iters, opts.icp_tol_m);
          o.seconds = seconds_since(t0);
          break;
        }
      }
      o.rot = rot_error_deg(T.R, c.gt->R);
      o.trans = trans_error_m(T.t, c.gt->t);
      table[qi][static_cast<size_t>(pi)] = o;
    }
  });

  EvalReport report;
  for (size_t qi = 0; qi < n_methods; ++qi) {
    MethodRow row;
    row.method = method_name(methods[qi]);
    std::vector<double> rots, transs, accs;
    double time_sum = 0.0;
    for (const PairOutcome& o : table[qi]) {
      rots.push_back(o.rot);
      transs.push_back(o.trans);
      time_sum += o.seconds;
      if (o.acc >= 0.0) accs.push_back(o.acc);
      row.failures += o.failed ? 1 : 0;
    }
    row.rot_mean_deg = mean_of(rots);
    row.rot_median_deg = median_of(rots);
    row.trans_mean_m = mean_of(transs);
    row.trans_median_m = median_of(transs);
    row.time_mean_s = time_sum / static_cast<double>(data.size());
    if (!accs.empty()) row.accuracy = mean_of(accs);
    report.rot_errors_deg[row.method] = std::move(rots);
    report.trans_errors_m[row.method] = std::move(transs);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string report_to_csv(const EvalReport& report, bool include_timing) {
  std::ostringstream os;
  os.precision(17);
  os << "method,rot_mean_deg,rot_median_deg,trans_mean_m,trans_median_m";
  if (include_timing) os << ",time_mean_s";
  os << ",classification_accuracy\n";
  for (const MethodRow& r : report.rows) {
    os << r.method << ',' << r.rot_mean_deg << ',' << r.rot_median_deg << ',' << r.trans_mean_m
       << ',' << r.trans_median_m;
    if (include_timing) os << ',' << r.time_mean_s;
    os << ',';
    if (r.accuracy) os << *r.accuracy;
    os << '\n';
  }
  return os.str();
}

void write_report_csv(const std::string& path, const EvalReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("report: cannot open for writing: " + path);
  os << report_to_csv(report, true);
  if (!os) throw std::runtime_error("report: write failed: " + path);
}

std::vector<std::pair<double, double>> rotation_cdf(const std::vector<double>& errors_deg,
                                                    double grid_step) {
  if (errors_deg.empty()) throw std::invalid_argument("cdf: empty error list");
  std::vector<double> sorted = errors_deg;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> thresholds = sorted;
  if (grid_step > 0.0) {
    int cells = static_cast<int>(std::ceil(sorted.back() / grid_step));
    for (int k = 0; k <= cells; ++k) thresholds.push_back(k * grid_step);
  }
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<std::pair<double, double>> out;
  double n = static_cast<double>(sorted.size());
  for (double thr : thresholds) {
    auto it = std::upper_bound(sorted.begin(), sorted.end(), thr);
    out.emplace_back(thr, static_cast<double>(it - sorted.begin()) / n);
  }
  return out;
}

void cdf_export(const std::vector<double>& errors_deg, const std::string& path,
                double grid_step) {
  auto cdf = rotation_cdf(errors_deg, grid_step);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cdf: cannot open for writing: " + path);
  os.precision(17);
  os << "threshold_deg,fraction\n";
  for (const auto& [thr, frac] : cdf) os << thr << ',' << frac << '\n';
  if (!os) throw std::runtime_error("cdf: write failed: " + path);
}

void chain_export(const std::vector<RigidTransform>& pairwise, const std::string& path) {
  std::vector<RigidTransform> cumulative = chain(pairwise);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("chain: cannot open for writing: " + path);
  os.precision(17);
  os << "r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n";
  for (const RigidTransform& t : cumulative) {
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) os << t.R(i, j) << ',';
    os << t.t(0) << ',' << t.t(1) << ',' << t.t(2) << '\n';
  }
  if (!os) throw std::runtime_error("chain: write failed: " + path);
}

std::vector<RigidTransform> read_transforms_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("transforms: cannot open: " + path);
  std::vector<RigidTransform> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line.find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos) continue;  // header
    std::istringstream ss(line);
    double v[12];
    char comma;
    for (int k = 0; k < 12; ++k) {
      if (!(ss >> v[k]))
        throw std::runtime_error("transforms: line " + std::to_string(lineno) +
                                 ": expected 12 values");
      if (k < 11) ss >> comma;
    }
    RigidTransform t;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) t.R(i, j) = v[i * 3 + j];
    t.t = Eigen::Vector3d(v[9], v[10], v[11]);
    out.push_back(t);
  }
  return out;
}

}  // namespace rigidreg
