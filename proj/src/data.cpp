#include "rigidreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "rigidreg/parallel.hpp"
#include "rigidreg/random.hpp"

namespace rigidreg {

void GenConfig::validate() const {
  if (pairs < 1) throw std::invalid_argument("gen: pairs must be >= 1");
  if (n < 3) throw std::invalid_argument("gen: n must be >= 3");
  if (!(outlier_fraction >= 0.0 && outlier_fraction <= 1.0))
    throw std::invalid_argument("gen: outlier fraction must lie in [0, 1]");
  if (!(rot_bound_deg >= 0.0) || !(trans_bound_m >= 0.0) || !(noise_sigma_m >= 0.0))
    throw std::invalid_argument("gen: bounds must be non-negative");
  if (!(outlier_min_m > 0.0) || outlier_max_m < outlier_min_m)
    throw std::invalid_argument("gen: bad outlier displacement range");
  if (!(label_threshold_m >= 0.0)) throw std::invalid_argument("gen: bad label threshold");
}

namespace {

Eigen::Vector3d unit3(Rng& rng) {
  auto a = rng.unit3();
  return Eigen::Vector3d(a[0], a[1], a[2]);
}

CorrespondenceSet gen_pair(const GenConfig& cfg, uint64_t index) {
  Rng rng(derive_seed(cfg.seed, index));
  CorrespondenceSet c;
  c.pair_id = index;
  c.P.resize(cfg.n, 3);
  c.Q.resize(cfg.n, 3);

  RigidTransform gt(so3_exp(unit3(rng) * rng.uniform(0.0, cfg.rot_bound_deg * M_PI / 180.0)),
                    unit3(rng) * rng.uniform(0.0, cfg.trans_bound_m));

  int n_out = static_cast<int>(std::lround(cfg.outlier_fraction * cfg.n));
  std::vector<int> order(static_cast<size_t>(cfg.n));
  for (int i = 0; i < cfg.n; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<uint8_t> is_outlier(static_cast<size_t>(cfg.n), 0);
  for (int i = 0; i < n_out; ++i) is_outlier[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;

  for (int i = 0; i < cfg.n; ++i) {
    Eigen::Vector3d p(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    Eigen::Vector3d q = apply(gt, p);
    if (is_outlier[static_cast<size_t>(i)]) {
      q += unit3(rng) * rng.uniform(cfg.outlier_min_m, cfg.outlier_max_m);
    } else {
      q += cfg.noise_sigma_m * Eigen::Vector3d(rng.normal(), rng.normal(), rng.normal());
    }
    c.P.row(i) = p.transpose();
    c.Q.row(i) = q.transpose();
  }
  c.gt = gt;
  c.labels = label_inliers(c, gt, cfg.label_threshold_m);
  return c;
}

}  // namespace

std::vector<CorrespondenceSet> gen_synthetic(const GenConfig& config) {
  config.validate();
  std::vector<CorrespondenceSet> out(static_cast<size_t>(config.pairs));
  parallel_for(config.pairs,
               [&](int i) { out[static_cast<size_t>(i)] = gen_pair(config, static_cast<uint64_t>(i)); });
  return out;
}

std::vector<uint8_t> label_inliers(const CorrespondenceSet& corrs, const RigidTransform& gt,
                                   double dist_threshold) {
  const int n = corrs.size();
  std::vector<uint8_t> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double r = (corrs.Q.row(i).transpose() - apply(gt, corrs.P.row(i).transpose())).norm();
    labels[static_cast<size_t>(i)] = r < dist_threshold ? 1 : 0;
  }
  return labels;
}

double calibrate_threshold(const std::vector<CorrespondenceSet>& sets, double target_fraction) {
  if (sets.empty()) throw std::invalid_argument("calibrate: empty dataset");
  if (!(target_fraction >= 0.0 && target_fraction <= 1.0))
    throw std::invalid_argument("calibrate: target fraction must lie in [0, 1]");

  std::vector<double> residuals;
  for (const auto& c : sets) {
    if (!c.gt) throw std::invalid_argument("calibrate: set without ground truth");
    for (int i = 0; i < c.size(); ++i)
      residuals.push_back(
          (c.Q.row(i).transpose() - apply(*c.gt, c.P.row(i).transpose())).norm());
  }
  const double total = static_cast<double>(residuals.size());
  auto outlier_fraction = [&](double thr) {
    size_t out = 0;
    for (double r : residuals) out += r >= thr ? 1 : 0;
    return static_cast<double>(out) / total;
  };

  double lo = 0.0;
  double hi = (*std::max_element(residuals.begin(), residuals.end())) * (1.0 + 1e-9) + 1e-12;
  double best_thr = hi;
  double best_gap = std::abs(outlier_fraction(hi) - target_fraction);
  for (int iter = 0; iter < 50; ++iter) {
    double mid = 0.5 * (lo + hi);
    double frac = outlier_fraction(mid);
    double gap = std::abs(frac - target_fraction);
    if (gap < best_gap) {
      best_gap = gap;
      best_thr = mid;
    }
    if (gap <= 0.01) return mid;
    if (frac > target_fraction)
      lo = mid;  // too many outliers: admit more
    else
      hi = mid;
  }
  if (best_gap <= 0.01) return best_thr;
  throw std::runtime_error("calibrate: target outlier fraction unattainable");
}

double curriculum_theta(double tau, double theta_max_deg) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("curriculum: tau must lie in [0, 1]");
  if (!(theta_max_deg >= 0.0)) throw std::invalid_argument("curriculum: theta_max must be >= 0");
  return tau <= 0.5 ? 2.0 * tau * theta_max_deg : 2.0 * (1.0 - tau) * theta_max_deg;
}

CorrespondenceSet augment_pair(const CorrespondenceSet& pair, double theta_deg, uint64_t seed) {
  if (!(theta_deg >= 0.0)) throw std::invalid_argument("augment: theta must be >= 0");
  Rng rng(seed);
  Eigen::Matrix3d r_aug = so3_exp(unit3(rng) * (theta_deg * M_PI / 180.0));
  CorrespondenceSet out = pair;
  for (int i = 0; i < pair.size(); ++i)
    out.Q.row(i) = (r_aug * pair.Q.row(i).transpose()).transpose();
  if (pair.gt) out.gt = RigidTransform(r_aug * pair.gt->R, r_aug * pair.gt->t);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'3', 'D', 'R', 'G'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

bool get_bytes(std::istream& is, void* dst, size_t count) {
  is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(count));
  return is.gcount() == static_cast<std::streamsize>(count);
}

bool get_u32(std::istream& is, uint32_t& v) {
  unsigned char b[4];
  if (!get_bytes(is, b, 4)) return false;
  v = static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
      static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
  return true;
}

bool get_u64(std::istream& is, uint64_t& v) {
  unsigned char b[8];
  if (!get_bytes(is, b, 8)) return false;
  v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return true;
}

bool get_f32(std::istream& is, float& v) {
  uint32_t u;
  if (!get_u32(is, u)) return false;
  std::memcpy(&v, &u, 4);
  return true;
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<CorrespondenceSet>& sets) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u64(os, static_cast<uint64_t>(sets.size()));
  for (size_t k = 0; k < sets.size(); ++k) {
    const CorrespondenceSet& c = sets[k];
    const int n = c.size();
    if (n < 1) throw std::invalid_argument("dataset: record " + std::to_string(k) + " has N=0");
    if (c.P.rows() != c.Q.rows())
      throw std::invalid_argument("dataset: record " + std::to_string(k) + " P/Q mismatch");
    put_u64(os, c.pair_id);
    put_u32(os, static_cast<uint32_t>(n));
    uint8_t flags = (c.labels ? 1 : 0) | (c.gt ? 2 : 0);
    os.write(reinterpret_cast<const char*>(&flags), 1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 3; ++j) put_f32(os, static_cast<float>(c.P(i, j)));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < 3; ++j) put_f32(os, static_cast<float>(c.Q(i, j)));
    if (c.labels) {
      if (static_cast<int>(c.labels->size()) != n)
        throw std::invalid_argument("dataset: record " + std::to_string(k) + " label mismatch");
      os.write(reinterpret_cast<const char*>(c.labels->data()), n);
    }
    if (c.gt) {
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) put_f32(os, static_cast<float>(c.gt->R(i, j)));
      for (int i = 0; i < 3; ++i) put_f32(os, static_cast<float>(c.gt->t(i)));
    }
  }
  if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

std::vector<CorrespondenceSet> read_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open: " + path);
  char magic[4];
  if (!get_bytes(is, magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("dataset: bad magic (not a dataset file)");
  uint32_t version = 0;
  if (!get_u32(is, version)) throw std::runtime_error("dataset: truncated header");
  if (version != kVersion)
    throw std::runtime_error("dataset: unsupported version " + std::to_string(version));
  uint64_t count = 0;
  if (!get_u64(is, count)) throw std::runtime_error("dataset: truncated header");

  std::vector<CorrespondenceSet> sets;
  sets.reserve(count);
  for (uint64_t k = 0; k < count; ++k) {
    auto truncated = [&]() {
      return std::runtime_error("dataset: truncated in record " + std::to_string(k));
    };
    CorrespondenceSet c;
    uint32_t n = 0;
    uint8_t flags = 0;
    if (!get_u64(is, c.pair_id)) throw truncated();
    if (!get_u32(is, n)) throw truncated();
    if (n == 0) throw std::runtime_error("dataset: record " + std::to_string(k) + " has N=0");
    if (!get_bytes(is, &flags, 1)) throw truncated();
    c.P.resize(n, 3);
    c.Q.resize(n, 3);
    float f = 0;
    for (uint32_t i = 0; i < n; ++i)
      for (int j = 0; j < 3; ++j) {
        if (!get_f32(is, f)) throw truncated();
        c.P(static_cast<int>(i), j) = f;
      }
    for (uint32_t i = 0; i < n; ++i)
      for (int j = 0; j < 3; ++j) {
        if (!get_f32(is, f)) throw truncated();
        c.Q(static_cast<int>(i), j) = f;
      }
    if (flags & 1) {
      std::vector<uint8_t> labels(n);
      if (!get_bytes(is, labels.data(), n)) throw truncated();
      c.labels = std::move(labels);
    }
    if (flags & 2) {
      RigidTransform gt;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          if (!get_f32(is, f)) throw truncated();
          gt.R(i, j) = f;
        }
      for (int i = 0; i < 3; ++i) {
        if (!get_f32(is, f)) throw truncated();
        gt.t(i) = f;
      }
      c.gt = gt;
    }
    sets.push_back(std::move(c));
  }
  return sets;
}

}  // namespace rigidreg
