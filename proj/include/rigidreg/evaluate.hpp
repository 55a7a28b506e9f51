#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rigidreg/regnet.hpp"

namespace rigidreg {

enum class EvalMethod { Regnet, RegnetIcp, RegnetUmeyama, Ransac, RansacUmeyama, Icp };

const char* method_name(EvalMethod m);
EvalMethod method_from_name(const std::string& name);
std::vector<EvalMethod> all_methods();

struct EvalOptions {
  double tau = 0.5;                  // weight threshold for masks / accuracy
  double ransac_threshold_m = 0.075;
  int ransac_iters = 1000;
  int icp_max_iters = 50;
  double icp_tol_m = 1e-6;
  uint64_t seed = 0;
  double correspondence_fraction = 1.0;  // deterministic subsample per pair
};

struct MethodRow {
  std::string method;
  double rot_mean_deg = 0.0;
  double rot_median_deg = 0.0;
  double trans_mean_m = 0.0;
  double trans_median_m = 0.0;
  double time_mean_s = 0.0;
  std::optional<double> accuracy;  // methods that classify correspondences
  int failures = 0;                // pairs where the estimator reported an error
};

struct EvalReport {
  std::vector<MethodRow> rows;
  // per-pair errors in dataset order, keyed by method name (feeds the CDF)
  std::map<std::string, std::vector<double>> rot_errors_deg;
  std::map<std::string, std::vector<double>> trans_errors_m;
};

// Per pair and method: rotation/translation error against gt, wall-clock
// seconds, and classification accuracy where a method yields an inlier mask.
// "+icp" runs ICP seeded with the method's transform; "+umeyama" refits on the
// method's inlier mask (keeping the base transform when fewer than 3 points
// pass). `model` may be null when only classic methods are requested.
EvalReport evaluate(const ModelParams* model, const std::vector<CorrespondenceSet>& dataset,
                    const std::vector<EvalMethod>& methods, const EvalOptions& opts);

double mean_of(const std::vector<double>& v);
double median_of(std::vector<double> v);  // average of the two middle values

// CSV report; timing can be excluded for run-to-run comparisons.
std::string report_to_csv(const EvalReport& report, bool include_timing = true);
void write_report_csv(const std::string& path, const EvalReport& report);

// (threshold, fraction of errors <= threshold); thresholds are the distinct
// error values plus an optional uniform grid of the given step. The fraction
// column is non-decreasing and ends at 1.
std::vector<std::pair<double, double>> rotation_cdf(const std::vector<double>& errors_deg,
                                                    double grid_step = 0.0);
void cdf_export(const std::vector<double>& errors_deg, const std::string& path,
                double grid_step = 0.0);

// Cumulative trajectory of pairwise transforms, one "r00..r22,tx,ty,tz" row
// per scan, in the frame of the first scan.
void chain_export(const std::vector<RigidTransform>& pairwise, const std::string& path);
std::vector<RigidTransform> read_transforms_csv(const std::string& path);

}  // namespace rigidreg
