#include <CLI11.hpp>
#include <iostream>
#include <fstream>
#include <sstream>

#include "rigidreg/checkpoint.hpp"
#include "rigidreg/config.hpp"
#include "rigidreg/data.hpp"
#include "rigidreg/evaluate.hpp"
#include "rigidreg/random.hpp"
#include "rigidreg/train.hpp"

using namespace rigidreg;

namespace {

GenConfig gen_config_from(const ConfigFile& cf, uint64_t seed) {
  GenConfig g;
  g.pairs = cf.get_int("pairs", g.pairs);
  g.n = cf.get_int("n", g.n);
  g.outlier_fraction = cf.get_num("outlier_fraction", g.outlier_fraction);
  g.rot_bound_deg = cf.get_num("rot_bound_deg", g.rot_bound_deg);
  g.trans_bound_m = cf.get_num("trans_bound_m", g.trans_bound_m);
  g.noise_sigma_m = cf.get_num("noise_sigma_m", g.noise_sigma_m);
  g.outlier_min_m = cf.get_num("outlier_min_m", g.outlier_min_m);
  g.outlier_max_m = cf.get_num("outlier_max_m", g.outlier_max_m);
  g.label_threshold_m = cf.get_num("label_threshold_m", g.label_threshold_m);
  g.seed = seed;
  return g;
}

std::vector<RegNetConfig> nets_from(const ConfigFile& cf) {
  std::vector<RegNetConfig> nets;
  std::string blocks = cf.get_str("blocks", "8,4");
  std::stringstream ss(blocks);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    RegNetConfig n;
    n.blocks = std::stoi(tok);
    n.width = cf.get_int("width", n.width);
    n.rotation = rotation_mode_from_name(cf.get_str("rotation", "lie"));
    n.head = head_from_name(cf.get_str("head", "dnn"));
    n.conv_channels = cf.get_int("conv_channels", n.conv_channels);
    n.head_hidden = cf.get_int("head_hidden", n.head_hidden);
    n.weight_threshold = cf.get_num("tau", n.weight_threshold);
    nets.push_back(n);
  }
  if (nets.empty() || nets.size() > 2)
    throw std::runtime_error("config: 'blocks' must list one or two networks");
  return nets;
}

TrainConfig train_config_from(const ConfigFile& cf, uint64_t seed) {
  TrainConfig t;
  t.net = nets_from(cf);
  t.loss.metric = metric_from_name(cf.get_str("metric", "l1"));
  t.loss.alpha = cf.get_num("alpha", t.loss.alpha);
  t.loss.beta = cf.get_num("beta", t.loss.beta);
  t.loss.gm_mu = cf.get_num("gm_mu", t.loss.gm_mu);
  t.lr = cf.get_num("lr", t.lr);
  t.batch_size = cf.get_int("batch", t.batch_size);
  t.epochs = cf.get_int("epochs", t.epochs);
  t.steps_per_epoch = cf.get_int("steps_per_epoch", t.steps_per_epoch);
  t.val_split = cf.get_num("val_split", t.val_split);
  t.curriculum = cf.get_bool("curriculum", t.curriculum);
  t.theta_max_deg = cf.get_num("theta_max_deg", t.theta_max_deg);
  t.seed = seed;
  return t;
}

EvalOptions eval_options_from(const ConfigFile& cf, uint64_t seed, double fraction) {
  EvalOptions o;
  o.tau = cf.get_num("tau", o.tau);
  o.ransac_threshold_m = cf.get_num("ransac_threshold_m", o.ransac_threshold_m);
  o.ransac_iters = cf.get_int("ransac_iters", o.ransac_iters);
  o.icp_max_iters = cf.get_int("icp_iters", o.icp_max_iters);
  o.icp_tol_m = cf.get_num("icp_tol_m", o.icp_tol_m);
  o.seed = seed;
  o.correspondence_fraction = fraction;
  return o;
}

std::vector<double> read_number_column(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  std::vector<double> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line.find_first_of("abcdefghijklmnopqrstuvwxyz") != std::string::npos) continue;
    // first column of a CSV row, or a bare number per line
    std::istringstream ss(line);
    double v;
    if (ss >> v) out.push_back(v);
  }
  if (out.empty()) throw std::runtime_error("no numbers found in " + path);
  return out;
}

void print_transform(const RigidTransform& t) {
  std::cout.precision(17);
  std::cout << "R =";
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) std::cout << ' ' << t.R(i, j);
  std::cout << "\nt = " << t.t(0) << ' ' << t.t(1) << ' ' << t.t(2) << '\n';
}

void write_weights_file(const std::string& path, const Eigen::VectorXd& w) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.precision(17);
  os << "weight\n";
  for (int i = 0; i < w.size(); ++i) os << w(i) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rigidreg: correspondence-based 3D rigid registration toolkit"};
  app.require_subcommand(1);

  std::string config_path, dataset_path, checkpoint_path, out_path, in_path, method_arg,
      log_path, errors_out, weights_out;
  uint64_t seed = 0;
  double calibrate_target = -1.0, fraction = 1.0, grid_step = 0.0;
  int index = 0;

  auto* gen = app.add_subcommand("gen", "generate a synthetic correspondence dataset");
  gen->add_option("--config", config_path, "key=value generation parameters");
  gen->add_option("--out", out_path, "output dataset path")->required();
  gen->add_option("--seed", seed, "generation seed");
  gen->add_option("--calibrate", calibrate_target,
                  "re-label with a threshold calibrated to this outlier fraction");

  auto* train_cmd = app.add_subcommand("train", "train a model on a dataset");
  train_cmd->add_option("--config", config_path, "key=value network/loss/training parameters");
  train_cmd->add_option("--dataset", dataset_path, "training dataset")->required();
  train_cmd->add_option("--checkpoint", checkpoint_path, "output checkpoint path")->required();
  train_cmd->add_option("--seed", seed, "training seed");
  train_cmd->add_option("--log", log_path, "per-epoch CSV log path");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate methods on a dataset");
  eval_cmd->add_option("--config", config_path, "key=value evaluation parameters");
  eval_cmd->add_option("--dataset", dataset_path, "evaluation dataset")->required();
  eval_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint (network methods)");
  eval_cmd->add_option("--method", method_arg, "comma list of methods, or 'all'");
  eval_cmd->add_option("--out", out_path, "report CSV path");
  eval_cmd->add_option("--errors-out", errors_out, "per-pair rotation error CSV prefix");
  eval_cmd->add_option("--fraction", fraction, "correspondence fraction to evaluate");
  eval_cmd->add_option("--seed", seed, "evaluation seed");

  auto* reg = app.add_subcommand("register", "register one pair from a dataset");
  reg->add_option("--dataset", dataset_path, "dataset file")->required();
  reg->add_option("--index", index, "pair index in the dataset");
  reg->add_option("--method", method_arg, "procrustes|umeyama|ransac|icp|regnet")->required();
  reg->add_option("--checkpoint", checkpoint_path, "model checkpoint for method=regnet");
  reg->add_option("--config", config_path, "key=value estimator parameters");
  reg->add_option("--weights-out", weights_out, "write per-correspondence weights/mask CSV");
  reg->add_option("--seed", seed, "estimator seed");

  auto* chain_cmd = app.add_subcommand("chain", "compose pairwise transforms into a trajectory");
  chain_cmd->add_option("--in", in_path, "CSV of pairwise transforms (r00..r22,tx,ty,tz)")
      ->required();
  chain_cmd->add_option("--out", out_path, "output trajectory CSV")->required();

  auto* cdf_cmd = app.add_subcommand("cdf", "rotation-error CDF from a list of errors");
  cdf_cmd->add_option("--in", in_path, "CSV/plain file of rotation errors in degrees")->required();
  cdf_cmd->add_option("--out", out_path, "output CDF CSV")->required();
  cdf_cmd->add_option("--grid", grid_step, "additional uniform threshold grid step");

  CLI11_PARSE(app, argc, argv);

  try {
    ConfigFile cf =
        config_path.empty() ? ConfigFile::parse_text("") : ConfigFile::parse_file(config_path);

    if (gen->parsed()) {
      GenConfig g = gen_config_from(cf, seed);
      auto sets = gen_synthetic(g);
      if (calibrate_target >= 0.0) {
        double thr = calibrate_threshold(sets, calibrate_target);
        std::cout << "calibrated label threshold: " << thr << " m\n";
        for (auto& c : sets) c.labels = label_inliers(c, *c.gt, thr);
      }
      write_dataset(out_path, sets);
      std::cout << "wrote " << sets.size() << " pairs (n=" << g.n << ") to " << out_path << '\n';
    } else if (train_cmd->parsed()) {
      TrainConfig tc = train_config_from(cf, seed);
      tc.checkpoint_path = checkpoint_path;
      auto all = read_dataset(dataset_path);
      auto [train_set, val_set] = split_validation(all, tc.val_split, tc.seed);
      TrainResult res = train(tc, train_set, val_set);
      if (!log_path.empty()) write_train_log_csv(log_path, res.log);
      const EpochLog& last = res.log.back();
      std::cout << "finished " << res.log.size() << " epochs; best epoch " << res.best_epoch
                << "; final val: acc " << last.val_accuracy << ", rot " << last.val_rot_deg
                << " deg, trans " << last.val_trans_m << " m\n";
      std::cout << "checkpoint written to " << checkpoint_path << '\n';
    } else if (eval_cmd->parsed()) {
      auto dataset = read_dataset(dataset_path);
      std::vector<EvalMethod> methods;
      if (method_arg.empty() || method_arg == "all") {
        methods = all_methods();
      } else {
        std::stringstream ss(method_arg);
        std::string tok;
        while (std::getline(ss, tok, ',')) methods.push_back(method_from_name(tok));
      }
      ModelParams params;
      bool have_model = !checkpoint_path.empty();
      if (have_model) params = load_checkpoint(checkpoint_path);
      EvalOptions opts = eval_options_from(cf, seed, fraction);
      EvalReport report = evaluate(have_model ? &params : nullptr, dataset, methods, opts);
      std::cout << report_to_csv(report, true);
      if (!out_path.empty()) write_report_csv(out_path, report);
      if (!errors_out.empty()) {
        for (const auto& [name, errs] : report.rot_errors_deg) {
          std::ofstream os(errors_out + "." + name + ".csv");
          os.precision(17);
          os << "rot_error_deg\n";
          for (double e : errs) os << e << '\n';
        }
      }
    } else if (reg->parsed()) {
      auto dataset = read_dataset(dataset_path);
      if (index < 0 || index >= static_cast<int>(dataset.size()))
        throw std::runtime_error("register: index out of range");
      const CorrespondenceSet& pair = dataset[static_cast<size_t>(index)];
      EvalOptions opts = eval_options_from(cf, seed, 1.0);

      if (method_arg == "procrustes") {
        if (!pair.labels) throw std::runtime_error("register: pair has no labels to weight by");
        WeightVector w;
        w.w = Eigen::VectorXd(pair.size());
        for (int i = 0; i < pair.size(); ++i)
          w.w(i) = (*pair.labels)[static_cast<size_t>(i)] ? 0.9 : 0.0;
        print_transform(procrustes(pair, w));
        if (!weights_out.empty()) write_weights_file(weights_out, w.w);
      } else if (method_arg == "umeyama") {
        if (!pair.labels) throw std::runtime_error("register: pair has no labels to mask by");
        print_transform(umeyama(pair, *pair.labels));
      } else if (method_arg == "ransac") {
        RansacResult r =
            ransac(pair, opts.ransac_threshold_m, opts.ransac_iters, derive_seed(seed, pair.pair_id));
        print_transform(r.T);
        std::cout << "inliers = " << r.inlier_count << " / " << pair.size()
                  << ", mean residual = " << r.mean_residual << " m\n";
        if (!weights_out.empty()) {
          Eigen::VectorXd w(pair.size());
          for (int i = 0; i < pair.size(); ++i) w(i) = r.inliers[static_cast<size_t>(i)];
          write_weights_file(weights_out, w);
        }
      } else if (method_arg == "icp") {
        RigidTransform t = icp(pair.P, pair.Q, RigidTransform(), opts.icp_max_iters, opts.icp_tol_m);
        print_transform(t);
        std::cout << "residual = " << icp_residual(pair.P, pair.Q, t) << " m rms\n";
      } else if (method_arg == "regnet") {
        if (checkpoint_path.empty())
          throw std::runtime_error("register: method=regnet needs --checkpoint");
        ModelParams params = load_checkpoint(checkpoint_path);
        ForwardResult fw = forward_model(params, pair);
        print_transform(fw.T);
        int selected = 0;
        for (int i = 0; i < pair.size(); ++i) selected += fw.weights.w(i) >= opts.tau ? 1 : 0;
        std::cout << "selected = " << selected << " / " << pair.size() << " at tau = " << opts.tau
                  << '\n';
        if (!weights_out.empty()) write_weights_file(weights_out, fw.weights.w);
      } else {
        throw std::runtime_error("register: unknown method " + method_arg);
      }
    } else if (chain_cmd->parsed()) {
      chain_export(read_transforms_csv(in_path), out_path);
      std::cout << "wrote trajectory to " << out_path << '\n';
    } else if (cdf_cmd->parsed()) {
      cdf_export(read_number_column(in_path), out_path, grid_step);
      std::cout << "wrote CDF to " << out_path << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
