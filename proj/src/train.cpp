#include "rigidreg/train.hpp"

#include <cmath>
#include <limits>
#include <fstream>
#include <map>
#include <memory>
#include <stdexcept>

#include "rigidreg/adam.hpp"
#include "rigidreg/checkpoint.hpp"
#include "rigidreg/parallel.hpp"
#include "rigidreg/random.hpp"

namespace rigidreg {

void TrainConfig::validate() const {
  if (net.empty() || net.size() > 2)
    throw std::invalid_argument("train: one or two network configs expected");
  for (const auto& c : net) c.validate();
  loss.validate();
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (steps_per_epoch < 0) throw std::invalid_argument("train: steps_per_epoch must be >= 0");
  if (!(val_split >= 0.0 && val_split < 1.0))
    throw std::invalid_argument("train: validation split must lie in [0, 1)");
  if (!(theta_max_deg >= 0.0)) throw std::invalid_argument("train: theta_max must be >= 0");
}

std::pair<std::vector<CorrespondenceSet>, std::vector<CorrespondenceSet>> split_validation(
    const std::vector<CorrespondenceSet>& all, double val_split, uint64_t seed) {
  if (!(val_split >= 0.0 && val_split < 1.0))
    throw std::invalid_argument("split: validation split must lie in [0, 1)");
  std::vector<int> order(all.size());
  for (size_t i = 0; i < all.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, 0xA11D));
  rng.shuffle(order);
  int n_val = static_cast<int>(std::lround(val_split * static_cast<double>(all.size())));
  std::pair<std::vector<CorrespondenceSet>, std::vector<CorrespondenceSet>> out;
  for (size_t i = 0; i < all.size(); ++i) {
    if (static_cast<int>(i) < n_val)
      out.second.push_back(all[static_cast<size_t>(order[i])]);
    else
      out.first.push_back(all[static_cast<size_t>(order[i])]);
  }
  return out;
}

namespace {

struct GraphCache {
  std::vector<RegNetConfig> configs;
  const LossConfig* loss = nullptr;
  std::map<int, std::unique_ptr<ModelGraph>> by_n;

  const ModelGraph& get(int n) {
    auto it = by_n.find(n);
    if (it == by_n.end())
      it = by_n.emplace(n, std::make_unique<ModelGraph>(build_model_graph(configs, n, loss)))
               .first;
    return *it->second;
  }
};

struct ValStats {
  double accuracy = 0.0;
  double rot_deg = 0.0;
  double trans_m = 0.0;
};

ValStats validate_pass(GraphCache& cache, const ModelParams& params,
                       const std::vector<CorrespondenceSet>& val) {
  struct Row {
    double acc = 0.0, rot = 0.0, trans = 0.0;
  };
  std::vector<Row> rows(val.size());
  // graphs must exist before the parallel section (cache is not locked)
  for (const auto& c : val) cache.get(c.size());
  parallel_for(static_cast<int>(val.size()), [&](int i) {
    const CorrespondenceSet& c = val[static_cast<size_t>(i)];
    const ModelGraph& mg = cache.get(c.size());
    ad::TensorMap bind = make_bindings(c, mg.has_loss);
    ad::TensorMap out = eval_outputs(mg.g, bind, &params.tensors);
    const ad::Tensor& w = out.at("s1.w");
    int correct = 0;
    for (int k = 0; k < c.size(); ++k) {
      bool in = w.data[static_cast<size_t>(k)] >= 0.5;
      if (in == ((*c.labels)[static_cast<size_t>(k)] != 0)) ++correct;
    }
    RigidTransform t;
    for (int a = 0; a < 3; ++a) {
      t.t(a) = out.at("t")(a);
      for (int b = 0; b < 3; ++b) t.R(a, b) = out.at("R")(a, b);
    }
    rows[static_cast<size_t>(i)] = Row{static_cast<double>(correct) / c.size(),
                                       rot_error_deg(t.R, c.gt->R), trans_error_m(t.t, c.gt->t)};
  });
  ValStats s;
  for (const Row& r : rows) {
    s.accuracy += r.acc;
    s.rot_deg += r.rot;
    s.trans_m += r.trans;
  }
  double n = static_cast<double>(val.size());
  s.accuracy /= n;
  s.rot_deg /= n;
  s.trans_m /= n;
  return s;
}

}  // namespace

TrainResult train(const TrainConfig& config, const std::vector<CorrespondenceSet>& train_set,
                  const std::vector<CorrespondenceSet>& val_set) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (val_set.empty()) throw std::invalid_argument("train: empty validation set");
  for (const auto& c : train_set)
    if (!c.labels || !c.gt) throw std::invalid_argument("train: training pairs need labels and gt");
  for (const auto& c : val_set)
    if (!c.labels || !c.gt) throw std::invalid_argument("train: validation pairs need labels and gt");

  ModelParams params = ModelParams::init(config.net, config.seed);
  ad::AdamState adam = ad::AdamState::init(params.tensors);

  GraphCache cache;
  cache.configs = config.net;
  cache.loss = &config.loss;
  for (const auto& c : train_set) cache.get(c.size());
  for (const auto& c : val_set) cache.get(c.size());

  const int steps = config.steps_per_epoch > 0
                        ? config.steps_per_epoch
                        : static_cast<int>((train_set.size() + config.batch_size - 1) /
                                           static_cast<size_t>(config.batch_size));

  TrainResult result;
  double best_rot = std::numeric_limits<double>::infinity();

  struct Slot {
    double loss = 0.0;
    ad::TensorMap grads;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<int> order(train_set.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng shuffle_rng(derive_seed(config.seed, 0xE90C + static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    for (int step = 0; step < steps; ++step) {
      double theta = 0.0;
      if (config.curriculum && steps > 1)
        theta = curriculum_theta(static_cast<double>(step) / (steps - 1), config.theta_max_deg);

      std::vector<Slot> slots(static_cast<size_t>(config.batch_size));
      parallel_for(config.batch_size, [&](int slot) {
        size_t pick = (static_cast<size_t>(step) * config.batch_size + slot) % order.size();
        const CorrespondenceSet* pair = &train_set[static_cast<size_t>(order[pick])];
        CorrespondenceSet augmented;
        if (theta > 0.0) {
          uint64_t aug_seed = derive_seed(
              config.seed, 0xA36B * (static_cast<uint64_t>(epoch) + 1) +
                               static_cast<uint64_t>(step) * 131 + static_cast<uint64_t>(slot));
          augmented = augment_pair(*pair, theta, aug_seed);
          pair = &augmented;
        }
        const ModelGraph& mg = cache.get(pair->size());
        ad::TensorMap bind = make_bindings(*pair, true);
        Slot& s = slots[static_cast<size_t>(slot)];
        try {
          s.grads = ad::grad(mg.g, mg.loss_total, bind, &s.loss, &params.tensors);
        } catch (const std::runtime_error& e) {
          throw std::runtime_error("train: pair " + std::to_string(pair->pair_id) + ": " +
                                   e.what());
        }
        if (!std::isfinite(s.loss))
          throw std::runtime_error("train: pair " + std::to_string(pair->pair_id) +
                                   ": non-finite loss");
      });

      // deterministic reduction in slot order
      ad::TensorMap batch_grad = std::move(slots[0].grads);
      double batch_loss = slots[0].loss;
      for (int slot = 1; slot < config.batch_size; ++slot) {
        batch_loss += slots[static_cast<size_t>(slot)].loss;
        for (auto& [name, g] : batch_grad) {
          const ad::Tensor& other = slots[static_cast<size_t>(slot)].grads.at(name);
          for (size_t k = 0; k < g.data.size(); ++k) g.data[k] += other.data[k];
        }
      }
      double inv_b = 1.0 / config.batch_size;
      for (auto& [name, g] : batch_grad)
        for (double& v : g.data) v *= inv_b;
      batch_loss *= inv_b;
      epoch_loss += batch_loss;

      ad::adam_step(params.tensors, batch_grad, adam, config.lr);
    }

    ValStats vs = validate_pass(cache, params, val_set);
    EpochLog row;
    row.epoch = epoch;
    row.train_loss = epoch_loss / steps;
    row.val_accuracy = vs.accuracy;
    row.val_rot_deg = vs.rot_deg;
    row.val_trans_m = vs.trans_m;
    result.log.push_back(row);

    if (vs.rot_deg < best_rot) {
      best_rot = vs.rot_deg;
      result.best_epoch = epoch;
      result.params.configs = config.net;
      result.params.tensors = params.tensors;
    }
  }

  if (result.params.tensors.empty()) {  // all-NaN-free but never improved: keep final
    result.params.configs = config.net;
    result.params.tensors = params.tensors;
  }
  if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, result.params);
  return result;
}

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("train log: cannot open for writing: " + path);
  os << "epoch,train_loss,val_accuracy,val_rot_deg,val_trans_m\n";
  os.precision(17);
  for (const EpochLog& r : log)
    os << r.epoch << ',' << r.train_loss << ',' << r.val_accuracy << ',' << r.val_rot_deg << ','
       << r.val_trans_m << '\n';
  if (!os) throw std::runtime_error("train log: write failed: " + path);
}

}  // namespace rigidreg
