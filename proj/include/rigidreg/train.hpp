#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rigidreg/data.hpp"
#include "rigidreg/regnet.hpp"

namespace rigidreg {

struct TrainConfig {
  std::vector<RegNetConfig> net{RegNetConfig{}};  // one network or a cascade
  LossConfig loss;
  double lr = 1e-4;
  int batch_size = 16;
  int epochs = 10;
  int steps_per_epoch = 0;  // 0: one sweep, ceil(train size / batch)
  uint64_t seed = 0;
  bool curriculum = false;       // per-step rotation augmentation
  double theta_max_deg = 50.0;   // tent peak when curriculum is on
  double val_split = 0.1;        // used when splitting a single dataset
  std::string checkpoint_path;   // optional; best-validation params are saved

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double val_rot_deg = 0.0;
  double val_trans_m = 0.0;
};

struct TrainResult {
  ModelParams params;  // best validation-rotation checkpoint
  std::vector<EpochLog> log;
  int best_epoch = 0;
};

// Mini-batch Adam on the blended loss. Gradients for the batch are computed
// on parallel workers and reduced in slot order, so a (config, seed) pair
// yields the same result for any thread count. A non-finite loss aborts,
// naming the offending pair. Both datasets need labels and ground truth.
TrainResult train(const TrainConfig& config, const std::vector<CorrespondenceSet>& train_set,
                  const std::vector<CorrespondenceSet>& val_set);

// Deterministic split: shuffles indices with the seed, takes round(split * n)
// pairs for validation.
std::pair<std::vector<CorrespondenceSet>, std::vector<CorrespondenceSet>> split_validation(
    const std::vector<CorrespondenceSet>& all, double val_split, uint64_t seed);

void write_train_log_csv(const std::string& path, const std::vector<EpochLog>& log);

}  // namespace rigidreg
