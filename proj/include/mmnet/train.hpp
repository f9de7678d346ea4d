#pragma once

// Training and inference over plot samples.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mmnet/checkpoint.hpp"
#include "mmnet/network.hpp"

namespace mmnet::train {

struct PreparedSample {
  std::string plot_id;
  sparse::SparseTensor voxels;     // batch-0 tensor
  std::vector<double> labels;      // one per target
};

struct Prepared {
  std::vector<PreparedSample> samples;
  std::vector<std::string> rejected;  // "plot_id: reason"
};

// Preprocess + voxelize; rejected samples are listed, not thrown.
// Independent samples are processed on up to `threads` threads.
Prepared prepare(const std::vector<data::PlotSample>& samples, const NetworkConfig& cfg,
                 const std::vector<data::Target>& targets, std::size_t threads = 1);

// z = (y - mean) / scale per target, fitted on training labels only.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const std::vector<PreparedSample>& train);
  double forward(std::size_t k, double y) const { return (y - mean[k]) / scale[k]; }
  double inverse(std::size_t k, double z) const { return z * scale[k] + mean[k]; }
};

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  // Stop once train-split R2 (eval mode, every target) reaches this; <= 0
  // disables the check.
  double stop_at_train_r2 = 0.0;
  std::size_t eval_every = 1;  // epochs between train-R2 checks
  double max_seconds = 0.0;    // wall-clock budget, 0 for none
  std::size_t threads = 1;     // used for evaluation passes only
  // Half-cosine decay of the learning rate from lr to 0 over `epochs`.
  bool cosine_decay = false;
};

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_r2 = std::numeric_limits<double>::quiet_NaN();
  double val_r2 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochLog> log;
  Standardizer standardizer;
  bool reached_target = false;
  std::size_t best_epoch = 0;  // epoch whose state was kept when selecting on val
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Minibatch MSE on standardized targets with Adam. Throws TrainingError on a
// non-finite loss, naming the epoch and batch. With a non-empty `val`, val R2
// is computed every eval_every epochs and the network ends with the state of
// the best such epoch.
TrainResult fit(Network& net, const std::vector<PreparedSample>& train, const TrainOptions& options,
                const EpochCallback& on_epoch = {}, const std::vector<PreparedSample>& val = {});

// Minimum over targets of R2 on `samples`, eval mode, label units.
double min_r2(Network& net, const std::vector<PreparedSample>& samples, const Standardizer& z,
              std::size_t threads = 1);

// Eval-mode predictions in label units, [sample][target]. Results do not
// depend on batch size or thread count.
std::vector<std::vector<double>> predict(Network& net, const std::vector<PreparedSample>& samples,
                                         const Standardizer& z, std::size_t batch_size = 16,
                                         std::size_t threads = 1);

// Network state plus the standardizer ("target.mean", "target.scale").
void save_model(const std::filesystem::path& path, const Network& net, const Standardizer& z);
Standardizer load_model(const std::filesystem::path& path, Network& net);

}  // namespace mmnet::train
