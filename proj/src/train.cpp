#include "mmnet/train.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <thread>

#include "mmnet/errors.hpp"
#include "mmnet/metrics.hpp"

namespace mmnet::train {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` threads, contiguous chunks.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t * chunk; i < std::min(n, (t + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

sparse::SparseTensor batch_of(const std::vector<PreparedSample>& samples,
                              std::span<const std::size_t> idx) {
  std::vector<sparse::SparseTensor> items;
  items.reserve(idx.size());
  for (auto i : idx) items.push_back(samples[i].voxels);
  return collate(items);
}

std::vector<std::vector<double>> snapshot(const ParameterList& state) {
  std::vector<std::vector<double>> out;
  for (const auto& p : state) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

void restore(const ParameterList& state, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto dst = state[i].tensor.node()->value.begin();
    std::copy(values[i].begin(), values[i].end(), dst);
  }
}

}  // namespace

double min_r2(Network& net, const std::vector<PreparedSample>& samples, const Standardizer& z,
              std::size_t threads) {
  const auto pred = predict(net, samples, z, 16, threads);
  double worst = 1.0;
  for (std::size_t k = 0; k < z.mean.size(); ++k) {
    std::vector<double> obs, f;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      obs.push_back(samples[i].labels[k]);
      f.push_back(pred[i][k]);
    }
    worst = std::min(worst, metrics::r2(obs, f));
  }
  return worst;
}

Prepared prepare(const std::vector<data::PlotSample>& samples, const NetworkConfig& cfg,
                 const std::vector<data::Target>& targets, std::size_t threads) {
  if (targets.size() != cfg.n_outputs) {
    throw ConfigError("network has " + std::to_string(cfg.n_outputs) + " outputs but " +
                      std::to_string(targets.size()) + " targets were requested");
  }
  std::vector<data::PreprocessResult> pre(samples.size());
  std::vector<sparse::SparseTensor> vox(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    pre[i] = data::preprocess(samples[i]);
    if (pre[i].accepted) vox[i] = voxelize(pre[i].sample, cfg);
  });
  Prepared out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!pre[i].accepted) {
      out.rejected.push_back(samples[i].plot_id + ": " + pre[i].reason);
      continue;
    }
    PreparedSample p;
    p.plot_id = samples[i].plot_id;
    p.voxels = std::move(vox[i]);
    for (auto t : targets) p.labels.push_back(samples[i].label(t));
    out.samples.push_back(std::move(p));
  }
  return out;
}

Standardizer Standardizer::fit(const std::vector<PreparedSample>& train) {
  if (train.empty()) throw ContractError("cannot standardize an empty training split");
  const std::size_t k = train.front().labels.size();
  Standardizer z;
  z.mean.assign(k, 0.0);
  z.scale.assign(k, 0.0);
  const double n = static_cast<double>(train.size());
  for (const auto& s : train) {
    for (std::size_t j = 0; j < k; ++j) z.mean[j] += s.labels[j];
  }
  for (auto& m : z.mean) m /= n;
  for (const auto& s : train) {
    for (std::size_t j = 0; j < k; ++j) z.scale[j] += (s.labels[j] - z.mean[j]) * (s.labels[j] - z.mean[j]);
  }
  for (auto& v : z.scale) {
    v = std::sqrt(v / n);
    if (!(v > 0.0)) v = 1.0;
  }
  return z;
}

TrainResult fit(Network& net, const std::vector<PreparedSample>& train, const TrainOptions& options,
                const EpochCallback& on_epoch, const std::vector<PreparedSample>& val) {
  if (train.empty()) throw ContractError("no training samples");
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  const auto start = std::chrono::steady_clock::now();
  TrainResult result;
  result.standardizer = Standardizer::fit(train);
  const auto& z = result.standardizer;
  const std::size_t n_out = z.mean.size();

  const ParameterList params = net.parameters();
  OptimizerOptions oo;
  oo.lr = options.lr;
  Optimizer opt(oo);
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const ParameterList state = net.state();
  std::vector<std::vector<double>> best_state;
  double best_val = -std::numeric_limits<double>::infinity();
  const std::size_t every = std::max<std::size_t>(1, options.eval_every);

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    if (options.cosine_decay) {
      const double progress = static_cast<double>(epoch - 1) / static_cast<double>(options.epochs);
      opt.set_learning_rate(options.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    }
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    double loss_sum = 0.0;
    for (std::size_t b = 0; b * options.batch_size < order.size(); ++b) {
      const std::size_t begin = b * options.batch_size;
      const std::size_t count = std::min(options.batch_size, order.size() - begin);
      std::span<const std::size_t> idx(order.data() + begin, count);
      const auto x = batch_of(train, idx);
      std::vector<double> target;
      for (auto i : idx) {
        for (std::size_t k = 0; k < n_out; ++k) target.push_back(z.forward(k, train[i].labels[k]));
      }
      Tape tape;
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor pred = net.forward(x, sparse::NormMode::train);
        const Tensor loss = mse_loss(pred, Tensor({count, n_out}, std::move(target)));
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b + 1));
        }
        tape.backward(loss);
      }
      opt.step(params);
      zero_grads(params);
      loss_sum += loss_value * static_cast<double>(count);
    }
    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(train.size());
    const bool due = epoch % every == 0 || epoch == options.epochs;
    const bool check = options.stop_at_train_r2 > 0.0 && due;
    if (check) log.train_r2 = min_r2(net, train, z, options.threads);
    if (!val.empty() && due) {
      log.val_r2 = min_r2(net, val, z, options.threads);
      if (log.val_r2 > best_val) {
        best_val = log.val_r2;
        best_state = snapshot(state);
        result.best_epoch = epoch;
      }
    }
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    result.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (check && log.train_r2 >= options.stop_at_train_r2) {
      result.reached_target = true;
      break;
    }
    if (options.max_seconds > 0.0 && result.seconds > options.max_seconds) break;
  }
  if (!best_state.empty()) restore(state, best_state);
  return result;
}

std::vector<std::vector<double>> predict(Network& net, const std::vector<PreparedSample>& samples,
                                         const Standardizer& z, std::size_t batch_size,
                                         std::size_t threads) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t n_batches = (samples.size() + batch_size - 1) / batch_size;
  std::vector<std::vector<double>> out(samples.size());
  parallel_for(n_batches, threads, [&](std::size_t b) {
    const std::size_t begin = b * batch_size;
    const std::size_t count = std::min(batch_size, samples.size() - begin);
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), begin);
    const Tensor pred = net.forward(batch_of(samples, idx), sparse::NormMode::eval);
    const std::size_t k_out = pred.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t k = 0; k < k_out; ++k) {
        out[begin + i].push_back(z.inverse(k, pred.at(i, k)));
      }
    }
  });
  return out;
}

void save_model(const std::filesystem::path& path, const Network& net, const Standardizer& z) {
  ParameterList entries = net.state();
  entries.push_back({"target.mean", Tensor({z.mean.size()}, z.mean)});
  entries.push_back({"target.scale", Tensor({z.scale.size()}, z.scale)});
  save_checkpoint(path, entries);
}

Standardizer load_model(const std::filesystem::path& path, Network& net) {
  const auto entries = load_checkpoint(path);
  restore_checkpoint(entries, net.state());
  Standardizer z;
  for (const auto& e : entries) {
    if (e.name == "target.mean") z.mean = e.values;
    if (e.name == "target.scale") z.scale = e.values;
  }
  if (z.mean.size() != net.config().n_outputs || z.scale.size() != z.mean.size()) {
    throw IngestionError("checkpoint " + path.string() + " lacks target standardization");
  }
  return z;
}

}  // namespace mmnet::train
