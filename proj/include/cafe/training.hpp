#pragma once

// Supervised training: AdamW over the trainable parameters, step decay,
// early stopping on a monitored score, evaluation and random-search tuning.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cafe/checkpoint.hpp"
#include "cafe/datasets.hpp"
#include "cafe/metrics.hpp"
#include "cafe/model.hpp"

namespace cafe {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Monitor { val_miou, val_mdice, train_miou };

Monitor parse_monitor(const std::string& s);
std::string to_string(Monitor m);

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int step_size = 10;
  double gamma = 0.5;
  int batch_size = 8;
  int max_epochs = 50;
  int patience = 20;
  std::uint64_t seed = 42;
  Monitor monitor = Monitor::val_miou;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_norm = 1.0;
  int ignore_label = -1;
};

std::vector<std::string> validate(const TrainConfig& c);

struct TunerConfig {
  int n_trials = 20;
  int trial_epochs = 60;
  int trial_patience = 10;
  double lr_min = 1e-5, lr_max = 1e-3;
  double weight_decay_min = 1e-6, weight_decay_max = 1e-2;
  int step_size_min = 5, step_size_max = 30;
  double gamma_min = 0.1, gamma_max = 0.9;
  std::uint64_t seed = 42;
};

std::vector<std::string> validate(const TunerConfig& c);

/// Learning rate for a 0-based epoch: lr * gamma^floor(epoch / step_size).
double step_lr(double lr, double gamma, int step_size, int epoch);

/// Counts epochs without strict improvement of a maximized score.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch's score; true when training should stop.
  bool update(double value);
  /// True when the last update set a new best.
  bool improved() const { return improved_; }
  int best_epoch() const { return best_epoch_; }  // 1-based, 0 before any update
  double best_value() const { return best_; }
  int epochs_seen() const { return seen_; }
  int bad_epochs() const { return bad_; }

  void restore(int seen, int best_epoch, double best, int bad);

 private:
  int patience_;
  int seen_ = 0;
  int best_epoch_ = 0;
  double best_ = 0.0;
  int bad_ = 0;
  bool improved_ = false;
};

/// Decoupled weight decay Adam: p -= lr * (wd * p + m_hat / (sqrt(v_hat) + eps)).
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  /// Parameters without a gradient take a zero gradient (decay still applies).
  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::int64_t steps() const { return t_; }

  /// Moment buffers as named arrays ("adamw.m.<i>", "adamw.v.<i>").
  std::vector<NamedArray<T>> state() const;
  void load_state(const std::vector<NamedArray<T>>& state, std::int64_t steps);

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
};

/// Rescales gradients so their global L2 norm is at most max_norm; returns
/// the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm);

/// Stacks samples [lo, hi) of `order` into an image batch and a label list.
template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const std::vector<TileSample>& data,
                                                  const std::vector<std::size_t>& order, std::size_t lo,
                                                  std::size_t hi);

/// Sample order for one epoch, a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double grad_norm = 0.0;  // mean pre-clip norm
  std::optional<double> val_miou, val_mdice, train_miou;
  double monitor = 0.0;
  bool improved = false;
  int ignored_batches = 0;  // batches whose pixels were all ignored
  double seconds = 0.0;
};

std::string history_csv_header();
std::string history_csv_row(const EpochRecord& r);

/// Everything needed to continue an interrupted run.
template <typename T>
struct TrainState {
  int epochs_done = 0;
  std::vector<EpochRecord> history;
  typename ParameterStore<T>::Snapshot best_weights;
  int best_epoch = 0;
  double best_value = 0.0;
  int bad_epochs = 0;
  std::vector<NamedArray<T>> optimizer;
  std::int64_t optimizer_steps = 0;
  bool stopped_early = false;
};

template <typename T>
struct TrainHooks {
  std::function<void(const EpochRecord&, const TrainState<T>&)> on_epoch;
  /// Called before a TrainingError propagates, with the model still holding
  /// the weights that produced the failure.
  std::function<void(const std::string& reason)> on_abort;
  /// Returning true ends training after the epoch (target reached).
  std::function<bool(const EpochRecord&)> stop_when;
};

/// Optimizes the trainable parameters of `model` and leaves the best-monitor
/// weights loaded on return. `state` (optional) resumes a previous run and
/// receives the final state. Non-finite losses throw TrainingError.
template <typename T>
TrainState<T> train(Model<T>& model, const std::vector<TileSample>& train_set,
                    const std::vector<TileSample>& val_set, const TrainConfig& cfg, const TrainHooks<T>& hooks = {},
                    std::optional<TrainState<T>> resume = std::nullopt);

/// Inference-mode scores with per-image mIoU.
template <typename T>
MetricReport evaluate(const Model<T>& model, const std::vector<TileSample>& data, int batch_size = 8,
                      int ignore_label = -1);

/// Mean cross-entropy over a dataset in inference mode.
template <typename T>
double evaluate_loss(const Model<T>& model, const std::vector<TileSample>& data, int batch_size = 8,
                     int ignore_label = -1);

/// n_trials configurations drawn from the search space; a pure function of
/// the tuner seed. Other fields are copied from `base`.
std::vector<TrainConfig> sample_trials(const TunerConfig& tuner, const TrainConfig& base);

struct TrialRecord {
  int index = 0;
  TrainConfig config;
  std::optional<double> best_value;  // empty when the trial diverged
  int best_epoch = 0;
  std::string status;
};

struct TuneResult {
  std::vector<TrialRecord> trials;
  int best = -1;
  TrainConfig best_config;
};

std::string trial_csv(const std::vector<TrialRecord>& trials);

template <typename T>
using ModelFactory = std::function<std::unique_ptr<Model<T>>()>;

/// Trains every sampled configuration from a fresh model and keeps the one
/// with the highest best-monitor value. Throws TrainingError (with the trial
/// table in the message) when every trial diverged.
template <typename T>
TuneResult tune(const ModelFactory<T>& factory, const std::vector<TileSample>& train_set,
                const std::vector<TileSample>& val_set, const TunerConfig& tuner, const TrainConfig& base);

}  // namespace cafe
