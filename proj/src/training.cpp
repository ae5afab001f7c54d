#include "cafe/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "cafe/ops.hpp"

namespace cafe {

Monitor parse_monitor(const std::string& s) {
  if (s == "val_miou") return Monitor::val_miou;
  if (s == "val_mdice") return Monitor::val_mdice;
  if (s == "train_miou") return Monitor::train_miou;
  throw ConfigError("unknown monitor '" + s + "' (expected val_miou, val_mdice or train_miou)");
}

std::string to_string(Monitor m) {
  switch (m) {
    case Monitor::val_miou: return "val_miou";
    case Monitor::val_mdice: return "val_mdice";
    default: return "train_miou";
  }
}

std::vector<std::string> validate(const TrainConfig& c) {
  std::vector<std::string> e;
  if (!(c.lr > 0)) e.push_back("training.lr must be positive");
  if (!(c.weight_decay >= 0)) e.push_back("training.weight_decay must be non-negative");
  if (!(c.gamma > 0 && c.gamma <= 1)) e.push_back("training.gamma must lie in (0, 1]");
  if (c.step_size < 1) e.push_back("training.step_size must be at least 1");
  if (c.batch_size < 1) e.push_back("training.batch_size must be at least 1");
  if (c.max_epochs < 1) e.push_back("training.max_epochs must be at least 1");
  if (c.patience < 1) e.push_back("training.patience must be at least 1");
  if (!(c.clip_norm >= 0)) e.push_back("training.clip_norm must be non-negative");
  return e;
}

std::vector<std::string> validate(const TunerConfig& c) {
  std::vector<std::string> e;
  if (c.n_trials < 1) e.push_back("tuner.n_trials must be at least 1");
  if (c.trial_epochs < 1) e.push_back("tuner.trial_epochs must be at least 1");
  if (c.trial_patience < 1) e.push_back("tuner.trial_patience must be at least 1");
  if (!(c.lr_min > 0 && c.lr_min <= c.lr_max)) e.push_back("tuner lr bounds must satisfy 0 < min <= max");
  if (!(c.weight_decay_min > 0 && c.weight_decay_min <= c.weight_decay_max))
    e.push_back("tuner weight_decay bounds must satisfy 0 < min <= max");
  if (!(c.step_size_min >= 1 && c.step_size_min <= c.step_size_max))
    e.push_back("tuner step_size bounds must satisfy 1 <= min <= max");
  if (!(c.gamma_min > 0 && c.gamma_min <= c.gamma_max && c.gamma_max <= 1))
    e.push_back("tuner gamma bounds must satisfy 0 < min <= max <= 1");
  return e;
}

double step_lr(double lr, double gamma, int step_size, int epoch) {
  return lr * std::pow(gamma, epoch / step_size);
}

bool EarlyStopping::update(double value) {
  ++seen_;
  improved_ = seen_ == 1 || value > best_;
  if (improved_) {
    best_ = value;
    best_epoch_ = seen_;
    bad_ = 0;
  } else {
    ++bad_;
  }
  return bad_ >= patience_;
}

void EarlyStopping::restore(int seen, int best_epoch, double best, int bad) {
  seen_ = seen;
  best_epoch_ = best_epoch;
  best_ = best;
  bad_ = bad;
  improved_ = false;
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, double lr, double weight_decay, double beta1, double beta2,
                double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }
}

template <typename T>
void AdamW<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& impl = *params_[i].impl();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool has = !impl.grad.empty();
    for (std::size_t j = 0; j < impl.data.size(); ++j) {
      const double g = has ? static_cast<double>(impl.grad[j]) : 0.0;
      const double mj = b1_ * m[j] + (1.0 - b1_) * g;
      const double vj = b2_ * v[j] + (1.0 - b2_) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double p = impl.data[j];
      const double upd = (mj / c1) / (std::sqrt(vj / c2) + eps_);
      impl.data[j] = static_cast<T>(p - lr_ * (wd_ * p + upd));
    }
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
std::vector<NamedArray<T>> AdamW<T>::state() const {
  std::vector<NamedArray<T>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::int64_t>(m_[i].size());
    out.push_back({"adamw.m." + std::to_string(i), {n}, m_[i]});
    out.push_back({"adamw.v." + std::to_string(i), {n}, v_[i]});
  }
  return out;
}

template <typename T>
void AdamW<T>::load_state(const std::vector<NamedArray<T>>& state, std::int64_t steps) {
  std::size_t found = 0;
  for (const auto& a : state) {
    const bool is_m = a.name.rfind("adamw.m.", 0) == 0;
    const bool is_v = a.name.rfind("adamw.v.", 0) == 0;
    if (!is_m && !is_v) continue;
    const auto i = std::stoul(a.name.substr(8));
    if (i >= params_.size() || a.values.size() != m_[i].size())
      throw TrainingError("optimizer state " + a.name + " does not match the trainable parameters");
    auto& dst = is_m ? m_[i] : v_[i];
    std::copy(a.values.begin(), a.values.end(), dst.begin());
    ++found;
  }
  if (found != 2 * params_.size()) throw TrainingError("optimizer state is incomplete");
  t_ = steps;
}

template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (T g : p.impl()->grad) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-12));
    for (const auto& p : params)
      for (T& g : p.impl()->grad) g *= scale;
  }
  return norm;
}

template <typename T>
std::pair<Tensor<T>, std::vector<int>> make_batch(const std::vector<TileSample>& data,
                                                  const std::vector<std::size_t>& order, std::size_t lo,
                                                  std::size_t hi) {
  if (lo >= hi || hi > order.size()) throw TrainingError("empty or out-of-range batch");
  const auto& first = data[order[lo]];
  const std::size_t img = first.image.size(), px = first.mask.size();
  std::vector<T> values;
  std::vector<int> labels;
  values.reserve(img * (hi - lo));
  labels.reserve(px * (hi - lo));
  for (std::size_t i = lo; i < hi; ++i) {
    const auto& s = data[order[i]];
    if (s.channels != first.channels || s.height != first.height || s.width != first.width)
      throw DataError("sample " + s.id + " differs in shape from " + first.id + " within one batch");
    values.insert(values.end(), s.image.begin(), s.image.end());
    labels.insert(labels.end(), s.mask.begin(), s.mask.end());
  }
  const auto b = static_cast<std::int64_t>(hi - lo);
  return {Tensor<T>::from({b, first.channels, first.height, first.width}, std::move(values)), std::move(labels)};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  return order;
}

}  // namespace

std::string history_csv_header() {
  return "epoch,lr,train_loss,grad_norm,val_miou,val_mdice,train_miou,monitor,improved,ignored_batches";
}

std::string history_csv_row(const EpochRecord& r) {
  std::ostringstream os;
  os.precision(10);
  os << r.epoch << ',' << r.lr << ',' << r.train_loss << ',' << r.grad_norm << ',' << opt_str(r.val_miou) << ','
     << opt_str(r.val_mdice) << ',' << opt_str(r.train_miou) << ',' << r.monitor << ',' << (r.improved ? 1 : 0)
     << ',' << r.ignored_batches;
  return os.str();
}

template <typename T>
MetricReport evaluate(const Model<T>& model, const std::vector<TileSample>& data, int batch_size, int ignore_label) {
  if (data.empty()) throw DataError("cannot evaluate on an empty set");
  NoGradGuard guard;
  const int k = model.config().decoder.num_classes;
  SegmentationEvaluator ev(k, ignore_label);
  const auto order = identity_order(data.size());
  const auto bs = static_cast<std::size_t>(std::max(batch_size, 1));
  for (std::size_t lo = 0; lo < data.size(); lo += bs) {
    const std::size_t hi = std::min(data.size(), lo + bs);
    auto [x, y] = make_batch<T>(data, order, lo, hi);
    const auto logits = model.forward(x, false);
    const std::int64_t hw = logits.dim(2) * logits.dim(3);
    const auto pred = argmax_labels<T>(logits.data(), logits.dim(0), k, hw);
    for (std::size_t i = lo; i < hi; ++i) {
      const auto off = static_cast<std::size_t>(i - lo) * static_cast<std::size_t>(hw);
      ev.add_image(data[i].id, std::span<const int>(pred).subspan(off, static_cast<std::size_t>(hw)),
                   std::span<const int>(y).subspan(off, static_cast<std::size_t>(hw)));
    }
  }
  return ev.report();
}

template <typename T>
double evaluate_loss(const Model<T>& model, const std::vector<TileSample>& data, int batch_size, int ignore_label) {
  if (data.empty()) throw DataError("cannot evaluate on an empty set");
  NoGradGuard guard;
  const auto order = identity_order(data.size());
  const auto bs = static_cast<std::size_t>(std::max(batch_size, 1));
  double total = 0.0;
  for (std::size_t lo = 0; lo < data.size(); lo += bs) {
    const std::size_t hi = std::min(data.size(), lo + bs);
    auto [x, y] = make_batch<T>(data, order, lo, hi);
    total += static_cast<double>(ops::cross_entropy(model.forward(x, false), y, ignore_label).item()) *
             static_cast<double>(hi - lo);
  }
  return total / static_cast<double>(data.size());
}

template <typename T>
TrainState<T> train(Model<T>& model, const std::vector<TileSample>& train_set, const std::vector<TileSample>& val_set,
                    const TrainConfig& cfg, const TrainHooks<T>& hooks, std::optional<TrainState<T>> resume) {
  const auto errors = validate(cfg);
  if (!errors.empty()) throw ConfigError(errors.front());
  if (train_set.empty()) throw DataError("training set is empty");
  if (cfg.monitor != Monitor::train_miou && val_set.empty())
    throw ConfigError("monitor " + to_string(cfg.monitor) + " needs a non-empty validation set");

  auto params = model.store().trainable_parameters();
  if (params.empty()) throw TrainingError("model has no trainable parameters");
  typename ParameterStore<T>::TrainableLock lock(model.store());

  AdamW<T> opt(params, cfg.lr, cfg.weight_decay);
  EarlyStopping stopper(cfg.patience);
  TrainState<T> st;
  if (resume) {
    st = std::move(*resume);
    if (st.epochs_done > 0) {
      opt.load_state(st.optimizer, st.optimizer_steps);
      stopper.restore(st.epochs_done, st.best_epoch, st.best_value, st.bad_epochs);
    }
  }
  if (st.best_weights.empty()) st.best_weights = model.store().snapshot();

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = st.epochs_done; epoch < cfg.max_epochs && !st.stopped_early; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = step_lr(cfg.lr, cfg.gamma, cfg.step_size, epoch);
    opt.set_lr(rec.lr);

    const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
    double loss_sum = 0.0, norm_sum = 0.0;
    int batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += bs) {
      const std::size_t hi = std::min(order.size(), lo + bs);
      auto [x, y] = make_batch<T>(train_set, order, lo, hi);
      bool all_ignored = false;
      auto loss = ops::cross_entropy(model.forward(x, true), y, cfg.ignore_label, &all_ignored);
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << rec.epoch << ", batch " << batches + 1 << " (lr " << rec.lr << ")";
        if (hooks.on_abort) hooks.on_abort(msg.str());
        throw TrainingError(msg.str());
      }
      if (all_ignored) ++rec.ignored_batches;
      opt.zero_grad();
      if (!all_ignored) loss.backward();
      norm_sum += clip_grad_norm(params, cfg.clip_norm);
      opt.step();
      loss_sum += lv * static_cast<double>(hi - lo);
      ++batches;
    }
    opt.zero_grad();
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.grad_norm = norm_sum / batches;

    if (!val_set.empty()) {
      const auto rep = evaluate(model, val_set, cfg.batch_size, cfg.ignore_label);
      rec.val_miou = rep.miou;
      rec.val_mdice = rep.mdice;
    }
    if (cfg.monitor == Monitor::train_miou) rec.train_miou = evaluate(model, train_set, cfg.batch_size, cfg.ignore_label).miou;
    rec.monitor = cfg.monitor == Monitor::val_miou    ? *rec.val_miou
                  : cfg.monitor == Monitor::val_mdice ? *rec.val_mdice
                                                      : *rec.train_miou;

    const bool stop = stopper.update(rec.monitor);
    rec.improved = stopper.improved();
    if (rec.improved) st.best_weights = model.store().snapshot();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    st.epochs_done = epoch + 1;
    st.history.push_back(rec);
    st.best_epoch = stopper.best_epoch();
    st.best_value = stopper.best_value();
    st.bad_epochs = stopper.bad_epochs();
    st.stopped_early = stop;
    st.optimizer_steps = opt.steps();
    if (hooks.on_epoch) {
      st.optimizer = opt.state();
      hooks.on_epoch(rec, st);
    }
    if (hooks.stop_when && hooks.stop_when(rec)) break;
  }
  st.optimizer = opt.state();
  st.optimizer_steps = opt.steps();
  model.store().restore(st.best_weights);
  return st;
}

std::vector<TrainConfig> sample_trials(const TunerConfig& tuner, const TrainConfig& base) {
  const auto errors = validate(tuner);
  if (!errors.empty()) throw ConfigError(errors.front());
  std::mt19937_64 rng(tuner.seed);
  std::uniform_real_distribution<double> log_lr(std::log(tuner.lr_min), std::log(tuner.lr_max));
  std::uniform_real_distribution<double> log_wd(std::log(tuner.weight_decay_min), std::log(tuner.weight_decay_max));
  std::uniform_int_distribution<int> step(tuner.step_size_min, tuner.step_size_max);
  std::uniform_real_distribution<double> gamma(tuner.gamma_min, tuner.gamma_max);
  std::vector<TrainConfig> out;
  for (int i = 0; i < tuner.n_trials; ++i) {
    TrainConfig c = base;
    c.lr = std::exp(log_lr(rng));
    c.weight_decay = std::exp(log_wd(rng));
    c.step_size = step(rng);
    c.gamma = gamma(rng);
    c.max_epochs = tuner.trial_epochs;
    c.patience = tuner.trial_patience;
    out.push_back(c);
  }
  return out;
}

std::string trial_csv(const std::vector<TrialRecord>& trials) {
  std::ostringstream os;
  os.precision(10);
  os << "trial,lr,weight_decay,step_size,gamma,best_value,best_epoch,status\n";
  for (const auto& t : trials)
    os << t.index << ',' << t.config.lr << ',' << t.config.weight_decay << ',' << t.config.step_size << ','
       << t.config.gamma << ',' << opt_str(t.best_value) << ',' << t.best_epoch << ',' << t.status << '\n';
  return os.str();
}

template <typename T>
TuneResult tune(const ModelFactory<T>& factory, const std::vector<TileSample>& train_set,
                const std::vector<TileSample>& val_set, const TunerConfig& tuner, const TrainConfig& base) {
  TuneResult result;
  const auto configs = sample_trials(tuner, base);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    TrialRecord rec;
    rec.index = static_cast<int>(i);
    rec.config = configs[i];
    auto model = factory();
    try {
      const auto st = train(*model, train_set, val_set, configs[i]);
      rec.best_value = st.best_value;
      rec.best_epoch = st.best_epoch;
      rec.status = "ok";
    } catch (const TrainingError& e) {
      rec.status = "diverged";
    }
    if (rec.best_value && (result.best < 0 || *rec.best_value > *result.trials[static_cast<std::size_t>(result.best)].best_value))
      result.best = rec.index;
    result.trials.push_back(rec);
  }
  if (result.best < 0) throw TrainingError("every tuner trial diverged\n" + trial_csv(result.trials));
  result.best_config = result.trials[static_cast<std::size_t>(result.best)].config;
  return result;
}

#define CAFE_INSTANTIATE(T)                                                                                          \
  template class AdamW<T>;                                                                                           \
  template double clip_grad_norm<T>(const std::vector<Tensor<T>>&, double);                                          \
  template std::pair<Tensor<T>, std::vector<int>> make_batch<T>(const std::vector<TileSample>&,                     \
                                                                const std::vector<std::size_t>&, std::size_t,       \
                                                                std::size_t);                                        \
  template MetricReport evaluate<T>(const Model<T>&, const std::vector<TileSample>&, int, int);                     \
  template double evaluate_loss<T>(const Model<T>&, const std::vector<TileSample>&, int, int);                      \
  template TrainState<T> train<T>(Model<T>&, const std::vector<TileSample>&, const std::vector<TileSample>&,        \
                                  const TrainConfig&, const TrainHooks<T>&, std::optional<TrainState<T>>);          \
  template TuneResult tune<T>(const ModelFactory<T>&, const std::vector<TileSample>&, const std::vector<TileSample>&, \
                              const TunerConfig&, const TrainConfig&);

CAFE_INSTANTIATE(float)
CAFE_INSTANTIATE(double)

}  // namespace cafe
