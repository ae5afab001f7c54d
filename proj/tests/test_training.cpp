#include <algorithm>
#include <cmath>
#include <random>

#include "cafe/ops.hpp"
#include "cafe/training.hpp"
#include "doctest.h"
#include "micro_config.hpp"

using namespace cafe;
using cafe::testing::micro_config;

namespace {

std::vector<TileSample> synthetic_set(int n, std::uint64_t seed, int size = 32) {
  std::vector<TileSample> out;
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec s;
    s.height = s.width = size;
    s.seed = seed * 1000 + static_cast<std::uint64_t>(i);
    s.signal = 2.0;
    out.push_back(generate_synthetic(s, "s" + std::to_string(i)));
  }
  return out;
}

TrainConfig quick_config(int epochs) {
  TrainConfig c;
  c.lr = 3e-3;
  c.batch_size = 4;
  c.max_epochs = epochs;
  c.patience = epochs;
  c.step_size = 2;
  return c;
}

}  // namespace

TEST_CASE("step decay arithmetic") {
  CHECK(step_lr(0.1, 0.5, 1, 3) == doctest::Approx(0.0125).epsilon(1e-15));
  CHECK(step_lr(0.1, 0.5, 1, 0) == 0.1);
  CHECK(step_lr(1.0, 0.1, 10, 9) == 1.0);
  CHECK(step_lr(1.0, 0.1, 10, 10) == doctest::Approx(0.1));
}

TEST_CASE("early stopping with patience 2 stops after the fourth epoch and keeps epoch 2") {
  EarlyStopping es(2);
  CHECK_FALSE(es.update(0.5));
  CHECK_FALSE(es.update(0.6));
  CHECK_FALSE(es.update(0.59));
  CHECK(es.update(0.58));
  CHECK(es.best_epoch() == 2);
  CHECK(es.best_value() == 0.6);
}

TEST_CASE("early stopping treats ties as no improvement") {
  EarlyStopping es(1);
  CHECK_FALSE(es.update(0.3));
  CHECK(es.update(0.3));
  CHECK(es.best_epoch() == 1);
}

TEST_CASE("AdamW matches a scalar recurrence") {
  auto p = Tensord::from({2}, {1.0, -2.0});
  p.set_requires_grad(true);
  AdamW<double> opt({p}, 0.01, 0.1);
  const double grads[3][2] = {{0.5, -1.0}, {0.25, 2.0}, {-0.5, 0.0}};
  double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
  for (int t = 1; t <= 3; ++t) {
    opt.zero_grad();
    auto& g = p.impl()->grad_buffer();
    g[0] = grads[t - 1][0];
    g[1] = grads[t - 1][1];
    opt.step();
    for (int j = 0; j < 2; ++j) {
      m[j] = 0.9 * m[j] + 0.1 * grads[t - 1][j];
      v[j] = 0.999 * v[j] + 0.001 * grads[t - 1][j] * grads[t - 1][j];
      const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
      ref[j] -= 0.01 * (0.1 * ref[j] + mh / (std::sqrt(vh) + 1e-8));
      CHECK(p.data()[j] == doctest::Approx(ref[j]).epsilon(1e-14));
    }
  }
  CHECK(opt.steps() == 3);
}

TEST_CASE("AdamW state round trip") {
  auto a = Tensord::from({3}, {1, 2, 3});
  AdamW<double> opt({a}, 0.1, 0.0);
  a.impl()->grad_buffer() = {1, -1, 0.5};
  opt.step();
  auto b = Tensord::from({3}, {1, 2, 3});
  AdamW<double> other({b}, 0.1, 0.0);
  other.load_state(opt.state(), opt.steps());
  a.impl()->grad_buffer() = {0.2, 0.2, 0.2};
  b.impl()->grad_buffer() = {0.2, 0.2, 0.2};
  std::copy(a.data().begin(), a.data().end(), b.data().begin());
  opt.step();
  other.step();
  for (int i = 0; i < 3; ++i) CHECK(a.data()[i] == b.data()[i]);
  CHECK_THROWS_AS(other.load_state({}, 1), TrainingError);
}

TEST_CASE("global norm clipping") {
  auto a = Tensord::from({2}, {0, 0});
  auto b = Tensord::from({1}, {0});
  a.impl()->grad_buffer() = {3, 0};
  b.impl()->grad_buffer() = {4};
  CHECK(clip_grad_norm<double>({a, b}, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm<double>({a, b}, 10.0) == doctest::Approx(1.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("cross-entropy examples") {
  bool all_ignored = false;
  auto zero = Tensord::zeros({1, 2, 2, 2});
  CHECK(ops::cross_entropy(zero, {0, 1, 1, 0}, -1, &all_ignored).item() == doctest::Approx(std::log(2.0)));
  CHECK_FALSE(all_ignored);

  auto confident = Tensord::from({1, 2, 1, 2}, {50, -50, -50, 50});
  CHECK(ops::cross_entropy(confident, {0, 1}, -1).item() < 1e-20);

  // Hand-built 2x2 case against a softmax-NLL oracle, one pixel ignored.
  const std::vector<double> l0{0.3, -1.2, 2.0, 0.0}, l1{-0.7, 0.4, 1.5, 3.0};
  const std::vector<int> y{1, 0, -1, 1};
  std::vector<double> flat(l0);
  flat.insert(flat.end(), l1.begin(), l1.end());
  auto logits = Tensord::from({1, 2, 2, 2}, flat);
  double want = 0;
  for (int i = 0; i < 4; ++i) {
    if (y[i] < 0) continue;
    const double lse = std::log(std::exp(l0[i]) + std::exp(l1[i]));
    want += lse - (y[i] == 0 ? l0[i] : l1[i]);
  }
  want /= 3;
  CHECK(ops::cross_entropy(logits, y, -1).item() == doctest::Approx(want).epsilon(1e-12));

  CHECK(ops::cross_entropy(logits, {-1, -1, -1, -1}, -1, &all_ignored).item() == 0.0);
  CHECK(all_ignored);
}

TEST_CASE("config validation") {
  CHECK(validate(TrainConfig{}).empty());
  TrainConfig c;
  c.gamma = 0;
  CHECK_FALSE(validate(c).empty());
  c = {};
  c.lr = -1;
  CHECK_FALSE(validate(c).empty());
  c = {};
  c.patience = 0;
  CHECK_FALSE(validate(c).empty());
  c = {};
  c.batch_size = 0;
  CHECK_FALSE(validate(c).empty());
  TunerConfig t;
  CHECK(validate(t).empty());
  t.lr_min = 1.0;
  CHECK_FALSE(validate(t).empty());
  t = {};
  t.n_trials = 0;
  CHECK_FALSE(validate(t).empty());
  CHECK(parse_monitor("val_mdice") == Monitor::val_mdice);
  CHECK_THROWS_AS(parse_monitor("loss"), ConfigError);
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(10, 42, 0);
  CHECK(a == epoch_order(10, 42, 0));
  CHECK(a != epoch_order(10, 42, 1));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
}

TEST_CASE("two optimizer steps update exactly the trainable set and never the trunk") {
  Model<float> model(micro_config(), 1);
  const auto before = model.store().snapshot();
  const auto data = synthetic_set(8, 1);
  train(model, data, data, quick_config(1));
  const auto after = model.store().snapshot();
  const auto& entries = model.store().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CAPTURE(entries[i].name);
    if (entries[i].kind != EntryKind::parameter) continue;
    const bool changed = before[i] != after[i];
    CHECK(changed == entries[i].trainable);
  }
}

TEST_CASE("trainable flags are locked while training runs") {
  Model<float> model(micro_config(), 2);
  const auto data = synthetic_set(2, 2);
  TrainHooks<float> hooks;
  bool threw = false;
  hooks.on_epoch = [&](const EpochRecord&, const TrainState<float>&) {
    try {
      model.store().set_trainable("decoder.classifier.weight", false);
    } catch (const std::logic_error&) {
      threw = true;
    }
  };
  train(model, data, data, quick_config(1), hooks);
  CHECK(threw);
  CHECK_FALSE(model.store().locked());
}

TEST_CASE("training returns the best-monitor weights, not the last") {
  Model<float> model(micro_config(), 3);
  const auto train_set = synthetic_set(8, 3), val_set = synthetic_set(4, 4);
  auto cfg = quick_config(6);
  cfg.lr = 2e-2;
  const auto st = train(model, train_set, val_set, cfg);
  REQUIRE(st.history.size() == 6);
  double best = -1;
  int best_epoch = 0;
  for (const auto& r : st.history)
    if (*r.val_miou > best) best = *r.val_miou, best_epoch = r.epoch;
  CHECK(st.best_epoch == best_epoch);
  CHECK(evaluate(model, val_set, 4).miou == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("fixed seed reproduces the loss curve exactly") {
  const auto data = synthetic_set(6, 5);
  std::vector<std::string> rows[2];
  for (auto& r : rows) {
    Model<float> model(micro_config(), 42);
    for (const auto& e : train(model, data, data, quick_config(2)).history) r.push_back(history_csv_row(e));
  }
  CHECK(rows[0] == rows[1]);
}

TEST_CASE("resuming from an epoch snapshot continues the same run") {
  const auto data = synthetic_set(6, 6);
  auto cfg = quick_config(4);
  Model<float> full(micro_config(), 9);
  std::optional<TrainState<float>> mid;
  ParameterStore<float>::Snapshot mid_weights;
  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochRecord& r, const TrainState<float>& st) {
    if (r.epoch == 2) {
      mid = st;
      mid_weights = full.store().snapshot();
    }
  };
  const auto whole = train(full, data, data, cfg, hooks);
  REQUIRE(mid);

  Model<float> resumed(micro_config(), 9);
  resumed.store().restore(mid_weights);
  const auto rest = train(resumed, data, data, cfg, {}, mid);
  REQUIRE(rest.history.size() == whole.history.size());
  for (std::size_t i = 0; i < whole.history.size(); ++i)
    CHECK(history_csv_row(rest.history[i]) == history_csv_row(whole.history[i]));
  CHECK(resumed.store().snapshot() == full.store().snapshot());
}

TEST_CASE("a non-finite loss aborts with a diagnostic") {
  Model<float> model(micro_config(), 10);
  auto data = synthetic_set(2, 7);
  data[0].image[5] = std::numeric_limits<float>::quiet_NaN();
  std::string reason;
  TrainHooks<float> hooks;
  hooks.on_abort = [&](const std::string& r) { reason = r; };
  CHECK_THROWS_AS(train(model, data, data, quick_config(1), hooks), TrainingError);
  CHECK(reason.find("epoch 1") != std::string::npos);
}

TEST_CASE("training preconditions") {
  Model<float> model(micro_config(), 11);
  const auto data = synthetic_set(2, 8);
  CHECK_THROWS_AS(train(model, {}, data, quick_config(1)), DataError);
  CHECK_THROWS_AS(train(model, data, {}, quick_config(1)), ConfigError);
  auto cfg = quick_config(1);
  cfg.monitor = Monitor::train_miou;
  CHECK(train(model, data, {}, cfg).history.at(0).train_miou.has_value());

  Model<float> frozen(micro_config(), 11);
  for (const auto& e : frozen.store().entries())
    if (e.trainable) frozen.store().set_trainable(e.name, false);
  CHECK_THROWS_AS(train(frozen, data, data, quick_config(1)), TrainingError);
}

TEST_CASE("tuner sampling is seeded and stays in bounds") {
  TunerConfig t;
  const auto a = sample_trials(t, {}), b = sample_trials(t, {});
  REQUIRE(a.size() == 20);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].lr == b[i].lr);
    CHECK(a[i].gamma == b[i].gamma);
    CHECK(a[i].lr >= t.lr_min);
    CHECK(a[i].lr <= t.lr_max);
    CHECK(a[i].weight_decay >= t.weight_decay_min);
    CHECK(a[i].weight_decay <= t.weight_decay_max);
    CHECK(a[i].step_size >= t.step_size_min);
    CHECK(a[i].step_size <= t.step_size_max);
    CHECK(a[i].gamma >= t.gamma_min);
    CHECK(a[i].gamma <= t.gamma_max);
    CHECK(a[i].max_epochs == 60);
    CHECK(a[i].patience == 10);
  }
  t.seed = 1;
  CHECK(sample_trials(t, {})[0].lr != a[0].lr);
}

TEST_CASE("tuner keeps the best trial") {
  const auto train_set = synthetic_set(4, 9), val_set = synthetic_set(4, 10);
  ModelFactory<float> factory = [] { return std::make_unique<Model<float>>(micro_config(), 12); };
  TunerConfig t;
  t.n_trials = 1;
  t.trial_epochs = 1;
  auto base = quick_config(1);
  auto one = tune(factory, train_set, val_set, t, base);
  CHECK(one.best == 0);
  CHECK(one.best_config.lr == sample_trials(t, base)[0].lr);

  t.n_trials = 3;
  t.trial_epochs = 2;
  auto three = tune(factory, train_set, val_set, t, base);
  std::vector<double> values;
  for (const auto& r : three.trials) values.push_back(*r.best_value);
  std::sort(values.begin(), values.end());
  CHECK(*three.trials[static_cast<std::size_t>(three.best)].best_value >= values[1]);
  CHECK(trial_csv(three.trials).find("trial,lr") == 0);
}

TEST_CASE("evaluation reports per-image scores") {
  Model<float> model(micro_config(), 13);
  const auto data = synthetic_set(3, 11);
  const auto rep = evaluate(model, data, 2);
  CHECK(rep.per_image_miou.size() == 3);
  CHECK(rep.per_image_miou[1].id == "s1");
  CHECK(rep.pixels == 3 * 32 * 32);
  CHECK(std::isfinite(evaluate_loss(model, data, 2)));
}
