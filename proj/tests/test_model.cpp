#include <chrono>
#include <cmath>
#include <random>

#include "cafe/model.hpp"
#include "doctest.h"
#include "micro_config.hpp"
#include "gradcheck.hpp"

using namespace cafe;
using cafe::testing::micro_config;
using cafe::testing::grad_check;
using cafe::testing::Projector;
using cafe::testing::random_tensor;
using cafe::testing::random_tensorf;

namespace {

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

void randomize(Tensord& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = n(rng);
}

}  // namespace

TEST_CASE("pyramid pooling") {
  std::mt19937_64 rng(1);
  ParameterStore<double> store;
  DecoderConfig cfg;
  cfg.channels = 4;
  cfg.ppm_scales = {1, 2, 3};
  PyramidPooling<double> ppm(3, cfg, ParamBuilder<double>(store, rng));
  auto y = ppm(Tensord::full({1, 3, 6, 6}, 0.4), false);
  CHECK(y.shape() == Shape{1, 4, 6, 6});
  for (std::int64_t c = 0; c < 4; ++c)
    for (std::int64_t i = 0; i < 36; ++i) CHECK(y.data()[c * 36 + i] == doctest::Approx(y.data()[c * 36]).epsilon(1e-14));
  CHECK_THROWS_AS(ppm(Tensord::zeros({1, 3, 2, 2}), false), ShapeError);

  auto x = random_tensor({1, 3, 5, 5}, rng);
  auto pooled = ops::resize_bilinear(ops::adaptive_avg_pool(x, 1), 5, 5);
  for (std::int64_t c = 0; c < 3; ++c) {
    double mean = 0;
    for (std::int64_t i = 0; i < 25; ++i) mean += x.data()[c * 25 + i];
    mean /= 25;
    for (std::int64_t i = 0; i < 25; ++i) CHECK(pooled.data()[c * 25 + i] == doctest::Approx(mean).epsilon(1e-14));
  }

  ParameterStore<float> meta_store;
  DecoderConfig paper;
  paper.channels = 256;
  paper.ppm_scales = {1, 2, 3, 6};
  PyramidPooling<float> big(1280, paper, ParamBuilder<float>(meta_store, rng, true));
  CHECK(big(Tensorf::meta({1, 1280, 14, 14}), false).shape() == Shape{1, 256, 14, 14});

  DecoderConfig bad;
  bad.ppm_scales = {2, 1};
  CHECK_FALSE(validate(bad).empty());
}

TEST_CASE("decoder output shapes and zero classifier") {
  std::mt19937_64 rng(2);
  ParameterStore<float> store;
  DecoderConfig cfg;
  UperNetDecoder<float> dec({8, 16, 32, 64}, cfg, ParamBuilder<float>(store, rng));
  FeaturePyramid<float> p{random_tensorf({2, 8, 32, 32}, rng), random_tensorf({2, 16, 16, 16}, rng),
                          random_tensorf({2, 32, 8, 8}, rng), random_tensorf({2, 64, 4, 4}, rng)};
  CHECK(dec(p, 64, 64, true).shape() == Shape{2, 2, 64, 64});
  auto& w = store.at("classifier.weight").value;
  auto& b = store.at("classifier.bias").value;
  std::fill(w.data().begin(), w.data().end(), 0.0f);
  std::fill(b.data().begin(), b.data().end(), 0.0f);
  auto logits = dec(p, 64, 64, false);
  CHECK(std::all_of(logits.data().begin(), logits.data().end(), [](float v) { return v == 0.0f; }));
  CHECK_THROWS_AS(dec({p[0], p[1], p[2]}, 64, 64, false), ShapeError);
}

TEST_CASE("paper-scale shape pipeline") {
  Model<float> model(paper_scale_config(), 42, true);
  auto f = model.features(Tensorf::meta({1, 13, 224, 224}), false);
  CHECK(f.ap[0].shape() == Shape{1, 160, 112, 112});
  CHECK(f.ap[1].shape() == Shape{1, 320, 56, 56});
  CHECK(f.ap[2].shape() == Shape{1, 640, 28, 28});
  CHECK(f.ap[3].shape() == Shape{1, 1280, 14, 14});
  for (std::size_t i = 0; i < 4; ++i) CHECK(f.fused[i].shape() == f.ap[i].shape());
  CHECK(model.forward(Tensorf::meta({1, 13, 224, 224}), false).shape() == Shape{1, 2, 224, 224});
  CHECK(model.forward(Tensorf::meta({1, 13, 320, 320}), false).shape() == Shape{1, 2, 320, 320});
  CHECK_THROWS_AS(model.forward(Tensorf::meta({1, 13, 200, 224}), false), ShapeError);
  CHECK_THROWS_AS(model.forward(Tensorf::meta({1, 12, 224, 224}), false), ShapeError);

  auto inv = model.inventory();
  CHECK(inv.adapter_per_block == 83232);
  for (const auto& row : inv.rows) {
    if (row.component == "backbone.adapters") CHECK(row.parameters == 32 * 83232);
    CHECK(row.trainable == (row.component != "backbone.trunk"));
  }
}

TEST_CASE("toy model builds and runs quickly") {
  const auto start = std::chrono::steady_clock::now();
  Model<float> model(toy_config(), 42);
  std::mt19937_64 rng(3);
  auto logits = model.forward(random_tensorf({1, 13, 64, 64}, rng), false);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(logits.shape() == Shape{1, 2, 64, 64});
  CHECK(seconds < 1.0);
}

TEST_CASE("config validation catches inconsistent dimensions") {
  auto cfg = toy_config();
  cfg.backbone.embed_dim = 36;
  cfg.backbone.num_heads = 3;
  CHECK_FALSE(validate(cfg).empty());
  CHECK_THROWS_AS(Model<float>(cfg, 1, true), ConfigError);
  cfg = toy_config();
  cfg.channels.transformer_indices = {0, 1, 2};
  CHECK_FALSE(validate(cfg).empty());
  cfg = toy_config();
  cfg.fusion.beta = 1.5;
  CHECK_FALSE(validate(cfg).empty());
}

TEST_CASE("ablation flags remove parameters from the inventory") {
  auto base = toy_config();
  Model<float> full(base, 1, true);
  const auto full_total = full.store().parameter_count();
  for (int flag = 0; flag < 5; ++flag) {
    auto cfg = base;
    bool* flags[] = {&cfg.ablation.adapters, &cfg.ablation.residual, &cfg.ablation.cam, &cfg.ablation.m2faf,
                     &cfg.ablation.cnn};
    *flags[flag] = false;
    Model<float> m(cfg, 1, true);
    CHECK(m.store().parameter_count() < full_total);
    for (const auto& e : m.store().entries()) CHECK(full.store().contains(e.name));
  }
  auto cfg = base;
  cfg.ablation.adapters = false;
  Model<float> no_adapters(cfg, 1, true);
  CHECK(no_adapters.inventory().adapter_per_block == 0);
}

TEST_CASE("ablations share the weights of the modules they keep") {
  auto cfg = toy_config();
  Model<float> full(cfg, 9);
  cfg.ablation.cam = false;
  cfg.ablation.adapters = false;
  Model<float> reduced(cfg, 9);
  for (const auto& e : reduced.store().entries()) {
    if (e.name.rfind("cnn.", 0) == 0) continue;
    const auto& other = full.store().at(e.name).value;
    CHECK(std::equal(e.value.data().begin(), e.value.data().end(), other.data().begin()));
  }
}

TEST_CASE("at beta 1 with fresh fusion masks the CNN input does not matter") {
  auto cfg = toy_config();
  cfg.fusion.beta = 1.0;
  Model<float> model(cfg, 4);
  std::mt19937_64 rng(5);
  auto x = random_tensorf({1, 13, 64, 64}, rng);
  auto y = x.detach();
  for (int c : cfg.channels.cnn_indices())
    for (std::int64_t i = 0; i < 64 * 64; ++i) y.data()[static_cast<std::size_t>(c * 64 * 64 + i)] += 3.0f;
  CHECK(max_abs_diff(model.forward(x, false), model.forward(y, false)) == 0.0);

  model.set_beta(0.5);
  CHECK(max_abs_diff(model.forward(x, false), model.forward(y, false)) > 0.0);
}

TEST_CASE("mean fusion fallback") {
  auto cfg = micro_config();
  cfg.ablation.m2faf = false;
  Model<double> model(cfg, 6);
  std::mt19937_64 rng(6);
  auto f = model.features(random_tensor({1, 13, 32, 32}, rng), false);
  CHECK(f.attention.empty());
  CHECK_FALSE(model.store().contains("fusion.levels.0.mask.weight"));
}

TEST_CASE("batched forward equals per-sample forwards in inference mode") {
  Model<float> model(toy_config(), 7);
  std::mt19937_64 rng(7);
  auto x = random_tensorf({3, 13, 64, 64}, rng);
  auto batched = model.forward(x, false);
  const std::int64_t out = 2 * 64 * 64;
  for (std::int64_t b = 0; b < 3; ++b) {
    auto one = model.forward(ops::slice(x, 0, b, b + 1), false);
    for (std::int64_t i = 0; i < out; ++i) CHECK(std::abs(one.data()[i] - batched.data()[b * out + i]) < 1e-5);
  }
}

TEST_CASE("end-to-end gradient of a probe adapter weight") {
  Model<double> model(micro_config(), 8);
  std::mt19937_64 rng(8);
  auto w1 = model.store().at("backbone.adapters.1.down.weight").value;
  auto w2 = model.store().at("backbone.adapters.1.up.weight").value;
  randomize(w2, rng, 0.3);
  auto x = random_tensor({2, 13, 32, 32}, rng);
  std::vector<int> labels(2 * 32 * 32);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = (i % 7 == 0) ? -1 : static_cast<int>((i / 5) % 2);
  auto loss = [&] { return ops::cross_entropy(model.forward(x, true), labels, -1); };
  auto r = grad_check(loss, {w1, w2}, 1e-5);
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("forward is deterministic") {
  Model<float> a(toy_config(), 11), b(toy_config(), 11);
  std::mt19937_64 rng(11);
  auto x = random_tensorf({2, 13, 64, 64}, rng);
  CHECK(max_abs_diff(a.forward(x, false), b.forward(x, false)) == 0.0);
  CHECK(max_abs_diff(a.forward(x, false), a.forward(x, false)) == 0.0);
}
