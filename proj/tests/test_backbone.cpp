#include <cmath>
#include <random>

#include "cafe/adapted_vit.hpp"
#include "cafe/channel_router.hpp"
#include "cafe/fpn_neck.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cafe;
using cafe::testing::grad_check;
using cafe::testing::Projector;
using cafe::testing::random_tensor;

namespace {

/// Image whose channel c is filled with the value c.
Tensord channel_index_image(int channels, int h, int w) {
  std::vector<double> v(static_cast<std::size_t>(channels) * h * w);
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < h * w; ++i) v[static_cast<std::size_t>(c) * h * w + i] = c;
  return Tensord::from({1, channels, h, w}, std::move(v));
}

std::vector<int> channel_labels(const Tensord& x) {
  std::vector<int> out;
  const auto hw = x.dim(2) * x.dim(3);
  for (std::int64_t c = 0; c < x.dim(1); ++c) out.push_back(static_cast<int>(x.data()[c * hw]));
  return out;
}

double scalar_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
double scalar_relu(double x) { return x > 0 ? x : 0.0; }

double max_abs_diff(const Tensord& a, const Tensord& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("default channel split gathers the documented indices") {
  ChannelSplitConfig cfg;
  CHECK(validate(cfg).empty());
  CHECK(cfg.cnn_indices() == std::vector<int>{0, 4, 5, 6, 8, 9, 10});
  auto [ap, cnn] = split(channel_index_image(13, 4, 4), cfg);
  CHECK(channel_labels(ap) == std::vector<int>{1, 2, 3, 7, 11, 12});
  CHECK(channel_labels(cnn) == std::vector<int>{0, 4, 5, 6, 8, 9, 10});
}

TEST_CASE("channel split errors") {
  ChannelSplitConfig eight{8, {0, 1, 2, 3, 4, 5}};
  auto [ap, cnn] = split(channel_index_image(8, 2, 2), eight);
  CHECK(channel_labels(cnn) == std::vector<int>{6, 7});

  ChannelSplitConfig all{6, {0, 1, 2, 3, 4, 5}};
  CHECK_FALSE(validate(all).empty());
  CHECK_THROWS_AS(split(channel_index_image(6, 2, 2), all), ConfigError);

  ChannelSplitConfig dup{13, {1, 1, 2}};
  auto e = validate(dup);
  CHECK(std::any_of(e.begin(), e.end(), [](const std::string& s) { return s.find("duplicate") != std::string::npos; }));
  ChannelSplitConfig oob{13, {13}};
  e = validate(oob);
  CHECK(std::any_of(e.begin(), e.end(), [](const std::string& s) { return s.find("out of range") != std::string::npos; }));
  CHECK_FALSE(validate(ChannelSplitConfig{}, 5).empty());
  CHECK(validate(ChannelSplitConfig{}, 6).empty());
  CHECK_THROWS_AS(split(channel_index_image(12, 2, 2), ChannelSplitConfig{}), ConfigError);
}

TEST_CASE("channel split is a partition on random configs") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = std::uniform_int_distribution<int>(2, 16)(rng);
    std::vector<int> idx(static_cast<std::size_t>(c));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(std::uniform_int_distribution<int>(1, c - 1)(rng)));
    ChannelSplitConfig cfg{c, idx};
    REQUIRE(validate(cfg).empty());
    auto x = random_tensor({2, c, 3, 5}, rng);
    auto [ap, cnn] = split(x, cfg);
    auto [ap2, cnn2] = split(x, cfg);
    CHECK(max_abs_diff(ap, ap2) == 0.0);
    std::vector<double> rebuilt(x.data().size(), std::nan(""));
    const std::int64_t hw = 15;
    auto scatter = [&](const Tensord& part, const std::vector<int>& where) {
      for (std::int64_t b = 0; b < 2; ++b)
        for (std::size_t k = 0; k < where.size(); ++k)
          for (std::int64_t p = 0; p < hw; ++p)
            rebuilt[static_cast<std::size_t>((b * c + where[k]) * hw + p)] =
                part.data()[static_cast<std::size_t>((b * static_cast<std::int64_t>(where.size()) +
                                                      static_cast<std::int64_t>(k)) * hw + p)];
    };
    scatter(ap, cfg.transformer_indices);
    scatter(cnn, cfg.cnn_indices());
    CHECK(std::equal(rebuilt.begin(), rebuilt.end(), x.data().begin()));
  }
}

TEST_CASE("adapter parameter count") {
  CHECK(adapter_parameter_count(1280, 32) == 83232);
  ParameterStore<float> store;
  std::mt19937_64 rng(1);
  AdapterWeights<float>::make(ParamBuilder<float>(store, rng, true).scope("a"), 1280, 32, Activation::gelu);
  CHECK(store.parameter_count() == 83232);
}

TEST_CASE("adapter forward matches a scalar oracle") {
  for (auto act : {Activation::gelu, Activation::relu}) {
    ParameterStore<double> store;
    std::mt19937_64 rng(5);
    auto a = AdapterWeights<double>::make(ParamBuilder<double>(store, rng).scope("a"), 8, 2, act);
    std::normal_distribution<double> n;
    for (auto* t : {&a.down.w, &a.down.b, &a.up.w, &a.up.b})
      for (auto& v : t->data()) v = n(rng);
    const auto f = act == Activation::gelu ? scalar_gelu : scalar_relu;
    for (int hot = 0; hot < 8; ++hot) {
      std::vector<double> x(8, 0.0);
      x[static_cast<std::size_t>(hot)] = 1.0;
      auto y = adapter_forward(Tensord::from({1, 8}, x), a);
      double h[2];
      for (int j = 0; j < 2; ++j) h[j] = f(a.down.w.data()[static_cast<std::size_t>(hot * 2 + j)] + a.down.b.data()[j]);
      for (int k = 0; k < 8; ++k) {
        double z = a.up.b.data()[k];
        for (int j = 0; j < 2; ++j) z += h[j] * a.up.w.data()[static_cast<std::size_t>(j * 8 + k)];
        CHECK(y.data()[k] == doctest::Approx(f(z)).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("zero-initialized adapter is an exact no-op") {
  ParameterStore<double> store;
  std::mt19937_64 rng(2);
  ParamBuilder<double> pb(store, rng);
  auto a = AdapterWeights<double>::make(pb.scope("a"), 16, 4, Activation::gelu);
  auto blk = VitBlock<double>::make(pb.frozen().scope("blk"), 16, 2, 4);
  auto x = random_tensor({2, 5, 16}, rng);
  auto y = adapter_forward(x, a);
  CHECK(std::all_of(y.data().begin(), y.data().end(), [](double v) { return v == 0.0; }));
  CHECK(max_abs_diff(adapted_block_forward(x, blk, &a), blk(x)) == 0.0);
  CHECK_THROWS_AS(adapter_forward(random_tensor({2, 15}, rng), a), ShapeError);
}

TEST_CASE("adapter perturbation grows with the output layer scale") {
  ParameterStore<double> store;
  std::mt19937_64 rng(3);
  auto a = AdapterWeights<double>::make(ParamBuilder<double>(store, rng).scope("a"), 8, 2, Activation::relu);
  auto direction = random_tensor({2, 8}, rng);
  auto x = random_tensor({4, 8}, rng);
  double previous = -1.0;
  for (int step = 0; step <= 10; ++step) {
    const double t = step / 10.0;
    for (std::size_t i = 0; i < 16; ++i) a.up.w.data()[i] = t * direction.data()[i];
    auto y = adapter_forward(x, a);
    double norm = 0;
    for (double v : y.data()) norm += v * v;
    CHECK(norm >= previous);
    if (step == 0) CHECK(norm == 0.0);
    previous = norm;
  }
  CHECK(previous > 0.0);
}

TEST_CASE("adapter gradients match finite differences") {
  ParameterStore<double> store;
  std::mt19937_64 rng(4);
  auto a = AdapterWeights<double>::make(ParamBuilder<double>(store, rng).scope("a"), 8, 3, Activation::gelu);
  for (auto& v : a.up.w.data()) v = std::normal_distribution<double>(0, 0.5)(rng);
  for (auto& v : a.up.b.data()) v = std::normal_distribution<double>(0, 0.5)(rng);
  auto x = random_tensor({3, 8}, rng);
  Projector proj;
  auto r = grad_check([&] { return proj(adapter_forward(x, a)); }, {a.down.w, a.down.b, a.up.w, a.up.b, x});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("trunk weights receive no gradient, adapters do") {
  ParameterStore<double> store;
  std::mt19937_64 rng(6);
  ParamBuilder<double> pb(store, rng);
  BackboneConfig cfg;
  cfg.embed_dim = 16;
  cfg.depth = 2;
  cfg.num_heads = 2;
  cfg.patch_size = 4;
  cfg.in_channels = 3;
  cfg.adapter_bottleneck = 4;
  CHECK_FALSE(validate(cfg).empty());
  cfg.depth = 4;
  CHECK(validate(cfg).empty());
  AdaptedViT<double> vit(cfg, pb.scope("trunk"), pb.scope("adapters"));
  auto x = random_tensor({1, 3, 8, 8}, rng);
  auto taps = vit.forward_features(x);
  ops::sum(ops::mul(taps[3], random_tensor(taps[3].shape(), rng))).backward();
  for (const auto& e : store.entries()) {
    if (e.name.rfind("trunk.", 0) == 0) {
      CHECK_FALSE(e.trainable);
      CHECK_FALSE(e.value.has_grad());
    }
  }
  const auto& g = store.at("adapters.3.up.weight").value.grad();
  CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
}

TEST_CASE("tap defaults follow the quarter-depth rule") {
  CHECK(default_taps(32) == std::vector<int>{7, 15, 23, 31});
  CHECK(default_taps(8) == std::vector<int>{1, 3, 5, 7});
  CHECK(default_taps(24) == std::vector<int>{5, 11, 17, 23});
  CHECK(default_taps(6) == std::vector<int>{1, 2, 4, 5});
}

TEST_CASE("token grid layout") {
  auto t = Tensord::from({1, 4, 1}, {10, 11, 12, 13});
  auto img = token_to_image(t, 2, 2);
  CHECK(img.shape() == Shape{1, 1, 2, 2});
  CHECK(std::vector<double>(img.data().begin(), img.data().end()) == std::vector<double>{10, 11, 12, 13});
  std::mt19937_64 rng(8);
  auto tokens = random_tensor({2, 6, 5}, rng);
  auto back = image_to_tokens(token_to_image(tokens, 2, 3));
  CHECK(max_abs_diff(back, tokens) == 0.0);
  auto image = random_tensor({1, 5, 3, 4}, rng);
  CHECK(max_abs_diff(token_to_image(image_to_tokens(image), 3, 4), image) == 0.0);
  CHECK_THROWS_AS(token_to_image(tokens, 2, 2), ShapeError);
  CHECK(token_to_image(Tensord::meta({1, 196, 8}), 14, 14).shape() == Shape{1, 8, 14, 14});
}

TEST_CASE("backbone tap shapes and class token removal") {
  for (bool cls : {false, true}) {
    ParameterStore<float> store;
    std::mt19937_64 rng(9);
    ParamBuilder<float> pb(store, rng, true);
    BackboneConfig cfg;
    cfg.use_class_token = cls;
    AdaptedViT<float> vit(cfg, pb.scope("trunk"), pb.scope("adapters"));
    auto taps = vit.forward_features(Tensorf::meta({2, 6, 224, 224}));
    REQUIRE(taps.size() == 4);
    for (const auto& t : taps) CHECK(t.shape() == Shape{2, 196, 64});
    CHECK(vit.grid(224, 224) == std::pair<int, int>{14, 14});
    CHECK_THROWS_AS(vit.forward_features(Tensorf::meta({1, 6, 200, 224})), ShapeError);
  }
}

TEST_CASE("adapted backbone equals the plain trunk at initialization") {
  ParameterStore<double> store;
  std::mt19937_64 rng(10);
  ParamBuilder<double> pb(store, rng);
  BackboneConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_heads = 4;
  cfg.depth = 4;
  cfg.patch_size = 4;
  cfg.adapter_bottleneck = 8;
  cfg.use_class_token = true;
  AdaptedViT<double> vit(cfg, pb.scope("trunk"), pb.scope("adapters"));
  auto x = random_tensor({2, 6, 8, 8}, rng);
  auto a = vit.forward_features(x, true);
  auto b = vit.forward_features(x, false);
  for (std::size_t i = 0; i < 4; ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);
}

TEST_CASE("position table") {
  auto p = sincos_position_table<double>(8, 2, 3);
  CHECK(p.shape() == Shape{1, 6, 8});
  // token (1, 2): first quarter encodes the row, third quarter the column
  CHECK(p.data()[5 * 8 + 0] == doctest::Approx(std::sin(1.0)));
  CHECK(p.data()[5 * 8 + 4] == doctest::Approx(std::sin(2.0)));
  CHECK(p.data()[5 * 8 + 7] == doctest::Approx(std::cos(2.0 / 100.0)));
  CHECK_THROWS_AS(sincos_position_table<double>(6, 2, 2), ConfigError);
}

TEST_CASE("neck schedule") {
  std::mt19937_64 rng(12);
  {
    ParameterStore<float> store;
    FpnNeck<float> neck(1280, {}, ParamBuilder<float>(store, rng, true));
    std::vector<Tensorf> taps(4, Tensorf::meta({1, 1280, 14, 14}));
    auto p = neck(taps, false);
    CHECK(p[0].shape() == Shape{1, 160, 112, 112});
    CHECK(p[1].shape() == Shape{1, 320, 56, 56});
    CHECK(p[2].shape() == Shape{1, 640, 28, 28});
    CHECK(p[3].shape() == Shape{1, 1280, 14, 14});
  }
  ParameterStore<double> store;
  FpnNeck<double> neck(64, {}, ParamBuilder<double>(store, rng));
  std::vector<Tensord> taps;
  for (int i = 0; i < 4; ++i) taps.push_back(random_tensor({2, 64, 8, 8}, rng));
  auto p = neck(taps, true);
  CHECK(p[0].shape() == Shape{2, 8, 64, 64});
  CHECK(p[1].shape() == Shape{2, 16, 32, 32});
  CHECK(p[2].shape() == Shape{2, 32, 16, 16});
  CHECK(p[3].shape() == Shape{2, 64, 8, 8});
  CHECK(neck.channels() == std::array<int, 4>{8, 16, 32, 64});

  taps[2] = random_tensor({2, 64, 4, 4}, rng);
  CHECK_THROWS_AS(neck(taps, false), ShapeError);
  CHECK_THROWS_AS(FpnNeck<double>(36, {}, ParamBuilder<double>(store, rng)), ConfigError);
}

TEST_CASE("identity level-4 conv keeps a constant tap constant") {
  ParameterStore<double> store;
  std::mt19937_64 rng(13);
  FpnNeck<double> neck(8, {}, ParamBuilder<double>(store, rng));
  auto& w = store.at("fpn4.weight").value;
  std::fill(w.data().begin(), w.data().end(), 0.0);
  for (int c = 0; c < 8; ++c) w.data()[static_cast<std::size_t>(c * 8 + c)] = 1.0;
  std::fill(store.at("fpn4.bias").value.data().begin(), store.at("fpn4.bias").value.data().end(), 0.0);
  std::vector<Tensord> taps(4, Tensord::full({1, 8, 3, 3}, 2.5));
  auto p = neck(taps, false);
  CHECK(std::all_of(p[3].data().begin(), p[3].data().end(), [](double v) { return v == 2.5; }));
}
