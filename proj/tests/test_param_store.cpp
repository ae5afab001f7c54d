#include <filesystem>
#include <fstream>
#include <random>

#include "cafe/checkpoint.hpp"
#include "cafe/layers.hpp"
#include "doctest.h"

using namespace cafe;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cafe_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void build_small(ParameterStore<float>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamBuilder<float> pb(store, rng);
  Linear<float>::make(pb.frozen().scope("trunk.fc"), 3, 4);
  Linear<float>::make(pb.scope("head.fc"), 4, 2);
  BatchNorm2d<float>::make(pb.scope("head.bn"), 2);
}

}  // namespace

TEST_CASE("store flags drive requires_grad and counts") {
  ParameterStore<float> store;
  build_small(store, 1);
  CHECK(store.at("trunk.fc.weight").trainable == false);
  CHECK(store.at("trunk.fc.weight").value.requires_grad() == false);
  CHECK(store.at("head.fc.weight").value.requires_grad());
  CHECK(store.at("head.bn.running_mean").kind == EntryKind::buffer);
  CHECK(store.parameter_count() == 12 + 4 + 8 + 2 + 2 + 2);
  CHECK(store.parameter_count("head.", true) == 8 + 2 + 2 + 2);
  CHECK(store.trainable_parameters().size() == 4);
  CHECK_THROWS_AS(store.add_parameter("head.fc.weight", Tensorf::zeros({1}), true), ConfigError);
}

TEST_CASE("trainable flags are immutable while locked") {
  ParameterStore<float> store;
  build_small(store, 1);
  {
    ParameterStore<float>::TrainableLock lock(store);
    CHECK(store.locked());
    CHECK_THROWS_AS(store.set_trainable("trunk.fc.weight", true), std::logic_error);
  }
  CHECK_FALSE(store.locked());
  store.set_trainable("trunk.fc.weight", true);
  CHECK(store.at("trunk.fc.weight").value.requires_grad());
}

TEST_CASE("meta builders allocate nothing and consume no randomness") {
  ParameterStore<float> store;
  std::mt19937_64 rng(7);
  ParamBuilder<float> pb(store, rng, true);
  auto w = pb.param("w", {1280, 1280}, Init::normal(0.02));
  CHECK(w.is_meta());
  CHECK(w.data().empty());
  CHECK(store.parameter_count() == 1280 * 1280);
  std::mt19937_64 fresh(7);
  CHECK(rng() == fresh());
}

TEST_CASE("checkpoint round trip is bit exact and keeps flags") {
  ParameterStore<float> a;
  build_small(a, 3);
  a.at("head.bn.running_var").value.data()[1] = 0.123456789f;
  const auto path = temp_path("roundtrip.ckpt");
  std::vector<NamedArray<float>> extra{{"optim.m.0", {2}, {1.5f, -2.5f}}};
  save_checkpoint(path, a, {{"step", 17}}, extra);

  ParameterStore<float> b;
  build_small(b, 99);
  std::vector<NamedArray<float>> loaded_extra;
  auto info = load_checkpoint(path, b, LoadMode::strict, &loaded_extra);
  CHECK(info.manifest.at("step") == 17);
  CHECK(info.manifest.at("dtype") == "float32");
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    CHECK(ea.name == eb.name);
    CHECK(ea.trainable == eb.trainable);
    CHECK(std::equal(ea.value.data().begin(), ea.value.data().end(), eb.value.data().begin()));
  }
  REQUIRE(loaded_extra.size() == 1);
  CHECK(loaded_extra[0].values == std::vector<float>{1.5f, -2.5f});

  const auto manifest = read_checkpoint_manifest(path);
  bool saw_frozen = false;
  for (const auto& e : manifest.at("entries"))
    if (e.at("name") == "trunk.fc.weight") saw_frozen = !e.at("trainable").get<bool>();
  CHECK(saw_frozen);
}

TEST_CASE("checkpoint loading rejects mismatches") {
  ParameterStore<float> a;
  build_small(a, 3);
  const auto path = temp_path("mismatch.ckpt");
  save_checkpoint(path, a, nlohmann::json::object());

  ParameterStore<float> wrong_shape;
  std::mt19937_64 rng(1);
  ParamBuilder<float> pb(wrong_shape, rng);
  Linear<float>::make(pb.frozen().scope("trunk.fc"), 3, 5);
  CHECK_THROWS_AS(load_checkpoint(path, wrong_shape, LoadMode::matching), CheckpointError);

  ParameterStore<float> subset;
  ParamBuilder<float> pb2(subset, rng);
  Linear<float>::make(pb2.frozen().scope("trunk.fc"), 3, 4);
  CHECK_THROWS_AS(load_checkpoint(path, subset, LoadMode::strict), CheckpointError);
  auto info = load_checkpoint(path, subset, LoadMode::matching);
  CHECK(info.loaded.size() == 2);
  CHECK(std::equal(subset.at("trunk.fc.weight").value.data().begin(), subset.at("trunk.fc.weight").value.data().end(),
                   a.at("trunk.fc.weight").value.data().begin()));

  ParameterStore<double> dbl;
  CHECK_THROWS_AS(load_checkpoint(path, dbl, LoadMode::matching), CheckpointError);

  const auto garbage = temp_path("garbage.ckpt");
  {
    std::ofstream os(garbage);
    os << "not a checkpoint";
  }
  CHECK_THROWS_AS(read_checkpoint_manifest(garbage), CheckpointError);
}

TEST_CASE("snapshot and restore") {
  ParameterStore<float> s;
  build_small(s, 5);
  auto snap = s.snapshot();
  s.at("head.fc.weight").value.data()[0] += 1.0f;
  CHECK(s.snapshot() != snap);
  s.restore(snap);
  CHECK(s.snapshot() == snap);
}
