#include <fstream>
#include <sstream>
#include <unistd.h>

#include "cafe/cli.hpp"
#include "cafe/experiment.hpp"
#include "cafe/plot.hpp"
#include "doctest.h"

using namespace cafe;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cafe_experiment_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Micro model on 32x32 synthetic scenes, a few seconds per run.
json micro_json(int epochs = 2) {
  return json{
      {"seed", 42},
      {"dataset", {{"synthetic", {{"height", 32}, {"width", 32}, {"seed", 5}, {"train", 8}, {"val", 4}, {"test", 4}, {"signal", 2.0}}}}},
      {"model",
       {{"preset", "toy"},
        {"backbone", {{"embed_dim", 16}, {"depth", 4}, {"num_heads", 2}, {"patch_size", 8}, {"adapter_bottleneck", 4}}},
        {"cnn", {{"stage_widths", {4, 4, 8, 8}}, {"cam_reduction", 2}, {"cam_kernel", 3}}},
        {"decoder", {{"channels", 4}, {"ppm_scales", {1, 2}}}}}},
      {"training", {{"lr", 3e-3}, {"batch_size", 4}, {"max_epochs", epochs}, {"patience", epochs}, {"step_size", 2}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("config serialization round trips") {
  auto j = micro_json();
  j["training"]["monitor"] = "train_miou";
  j["dataset"]["resize"] = {32, 32};
  j["dataset"]["extra_eval"] = {"bolivia"};
  j["model"]["fusion"] = {{"beta", 0.6}, {"mask", "per_channel"}};
  j["model"]["ablation"] = {{"cam", false}};
  j["tuner"] = {{"lr", {1e-4, 1e-2}}, {"n_trials", 3}};
  const auto c = parse_experiment(j);
  CHECK(c.training.monitor == Monitor::train_miou);
  CHECK(c.model.fusion.beta == 0.6);
  CHECK_FALSE(c.model.ablation.cam);
  CHECK(c.tuner.lr_max == 1e-2);
  CHECK(c.model.backbone.in_channels == static_cast<int>(c.model.channels.transformer_indices.size()));
  const auto once = to_json(c);
  CHECK(to_json(parse_experiment(once)) == once);
}

TEST_CASE("paper preset resolves to the large model") {
  const auto c = parse_experiment(json{{"model", {{"preset", "paper"}}}});
  CHECK(c.model.backbone.embed_dim == 1280);
  CHECK(c.model.backbone.adapter_bottleneck == 32);
  CHECK(c.model.cnn.in_channels == 13 - static_cast<int>(c.model.channels.transformer_indices.size()));
}

TEST_CASE("config errors name the key path") {
  auto j = micro_json();
  j["training"]["lrr"] = 0.1;
  try {
    parse_experiment(j);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("training.lrr") != std::string::npos);
  }
  auto k = micro_json();
  k["model"]["backbone"]["depth"] = "eight";
  CHECK_THROWS_AS(parse_experiment(k), ConfigError);
  auto m = micro_json();
  m["model"]["preset"] = "huge";
  CHECK_THROWS_AS(parse_experiment(m), ConfigError);
  auto s = micro_json();
  s["dataset"]["source"] = "ftp";
  CHECK_THROWS_AS(parse_experiment(s), ConfigError);
}

TEST_CASE("cli exit codes for configuration problems") {
  const auto dir = scratch("exit_codes");
  auto j = micro_json();
  j["training"]["unknown_knob"] = 1;
  auto r = cli({"train", write_config(dir, j).string(), "-o", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("training.unknown_knob") != std::string::npos);

  auto missing = micro_json();
  missing["dataset"] = {{"source", "manifest"}, {"path", "/no/such/dataset/manifest.json"}};
  r = cli({"train", write_config(dir, missing).string(), "-o", (dir / "run").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("/no/such/dataset/manifest.json") != std::string::npos);
  CHECK(read_json(dir / "run" / "run.json").at("status") == "config_error");

  CHECK(cli({"no-such-command"}).code == 2);
  CHECK(cli({"ablate", write_config(dir, micro_json()).string(), "rows", "-o", (dir / "a").string()}).code == 2);
  auto bad_model = micro_json();
  bad_model["model"]["backbone"]["num_heads"] = 3;
  CHECK(cli({"train", write_config(dir, bad_model).string(), "-o", (dir / "b").string()}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("train writes the run directory and is reproducible") {
  const auto dir = scratch("train");
  const auto cfg = write_config(dir, micro_json(2));
  REQUIRE(cli({"train", cfg.string(), "-o", (dir / "a").string()}).code == 0);
  REQUIRE(cli({"train", cfg.string(), "-o", (dir / "b").string()}).code == 0);
  for (const char* f : {"config.json", "history.csv", "best.ckpt", "last.ckpt", "report.json", "per_image.csv", "loss.svg", "run.json"})
    CHECK_MESSAGE(fs::exists(dir / "a" / f), f);
  const auto report = read_json(dir / "a" / "report.json");
  for (const char* key : {"miou", "mdice", "iou_per_class", "dice_per_class", "per_image_miou", "validation", "best_epoch"})
    CHECK_MESSAGE(report.contains(key), key);
  CHECK(report.at("per_image_miou").size() == 4);
  CHECK(slurp(dir / "a" / "history.csv") == slurp(dir / "b" / "history.csv"));
  CHECK(slurp(dir / "a" / "per_image.csv") == slurp(dir / "b" / "per_image.csv"));
  const auto run = read_json(dir / "a" / "run.json");
  CHECK(run.at("status") == "success");
  CHECK(run.at("config_sha256") == read_json(dir / "b" / "run.json").at("config_sha256"));
}

TEST_CASE("resumed training matches an uninterrupted run") {
  const auto dir = scratch("resume");
  const auto cfg = write_config(dir, micro_json(4));
  REQUIRE(cli({"train", cfg.string(), "-o", (dir / "full").string()}).code == 0);
  REQUIRE(cli({"train", cfg.string(), "--epochs", "2", "-o", (dir / "part").string()}).code == 0);
  REQUIRE(cli({"train", cfg.string(), "--resume", "-o", (dir / "part").string()}).code == 0);
  CHECK(slurp(dir / "full" / "history.csv") == slurp(dir / "part" / "history.csv"));
  CHECK(read_json(dir / "full" / "report.json").at("miou") == read_json(dir / "part" / "report.json").at("miou"));
  CHECK(cli({"train", cfg.string(), "--resume", "-o", (dir / "empty").string()}).code == 2);
}

TEST_CASE("seed override changes the run") {
  const auto dir = scratch("seed");
  const auto cfg = write_config(dir, micro_json(1));
  REQUIRE(cli({"train", cfg.string(), "-o", (dir / "a").string()}).code == 0);
  REQUIRE(cli({"train", cfg.string(), "--seed", "7", "-o", (dir / "b").string()}).code == 0);
  CHECK(slurp(dir / "a" / "history.csv") != slurp(dir / "b" / "history.csv"));
  CHECK(read_json(dir / "b" / "run.json").at("seed") == 7);
}

TEST_CASE("evaluate scores a checkpoint on a named split") {
  const auto dir = scratch("evaluate");
  const auto cfg = write_config(dir, micro_json(1));
  REQUIRE(cli({"train", cfg.string(), "-o", (dir / "t").string()}).code == 0);
  const auto ckpt = (dir / "t" / "best.ckpt").string();
  REQUIRE(cli({"evaluate", cfg.string(), "--checkpoint", ckpt, "--split", "test", "-o", (dir / "e").string()}).code == 0);
  CHECK(read_json(dir / "e" / "report.json").at("miou") == read_json(dir / "t" / "report.json").at("miou"));
  CHECK(cli({"evaluate", cfg.string(), "--checkpoint", ckpt, "--split", "nowhere", "-o", (dir / "x").string()}).code == 2);
  CHECK(cli({"evaluate", cfg.string(), "--checkpoint", (dir / "none.ckpt").string(), "-o", (dir / "y").string()}).code == 2);
}

TEST_CASE("k-fold runs, resumes per fold and aggregates") {
  const auto dir = scratch("kfold");
  auto j = micro_json(1);
  j["dataset"]["synthetic"]["train"] = 20;
  j["dataset"]["synthetic"]["val"] = 0;
  j["dataset"]["synthetic"]["test"] = 0;
  const auto cfg = write_config(dir, j);
  const auto out = (dir / "run").string();
  REQUIRE(cli({"kfold", cfg.string(), "--fold", "0", "-o", out}).code == 0);
  CHECK_FALSE(read_json(dir / "run" / "aggregate.json").at("complete").get<bool>());
  REQUIRE(cli({"kfold", cfg.string(), "--fold", "1", "--fold", "2", "--fold", "3", "-o", out}).code == 0);
  const auto agg = read_json(dir / "run" / "aggregate.json");
  CHECK(agg.at("complete").get<bool>());
  CHECK(agg.at("test_sets_disjoint").get<bool>());
  REQUIRE(agg.at("folds").size() == 4);
  std::vector<double> m;
  for (int f = 0; f < 4; ++f) {
    CHECK(fs::exists(dir / "run" / ("fold_" + std::to_string(f)) / "report.json"));
    const auto split = read_json(dir / "run" / ("fold_" + std::to_string(f)) / "split.json");
    CHECK(split.at("train").size() == 14);
    CHECK(split.at("val").size() == 2);
    CHECK(split.at("test").size() == 4);
    m.push_back(agg.at("folds")[static_cast<std::size_t>(f)].at("miou").get<double>());
  }
  const double mean = (m[0] + m[1] + m[2] + m[3]) / 4;
  double ss = 0;
  for (double v : m) ss += (v - mean) * (v - mean);
  CHECK(agg.at("miou").at("mean").get<double>() == doctest::Approx(mean).epsilon(1e-12));
  CHECK(agg.at("miou").at("std").get<double>() == doctest::Approx(std::sqrt(ss / 3)).epsilon(1e-12));
  CHECK(agg.at("per_image_miou").at("count") == 16);
  CHECK(fs::exists(dir / "run" / "per_image_box.svg"));
}

TEST_CASE("single-beta sweep writes one row") {
  const auto dir = scratch("sweep");
  const auto cfg = write_config(dir, micro_json(1));
  REQUIRE(cli({"beta-sweep", cfg.string(), "--betas", "0.3", "-o", (dir / "s").string()}).code == 0);
  std::istringstream csv(slurp(dir / "s" / "beta_sweep.csv"));
  std::string header, row, extra;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == "beta,val_miou,test_miou");
  CHECK(row.rfind("0.3,", 0) == 0);
  CHECK_FALSE(std::getline(csv, extra));
  CHECK(cli({"beta-sweep", cfg.string(), "--betas", "1.5", "-o", (dir / "bad").string()}).code == 2);
}

TEST_CASE("width ablation writes one row per width set") {
  const auto dir = scratch("widths");
  auto j = micro_json(1);
  j["ablate"] = {{"cnn_widths", {{4, 4, 8, 8}, {4, 8, 8, 16}}}};
  const auto cfg = write_config(dir, j);
  REQUIRE(cli({"ablate", cfg.string(), "cnn_widths", "-o", (dir / "w").string()}).code == 0);
  std::istringstream csv(slurp(dir / "w" / "ablation_cnn_widths.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("synthetic data on disk trains through the manifest path") {
  const auto dir = scratch("manifest");
  const auto gen_cfg = write_config(dir, micro_json(1));
  REQUIRE(cli({"synth-data", gen_cfg.string(), "-o", (dir / "data").string()}).code == 0);
  auto j = micro_json(1);
  j["dataset"] = {{"source", "manifest"}, {"path", (dir / "data" / "manifest.json").string()}};
  const auto sub = dir / "m";
  fs::create_directories(sub);
  REQUIRE(cli({"train", write_config(sub, j).string(), "-o", (dir / "from_disk").string()}).code == 0);
  REQUIRE(cli({"train", gen_cfg.string(), "-o", (dir / "in_memory").string()}).code == 0);
  CHECK(read_json(dir / "from_disk" / "report.json").at("miou").get<double>() ==
        doctest::Approx(read_json(dir / "in_memory" / "report.json").at("miou").get<double>()).epsilon(1e-6));
}

TEST_CASE("inventory reports adapter parameters per block") {
  auto r = cli({"inventory", "--preset", "paper"});
  CHECK(r.code == 0);
  CHECK(r.out.find("adapter parameters per block: 83232") != std::string::npos);
  r = cli({"inventory", "--preset", "paper", "--json"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("adapter_parameters_per_block") == 83232);
  CHECK(j.at("rows").size() == 6);
  CHECK(cli({"inventory", "--preset", "giant"}).code == 2);
}

TEST_CASE("embedding export is deterministic") {
  const auto dir = scratch("embed");
  const auto cfg = write_config(dir, micro_json(1));
  for (const char* run : {"a", "b"})
    REQUIRE(cli({"export-embeddings", cfg.string(), "--level", "1", "--stage", "post_fusion", "-o", (dir / run).string()}).code == 0);
  CHECK(slurp(dir / "a" / "post_fusion_L1.bin") == slurp(dir / "b" / "post_fusion_L1.bin"));
  CHECK(slurp(dir / "a" / "post_fusion_L1.png") == slurp(dir / "b" / "post_fusion_L1.png"));
  const auto meta = read_json(dir / "a" / "post_fusion_L1.json");
  CHECK(meta.at("channels") == 2);
  CHECK(meta.at("height") == 32);
  int w = 0, h = 0;
  plot::read_png(dir / "a" / "post_fusion_L1.png", w, h);
  CHECK(w == 32);
  CHECK(h == 32);
  CHECK(cli({"export-embeddings", cfg.string(), "--level", "5", "-o", (dir / "c").string()}).code == 2);
  CHECK(cli({"export-embeddings", cfg.string(), "--stage", "middle", "-o", (dir / "c").string()}).code == 2);
}

TEST_CASE("pca rendering") {
  SUBCASE("constant features render mid-gray") {
    const std::vector<float> f(4 * 3 * 5, 2.5f);
    const auto rgb = plot::pca_rgb(f, 4, 3, 5);
    REQUIRE(rgb.size() == 3u * 15);
    for (auto v : rgb) CHECK(v == 128);
  }
  SUBCASE("a single varying direction maps monotonically onto red") {
    const int C = 3, H = 1, W = 6;
    std::vector<float> f(C * H * W);
    for (int i = 0; i < W; ++i) {
      f[0 * W + i] = static_cast<float>(i);
      f[1 * W + i] = static_cast<float>(2 * i);
      f[2 * W + i] = 1.0f;
    }
    const auto rgb = plot::pca_rgb(f, C, H, W);
    CHECK(rgb[0] == 0);
    CHECK(rgb[3 * (W - 1)] == 255);
    for (int i = 1; i < W; ++i) CHECK(rgb[3 * i] > rgb[3 * (i - 1)]);
  }
}

TEST_CASE("png round trip") {
  const auto dir = scratch("png");
  std::vector<std::uint8_t> rgb(3 * 4 * 2);
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<std::uint8_t>(i * 10);
  plot::write_png(dir / "x.png", 4, 2, rgb);
  int w = 0, h = 0;
  CHECK(plot::read_png(dir / "x.png", w, h) == rgb);
  CHECK(w == 4);
  CHECK(h == 2);
}

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("default run directory lives under the output root") {
  const auto dir = scratch("root");
  ::setenv("CAFE_OUTPUT_ROOT", (dir / "runs").c_str(), 1);
  CHECK(output_root() == dir / "runs");
  const auto cfg = dir / "tiny.json";
  std::ofstream(cfg) << micro_json(1).dump();
  REQUIRE(cli({"train", cfg.string()}).code == 0);
  CHECK(fs::exists(dir / "runs" / "tiny" / "train" / "report.json"));
  ::unsetenv("CAFE_OUTPUT_ROOT");
}
