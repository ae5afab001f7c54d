#include "cafe/experiment.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "cafe/plot.hpp"

#ifndef CAFE_VERSION
#define CAFE_VERSION "0.0.0"
#endif

namespace cafe {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config parsing

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  const json* find(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() || it->is_null() ? nullptr : &*it;
  }

  std::optional<Reader> sub(const std::string& key) {
    if (const json* v = find(key)) return Reader(*v, at(key));
    return std::nullopt;
  }

  void get(const std::string& key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + ": expected an integer");
      out = v->get<int>();
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
        throw ConfigError(at(key) + ": expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(at(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(at(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(at(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <typename E>
  void get(const std::string& key, std::vector<E>& out) {
    if (const json* v = find(key)) out = list<E>(*v, at(key));
  }
  void get(const std::string& key, std::optional<int>& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(at(key) + ": expected an integer or null");
      out = v->get<int>();
    } else {
      out.reset();
    }
  }
  /// [min, max] pair.
  template <typename E>
  void range(const std::string& key, E& lo, E& hi) {
    if (const json* v = find(key)) {
      auto r = list<E>(*v, at(key));
      if (r.size() != 2) throw ConfigError(at(key) + ": expected [min, max]");
      lo = r[0];
      hi = r[1];
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown config key " + at(k));
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  template <typename E>
  static std::vector<E> list(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected a list");
    std::vector<E> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto& e = v[i];
      const auto p = path + "[" + std::to_string(i) + "]";
      if constexpr (std::is_same_v<E, int>) {
        if (!e.is_number_integer()) throw ConfigError(p + ": expected an integer");
        out.push_back(e.get<int>());
      } else if constexpr (std::is_same_v<E, double>) {
        if (!e.is_number()) throw ConfigError(p + ": expected a number");
        out.push_back(e.get<double>());
      } else if constexpr (std::is_same_v<E, std::string>) {
        if (!e.is_string()) throw ConfigError(p + ": expected a string");
        out.push_back(e.get<std::string>());
      } else {
        out.push_back(list<typename E::value_type>(e, p));
      }
    }
    return out;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename F>
void with(Reader& r, const std::string& key, F&& f) {
  if (auto s = r.sub(key)) {
    f(*s);
    s->finish();
  }
}

template <typename Enum, typename Parse>
void get_enum(Reader& r, const std::string& key, Enum& out, Parse parse) {
  std::string s;
  r.get(key, s);
  if (s.empty()) return;
  try {
    out = parse(s);
  } catch (const ConfigError& e) {
    throw ConfigError(r.at(key) + ": " + e.what());
  }
}

void read_model(Reader& r, ExperimentConfig& c) {
  r.get("preset", c.model_preset);
  if (c.model_preset == "toy") c.model = toy_config();
  else if (c.model_preset == "paper") c.model = paper_scale_config();
  else throw ConfigError(r.at("preset") + ": expected \"toy\" or \"paper\"");
  auto& m = c.model;
  with(r, "channels", [&](Reader& s) {
    s.get("total_channels", m.channels.total_channels);
    s.get("transformer_indices", m.channels.transformer_indices);
  });
  with(r, "backbone", [&](Reader& s) {
    s.get("embed_dim", m.backbone.embed_dim);
    s.get("depth", m.backbone.depth);
    s.get("num_heads", m.backbone.num_heads);
    s.get("patch_size", m.backbone.patch_size);
    s.get("mlp_ratio", m.backbone.mlp_ratio);
    s.get("tap_layers", m.backbone.tap_layers);
    s.get("adapter_bottleneck", m.backbone.adapter_bottleneck);
    s.get("use_class_token", m.backbone.use_class_token);
    get_enum(s, "adapter_activation", m.backbone.adapter_activation, parse_activation);
  });
  with(r, "neck", [&](Reader& s) {
    s.get("norm", m.neck.norm);
    s.get("activation", m.neck.activation);
  });
  with(r, "cnn", [&](Reader& s) {
    s.get("stage_widths", m.cnn.stage_widths);
    s.get("cam_reduction", m.cnn.cam_reduction);
    s.get("cam_kernel", m.cnn.cam_kernel);
  });
  with(r, "fusion", [&](Reader& s) {
    s.get("beta", m.fusion.beta);
    get_enum(s, "mask", m.fusion.mask, parse_mask_arity);
  });
  with(r, "decoder", [&](Reader& s) {
    s.get("channels", m.decoder.channels);
    s.get("ppm_scales", m.decoder.ppm_scales);
    s.get("num_classes", m.decoder.num_classes);
  });
  with(r, "ablation", [&](Reader& s) {
    s.get("adapters", m.ablation.adapters);
    s.get("residual", m.ablation.residual);
    s.get("cam", m.ablation.cam);
    s.get("m2faf", m.ablation.m2faf);
    s.get("cnn", m.ablation.cnn);
  });
  m.backbone.in_channels = static_cast<int>(m.channels.transformer_indices.size());
  m = m.resolved();
}

void read_dataset(Reader& r, DatasetSection& d) {
  r.get("source", d.source);
  static const std::set<std::string> sources{"synthetic", "manifest", "sen1floods11", "floodplanet"};
  if (!sources.count(d.source))
    throw ConfigError(r.at("source") + ": expected synthetic, manifest, sen1floods11 or floodplanet");
  r.get("path", d.path);
  with(r, "synthetic", [&](Reader& s) {
    auto& sc = d.synthetic.scene;
    s.get("height", sc.height);
    s.get("width", sc.width);
    s.get("channels", sc.channels);
    s.get("seed", sc.seed);
    s.get("blob_min", sc.blob_min);
    s.get("blob_max", sc.blob_max);
    s.get("noise", sc.noise);
    s.get("signal", sc.signal);
    s.get("nodata_probability", sc.nodata_probability);
    get_enum(s, "signal_placement", d.signal_placement, parse_signal_placement);
    s.get("train", d.synthetic.train);
    s.get("val", d.synthetic.val);
    s.get("test", d.synthetic.test);
  });
  if (const json* v = r.find("resize")) {
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number_integer() || !(*v)[1].is_number_integer())
      throw ConfigError(r.at("resize") + ": expected [height, width] or null");
    d.resize = std::pair{(*v)[0].get<int>(), (*v)[1].get<int>()};
  } else {
    d.resize.reset();
  }
  r.get("normalize", d.normalize);
  r.get("train_split", d.train_split);
  r.get("val_split", d.val_split);
  r.get("test_split", d.test_split);
  r.get("extra_eval", d.extra_eval);
  with(r, "kfold", [&](Reader& s) {
    s.get("k", d.kfold.k);
    s.get("train", d.kfold.train);
    s.get("val", d.kfold.val);
    s.get("test", d.kfold.test);
    s.get("seed", d.kfold.seed);
  });
  r.get("fold", d.fold);
}

json epoch_to_json(const EpochRecord& e) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"epoch", e.epoch},          {"lr", e.lr},
          {"train_loss", e.train_loss}, {"grad_norm", e.grad_norm},
          {"val_miou", opt(e.val_miou)}, {"val_mdice", opt(e.val_mdice)},
          {"train_miou", opt(e.train_miou)}, {"monitor", e.monitor},
          {"improved", e.improved},     {"ignored_batches", e.ignored_batches},
          {"seconds", e.seconds}};
}

EpochRecord epoch_from_json(const json& j) {
  auto opt = [&](const char* k) { return j.at(k).is_null() ? std::nullopt : std::optional<double>(j.at(k).get<double>()); };
  EpochRecord e;
  e.epoch = j.at("epoch").get<int>();
  e.lr = j.at("lr").get<double>();
  e.train_loss = j.at("train_loss").get<double>();
  e.grad_norm = j.at("grad_norm").get<double>();
  e.val_miou = opt("val_miou");
  e.val_mdice = opt("val_mdice");
  e.train_miou = opt("train_miou");
  e.monitor = j.at("monitor").get<double>();
  e.improved = j.at("improved").get<bool>();
  e.ignored_batches = j.at("ignored_batches").get<int>();
  e.seconds = j.at("seconds").get<double>();
  return e;
}

}  // namespace

bool ExperimentConfig::wants(const std::string& format) const {
  return std::find(formats.begin(), formats.end(), format) != formats.end();
}

ExperimentConfig parse_experiment(const json& j) {
  ExperimentConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  r.get("output", c.output);
  r.get("formats", c.formats);
  for (const auto& f : c.formats)
    if (f != "json" && f != "csv" && f != "svg") throw ConfigError("formats: unknown format '" + f + "'");
  with(r, "dataset", [&](Reader& s) { read_dataset(s, c.dataset); });
  if (auto s = r.sub("model")) {
    read_model(*s, c);
    s->finish();
  }
  with(r, "training", [&](Reader& s) {
    s.get("lr", c.training.lr);
    s.get("weight_decay", c.training.weight_decay);
    s.get("step_size", c.training.step_size);
    s.get("gamma", c.training.gamma);
    s.get("batch_size", c.training.batch_size);
    s.get("max_epochs", c.training.max_epochs);
    s.get("patience", c.training.patience);
    get_enum(s, "monitor", c.training.monitor, parse_monitor);
    s.get("clip_norm", c.training.clip_norm);
  });
  with(r, "tuner", [&](Reader& s) {
    s.get("n_trials", c.tuner.n_trials);
    s.get("trial_epochs", c.tuner.trial_epochs);
    s.get("trial_patience", c.tuner.trial_patience);
    s.range("lr", c.tuner.lr_min, c.tuner.lr_max);
    s.range("weight_decay", c.tuner.weight_decay_min, c.tuner.weight_decay_max);
    s.range("step_size", c.tuner.step_size_min, c.tuner.step_size_max);
    s.range("gamma", c.tuner.gamma_min, c.tuner.gamma_max);
  });
  with(r, "sweep", [&](Reader& s) {
    s.get("betas", c.sweep.betas);
    s.get("epochs", c.sweep.epochs);
  });
  with(r, "ablate", [&](Reader& s) {
    s.get("epochs", c.ablate.epochs);
    s.get("cnn_widths", c.ablate.cnn_widths);
  });
  r.finish();
  c.training.seed = c.seed;
  c.tuner.seed = c.seed;
  c.training.ignore_label = -1;
  return c;
}

json to_json(const ExperimentConfig& c) {
  const auto& m = c.model;
  const auto& d = c.dataset;
  const auto& sc = d.synthetic.scene;
  auto opt_int = [](const std::optional<int>& v) { return v ? json(*v) : json(nullptr); };
  json backbone{{"embed_dim", m.backbone.embed_dim},
                {"depth", m.backbone.depth},
                {"num_heads", m.backbone.num_heads},
                {"patch_size", m.backbone.patch_size},
                {"mlp_ratio", m.backbone.mlp_ratio},
                {"tap_layers", m.backbone.taps()},
                {"adapter_bottleneck", m.backbone.adapter_bottleneck},
                {"use_class_token", m.backbone.use_class_token},
                {"adapter_activation", to_string(m.backbone.adapter_activation)}};
  return {
      {"seed", c.seed},
      {"output", c.output},
      {"formats", c.formats},
      {"dataset",
       {{"source", d.source},
        {"path", d.path},
        {"synthetic",
         {{"height", sc.height},
          {"width", sc.width},
          {"channels", sc.channels},
          {"seed", sc.seed},
          {"blob_min", sc.blob_min},
          {"blob_max", sc.blob_max},
          {"noise", sc.noise},
          {"signal", sc.signal},
          {"nodata_probability", sc.nodata_probability},
          {"signal_placement", to_string(d.signal_placement)},
          {"train", d.synthetic.train},
          {"val", d.synthetic.val},
          {"test", d.synthetic.test}}},
        {"resize", d.resize ? json::array({d.resize->first, d.resize->second}) : json(nullptr)},
        {"normalize", d.normalize},
        {"train_split", d.train_split},
        {"val_split", d.val_split},
        {"test_split", d.test_split},
        {"extra_eval", d.extra_eval},
        {"kfold",
         {{"k", d.kfold.k}, {"train", d.kfold.train}, {"val", d.kfold.val}, {"test", d.kfold.test}, {"seed", d.kfold.seed}}},
        {"fold", opt_int(d.fold)}}},
      {"model",
       {{"preset", c.model_preset},
        {"channels", {{"total_channels", m.channels.total_channels}, {"transformer_indices", m.channels.transformer_indices}}},
        {"backbone", backbone},
        {"neck", {{"norm", m.neck.norm}, {"activation", m.neck.activation}}},
        {"cnn", {{"stage_widths", m.cnn.stage_widths}, {"cam_reduction", m.cnn.cam_reduction}, {"cam_kernel", m.cnn.cam_kernel}}},
        {"fusion", {{"beta", m.fusion.beta}, {"mask", to_string(m.fusion.mask)}}},
        {"decoder", {{"channels", m.decoder.channels}, {"ppm_scales", m.decoder.ppm_scales}, {"num_classes", m.decoder.num_classes}}},
        {"ablation",
         {{"adapters", m.ablation.adapters},
          {"residual", m.ablation.residual},
          {"cam", m.ablation.cam},
          {"m2faf", m.ablation.m2faf},
          {"cnn", m.ablation.cnn}}}}},
      {"training",
       {{"lr", c.training.lr},
        {"weight_decay", c.training.weight_decay},
        {"step_size", c.training.step_size},
        {"gamma", c.training.gamma},
        {"batch_size", c.training.batch_size},
        {"max_epochs", c.training.max_epochs},
        {"patience", c.training.patience},
        {"monitor", to_string(c.training.monitor)},
        {"clip_norm", c.training.clip_norm}}},
      {"tuner",
       {{"n_trials", c.tuner.n_trials},
        {"trial_epochs", c.tuner.trial_epochs},
        {"trial_patience", c.tuner.trial_patience},
        {"lr", {c.tuner.lr_min, c.tuner.lr_max}},
        {"weight_decay", {c.tuner.weight_decay_min, c.tuner.weight_decay_max}},
        {"step_size", {c.tuner.step_size_min, c.tuner.step_size_max}},
        {"gamma", {c.tuner.gamma_min, c.tuner.gamma_max}}}},
      {"sweep", {{"betas", c.sweep.betas}, {"epochs", opt_int(c.sweep.epochs)}}},
      {"ablate", {{"epochs", opt_int(c.ablate.epochs)}, {"cnn_widths", c.ablate.cnn_widths}}}};
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  auto c = parse_experiment(j);
  // Relative dataset paths are taken relative to the config file.
  if (!c.dataset.path.empty() && fs::path(c.dataset.path).is_relative() && path.has_parent_path())
    c.dataset.path = (path.parent_path() / c.dataset.path).lexically_normal().string();
  return c;
}

std::vector<std::string> validate(const ExperimentConfig& c) {
  auto errors = validate(c.model);
  auto take = [&](const std::vector<std::string>& more) { errors.insert(errors.end(), more.begin(), more.end()); };
  take(validate(c.training));
  take(validate(c.tuner));
  if (c.dataset.source == "synthetic") {
    auto scene = c.dataset.synthetic.scene;
    scene.signal_channels = {0};
    take(validate(scene));
    if (c.dataset.synthetic.scene.channels != c.model.channels.total_channels)
      errors.push_back("dataset.synthetic.channels must equal model.channels.total_channels");
    if (c.dataset.synthetic.train < 1) errors.push_back("dataset.synthetic.train must be at least 1");
  } else if (c.dataset.path.empty()) {
    errors.push_back("dataset.path is required for source " + c.dataset.source);
  }
  if (c.dataset.resize && (c.dataset.resize->first < 1 || c.dataset.resize->second < 1))
    errors.push_back("dataset.resize must be positive");
  if (c.dataset.fold && (*c.dataset.fold < 0 || *c.dataset.fold >= c.dataset.kfold.k))
    errors.push_back("dataset.fold must lie in [0, k)");
  for (double b : c.sweep.betas)
    if (!(b >= 0 && b <= 1)) errors.push_back("sweep.betas entries must lie in [0, 1]");
  if (c.sweep.epochs && *c.sweep.epochs < 1) errors.push_back("sweep.epochs must be at least 1");
  if (c.ablate.epochs && *c.ablate.epochs < 1) errors.push_back("ablate.epochs must be at least 1");
  return errors;
}

namespace {

void require_valid(const ExperimentConfig& c) {
  const auto errors = validate(c);
  if (errors.empty()) return;
  std::ostringstream os;
  os << "invalid experiment config:";
  for (const auto& e : errors) os << "\n  " << e;
  throw ConfigError(os.str());
}

}  // namespace

// ---------------------------------------------------------------------------
// Data

Dataset load_dataset(const DatasetSection& d, const ChannelSplitConfig& channels) {
  Dataset out;
  if (d.source == "synthetic") {
    auto spec = d.synthetic;
    spec.scene.signal_channels = signal_channels(d.signal_placement, channels);
    auto gen = generate_synthetic_dataset(spec);
    out.samples = std::move(gen.samples);
    out.split = std::move(gen.split);
  } else {
    if (!fs::exists(d.path)) throw ConfigError("dataset path does not exist: " + d.path);
    DatasetManifest m = d.source == "manifest"       ? DatasetManifest::load(d.path)
                        : d.source == "sen1floods11" ? scan_sen1floods11(d.path)
                                                     : scan_floodplanet(d.path);
    const auto problems = m.validate(true);
    if (!problems.empty()) throw DataError("dataset manifest is inconsistent: " + problems.front());
    m.stats = {};
    for (const auto& s : m.samples) {
      out.samples.push_back(load_tile(m, s, d.resize));
      auto it = m.splits.find(s.id);
      out.split.push_back(it == m.splits.end() ? "" : it->second);
    }
    return out;
  }
  if (d.resize) {
    for (auto& s : out.samples)
      if (s.height != d.resize->first || s.width != d.resize->second) {
        Tensorf t = Tensorf::from({1, s.channels, s.height, s.width}, s.image);
        NoGradGuard guard;
        auto r = ops::resize_bilinear(t, d.resize->first, d.resize->second);
        std::vector<int> mask(static_cast<std::size_t>(d.resize->first) * d.resize->second);
        for (int i = 0; i < d.resize->first; ++i)
          for (int j = 0; j < d.resize->second; ++j) {
            const int si = std::min(s.height - 1, static_cast<int>((i + 0.5) * s.height / d.resize->first));
            const int sj = std::min(s.width - 1, static_cast<int>((j + 0.5) * s.width / d.resize->second));
            mask[static_cast<std::size_t>(i) * d.resize->second + j] = s.mask[static_cast<std::size_t>(si) * s.width + sj];
          }
        s.image.assign(r.data().begin(), r.data().end());
        s.mask = std::move(mask);
        s.height = d.resize->first;
        s.width = d.resize->second;
      }
  }
  return out;
}

Partition make_partition(const Dataset& data, const DatasetSection& d, const std::optional<FoldSplit>& fold) {
  Partition p;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.samples.size(); ++i) index[data.samples[i].id] = i;
  auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<TileSample> out;
    for (const auto& id : ids) out.push_back(data.samples.at(index.at(id)));
    return out;
  };
  auto by_split = [&](const std::string& name) {
    std::vector<TileSample> out;
    for (std::size_t i = 0; i < data.samples.size(); ++i)
      if (data.split[i] == name) out.push_back(data.samples[i]);
    return out;
  };
  std::optional<FoldSplit> f = fold;
  if (!f && d.fold) {
    std::vector<std::string> ids;
    for (const auto& s : data.samples) ids.push_back(s.id);
    f = kfold_split(ids, d.kfold).at(static_cast<std::size_t>(*d.fold));
  }
  if (f) {
    p.train = pick(f->train);
    p.val = pick(f->val);
    p.test = pick(f->test);
  } else {
    p.train = by_split(d.train_split);
    p.val = by_split(d.val_split);
    p.test = by_split(d.test_split);
    for (const auto& name : d.extra_eval) {
      auto part = by_split(name);
      if (part.empty()) throw DataError("extra evaluation split '" + name + "' is empty");
      p.extra.emplace_back(name, std::move(part));
    }
  }
  if (p.train.empty()) throw DataError("training split is empty");
  if (d.normalize) {
    p.stats = compute_stats(p.train);
    for (auto* part : {&p.train, &p.val, &p.test})
      for (auto& s : *part) normalize(s, p.stats);
    for (auto& [name, part] : p.extra)
      for (auto& s : part) normalize(s, p.stats);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Run bookkeeping

RunDir::RunDir(fs::path p) : path(std::move(p)) { fs::create_directories(path); }

fs::path output_root() {
  const char* env = std::getenv("CAFE_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

const char* code_version() { return CAFE_VERSION; }

std::string sha256_hex(const std::string& text) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr))
    throw std::runtime_error("SHA-256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

namespace {

std::string timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string config_text(const ExperimentConfig& c) { return to_json(c).dump(2) + "\n"; }

void write_config_snapshot(const fs::path& dir, const ExperimentConfig& c) {
  plot::write_text(dir / "config.json", config_text(c));
}

void write_json(const fs::path& path, const json& j) { plot::write_text(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string opt_fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

void write_run_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                        const ExperimentConfig* cfg, const std::string& status, double seconds) {
  json j{{"command", command},
         {"arguments", args},
         {"code_version", code_version()},
         {"status", status},
         {"finished", timestamp()},
         {"seconds", seconds}};
  if (cfg) {
    j["config_sha256"] = sha256_hex(config_text(*cfg));
    j["seed"] = cfg->seed;
    j["config"] = "config.json";
    write_config_snapshot(dir, *cfg);
  }
  write_json(dir / "run.json", j);
}

// ---------------------------------------------------------------------------
// Training runs

namespace {

json train_state_json(const TrainState<float>& st) {
  json hist = json::array();
  for (const auto& e : st.history) hist.push_back(epoch_to_json(e));
  return {{"epochs_done", st.epochs_done},   {"best_epoch", st.best_epoch},
          {"best_value", st.best_value},     {"bad_epochs", st.bad_epochs},
          {"optimizer_steps", st.optimizer_steps}, {"stopped_early", st.stopped_early},
          {"history", hist}};
}

json checkpoint_meta(const ExperimentConfig& cfg) {
  return {{"config", to_json(cfg)}, {"code_version", code_version()}};
}

void write_history(const fs::path& dir, const std::vector<EpochRecord>& history, const ExperimentConfig& cfg) {
  if (cfg.wants("csv")) {
    std::ostringstream os;
    os << history_csv_header() << '\n';
    for (const auto& e : history) os << history_csv_row(e) << '\n';
    plot::write_text(dir / "history.csv", os.str());
  }
  if (cfg.wants("svg") && !history.empty()) {
    plot::Series loss{"train loss", {}, {}}, val{"val mIoU", {}, {}}, tr{"train mIoU", {}, {}};
    for (const auto& e : history) {
      loss.x.push_back(e.epoch);
      loss.y.push_back(e.train_loss);
      if (e.val_miou) val.x.push_back(e.epoch), val.y.push_back(*e.val_miou);
      if (e.train_miou) tr.x.push_back(e.epoch), tr.y.push_back(*e.train_miou);
    }
    std::vector<plot::Series> series{loss};
    if (!val.x.empty()) series.push_back(val);
    if (!tr.x.empty()) series.push_back(tr);
    plot::write_text(dir / "loss.svg", plot::line_chart(series, {"Training curve", "epoch", "value"}));
  }
}

void write_report(const fs::path& dir, const TrainOutcome& o, const ExperimentConfig& cfg) {
  const MetricReport& main = o.test ? *o.test : o.validation;
  if (cfg.wants("json")) {
    json j = to_json(main, -1);
    j["split"] = o.test ? "test" : "val";
    j["validation"] = to_json(o.validation, -1);
    json extra = json::object();
    for (const auto& [name, rep] : o.extra) extra[name] = to_json(rep, -1);
    j["extra_splits"] = extra;
    j["best_epoch"] = o.state.best_epoch;
    j["epochs_run"] = o.state.epochs_done;
    j["stopped_early"] = o.state.stopped_early;
    j["trainable_parameters"] = o.trainable_parameters;
    write_json(dir / "report.json", j);
  }
  if (cfg.wants("csv")) plot::write_text(dir / "per_image.csv", per_image_csv(main));
}

TrainOutcome run_training(const ExperimentConfig& cfg, const Partition& part, const fs::path& dir, bool resume,
                          std::ostream& log) {
  RunDir run(dir);
  write_config_snapshot(run.path, cfg);
  Model<float> model(cfg.model, cfg.seed);
  TrainConfig tc = cfg.training;
  tc.seed = cfg.seed;
  const auto meta = checkpoint_meta(cfg);

  std::optional<TrainState<float>> state;
  if (resume) {
    if (!fs::exists(run / "last.ckpt")) throw ConfigError("nothing to resume: " + (run / "last.ckpt").string() + " is missing");
    TrainState<float> st;
    {
      Model<float> best(cfg.model, cfg.seed);
      load_checkpoint(run / "best.ckpt", best.store(), LoadMode::strict);
      st.best_weights = best.store().snapshot();
    }
    const auto loaded = load_checkpoint(run / "last.ckpt", model.store(), LoadMode::strict, &st.optimizer);
    const auto& js = loaded.manifest.at("train_state");
    st.epochs_done = js.at("epochs_done").get<int>();
    st.best_epoch = js.at("best_epoch").get<int>();
    st.best_value = js.at("best_value").get<double>();
    st.bad_epochs = js.at("bad_epochs").get<int>();
    st.optimizer_steps = js.at("optimizer_steps").get<std::int64_t>();
    st.stopped_early = js.at("stopped_early").get<bool>();
    for (const auto& e : js.at("history")) st.history.push_back(epoch_from_json(e));
    log << "resuming " << run.path.string() << " after epoch " << st.epochs_done << '\n';
    state = std::move(st);
  }

  TrainHooks<float> hooks;
  hooks.on_epoch = [&](const EpochRecord& r, const TrainState<float>& st) {
    auto m = meta;
    m["train_state"] = train_state_json(st);
    save_checkpoint(run / "last.ckpt", model.store(), m, st.optimizer);
    if (r.improved) save_checkpoint(run / "best.ckpt", model.store(), meta);
    write_history(run.path, st.history, cfg);
    log << "epoch " << r.epoch << "  lr " << r.lr << "  loss " << fmt(r.train_loss) << "  monitor "
        << fmt(r.monitor) << (r.improved ? " *" : "") << "  (" << std::fixed << std::setprecision(1) << r.seconds
        << "s)" << std::defaultfloat << '\n';
  };
  hooks.on_abort = [&](const std::string& reason) {
    save_checkpoint(run / "diagnostic.ckpt", model.store(), meta);
    plot::write_text(run / "abort.txt", reason + "\n");
  };

  TrainOutcome out;
  out.trainable_parameters = model.store().parameter_count("", true);
  out.state = train(model, part.train, part.val, tc, hooks, state);
  save_checkpoint(run / "best.ckpt", model.store(), meta);
  write_history(run.path, out.state.history, cfg);

  const auto& eval_set = part.val.empty() ? part.train : part.val;
  out.validation = evaluate(model, eval_set, tc.batch_size);
  if (!part.test.empty()) out.test = evaluate(model, part.test, tc.batch_size);
  for (const auto& [name, samples] : part.extra) out.extra.emplace_back(name, evaluate(model, samples, tc.batch_size));
  write_report(run.path, out, cfg);
  log << "best epoch " << out.state.best_epoch << "  val mIoU " << fmt(out.validation.miou);
  if (out.test) log << "  test mIoU " << fmt(out.test->miou);
  log << '\n';
  return out;
}

}  // namespace

TrainOutcome cmd_train(const ExperimentConfig& cfg, const fs::path& dir, bool resume, std::ostream& log) {
  require_valid(cfg);
  const auto data = load_dataset(cfg.dataset, cfg.model.channels);
  const auto part = make_partition(data, cfg.dataset);
  log << "train " << part.train.size() << "  val " << part.val.size() << "  test " << part.test.size() << '\n';
  return run_training(cfg, part, dir, resume, log);
}

MetricReport cmd_evaluate(const ExperimentConfig& cfg, const fs::path& checkpoint, const std::string& split,
                          const fs::path& dir, std::ostream& log) {
  require_valid(cfg);
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint does not exist: " + checkpoint.string());
  Model<float> model(cfg.model, cfg.seed);
  load_checkpoint(checkpoint, model.store(), LoadMode::strict);
  const auto part = make_partition(load_dataset(cfg.dataset, cfg.model.channels), cfg.dataset);
  const std::vector<TileSample>* set = nullptr;
  if (split == "train") set = &part.train;
  else if (split == "val") set = &part.val;
  else if (split == "test") set = &part.test;
  else
    for (const auto& [name, s] : part.extra)
      if (name == split) set = &s;
  if (!set) throw ConfigError("unknown split '" + split + "' (train, val, test or an extra_eval name)");
  if (set->empty()) throw DataError("split '" + split + "' is empty");
  const auto rep = evaluate(model, *set, cfg.training.batch_size);
  RunDir run(dir);
  if (cfg.wants("json")) {
    auto j = to_json(rep, -1);
    j["split"] = split;
    j["checkpoint"] = checkpoint.string();
    write_json(run / "report.json", j);
  }
  if (cfg.wants("csv")) plot::write_text(run / "per_image.csv", per_image_csv(rep));
  log << split << " mIoU " << fmt(rep.miou) << "  mDice " << fmt(rep.mdice) << '\n';
  return rep;
}

TuneResult cmd_tune(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  require_valid(cfg);
  const auto part = make_partition(load_dataset(cfg.dataset, cfg.model.channels), cfg.dataset);
  if (part.val.empty() && cfg.training.monitor != Monitor::train_miou) throw DataError("tuning needs a validation split");
  ModelFactory<float> factory = [&] { return std::make_unique<Model<float>>(cfg.model, cfg.seed); };
  auto tuner = cfg.tuner;
  tuner.seed = cfg.seed;
  auto base = cfg.training;
  base.seed = cfg.seed;
  log << "tuning with " << tuner.n_trials << " trials of " << tuner.trial_epochs << " epochs\n";
  const auto result = tune(factory, part.train, part.val, tuner, base);
  RunDir run(dir);
  plot::write_text(run / "trials.csv", trial_csv(result.trials));
  auto best = cfg;
  best.training = result.best_config;
  best.training.max_epochs = cfg.training.max_epochs;
  best.training.patience = cfg.training.patience;
  write_json(run / "best_config.json", to_json(best));
  if (cfg.wants("svg")) {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& t : result.trials) {
      labels.push_back(std::to_string(t.index));
      values.push_back(t.best_value.value_or(std::nan("")));
    }
    plot::write_text(run / "trials.svg", plot::bar_chart(labels, values, {"Tuner trials", "trial", "best monitor"}));
  }
  log << "best trial " << result.best << "  lr " << result.best_config.lr << "  weight_decay "
      << result.best_config.weight_decay << "  step_size " << result.best_config.step_size << "  gamma "
      << result.best_config.gamma << '\n';
  return result;
}

json cmd_kfold(const ExperimentConfig& cfg, const fs::path& dir, const std::vector<int>& folds, std::ostream& log) {
  require_valid(cfg);
  const auto data = load_dataset(cfg.dataset, cfg.model.channels);
  std::vector<std::string> ids;
  for (const auto& s : data.samples) ids.push_back(s.id);
  const auto splits = kfold_split(ids, cfg.dataset.kfold);
  const int k = cfg.dataset.kfold.k;
  std::vector<int> todo = folds;
  if (todo.empty()) {
    todo.resize(static_cast<std::size_t>(k));
    std::iota(todo.begin(), todo.end(), 0);
  }
  RunDir run(dir);
  for (int f : todo) {
    if (f < 0 || f >= k) throw ConfigError("fold index " + std::to_string(f) + " outside [0, " + std::to_string(k) + ")");
    log << "fold " << f << ": train " << splits[static_cast<std::size_t>(f)].train.size() << "  val "
        << splits[static_cast<std::size_t>(f)].val.size() << "  test " << splits[static_cast<std::size_t>(f)].test.size()
        << '\n';
    auto fcfg = cfg;
    fcfg.dataset.fold = f;
    const auto part = make_partition(data, cfg.dataset, splits[static_cast<std::size_t>(f)]);
    const auto fdir = run / ("fold_" + std::to_string(f));
    run_training(fcfg, part, fdir, false, log);
    json ids_j{{"train", splits[static_cast<std::size_t>(f)].train},
               {"val", splits[static_cast<std::size_t>(f)].val},
               {"test", splits[static_cast<std::size_t>(f)].test}};
    write_json(fdir / "split.json", ids_j);
  }

  json agg{{"k", k}, {"complete", false}};
  std::vector<double> mious, mdices, pooled;
  json per_fold = json::array();
  std::set<std::string> seen_test;
  bool disjoint = true;
  std::ostringstream csv;
  csv << "fold,id,miou\n";
  std::vector<plot::Group> groups;
  for (int f = 0; f < k; ++f) {
    const auto report = run / ("fold_" + std::to_string(f)) / "report.json";
    if (!fs::exists(report)) {
      log << "fold " << f << " has no report yet; aggregate deferred\n";
      write_json(run / "aggregate.json", agg);
      return agg;
    }
    std::ifstream is(report);
    json r;
    is >> r;
    mious.push_back(r.at("miou").get<double>());
    mdices.push_back(r.at("mdice").get<double>());
    plot::Group g{"fold " + std::to_string(f), {}};
    for (const auto& img : r.at("per_image_miou")) {
      const double v = img.at("miou").get<double>();
      pooled.push_back(v);
      g.values.push_back(v);
      csv << f << ',' << img.at("id").get<std::string>() << ',' << fmt(v) << '\n';
    }
    groups.push_back(g);
    const auto& test_ids = splits[static_cast<std::size_t>(f)].test;
    for (const auto& id : test_ids) disjoint = seen_test.insert(id).second && disjoint;
    per_fold.push_back({{"fold", f}, {"miou", mious.back()}, {"mdice", mdices.back()}, {"test_ids", test_ids}});
  }
  groups.push_back({"pooled", pooled});
  agg["complete"] = true;
  agg["folds"] = per_fold;
  agg["miou"] = {{"mean", mean_of(mious)}, {"std", std_of(mious)}};
  agg["mdice"] = {{"mean", mean_of(mdices)}, {"std", std_of(mdices)}};
  agg["per_image_miou"] = {{"mean", mean_of(pooled)}, {"std", std_of(pooled)}, {"count", pooled.size()}};
  agg["std_definition"] = "sample standard deviation (n - 1)";
  agg["test_sets_disjoint"] = disjoint;
  write_json(run / "aggregate.json", agg);
  if (cfg.wants("csv")) plot::write_text(run / "per_image.csv", csv.str());
  if (cfg.wants("svg"))
    plot::write_text(run / "per_image_box.svg", plot::box_plot(groups, {"Per-image mIoU by fold", "fold", "mIoU"}));
  log << "k-fold mIoU " << fmt(mean_of(mious)) << " +- " << fmt(std_of(mious)) << '\n';
  return agg;
}

std::vector<SweepRow> cmd_beta_sweep(const ExperimentConfig& cfg, const std::vector<double>& betas, const fs::path& dir,
                                     std::ostream& log) {
  require_valid(cfg);
  if (betas.empty()) throw ConfigError("beta sweep needs at least one beta");
  for (double b : betas)
    if (!(b >= 0 && b <= 1)) throw ConfigError("beta " + fmt(b) + " outside [0, 1]");
  const auto part = make_partition(load_dataset(cfg.dataset, cfg.model.channels), cfg.dataset);
  RunDir run(dir);
  std::vector<SweepRow> rows;
  for (double b : betas) {
    auto c = cfg;
    c.model.fusion.beta = b;
    if (cfg.sweep.epochs) c.training.max_epochs = *cfg.sweep.epochs;
    log << "beta " << fmt(b) << '\n';
    std::ostringstream name;
    name << "beta_" << std::fixed << std::setprecision(3) << b;
    const auto o = run_training(c, part, run / name.str(), false, log);
    rows.push_back({b, o.validation.miou, o.test ? std::optional<double>(o.test->miou) : std::nullopt});
  }
  std::ostringstream csv;
  csv << "beta,val_miou,test_miou\n";
  for (const auto& r : rows) csv << fmt(r.beta) << ',' << fmt(r.val_miou) << ',' << opt_fmt(r.test_miou) << '\n';
  plot::write_text(run / "beta_sweep.csv", csv.str());
  if (cfg.wants("svg")) {
    plot::Series val{"val mIoU", {}, {}}, test{"test mIoU", {}, {}};
    for (const auto& r : rows) {
      val.x.push_back(r.beta);
      val.y.push_back(r.val_miou);
      if (r.test_miou) test.x.push_back(r.beta), test.y.push_back(*r.test_miou);
    }
    std::vector<plot::Series> s{val};
    if (!test.x.empty()) s.push_back(test);
    plot::write_text(run / "beta_sweep.svg", plot::line_chart(s, {"Fusion bias sweep", "beta", "mIoU"}));
  }
  return rows;
}

std::vector<std::pair<std::string, AblationFlags>> module_ablation_rows() {
  AblationFlags no_adapt, adapt_only_no_cnn, adapt_only_plain, adapt_res, adapt_cam, full;
  no_adapt.adapters = false;
  adapt_only_no_cnn = {true, false, false, false, false};
  adapt_only_plain = {true, false, false, false, true};
  adapt_res = {true, true, false, false, true};
  adapt_cam = {true, false, true, false, true};
  return {{"no_adaptation", no_adapt},
          {"adaptation_only_no_cnn", adapt_only_no_cnn},
          {"adaptation_only_plain_cnn", adapt_only_plain},
          {"adaptation_residual", adapt_res},
          {"adaptation_cam", adapt_cam},
          {"full", full}};
}

std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, const std::string& table, const fs::path& dir,
                                    std::ostream& log) {
  require_valid(cfg);
  std::vector<std::pair<std::string, ExperimentConfig>> configs;
  auto base = cfg;
  if (cfg.ablate.epochs) base.training.max_epochs = *cfg.ablate.epochs;
  if (table == "modules") {
    for (const auto& [name, flags] : module_ablation_rows()) {
      auto c = base;
      c.model.ablation = flags;
      configs.emplace_back(name, c);
    }
  } else if (table == "cnn_widths") {
    for (const auto& w : cfg.ablate.cnn_widths) {
      auto c = base;
      c.model.cnn.stage_widths = w;
      std::string name = "widths";
      for (int v : w) name += "_" + std::to_string(v);
      configs.emplace_back(name, c);
    }
  } else {
    throw ConfigError("unknown ablation table '" + table + "' (expected modules or cnn_widths)");
  }
  for (const auto& [name, c] : configs) {
    const auto errors = validate(c);
    if (!errors.empty()) throw ConfigError("ablation row " + name + ": " + errors.front());
  }
  const auto part = make_partition(load_dataset(cfg.dataset, cfg.model.channels), cfg.dataset);
  RunDir run(dir);
  std::vector<AblationRow> rows;
  for (const auto& [name, c] : configs) {
    log << "ablation row " << name << '\n';
    const auto o = run_training(c, part, run / name, false, log);
    AblationRow r;
    r.name = name;
    r.flags = c.model.ablation;
    r.widths = c.model.cnn.stage_widths;
    r.trainable_parameters = o.trainable_parameters;
    r.val_miou = o.validation.miou;
    r.val_mdice = o.validation.mdice;
    if (o.test) r.test_miou = o.test->miou, r.test_mdice = o.test->mdice;
    r.epochs = c.training.max_epochs;
    r.seed = c.seed;
    rows.push_back(r);
  }
  std::ostringstream csv;
  csv << "row,adapters,residual,cam,m2faf,cnn,widths,trainable_parameters,epochs,seed,val_miou,val_mdice,test_miou,"
         "test_mdice\n";
  for (const auto& r : rows) {
    std::string widths;
    for (std::size_t i = 0; i < r.widths.size(); ++i) widths += (i ? " " : "") + std::to_string(r.widths[i]);
    csv << r.name << ',' << r.flags.adapters << ',' << r.flags.residual << ',' << r.flags.cam << ',' << r.flags.m2faf
        << ',' << r.flags.cnn << ',' << widths << ',' << r.trainable_parameters << ',' << r.epochs << ',' << r.seed
        << ',' << fmt(r.val_miou) << ',' << fmt(r.val_mdice) << ',' << opt_fmt(r.test_miou) << ','
        << opt_fmt(r.test_mdice) << '\n';
  }
  plot::write_text(run / ("ablation_" + table + ".csv"), csv.str());
  if (cfg.wants("svg")) {
    std::vector<std::string> labels;
    std::vector<double> values;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      labels.push_back(std::to_string(i + 1));
      values.push_back(rows[i].val_miou);
    }
    plot::write_text(run / ("ablation_" + table + ".svg"),
                     plot::bar_chart(labels, values, {"Ablation: " + table, "row", "val mIoU"}));
  }
  return rows;
}

DatasetManifest cmd_synth_data(const ExperimentConfig& cfg, const fs::path& dir, std::ostream& log) {
  auto spec = cfg.dataset.synthetic;
  spec.scene.signal_channels = signal_channels(cfg.dataset.signal_placement, cfg.model.channels);
  const auto errors = validate(spec.scene);
  if (!errors.empty()) throw ConfigError("invalid synthetic scene: " + errors.front());
  auto m = write_synthetic_dataset(dir, spec);
  log << "wrote " << m.samples.size() << " scenes to " << dir.string() << '\n';
  return m;
}

Inventory cmd_inventory(const ModelConfig& model, bool as_json, std::ostream& out) {
  Model<float> m(model, 0, true);
  const auto inv = m.inventory();
  if (as_json) {
    json rows = json::array();
    for (const auto& r : inv.rows) rows.push_back({{"component", r.component}, {"parameters", r.parameters}, {"trainable", r.trainable}});
    out << json{{"rows", rows},
                {"adapter_parameters_per_block", inv.adapter_per_block},
                {"total", inv.total},
                {"trainable", inv.trainable}}
               .dump(2)
        << '\n';
    return inv;
  }
  out << std::left << std::setw(22) << "component" << std::right << std::setw(16) << "parameters" << "  trainable\n";
  for (const auto& r : inv.rows)
    out << std::left << std::setw(22) << r.component << std::right << std::setw(16) << r.parameters << "  "
        << (r.trainable ? "yes" : "no") << '\n';
  out << "adapter parameters per block: " << inv.adapter_per_block << '\n'
      << "total parameters: " << inv.total << '\n'
      << "trainable parameters: " << inv.trainable << '\n';
  return inv;
}

EmbeddingStage parse_embedding_stage(const std::string& s) {
  if (s == "pre_fusion_ap") return EmbeddingStage::pre_fusion_ap;
  if (s == "pre_fusion_cnn") return EmbeddingStage::pre_fusion_cnn;
  if (s == "post_fusion") return EmbeddingStage::post_fusion;
  throw ConfigError("unknown embedding stage '" + s + "' (expected pre_fusion_ap, pre_fusion_cnn or post_fusion)");
}

std::string to_string(EmbeddingStage s) {
  switch (s) {
    case EmbeddingStage::pre_fusion_ap: return "pre_fusion_ap";
    case EmbeddingStage::pre_fusion_cnn: return "pre_fusion_cnn";
    default: return "post_fusion";
  }
}

EmbeddingExport cmd_export_embeddings(const ExperimentConfig& cfg, const std::optional<fs::path>& checkpoint,
                                      const std::string& sample, int level, EmbeddingStage stage, const fs::path& dir,
                                      std::ostream& log) {
  require_valid(cfg);
  if (level < 1 || level > 4) throw ConfigError("embedding level must be 1..4");
  if (stage == EmbeddingStage::pre_fusion_cnn && !cfg.model.ablation.cnn)
    throw ConfigError("pre_fusion_cnn requested but the model has no CNN branch");
  Model<float> model(cfg.model, cfg.seed);
  if (checkpoint) {
    if (!fs::exists(*checkpoint)) throw ConfigError("checkpoint does not exist: " + checkpoint->string());
    load_checkpoint(*checkpoint, model.store(), LoadMode::strict);
  }
  const auto part = make_partition(load_dataset(cfg.dataset, cfg.model.channels), cfg.dataset);
  const TileSample* chosen = nullptr;
  for (const auto* set : {&part.test, &part.val, &part.train})
    for (const auto& s : *set)
      if (!chosen && (sample.empty() || s.id == sample)) chosen = &s;
  if (!chosen) throw ConfigError("sample '" + sample + "' not found in the dataset");

  NoGradGuard guard;
  auto x = Tensorf::from({1, chosen->channels, chosen->height, chosen->width}, chosen->image);
  const auto f = model.features(x, false);
  const auto idx = static_cast<std::size_t>(level - 1);
  const Tensorf& t = stage == EmbeddingStage::pre_fusion_ap    ? f.ap.at(idx)
                     : stage == EmbeddingStage::pre_fusion_cnn ? f.cnn.at(idx)
                                                               : f.fused.at(idx);
  EmbeddingExport e;
  e.channels = static_cast<int>(t.dim(1));
  e.height = static_cast<int>(t.dim(2));
  e.width = static_cast<int>(t.dim(3));
  RunDir run(dir);
  const std::string stem = to_string(stage) + "_L" + std::to_string(level);
  e.features = run / (stem + ".bin");
  e.rendering = run / (stem + ".png");
  std::vector<float> values(t.data().begin(), t.data().end());
  write_raster(e.features, {e.channels, e.height, e.width, values}, false);
  plot::write_png(e.rendering, e.width, e.height, plot::pca_rgb(values, e.channels, e.height, e.width));
  log << "sample " << chosen->id << ": " << to_string(stage) << " level " << level << " -> " << e.channels << "x"
      << e.height << "x" << e.width << '\n';
  return e;
}

}  // namespace cafe
