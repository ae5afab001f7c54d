#include "cafe/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "cafe/ops.hpp"

namespace cafe {

std::vector<std::string> validate(const TileSample& s, int num_classes, int ignore_label) {
  std::vector<std::string> errors;
  const auto hw = static_cast<std::size_t>(s.height) * s.width;
  if (s.image.size() != hw * s.channels) errors.push_back(s.id + ": image size does not match its shape");
  if (s.mask.size() != hw) errors.push_back(s.id + ": mask and image spatial sizes differ");
  for (int v : s.mask)
    if (v != ignore_label && (v < 0 || v >= num_classes)) {
      errors.push_back(s.id + ": illegal mask value " + std::to_string(v));
      break;
    }
  if (std::any_of(s.image.begin(), s.image.end(), [](float v) { return !std::isfinite(v); }))
    errors.push_back(s.id + ": image contains non-finite values");
  return errors;
}

std::vector<std::string> DatasetManifest::ids() const {
  std::vector<std::string> out;
  for (const auto& s : samples) out.push_back(s.id);
  return out;
}

std::vector<std::string> DatasetManifest::ids_in(const std::string& split) const {
  std::vector<std::string> out;
  for (const auto& s : samples) {
    auto it = splits.find(s.id);
    if (it != splits.end() && it->second == split) out.push_back(s.id);
  }
  return out;
}

const SampleRef& DatasetManifest::sample(const std::string& id) const {
  for (const auto& s : samples)
    if (s.id == id) return s;
  throw DataError("unknown sample id " + id);
}

std::filesystem::path DatasetManifest::resolve(const std::string& rel) const {
  std::filesystem::path p(rel);
  return p.is_absolute() ? p : root / p;
}

std::vector<std::string> DatasetManifest::validate(bool check_files) const {
  std::vector<std::string> errors;
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.id).second) errors.push_back("duplicate sample id " + s.id);
    if (!splits.empty() && !splits.count(s.id)) errors.push_back("sample " + s.id + " has no split assignment");
    if (check_files) {
      if (!std::filesystem::exists(resolve(s.image))) errors.push_back("missing image file " + resolve(s.image).string());
      if (!std::filesystem::exists(resolve(s.mask))) errors.push_back("missing mask file " + resolve(s.mask).string());
    }
  }
  for (const auto& [id, split] : splits)
    if (!seen.count(id)) errors.push_back("split references unknown id " + id);
  if (!stats.mean.empty() && (static_cast<int>(stats.mean.size()) != channel_count || stats.std.size() != stats.mean.size()))
    errors.push_back("normalization stats do not match channel_count");
  return errors;
}

nlohmann::json DatasetManifest::to_json() const {
  auto samples_j = nlohmann::json::array();
  for (const auto& s : samples) samples_j.push_back({{"id", s.id}, {"image", s.image}, {"mask", s.mask}});
  nlohmann::json j{{"layout", layout},
                   {"channel_count", channel_count},
                   {"num_classes", num_classes},
                   {"ignore_label", ignore_label},
                   {"samples", samples_j},
                   {"splits", splits}};
  if (!stats.mean.empty()) j["stats"] = {{"mean", stats.mean}, {"std", stats.std}};
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  m.layout = j.value("layout", std::string("binary"));
  m.channel_count = j.at("channel_count").get<int>();
  m.num_classes = j.value("num_classes", 2);
  m.ignore_label = j.value("ignore_label", -1);
  for (const auto& s : j.at("samples"))
    m.samples.push_back({s.at("id").get<std::string>(), s.at("image").get<std::string>(), s.at("mask").get<std::string>()});
  if (j.contains("splits")) m.splits = j.at("splits").get<std::map<std::string, std::string>>();
  if (j.contains("stats")) {
    m.stats.mean = j.at("stats").at("mean").get<std::vector<double>>();
    m.stats.std = j.at("stats").at("std").get<std::vector<double>>();
  }
  return m;
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << to_json().dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    is >> j;
    return from_json(j, path.parent_path());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + path.string() + ": " + e.what());
  }
}

ChannelStats compute_stats(const DatasetManifest& m, const std::vector<std::string>& ids) {
  if (ids.empty()) throw DataError("cannot compute normalization stats from an empty split");
  std::vector<double> sum(static_cast<std::size_t>(m.channel_count), 0.0), sq(sum.size(), 0.0);
  std::vector<std::int64_t> count(sum.size(), 0);
  for (const auto& id : ids) {
    const auto r = read_raster(m.resolve(m.sample(id).image));
    if (r.channels != m.channel_count)
      throw DataError(id + ": raster has " + std::to_string(r.channels) + " bands, manifest says " +
                      std::to_string(m.channel_count));
    const std::size_t plane = static_cast<std::size_t>(r.height) * r.width;
    for (std::size_t c = 0; c < sum.size(); ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = r.values[c * plane + i];
        if (!std::isfinite(v)) continue;
        sum[c] += v;
        sq[c] += v * v;
        ++count[c];
      }
  }
  ChannelStats s;
  for (std::size_t c = 0; c < sum.size(); ++c) {
    const double n = std::max<std::int64_t>(count[c], 1);
    const double mean = sum[c] / n;
    s.mean.push_back(mean);
    s.std.push_back(std::sqrt(std::max(sq[c] / n - mean * mean, 0.0)));
  }
  return s;
}

ChannelStats compute_stats(const std::vector<TileSample>& samples) {
  if (samples.empty()) throw DataError("cannot compute normalization stats from an empty split");
  const auto c = static_cast<std::size_t>(samples.front().channels);
  std::vector<double> sum(c, 0.0), sq(c, 0.0);
  std::vector<std::int64_t> count(c, 0);
  for (const auto& s : samples) {
    if (static_cast<std::size_t>(s.channels) != c) throw DataError(s.id + ": channel count differs within the split");
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = s.image[k * plane + i];
        if (!std::isfinite(v)) continue;
        sum[k] += v;
        sq[k] += v * v;
        ++count[k];
      }
  }
  ChannelStats out;
  for (std::size_t k = 0; k < c; ++k) {
    const double n = std::max<std::int64_t>(count[k], 1);
    const double mean = sum[k] / n;
    out.mean.push_back(mean);
    out.std.push_back(std::sqrt(std::max(sq[k] / n - mean * mean, 0.0)));
  }
  return out;
}

void normalize(TileSample& s, const ChannelStats& stats) {
  if (stats.mean.size() != static_cast<std::size_t>(s.channels) || stats.std.size() != stats.mean.size())
    throw DataError(s.id + ": normalization stats do not match the channel count");
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    const float mean = static_cast<float>(stats.mean[c]);
    const float inv = 1.0f / static_cast<float>(std::max(stats.std[c], 1e-12));
    for (std::size_t i = 0; i < plane; ++i) s.image[c * plane + i] = (s.image[c * plane + i] - mean) * inv;
  }
}

namespace {

std::vector<float> resize_image(const std::vector<float>& img, int c, int h, int w, int oh, int ow) {
  NoGradGuard guard;
  auto t = Tensorf::from({1, c, h, w}, img);
  auto r = ops::resize_bilinear(t, oh, ow);
  return {r.data().begin(), r.data().end()};
}

std::vector<int> resize_mask(const std::vector<int>& m, int h, int w, int oh, int ow) {
  std::vector<int> out(static_cast<std::size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i) {
    const int si = std::min(h - 1, static_cast<int>((i + 0.5) * h / oh));
    for (int j = 0; j < ow; ++j) {
      const int sj = std::min(w - 1, static_cast<int>((j + 0.5) * w / ow));
      out[static_cast<std::size_t>(i) * ow + j] = m[static_cast<std::size_t>(si) * w + sj];
    }
  }
  return out;
}

}  // namespace

TileSample load_tile(const DatasetManifest& m, const SampleRef& ref, std::optional<std::pair<int, int>> target) {
  const auto img = read_raster(m.resolve(ref.image));
  const auto msk = read_raster(m.resolve(ref.mask));
  if (img.channels != m.channel_count)
    throw DataError(ref.id + ": image has " + std::to_string(img.channels) + " bands, manifest expects " +
                    std::to_string(m.channel_count));
  if (msk.channels != 1) throw DataError(ref.id + ": mask must have one band");
  if (msk.height != img.height || msk.width != img.width)
    throw DataError(ref.id + ": mask and image sizes differ");

  TileSample s;
  s.id = ref.id;
  s.channels = img.channels;
  s.height = img.height;
  s.width = img.width;
  s.image = img.values;
  s.mask.resize(msk.values.size());
  for (std::size_t i = 0; i < msk.values.size(); ++i) {
    const float v = msk.values[i];
    const bool legal = std::isfinite(v) && v >= 0 && v < static_cast<float>(m.num_classes) && v == std::floor(v);
    s.mask[i] = legal ? static_cast<int>(v) : m.ignore_label;
  }

  const bool have_stats = !m.stats.mean.empty();
  const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
  for (int c = 0; c < s.channels; ++c) {
    float fill = 0.0f;
    if (have_stats) {
      fill = static_cast<float>(m.stats.mean[static_cast<std::size_t>(c)]);
    } else {
      double sum = 0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < plane; ++i)
        if (std::isfinite(s.image[c * plane + i])) sum += s.image[c * plane + i], ++n;
      fill = n ? static_cast<float>(sum / n) : 0.0f;
    }
    for (std::size_t i = 0; i < plane; ++i)
      if (!std::isfinite(s.image[c * plane + i])) s.image[c * plane + i] = fill;
  }

  if (target && (target->first != s.height || target->second != s.width)) {
    s.image = resize_image(s.image, s.channels, s.height, s.width, target->first, target->second);
    s.mask = resize_mask(s.mask, s.height, s.width, target->first, target->second);
    s.height = target->first;
    s.width = target->second;
  }

  if (have_stats) normalize(s, m.stats);
  return s;
}

std::vector<TileSample> load_samples(const DatasetManifest& m, const std::vector<std::string>& ids,
                                     std::optional<std::pair<int, int>> target) {
  std::vector<TileSample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_tile(m, m.sample(id), target));
  return out;
}

namespace {

std::optional<std::filesystem::path> find_raster(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {".tif", ".tiff", ".bin"}) {
    auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  return std::nullopt;
}

int probe_channels(const DatasetManifest& m) {
  if (m.samples.empty()) throw DataError("no samples found under " + m.root.string());
  return read_raster(m.resolve(m.samples.front().image)).channels;
}

}  // namespace

DatasetManifest scan_sen1floods11(const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  m.layout = "sen1floods11";
  std::filesystem::path split_dir = std::filesystem::exists(root / "splits") ? root / "splits" : root;
  const std::vector<std::pair<std::string, std::string>> lists{{"flood_train_data.csv", "train"},
                                                               {"flood_valid_data.csv", "val"},
                                                               {"flood_test_data.csv", "test"},
                                                               {"flood_bolivia_data.csv", "bolivia"}};
  std::set<std::string> seen;
  for (const auto& [file, split] : lists) {
    std::ifstream is(split_dir / file);
    if (!is) {
      if (split == "bolivia") continue;
      throw DataError("missing split list " + (split_dir / file).string());
    }
    std::string line;
    while (std::getline(is, line)) {
      const auto first = line.substr(0, line.find(','));
      const auto pos = first.find("_S1Hand");
      if (pos == std::string::npos) continue;
      const auto id = first.substr(0, pos);
      m.splits[id] = split;
      if (!seen.insert(id).second) continue;
      auto img = find_raster(root / "S2Hand", id + "_S2Hand");
      auto lbl = find_raster(root / "LabelHand", id + "_LabelHand");
      if (!img || !lbl) throw DataError("missing raster for chip " + id + " under " + root.string());
      m.samples.push_back({id, std::filesystem::relative(*img, root).string(), std::filesystem::relative(*lbl, root).string()});
    }
  }
  m.channel_count = probe_channels(m);
  return m;
}

DatasetManifest scan_floodplanet(const std::filesystem::path& root) {
  DatasetManifest m;
  m.root = root;
  m.layout = "floodplanet";
  if (!std::filesystem::is_directory(root / "images")) throw DataError("missing directory " + (root / "images").string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(root / "images")) {
    const auto ext = e.path().extension().string();
    if (ext == ".tif" || ext == ".tiff" || ext == ".bin") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto id = f.stem().string();
    auto lbl = find_raster(root / "labels", id);
    if (!lbl) throw DataError("missing label for " + id);
    m.samples.push_back({id, std::filesystem::relative(f, root).string(), std::filesystem::relative(*lbl, root).string()});
  }
  m.channel_count = probe_channels(m);
  return m;
}

std::vector<FoldSplit> kfold_split(const std::vector<std::string>& ids, const KFoldConfig& cfg) {
  const auto n = static_cast<std::int64_t>(ids.size());
  if (cfg.k < 1) throw ConfigError("k must be at least 1");
  if (n < cfg.k) throw DataError("dataset has " + std::to_string(n) + " samples, fewer than k=" + std::to_string(cfg.k));
  if (cfg.train < 0 || cfg.val < 0 || cfg.test <= 0 || std::abs(cfg.train + cfg.val + cfg.test - 1.0) > 1e-9)
    throw ConfigError("fold ratios must be non-negative and sum to 1");
  if (cfg.k * cfg.test > 1.0 + 1e-9) throw ConfigError("k * test ratio exceeds 1; test sets cannot be disjoint");
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) throw DataError("duplicate ids in fold input");

  std::vector<std::string> order = ids;
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::int64_t>(std::llround(cfg.test * static_cast<double>(n)));
  const auto n_val = static_cast<std::int64_t>(std::llround(cfg.val * static_cast<double>(n)));
  if (n_test + n_val > n) throw DataError("dataset too small for the requested ratios");

  std::vector<FoldSplit> folds;
  for (int f = 0; f < cfg.k; ++f) {
    const std::int64_t start = f * n / cfg.k;
    const std::int64_t next = (f + 1) * n / cfg.k;
    if (n_test > next - start) throw DataError("test blocks would overlap for this dataset size");
    FoldSplit s;
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n_test; ++i) {
      const auto idx = static_cast<std::size_t>(start + i);
      s.test.push_back(order[idx]);
      used[idx] = 1;
    }
    for (std::int64_t i = 0; i < n_val; ++i) {
      const auto idx = static_cast<std::size_t>((start + n_test + i) % n);
      s.val.push_back(order[idx]);
      used[idx] = 1;
    }
    for (std::int64_t i = 0; i < n; ++i)
      if (!used[static_cast<std::size_t>(i)]) s.train.push_back(order[static_cast<std::size_t>(i)]);
    folds.push_back(std::move(s));
  }
  return folds;
}

SignalPlacement parse_signal_placement(const std::string& s) {
  if (s == "transformer") return SignalPlacement::transformer;
  if (s == "cnn") return SignalPlacement::cnn;
  if (s == "both") return SignalPlacement::both;
  throw ConfigError("unknown signal placement '" + s + "' (expected transformer, cnn or both)");
}

std::string to_string(SignalPlacement p) {
  switch (p) {
    case SignalPlacement::transformer: return "transformer";
    case SignalPlacement::cnn: return "cnn";
    default: return "both";
  }
}

std::vector<int> signal_channels(SignalPlacement p, const ChannelSplitConfig& split) {
  if (p == SignalPlacement::transformer) {
    auto v = split.transformer_indices;
    std::sort(v.begin(), v.end());
    return v;
  }
  if (p == SignalPlacement::cnn) return split.cnn_indices();
  std::vector<int> all(static_cast<std::size_t>(split.total_channels));
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::vector<std::string> validate(const SyntheticSceneSpec& s) {
  std::vector<std::string> errors;
  if (s.height <= 0 || s.width <= 0 || s.channels <= 0) errors.push_back("synthetic scene dimensions must be positive");
  if (s.blob_min < 0 || s.blob_max < s.blob_min) errors.push_back("synthetic blob range is invalid");
  if (s.noise < 0) errors.push_back("synthetic noise must be non-negative");
  if (s.signal_channels.empty()) errors.push_back("at least one channel must carry the water signal");
  for (int c : s.signal_channels)
    if (c < 0 || c >= s.channels) errors.push_back("signal channel " + std::to_string(c) + " out of range");
  if (s.nodata_probability < 0 || s.nodata_probability > 1) errors.push_back("nodata_probability must lie in [0, 1]");
  return errors;
}

TileSample generate_synthetic(const SyntheticSceneSpec& spec, const std::string& id) {
  const auto errors = validate(spec);
  if (!errors.empty()) throw ConfigError("invalid synthetic scene: " + errors.front());
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int h = spec.height, w = spec.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  constexpr double two_pi = 2.0 * std::numbers::pi;

  TileSample s;
  s.id = id;
  s.channels = spec.channels;
  s.height = h;
  s.width = w;
  s.image.assign(plane * spec.channels, 0.0f);
  s.mask.assign(plane, 0);

  // smooth background: offset plus three low-frequency plane waves
  for (int c = 0; c < spec.channels; ++c) {
    const double base = u01(rng) * 2.0 - 1.0;
    double fy[3], fx[3], ph[3], amp[3];
    for (int k = 0; k < 3; ++k) {
      fy[k] = (u01(rng) * 2.0 - 1.0) * 3.0 / h;
      fx[k] = (u01(rng) * 2.0 - 1.0) * 3.0 / w;
      ph[k] = u01(rng) * two_pi;
      amp[k] = 0.2 + 0.3 * u01(rng);
    }
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        double v = base;
        for (int k = 0; k < 3; ++k) v += amp[k] * std::sin(two_pi * (fy[k] * i + fx[k] * j) + ph[k]);
        s.image[c * plane + static_cast<std::size_t>(i) * w + j] = static_cast<float>(v);
      }
  }

  // water bodies: rotated ellipses and, sometimes, a meandering river band
  const int blobs = std::uniform_int_distribution<int>(spec.blob_min, spec.blob_max)(rng);
  const double size = std::min(h, w);
  for (int b = 0; b < blobs; ++b) {
    const double cy = u01(rng) * h, cx = u01(rng) * w;
    const double ay = (0.08 + 0.17 * u01(rng)) * size, ax = (0.08 + 0.17 * u01(rng)) * size;
    const double th = u01(rng) * std::numbers::pi;
    const double ct = std::cos(th), st = std::sin(th);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double dy = i + 0.5 - cy, dx = j + 0.5 - cx;
        const double ry = (dy * ct - dx * st) / ay, rx = (dy * st + dx * ct) / ax;
        if (ry * ry + rx * rx <= 1.0) s.mask[static_cast<std::size_t>(i) * w + j] = 1;
      }
  }
  const bool river = blobs > 0 && u01(rng) < 0.5;
  const double r_y0 = u01(rng) * h, r_slope = (u01(rng) * 2.0 - 1.0) * 0.8;
  const double r_amp = (0.05 + 0.1 * u01(rng)) * size, r_freq = (0.5 + u01(rng)) * two_pi / w;
  const double r_half = (0.02 + 0.04 * u01(rng)) * size;
  if (river)
    for (int j = 0; j < w; ++j) {
      const double centre = r_y0 + r_slope * j + r_amp * std::sin(r_freq * j);
      for (int i = 0; i < h; ++i)
        if (std::abs(i + 0.5 - centre) <= r_half) s.mask[static_cast<std::size_t>(i) * w + j] = 1;
    }

  for (int c : spec.signal_channels)
    for (std::size_t p = 0; p < plane; ++p)
      if (s.mask[p] == 1) s.image[static_cast<std::size_t>(c) * plane + p] -= static_cast<float>(spec.signal);

  for (auto& v : s.image) v += static_cast<float>(spec.noise * gauss(rng));

  if (u01(rng) < spec.nodata_probability) {
    const int ph = std::max(1, static_cast<int>(h * (0.1 + 0.2 * u01(rng))));
    const int pw = std::max(1, static_cast<int>(w * (0.1 + 0.2 * u01(rng))));
    const int y0 = static_cast<int>(u01(rng) * (h - ph)), x0 = static_cast<int>(u01(rng) * (w - pw));
    for (int i = y0; i < y0 + ph; ++i)
      for (int j = x0; j < x0 + pw; ++j) s.mask[static_cast<std::size_t>(i) * w + j] = -1;
  }
  return s;
}

SyntheticSplit generate_synthetic_dataset(const SyntheticDatasetSpec& spec) {
  SyntheticSplit out;
  const std::vector<std::pair<std::string, int>> parts{{"train", spec.train}, {"val", spec.val}, {"test", spec.test}};
  std::mt19937_64 seeds(spec.scene.seed);
  int index = 0;
  for (const auto& [split, count] : parts)
    for (int i = 0; i < count; ++i, ++index) {
      auto scene = spec.scene;
      scene.seed = seeds();
      std::ostringstream name;
      name << "scene_" << std::setw(4) << std::setfill('0') << index;
      out.samples.push_back(generate_synthetic(scene, name.str()));
      out.split.push_back(split);
    }
  return out;
}

DatasetManifest write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDatasetSpec& spec) {
  DatasetManifest m;
  m.root = dir;
  m.layout = "synthetic";
  m.channel_count = spec.scene.channels;
  const auto data = generate_synthetic_dataset(spec);
  std::vector<TileSample> train;
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& tile = data.samples[i];
    write_raster(dir / "images" / (tile.id + ".bin"), {tile.channels, tile.height, tile.width, tile.image}, false);
    write_raster(dir / "masks" / (tile.id + ".bin"),
                 {1, tile.height, tile.width, std::vector<float>(tile.mask.begin(), tile.mask.end())}, true);
    m.samples.push_back({tile.id, "images/" + tile.id + ".bin", "masks/" + tile.id + ".bin"});
    m.splits[tile.id] = data.split[i];
    if (data.split[i] == "train") train.push_back(tile);
  }
  if (!train.empty()) m.stats = compute_stats(train);
  m.save(dir / "manifest.json");
  return m;
}

}  // namespace cafe
