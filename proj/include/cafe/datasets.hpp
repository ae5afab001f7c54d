#pragma once

// Tile ingestion, manifests, k-fold splitting and the synthetic scene
// generator.
//
// Raster files are either GeoTIFF (.tif/.tiff, any band count, read with
// libtiff) or the portable fixture format: a raw little-endian array
// (<name>.bin) next to a JSON sidecar (<name>.json) holding
// {"channels", "height", "width", "dtype"} with dtype float32 or int16.
// Arrays are band-major: band, then row, then column.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cafe/channel_router.hpp"
#include "json.hpp"

namespace cafe {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Raster {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;  // [channels][height][width]
};

Raster read_raster(const std::filesystem::path& path);
/// Writes the .bin/.json pair; `mask` stores int16 values.
void write_raster(const std::filesystem::path& path, const Raster& r, bool mask);
bool tiff_supported();

struct TileSample {
  std::string id;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> image;  // [C][H][W]
  std::vector<int> mask;     // [H][W], class id or ignore
};

/// Every violated invariant (shape agreement, legal labels, finite values).
std::vector<std::string> validate(const TileSample& s, int num_classes, int ignore_label);

struct SampleRef {
  std::string id;
  std::string image;  // relative to the manifest root unless absolute
  std::string mask;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string layout = "binary";
  std::vector<SampleRef> samples;
  /// id -> split name ("train", "val", "test", or any extra named split).
  std::map<std::string, std::string> splits;
  int channel_count = 0;
  int num_classes = 2;
  int ignore_label = -1;
  ChannelStats stats;

  std::vector<std::string> ids() const;
  std::vector<std::string> ids_in(const std::string& split) const;
  const SampleRef& sample(const std::string& id) const;
  std::filesystem::path resolve(const std::string& rel) const;

  /// Invariant violations: unique ids, split ids known, files present.
  std::vector<std::string> validate(bool check_files) const;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j, const std::filesystem::path& root);
  void save(const std::filesystem::path& path) const;
  /// Paths inside the manifest are resolved against its directory.
  static DatasetManifest load(const std::filesystem::path& path);
};

/// Mean and population std per channel over the given ids, ignoring
/// non-finite values.
ChannelStats compute_stats(const DatasetManifest& m, const std::vector<std::string>& ids);

/// Same statistics computed over samples already in memory.
ChannelStats compute_stats(const std::vector<TileSample>& samples);
/// (x - mean) / std per channel, in place.
void normalize(TileSample& s, const ChannelStats& stats);

/// Reads one sample. The image is bilinearly resized and the mask
/// nearest-neighbor resized when `target` is given; mask values outside
/// [0, num_classes) become the ignore label; non-finite image values are
/// replaced by the channel mean; normalization uses the manifest stats
/// when present.
TileSample load_tile(const DatasetManifest& m, const SampleRef& ref,
                     std::optional<std::pair<int, int>> target = std::nullopt);

/// load_tile for each id, in order.
std::vector<TileSample> load_samples(const DatasetManifest& m, const std::vector<std::string>& ids,
                                     std::optional<std::pair<int, int>> target = std::nullopt);

/// Sen1Floods11 layout: S2Hand/<id>_S2Hand.tif, LabelHand/<id>_LabelHand.tif,
/// split lists splits/flood_{train,valid,test,bolivia}_data.csv whose first
/// column names the <id>_S1Hand.tif file. Bolivia becomes the "bolivia"
/// split.
DatasetManifest scan_sen1floods11(const std::filesystem::path& root);

/// FloodPlanet layout: images/<id>.tif and labels/<id>.tif with matching
/// stems (.bin fixtures accepted); no predefined split.
DatasetManifest scan_floodplanet(const std::filesystem::path& root);

struct KFoldConfig {
  int k = 4;
  double train = 0.70;
  double val = 0.10;
  double test = 0.20;
  std::uint64_t seed = 42;
};

struct FoldSplit {
  std::vector<std::string> train, val, test;
};

/// Shuffles ids with the seed; fold f takes round(test*n) consecutive ids
/// starting at floor(f*n/k) as its test set and the next round(val*n) ids
/// (cyclically) as validation; the rest is training data.
std::vector<FoldSplit> kfold_split(const std::vector<std::string>& ids, const KFoldConfig& cfg);

/// Where the water signal of a synthetic scene is imprinted.
enum class SignalPlacement { transformer, cnn, both };

SignalPlacement parse_signal_placement(const std::string& s);
std::string to_string(SignalPlacement p);
std::vector<int> signal_channels(SignalPlacement p, const ChannelSplitConfig& split);

struct SyntheticSceneSpec {
  int height = 64;
  int width = 64;
  int channels = 13;
  std::uint64_t seed = 0;
  int blob_min = 1;
  int blob_max = 4;
  double noise = 0.1;
  double signal = 1.0;
  std::vector<int> signal_channels{0, 4, 5, 6, 8, 9, 10};
  /// Chance that a scene gets one rectangular no-data (ignore) patch.
  double nodata_probability = 0.0;
};

std::vector<std::string> validate(const SyntheticSceneSpec& s);

/// Smooth per-channel background, elliptical and river-like water bodies
/// whose support is the mask, a negative offset of `signal` on the signal
/// channels inside the mask, and Gaussian noise. Fully determined by the
/// spec (including its seed).
TileSample generate_synthetic(const SyntheticSceneSpec& spec, const std::string& id = "synthetic");

struct SyntheticDatasetSpec {
  SyntheticSceneSpec scene;
  int train = 16;
  int val = 8;
  int test = 8;
};

struct SyntheticSplit {
  std::vector<TileSample> samples;
  std::vector<std::string> split;  // split name per sample
};

/// Scenes named scene_0000, ... for train, then val, then test; per-scene
/// seeds are drawn from a generator seeded with spec.scene.seed.
SyntheticSplit generate_synthetic_dataset(const SyntheticDatasetSpec& spec);

/// Writes .bin tiles plus manifest.json (with train-split stats) into dir.
DatasetManifest write_synthetic_dataset(const std::filesystem::path& dir, const SyntheticDatasetSpec& spec);

}  // namespace cafe
