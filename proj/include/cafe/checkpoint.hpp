#pragma once

// Checkpoint archive:
//
//   bytes 0..7   "CAFECKPT"
//   u32 LE       format version (1)
//   u64 LE       manifest length in bytes
//   manifest     UTF-8 JSON
//   payload      little-endian arrays, concatenated in manifest order
//
// The manifest lists every entry as {name, shape, kind, trainable, offset,
// count} plus the dtype ("float32" or "float64") and caller metadata
// (config echo, step count, ...). Float models store float32 exactly;
// double models store float64.

#include <filesystem>
#include <string>
#include <vector>

#include "cafe/param_store.hpp"
#include "json.hpp"

namespace cafe {

/// Extra array saved next to the store (optimizer moments and similar).
template <typename T>
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<T> values;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& store,
                     const nlohmann::json& metadata, const std::vector<NamedArray<T>>& extra = {});

enum class LoadMode {
  strict,    ///< every store entry must be present with the same shape and flag
  matching,  ///< entries with matching names are loaded, others are left as is
};

struct LoadedCheckpoint {
  nlohmann::json manifest;
  std::vector<std::string> loaded;
};

/// Loads values into `store`. Extra arrays (kind "state") are returned via
/// `extra` when non-null.
template <typename T>
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, ParameterStore<T>& store,
                                 LoadMode mode = LoadMode::strict,
                                 std::vector<NamedArray<T>>* extra = nullptr);

/// Reads only the JSON manifest.
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path);

}  // namespace cafe
