#include "cafe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cafe {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'F', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

template <typename U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_pod(std::istream& is) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw CheckpointError("truncated checkpoint header");
  return v;
}

const char* kind_name(EntryKind k) { return k == EntryKind::parameter ? "parameter" : "buffer"; }

struct Header {
  nlohmann::json manifest;
  std::streamoff payload_start = 0;
};

Header read_header(std::ifstream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError("not a checkpoint file: " + path.string());
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = read_pod<std::uint64_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated checkpoint manifest");
  Header h;
  h.manifest = nlohmann::json::parse(text);
  h.payload_start = is.tellg();
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& store,
                     const nlohmann::json& metadata, const std::vector<NamedArray<T>>& extra) {
  nlohmann::json manifest = metadata.is_object() ? metadata : nlohmann::json::object();
  manifest["format"] = "cafe-checkpoint";
  manifest["dtype"] = dtype_name<T>();
  auto entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : store.entries()) {
    if (e.value.is_meta()) throw CheckpointError("cannot save meta tensor " + e.name);
    const auto count = static_cast<std::uint64_t>(e.value.numel());
    entries.push_back({{"name", e.name},
                       {"shape", e.value.shape()},
                       {"kind", kind_name(e.kind)},
                       {"trainable", e.trainable},
                       {"offset", offset},
                       {"count", count}});
    offset += count * sizeof(T);
  }
  for (const auto& a : extra) {
    const auto count = static_cast<std::uint64_t>(a.values.size());
    entries.push_back({{"name", a.name},
                       {"shape", a.shape},
                       {"kind", "state"},
                       {"trainable", false},
                       {"offset", offset},
                       {"count", count}});
    offset += count * sizeof(T);
  }
  manifest["entries"] = entries;
  const std::string text = manifest.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    os.write(kMagic, 8);
    write_pod(os, kVersion);
    write_pod(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : store.entries())
      os.write(reinterpret_cast<const char*>(e.value.data().data()),
               static_cast<std::streamsize>(e.value.numel() * static_cast<std::int64_t>(sizeof(T))));
    for (const auto& a : extra)
      os.write(reinterpret_cast<const char*>(a.values.data()),
               static_cast<std::streamsize>(a.values.size() * sizeof(T)));
    if (!os) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  return read_header(is, path).manifest;
}

template <typename T>
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, ParameterStore<T>& store, LoadMode mode,
                                 std::vector<NamedArray<T>>* extra) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  auto header = read_header(is, path);
  const auto& m = header.manifest;
  if (m.value("dtype", "") != dtype_name<T>())
    throw CheckpointError("checkpoint dtype " + m.value("dtype", std::string("?")) + " does not match model dtype " +
                          dtype_name<T>());

  LoadedCheckpoint result;
  result.manifest = m;
  std::vector<std::string> seen;
  for (const auto& e : m.at("entries")) {
    const auto name = e.at("name").get<std::string>();
    const auto shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<std::uint64_t>();
    const auto kind = e.at("kind").get<std::string>();
    is.seekg(header.payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    std::vector<T> values(count);
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (!is) throw CheckpointError("truncated payload for " + name);

    if (kind == "state") {
      if (extra) extra->push_back({name, shape, std::move(values)});
      continue;
    }
    if (!store.contains(name)) {
      if (mode == LoadMode::strict) throw CheckpointError("checkpoint entry not in model: " + name);
      continue;
    }
    auto& entry = store.at(name);
    if (entry.value.shape() != shape)
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " + to_string(shape) + ", model " +
                            to_string(entry.value.shape()));
    if (mode == LoadMode::strict && entry.kind == EntryKind::parameter &&
        entry.trainable != e.at("trainable").get<bool>())
      throw CheckpointError("trainable flag mismatch for " + name);
    std::copy(values.begin(), values.end(), entry.value.data().begin());
    result.loaded.push_back(name);
    seen.push_back(name);
  }
  if (mode == LoadMode::strict && seen.size() != store.size())
    throw CheckpointError("checkpoint is missing " + std::to_string(store.size() - seen.size()) + " model entries");
  return result;
}

template void save_checkpoint<float>(const std::filesystem::path&, const ParameterStore<float>&,
                                     const nlohmann::json&, const std::vector<NamedArray<float>>&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParameterStore<double>&,
                                      const nlohmann::json&, const std::vector<NamedArray<double>>&);
template LoadedCheckpoint load_checkpoint<float>(const std::filesystem::path&, ParameterStore<float>&, LoadMode,
                                                 std::vector<NamedArray<float>>*);
template LoadedCheckpoint load_checkpoint<double>(const std::filesystem::path&, ParameterStore<double>&, LoadMode,
                                                  std::vector<NamedArray<double>>*);

}  // namespace cafe
