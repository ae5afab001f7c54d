#include <cstring>
#include <fstream>

#include "cafe/datasets.hpp"

#ifdef CAFE_HAVE_TIFF
#include <tiffio.h>
#endif

namespace cafe {

namespace {

std::filesystem::path sidecar(const std::filesystem::path& p) {
  auto s = p;
  s.replace_extension(".json");
  return s;
}

Raster read_bin(const std::filesystem::path& path) {
  std::ifstream js(sidecar(path));
  if (!js) throw DataError("missing sidecar " + sidecar(path).string());
  nlohmann::json meta;
  try {
    js >> meta;
  } catch (const std::exception& e) {
    throw DataError("unreadable sidecar " + sidecar(path).string() + ": " + e.what());
  }
  Raster r;
  r.channels = meta.value("channels", 1);
  r.height = meta.at("height").get<int>();
  r.width = meta.at("width").get<int>();
  const auto dtype = meta.value("dtype", std::string("float32"));
  const std::size_t n = static_cast<std::size_t>(r.channels) * r.height * r.width;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  r.values.resize(n);
  if (dtype == "float32") {
    is.read(reinterpret_cast<char*>(r.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
  } else if (dtype == "int16") {
    std::vector<std::int16_t> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(std::int16_t)));
    std::copy(raw.begin(), raw.end(), r.values.begin());
  } else {
    throw DataError("unsupported dtype '" + dtype + "' in " + sidecar(path).string());
  }
  if (!is) throw DataError("truncated raster " + path.string());
  return r;
}

#ifdef CAFE_HAVE_TIFF

float sample_value(const unsigned char* p, int bits, int format) {
  switch (format) {
    case SAMPLEFORMAT_IEEEFP:
      if (bits == 32) {
        float v;
        std::memcpy(&v, p, 4);
        return v;
      }
      if (bits == 64) {
        double v;
        std::memcpy(&v, p, 8);
        return static_cast<float>(v);
      }
      break;
    case SAMPLEFORMAT_INT:
      if (bits == 8) return static_cast<float>(*reinterpret_cast<const std::int8_t*>(p));
      if (bits == 16) {
        std::int16_t v;
        std::memcpy(&v, p, 2);
        return v;
      }
      if (bits == 32) {
        std::int32_t v;
        std::memcpy(&v, p, 4);
        return static_cast<float>(v);
      }
      break;
    default:
      if (bits == 8) return *p;
      if (bits == 16) {
        std::uint16_t v;
        std::memcpy(&v, p, 2);
        return v;
      }
      if (bits == 32) {
        std::uint32_t v;
        std::memcpy(&v, p, 4);
        return static_cast<float>(v);
      }
  }
  throw DataError("unsupported TIFF sample type: " + std::to_string(bits) + " bits, format " + std::to_string(format));
}

struct TiffCloser {
  void operator()(TIFF* t) const { TIFFClose(t); }
};

Raster read_tiff(const std::filesystem::path& path) {
  TIFFSetWarningHandler(nullptr);
  std::unique_ptr<TIFF, TiffCloser> tif(TIFFOpen(path.string().c_str(), "r"));
  if (!tif) throw DataError("cannot open TIFF " + path.string());
  Raster r;
  do {
    std::uint32_t w = 0, h = 0;
    std::uint16_t spp = 1, bits = 8, format = SAMPLEFORMAT_UINT, planar = PLANARCONFIG_CONTIG;
    TIFFGetField(tif.get(), TIFFTAG_IMAGEWIDTH, &w);
    TIFFGetField(tif.get(), TIFFTAG_IMAGELENGTH, &h);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLESPERPIXEL, &spp);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_BITSPERSAMPLE, &bits);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_SAMPLEFORMAT, &format);
    TIFFGetFieldDefaulted(tif.get(), TIFFTAG_PLANARCONFIG, &planar);
    if (r.channels == 0) {
      r.height = static_cast<int>(h);
      r.width = static_cast<int>(w);
    } else if (r.height != static_cast<int>(h) || r.width != static_cast<int>(w)) {
      throw DataError("TIFF pages differ in size: " + path.string());
    }
    const std::size_t bytes = bits / 8;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    const std::size_t base = r.values.size();
    r.values.resize(base + plane * spp);
    const bool separate = planar == PLANARCONFIG_SEPARATE;
    auto put = [&](const unsigned char* px, std::size_t s, std::size_t y, std::size_t x) {
      r.values[base + s * plane + y * w + x] = sample_value(px, bits, format);
    };

    if (TIFFIsTiled(tif.get())) {
      std::uint32_t tw = 0, th = 0;
      TIFFGetField(tif.get(), TIFFTAG_TILEWIDTH, &tw);
      TIFFGetField(tif.get(), TIFFTAG_TILELENGTH, &th);
      std::vector<unsigned char> buf(static_cast<std::size_t>(TIFFTileSize(tif.get())));
      for (std::uint16_t s = 0; s < (separate ? spp : 1); ++s)
        for (std::uint32_t ty = 0; ty < h; ty += th)
          for (std::uint32_t tx = 0; tx < w; tx += tw) {
            if (TIFFReadTile(tif.get(), buf.data(), tx, ty, 0, s) < 0) throw DataError("bad tile in " + path.string());
            for (std::uint32_t y = ty; y < std::min(h, ty + th); ++y)
              for (std::uint32_t x = tx; x < std::min(w, tx + tw); ++x) {
                const std::size_t off = (static_cast<std::size_t>(y - ty) * tw + (x - tx));
                if (separate) put(&buf[off * bytes], s, y, x);
                else
                  for (std::uint16_t c = 0; c < spp; ++c) put(&buf[(off * spp + c) * bytes], c, y, x);
              }
          }
    } else {
      std::vector<unsigned char> buf(static_cast<std::size_t>(TIFFScanlineSize(tif.get())));
      for (std::uint16_t s = 0; s < (separate ? spp : 1); ++s)
        for (std::uint32_t y = 0; y < h; ++y) {
          if (TIFFReadScanline(tif.get(), buf.data(), y, s) < 0) throw DataError("bad scanline in " + path.string());
          for (std::uint32_t x = 0; x < w; ++x) {
            if (separate) put(&buf[x * bytes], s, y, x);
            else
              for (std::uint16_t c = 0; c < spp; ++c) put(&buf[(x * spp + c) * bytes], c, y, x);
          }
        }
    }
    r.channels += spp;
  } while (TIFFReadDirectory(tif.get()));
  return r;
}

#endif

}  // namespace

bool tiff_supported() {
#ifdef CAFE_HAVE_TIFF
  return true;
#else
  return false;
#endif
}

Raster read_raster(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("file not found: " + path.string());
  const auto ext = path.extension().string();
  if (ext == ".bin") return read_bin(path);
  if (ext == ".tif" || ext == ".tiff") {
#ifdef CAFE_HAVE_TIFF
    return read_tiff(path);
#else
    throw DataError("built without TIFF support: " + path.string());
#endif
  }
  throw DataError("unknown raster extension '" + ext + "': " + path.string());
}

void write_raster(const std::filesystem::path& path, const Raster& r, bool mask) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::size_t n = static_cast<std::size_t>(r.channels) * r.height * r.width;
  if (r.values.size() != n) throw DataError("raster value count does not match its shape");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  if (mask) {
    std::vector<std::int16_t> raw(r.values.begin(), r.values.end());
    os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(std::int16_t)));
  } else {
    os.write(reinterpret_cast<const char*>(r.values.data()), static_cast<std::streamsize>(n * sizeof(float)));
  }
  std::ofstream js(sidecar(path));
  js << nlohmann::json{{"channels", r.channels},
                       {"height", r.height},
                       {"width", r.width},
                       {"dtype", mask ? "int16" : "float32"}}
            .dump();
}

}  // namespace cafe
