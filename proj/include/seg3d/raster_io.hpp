#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"

namespace seg3d {

enum class DType { U8, U16, U32, F32 };

inline std::string dtype_name(DType t) {
  switch (t) {
    case DType::U8: return "u8";
    case DType::U16: return "u16";
    case DType::U32: return "u32";
    case DType::F32: return "f32";
  }
  return "?";
}

inline DType parse_dtype(const std::string& s) {
  if (s == "u8") return DType::U8;
  if (s == "u16") return DType::U16;
  if (s == "u32") return DType::U32;
  if (s == "f32") return DType::F32;
  throw FormatError("unsupported sample type '" + s + "'");
}

inline std::size_t dtype_bytes(DType t) {
  switch (t) {
    case DType::U8: return 1;
    case DType::U16: return 2;
    case DType::U32:
    case DType::F32: return 4;
  }
  return 0;
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, std::uint8_t>) return DType::U8;
  else if constexpr (std::is_same_v<T, std::uint16_t>) return DType::U16;
  else if constexpr (std::is_same_v<T, std::uint32_t>) return DType::U32;
  else {
    static_assert(std::is_same_v<T, float>, "unsupported raster sample type");
    return DType::F32;
  }
}

// JSON sidecar describing a raw little-endian x-fastest blob.
struct RasterHeader {
  Dims dims;
  DType dtype = DType::U8;
  Spacing spacing;

  std::size_t blob_bytes() const { return dims.size() * dtype_bytes(dtype); }
};

inline nlohmann::json to_json(const RasterHeader& h) {
  return {{"dims", {h.dims.nx, h.dims.ny, h.dims.nz}},
          {"dtype", dtype_name(h.dtype)},
          {"order", "x-fastest"},
          {"endianness", "little"},
          {"spacing", {h.spacing.sx, h.spacing.sy, h.spacing.sz}}};
}

inline RasterHeader header_from_json(const nlohmann::json& j) {
  try {
    RasterHeader h;
    const auto& d = j.at("dims");
    if (!d.is_array() || d.size() != 3) throw FormatError("dims must be [nx,ny,nz]");
    h.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
    if (!h.dims.valid()) throw FormatError("dims must be positive");
    h.dtype = parse_dtype(j.at("dtype").get<std::string>());
    if (j.contains("order") && j["order"] != "x-fastest") throw FormatError("only x-fastest order is supported");
    if (j.contains("endianness") && j["endianness"] != "little") throw FormatError("only little-endian blobs are supported");
    if (j.contains("spacing")) {
      const auto& s = j["spacing"];
      if (!s.is_array() || s.size() != 3) throw FormatError("spacing must be [sx,sy,sz]");
      h.spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
    }
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad raster header: ") + e.what());
  }
}

namespace detail {

template <typename T>
T byteswap_value(T v) {
  if constexpr (sizeof(T) == 1) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void read_le(std::span<const std::uint8_t> src, std::vector<T>& out) {
  out.resize(src.size() / sizeof(T));
  std::memcpy(out.data(), src.data(), out.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : out) v = byteswap_value(v);
  }
}

template <typename T>
std::vector<std::uint8_t> write_le(std::span<const T> src) {
  std::vector<std::uint8_t> out(src.size() * sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::vector<T> tmp(src.begin(), src.end());
    for (auto& v : tmp) v = byteswap_value(v);
    std::memcpy(out.data(), tmp.data(), out.size());
  } else {
    std::memcpy(out.data(), src.data(), out.size());
  }
  return out;
}

}  // namespace detail

// Decode a blob whose header dtype matches T exactly.
template <typename T>
Grid<T> decode_raster(const RasterHeader& h, std::span<const std::uint8_t> blob) {
  if (h.dtype != dtype_of<T>()) {
    throw FormatError("expected dtype " + dtype_name(dtype_of<T>()) + ", header declares " + dtype_name(h.dtype));
  }
  if (blob.size() != h.blob_bytes()) {
    throw FormatError("blob holds " + std::to_string(blob.size()) + " bytes, dims " + to_string(h.dims) +
                      " need " + std::to_string(h.blob_bytes()));
  }
  Grid<T> g;
  g.dims = h.dims;
  g.spacing = h.spacing;
  detail::read_le(blob, g.values);
  return g;
}

template <typename T>
std::vector<std::uint8_t> encode_raster(const Grid<T>& g) {
  return detail::write_le(std::span<const T>(g.values));
}

template <typename T>
RasterHeader header_of(const Grid<T>& g) {
  return {g.dims, dtype_of<T>(), g.spacing};
}

// Intensity rasters are accepted at 8 or 16 bits and widened without rescaling.
struct IntensityVolume {
  Volume16 volume;
  DType source_dtype = DType::U16;
};

inline IntensityVolume decode_intensities(const RasterHeader& h, std::span<const std::uint8_t> blob) {
  IntensityVolume out;
  out.source_dtype = h.dtype;
  if (h.dtype == DType::U16) {
    out.volume = decode_raster<std::uint16_t>(h, blob);
  } else if (h.dtype == DType::U8) {
    const Volume8 v8 = decode_raster<std::uint8_t>(h, blob);
    out.volume.dims = v8.dims;
    out.volume.spacing = v8.spacing;
    out.volume.values.assign(v8.values.begin(), v8.values.end());
  } else {
    throw FormatError("intensity volumes must be u8 or u16, got " + dtype_name(h.dtype));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files: `<base>.json` sidecar + `<base>.raw` blob. Either file name, or the
// bare base, is accepted.

inline std::filesystem::path raster_base(const std::filesystem::path& p) {
  const auto ext = p.extension();
  if (ext == ".json" || ext == ".raw") return p.parent_path() / p.stem();
  return p;
}

inline std::filesystem::path with_suffix(const std::filesystem::path& base, const char* suffix) {
  return std::filesystem::path(base.string() + suffix);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + p.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline RasterHeader read_header(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(with_suffix(raster_base(path), ".json"));
  try {
    return header_from_json(nlohmann::json::parse(bytes.begin(), bytes.end()));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("sidecar is not JSON: ") + e.what());
  }
}

template <typename T>
Grid<T> load_raster(const std::filesystem::path& path) {
  const RasterHeader h = read_header(path);
  const auto blob = read_file_bytes(with_suffix(raster_base(path), ".raw"));
  return decode_raster<T>(h, blob);
}

inline IntensityVolume load_volume(const std::filesystem::path& path) {
  const RasterHeader h = read_header(path);
  const auto blob = read_file_bytes(with_suffix(raster_base(path), ".raw"));
  return decode_intensities(h, blob);
}

inline LabelMap load_labels(const std::filesystem::path& path) { return load_raster<Label>(path); }

template <typename T>
void save_raster(const Grid<T>& g, const std::filesystem::path& path) {
  const auto base = raster_base(path);
  const std::string header = to_json(header_of(g)).dump(2) + "\n";
  write_file_bytes(with_suffix(base, ".json"),
                   std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(header.data()), header.size()));
  write_file_bytes(with_suffix(base, ".raw"), encode_raster(g));
}

// Writes a 16-bit intensity volume back at its source width.
inline void save_volume(const IntensityVolume& v, const std::filesystem::path& path) {
  if (v.source_dtype == DType::U8) {
    Volume8 v8;
    v8.dims = v.volume.dims;
    v8.spacing = v.volume.spacing;
    v8.values.reserve(v.volume.size());
    for (auto s : v.volume.values) {
      if (s > 0xFF) throw FormatError("sample exceeds u8 range");
      v8.values.push_back(static_cast<std::uint8_t>(s));
    }
    save_raster(v8, path);
  } else {
    save_raster(v.volume, path);
  }
}

inline void save_labels(const LabelMap& m, const std::filesystem::path& path) { save_raster(m, path); }

}  // namespace seg3d
