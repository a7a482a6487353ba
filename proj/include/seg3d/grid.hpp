#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "seg3d/error.hpp"

namespace seg3d {

using Index = std::uint32_t;
using Label = std::uint32_t;

inline constexpr Index kNoIndex = std::numeric_limits<Index>::max();

struct Coord {
  int x = 0;
  int y = 0;
  int z = 0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

struct Dims {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) * static_cast<std::size_t>(nz);
  }
  bool contains(int x, int y, int z) const noexcept {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  bool contains(const Coord& c) const noexcept { return contains(c.x, c.y, c.z); }
  bool valid() const noexcept { return nx > 0 && ny > 0 && nz > 0; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

inline Index linear_index(const Dims& d, int x, int y, int z) {
  if (!d.contains(x, y, z)) {
    throw BoundsError("coordinate (" + std::to_string(x) + "," + std::to_string(y) + "," +
                      std::to_string(z) + ") outside " + to_string(d));
  }
  return static_cast<Index>(x + static_cast<std::size_t>(d.nx) * (y + static_cast<std::size_t>(d.ny) * z));
}

inline Index linear_index(const Dims& d, const Coord& c) { return linear_index(d, c.x, c.y, c.z); }

inline Coord coord_of(const Dims& d, Index i) {
  if (i >= d.size()) throw BoundsError("index " + std::to_string(i) + " outside " + to_string(d));
  const auto plane = static_cast<Index>(d.nx) * static_cast<Index>(d.ny);
  Coord c;
  c.z = static_cast<int>(i / plane);
  const Index r = i % plane;
  c.y = static_cast<int>(r / static_cast<Index>(d.nx));
  c.x = static_cast<int>(r % static_cast<Index>(d.nx));
  return c;
}

// Face neighbors of a voxel in the fixed order -x, +x, -y, +y, -z, +z.
struct Neighbors {
  std::array<Index, 6> index{};
  int count = 0;

  const Index* begin() const noexcept { return index.data(); }
  const Index* end() const noexcept { return index.data() + count; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(count); }
};

inline Neighbors neighbors6(const Dims& d, Index i) {
  const Coord c = coord_of(d, i);
  const Index sx = 1;
  const Index sy = static_cast<Index>(d.nx);
  const Index sz = static_cast<Index>(d.nx) * static_cast<Index>(d.ny);
  Neighbors n;
  if (c.x > 0) n.index[n.count++] = i - sx;
  if (c.x + 1 < d.nx) n.index[n.count++] = i + sx;
  if (c.y > 0) n.index[n.count++] = i - sy;
  if (c.y + 1 < d.ny) n.index[n.count++] = i + sy;
  if (c.z > 0) n.index[n.count++] = i - sz;
  if (c.z + 1 < d.nz) n.index[n.count++] = i + sz;
  return n;
}

// Same set as neighbors6, sorted by linear index (-z, -y, -x, +x, +y, +z).
inline Neighbors neighbors6_ascending(const Dims& d, Index i) {
  const Coord c = coord_of(d, i);
  const Index sy = static_cast<Index>(d.nx);
  const Index sz = static_cast<Index>(d.nx) * static_cast<Index>(d.ny);
  Neighbors n;
  if (c.z > 0) n.index[n.count++] = i - sz;
  if (c.y > 0) n.index[n.count++] = i - sy;
  if (c.x > 0) n.index[n.count++] = i - 1;
  if (c.x + 1 < d.nx) n.index[n.count++] = i + 1;
  if (c.y + 1 < d.ny) n.index[n.count++] = i + sy;
  if (c.z + 1 < d.nz) n.index[n.count++] = i + sz;
  return n;
}

inline bool are_adjacent(const Dims& d, Index a, Index b) {
  for (Index n : neighbors6(d, a)) {
    if (n == b) return true;
  }
  return false;
}

struct Spacing {
  double sx = 1.0;
  double sy = 1.0;
  double sz = 1.0;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

// Dense 3D raster in x-fastest order.
template <typename T>
struct Grid {
  using value_type = T;

  Dims dims;
  std::vector<T> values;
  Spacing spacing;

  Grid() = default;
  explicit Grid(Dims d, T fill = T{}) : dims(d), values(d.size(), fill) {}
  Grid(Dims d, std::vector<T> v) : dims(d), values(std::move(v)) {
    if (values.size() != dims.size()) {
      throw FormatError("raster of " + std::to_string(values.size()) + " samples does not match dims " +
                        to_string(dims));
    }
  }

  std::size_t size() const noexcept { return values.size(); }
  T& operator[](Index i) { return values[i]; }
  const T& operator[](Index i) const { return values[i]; }
  T& at(int x, int y, int z) { return values[linear_index(dims, x, y, z)]; }
  const T& at(int x, int y, int z) const { return values[linear_index(dims, x, y, z)]; }

  friend bool operator==(const Grid& a, const Grid& b) { return a.dims == b.dims && a.values == b.values; }
};

using Volume8 = Grid<std::uint8_t>;
using Volume16 = Grid<std::uint16_t>;
using LabelMap = Grid<Label>;

// Axis-aligned box of voxels: [origin, origin + extent).
struct Box {
  Coord origin;
  Dims extent;

  bool contains(const Coord& c) const noexcept {
    return c.x >= origin.x && c.y >= origin.y && c.z >= origin.z && c.x < origin.x + extent.nx &&
           c.y < origin.y + extent.ny && c.z < origin.z + extent.nz;
  }
  Coord end() const noexcept { return {origin.x + extent.nx, origin.y + extent.ny, origin.z + extent.nz}; }
  bool empty() const noexcept { return !extent.valid(); }
  friend bool operator==(const Box&, const Box&) = default;
};

inline Box intersect(const Box& a, const Box& b) {
  const Coord ea = a.end();
  const Coord eb = b.end();
  Box r;
  r.origin = {std::max(a.origin.x, b.origin.x), std::max(a.origin.y, b.origin.y), std::max(a.origin.z, b.origin.z)};
  r.extent = {std::max(0, std::min(ea.x, eb.x) - r.origin.x), std::max(0, std::min(ea.y, eb.y) - r.origin.y),
              std::max(0, std::min(ea.z, eb.z) - r.origin.z)};
  return r;
}

// Copy the sub-raster under `box` (in `src` coordinates).
template <typename T>
Grid<T> crop(const Grid<T>& src, const Box& box) {
  const Coord e = box.end();
  if (!src.dims.contains(box.origin) || !src.dims.contains(e.x - 1, e.y - 1, e.z - 1)) {
    throw BoundsError("crop box outside raster " + to_string(src.dims));
  }
  Grid<T> out(box.extent);
  out.spacing = src.spacing;
  std::size_t k = 0;
  for (int z = box.origin.z; z < e.z; ++z) {
    for (int y = box.origin.y; y < e.y; ++y) {
      const Index row = linear_index(src.dims, box.origin.x, y, z);
      for (int x = 0; x < box.extent.nx; ++x) out.values[k++] = src.values[row + x];
    }
  }
  return out;
}

}  // namespace seg3d
