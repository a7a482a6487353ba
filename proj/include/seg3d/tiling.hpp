#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"

namespace seg3d {

struct TileSpec {
  std::uint32_t id = 0;
  Coord grid;   // position in the tile lattice
  Box core;     // counted in results
  Box context;  // core plus display border, clamped to the volume
};

struct TilePlan {
  Dims dims;
  int tile_size = 0;
  double overlap_fraction = 0.1;
  double border_fraction = 0.1;
  int overlap_voxels = 0;
  int border_voxels = 0;
  int stride = 0;
  std::array<int, 3> counts{0, 0, 0};
  std::vector<TileSpec> tiles;  // x-fastest over the lattice

  std::size_t size() const noexcept { return tiles.size(); }
  const TileSpec& tile(std::uint32_t id) const {
    if (id >= tiles.size()) throw NotFoundError("tile " + std::to_string(id) + " not in plan of " + std::to_string(tiles.size()));
    return tiles[id];
  }
};

namespace detail {

struct AxisTiles {
  std::vector<int> origin;
  std::vector<int> extent;
};

inline AxisTiles plan_axis(int D, int T, int stride) {
  AxisTiles a;
  if (D <= T) {
    a.origin = {0};
    a.extent = {D};
    return a;
  }
  const int count = (D - T + stride - 1) / stride + 1;
  for (int i = 0; i < count; ++i) {
    a.origin.push_back(i + 1 == count ? D - T : i * stride);
    a.extent.push_back(T);
  }
  return a;
}

inline nlohmann::json box_json(const Box& b) {
  return {{"origin", {b.origin.x, b.origin.y, b.origin.z}}, {"extent", {b.extent.nx, b.extent.ny, b.extent.nz}}};
}

}  // namespace detail

inline TilePlan plan_tiles(Dims dims, int tile_size, double overlap_fraction = 0.1, double border_fraction = 0.1) {
  if (!dims.valid()) throw ParameterError("volume dims must be positive, got " + to_string(dims));
  if (tile_size < 1) throw ParameterError("tile size must be >= 1");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0)) throw ParameterError("overlap fraction must be in [0,1)");
  if (!(border_fraction >= 0.0)) throw ParameterError("border fraction must be >= 0");
  TilePlan p;
  p.dims = dims;
  p.tile_size = tile_size;
  p.overlap_fraction = overlap_fraction;
  p.border_fraction = border_fraction;
  p.overlap_voxels = static_cast<int>(std::lround(overlap_fraction * tile_size));
  p.border_voxels = static_cast<int>(std::lround(border_fraction * tile_size));
  p.stride = tile_size - p.overlap_voxels;
  if (p.stride <= 0) {
    throw ParameterError("degenerate stride: tile size " + std::to_string(tile_size) + " with " +
                         std::to_string(p.overlap_voxels) + " overlap voxels");
  }
  const detail::AxisTiles ax = detail::plan_axis(dims.nx, tile_size, p.stride);
  const detail::AxisTiles ay = detail::plan_axis(dims.ny, tile_size, p.stride);
  const detail::AxisTiles az = detail::plan_axis(dims.nz, tile_size, p.stride);
  p.counts = {static_cast<int>(ax.origin.size()), static_cast<int>(ay.origin.size()), static_cast<int>(az.origin.size())};
  const Box whole{{0, 0, 0}, dims};
  const int b = p.border_voxels;
  for (int k = 0; k < p.counts[2]; ++k) {
    for (int j = 0; j < p.counts[1]; ++j) {
      for (int i = 0; i < p.counts[0]; ++i) {
        TileSpec t;
        t.id = static_cast<std::uint32_t>(p.tiles.size());
        t.grid = {i, j, k};
        t.core = {{ax.origin[i], ay.origin[j], az.origin[k]}, {ax.extent[i], ay.extent[j], az.extent[k]}};
        const Box grown{{t.core.origin.x - b, t.core.origin.y - b, t.core.origin.z - b},
                        {t.core.extent.nx + 2 * b, t.core.extent.ny + 2 * b, t.core.extent.nz + 2 * b}};
        t.context = intersect(grown, whole);
        p.tiles.push_back(t);
      }
    }
  }
  return p;
}

inline nlohmann::json to_json(const TilePlan& p) {
  nlohmann::json tiles = nlohmann::json::array();
  for (const TileSpec& t : p.tiles) {
    tiles.push_back({{"id", t.id},
                     {"grid", {t.grid.x, t.grid.y, t.grid.z}},
                     {"core", detail::box_json(t.core)},
                     {"context", detail::box_json(t.context)}});
  }
  return {{"dims", {p.dims.nx, p.dims.ny, p.dims.nz}},
          {"tile_size", p.tile_size},
          {"overlap_fraction", p.overlap_fraction},
          {"border_fraction", p.border_fraction},
          {"overlap_voxels", p.overlap_voxels},
          {"border_voxels", p.border_voxels},
          {"stride", p.stride},
          {"counts", p.counts},
          {"tile_count", p.tiles.size()},
          {"tiles", std::move(tiles)}};
}

// Rebuild a plan from its JSON parameters; the boxes are recomputed and must
// agree with the ones stored.
inline TilePlan plan_from_json(const nlohmann::json& j) {
  try {
    const auto d = j.at("dims");
    TilePlan p = plan_tiles({d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()}, j.at("tile_size").get<int>(),
                            j.at("overlap_fraction").get<double>(), j.at("border_fraction").get<double>());
    if (j.contains("tiles") && to_json(p)["tiles"] != j["tiles"]) {
      throw FormatError("tile boxes in plan do not match its parameters");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed tile plan: ") + e.what());
  }
}

template <typename T>
struct TileBlock {
  Grid<T> volume;     // context box contents
  Coord core_offset;  // core origin inside the block
  Dims core_dims;
};

template <typename T>
TileBlock<T> extract_tile(const Grid<T>& volume, const TilePlan& plan, std::uint32_t id) {
  if (volume.dims != plan.dims) throw ContractError("volume " + to_string(volume.dims) + " does not match plan " + to_string(plan.dims));
  const TileSpec& t = plan.tile(id);
  TileBlock<T> out;
  out.volume = crop(volume, t.context);
  out.core_offset = {t.core.origin.x - t.context.origin.x, t.core.origin.y - t.context.origin.y,
                     t.core.origin.z - t.context.origin.z};
  out.core_dims = t.core.extent;
  return out;
}

// Restrict a label map over a tile's context box to its core box.
inline LabelMap crop_context(const LabelMap& labels, const TilePlan& plan, std::uint32_t id) {
  const TileSpec& t = plan.tile(id);
  if (labels.dims != t.context.extent) {
    throw ContractError("tile " + std::to_string(id) + " labels are " + to_string(labels.dims) + ", context is " +
                        to_string(t.context.extent));
  }
  const Box local{{t.core.origin.x - t.context.origin.x, t.core.origin.y - t.context.origin.y,
                   t.core.origin.z - t.context.origin.z},
                  t.core.extent};
  return crop(labels, local);
}

struct StitchResult {
  LabelMap labels;
  std::size_t label_count = 0;
  std::size_t matches = 0;             // label pairs joined across overlaps
  std::vector<std::uint32_t> missing;  // tiles without a result (partial stitch only)
};

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  bool unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (b < a) std::swap(a, b);
    parent_[b] = a;
    return true;
  }

 private:
  std::vector<std::uint32_t> parent_;
};

}  // namespace detail

// Assemble per-tile core label maps into one labeling. Labels of overlapping
// tiles are identified when their Jaccard index inside the shared core region
// reaches `jaccard_threshold`; each voxel is written by the covering tile
// with the nearest core center (ties: lower tile id). Output labels are
// compacted to 1..L in scan order.
inline StitchResult stitch(const TilePlan& plan, const std::map<std::uint32_t, LabelMap>& cores, bool partial = false,
                           double jaccard_threshold = 0.5) {
  StitchResult res;
  for (const TileSpec& t : plan.tiles) {
    auto it = cores.find(t.id);
    if (it == cores.end()) {
      res.missing.push_back(t.id);
    } else if (it->second.dims != t.core.extent) {
      throw ContractError("tile " + std::to_string(t.id) + " result is " + to_string(it->second.dims) +
                          ", core is " + to_string(t.core.extent));
    }
  }
  for (const auto& [id, _] : cores) plan.tile(id);
  if (!res.missing.empty() && !partial) {
    std::string list;
    for (auto id : res.missing) list += (list.empty() ? "" : ",") + std::to_string(id);
    throw StateError("cannot stitch: missing tile results [" + list + "]");
  }

  // provisional global ids: base[t] + local label
  std::vector<std::uint32_t> base(plan.size() + 1, 0);
  for (std::uint32_t t = 0; t < plan.size(); ++t) {
    Label mx = 0;
    if (auto it = cores.find(t); it != cores.end()) {
      for (Label l : it->second.values) mx = std::max(mx, l);
    }
    base[t + 1] = base[t] + mx;
  }
  detail::UnionFind uf(base.back() + 1);
  auto gid = [&](std::uint32_t t, Label l) { return l == 0 ? 0u : base[t] + l; };
  auto local_label = [&](std::uint32_t t, int x, int y, int z) {
    const TileSpec& s = plan.tiles[t];
    return cores.at(t).at(x - s.core.origin.x, y - s.core.origin.y, z - s.core.origin.z);
  };

  for (const auto& [a, la] : cores) {
    for (const auto& [b, lb] : cores) {
      if (b <= a) continue;
      const Box ov = intersect(plan.tiles[a].core, plan.tiles[b].core);
      if (ov.empty()) continue;
      std::map<std::pair<Label, Label>, std::size_t> both;
      std::unordered_map<Label, std::size_t> na, nb;
      const Coord e = ov.end();
      for (int z = ov.origin.z; z < e.z; ++z)
        for (int y = ov.origin.y; y < e.y; ++y)
          for (int x = ov.origin.x; x < e.x; ++x) {
            const Label p = local_label(a, x, y, z), q = local_label(b, x, y, z);
            ++na[p];
            ++nb[q];
            if (p != 0 && q != 0) ++both[{p, q}];
          }
      for (const auto& [pq, inter] : both) {
        const double uni = static_cast<double>(na[pq.first] + nb[pq.second] - inter);
        if (static_cast<double>(inter) / uni >= jaccard_threshold) {
          if (uf.unite(gid(a, pq.first), gid(b, pq.second))) ++res.matches;
        }
      }
    }
  }

  // covering tiles per axis coordinate, nearest core center first
  std::array<std::vector<std::vector<int>>, 3> cover;
  const int n[3] = {plan.dims.nx, plan.dims.ny, plan.dims.nz};
  for (int axis = 0; axis < 3; ++axis) {
    cover[axis].resize(n[axis]);
    for (int c = 0; c < n[axis]; ++c) {
      for (int i = 0; i < plan.counts[axis]; ++i) {
        const TileSpec& t = plan.tiles[axis == 0 ? i : axis == 1 ? i * plan.counts[0] : i * plan.counts[0] * plan.counts[1]];
        const int o = axis == 0 ? t.core.origin.x : axis == 1 ? t.core.origin.y : t.core.origin.z;
        const int w = axis == 0 ? t.core.extent.nx : axis == 1 ? t.core.extent.ny : t.core.extent.nz;
        if (c >= o && c < o + w) cover[axis][c].push_back(i);
      }
    }
  }
  auto center2 = [&](const TileSpec& t, int axis) {
    return axis == 0 ? 2 * t.core.origin.x + t.core.extent.nx - 1
           : axis == 1 ? 2 * t.core.origin.y + t.core.extent.ny - 1
                       : 2 * t.core.origin.z + t.core.extent.nz - 1;
  };

  res.labels = LabelMap(plan.dims, 0);
  std::unordered_map<std::uint32_t, Label> compact;
  Index k = 0;
  for (int z = 0; z < plan.dims.nz; ++z)
    for (int y = 0; y < plan.dims.ny; ++y)
      for (int x = 0; x < plan.dims.nx; ++x, ++k) {
        long best = -1;
        std::uint32_t owner = 0;
        for (int iz : cover[2][z])
          for (int iy : cover[1][y])
            for (int ix : cover[0][x]) {
              const auto t = static_cast<std::uint32_t>(ix + plan.counts[0] * (iy + plan.counts[1] * iz));
              if (!cores.contains(t)) continue;
              const TileSpec& s = plan.tiles[t];
              const long dx = 2 * x - center2(s, 0), dy = 2 * y - center2(s, 1), dz = 2 * z - center2(s, 2);
              const long d2 = dx * dx + dy * dy + dz * dz;
              if (best < 0 || d2 < best || (d2 == best && t < owner)) {
                best = d2;
                owner = t;
              }
            }
        if (best < 0) continue;
        const std::uint32_t g = gid(owner, local_label(owner, x, y, z));
        if (g == 0) continue;
        const std::uint32_t r = uf.find(g);
        auto [it, fresh] = compact.emplace(r, static_cast<Label>(compact.size() + 1));
        res.labels.values[k] = it->second;
      }
  res.label_count = compact.size();
  return res;
}

}  // namespace seg3d
