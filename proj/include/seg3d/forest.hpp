#pragma once

#include <cstdint>
#include <limits>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"
#include "seg3d/rle.hpp"
#include "seg3d/seeds.hpp"

namespace seg3d {

using Cost = std::uint32_t;
inline constexpr Cost kInfiniteCost = std::numeric_limits<Cost>::max();

// Optimum-path forest over the 6-connected voxel graph. kNoIndex marks
// "no predecessor" (seeds, unconquered voxels) and "no root" (unconquered).
struct Forest {
  std::vector<Cost> cost;
  std::vector<Index> pred;
  std::vector<Index> root;
  LabelMap label;

  Forest() = default;
  explicit Forest(Dims d) : cost(d.size(), kInfiniteCost), pred(d.size(), kNoIndex), root(d.size(), kNoIndex), label(d) {}

  const Dims& dims() const noexcept { return label.dims; }
  std::size_t size() const noexcept { return cost.size(); }
  bool is_seed(Index i) const { return root[i] == i; }

  friend bool operator==(const Forest&, const Forest&) = default;
};

// Max-arc weight of the directed arc s -> t: the destination intensity.
template <typename Sample>
Cost arc_weight(const Grid<Sample>& volume, Index s, Index t) {
  if (!are_adjacent(volume.dims, s, t)) {
    throw ContractError("voxels " + std::to_string(s) + " and " + std::to_string(t) + " are not 6-adjacent");
  }
  return static_cast<Cost>(volume.values[t]);
}

struct SeedEdit {
  SeedSet additions;
  std::vector<Index> removals;

  bool empty() const noexcept { return additions.empty() && removals.empty(); }
};

struct ForestDelta {
  RleRuns changed;               // new labels of voxels whose label changed
  std::size_t reevaluated = 0;   // voxels reset, queued or conquered by the update

  bool empty() const noexcept { return changed.empty(); }
};

// Serialize forest maps as u32 rasters (kNoIndex / kInfiniteCost as sentinels).
inline LabelMap forest_raster(const Forest& f, const std::vector<std::uint32_t>& field) {
  return LabelMap(f.dims(), field);
}

}  // namespace seg3d
