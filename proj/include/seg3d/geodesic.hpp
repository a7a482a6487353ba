#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"
#include "seg3d/seeds.hpp"

namespace seg3d {

// Voxels of a polyline: each segment is walked along its dominant axis with
// the other two coordinates rounded (halves away from zero), which yields a
// 26-connected chain containing both endpoints.
inline std::vector<Index> rasterize_polyline(const Dims& d, const std::vector<Coord>& polyline) {
  if (polyline.empty()) throw ParameterError("scribble polyline is empty");
  for (const Coord& c : polyline) {
    if (!d.contains(c.x, c.y, c.z)) {
      throw BoundsError("scribble point (" + std::to_string(c.x) + "," + std::to_string(c.y) + "," +
                        std::to_string(c.z) + ") outside " + to_string(d));
    }
  }
  // round(k * delta / n) for n > 0
  auto step = [](int k, int delta, int n) {
    const long num = 2L * k * delta;
    const long den = 2L * n;
    return static_cast<int>(num >= 0 ? (num + n) / den : -((-num + n) / den));
  };
  std::vector<Index> out;
  out.push_back(linear_index(d, polyline[0].x, polyline[0].y, polyline[0].z));
  for (std::size_t s = 1; s < polyline.size(); ++s) {
    const Coord a = polyline[s - 1], b = polyline[s];
    const int dx = b.x - a.x, dy = b.y - a.y, dz = b.z - a.z;
    const int n = std::max({std::abs(dx), std::abs(dy), std::abs(dz)});
    for (int k = 1; k <= n; ++k) {
      out.push_back(linear_index(d, a.x + step(k, dx, n), a.y + step(k, dy, n), a.z + step(k, dz, n)));
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

struct GeodesicCenter {
  Index voxel = kNoIndex;
  std::uint32_t depth = 0;            // BFS distance to the region boundary
  std::vector<std::string> warnings;  // dropped components
};

namespace detail {

// 6-connected components of a voxel set, largest first (ties: smallest index).
inline std::vector<std::vector<Index>> components(const Dims& d, const std::vector<Index>& voxels) {
  std::vector<Index> sorted = voxels;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  auto member = [&](Index i) { return std::binary_search(sorted.begin(), sorted.end(), i); };
  std::vector<char> seen(sorted.size(), 0);
  auto slot = [&](Index i) { return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), i) - sorted.begin()); };
  std::vector<std::vector<Index>> comps;
  for (std::size_t k = 0; k < sorted.size(); ++k) {
    if (seen[k]) continue;
    std::vector<Index> comp{sorted[k]};
    seen[k] = 1;
    for (std::size_t h = 0; h < comp.size(); ++h) {
      for (Index n : neighbors6(d, comp[h])) {
        if (member(n) && !seen[slot(n)]) {
          seen[slot(n)] = 1;
          comp.push_back(n);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    comps.push_back(std::move(comp));
  }
  std::stable_sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
  return comps;
}

}  // namespace detail

// Deepest voxel of a region: multi-source BFS from the region boundary
// (voxels with a 6-neighbor outside the region or outside the volume).
// Among equally deep voxels the one closest to their common centroid wins,
// then the smallest index, so symmetric regions resolve to their middle.
inline GeodesicCenter geodesic_center(const Dims& d, const std::vector<Index>& region) {
  if (region.empty()) throw ContractError("geodesic center of an empty region");
  auto comps = detail::components(d, region);
  GeodesicCenter out;
  for (std::size_t k = 1; k < comps.size(); ++k) {
    out.warnings.push_back("dropped disconnected component of " + std::to_string(comps[k].size()) +
                           " voxels starting at " + std::to_string(comps[k].front()));
  }
  const std::vector<Index>& comp = comps.front();
  auto slot = [&](Index i) -> std::size_t {
    auto it = std::lower_bound(comp.begin(), comp.end(), i);
    return it != comp.end() && *it == i ? static_cast<std::size_t>(it - comp.begin()) : comp.size();
  };

  constexpr std::uint32_t kUnset = 0xFFFFFFFFu;
  std::vector<std::uint32_t> dist(comp.size(), kUnset);
  std::queue<std::size_t> q;
  for (std::size_t k = 0; k < comp.size(); ++k) {
    const Neighbors nb = neighbors6(d, comp[k]);
    bool boundary = nb.size() < 6;
    for (Index n : nb) boundary = boundary || slot(n) == comp.size();
    if (boundary) {
      dist[k] = 0;
      q.push(k);
    }
  }
  while (!q.empty()) {
    const std::size_t k = q.front();
    q.pop();
    for (Index n : neighbors6(d, comp[k])) {
      const std::size_t s = slot(n);
      if (s < comp.size() && dist[s] == kUnset) {
        dist[s] = dist[k] + 1;
        q.push(s);
      }
    }
  }

  const std::uint32_t best = *std::max_element(dist.begin(), dist.end());
  std::vector<Coord> cand;
  std::vector<Index> cand_idx;
  long sx = 0, sy = 0, sz = 0;
  for (std::size_t k = 0; k < comp.size(); ++k) {
    if (dist[k] != best) continue;
    const Coord c = coord_of(d, comp[k]);
    cand.push_back(c);
    cand_idx.push_back(comp[k]);
    sx += c.x;
    sy += c.y;
    sz += c.z;
  }
  // squared distance to the centroid, scaled by count^2 to stay integral
  const long m = static_cast<long>(cand.size());
  long best_d = -1;
  for (std::size_t k = 0; k < cand.size(); ++k) {
    const long ex = m * cand[k].x - sx, ey = m * cand[k].y - sy, ez = m * cand[k].z - sz;
    const long dd = ex * ex + ey * ey + ez * ez;
    if (best_d < 0 || dd < best_d) {
      best_d = dd;
      out.voxel = cand_idx[k];
    }
  }
  out.depth = best;
  return out;
}

struct PresegmentationSeeds {
  SeedSet seeds;
  std::vector<std::string> warnings;
};

// One seed per nonzero label, at the geodesic center of its region.
inline PresegmentationSeeds init_from_presegmentation(const LabelMap& labels) {
  std::map<Label, std::vector<Index>> regions;
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels.values[i] != 0) regions[labels.values[i]].push_back(i);
  }
  PresegmentationSeeds out;
  for (const auto& [label, voxels] : regions) {
    GeodesicCenter c = geodesic_center(labels.dims, voxels);
    out.seeds.add(c.voxel, label);
    for (auto& w : c.warnings) out.warnings.push_back("label " + std::to_string(label) + ": " + w);
  }
  return out;
}

}  // namespace seg3d
