#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"

namespace seg3d {

struct RleRun {
  Index start = 0;
  Index length = 0;
  Label label = 0;
  friend bool operator==(const RleRun&, const RleRun&) = default;
};

// Ordered, non-overlapping runs; adjacent runs never share a label.
// A full encoding covers [0, n); a sparse one (a delta) may leave gaps.
using RleRuns = std::vector<RleRun>;

// Throws CodecError unless `runs` is sorted, non-overlapping, non-empty per run,
// merged, and bounded by `n`.
inline void validate_runs(std::span<const RleRun> runs, std::size_t n) {
  std::uint64_t prev_end = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const RleRun& r = runs[i];
    if (r.length == 0) throw CodecError("run " + std::to_string(i) + " has zero length");
    if (i > 0 && r.start < prev_end) throw CodecError("run " + std::to_string(i) + " overlaps or is unsorted");
    if (i > 0 && r.start == prev_end && runs[i - 1].label == r.label) {
      throw CodecError("run " + std::to_string(i) + " is not merged with its predecessor");
    }
    prev_end = static_cast<std::uint64_t>(r.start) + r.length;
    if (prev_end > n) throw CodecError("run " + std::to_string(i) + " exceeds raster size");
  }
}

inline RleRuns rle_encode(std::span<const Label> labels) {
  RleRuns runs;
  for (std::size_t i = 0; i < labels.size();) {
    std::size_t j = i + 1;
    while (j < labels.size() && labels[j] == labels[i]) ++j;
    runs.push_back({static_cast<Index>(i), static_cast<Index>(j - i), labels[i]});
    i = j;
  }
  return runs;
}

inline RleRuns rle_encode(const LabelMap& m) { return rle_encode(std::span<const Label>(m.values)); }

// Runs must cover the raster exactly.
inline LabelMap rle_decode(std::span<const RleRun> runs, const Dims& dims) {
  validate_runs(runs, dims.size());
  LabelMap m(dims);
  std::size_t covered = 0;
  for (const RleRun& r : runs) {
    if (r.start != covered) throw CodecError("runs leave a gap at index " + std::to_string(covered));
    std::fill_n(m.values.begin() + r.start, r.length, r.label);
    covered += r.length;
  }
  if (covered != dims.size()) throw CodecError("runs do not cover the raster");
  return m;
}

// Overwrite the voxels named by sparse runs.
inline void rle_apply(std::span<const RleRun> runs, LabelMap& m) {
  validate_runs(runs, m.size());
  for (const RleRun& r : runs) std::fill_n(m.values.begin() + r.start, r.length, r.label);
}

// Sparse runs from (index, label) pairs sorted by index.
template <typename Pairs>
RleRuns rle_from_sorted(const Pairs& pairs) {
  RleRuns runs;
  for (const auto& [idx, label] : pairs) {
    if (!runs.empty() && runs.back().start + runs.back().length == idx && runs.back().label == label) {
      ++runs.back().length;
    } else {
      runs.push_back({static_cast<Index>(idx), 1, static_cast<Label>(label)});
    }
  }
  return runs;
}

}  // namespace seg3d
