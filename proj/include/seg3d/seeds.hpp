#pragma once

#include <algorithm>
#include <unordered_map>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"

namespace seg3d {

struct Seed {
  Index index = 0;
  Label label = 0;
  friend bool operator==(const Seed&, const Seed&) = default;
};

// Voxel -> label mapping that remembers insertion order.
class SeedSet {
 public:
  SeedSet() = default;
  SeedSet(std::initializer_list<Seed> seeds) {
    for (const Seed& s : seeds) add(s.index, s.label);
  }

  void add(Index index, Label label) {
    if (label == 0) throw ContractError("seed labels must be >= 1");
    if (pos_.contains(index)) throw ContractError("voxel " + std::to_string(index) + " is already a seed");
    pos_.emplace(index, seeds_.size());
    seeds_.push_back({index, label});
  }

  // Insert or overwrite.
  void assign(Index index, Label label) {
    if (auto it = pos_.find(index); it != pos_.end()) {
      if (label == 0) throw ContractError("seed labels must be >= 1");
      seeds_[it->second].label = label;
    } else {
      add(index, label);
    }
  }

  bool erase(Index index) {
    auto it = pos_.find(index);
    if (it == pos_.end()) return false;
    const std::size_t p = it->second;
    pos_.erase(it);
    seeds_.erase(seeds_.begin() + static_cast<std::ptrdiff_t>(p));
    for (std::size_t i = p; i < seeds_.size(); ++i) pos_[seeds_[i].index] = i;
    return true;
  }

  bool contains(Index index) const { return pos_.contains(index); }
  Label label_of(Index index) const {
    auto it = pos_.find(index);
    return it == pos_.end() ? 0 : seeds_[it->second].label;
  }

  bool empty() const noexcept { return seeds_.empty(); }
  std::size_t size() const noexcept { return seeds_.size(); }
  auto begin() const noexcept { return seeds_.begin(); }
  auto end() const noexcept { return seeds_.end(); }

  // Canonical order: by voxel index (labels are unique per voxel).
  std::vector<Seed> sorted() const {
    std::vector<Seed> out = seeds_;
    std::sort(out.begin(), out.end(), [](const Seed& a, const Seed& b) { return a.index < b.index; });
    return out;
  }

  friend bool operator==(const SeedSet& a, const SeedSet& b) { return a.sorted() == b.sorted(); }

 private:
  std::vector<Seed> seeds_;
  std::unordered_map<Index, std::size_t> pos_;
};

}  // namespace seg3d
