#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <utility>
#include <vector>

#include "seg3d/error.hpp"
#include "seg3d/forest.hpp"
#include "seg3d/grid.hpp"
#include "seg3d/rle.hpp"
#include "seg3d/seeds.hpp"

namespace seg3d {

namespace detail {

// Integer bucket queue with FIFO order inside each bucket. Priorities pushed
// must never be below the bucket currently being drained.
class BucketQueue {
 public:
  explicit BucketQueue(std::size_t max_priority) : buckets_(max_priority + 1) {}

  void push(Index v, Cost priority) {
    buckets_[priority].push_back(v);
    ++size_;
  }

  bool pop(Index& v, Cost& priority) {
    while (size_ > 0) {
      auto& b = buckets_[current_];
      if (head_ < b.size()) {
        v = b[head_++];
        priority = static_cast<Cost>(current_);
        --size_;
        return true;
      }
      b.clear();
      b.shrink_to_fit();
      head_ = 0;
      ++current_;
    }
    return false;
  }

 private:
  std::vector<std::vector<Index>> buckets_;
  std::size_t current_ = 0;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

// Binary min-heap over voxel ids with decrease-key and removal. The ordering
// is supplied per call so the heap holds no reference to its owner.
class IndexedHeap {
 public:
  explicit IndexedHeap(std::size_t n) : pos_(n, kNoIndex) {}

  bool empty() const noexcept { return heap_.empty(); }
  bool contains(Index v) const noexcept { return pos_[v] != kNoIndex; }
  Index top() const noexcept { return heap_.front(); }

  template <typename Less>
  void push_or_update(Index v, const Less& less) {
    if (contains(v)) {
      sift_up(pos_[v], less);
      sift_down(pos_[v], less);
    } else {
      pos_[v] = static_cast<Index>(heap_.size());
      heap_.push_back(v);
      sift_up(heap_.size() - 1, less);
    }
  }

  template <typename Less>
  Index pop(const Less& less) {
    const Index top = heap_.front();
    remove_at(0, less);
    return top;
  }

  template <typename Less>
  void remove(Index v, const Less& less) {
    if (contains(v)) remove_at(pos_[v], less);
  }

 private:
  template <typename Less>
  void remove_at(std::size_t i, const Less& less) {
    const Index v = heap_[i];
    const std::size_t last = heap_.size() - 1;
    pos_[v] = kNoIndex;
    if (i == last) {
      heap_.pop_back();
      return;
    }
    const Index moved = heap_[last];
    heap_.pop_back();
    place(i, moved);
    sift_up(i, less);
    sift_down(pos_[moved], less);
  }

  void place(std::size_t i, Index v) {
    heap_[i] = v;
    pos_[v] = static_cast<Index>(i);
  }

  template <typename Less>
  void sift_up(std::size_t i, const Less& less) {
    const Index v = heap_[i];
    while (i > 0) {
      const std::size_t parent = (i - 1) / 2;
      if (!less(v, heap_[parent])) break;
      place(i, heap_[parent]);
      i = parent;
    }
    place(i, v);
  }

  template <typename Less>
  void sift_down(std::size_t i, const Less& less) {
    const Index v = heap_[i];
    const std::size_t n = heap_.size();
    for (;;) {
      std::size_t child = 2 * i + 1;
      if (child >= n) break;
      if (child + 1 < n && less(heap_[child + 1], heap_[child])) ++child;
      if (!less(heap_[child], v)) break;
      place(i, heap_[child]);
      i = child;
    }
    place(i, v);
  }

  std::vector<Index> heap_;
  std::vector<Index> pos_;
};

}  // namespace detail

// Seeded watershed forest with differential seed editing.
//
// Path cost is the maximum destination intensity along the path (0 for a
// seed's trivial path). Among equal-cost paths the forest is made unique by
// the lexicographic key
//
//     key(t) = (cost(t), key(pred(t)), t),   key(seed s) = (-1, s),
//
// i.e. "first conquest wins": a voxel keeps the predecessor that was itself
// finalized earliest. A FIFO bucket queue with seeds pushed in index order and
// neighbors relaxed in index order pops voxels in exactly this key order, so
// a fresh run and any sequence of differential edits reach the same forest.
template <typename Sample>
class WatershedForest {
 public:
  using Volume = Grid<Sample>;

  explicit WatershedForest(std::shared_ptr<const Volume> volume)
      : volume_(std::move(volume)),
        forest_(volume_->dims),
        seed_label_(volume_->size(), 0),
        finalized_(volume_->size(), 0),
        touched_(volume_->size(), 0),
        rank_(volume_->size(), kNoRank),
        popped_(volume_->size(), 0),
        seq_(volume_->size(), 0),
        pos_(volume_->size(), 0),
        heap_(volume_->size()) {}

  WatershedForest(std::shared_ptr<const Volume> volume, const SeedSet& seeds) : WatershedForest(std::move(volume)) {
    recompute(seeds);
  }

  // Adopt a complete forest produced earlier by this engine for this volume.
  WatershedForest(std::shared_ptr<const Volume> volume, Forest forest) : WatershedForest(std::move(volume)) {
    if (forest.dims() != volume_->dims || forest.size() != volume_->size()) {
      throw ContractError("forest dims do not match the volume");
    }
    forest_ = std::move(forest);
    for (Index i = 0; i < forest_.size(); ++i) {
      if (forest_.root[i] == i) {
        seed_label_[i] = forest_.label[i];
        ++seed_count_;
      }
      finalized_[i] = forest_.cost[i] != kInfiniteCost ? 1 : 0;
    }
    rerank();
  }

  const Forest& forest() const noexcept { return forest_; }
  const LabelMap& labels() const noexcept { return forest_.label; }
  const Volume& volume() const noexcept { return *volume_; }
  std::size_t seed_count() const noexcept { return seed_count_; }
  bool is_seed(Index i) const { return seed_label_[i] != 0; }
  Label seed_label(Index i) const { return seed_label_[i]; }

  SeedSet seeds() const {
    SeedSet s;
    for (Index i = 0; i < seed_label_.size(); ++i) {
      if (seed_label_[i] != 0) s.add(i, seed_label_[i]);
    }
    return s;
  }

  // Voxel costs in the order they left the queue during the last run
  // (recorded only while `set_trace(true)`).
  void set_trace(bool on) { trace_ = on; }
  const std::vector<Cost>& pop_trace() const noexcept { return pop_trace_; }

  // Back to the unsegmented state: no seeds, every voxel unconquered.
  void clear() {
    forest_ = Forest(volume_->dims);
    std::fill(seed_label_.begin(), seed_label_.end(), 0);
    std::fill(finalized_.begin(), finalized_.end(), 0);
    std::fill(rank_.begin(), rank_.end(), kNoRank);
    order_.clear();
    seed_count_ = 0;
  }

  // Full computation from scratch.
  void recompute(const SeedSet& seeds) {
    if (seeds.empty()) throw ContractError("seed competition needs at least one seed");
    for (const Seed& s : seeds) {
      if (s.index >= volume_->size()) throw BoundsError("seed index " + std::to_string(s.index) + " outside volume");
    }
    clear();
    begin_update();
    const auto& I = volume_->values;
    Sample max_sample = 0;
    for (Sample v : I) max_sample = std::max(max_sample, v);
    detail::BucketQueue queue(static_cast<std::size_t>(max_sample));

    for (const Seed& s : seeds.sorted()) {
      make_seed(s.index, s.label);
      queue.push(s.index, 0);
    }
    Index v;
    Cost c;
    while (queue.pop(v, c)) {
      if (finalized_[v] || forest_.cost[v] != c) continue;
      finalized_[v] = 1;
      rank_[v] = static_cast<std::uint32_t>(order_.size());  // pops come in key order
      order_.push_back(v);
      if (trace_) pop_trace_.push_back(c);
      for (Index n : neighbors6_ascending(volume_->dims, v)) {
        if (finalized_[n]) continue;
        const Cost cand = std::max(c, static_cast<Cost>(I[n]));
        if (cand < forest_.cost[n]) {
          forest_.cost[n] = cand;
          forest_.pred[n] = v;
          forest_.root[n] = forest_.root[v];
          forest_.label[n] = forest_.label[v];
          queue.push(n, cand);
        }
      }
    }
  }

  // Differential update: reset the trees of removed seeds (and the subtrees
  // of any voxel whose key improves), then let the frontier and the added
  // seeds compete again.
  ForestDelta apply(const SeedEdit& edit) {
    for (Index r : edit.removals) {
      if (r >= volume_->size()) throw BoundsError("removal index " + std::to_string(r) + " outside volume");
      if (!is_seed(r)) throw ContractError("voxel " + std::to_string(r) + " is not a seed");
      if (edit.additions.contains(r)) throw ContractError("voxel " + std::to_string(r) + " is both added and removed");
    }
    {
      std::vector<Index> sorted = edit.removals;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ContractError("duplicate seed removal");
      }
    }
    for (const Seed& s : edit.additions) {
      if (s.index >= volume_->size()) throw BoundsError("seed index " + std::to_string(s.index) + " outside volume");
      if (is_seed(s.index)) throw ContractError("voxel " + std::to_string(s.index) + " is already a seed");
    }
    if (seed_count_ - edit.removals.size() + edit.additions.size() == 0) {
      throw ContractError("edit would leave no seeds");
    }

    begin_update();
    for (Index r : edit.removals) {
      seed_label_[r] = 0;
      --seed_count_;
      reset_subtree(r);
    }
    for (const Seed& s : edit.additions.sorted()) {
      if (forest_.cost[s.index] != kInfiniteCost) reset_subtree(s.index);
      make_seed(s.index, s.label);
      touch(s.index);
      heap_.push_or_update(s.index, queue_order());
    }
    offer_to_reset();
    drain();
    ForestDelta d = end_update();
    merge_order();
    return d;
  }

  // Change the labels of existing seeds; costs, predecessors and roots stay.
  ForestDelta relabel_seeds(const std::vector<Seed>& changes) {
    begin_update();
    for (const Seed& s : changes) {
      if (!is_seed(s.index)) throw ContractError("voxel " + std::to_string(s.index) + " is not a seed");
      if (s.label == 0) throw ContractError("seed labels must be >= 1");
      seed_label_[s.index] = s.label;
      std::vector<Index> stack{s.index};
      touch(s.index);
      forest_.label[s.index] = s.label;
      while (!stack.empty()) {
        const Index u = stack.back();
        stack.pop_back();
        for (Index n : neighbors6(volume_->dims, u)) {
          if (forest_.root[n] == s.index && !is_touched(n)) {
            touch(n);
            forest_.label[n] = s.label;
            stack.push_back(n);
          }
        }
      }
    }
    ForestDelta d = end_update();
    d.reevaluated = 0;
    return d;
  }

 private:
  void make_seed(Index i, Label label) {
    seed_label_[i] = label;
    ++seed_count_;
    forest_.cost[i] = 0;
    forest_.pred[i] = kNoIndex;
    forest_.root[i] = i;
    forest_.label[i] = label;
  }

  // Key comparison between finalized voxels. Voxels untouched by the
  // running update keep their rank from the last full ordering; voxels
  // finalized by it carry their pop sequence (pops come in key order) and
  // `pos`, the lowest old rank above them.
  bool is_new(Index v) const { return popped_[v] == epoch_; }

  int compare_keys(Index a, Index b) const {
    if (a == b) return 0;
    const bool na = is_new(a), nb = is_new(b);
    if (!na && !nb) return rank_[a] < rank_[b] ? -1 : 1;
    if (na && nb) return seq_[a] < seq_[b] ? -1 : 1;
    if (na) return pos_[a] <= rank_[b] ? -1 : 1;
    return pos_[b] <= rank_[a] ? 1 : -1;
  }

  // key(u) < key(v) for an old voxel u and a voxel v being finalized now;
  // one level of structure, then ranks.
  bool old_below_new(Index u, Index v) const {
    const bool su = is_seed(u), sv = is_seed(v);
    if (su || sv) {
      if (su && sv) return u < v;
      return su;
    }
    if (forest_.cost[u] != forest_.cost[v]) return forest_.cost[u] < forest_.cost[v];
    const Index pu = forest_.pred[u], pv = forest_.pred[v];
    if (pu == pv) return u < v;
    return compare_keys(pu, pv) < 0;
  }

  void mark_popped(Index v) {
    while (cursor_ < order_.size()) {
      const Index u = order_[cursor_];
      const bool stale = rank_[u] == kNoRank || is_new(u);
      if (!stale && !old_below_new(u, v)) break;
      ++cursor_;
    }
    popped_[v] = epoch_;
    seq_[v] = next_seq_++;
    pos_[v] = static_cast<std::uint32_t>(cursor_);
    popped_list_.push_back(v);
  }

  // After an update: surviving old voxels keep their relative order and the
  // voxels finalized by the update come in key order, so one merge on
  // (pos, rank) gives the new full order.
  void merge_order() {
    merged_.clear();
    std::size_t k = 0;
    for (Index u : order_) {
      if (rank_[u] == kNoRank || is_new(u)) continue;
      while (k < popped_list_.size() && pos_[popped_list_[k]] <= rank_[u]) merged_.push_back(popped_list_[k++]);
      merged_.push_back(u);
    }
    while (k < popped_list_.size()) merged_.push_back(popped_list_[k++]);
    order_.swap(merged_);
    for (std::size_t r = 0; r < order_.size(); ++r) rank_[order_[r]] = static_cast<std::uint32_t>(r);
  }

  // Full key order of the current forest without any queue: seeds by id,
  // then cost levels upward. A level starts with the voxels entering it from
  // below, in (rank(pred), id) order, and continues in FIFO order through
  // predecessors on the same level. Walking voxels in rank order and handing
  // each child to its level keeps every level list in that order.
  void rerank() {
    std::fill(rank_.begin(), rank_.end(), kNoRank);
    order_.clear();
    const Dims d = volume_->dims;
    const Index n = static_cast<Index>(volume_->size());
    for (Index i = 0; i < n; ++i) {
      if (is_seed(i)) assign_rank(i);
    }
    std::map<Cost, std::vector<Index>>& levels = levels_;
    levels.clear();
    auto hand_out = [&](Index v, bool same_level_ok) {
      const Cost c = forest_.cost[v];
      for (Index m : neighbors6_ascending(d, v)) {
        if (forest_.pred[m] != v || is_seed(m)) continue;
        if (same_level_ok && forest_.cost[m] == c) {
          assign_rank(m);
        } else {
          levels[forest_.cost[m]].push_back(m);
        }
      }
    };
    for (std::size_t k = 0; k < order_.size(); ++k) hand_out(order_[k], false);
    while (!levels.empty()) {
      auto it = levels.begin();
      const std::size_t first = order_.size();
      for (Index v : it->second) assign_rank(v);
      levels.erase(it);
      for (std::size_t k = first; k < order_.size(); ++k) hand_out(order_[k], true);
    }
  }

  void assign_rank(Index v) {
    rank_[v] = static_cast<std::uint32_t>(order_.size());
    order_.push_back(v);
  }

  // Ordering of tentative voxels: their keys with their current predecessor.
  bool queued_less(Index a, Index b) const {
    const bool sa = is_seed(a);
    const bool sb = is_seed(b);
    if (sa || sb) {
      if (sa && sb) return a < b;
      return sa;
    }
    const Cost ca = forest_.cost[a];
    const Cost cb = forest_.cost[b];
    if (ca != cb) return ca < cb;
    const int k = compare_keys(forest_.pred[a], forest_.pred[b]);
    if (k != 0) return k < 0;
    return a < b;
  }

  auto queue_order() const {
    return [this](Index a, Index b) { return queued_less(a, b); };
  }

  // Would the path through `p` (cost `c`) give `t` a smaller key than it has?
  bool improves(Cost c, Index p, Index t) const {
    const Cost ct = forest_.cost[t];
    if (ct == kInfiniteCost) return true;
    if (c != ct) return c < ct;
    const Index pt = forest_.pred[t];
    if (pt == kNoIndex || pt == p) return false;
    return compare_keys(p, pt) < 0;
  }

  void begin_update() {
    ++epoch_;
    if (epoch_ == 0) {
      std::fill(touched_.begin(), touched_.end(), 0);
      std::fill(popped_.begin(), popped_.end(), 0);
      epoch_ = 1;
    }
    touched_list_.clear();
    old_labels_.clear();
    reset_list_.clear();
    pop_trace_.clear();
    cursor_ = 0;
    next_seq_ = 0;
    popped_list_.clear();
  }

  bool is_touched(Index i) const { return touched_[i] == epoch_; }

  void touch(Index i) {
    if (touched_[i] != epoch_) {
      touched_[i] = epoch_;
      touched_list_.push_back(i);
      old_labels_.push_back(forest_.label[i]);
    }
  }

  // Unconquer `x` and every voxel whose current (tentative or final)
  // predecessor chain runs through it.
  void reset_subtree(Index x, bool wants_offers = true) {
    // Collect first: queued keys must stay intact while leaving the heap.
    std::vector<Index>& subtree = scratch_;
    subtree.assign(1, x);
    for (std::size_t k = 0; k < subtree.size(); ++k) {
      for (Index n : neighbors6(volume_->dims, subtree[k])) {
        if (forest_.pred[n] == subtree[k]) subtree.push_back(n);
      }
    }
    for (Index u : subtree) heap_.remove(u, queue_order());
    for (Index u : subtree) {
      touch(u);
      finalized_[u] = 0;
      rank_[u] = kNoRank;
      forest_.cost[u] = kInfiniteCost;
      forest_.pred[u] = kNoIndex;
      forest_.root[u] = kNoIndex;
      forest_.label[u] = 0;
      if (wants_offers) reset_list_.push_back(u);
    }
  }

  // Reset voxels receive their best offer from finalized neighbors.
  void offer_to_reset() {
    const auto& I = volume_->values;
    for (Index r : reset_list_) {
      if (finalized_[r] || is_seed(r)) continue;
      bool offered = false;
      for (Index n : neighbors6_ascending(volume_->dims, r)) {
        if (!finalized_[n]) continue;
        const Cost cand = std::max(forest_.cost[n], static_cast<Cost>(I[r]));
        if (improves(cand, n, r)) {
          conquer(r, cand, n);
          offered = true;
        }
      }
      if (offered) heap_.push_or_update(r, queue_order());
    }
    reset_list_.clear();
  }

  void conquer(Index t, Cost c, Index p) {
    forest_.cost[t] = c;
    forest_.pred[t] = p;
    forest_.root[t] = forest_.root[p];
    forest_.label[t] = forest_.label[p];
  }

  // Children of a voxel finalized in this drain are pushed in key order
  // within their cost level, so they go to per-cost FIFOs instead of the
  // heap. FIFO entries are dropped lazily once (cost, pred) no longer match.
  struct Fifo {
    std::vector<std::pair<Index, Index>> items;  // (voxel, pred)
    std::size_t head = 0;
  };

  bool fifo_entry_live(Cost c, const std::pair<Index, Index>& e) const {
    return !finalized_[e.first] && forest_.cost[e.first] == c && forest_.pred[e.first] == e.second;
  }

  // Lowest live FIFO voxel, or kNoIndex.
  Index fifo_front() {
    while (!fifos_.empty()) {
      auto it = fifos_.begin();
      Fifo& f = it->second;
      while (f.head < f.items.size() && !fifo_entry_live(it->first, f.items[f.head])) ++f.head;
      if (f.head < f.items.size()) return f.items[f.head].first;
      retire(it);
    }
    return kNoIndex;
  }

  // Bucket storage is recycled across levels and updates.
  void retire(std::map<Cost, Fifo>::iterator it) {
    it->second.items.clear();
    spare_.push_back(std::move(it->second.items));
    fifos_.erase(it);
  }

  void fifo_push(Cost c, Index v, Index pred) {
    auto [it, fresh] = fifos_.try_emplace(c);
    if (fresh && !spare_.empty()) {
      it->second.items = std::move(spare_.back());
      spare_.pop_back();
    }
    it->second.items.emplace_back(v, pred);
  }

  Index pop_next() {
    const Index f = fifo_front();
    if (f != kNoIndex && (heap_.empty() || queued_less(f, heap_.top()))) {
      ++fifos_.begin()->second.head;
      heap_.remove(f, queue_order());
      return f;
    }
    if (heap_.empty()) return kNoIndex;
    return heap_.pop(queue_order());
  }

  void drain() {
    const auto& I = volume_->values;
    while (true) {
      const Index v = pop_next();
      if (v == kNoIndex) break;
      mark_popped(v);
      finalized_[v] = 1;
      touch(v);
      if (trace_) pop_trace_.push_back(forest_.cost[v]);
      const Cost cv = forest_.cost[v];
      for (Index n : neighbors6_ascending(volume_->dims, v)) {
        if (is_seed(n)) continue;
        const Cost cand = std::max(cv, static_cast<Cost>(I[n]));
        if (!improves(cand, v, n)) continue;
        if (finalized_[n]) {
          // Every voxel below n gets a better key through n's new chain than
          // its old one, and the old one already beat any untouched
          // neighbour's offer, so the reset part needs no offers.
          reset_subtree(n, false);
          conquer(n, cand, v);
          fifo_push(cand, n, v);
        } else {
          touch(n);
          heap_.remove(n, queue_order());
          conquer(n, cand, v);
          fifo_push(cand, n, v);
        }
      }
    }
    while (!fifos_.empty()) retire(fifos_.begin());
  }

  ForestDelta end_update() {
    ForestDelta d;
    d.reevaluated = touched_list_.size();
    std::vector<std::pair<Index, Label>> changed;
    for (std::size_t k = 0; k < touched_list_.size(); ++k) {
      const Index i = touched_list_[k];
      if (forest_.label[i] != old_labels_[k]) changed.emplace_back(i, forest_.label[i]);
    }
    if (changed.size() > volume_->size() / 32) {
      // Large deltas: a linear pass beats sorting.
      std::vector<std::uint8_t> hit(volume_->size(), 0);
      for (const auto& c : changed) hit[c.first] = 1;
      changed.clear();
      for (Index i = 0; i < static_cast<Index>(hit.size()); ++i) {
        if (hit[i]) changed.emplace_back(i, forest_.label[i]);
      }
    } else {
      std::sort(changed.begin(), changed.end());
    }
    d.changed = rle_from_sorted(changed);
    return d;
  }

  std::shared_ptr<const Volume> volume_;
  Forest forest_;
  std::vector<Label> seed_label_;
  std::vector<std::uint8_t> finalized_;
  std::size_t seed_count_ = 0;

  std::vector<std::uint32_t> touched_;
  std::uint32_t epoch_ = 0;
  std::vector<Index> touched_list_;
  std::vector<Label> old_labels_;
  std::vector<Index> reset_list_;

  static constexpr std::uint32_t kNoRank = 0xFFFFFFFFu;
  std::vector<std::uint32_t> rank_;    // position in key order, for voxels not touched since
  std::vector<Index> order_;           // voxels by rank
  std::vector<std::uint32_t> popped_;  // epoch in which the voxel was last finalized
  std::vector<std::uint32_t> seq_, pos_;
  std::size_t cursor_ = 0;
  std::uint32_t next_seq_ = 0;

  bool trace_ = false;
  std::vector<Cost> pop_trace_;

  detail::IndexedHeap heap_;
  std::map<Cost, Fifo> fifos_;
  std::vector<std::vector<std::pair<Index, Index>>> spare_;
  std::vector<Index> scratch_, popped_list_, merged_;
  std::map<Cost, std::vector<Index>> levels_;
};

// Seeded watershed from scratch.
template <typename Sample>
Forest ift_sc(const Grid<Sample>& volume, const SeedSet& seeds) {
  auto shared = std::make_shared<const Grid<Sample>>(volume);
  WatershedForest<Sample> engine(shared, seeds);
  return engine.forest();
}

// Functional form of a differential edit on a complete forest.
template <typename Sample>
std::pair<Forest, ForestDelta> apply_seed_edit(const Grid<Sample>& volume, Forest forest, const SeedEdit& edit) {
  WatershedForest<Sample> engine(std::make_shared<const Grid<Sample>>(volume), std::move(forest));
  ForestDelta delta = engine.apply(edit);
  return {engine.forest(), std::move(delta)};
}

}  // namespace seg3d
