#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "seg3d/error.hpp"
#include "seg3d/forest.hpp"
#include "seg3d/geodesic.hpp"
#include "seg3d/grid.hpp"
#include "seg3d/rle.hpp"
#include "seg3d/watershed.hpp"

namespace seg3d {

struct Scribble {
  std::uint32_t id = 0;
  Label label = 0;
  std::vector<Coord> polyline;
  std::vector<Index> voxels;
};

struct OpResult {
  ForestDelta delta;
  bool noop = false;        // undo/redo with nothing to do, merge of one label
  Label label = 0;          // label created or targeted by the operation
  std::uint32_t scribble = 0;
};

enum class OpKind { Add, Extend, Remove, Split, Merge, Undo, Redo, EraseAll };

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Add: return "add";
    case OpKind::Extend: return "extend";
    case OpKind::Remove: return "remove";
    case OpKind::Split: return "split";
    case OpKind::Merge: return "merge";
    case OpKind::Undo: return "undo";
    case OpKind::Redo: return "redo";
    case OpKind::EraseAll: return "erase_all";
  }
  return "?";
}

inline OpKind parse_op(const std::string& s) {
  for (OpKind k : {OpKind::Add, OpKind::Extend, OpKind::Remove, OpKind::Split, OpKind::Merge, OpKind::Undo,
                   OpKind::Redo, OpKind::EraseAll}) {
    if (s == op_name(k)) return k;
  }
  throw ParameterError("unknown operation '" + s + "'");
}

inline std::vector<Coord> polyline_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ParameterError("polyline must be an array of [x,y,z] points");
  std::vector<Coord> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 3) throw ParameterError("polyline points must be [x,y,z]");
    out.push_back({p[0].get<int>(), p[1].get<int>(), p[2].get<int>()});
  }
  return out;
}

// Interactive editing of one tile. The scribble list only grows; what an
// operation changes is which scribbles are alive and how labels alias. After
// every change the wanted seed map is derived from that state and the
// difference is handed to the differential engine, so undo and redo are
// just the reverse difference.
template <typename Sample>
class EditSession {
 public:
  using Volume = Grid<Sample>;

  explicit EditSession(std::shared_ptr<const Volume> volume, const SeedSet& initial = {})
      : volume_(volume), engine_(volume) {
    for (const Seed& s : initial.sorted()) {
      Scribble sc;
      sc.id = static_cast<std::uint32_t>(scribbles_.size() + 1);
      sc.label = s.label;
      sc.polyline = {coord_of(volume_->dims, s.index)};
      sc.voxels = {s.index};
      scribbles_.push_back(std::move(sc));
      next_label_ = std::max(next_label_, s.label + 1);
    }
    initial_count_ = scribbles_.size();
    initial_next_label_ = next_label_;
    state_.alive.assign(scribbles_.size(), 1);
    state_.next_label = next_label_;
    sync();
  }

  const LabelMap& labels() const noexcept { return engine_.labels(); }
  const Forest& forest() const noexcept { return engine_.forest(); }
  const Volume& volume() const noexcept { return *volume_; }
  SeedSet seeds() const { return engine_.seeds(); }
  const std::vector<Scribble>& scribbles() const noexcept { return scribbles_; }
  bool alive(std::uint32_t id) const { return id >= 1 && id <= state_.alive.size() && state_.alive[id - 1]; }
  std::size_t history_size() const noexcept { return history_.size(); }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t interaction_count() const noexcept { return journal_.size(); }

  Label resolve(Label l) const {
    auto it = state_.alias.find(l);
    while (it != state_.alias.end()) {
      l = it->second;
      it = state_.alias.find(l);
    }
    return l;
  }

  // Labels currently carried by at least one living scribble.
  std::vector<Label> live_labels() const {
    std::vector<Label> out;
    for (const Scribble& s : scribbles_) {
      if (alive(s.id)) out.push_back(resolve(s.label));
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  OpResult add(const std::vector<Coord>& polyline) {
    OpResult r = new_scribble(polyline, state_.next_label, true);
    log(OpKind::Add, {{"polyline", to_json(polyline)}}, r);
    return r;
  }

  OpResult extend(Label target, const std::vector<Coord>& polyline) {
    require_live(target);
    OpResult r = new_scribble(polyline, resolve(target), false);
    log(OpKind::Extend, {{"label", target}, {"polyline", to_json(polyline)}}, r);
    return r;
  }

  OpResult split(Label target, const std::vector<Coord>& polyline) {
    require_live(target);
    OpResult r = new_scribble(polyline, state_.next_label, true);
    log(OpKind::Split, {{"label", target}, {"polyline", to_json(polyline)}}, r);
    return r;
  }

  OpResult remove(std::uint32_t scribble) {
    if (!alive(scribble)) throw NotFoundError("no live scribble " + std::to_string(scribble));
    const State before = state_;
    state_.alive[scribble - 1] = 0;
    OpResult r = commit(before);
    r.scribble = scribble;
    log(OpKind::Remove, {{"scribble", scribble}}, r);
    return r;
  }

  OpResult merge(Label a, Label b) {
    require_live(a);
    require_live(b);
    const Label ra = resolve(a), rb = resolve(b);
    OpResult r;
    if (ra == rb) {
      r.noop = true;
    } else {
      const State before = state_;
      state_.alias[rb] = ra;
      r = commit(before);
    }
    r.label = ra;
    log(OpKind::Merge, {{"a", a}, {"b", b}}, r);
    return r;
  }

  OpResult undo() {
    OpResult r;
    if (cursor_ == 0) {
      r.noop = true;
    } else {
      --cursor_;
      r.delta = transition(history_[cursor_].before);
    }
    log(OpKind::Undo, nlohmann::json::object(), r);
    return r;
  }

  OpResult redo() {
    OpResult r;
    if (cursor_ == history_.size()) {
      r.noop = true;
    } else {
      r.delta = transition(history_[cursor_].after);
      ++cursor_;
    }
    log(OpKind::Redo, nlohmann::json::object(), r);
    return r;
  }

  // Back to the initial seeds; the undo history is discarded.
  OpResult erase_all() {
    scribbles_.resize(initial_count_);
    State fresh;
    fresh.alive.assign(initial_count_, 1);
    fresh.next_label = initial_next_label_;
    OpResult r;
    r.delta = transition(fresh);
    history_.clear();
    cursor_ = 0;
    log(OpKind::EraseAll, nlohmann::json::object(), r);
    return r;
  }

  // Operation payload as sent by clients: {"op": "...", ...params}.
  OpResult apply_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("op") || !j["op"].is_string()) {
      throw ParameterError("operation payload needs a string field 'op'");
    }
    try {
      switch (parse_op(j["op"].get<std::string>())) {
        case OpKind::Add: return add(polyline_from_json(j.at("polyline")));
        case OpKind::Extend: return extend(j.at("label").get<Label>(), polyline_from_json(j.at("polyline")));
        case OpKind::Split: return split(j.at("label").get<Label>(), polyline_from_json(j.at("polyline")));
        case OpKind::Remove: return remove(j.at("scribble").get<std::uint32_t>());
        case OpKind::Merge: return merge(j.at("a").get<Label>(), j.at("b").get<Label>());
        case OpKind::Undo: return undo();
        case OpKind::Redo: return redo();
        case OpKind::EraseAll: return erase_all();
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError(std::string("malformed operation: ") + e.what());
    }
    return {};
  }

  // One JSON object per line: {"op", "params", "timestamp"}.
  std::string journal_jsonl() const {
    std::string out;
    for (const auto& e : journal_) out += e.dump() + "\n";
    return out;
  }
  const std::vector<nlohmann::json>& journal() const noexcept { return journal_; }

 private:
  struct State {
    std::vector<char> alive;          // indexed by scribble id - 1
    std::map<Label, Label> alias;     // merged label -> label it joined
    Label next_label = 1;
  };

  struct HistoryEntry {
    State before, after;
  };

  static nlohmann::json to_json(const std::vector<Coord>& p) {
    nlohmann::json a = nlohmann::json::array();
    for (const Coord& c : p) a.push_back({c.x, c.y, c.z});
    return a;
  }

  void require_live(Label l) const {
    const Label r = resolve(l);
    for (const Scribble& s : scribbles_) {
      if (alive(s.id) && resolve(s.label) == r) return;
    }
    throw NotFoundError("no live label " + std::to_string(l));
  }

  OpResult new_scribble(const std::vector<Coord>& polyline, Label label, bool fresh_label) {
    Scribble s;
    s.voxels = rasterize_polyline(volume_->dims, polyline);
    s.polyline = polyline;
    s.label = label;
    // scribbles only reachable through the redo tail are gone for good
    scribbles_.resize(state_.alive.size());
    s.id = static_cast<std::uint32_t>(scribbles_.size() + 1);
    const State before = state_;
    scribbles_.push_back(s);
    state_.alive.push_back(1);
    if (fresh_label) state_.next_label = label + 1;
    OpResult r = commit(before);
    r.label = label;
    r.scribble = s.id;
    return r;
  }

  OpResult commit(const State& before) {
    OpResult r;
    r.delta = transition(state_);
    history_.resize(cursor_);
    history_.push_back({before, state_});
    ++cursor_;
    return r;
  }

  ForestDelta transition(const State& target) {
    state_ = target;
    return sync();
  }

  void log(OpKind k, nlohmann::json params, const OpResult& r) {
    const double ts = std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    nlohmann::json e{{"op", op_name(k)}, {"params", std::move(params)}, {"timestamp", ts}};
    if (r.noop) e["noop"] = true;
    journal_.push_back(std::move(e));
  }

  // Bring the engine's seeds in line with the living scribbles.
  ForestDelta sync() {
    const std::size_t n = volume_->size();
    std::vector<Label> want(n, 0);
    bool any = false;
    for (const Scribble& s : scribbles_) {
      if (s.id > state_.alive.size() || !state_.alive[s.id - 1]) continue;
      const Label l = resolve(s.label);
      for (Index v : s.voxels) want[v] = l;
      any = true;
    }
    const LabelMap before = engine_.labels();
    std::size_t reevaluated = 0;
    if (!any) {
      engine_.clear();
    } else {
      SeedEdit edit;
      std::vector<Seed> relabel;
      for (Index i = 0; i < n; ++i) {
        const Label have = engine_.seed_label(i);
        if (have == want[i]) continue;
        if (want[i] == 0) {
          edit.removals.push_back(i);
        } else if (have == 0) {
          edit.additions.add(i, want[i]);
        } else {
          relabel.push_back({i, want[i]});
        }
      }
      if (engine_.seed_count() == 0) {
        // Nothing to keep from the old forest; the canonical forest is the
        // same either way and the bucket-queue run is cheaper.
        engine_.recompute(edit.additions);
        reevaluated = n;
      } else {
        if (!relabel.empty()) engine_.relabel_seeds(relabel);
        if (!edit.empty()) reevaluated = engine_.apply(edit).reevaluated;
      }
    }
    ForestDelta d;
    d.reevaluated = reevaluated;
    const auto& after = engine_.labels().values;
    std::vector<std::pair<Index, Label>> changed;
    for (Index i = 0; i < n; ++i) {
      if (before.values[i] != after[i]) changed.emplace_back(i, after[i]);
    }
    d.changed = rle_from_sorted(changed);
    return d;
  }

  std::shared_ptr<const Volume> volume_;
  WatershedForest<Sample> engine_;
  std::vector<Scribble> scribbles_;
  std::size_t initial_count_ = 0;
  Label next_label_ = 1;
  Label initial_next_label_ = 1;
  State state_;
  std::vector<HistoryEntry> history_;
  std::size_t cursor_ = 0;
  std::vector<nlohmann::json> journal_;
};

}  // namespace seg3d
