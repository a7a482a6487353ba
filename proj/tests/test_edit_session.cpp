#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "seg3d/edit_session.hpp"
#include "seg3d/geodesic.hpp"
#include "test_support.hpp"

using namespace seg3d;
using Session = EditSession<std::uint8_t>;

namespace {

// Float walk along the dominant axis; lround rounds halves away from zero.
std::set<Index> traversal_oracle(const Dims& d, Coord a, Coord b) {
  std::set<Index> out;
  const double dx = b.x - a.x, dy = b.y - a.y, dz = b.z - a.z;
  const int n = static_cast<int>(std::max({std::fabs(dx), std::fabs(dy), std::fabs(dz)}));
  for (int k = 0; k <= n; ++k) {
    const double t = n == 0 ? 0.0 : static_cast<double>(k) / n;
    const long x = a.x + std::lround(t * dx), y = a.y + std::lround(t * dy), z = a.z + std::lround(t * dz);
    out.insert(static_cast<Index>(x + d.nx * (y + d.ny * z)));
  }
  return out;
}

bool chain26(const Dims& d, const std::vector<Index>& v) {
  // every voxel but one endpoint has a 26-neighbor in the set, and the set is connected
  std::set<Index> rest(v.begin(), v.end());
  std::vector<Index> stack{v.front()};
  rest.erase(v.front());
  while (!stack.empty()) {
    const Coord c = coord_of(d, stack.back());
    stack.pop_back();
    for (auto it = rest.begin(); it != rest.end();) {
      const Coord o = coord_of(d, *it);
      if (std::abs(o.x - c.x) <= 1 && std::abs(o.y - c.y) <= 1 && std::abs(o.z - c.z) <= 1) {
        stack.push_back(*it);
        it = rest.erase(it);
      } else {
        ++it;
      }
    }
  }
  return rest.empty();
}

// Distance from every region voxel to the nearest boundary voxel, one BFS per voxel.
std::vector<int> depth_oracle(const Dims& d, const std::set<Index>& region, std::vector<Index>& order) {
  auto boundary = [&](Index i) {
    auto nb = seg3d::testing::brute_neighbors(d, i);
    if (nb.size() < 6) return true;
    for (Index n : nb)
      if (!region.contains(n)) return true;
    return false;
  };
  std::vector<int> out;
  order.assign(region.begin(), region.end());
  for (Index s : order) {
    std::map<Index, int> dist{{s, 0}};
    std::vector<Index> frontier{s};
    int found = -1;
    while (found < 0) {
      std::vector<Index> next;
      for (Index u : frontier) {
        if (boundary(u)) {
          found = dist[u];
          break;
        }
        for (Index n : seg3d::testing::brute_neighbors(d, u)) {
          if (region.contains(n) && !dist.contains(n)) {
            dist[n] = dist[u] + 1;
            next.push_back(n);
          }
        }
      }
      frontier = next;
    }
    out.push_back(found);
  }
  return out;
}

std::shared_ptr<const Volume8> shared(const Volume8& v) { return std::make_shared<const Volume8>(v); }

// Two cubes of low intensity separated by a plane of mid intensity.
Volume8 two_cells(int wall) {
  Volume8 v({12, 6, 6}, 5);
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y) v.at(6, y, z) = static_cast<std::uint8_t>(wall);
  return v;
}

}  // namespace

TEST(Rasterize, Examples) {
  const Dims d{5, 5, 5};
  EXPECT_EQ(rasterize_polyline(d, {{1, 1, 1}, {3, 1, 1}}),
            (std::vector<Index>{linear_index(d, 1, 1, 1), linear_index(d, 2, 1, 1), linear_index(d, 3, 1, 1)}));
  EXPECT_EQ(rasterize_polyline(d, {{0, 0, 0}}), (std::vector<Index>{0}));
  const auto diag = rasterize_polyline(d, {{0, 0, 0}, {2, 2, 2}});
  ASSERT_EQ(diag.size(), 3u);
  EXPECT_TRUE(chain26(d, diag));
  EXPECT_EQ(std::set<Index>(diag.begin(), diag.end()), traversal_oracle(d, {0, 0, 0}, {2, 2, 2}));
}

TEST(Rasterize, Errors) {
  EXPECT_THROW(rasterize_polyline({3, 3, 3}, {}), ParameterError);
  EXPECT_THROW(rasterize_polyline({3, 3, 3}, {{0, 0, 0}, {3, 0, 0}}), BoundsError);
}

TEST(Rasterize, RandomSegmentsMatchOracle) {
  std::mt19937 rng(21);
  const Dims d{20, 17, 13};
  std::uniform_int_distribution<int> X(0, d.nx - 1), Y(0, d.ny - 1), Z(0, d.nz - 1);
  for (int trial = 0; trial < 300; ++trial) {
    const Coord a{X(rng), Y(rng), Z(rng)}, b{X(rng), Y(rng), Z(rng)};
    const auto got = rasterize_polyline(d, {a, b});
    EXPECT_EQ(std::set<Index>(got.begin(), got.end()), traversal_oracle(d, a, b));
    EXPECT_TRUE(chain26(d, got));
    const int n = std::max({std::abs(b.x - a.x), std::abs(b.y - a.y), std::abs(b.z - a.z)});
    EXPECT_EQ(got.size(), static_cast<std::size_t>(n + 1));
  }
}

TEST(GeodesicCenter, SymmetricShapes) {
  EXPECT_EQ(geodesic_center({4, 4, 4}, {21}).voxel, 21u);
  const Dims d{5, 5, 5};
  std::vector<Index> cube;
  for (int z = 1; z < 4; ++z)
    for (int y = 1; y < 4; ++y)
      for (int x = 1; x < 4; ++x) cube.push_back(linear_index(d, x, y, z));
  EXPECT_EQ(geodesic_center(d, cube).voxel, linear_index(d, 2, 2, 2));
  EXPECT_EQ(geodesic_center({1, 1, 5}, {0, 1, 2, 3, 4}).voxel, 2u);
  EXPECT_THROW(geodesic_center(d, {}), ContractError);
}

TEST(GeodesicCenter, LShapeMatchesDepthOracle) {
  const Dims d{12, 12, 6};
  std::set<Index> region;
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 12; ++x)
        if ((x < 6 && y < 12) || (y < 6 && x < 12)) region.insert(linear_index(d, x, y, z));
  std::vector<Index> order;
  const auto depth = depth_oracle(d, region, order);
  const int best = *std::max_element(depth.begin(), depth.end());
  const GeodesicCenter c = geodesic_center(d, std::vector<Index>(region.begin(), region.end()));
  const auto pos = std::find(order.begin(), order.end(), c.voxel) - order.begin();
  EXPECT_EQ(depth[pos], best);
  EXPECT_EQ(c.depth, static_cast<std::uint32_t>(best));
}

TEST(GeodesicCenter, RandomBlobsReachMaximumDepth) {
  std::mt19937 rng(22);
  const Dims d{9, 9, 9};
  for (int trial = 0; trial < 20; ++trial) {
    std::set<Index> region;
    // union of a few boxes around the middle keeps the blob connected
    for (int b = 0; b < 3; ++b) {
      std::uniform_int_distribution<int> lo(0, 4), len(2, 5);
      const int x0 = lo(rng), y0 = lo(rng), z0 = lo(rng);
      const int lx = len(rng), ly = len(rng), lz = len(rng);
      for (int z = std::min(z0, 4); z < std::max(z0 + lz, 5); ++z)
        for (int y = std::min(y0, 4); y < std::max(y0 + ly, 5); ++y)
          for (int x = std::min(x0, 4); x < std::max(x0 + lx, 5); ++x)
            if (x < 9 && y < 9 && z < 9) region.insert(linear_index(d, x, y, z));
    }
    std::vector<Index> order;
    const auto depth = depth_oracle(d, region, order);
    const GeodesicCenter c = geodesic_center(d, std::vector<Index>(region.begin(), region.end()));
    ASSERT_TRUE(region.contains(c.voxel));
    EXPECT_EQ(depth[std::find(order.begin(), order.end(), c.voxel) - order.begin()],
              *std::max_element(depth.begin(), depth.end()));
  }
}

TEST(GeodesicCenter, DisconnectedKeepsLargest) {
  const Dims d{10, 1, 1};
  const GeodesicCenter c = geodesic_center(d, {0, 1, 5, 6, 7, 8, 9});
  EXPECT_EQ(c.voxel, 7u);
  ASSERT_EQ(c.warnings.size(), 1u);
}

TEST(Presegmentation, SeedsInsideOwnRegions) {
  LabelMap m({8, 4, 4}, 0);
  for (Index i = 0; i < m.size(); ++i) m.values[i] = coord_of(m.dims, i).x < 3 ? 4 : 9;
  const auto init = init_from_presegmentation(m);
  ASSERT_EQ(init.seeds.size(), 2u);
  for (const Seed& s : init.seeds) EXPECT_EQ(m.values[s.index], s.label);
  EXPECT_TRUE(init_from_presegmentation(LabelMap({3, 3, 3}, 0)).seeds.empty());
}

TEST(Session, FirstScribbleFillsTile) {
  Session s(shared(two_cells(200)));
  for (Label l : s.labels().values) EXPECT_EQ(l, 0u);
  const OpResult r = s.add({{1, 1, 1}, {3, 1, 1}});
  EXPECT_EQ(r.label, 1u);
  for (Label l : s.labels().values) EXPECT_EQ(l, 1u);
  EXPECT_EQ(r.delta.changed, (RleRuns{{0, static_cast<Index>(s.labels().size()), 1}}));
}

TEST(Session, SecondScribbleMatchesFreshRun) {
  const Volume8 v = two_cells(200);
  Session s(shared(v));
  s.add({{1, 1, 1}, {3, 1, 1}});
  s.add({{9, 2, 2}, {9, 4, 4}});
  EXPECT_EQ(s.forest(), ift_sc(v, s.seeds()));
  EXPECT_EQ(s.labels().at(2, 3, 3), 1u);
  EXPECT_EQ(s.labels().at(10, 3, 3), 2u);
}

TEST(Session, AddOverExistingSeedReassigns) {
  const Volume8 v = two_cells(200);
  Session s(shared(v));
  s.add({{1, 1, 1}, {5, 1, 1}});
  s.add({{8, 2, 2}});
  s.add({{5, 1, 1}, {5, 4, 1}});
  const SeedSet seeds = s.seeds();
  EXPECT_EQ(seeds.label_of(linear_index(v.dims, 5, 1, 1)), 3u);
  EXPECT_EQ(seeds.label_of(linear_index(v.dims, 4, 1, 1)), 1u);
  EXPECT_EQ(s.forest(), ift_sc(v, seeds));
  s.undo();
  EXPECT_EQ(s.seeds().label_of(linear_index(v.dims, 5, 1, 1)), 1u);
  EXPECT_EQ(s.forest(), ift_sc(v, s.seeds()));
}

TEST(Session, ExtendAcrossWeakBoundary) {
  const Volume8 v = two_cells(6);
  Session s(shared(v));
  const Label a = s.add({{2, 2, 2}}).label;
  s.add({{9, 2, 2}});
  std::size_t before = 0, after = 0;
  for (Label l : s.labels().values) before += l == a;
  s.extend(a, {{8, 3, 3}, {10, 3, 3}});
  for (Label l : s.labels().values) after += l == a;
  EXPECT_EQ(s.live_labels().size(), 2u);
  EXPECT_GT(after, before);
}

TEST(Session, ExtendInsideOwnRegionChangesNoLabel) {
  Session s(shared(two_cells(200)));
  const Label a = s.add({{2, 2, 2}}).label;
  s.add({{9, 2, 2}});
  const OpResult r = s.extend(a, {{1, 1, 1}, {3, 3, 3}});
  // only the wall plane, where both cells reach at equal cost, may flip
  for (const RleRun& run : r.delta.changed)
    for (Index i = run.start; i < run.start + run.length; ++i) EXPECT_EQ(coord_of(s.labels().dims, i).x, 6);
  const OpResult inside = s.extend(a, {{2, 3, 3}});
  EXPECT_TRUE(inside.delta.empty());
  EXPECT_THROW(s.extend(a, {}), ParameterError);
  EXPECT_THROW(s.extend(77, {{1, 1, 1}}), NotFoundError);
}

TEST(Session, RemoveOnlyScribbleClears) {
  Session s(shared(two_cells(200)));
  const auto id = s.add({{2, 2, 2}}).scribble;
  s.remove(id);
  for (Label l : s.labels().values) EXPECT_EQ(l, 0u);
  EXPECT_THROW(s.remove(id), NotFoundError);
  EXPECT_THROW(s.remove(99), NotFoundError);
}

TEST(Session, MergeRelabelsAndConserves) {
  const Volume8 v = two_cells(200);
  Session s(shared(v));
  const Label a = s.add({{2, 2, 2}}).label;
  const Label b = s.add({{9, 2, 2}}).label;
  const LabelMap before = s.labels();
  const Forest fb = s.forest();
  const OpResult r = s.merge(a, b);
  EXPECT_EQ(r.delta.reevaluated, 0u);
  EXPECT_EQ(s.forest().cost, fb.cost);
  EXPECT_EQ(s.forest().pred, fb.pred);
  for (Index i = 0; i < v.size(); ++i) {
    EXPECT_EQ(s.labels()[i], before[i] == b ? a : before[i]);
    EXPECT_EQ(s.labels()[i] != 0, before[i] != 0);
  }
  EXPECT_TRUE(s.merge(a, b).noop);
  // a split after a merge carries a fresh label
  EXPECT_EQ(s.split(a, {{10, 4, 4}}).label, 3u);
  s.undo();
  s.undo();
  EXPECT_EQ(s.labels(), before);
}

TEST(Session, UndoRedoAndNoops) {
  const Volume8 v = two_cells(200);
  Session s(shared(v));
  EXPECT_TRUE(s.undo().noop);
  EXPECT_TRUE(s.redo().noop);
  s.add({{2, 2, 2}});
  const Forest one = s.forest();
  s.add({{9, 2, 2}});
  const Forest two = s.forest();
  s.undo();
  EXPECT_EQ(s.forest(), one);
  s.redo();
  EXPECT_EQ(s.forest(), two);
  s.undo();
  s.add({{9, 4, 4}});  // truncates the redo tail
  EXPECT_TRUE(s.redo().noop);
  EXPECT_EQ(s.history_size(), 2u);
  EXPECT_EQ(s.scribbles().size(), 2u);
}

TEST(Session, EraseAllRestoresInitialSeeds) {
  const Volume8 v = two_cells(200);
  const SeedSet init{{linear_index(v.dims, 2, 2, 2), 1}, {linear_index(v.dims, 9, 2, 2), 2}};
  Session s(shared(v), init);
  const Forest start = s.forest();
  EXPECT_EQ(start, ift_sc(v, init));
  s.add({{3, 3, 3}});
  s.remove(1);
  s.erase_all();
  EXPECT_EQ(s.forest(), start);
  EXPECT_EQ(s.cursor(), 0u);
  EXPECT_TRUE(s.undo().noop);
  EXPECT_EQ(s.add({{4, 4, 4}}).label, 3u);

  Session blank(shared(v));
  blank.add({{2, 2, 2}});
  blank.erase_all();
  for (Label l : blank.labels().values) EXPECT_EQ(l, 0u);
}

TEST(Session, JsonPayloadsAndJournal) {
  Session s(shared(two_cells(200)));
  s.apply_json({{"op", "add"}, {"polyline", {{1, 1, 1}, {2, 1, 1}}}});
  s.apply_json({{"op", "add"}, {"polyline", {{9, 1, 1}}}});
  s.apply_json({{"op", "merge"}, {"a", 1}, {"b", 2}});
  s.apply_json({{"op", "undo"}});
  EXPECT_THROW(s.apply_json({{"op", "fly"}}), ParameterError);
  EXPECT_THROW(s.apply_json({{"op", "add"}}), ParameterError);
  EXPECT_THROW(s.apply_json({{"op", "add"}, {"polyline", {{1, 1}}}}), ParameterError);
  std::istringstream lines(s.journal_jsonl());
  std::string line;
  std::vector<std::string> ops;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("params"));
    EXPECT_TRUE(j["timestamp"].is_number());
    ops.push_back(j["op"]);
  }
  EXPECT_EQ(ops, (std::vector<std::string>{"add", "add", "merge", "undo"}));
  EXPECT_EQ(s.interaction_count(), 4u);
}

// Independent model of the seed set: live scribbles in creation order, later
// ones overriding earlier ones, labels resolved through merges.
struct SeedModel {
  struct Entry {
    std::vector<Index> voxels;
    Label label;
    bool alive;
  };
  std::vector<Entry> entries;
  std::map<Label, Label> parent;
  Label find(Label l) const {
    while (parent.contains(l)) l = parent.at(l);
    return l;
  }
  SeedSet seeds() const {
    std::map<Index, Label> m;
    for (const auto& e : entries)
      if (e.alive)
        for (Index v : e.voxels) m[v] = find(e.label);
    SeedSet s;
    for (auto [i, l] : m) s.add(i, l);
    return s;
  }
};

TEST(Session, RandomOperationSequences) {
  std::mt19937 rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    const Volume8 v = seg3d::testing::random_volume(rng, {9, 8, 7}, trial % 2 ? 4 : 40);
    Session s(shared(v));
    std::vector<SeedModel> snapshots{SeedModel{}};  // model state per history position
    std::size_t cursor = 0;
    std::uniform_int_distribution<int> X(0, 8), Y(0, 7), Z(0, 6);
    auto line = [&] {
      std::vector<Coord> p{{X(rng), Y(rng), Z(rng)}};
      if (rng() % 2) p.push_back({X(rng), Y(rng), Z(rng)});
      return p;
    };
    for (int step = 0; step < 30; ++step) {
      SeedModel m = snapshots[cursor];
      const auto labels = s.live_labels();
      const int kind = static_cast<int>(rng() % 7);
      bool changed = true;
      if (kind <= 1 || labels.empty()) {
        const auto p = line();
        const OpResult r = s.add(p);
        m.entries.push_back({rasterize_polyline(v.dims, p), r.label, true});
      } else if (kind == 2) {
        const Label t = labels[rng() % labels.size()];
        const auto p = line();
        s.extend(t, p);
        m.entries.push_back({rasterize_polyline(v.dims, p), m.find(t), true});
      } else if (kind == 3) {
        std::vector<std::uint32_t> live;
        for (const auto& sc : s.scribbles())
          if (s.alive(sc.id)) live.push_back(sc.id);
        const auto id = live[rng() % live.size()];
        s.remove(id);
        m.entries[id - 1].alive = false;
      } else if (kind == 4 && labels.size() >= 2) {
        const Label a = labels[rng() % labels.size()], b = labels[rng() % labels.size()];
        if (a == b) {
          EXPECT_TRUE(s.merge(a, b).noop);
          changed = false;
        } else {
          s.merge(a, b);
          m.parent[m.find(b)] = m.find(a);
        }
      } else if (kind == 5) {
        const bool ok = !s.undo().noop;
        EXPECT_EQ(ok, cursor > 0);
        if (ok) --cursor;
        changed = false;
      } else {
        const bool ok = !s.redo().noop;
        EXPECT_EQ(ok, cursor + 1 < snapshots.size());
        if (ok) ++cursor;
        changed = false;
      }
      if (changed) {
        snapshots.resize(cursor + 1);
        snapshots.push_back(m);
        ++cursor;
      }
      const SeedSet want = snapshots[cursor].seeds();
      ASSERT_EQ(s.seeds(), want) << "trial " << trial << " step " << step;
      if (want.empty()) {
        for (Label l : s.labels().values) ASSERT_EQ(l, 0u);
      } else {
        ASSERT_EQ(s.forest(), ift_sc(v, want)) << "trial " << trial << " step " << step;
      }
    }
    // undo^k then redo^k restores the final forest bit-exactly
    const Forest final_forest = s.forest();
    const std::size_t k = s.cursor();
    for (std::size_t i = 0; i < k; ++i) ASSERT_FALSE(s.undo().noop);
    for (std::size_t i = 0; i < k; ++i) ASSERT_FALSE(s.redo().noop);
    EXPECT_EQ(s.forest(), final_forest);
  }
}

TEST(Session, DeltasReplayToLabels) {
  std::mt19937 rng(32);
  const Volume8 v = seg3d::testing::random_volume(rng, {10, 10, 10}, 30);
  Session s(shared(v));
  LabelMap client(v.dims, 0);
  std::uniform_int_distribution<int> C(0, 9);
  for (int step = 0; step < 25; ++step) {
    OpResult r;
    if (step % 5 == 4) {
      r = s.undo();
    } else {
      r = s.add({{C(rng), C(rng), C(rng)}, {C(rng), C(rng), C(rng)}});
    }
    rle_apply(r.delta.changed, client);
    ASSERT_EQ(client, s.labels());
  }
}
