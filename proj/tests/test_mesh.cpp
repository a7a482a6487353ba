#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "seg3d/consensus.hpp"
#include "seg3d/mesh.hpp"
#include "test_support.hpp"

using namespace seg3d;

namespace {

using Edge = std::pair<std::uint32_t, std::uint32_t>;

struct Incidence {
  std::map<Edge, int> directed;
  std::map<Edge, int> undirected;
};

Incidence incidence(const TriangleMesh& m) {
  Incidence inc;
  for (const auto& t : m.triangles) {
    for (int k = 0; k < 3; ++k) {
      const auto a = t[k], b = t[(k + 1) % 3];
      ++inc.directed[{a, b}];
      ++inc.undirected[{std::min(a, b), std::max(a, b)}];
    }
  }
  return inc;
}

// Every undirected edge in exactly two triangles, traversed once each way.
bool watertight_and_oriented(const TriangleMesh& m) {
  const Incidence inc = incidence(m);
  for (const auto& [e, n] : inc.undirected)
    if (n != 2) return false;
  for (const auto& [e, n] : inc.directed)
    if (n != 1 || !inc.directed.contains({e.second, e.first})) return false;
  for (const auto& t : m.triangles)
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) return false;
  return true;
}

long euler(const TriangleMesh& m) {
  std::set<std::uint32_t> used;
  for (const auto& t : m.triangles) used.insert(t.begin(), t.end());
  return static_cast<long>(used.size()) - static_cast<long>(incidence(m).undirected.size()) +
         static_cast<long>(m.triangles.size());
}

double signed_volume(const TriangleMesh& m) {
  double v = 0;
  for (const auto& t : m.triangles) {
    const auto &a = m.vertices[t[0]], &b = m.vertices[t[1]], &c = m.vertices[t[2]];
    v += (a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])) / 6.0;
  }
  return v;
}

std::array<float, 6> bbox(const TriangleMesh& m) {
  std::array<float, 6> b{1e30f, 1e30f, 1e30f, -1e30f, -1e30f, -1e30f};
  for (const auto& v : m.vertices)
    for (int a = 0; a < 3; ++a) {
      b[a] = std::min(b[a], v[a]);
      b[a + 3] = std::max(b[a + 3], v[a]);
    }
  return b;
}

double bbox_volume(const TriangleMesh& m) {
  const auto b = bbox(m);
  return static_cast<double>(b[3] - b[0]) * (b[4] - b[1]) * (b[5] - b[2]);
}

}  // namespace

TEST(MarchingCubes, AbsentLabelIsEmpty) {
  EXPECT_TRUE(marching_cubes(LabelMap({4, 4, 4}, 1), 2).empty());
}

TEST(MarchingCubes, SingleVoxel) {
  LabelMap m({3, 3, 3}, 0);
  m.at(1, 1, 1) = 5;
  const TriangleMesh mesh = marching_cubes(m, 5);
  EXPECT_EQ(mesh.vertices.size(), 6u);
  EXPECT_EQ(mesh.triangles.size(), 8u);
  EXPECT_EQ(euler(mesh), 2);
  EXPECT_TRUE(watertight_and_oriented(mesh));
  EXPECT_NEAR(signed_volume(mesh), 1.0 / 6.0, 1e-6);
}

TEST(MarchingCubes, SolidBlock) {
  LabelMap m({4, 4, 4}, 0);
  for (int z = 1; z < 3; ++z)
    for (int y = 1; y < 3; ++y)
      for (int x = 1; x < 3; ++x) m.at(x, y, z) = 1;
  const TriangleMesh mesh = marching_cubes(m, 1);
  EXPECT_EQ(euler(mesh), 2);
  EXPECT_TRUE(watertight_and_oriented(mesh));
  EXPECT_GT(signed_volume(mesh), 0.0);
}

TEST(MarchingCubes, EveryCornerConfiguration) {
  for (int config = 1; config < 256; ++config) {
    LabelMap m({2, 2, 2}, 0);
    for (int c = 0; c < 8; ++c)
      if ((config >> c) & 1) m.values[c] = 1;
    const TriangleMesh mesh = marching_cubes(m, 1);
    ASSERT_TRUE(watertight_and_oriented(mesh)) << "configuration " << config;
    ASSERT_GT(signed_volume(mesh), 0.0) << "configuration " << config;
  }
}

TEST(MarchingCubes, RandomLabelMapsAreWatertight) {
  std::mt19937 rng(71);
  std::uniform_int_distribution<Label> lab(1, 3);
  for (int trial = 0; trial < 30; ++trial) {
    LabelMap m({7, 6, 5});
    for (auto& l : m.values) l = lab(rng);
    for (Label l = 1; l <= 3; ++l) {
      const TriangleMesh mesh = marching_cubes(m, l);
      ASSERT_TRUE(watertight_and_oriented(mesh)) << "trial " << trial << " label " << l;
      EXPECT_GT(signed_volume(mesh), 0.0);
      // Euler characteristic of a closed orientable surface is even
      EXPECT_EQ(euler(mesh) % 2, 0);
    }
  }
}

TEST(MarchingCubes, SeparateBlobsCountTwice) {
  LabelMap m({7, 3, 3}, 0);
  m.at(1, 1, 1) = 1;
  m.at(5, 1, 1) = 1;
  EXPECT_EQ(euler(marching_cubes(m, 1)), 4);
}

TEST(MarchingCubes, InvariantUnderOtherRelabeling) {
  std::mt19937 rng(72);
  std::uniform_int_distribution<Label> lab(1, 4);
  LabelMap m({6, 6, 6});
  for (auto& l : m.values) l = lab(rng);
  LabelMap r = m;
  for (auto& l : r.values)
    if (l != 2) l = l * 10;
  EXPECT_EQ(marching_cubes(m, 2), marching_cubes(r, 2));
}

TEST(MarchingCubes, BorderMeshOfCells) {
  std::mt19937 rng(73);
  const LabelMap gt = seg3d::testing::jittered_box_partition({16, 16, 16}, 2, 2, 2, 1, rng);
  const TriangleMesh mesh = border_mesh(border_mask(gt));
  EXPECT_FALSE(mesh.empty());
  EXPECT_TRUE(watertight_and_oriented(mesh));
}

TEST(Smoothing, PreservesStructureAndShrinksBox) {
  std::mt19937 rng(74);
  std::uniform_int_distribution<Label> lab(1, 2);
  LabelMap m({8, 8, 8});
  for (auto& l : m.values) l = lab(rng);
  const TriangleMesh mesh = marching_cubes(m, 1);
  EXPECT_EQ(laplacian_smooth(mesh, 0), mesh);
  TriangleMesh cur = mesh;
  for (int it = 0; it < 5; ++it) {
    const TriangleMesh next = laplacian_smooth(cur, 1, 0.5);
    EXPECT_EQ(next.triangles, cur.triangles);
    EXPECT_EQ(next.vertices.size(), cur.vertices.size());
    const auto a = bbox(cur), b = bbox(next);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(b[k], a[k]);
      EXPECT_LE(b[k + 3], a[k + 3]);
    }
    EXPECT_LE(bbox_volume(next), bbox_volume(cur));
    cur = next;
  }
  EXPECT_TRUE(watertight_and_oriented(cur));
  EXPECT_THROW(laplacian_smooth(mesh, 1, 0.0), ParameterError);
  EXPECT_THROW(laplacian_smooth(mesh, 1, 1.5), ParameterError);
  EXPECT_NO_THROW(laplacian_smooth(mesh, 1, 1.0));
}

TEST(Obj, ExportAndParse) {
  TriangleMesh tri;
  tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0.25f}};
  tri.triangles = {{0, 1, 2}};
  EXPECT_EQ(export_obj(tri), "v 0 0 0\nv 1 0 0\nv 0 1 0.25\nf 1 2 3\n");
  EXPECT_EQ(export_obj(TriangleMesh{}), "");
  LabelMap m({5, 5, 5}, 0);
  m.at(2, 2, 2) = 1;
  m.at(2, 3, 2) = 1;
  const TriangleMesh mesh = laplacian_smooth(marching_cubes(m, 1));
  EXPECT_EQ(parse_obj(export_obj(mesh)), mesh);
  EXPECT_THROW(parse_obj("v 0 0 0\nf 1 2 3\n"), FormatError);
  const auto j = mesh_to_json(mesh);
  EXPECT_EQ(j["vertices"].size(), mesh.vertices.size());
  EXPECT_EQ(j["triangles"].size(), mesh.triangles.size());
}
