#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "seg3d/error.hpp"
#include "seg3d/grid.hpp"

namespace seg3d {

using Vec3 = std::array<float, 3>;

struct TriangleMesh {
  std::vector<Vec3> vertices;                      // voxel units, voxel centers at integers
  std::vector<std::array<std::uint32_t, 3>> triangles;  // counter-clockwise seen from outside

  bool empty() const noexcept { return triangles.empty(); }
  friend bool operator==(const TriangleMesh&, const TriangleMesh&) = default;
};

namespace mc {

// Cube corners: bit 0 = +x, bit 1 = +y, bit 2 = +z.
inline constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0},
                                      {0, 0, 1}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1}};
// Edges as (corner, corner) with the lower corner first.
inline constexpr int kEdge[12][2] = {{0, 1}, {2, 3}, {4, 5}, {6, 7},   // along x
                                     {0, 2}, {1, 3}, {4, 6}, {5, 7},   // along y
                                     {0, 4}, {1, 5}, {2, 6}, {3, 7}};  // along z
// Faces as corner cycles.
inline constexpr int kFace[6][4] = {{0, 2, 6, 4}, {1, 3, 7, 5}, {0, 1, 5, 4},
                                    {2, 3, 7, 6}, {0, 1, 3, 2}, {4, 5, 7, 6}};

inline int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e) {
    if ((kEdge[e][0] == a && kEdge[e][1] == b) || (kEdge[e][0] == b && kEdge[e][1] == a)) return e;
  }
  return -1;
}

inline int face_of_edge_pair(int e0, int e1) {
  for (int f = 0; f < 6; ++f) {
    int hits = 0;
    for (int k = 0; k < 4; ++k) {
      const int e = edge_between(kFace[f][k], kFace[f][(k + 1) % 4]);
      hits += (e == e0) + (e == e1);
    }
    if (hits == 2) return f;
  }
  return -1;
}

// One polygon of surface in a cube: entries are edge ids, or 12 for the
// cube-local centroid vertex. Triangles list is a flat triple sequence.
struct Case {
  std::vector<int> tris;
};

inline std::array<float, 3> edge_point(int e) {
  const int* a = kCorner[kEdge[e][0]];
  const int* b = kCorner[kEdge[e][1]];
  return {0.5f * (a[0] + b[0]), 0.5f * (a[1] + b[1]), 0.5f * (a[2] + b[2])};
}

// Build the triangle list for one corner configuration. On each face the
// crossing points are joined in pairs; when a face has two diagonal inside
// corners the segments cut off the inside corners (so inside corners never
// connect across a face). Segments chain into loops that are triangulated
// as fans.
inline Case build_case(int config) {
  auto inside = [&](int c) { return (config >> c) & 1; };
  std::array<std::vector<int>, 12> adj;
  for (const auto& f : kFace) {
    int e[4];
    bool cross[4];
    int count = 0;
    for (int k = 0; k < 4; ++k) {
      e[k] = edge_between(f[k], f[(k + 1) % 4]);
      cross[k] = inside(f[k]) != inside(f[(k + 1) % 4]);
      count += cross[k];
    }
    auto link = [&](int a, int b) {
      adj[e[a]].push_back(e[b]);
      adj[e[b]].push_back(e[a]);
    };
    if (count == 2) {
      int a = -1, b = -1;
      for (int k = 0; k < 4; ++k) {
        if (cross[k]) (a < 0 ? a : b) = k;
      }
      link(a, b);
    } else if (count == 4) {
      // edge k joins corner k and k+1; corner k sits between edges k-1 and k
      for (int k = 0; k < 4; ++k) {
        if (inside(f[k])) link((k + 3) % 4, k);
      }
    }
  }

  Case out;
  std::array<bool, 12> used{};
  for (int start = 0; start < 12; ++start) {
    if (adj[start].empty() || used[start]) continue;
    std::vector<int> loop{start};
    used[start] = true;
    int prev = -1, cur = start;
    while (true) {
      const int next = adj[cur][0] != prev ? adj[cur][0] : adj[cur][1];
      if (next == start) break;
      loop.push_back(next);
      used[next] = true;
      prev = cur;
      cur = next;
    }

    // orientation: polygon normal must agree with the inside -> outside direction
    std::array<float, 3> normal{0, 0, 0}, out_dir{0, 0, 0};
    for (std::size_t k = 0; k < loop.size(); ++k) {
      const auto p = edge_point(loop[k]);
      const auto q = edge_point(loop[(k + 1) % loop.size()]);
      normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
      normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
      normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
      const int a = kEdge[loop[k]][0], b = kEdge[loop[k]][1];
      const int sign = inside(a) ? 1 : -1;  // from inside corner a towards b
      for (int ax = 0; ax < 3; ++ax) out_dir[ax] += static_cast<float>(sign * (kCorner[b][ax] - kCorner[a][ax]));
    }
    if (normal[0] * out_dir[0] + normal[1] * out_dir[1] + normal[2] * out_dir[2] < 0) {
      std::reverse(loop.begin(), loop.end());
    }

    // fan start whose diagonals never run inside a cube face
    const std::size_t m = loop.size();
    int fan = -1;
    for (std::size_t s = 0; s < m && fan < 0; ++s) {
      bool ok = true;
      for (std::size_t k = 2; k + 1 < m && ok; ++k) {
        ok = face_of_edge_pair(loop[s], loop[(s + k) % m]) < 0;
      }
      if (ok) fan = static_cast<int>(s);
    }
    if (fan >= 0) {
      for (std::size_t k = 1; k + 1 < m; ++k) {
        out.tris.insert(out.tris.end(), {loop[fan], loop[(fan + k) % m], loop[(fan + k + 1) % m]});
      }
    } else {
      for (std::size_t k = 0; k < m; ++k) out.tris.insert(out.tris.end(), {12, loop[k], loop[(k + 1) % m]});
      out.tris.push_back(-1);  // loop separator so each loop gets its own centroid
    }
  }
  return out;
}

inline const std::array<Case, 256>& case_table() {
  static const std::array<Case, 256> table = [] {
    std::array<Case, 256> t;
    for (int c = 0; c < 256; ++c) t[c] = build_case(c);
    return t;
  }();
  return table;
}

}  // namespace mc

// Isosurface at 0.5 of the indicator of `label`, sampled at voxel centers.
// The volume is padded by one outside voxel, so every mesh is closed.
inline TriangleMesh marching_cubes(const LabelMap& labels, Label label) {
  TriangleMesh mesh;
  const Dims d = labels.dims;
  const Dims p{d.nx + 2, d.ny + 2, d.nz + 2};  // padded sample grid
  auto in = [&](int x, int y, int z) {  // padded coordinates
    --x, --y, --z;
    return d.contains(x, y, z) && labels.values[static_cast<std::size_t>(x) + static_cast<std::size_t>(d.nx) * (y + static_cast<std::size_t>(d.ny) * z)] == label;
  };
  bool present = false;
  for (Label l : labels.values) present = present || l == label;
  if (!present) return mesh;

  const auto& table = mc::case_table();
  std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
  auto vertex_on = [&](int x, int y, int z, int e) {
    const int* a = mc::kCorner[mc::kEdge[e][0]];
    const int ax = e / 4;  // 0..3 x, 4..7 y, 8..11 z
    const std::uint64_t corner = static_cast<std::uint64_t>(x + a[0]) +
                                 static_cast<std::uint64_t>(p.nx) * (static_cast<std::uint64_t>(y + a[1]) + static_cast<std::uint64_t>(p.ny) * static_cast<std::uint64_t>(z + a[2]));
    const std::uint64_t key = corner * 3 + static_cast<std::uint64_t>(ax);
    auto [it, fresh] = edge_vertex.emplace(key, static_cast<std::uint32_t>(mesh.vertices.size()));
    if (fresh) {
      const auto pt = mc::edge_point(e);
      mesh.vertices.push_back({static_cast<float>(x - 1) + pt[0], static_cast<float>(y - 1) + pt[1], static_cast<float>(z - 1) + pt[2]});
    }
    return it->second;
  };

  for (int z = 0; z + 1 < p.nz; ++z) {
    for (int y = 0; y + 1 < p.ny; ++y) {
      for (int x = 0; x + 1 < p.nx; ++x) {
        int config = 0;
        for (int c = 0; c < 8; ++c) {
          if (in(x + mc::kCorner[c][0], y + mc::kCorner[c][1], z + mc::kCorner[c][2])) config |= 1 << c;
        }
        if (config == 0 || config == 255) continue;
        const auto& tris = table[config].tris;
        // centroid loops are listed with a -1 terminator
        std::size_t k = 0;
        while (k < tris.size()) {
          if (tris[k] == 12) {
            std::size_t end = k;
            while (tris[end] != -1) ++end;
            std::array<float, 3> c{0, 0, 0};
            const std::size_t nloop = (end - k) / 3;
            for (std::size_t t = k; t < end; t += 3) {
              const auto pt = mc::edge_point(tris[t + 1]);
              for (int a = 0; a < 3; ++a) c[a] += pt[a] / static_cast<float>(nloop);
            }
            const auto ci = static_cast<std::uint32_t>(mesh.vertices.size());
            mesh.vertices.push_back({static_cast<float>(x - 1) + c[0], static_cast<float>(y - 1) + c[1], static_cast<float>(z - 1) + c[2]});
            for (std::size_t t = k; t < end; t += 3) {
              mesh.triangles.push_back({ci, vertex_on(x, y, z, tris[t + 1]), vertex_on(x, y, z, tris[t + 2])});
            }
            k = end + 1;
          } else {
            mesh.triangles.push_back({vertex_on(x, y, z, tris[k]), vertex_on(x, y, z, tris[k + 1]), vertex_on(x, y, z, tris[k + 2])});
            k += 3;
          }
        }
      }
    }
  }
  return mesh;
}

// Surface of the border voxels of a segmentation.
inline TriangleMesh border_mesh(const Grid<std::uint8_t>& border) {
  LabelMap m(border.dims, 0);
  for (std::size_t i = 0; i < border.size(); ++i) m.values[i] = border.values[i] ? 1 : 0;
  return marching_cubes(m, 1);
}

// v <- v + lambda (mean of edge neighbors - v), applied simultaneously.
inline TriangleMesh laplacian_smooth(const TriangleMesh& mesh, int iterations = 3, double lambda = 0.5) {
  if (!(lambda > 0.0 && lambda <= 1.0)) throw ParameterError("smoothing lambda must be in (0, 1]");
  if (iterations < 0) throw ParameterError("smoothing iterations must be >= 0");
  std::vector<std::vector<std::uint32_t>> nbr(mesh.vertices.size());
  for (const auto& t : mesh.triangles) {
    for (int k = 0; k < 3; ++k) {
      nbr[t[k]].push_back(t[(k + 1) % 3]);
      nbr[t[k]].push_back(t[(k + 2) % 3]);
    }
  }
  for (auto& v : nbr) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  TriangleMesh out = mesh;
  std::vector<Vec3> next(out.vertices.size());
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < out.vertices.size(); ++i) {
      if (nbr[i].empty()) {
        next[i] = out.vertices[i];
        continue;
      }
      double c[3] = {0, 0, 0};
      for (auto j : nbr[i])
        for (int a = 0; a < 3; ++a) c[a] += out.vertices[j][a];
      for (int a = 0; a < 3; ++a) {
        const double mean = c[a] / static_cast<double>(nbr[i].size());
        next[i][a] = static_cast<float>(out.vertices[i][a] + lambda * (mean - out.vertices[i][a]));
      }
    }
    out.vertices.swap(next);
  }
  return out;
}

inline std::string export_obj(const TriangleMesh& mesh) {
  std::string out;
  char buf[96];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(buf, sizeof buf, "v %.9g %.9g %.9g\n", v[0], v[1], v[2]);
    out += buf;
  }
  for (const auto& t : mesh.triangles) {
    std::snprintf(buf, sizeof buf, "f %u %u %u\n", t[0] + 1, t[1] + 1, t[2] + 1);
    out += buf;
  }
  return out;
}

inline TriangleMesh parse_obj(const std::string& text) {
  TriangleMesh mesh;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v[0] >> v[1] >> v[2])) throw FormatError("bad OBJ vertex: " + line);
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::array<std::uint32_t, 3> t;
      if (!(ls >> t[0] >> t[1] >> t[2])) throw FormatError("bad OBJ face: " + line);
      for (auto& i : t) {
        if (i == 0 || i > mesh.vertices.size()) throw FormatError("OBJ face index out of range: " + line);
        --i;
      }
      mesh.triangles.push_back(t);
    }
  }
  return mesh;
}

inline nlohmann::json mesh_to_json(const TriangleMesh& mesh) {
  nlohmann::json v = nlohmann::json::array(), t = nlohmann::json::array();
  for (const Vec3& p : mesh.vertices) v.push_back({p[0], p[1], p[2]});
  for (const auto& f : mesh.triangles) t.push_back({f[0], f[1], f[2]});
  return {{"vertices", std::move(v)}, {"triangles", std::move(t)}};
}

}  // namespace seg3d
