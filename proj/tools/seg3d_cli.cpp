// seg3d: batch access to every pipeline stage, plus the annotation server.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "seg3d/consensus.hpp"
#include "seg3d/http.hpp"
#include "seg3d/mesh.hpp"
#include "seg3d/raster_io.hpp"
#include "seg3d/service.hpp"
#include "seg3d/tiling.hpp"
#include "seg3d/watershed.hpp"

namespace fs = std::filesystem;
using namespace seg3d;
using nlohmann::json;

namespace {

httplib::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

Dims parse_dims(const std::string& s) {
  std::vector<int> v;
  std::size_t pos = 0;
  try {
    while (pos <= s.size()) {
      const auto comma = s.find(',', pos);
      v.push_back(std::stoi(s.substr(pos, comma - pos)));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  } catch (const std::logic_error&) {
    throw ParameterError("dims must be X,Y,Z integers, got '" + s + "'");
  }
  if (v.size() != 3 || v[0] <= 0 || v[1] <= 0 || v[2] <= 0) throw ParameterError("dims must be three positive integers");
  return {v[0], v[1], v[2]};
}

json read_json_file(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  write_file_bytes(p, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Plan from a saved plan file, or from dims and tile parameters.
struct PlanArgs {
  std::string plan_file, dims, volume;
  int tile = 40;
  double overlap = 0.1, border = 0.1;

  void add_to(CLI::App* c, bool allow_file) {
    if (allow_file) c->add_option("--plan", plan_file, "tile plan JSON written by `plan`");
    c->add_option("--dims", dims, "volume dims X,Y,Z");
    c->add_option("--tile", tile, "tile edge length T")->check(CLI::PositiveNumber);
    c->add_option("--overlap", overlap, "overlap fraction of T");
    c->add_option("--border", border, "context border fraction of T");
  }

  TilePlan resolve(std::optional<Dims> volume_dims = std::nullopt) const {
    if (!plan_file.empty()) return plan_from_json(read_json_file(plan_file));
    if (!dims.empty()) return plan_tiles(parse_dims(dims), tile, overlap, border);
    if (volume_dims) return plan_tiles(*volume_dims, tile, overlap, border);
    if (!volume.empty()) return plan_tiles(read_header(volume).dims, tile, overlap, border);
    throw ParameterError("need --plan, --dims or --volume to define the tiling");
  }
};

void print_json(const json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seg3d: seeded watershed segmentation, tiling, consensus and meshing for 3D stacks"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // plan
  PlanArgs plan_args;
  auto* plan_cmd = app.add_subcommand("plan", "print the tile plan as JSON");
  plan_cmd->add_option("--volume", plan_args.volume, "take dims from this raster");
  plan_args.add_to(plan_cmd, false);
  std::string plan_out;
  plan_cmd->add_option("--out", plan_out, "also write the plan to this file");

  // extract
  PlanArgs ex_plan;
  std::string ex_volume, ex_out;
  std::uint32_t ex_tile = 0;
  auto* ex_cmd = app.add_subcommand("extract", "crop one tile's context box out of a volume");
  ex_cmd->add_option("--volume", ex_volume, "intensity raster")->required();
  ex_cmd->add_option("--tile-id", ex_tile, "tile id")->required();
  ex_cmd->add_option("--out", ex_out, "output raster base")->required();
  ex_plan.add_to(ex_cmd, true);

  // segment
  std::string seg_volume, seg_seeds, seg_out;
  auto* seg_cmd = app.add_subcommand("segment", "seeded watershed from a JSON seed list [{x,y,z,label}]");
  seg_cmd->add_option("--volume", seg_volume, "intensity raster")->required();
  seg_cmd->add_option("--seeds", seg_seeds, "seed file")->required();
  seg_cmd->add_option("--out", seg_out, "output label raster base")->required();

  // consensus
  std::vector<std::string> cons_inputs;
  std::string cons_volume, cons_out, cons_prior = "voxelwise";
  int cons_min_cell = 8;
  auto* cons_cmd = app.add_subcommand("consensus", "fuse rater label maps via STAPLE on their borders");
  cons_cmd->add_option("--inputs", cons_inputs, "rater label rasters")->required()->expected(2, -1);
  cons_cmd->add_option("--volume", cons_volume, "intensities used to absorb border voxels");
  cons_cmd->add_option("--out", cons_out, "output label raster base")->required();
  cons_cmd->add_option("--prior", cons_prior, "voxelwise or global")->check(CLI::IsMember({"voxelwise", "global"}));
  cons_cmd->add_option("--min-cell", cons_min_cell, "smallest kept cell in voxels")->check(CLI::NonNegativeNumber);

  // stitch
  PlanArgs st_plan;
  std::vector<std::string> st_tiles;
  std::string st_dir, st_out;
  bool st_partial = false;
  auto* st_cmd = app.add_subcommand("stitch", "assemble fused tile labels into one volume");
  st_plan.add_to(st_cmd, true);
  st_cmd->add_option("--tile-labels", st_tiles, "ID=PATH core label rasters");
  st_cmd->add_option("--dir", st_dir, "directory of <id>.json core label rasters");
  st_cmd->add_option("--out", st_out, "output label raster base")->required();
  st_cmd->add_flag("--partial", st_partial, "allow missing tiles (left 0)");

  // mesh
  std::string mesh_labels, mesh_out;
  Label mesh_label = 0;
  bool mesh_border = false;
  int mesh_iter = 3;
  double mesh_lambda = 0.5;
  auto* mesh_cmd = app.add_subcommand("mesh", "surface of one label (or of the borders) as OBJ");
  mesh_cmd->add_option("--labels", mesh_labels, "label raster")->required();
  auto* label_opt = mesh_cmd->add_option("--label", mesh_label, "label id");
  auto* border_opt = mesh_cmd->add_flag("--border", mesh_border, "mesh the border mask instead");
  label_opt->excludes(border_opt);
  mesh_cmd->add_option("--smooth", mesh_iter, "Laplacian smoothing iterations")->check(CLI::NonNegativeNumber);
  mesh_cmd->add_option("--lambda", mesh_lambda, "smoothing step in (0,1]");
  mesh_cmd->add_option("--out", mesh_out, "OBJ file (stdout if absent)");

  // score
  std::string sc_reference;
  std::vector<std::string> sc_raters;
  bool sc_json = false;
  auto* sc_cmd = app.add_subcommand("score", "border F1 of each rater against a reference labeling");
  sc_cmd->add_option("--reference", sc_reference, "reference label raster")->required();
  sc_cmd->add_option("--raters", sc_raters, "rater label rasters")->required()->expected(1, -1);
  sc_cmd->add_flag("--json", sc_json, "print JSON instead of a table");

  // serve
  std::string sv_config, sv_data, sv_host;
  int sv_port = -1;
  auto* sv_cmd = app.add_subcommand("serve", "run the annotation service");
  sv_cmd->add_option("--config", sv_config, "JSON config file");
  sv_cmd->add_option("--port", sv_port, "listen port (0 picks a free one)");
  sv_cmd->add_option("--host", sv_host, "listen address");
  sv_cmd->add_option("--data-dir", sv_data, "project store directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return 2;
  }

  try {
    if (*plan_cmd) {
      const TilePlan p = plan_args.resolve();
      const json j = to_json(p);
      if (!plan_out.empty()) write_text(plan_out, j.dump(2) + "\n");
      print_json(j);
    } else if (*ex_cmd) {
      const IntensityVolume v = load_volume(ex_volume);
      const TilePlan p = ex_plan.resolve(v.volume.dims);
      const TileBlock<std::uint16_t> b = extract_tile(v.volume, p, ex_tile);
      save_volume({b.volume, v.source_dtype}, ex_out);
      const TileSpec& t = p.tile(ex_tile);
      print_json({{"tile", ex_tile},
                  {"context", detail::box_json(t.context)},
                  {"core", detail::box_json(t.core)},
                  {"core_offset", {b.core_offset.x, b.core_offset.y, b.core_offset.z}}});
    } else if (*seg_cmd) {
      const IntensityVolume v = load_volume(seg_volume);
      const json sj = read_json_file(seg_seeds);
      if (!sj.is_array()) throw FormatError("seed file must be a JSON list of {x,y,z,label}");
      SeedSet seeds;
      try {
        for (const auto& s : sj) {
          const Index i = linear_index(v.volume.dims, s.at("x").get<int>(), s.at("y").get<int>(), s.at("z").get<int>());
          const Label l = s.at("label").get<Label>();
          if (l == 0) throw ParameterError("seed labels must be >= 1");
          seeds.assign(i, l);
        }
      } catch (const json::exception& e) {
        throw FormatError(std::string("bad seed entry: ") + e.what());
      }
      if (seeds.size() == 0) throw ParameterError("seed file has no seeds");
      const Forest f = ift_sc(v.volume, seeds);
      LabelMap out = f.label;
      out.spacing = v.volume.spacing;
      save_labels(out, seg_out);
      std::set<Label> present(out.values.begin(), out.values.end());
      print_json({{"dims", {out.dims.nx, out.dims.ny, out.dims.nz}}, {"seeds", seeds.size()}, {"labels", present.size()}});
    } else if (*cons_cmd) {
      std::vector<LabelMap> raters;
      std::vector<BorderMask> masks;
      for (const auto& p : cons_inputs) {
        raters.push_back(load_labels(p));
        masks.push_back(border_mask(raters.back()));
      }
      for (const auto& r : raters)
        if (r.dims != raters.front().dims) throw ContractError("rater rasters differ in dims");
      const Dims d = raters.front().dims;
      StapleOptions so;
      so.prior = cons_prior == "global" ? StaplePrior::Global : StaplePrior::Voxelwise;
      ConsensusOptions co;
      co.min_cell_voxels = static_cast<std::size_t>(cons_min_cell);
      json report;
      LabelMap fused;
      bool any = false;
      for (const auto& m : masks) any = any || std::count(m.values.begin(), m.values.end(), 1) > 0;
      if (!any) {
        fused = LabelMap(d, 1);
        report["f1"] = std::vector<double>(masks.size(), 1.0);
        report["note"] = "no rater drew a border";
      } else {
        const StapleResult r = staple(masks, so);
        ConsensusLabels c;
        if (!cons_volume.empty()) {
          const IntensityVolume v = load_volume(cons_volume);
          c = consensus_labels(v.volume, r, co);
        } else {
          c = consensus_labels(r, co);
        }
        fused = std::move(c.labels);
        std::vector<double> f1;
        const BorderMask ref = r.threshold();
        for (const auto& m : masks) f1.push_back(f1_score(m, ref));
        report = {{"p", r.p},
                  {"q", r.q},
                  {"iterations", r.iterations},
                  {"converged", r.converged},
                  {"non_informative", r.non_informative},
                  {"cells", c.components},
                  {"dissolved", c.dissolved},
                  {"f1", f1}};
      }
      fused.spacing = raters.front().spacing;
      save_labels(fused, cons_out);
      print_json(report);
    } else if (*st_cmd) {
      const TilePlan p = st_plan.resolve();
      std::map<std::uint32_t, LabelMap> cores;
      for (const auto& spec : st_tiles) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ParameterError("--tile-labels expects ID=PATH, got '" + spec + "'");
        std::uint32_t id;
        try {
          id = static_cast<std::uint32_t>(std::stoul(spec.substr(0, eq)));
        } catch (const std::logic_error&) {
          throw ParameterError("bad tile id in '" + spec + "'");
        }
        cores[id] = load_labels(spec.substr(eq + 1));
      }
      if (!st_dir.empty()) {
        for (const TileSpec& t : p.tiles) {
          const fs::path f = fs::path(st_dir) / (std::to_string(t.id) + ".json");
          if (!cores.contains(t.id) && fs::exists(f)) cores[t.id] = load_labels(f);
        }
      }
      const StitchResult r = stitch(p, cores, st_partial);
      save_labels(r.labels, st_out);
      print_json({{"label_count", r.label_count}, {"matches", r.matches}, {"missing", r.missing}});
    } else if (*mesh_cmd) {
      if (!mesh_border && label_opt->count() == 0) throw ParameterError("mesh needs --label or --border");
      const LabelMap labels = load_labels(mesh_labels);
      const TriangleMesh m = mesh_border ? border_mesh(border_mask(labels)) : marching_cubes(labels, mesh_label);
      const std::string obj = export_obj(laplacian_smooth(m, mesh_iter, mesh_lambda));
      if (mesh_out.empty()) {
        std::cout << obj;
      } else {
        write_text(mesh_out, obj);
        std::cerr << json{{"vertices", m.vertices.size()}, {"triangles", m.triangles.size()}}.dump() << "\n";
      }
    } else if (*sc_cmd) {
      const BorderMask ref = border_mask(load_labels(sc_reference));
      json rows = json::array();
      for (const auto& p : sc_raters) {
        const F1Counts c = border_counts(border_mask(load_labels(p)), ref);
        rows.push_back({{"rater", p}, {"f1", c.f1()}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}});
      }
      if (sc_json) {
        print_json(rows);
      } else {
        std::printf("%-40s %8s %10s %10s %10s\n", "rater", "f1", "tp", "fp", "fn");
        for (const auto& r : rows) {
          std::printf("%-40s %8.4f %10zu %10zu %10zu\n", r["rater"].get<std::string>().c_str(), r["f1"].get<double>(),
                      r["tp"].get<std::size_t>(), r["fp"].get<std::size_t>(), r["fn"].get<std::size_t>());
        }
      }
    } else if (*sv_cmd) {
      ServiceConfig cfg = load_config(sv_config.empty() ? std::nullopt : std::optional<fs::path>(sv_config));
      if (sv_port >= 0) cfg.port = sv_port;
      if (!sv_host.empty()) cfg.host = sv_host;
      if (!sv_data.empty()) cfg.data_dir = sv_data;
      Service svc(cfg);
      httplib::Server srv;
      register_routes(srv, svc);
      const int port = cfg.port == 0 ? srv.bind_to_any_port(cfg.host) : (srv.bind_to_port(cfg.host, cfg.port) ? cfg.port : -1);
      if (port < 0) throw StateError("cannot listen on " + cfg.host + ":" + std::to_string(cfg.port));
      g_server = &srv;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << json{{"listening", cfg.host + ":" + std::to_string(port)}, {"data_dir", cfg.data_dir.string()}}.dump() << "\n";
      srv.listen_after_bind();
      g_server = nullptr;
    }
  } catch (const Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
