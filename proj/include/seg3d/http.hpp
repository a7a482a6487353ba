#pragma once

#include <functional>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "seg3d/service.hpp"

namespace seg3d {

inline int http_status(const std::string& kind) {
  if (kind == "not_found") return 404;
  if (kind == "parameter" || kind == "format" || kind == "codec" || kind == "bounds") return 400;
  if (kind == "contract") return 422;
  if (kind == "state") return 409;
  return 500;
}

namespace detail {

inline void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline void send_error(httplib::Response& res, const std::string& kind, const std::string& message) {
  send_json(res, {{"error", kind}, {"message", message}}, http_status(kind));
}

// Runs a handler, turning library errors into JSON error bodies.
inline httplib::Server::Handler guarded(std::function<void(const httplib::Request&, httplib::Response&)> f) {
  return [f = std::move(f)](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, "parameter", e.what());
    } catch (const std::exception& e) {
      send_error(res, "internal", e.what());
    }
  };
}

inline nlohmann::json body_json(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParameterError(std::string("request body is not JSON: ") + e.what());
  }
}

inline std::uint32_t tile_param(const httplib::Request& req) {
  try {
    return static_cast<std::uint32_t>(std::stoul(req.path_params.at("tile")));
  } catch (const std::logic_error&) {
    throw ParameterError("tile id must be an unsigned integer");
  }
}

inline Label label_param(const httplib::Request& req) {
  try {
    return static_cast<Label>(std::stoul(req.get_param_value("label")));
  } catch (const std::logic_error&) {
    throw ParameterError("label must be an unsigned integer");
  }
}

// Raw little-endian samples; the raster header travels in X-Volume-Header.
template <typename T>
void send_raster(httplib::Response& res, const Grid<T>& g) {
  const auto bytes = encode_raster(g);
  res.set_header("X-Volume-Header", to_json(header_of(g)).dump());
  res.set_content(std::string(bytes.begin(), bytes.end()), "application/octet-stream");
}

}  // namespace detail

inline void register_routes(httplib::Server& srv, Service& svc) {
  using detail::guarded;
  using detail::send_json;
  using Req = httplib::Request;
  using Res = httplib::Response;

  srv.Get("/health", [](const Req&, Res& res) { detail::send_json(res, {{"ok", true}}); });

  srv.Post("/projects", guarded([&svc](const Req& req, Res& res) {
    const std::string id = svc.create_project(detail::body_json(req));
    send_json(res, svc.project_status(id), 201);
  }));
  srv.Get("/projects", guarded([&svc](const Req&, Res& res) { send_json(res, {{"projects", svc.project_ids()}}); }));
  srv.Get("/projects/:id", guarded([&svc](const Req& req, Res& res) {
    send_json(res, svc.project_status(req.path_params.at("id")));
  }));

  auto next = guarded([&svc](const Req& req, Res& res) {
    std::string user = req.get_param_value("user");
    if (user.empty() && !req.body.empty()) user = detail::body_json(req).value("user", "");
    const auto d = svc.next_tile(req.path_params.at("id"), user);
    send_json(res, d ? to_json(*d) : nlohmann::json{{"available", false}});
  });
  srv.Get("/projects/:id/next-tile", next);
  srv.Post("/projects/:id/next-tile", next);

  srv.Get("/projects/:id/tiles/:tile/consensus", guarded([&svc](const Req& req, Res& res) {
    const auto& id = req.path_params.at("id");
    const auto tile = detail::tile_param(req);
    if (req.get_param_value("format") == "raw") {
      detail::send_raster(res, svc.consensus_labels_of(id, tile));
    } else {
      nlohmann::json j = svc.consensus_info(id, tile);
      if (j["status"] == "consensus_ready") j["labels"] = runs_to_json(rle_encode(svc.consensus_labels_of(id, tile)));
      send_json(res, j);
    }
  }));
  srv.Get("/projects/:id/tiles/:tile/meshes", guarded([&svc](const Req& req, Res& res) {
    std::optional<Label> only;
    if (req.has_param("label")) only = detail::label_param(req);
    send_json(res, svc.tile_meshes(req.path_params.at("id"), detail::tile_param(req), only));
  }));
  srv.Get("/projects/:id/stitched", guarded([&svc](const Req& req, Res& res) {
    const bool partial = req.get_param_value("partial") == "1" || req.get_param_value("partial") == "true";
    const StitchResult r = svc.stitched(req.path_params.at("id"), partial);
    res.set_header("X-Label-Count", std::to_string(r.label_count));
    if (req.get_param_value("format") == "rle") {
      send_json(res, {{"dims", {r.labels.dims.nx, r.labels.dims.ny, r.labels.dims.nz}},
                      {"label_count", r.label_count},
                      {"missing", r.missing},
                      {"runs", runs_to_json(rle_encode(r.labels))}});
    } else {
      detail::send_raster(res, r.labels);
    }
  }));
  srv.Get("/projects/:id/scores", guarded([&svc](const Req& req, Res& res) {
    send_json(res, svc.scores(req.path_params.at("id"), req.get_param_value("user")));
  }));

  srv.Get("/sessions/:s", guarded([&svc](const Req& req, Res& res) {
    send_json(res, to_json(svc.describe(req.path_params.at("s"))));
  }));
  srv.Get("/sessions/:s/volume", guarded([&svc](const Req& req, Res& res) {
    detail::send_raster(res, svc.session_volume(req.path_params.at("s")).volume);
  }));
  srv.Get("/sessions/:s/labels", guarded([&svc](const Req& req, Res& res) {
    detail::send_raster(res, svc.session_labels(req.path_params.at("s")));
  }));
  srv.Get("/sessions/:s/journal", guarded([&svc](const Req& req, Res& res) {
    res.set_content(svc.session_journal(req.path_params.at("s")), "application/x-ndjson");
  }));
  srv.Get("/sessions/:s/mesh", guarded([&svc](const Req& req, Res& res) {
    const bool border = req.get_param_value("border") == "1";
    if (!border && !req.has_param("label")) throw ParameterError("mesh needs ?label=<id> or ?border=1");
    const TriangleMesh m = svc.session_mesh(req.path_params.at("s"), border ? 0 : detail::label_param(req));
    if (req.get_param_value("format") == "obj") {
      res.set_content(export_obj(m), "text/plain");
    } else {
      send_json(res, mesh_to_json(m));
    }
  }));
  srv.Post("/sessions/:s/ops", guarded([&svc](const Req& req, Res& res) {
    send_json(res, svc.submit_op(req.path_params.at("s"), detail::body_json(req)));
  }));
  srv.Post("/sessions/:s/finish", guarded([&svc](const Req& req, Res& res) {
    const auto body = detail::body_json(req);
    if (!body.contains("verdict") || !body["verdict"].is_string()) throw ParameterError("finish needs a verdict");
    send_json(res, svc.finish(req.path_params.at("s"), body["verdict"].get<std::string>()));
  }));
}

// Blocks serving the API until srv.stop() is called.
inline bool serve(Service& svc, httplib::Server& srv) {
  register_routes(srv, svc);
  return srv.listen(svc.config().host, svc.config().port);
}

}  // namespace seg3d
