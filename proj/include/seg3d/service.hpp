#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#ifdef __linux__
#include <pthread.h>
#include <sched.h>
#endif

#include "json.hpp"
#include "seg3d/consensus.hpp"
#include "seg3d/edit_session.hpp"
#include "seg3d/error.hpp"
#include "seg3d/geodesic.hpp"
#include "seg3d/mesh.hpp"
#include "seg3d/raster_io.hpp"
#include "seg3d/rle.hpp"
#include "seg3d/tiling.hpp"

namespace seg3d {

inline nlohmann::json runs_to_json(const RleRuns& runs) {
  nlohmann::json a = nlohmann::json::array();
  for (const RleRun& r : runs) a.push_back({r.start, r.length, r.label});
  return a;
}

inline RleRuns runs_from_json(const nlohmann::json& j) {
  RleRuns out;
  try {
    for (const auto& t : j) out.push_back({t.at(0).get<Index>(), t.at(1).get<Index>(), t.at(2).get<Label>()});
  } catch (const nlohmann::json::exception& e) {
    throw CodecError(std::string("runs must be [start, length, label] triples: ") + e.what());
  }
  return out;
}

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path data_dir = "seg3d-data";
  int k = 3;
  int tile_size = 40;
  double overlap = 0.1;
  double border = 0.1;
  int smoothing_iterations = 3;
};

// JSON file (all keys optional) overridden by SEG3D_* environment variables.
inline ServiceConfig load_config(const std::optional<std::filesystem::path>& file = std::nullopt) {
  ServiceConfig c;
  if (file) {
    const auto bytes = read_file_bytes(*file);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(bytes.begin(), bytes.end());
      c.host = j.value("host", c.host);
      c.port = j.value("port", c.port);
      c.data_dir = j.value("data_dir", c.data_dir.string());
      c.k = j.value("k", c.k);
      c.tile_size = j.value("tile_size", c.tile_size);
      c.overlap = j.value("overlap", c.overlap);
      c.border = j.value("border", c.border);
      c.smoothing_iterations = j.value("smoothing_iterations", c.smoothing_iterations);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("config " + file->string() + ": " + e.what());
    }
  }
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    return v && *v ? std::optional<std::string>(v) : std::nullopt;
  };
  try {
    if (auto v = env("SEG3D_HOST")) c.host = *v;
    if (auto v = env("SEG3D_PORT")) c.port = std::stoi(*v);
    if (auto v = env("SEG3D_DATA_DIR")) c.data_dir = *v;
    if (auto v = env("SEG3D_K")) c.k = std::stoi(*v);
    if (auto v = env("SEG3D_TILE_SIZE")) c.tile_size = std::stoi(*v);
    if (auto v = env("SEG3D_OVERLAP")) c.overlap = std::stod(*v);
    if (auto v = env("SEG3D_BORDER")) c.border = std::stod(*v);
  } catch (const std::logic_error&) {
    throw ParameterError("malformed SEG3D_* environment override");
  }
  if (c.k < 2) throw ParameterError("K must be >= 2 for consensus");
  return c;
}

enum class TaskStatus { Open, InProgress, PendingConsensus, ConsensusReady };

inline const char* status_name(TaskStatus s) {
  switch (s) {
    case TaskStatus::Open: return "open";
    case TaskStatus::InProgress: return "in_progress";
    case TaskStatus::PendingConsensus: return "done_pending_consensus";
    case TaskStatus::ConsensusReady: return "consensus_ready";
  }
  return "?";
}

struct Submission {
  std::string user;
  std::size_t ops = 0;
  double elapsed_s = 0;
  std::string file;  // raster base name inside the tile directory
};

struct TileTask {
  std::uint32_t id = 0;
  std::vector<Submission> submissions;
  std::vector<std::string> skips;
  std::set<std::string> reserved;  // users holding a live session (not persisted)
  bool consensus_ready = false;
  std::string consensus_error;
  std::map<std::string, double> f1;

  bool submitted_by(const std::string& u) const {
    return std::any_of(submissions.begin(), submissions.end(), [&](const Submission& s) { return s.user == u; });
  }
  bool skipped_by(const std::string& u) const { return std::find(skips.begin(), skips.end(), u) != skips.end(); }
};

struct SessionDescriptor {
  std::string token;
  std::string project;
  std::uint32_t tile = 0;
  std::string user;
  std::string mode;  // "scratch" or "correction"
  Box core;
  Box context;
  Coord core_offset;
  RleRuns initial_labels;
};

inline nlohmann::json to_json(const SessionDescriptor& d) {
  auto box = [](const Box& b) {
    return nlohmann::json{{"origin", {b.origin.x, b.origin.y, b.origin.z}},
                          {"extent", {b.extent.nx, b.extent.ny, b.extent.nz}}};
  };
  return {{"available", true},
          {"session", d.token},
          {"project", d.project},
          {"tile", d.tile},
          {"user", d.user},
          {"mode", d.mode},
          {"core", box(d.core)},
          {"context", box(d.context)},
          {"core_offset", {d.core_offset.x, d.core_offset.y, d.core_offset.z}},
          {"dims", {d.context.extent.nx, d.context.extent.ny, d.context.extent.nz}},
          {"initial_labels", runs_to_json(d.initial_labels)}};
}

// Projects, tile dispatch, live sessions and the consensus worker. All
// state lives under `data_dir/projects/<id>/`; live sessions are not
// persisted, so a restart returns their tiles to the pool.
class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    std::filesystem::create_directories(projects_root());
    for (const auto& entry : std::filesystem::directory_iterator(projects_root())) {
      if (entry.is_directory() && std::filesystem::exists(entry.path() / "project.json")) load_project(entry.path());
    }
    worker_ = std::thread([this] { work(); });
    std::lock_guard lock(mutex_);
    for (auto& [id, p] : projects_) {
      for (const TileTask& t : p->tasks) {
        if (!t.consensus_ready && t.consensus_error.empty() && static_cast<int>(t.submissions.size()) >= p->k) {
          enqueue_locked(id, t.id);
        }
      }
    }
  }

  ~Service() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    work_cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const noexcept { return cfg_; }

  // {volume_path, presegmentation_path?, tile_size?, overlap?, border?, k?}
  std::string create_project(const nlohmann::json& req) {
    if (!req.is_object() || !req.contains("volume_path")) throw ParameterError("project request needs volume_path");
    try {
      IntensityVolume vol = load_volume(req.at("volume_path").get<std::string>());
      std::optional<LabelMap> pre;
      if (req.contains("presegmentation_path") && !req["presegmentation_path"].is_null()) {
        pre = load_labels(req["presegmentation_path"].get<std::string>());
      }
      return create_project(std::move(vol), std::move(pre), req.value("tile_size", cfg_.tile_size),
                            req.value("overlap", cfg_.overlap), req.value("border", cfg_.border), req.value("k", cfg_.k),
                            req["volume_path"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw ParameterError(std::string("malformed project request: ") + e.what());
    }
  }

  std::string create_project(IntensityVolume volume, std::optional<LabelMap> presegmentation, int tile_size,
                             double overlap, double border, int k, const std::string& source = "") {
    if (k < 2) throw ParameterError("K must be >= 2");
    if (presegmentation && presegmentation->dims != volume.volume.dims) {
      throw ContractError("pre-segmentation dims " + to_string(presegmentation->dims) + " differ from volume " +
                          to_string(volume.volume.dims));
    }
    auto p = std::make_shared<Project>();
    p->plan = plan_tiles(volume.volume.dims, tile_size, overlap, border);
    p->k = k;
    p->source = source;
    p->volume = std::move(volume);
    p->presegmentation = std::move(presegmentation);
    for (const TileSpec& t : p->plan.tiles) p->tasks.push_back(TileTask{t.id, {}, {}, {}, false, {}, {}});

    std::lock_guard lock(mutex_);
    std::size_t n = projects_.size() + 1;
    while (projects_.contains("p" + std::to_string(n)) || std::filesystem::exists(projects_root() / ("p" + std::to_string(n)))) ++n;
    p->id = "p" + std::to_string(n);
    p->dir = projects_root() / p->id;
    save_volume(p->volume, p->dir / "volume");
    if (p->presegmentation) save_labels(*p->presegmentation, p->dir / "presegmentation");
    persist_locked(*p);
    projects_.emplace(p->id, p);
    return p->id;
  }

  std::vector<std::string> project_ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, _] : projects_) out.push_back(id);
    return out;
  }

  nlohmann::json project_status(const std::string& id) const {
    std::lock_guard lock(mutex_);
    const Project& p = project_locked(id);
    nlohmann::json tasks = nlohmann::json::array(), skipped = nlohmann::json::array();
    std::map<std::string, std::size_t> counts;
    for (const TileTask& t : p.tasks) {
      const TaskStatus s = status_locked(p, t);
      ++counts[status_name(s)];
      tasks.push_back({{"tile", t.id},
                       {"status", status_name(s)},
                       {"submissions", t.submissions.size()},
                       {"skips", t.skips},
                       {"live_sessions", t.reserved.size()},
                       {"error", t.consensus_error}});
      if (!t.skips.empty() && s != TaskStatus::ConsensusReady && s != TaskStatus::PendingConsensus) skipped.push_back(t.id);
    }
    return {{"id", p.id},
            {"source", p.source},
            {"dims", {p.plan.dims.nx, p.plan.dims.ny, p.plan.dims.nz}},
            {"k", p.k},
            {"mode", p.presegmentation ? "correction" : "scratch"},
            {"tile_count", p.plan.size()},
            {"status_counts", counts},
            {"skipped_tiles", skipped},
            {"tasks", tasks},
            {"plan", to_json(p.plan)}};
  }

  const TilePlan& plan(const std::string& id) const {
    std::lock_guard lock(mutex_);
    return project_locked(id).plan;
  }

  // Next tile for `user`: never one they submitted, skipped or hold open;
  // fewest submissions plus live sessions first, then lowest tile id.
  std::optional<SessionDescriptor> next_tile(const std::string& project, const std::string& user) {
    if (user.empty()) throw ParameterError("user id is required");
    std::unique_lock lock(mutex_);
    Project& p = project_locked(project);
    TileTask* best = nullptr;
    std::size_t best_load = 0;
    for (TileTask& t : p.tasks) {
      if (t.submitted_by(user) || t.skipped_by(user) || t.reserved.contains(user)) continue;
      const std::size_t load = t.submissions.size() + t.reserved.size();
      if (static_cast<int>(load) >= p.k) continue;
      if (!best || load < best_load) {
        best = &t;
        best_load = load;
      }
    }
    if (!best) return std::nullopt;
    best->reserved.insert(user);
    const TileSpec spec = p.plan.tile(best->id);
    auto volume = std::make_shared<const Volume16>(crop(p.volume.volume, spec.context));
    SeedSet initial;
    if (p.presegmentation) initial = init_from_presegmentation(crop(*p.presegmentation, spec.context)).seeds;
    auto s = std::make_shared<Session>();
    s->token = new_token_locked();
    s->project = project;
    s->user = user;
    s->tile = best->id;
    s->spec = spec;
    s->mode = p.presegmentation ? "correction" : "scratch";
    s->source_dtype = p.volume.source_dtype;
    sessions_.emplace(s->token, s);
    lock.unlock();

    // seed competition on the initial seeds runs outside the service lock
    try {
      s->edit = std::make_unique<EditSession<std::uint16_t>>(volume, initial);
    } catch (...) {
      std::lock_guard relock(mutex_);
      sessions_.erase(s->token);
      project_locked(project).tasks[s->tile].reserved.erase(user);
      throw;
    }
    s->started = std::chrono::steady_clock::now();
    {
      std::lock_guard ready(s->mutex);
      s->ready = true;
    }
    s->ready_cv.notify_all();
    SessionDescriptor d = describe(*s);
    d.initial_labels = rle_encode(s->edit->labels());
    return d;
  }

  // Apply one edit operation; returns the label delta and bookkeeping.
  nlohmann::json submit_op(const std::string& token, const nlohmann::json& op) {
    auto s = session(token);
    std::lock_guard lock(s->mutex);
    if (s->closed) throw StateError("session " + token + " is closed");
    const OpResult r = s->edit->apply_json(op);
    return {{"delta", runs_to_json(r.delta.changed)},
            {"noop", r.noop},
            {"reevaluated", r.delta.reevaluated},
            {"label", r.label},
            {"scribble", r.scribble},
            {"cursor", s->edit->cursor()},
            {"history", s->edit->history_size()}};
  }

  SessionDescriptor describe(const std::string& token) {
    auto s = session(token);
    std::lock_guard lock(s->mutex);
    SessionDescriptor d = describe(*s);
    d.initial_labels = rle_encode(s->edit->labels());
    return d;
  }

  IntensityVolume session_volume(const std::string& token) {
    auto s = session(token);
    std::lock_guard lock(s->mutex);
    return {s->edit->volume(), s->source_dtype};
  }

  LabelMap session_labels(const std::string& token) {
    auto s = session(token);
    std::lock_guard lock(s->mutex);
    return s->edit->labels();
  }

  std::string session_journal(const std::string& token) {
    auto s = session(token);
    std::lock_guard lock(s->mutex);
    return s->edit->journal_jsonl();
  }

  // Smoothed surface of one label (label 0: the border surface).
  TriangleMesh session_mesh(const std::string& token, Label label) {
    LabelMap labels = session_labels(token);
    TriangleMesh m = label == 0 ? border_mesh(border_mask(labels)) : marching_cubes(labels, label);
    return laplacian_smooth(m, cfg_.smoothing_iterations);
  }

  // verdict "done" records the core labels; "skip" records the user as skipper.
  nlohmann::json finish(const std::string& token, const std::string& verdict) {
    if (verdict != "done" && verdict != "skip") throw ParameterError("verdict must be done or skip");
    auto s = session(token);
    std::unique_lock slock(s->mutex);
    if (s->closed) throw StateError("session " + token + " is already finished");
    s->closed = true;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - s->started).count();
    std::optional<LabelMap> core;
    if (verdict == "done") {
      const Box local{{s->spec.core.origin.x - s->spec.context.origin.x, s->spec.core.origin.y - s->spec.context.origin.y,
                       s->spec.core.origin.z - s->spec.context.origin.z},
                      s->spec.core.extent};
      core = crop(s->edit->labels(), local);
    }
    const std::size_t ops = s->edit->interaction_count();
    const std::string journal = s->edit->journal_jsonl();
    slock.unlock();

    std::lock_guard lock(mutex_);
    Project& p = project_locked(s->project);
    TileTask& t = p.tasks[s->tile];
    t.reserved.erase(s->user);
    if (verdict == "skip") {
      if (!t.skipped_by(s->user)) t.skips.push_back(s->user);
    } else {
      if (t.submitted_by(s->user)) throw StateError("user " + s->user + " already submitted tile " + std::to_string(t.id));
      if (static_cast<int>(t.submissions.size()) >= p.k) throw StateError("tile " + std::to_string(t.id) + " is full");
      Submission sub{s->user, ops, elapsed, "sub" + std::to_string(t.submissions.size())};
      const auto dir = tile_dir(p, t.id);
      save_labels(*core, dir / sub.file);
      write_file_bytes(dir / (sub.file + ".ops.jsonl"),
                       std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(journal.data()), journal.size()));
      t.submissions.push_back(sub);
      if (static_cast<int>(t.submissions.size()) == p.k) enqueue_locked(p.id, t.id);
    }
    persist_locked(p);
    return {{"tile", t.id}, {"status", status_name(status_locked(p, t))}, {"submissions", t.submissions.size()}};
  }

  nlohmann::json consensus_info(const std::string& project, std::uint32_t tile) const {
    std::lock_guard lock(mutex_);
    const Project& p = project_locked(project);
    const TileTask& t = task_locked(p, tile);
    nlohmann::json j{{"tile", tile}, {"status", status_name(status_locked(p, t))}, {"error", t.consensus_error}};
    if (t.consensus_ready) {
      const auto bytes = read_file_bytes(tile_dir(p, tile) / "staple.json");
      j["staple"] = nlohmann::json::parse(bytes.begin(), bytes.end());
      j["f1"] = t.f1;
    }
    return j;
  }

  LabelMap consensus_labels_of(const std::string& project, std::uint32_t tile) const {
    std::lock_guard lock(mutex_);
    const Project& p = project_locked(project);
    const TileTask& t = task_locked(p, tile);
    if (!t.consensus_ready) throw StateError("tile " + std::to_string(tile) + " has no consensus yet");
    return load_labels(tile_dir(p, tile) / "consensus");
  }

  StitchResult stitched(const std::string& project, bool partial = false) const {
    std::map<std::uint32_t, LabelMap> cores;
    TilePlan plan;
    {
      std::lock_guard lock(mutex_);
      const Project& p = project_locked(project);
      plan = p.plan;
      for (const TileTask& t : p.tasks) {
        if (t.consensus_ready) cores.emplace(t.id, load_labels(tile_dir(p, t.id) / "consensus"));
      }
    }
    return stitch(plan, cores, partial);
  }

  // Per-user F1 against each tile consensus, plus mean and sample sd.
  nlohmann::json scores(const std::string& project, const std::string& user = "") const {
    std::lock_guard lock(mutex_);
    const Project& p = project_locked(project);
    std::map<std::string, std::vector<nlohmann::json>> rows;
    for (const TileTask& t : p.tasks) {
      if (!t.consensus_ready) continue;
      for (const Submission& s : t.submissions) {
        if (!user.empty() && s.user != user) continue;
        auto it = t.f1.find(s.user);
        rows[s.user].push_back({{"tile", t.id},
                                {"f1", it == t.f1.end() ? nlohmann::json(nullptr) : nlohmann::json(it->second)},
                                {"ops", s.ops},
                                {"time_s", s.elapsed_s}});
      }
    }
    auto stats = [](const std::vector<double>& v) {
      double mean = 0, ss = 0;
      for (double x : v) mean += x;
      mean /= v.empty() ? 1.0 : static_cast<double>(v.size());
      for (double x : v) ss += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      return nlohmann::json{{"mean", mean}, {"sd", sd}, {"n", v.size()}};
    };
    nlohmann::json out = nlohmann::json::object();
    for (auto& [u, list] : rows) {
      std::vector<double> f1, ops, time;
      for (const auto& r : list) {
        if (r["f1"].is_number()) f1.push_back(r["f1"].get<double>());
        ops.push_back(r["ops"].get<double>());
        time.push_back(r["time_s"].get<double>());
      }
      out[u] = {{"tiles", list}, {"f1", stats(f1)}, {"ops", stats(ops)}, {"time_s", stats(time)}};
    }
    return out;
  }

  // Smoothed per-label meshes of a tile consensus, in global voxel coordinates.
  nlohmann::json tile_meshes(const std::string& project, std::uint32_t tile, std::optional<Label> only = std::nullopt) const {
    const LabelMap labels = consensus_labels_of(project, tile);
    Coord origin;
    {
      std::lock_guard lock(mutex_);
      origin = project_locked(project).plan.tile(tile).core.origin;
    }
    std::set<Label> present(labels.values.begin(), labels.values.end());
    nlohmann::json meshes = nlohmann::json::array();
    for (Label l : present) {
      if (l == 0 || (only && *only != l)) continue;
      TriangleMesh m = laplacian_smooth(marching_cubes(labels, l), cfg_.smoothing_iterations);
      for (auto& v : m.vertices) {
        v[0] += static_cast<float>(origin.x);
        v[1] += static_cast<float>(origin.y);
        v[2] += static_cast<float>(origin.z);
      }
      nlohmann::json j = mesh_to_json(m);
      j["label"] = l;
      meshes.push_back(std::move(j));
    }
    return {{"tile", tile}, {"meshes", meshes}};
  }

  // Block until the consensus queue is drained.
  void wait_idle() {
    std::unique_lock lock(mutex_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && !busy_; });
  }

 private:
  struct Project {
    std::string id;
    std::filesystem::path dir;
    std::string source;
    IntensityVolume volume;
    std::optional<LabelMap> presegmentation;
    TilePlan plan;
    int k = 3;
    std::vector<TileTask> tasks;
  };

  struct Session {
    std::mutex mutex;
    std::condition_variable ready_cv;
    bool ready = false;
    bool closed = false;
    std::string token, project, user, mode;
    std::uint32_t tile = 0;
    TileSpec spec;
    DType source_dtype = DType::U16;
    std::unique_ptr<EditSession<std::uint16_t>> edit;
    std::chrono::steady_clock::time_point started;
  };

  std::filesystem::path projects_root() const { return cfg_.data_dir / "projects"; }
  static std::filesystem::path tile_dir(const Project& p, std::uint32_t t) { return p.dir / "tiles" / std::to_string(t); }

  Project& project_locked(const std::string& id) {
    auto it = projects_.find(id);
    if (it == projects_.end()) throw NotFoundError("unknown project " + id);
    return *it->second;
  }
  const Project& project_locked(const std::string& id) const {
    auto it = projects_.find(id);
    if (it == projects_.end()) throw NotFoundError("unknown project " + id);
    return *it->second;
  }
  static const TileTask& task_locked(const Project& p, std::uint32_t tile) {
    if (tile >= p.tasks.size()) throw NotFoundError("unknown tile " + std::to_string(tile));
    return p.tasks[tile];
  }

  TaskStatus status_locked(const Project& p, const TileTask& t) const {
    if (t.consensus_ready) return TaskStatus::ConsensusReady;
    if (static_cast<int>(t.submissions.size()) >= p.k) return TaskStatus::PendingConsensus;
    if (!t.reserved.empty()) return TaskStatus::InProgress;
    return TaskStatus::Open;
  }

  std::shared_ptr<Session> session(const std::string& token) {
    std::shared_ptr<Session> s;
    {
      std::lock_guard lock(mutex_);
      auto it = sessions_.find(token);
      if (it == sessions_.end()) throw NotFoundError("unknown session " + token);
      s = it->second;
    }
    std::unique_lock lock(s->mutex);
    s->ready_cv.wait(lock, [&] { return s->ready; });
    return s;
  }

  SessionDescriptor describe(const Session& s) const {
    SessionDescriptor d;
    d.token = s.token;
    d.project = s.project;
    d.tile = s.tile;
    d.user = s.user;
    d.mode = s.mode;
    d.core = s.spec.core;
    d.context = s.spec.context;
    d.core_offset = {s.spec.core.origin.x - s.spec.context.origin.x, s.spec.core.origin.y - s.spec.context.origin.y,
                     s.spec.core.origin.z - s.spec.context.origin.z};
    return d;
  }

  std::string new_token_locked() {
    static constexpr char kHex[] = "0123456789abcdef";
    std::string t;
    do {
      t.clear();
      for (int i = 0; i < 2; ++i) {
        std::uint64_t v = rng_();
        for (int k = 0; k < 16; ++k, v >>= 4) t += kHex[v & 15];
      }
    } while (sessions_.contains(t));
    return t;
  }

  // project.json is rewritten through a temporary file so a crash leaves
  // either the old or the new metadata.
  void persist_locked(const Project& p) const {
    nlohmann::json tasks = nlohmann::json::array();
    for (const TileTask& t : p.tasks) {
      nlohmann::json subs = nlohmann::json::array();
      for (const Submission& s : t.submissions) {
        subs.push_back({{"user", s.user}, {"ops", s.ops}, {"elapsed_s", s.elapsed_s}, {"file", s.file}});
      }
      tasks.push_back({{"tile", t.id},
                       {"submissions", subs},
                       {"skips", t.skips},
                       {"consensus_ready", t.consensus_ready},
                       {"consensus_error", t.consensus_error},
                       {"f1", t.f1}});
    }
    const nlohmann::json j{{"id", p.id},
                           {"source", p.source},
                           {"k", p.k},
                           {"tile_size", p.plan.tile_size},
                           {"overlap_fraction", p.plan.overlap_fraction},
                           {"border_fraction", p.plan.border_fraction},
                           {"presegmentation", p.presegmentation.has_value()},
                           {"tasks", tasks}};
    const std::string text = j.dump(1) + "\n";
    const auto tmp = p.dir / "project.json.tmp";
    write_file_bytes(tmp, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    std::filesystem::rename(tmp, p.dir / "project.json");
  }

  void load_project(const std::filesystem::path& dir) {
    const auto bytes = read_file_bytes(dir / "project.json");
    auto p = std::make_shared<Project>();
    try {
      const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
      p->id = j.at("id").get<std::string>();
      p->dir = dir;
      p->source = j.value("source", "");
      p->k = j.at("k").get<int>();
      p->volume = load_volume(dir / "volume");
      if (j.value("presegmentation", false)) p->presegmentation = load_labels(dir / "presegmentation");
      p->plan = plan_tiles(p->volume.volume.dims, j.at("tile_size").get<int>(), j.at("overlap_fraction").get<double>(),
                           j.at("border_fraction").get<double>());
      for (const auto& tj : j.at("tasks")) {
        TileTask t;
        t.id = tj.at("tile").get<std::uint32_t>();
        for (const auto& sj : tj.at("submissions")) {
          t.submissions.push_back({sj.at("user").get<std::string>(), sj.at("ops").get<std::size_t>(),
                                   sj.at("elapsed_s").get<double>(), sj.at("file").get<std::string>()});
        }
        t.skips = tj.at("skips").get<std::vector<std::string>>();
        t.consensus_ready = tj.at("consensus_ready").get<bool>();
        t.consensus_error = tj.value("consensus_error", "");
        t.f1 = tj.at("f1").get<std::map<std::string, double>>();
        p->tasks.push_back(std::move(t));
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("project metadata " + (dir / "project.json").string() + ": " + e.what());
    }
    if (p->tasks.size() != p->plan.size()) throw FormatError("project " + p->id + " task list does not match its plan");
    projects_.emplace(p->id, p);
  }

  void enqueue_locked(const std::string& project, std::uint32_t tile) {
    queue_.emplace_back(project, tile);
    work_cv_.notify_one();
  }

  void work() {
#ifdef __linux__
    // Consensus is background work; it only gets cycles edit requests leave.
    sched_param idle{};
    ::pthread_setschedparam(::pthread_self(), SCHED_IDLE, &idle);
#endif
    std::unique_lock lock(mutex_);
    while (true) {
      work_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      auto [project, tile] = queue_.front();
      queue_.pop_front();
      busy_ = true;
      run_consensus(lock, project, tile);
      busy_ = false;
      if (queue_.empty()) idle_cv_.notify_all();
    }
  }

  // Called with the lock held; drops it while computing.
  void run_consensus(std::unique_lock<std::mutex>& lock, const std::string& project, std::uint32_t tile) {
    auto it = projects_.find(project);
    if (it == projects_.end()) return;
    std::shared_ptr<Project> p = it->second;
    const std::vector<Submission> subs = p->tasks[tile].submissions;
    const TileSpec spec = p->plan.tile(tile);
    const auto dir = tile_dir(*p, tile);
    lock.unlock();

    std::string error;
    std::map<std::string, double> f1;
    try {
      const Volume16 core = crop(p->volume.volume, spec.core);
      std::vector<BorderMask> masks;
      for (const Submission& s : subs) masks.push_back(border_mask(load_labels(dir / s.file)));
      bool any_border = false;
      for (const auto& m : masks) any_border = any_border || std::count(m.values.begin(), m.values.end(), 1) > 0;
      LabelMap fused;
      nlohmann::json info;
      if (!any_border) {
        // every rater left the tile as one region
        fused = LabelMap(spec.core.extent, 1);
        for (const Submission& s : subs) f1[s.user] = 1.0;
        info = {{"p", nullptr}, {"q", nullptr}, {"iterations", 0}, {"note", "no rater drew a border"}};
      } else {
        const StapleResult r = staple(masks);
        fused = consensus_labels(core, r).labels;
        const BorderMask consensus_border = r.threshold();
        for (std::size_t j = 0; j < subs.size(); ++j) f1[subs[j].user] = f1_score(masks[j], consensus_border);
        info = {{"p", r.p},
                {"q", r.q},
                {"iterations", r.iterations},
                {"converged", r.converged},
                {"non_informative", r.non_informative},
                {"log_likelihood", r.log_likelihood}};
        Grid<float> w(r.dims);
        for (std::size_t i = 0; i < r.W.size(); ++i) w.values[i] = static_cast<float>(r.W[i]);
        save_raster(w, dir / "staple_w");
      }
      std::vector<std::string> users;
      for (const Submission& s : subs) users.push_back(s.user);
      info["raters"] = users;
      save_labels(fused, dir / "consensus");
      const std::string text = info.dump(1) + "\n";
      write_file_bytes(dir / "staple.json",
                       std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    } catch (const std::exception& e) {
      error = e.what();
    }

    lock.lock();
    TileTask& t = p->tasks[tile];
    if (error.empty()) {
      t.consensus_ready = true;
      t.f1 = std::move(f1);
      t.consensus_error.clear();
    } else {
      t.consensus_error = error;
    }
    persist_locked(*p);
  }

  ServiceConfig cfg_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Project>> projects_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 rng_{std::random_device{}()};
  std::deque<std::pair<std::string, std::uint32_t>> queue_;
  std::condition_variable work_cv_, idle_cv_;
  bool busy_ = false;
  bool stopping_ = false;
  std::thread worker_;
};

}  // namespace seg3d
