#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <random>
#include <set>
#include <string>

#include "json.hpp"
#include "seg3d/consensus.hpp"
#include "seg3d/mesh.hpp"
#include "seg3d/raster_io.hpp"
#include "seg3d/tiling.hpp"
#include "service_support.hpp"

using namespace seg3d;
using seg3d::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int status = 0;
  std::string out, err;
};

CliRun run(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string(SEG3D_CLI) + " " + args + " 2>" + err.string();
  CliRun r;
  FILE* p = ::popen(cmd.c_str(), "r");
  std::array<char, 4096> buf;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), p)) r.out.append(buf.data(), n);
  const int raw = ::pclose(p);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  const auto e = read_file_bytes(err);
  r.err.assign(e.begin(), e.end());
  return r;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

}  // namespace

TEST(Cli, PlanReportsTileCount) {
  TempDir tmp("cli-plan");
  const CliRun r = run("plan --dims 128,128,200 --tile 40 --overlap 0.1 --border 0.1 --out " + (tmp.path / "plan.json").string(), tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["tile_count"], 96);
  EXPECT_EQ(j["counts"], nlohmann::json::array({4, 4, 6}));
  EXPECT_EQ(plan_from_json(nlohmann::json::parse(slurp(tmp.path / "plan.json"))).size(), 96u);
}

TEST(Cli, ErrorsAreJsonOnStderr) {
  TempDir tmp("cli-err");
  CliRun r = run("plan --dims 128,128", tmp.path);
  EXPECT_NE(r.status, 0);
  EXPECT_TRUE(r.out.empty());
  auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j["error"], "parameter");
  r = run("segment --volume /nonexistent.json --seeds x --out y", tmp.path);
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "not_found");
  r = run("frobnicate", tmp.path);
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "usage");
  r = run("plan --dims 10,10,10 --tile 20 --overlap 1.0", tmp.path);
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "parameter");
}

TEST(Cli, SegmentOneSeedIsConstantAndDeterministic) {
  TempDir tmp("cli-seg");
  std::mt19937 rng(5);
  const Volume8 v = seg3d::testing::random_volume(rng, {9, 7, 5}, 50);
  save_raster(v, tmp.path / "v");
  write_file_bytes(tmp.path / "one.json", std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(R"([{"x":3,"y":2,"z":1,"label":7}])"), 32));
  CliRun r = run("segment --volume " + (tmp.path / "v.json").string() + " --seeds " + (tmp.path / "one.json").string() + " --out " +
                  (tmp.path / "a").string(),
              tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  const LabelMap a = load_labels(tmp.path / "a");
  EXPECT_EQ(std::set<Label>(a.values.begin(), a.values.end()), std::set<Label>{7});

  const std::string two = R"([{"x":0,"y":0,"z":0,"label":1},{"x":8,"y":6,"z":4,"label":2}])";
  write_file_bytes(tmp.path / "two.json", std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(two.data()), two.size()));
  for (const char* out : {"b", "c"}) {
    r = run("segment --volume " + (tmp.path / "v.json").string() + " --seeds " + (tmp.path / "two.json").string() + " --out " +
                (tmp.path / out).string(),
            tmp.path);
    ASSERT_EQ(r.status, 0) << r.err;
  }
  EXPECT_EQ(slurp(tmp.path / "b.raw"), slurp(tmp.path / "c.raw"));
  EXPECT_EQ(slurp(tmp.path / "b.json"), slurp(tmp.path / "c.json"));

  const std::string bad = R"([{"x":99,"y":0,"z":0,"label":1}])";
  write_file_bytes(tmp.path / "bad.json", std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bad.data()), bad.size()));
  r = run("segment --volume " + (tmp.path / "v.json").string() + " --seeds " + (tmp.path / "bad.json").string() + " --out " +
              (tmp.path / "d").string(),
          tmp.path);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "bounds");
}

TEST(Cli, ConsensusOfIdenticalInputsAndScore) {
  TempDir tmp("cli-cons");
  std::mt19937 rng(6);
  const LabelMap gt = seg3d::testing::jittered_box_partition({16, 16, 16}, 2, 2, 2, 1, rng);
  LabelMap shuffled = gt;
  for (auto& l : shuffled.values) l = 100 - l;  // same partition, other ids
  save_labels(gt, tmp.path / "r1");
  save_labels(gt, tmp.path / "r2");
  save_labels(shuffled, tmp.path / "r3");
  const std::string in = (tmp.path / "r1.json").string() + " " + (tmp.path / "r2.json").string() + " " + (tmp.path / "r3.json").string();
  CliRun r = run("consensus --inputs " + in + " --out " + (tmp.path / "fused").string(), tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(r.out);
  EXPECT_EQ(j["f1"], nlohmann::json::array({1.0, 1.0, 1.0}));
  const LabelMap fused = load_labels(tmp.path / "fused");
  EXPECT_TRUE(seg3d::testing::equal_up_to_permutation(fused.values, gt.values));

  r = run("score --reference " + (tmp.path / "fused.json").string() + " --raters " + in + " --json", tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  for (const auto& row : nlohmann::json::parse(r.out)) EXPECT_DOUBLE_EQ(row["f1"].get<double>(), 1.0);
  r = run("score --reference " + (tmp.path / "fused.json").string() + " --raters " + in, tmp.path);
  EXPECT_NE(r.out.find("1.0000"), std::string::npos);
  EXPECT_EQ(r.out.substr(0, 5), "rater");

  r = run("consensus --inputs " + (tmp.path / "r1.json").string() + " --out x", tmp.path);
  EXPECT_NE(r.status, 0);
}

TEST(Cli, ExtractAndStitchRoundTrip) {
  TempDir tmp("cli-stitch");
  std::mt19937 rng(7);
  const LabelMap gt = seg3d::testing::jittered_box_partition({40, 40, 30}, 3, 3, 2, 1, rng);
  save_volume({seg3d::testing::walls_volume(gt), DType::U16}, tmp.path / "vol");
  CliRun r = run("plan --dims 40,40,30 --tile 20 --out " + (tmp.path / "plan.json").string(), tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  const TilePlan plan = plan_from_json(nlohmann::json::parse(slurp(tmp.path / "plan.json")));

  r = run("extract --volume " + (tmp.path / "vol.json").string() + " --plan " + (tmp.path / "plan.json").string() +
              " --tile-id 3 --out " + (tmp.path / "t3").string(),
          tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(load_volume(tmp.path / "t3").volume, crop(seg3d::testing::walls_volume(gt), plan.tile(3).context));

  fs::create_directories(tmp.path / "cores");
  for (const TileSpec& t : plan.tiles) {
    LabelMap core = crop(gt, t.core);
    for (auto& l : core.values) l = l * 3 + t.id;  // per-tile ids, unrelated across tiles
    save_labels(core, tmp.path / "cores" / std::to_string(t.id));
  }
  r = run("stitch --plan " + (tmp.path / "plan.json").string() + " --dir " + (tmp.path / "cores").string() + " --out " +
              (tmp.path / "all").string(),
          tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(nlohmann::json::parse(r.out)["label_count"], 18);
  EXPECT_TRUE(seg3d::testing::equal_up_to_permutation(load_labels(tmp.path / "all").values, gt.values));

  fs::remove(tmp.path / "cores" / "2.json");
  r = run("stitch --plan " + (tmp.path / "plan.json").string() + " --dir " + (tmp.path / "cores").string() + " --out " +
              (tmp.path / "all").string(),
          tmp.path);
  EXPECT_NE(r.status, 0);
  const auto err = nlohmann::json::parse(r.err);
  EXPECT_EQ(err["error"], "state");
  EXPECT_NE(err["message"].get<std::string>().find("[2]"), std::string::npos);
}

TEST(Cli, MeshEmitsObj) {
  TempDir tmp("cli-mesh");
  LabelMap m({6, 6, 6}, 1);
  for (int z = 2; z < 4; ++z)
    for (int y = 2; y < 4; ++y)
      for (int x = 2; x < 4; ++x) m.at(x, y, z) = 2;
  save_labels(m, tmp.path / "m");
  CliRun r = run("mesh --labels " + (tmp.path / "m.json").string() + " --label 2 --smooth 2", tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(parse_obj(r.out), laplacian_smooth(marching_cubes(m, 2), 2));
  r = run("mesh --labels " + (tmp.path / "m.json").string() + " --border --out " + (tmp.path / "b.obj").string(), tmp.path);
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_FALSE(parse_obj(slurp(tmp.path / "b.obj")).empty());
  r = run("mesh --labels " + (tmp.path / "m.json").string(), tmp.path);
  EXPECT_EQ(nlohmann::json::parse(r.err)["error"], "parameter");
}
