// Drives the roadforge executable as a subprocess.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "random_graphs.hpp"
#include "roadforge/common/kv_config.hpp"
#include "roadforge/geom/io.hpp"
#include "roadforge/stitch/stitch.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace roadforge;

namespace {

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

class Workspace {
 public:
  Workspace() : dir_(fs::temp_directory_path() / ("roadforge_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Workspace() { fs::remove_all(dir_); }
  const fs::path& dir() const { return dir_; }

  /// Runs the CLI with `args` (shell-quoted by the caller); `env` is prefixed.
  Result run(const std::string& args, const std::string& env = "") const {
    const fs::path out = dir_ / "stdout.txt";
    const fs::path err = dir_ / "stderr.txt";
    const std::string cmd = env + " \"" ROADFORGE_CLI "\" " + args + " >\"" + out.string() + "\" 2>\"" +
                            err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  std::string out_dir() const { return "--out-dir \"" + dir_.string() + "\""; }

 private:
  fs::path dir_;
};

/// Every regular file under `root`, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

json last_log_line(const fs::path& dir) {
  std::ifstream f(dir / "run_log.jsonl");
  std::string line;
  std::string last;
  while (std::getline(f, line))
    if (!line.empty()) last = line;
  return json::parse(last);
}

const std::string kSmallBuild =
    "dataset build --synthetic 10 --no-augment --set split_train_end=0.5 --set split_valid_end=0.75 "
    "--set split_margin_tiles=0";

}  // namespace

TEST_CASE("unknown flags print usage and exit 64") {
  Workspace ws;
  const Result r = ws.run("metric --definitely-not-a-flag a.rgf b.rgf");
  CHECK(r.code == 64);
  CHECK(r.err.find("Usage:") != std::string::npos);
  CHECK(ws.run("no-such-command").code == 64);
  CHECK(ws.run("").code == 64);
  CHECK(ws.run("--help").code == 0);
}

TEST_CASE("exit codes: I/O failure is 2, validation failure is 1") {
  Workspace ws;
  CHECK(ws.run("metric " + ws.out_dir() + " missing_a.rgf missing_b.rgf").code == 2);
  CHECK(ws.run("dataset build " + ws.out_dir() + " --map missing.csv").code == 2);
  CHECK(ws.run("dataset build " + ws.out_dir()).code == 1);

  geom::RoadGraph g;
  g.nodes = {{-0.5, 0.0}, {0.5, 0.0}};
  g.add_edge(0, 1);
  geom::save_rgf(ws.dir() / "a.rgf", g);
  CHECK(ws.run("metric " + ws.out_dir() + " a.rgf a.rgf --samples abc").code == 1);
  CHECK(ws.run("metric " + ws.out_dir() + " a.rgf a.rgf --eps -1").code == 1);

  geom::write_text_file(ws.dir() / "broken.rgf", "this is not a graph\n");
  CHECK(ws.run("metric " + ws.out_dir() + " broken.rgf a.rgf").code == 1);

  // Failures are logged too.
  const json log = last_log_line(ws.dir());
  CHECK(log["exit_code"] == 1);
  CHECK(log.contains("error"));
}

TEST_CASE("gradcheck on the small configuration passes") {
  Workspace ws;
  const Result r = ws.run("gradcheck " + ws.out_dir());
  REQUIRE(r.code == 0);
  const json report = json::parse(slurp(ws.dir() / "gradcheck.json"));
  CHECK(report["passed"] == true);
  REQUIRE(report["models"].size() == 4);
  for (const auto& m : report["models"]) {
    CHECK(m["max_rel_error"].get<double>() < 1e-4);
    CHECK(m["checked"].get<std::size_t>() == m["parameters"].get<std::size_t>());
  }
  // A bound no finite difference can meet turns into a validation failure.
  CHECK(ws.run("gradcheck " + ws.out_dir() + " --model mlp --tol 1e-12").code == 1);
}

TEST_CASE("metric of a graph with itself is below 1e-3, with coupling and SVG dumps") {
  Workspace ws;
  Rng rng(5);
  geom::save_rgf(ws.dir() / "a.rgf", testing::random_accepted_graph(rng));
  const Result r = ws.run("metric " + ws.out_dir() + " a.rgf a.rgf --dump-coupling coupling.csv --svg pair.svg");
  REQUIRE(r.code == 0);
  CHECK(std::stod(r.out) < 1e-3);
  CHECK(slurp(ws.dir() / "coupling.csv").rfind("i,j,mass\n", 0) == 0);
  CHECK(slurp(ws.dir() / "pair.svg").find("<svg") != std::string::npos);

  const json log = last_log_line(ws.dir());
  CHECK(log["command"] == "metric");
  CHECK(log["result"]["streetmover"].get<double>() < 1e-3);
  CHECK(log["outputs"].size() == 2);
  for (const char* key : {"config", "seed", "versions", "wall_seconds", "started_at"}) CHECK(log.contains(key));
}

TEST_CASE("dataset build is byte-identical across runs, seed sources and worker counts") {
  Workspace ws;
  REQUIRE(ws.run(kSmallBuild + " " + ws.out_dir() + " --out a --seed 7").code == 0);
  REQUIRE(ws.run(kSmallBuild + " " + ws.out_dir() + " --out b --workers 3", "ROADFORGE_SEED=7").code == 0);
  REQUIRE(ws.run(kSmallBuild + " " + ws.out_dir() + " --out c --seed 8").code == 0);
  const auto a = tree(ws.dir() / "a");
  auto b = tree(ws.dir() / "b");
  CHECK(a.size() > 10);
  // dataset.cfg echoes the worker count; everything else must match.
  CHECK(b.at("dataset.cfg") != a.at("dataset.cfg"));
  b["dataset.cfg"] = a.at("dataset.cfg");
  CHECK(a == b);
  CHECK(tree(ws.dir() / "c") != a);
  CHECK(last_log_line(ws.dir())["seed"] == 8);
}

TEST_CASE("a run is reproducible from its run-log line") {
  Workspace ws;
  REQUIRE(ws.run(kSmallBuild + " " + ws.out_dir() + " --out data --seed 3").code == 0);
  const std::string train_flags =
      " --data data --model ggt --layers 1 --d-model 16 --heads 2 --mlp-inner 32 --set head_hidden=16"
      " --set ca_hidden=64 --epochs 2 --batch-size 8 --limit 16 --valid-limit 8 --val-subsample 4";
  REQUIRE(ws.run("train " + ws.out_dir() + train_flags + " --out run1 --seed 11").code == 0);

  // Replay: the logged config alone, as a config file.
  const json log = last_log_line(ws.dir());
  KvConfig kv;
  for (const auto& [k, v] : log["config"].items()) kv.set(k, v.get<std::string>());
  kv.set("out", "run2");
  geom::write_text_file(ws.dir() / "replay.cfg", kv.to_text());
  REQUIRE(ws.run("train " + ws.out_dir() + " --config replay.cfg --data data").code == 0);

  CHECK(slurp(ws.dir() / "run1" / "best.ckpt") == slurp(ws.dir() / "run2" / "best.ckpt"));
  CHECK(slurp(ws.dir() / "run1" / "last.ckpt") == slurp(ws.dir() / "run2" / "last.ckpt"));
  auto strip_seconds = [](const std::string& jsonl) {
    std::vector<json> rows;
    std::istringstream in(jsonl);
    for (std::string line; std::getline(in, line);) {
      json j = json::parse(line);
      j.erase("seconds");
      rows.push_back(j);
    }
    return rows;
  };
  CHECK(strip_seconds(slurp(ws.dir() / "run1" / "train_report.jsonl")) ==
        strip_seconds(slurp(ws.dir() / "run2" / "train_report.jsonl")));

  SUBCASE("eval, generate and noise-bench outputs do not depend on workers") {
    const std::string eval = "eval " + ws.out_dir() + " --data data --checkpoint run1/best.ckpt --limit 6 --svg 2";
    REQUIRE(ws.run(eval + " --out e1 --workers 1").code == 0);
    REQUIRE(ws.run(eval + " --out e3 --workers 3").code == 0);
    CHECK(tree(ws.dir() / "e1") == tree(ws.dir() / "e3"));
    const json summary = json::parse(slurp(ws.dir() / "e1" / "summary.json"));
    CHECK(summary["count"] == 6);
    CHECK(fs::exists(ws.dir() / "e1" / "histogram.csv"));

    const std::string graph = (ws.dir() / "data" / "graphs").string();
    const std::string first = fs::directory_iterator(graph)->path().string();
    REQUIRE(ws.run("generate " + ws.out_dir() + " --checkpoint run1/best.ckpt --graph \"" + first +
                   "\" --out gen.rgf --svg gen.svg")
                .code == 0);
    CHECK_NOTHROW(geom::load_rgf(ws.dir() / "gen.rgf"));

    REQUIRE(ws.run("noise-bench " + ws.out_dir() +
                   " --data data --checkpoint run1/best.ckpt --limit 4 --levels none,low --out nb")
                .code == 0);
    const json nb = json::parse(slurp(ws.dir() / "nb" / "noise_bench.json"));
    REQUIRE(nb["levels"].size() == 2);
    CHECK(nb["levels"][0]["level"] == "none");
    CHECK(nb["levels"][1]["level"] == "low");
  }
}

TEST_CASE("stitch subcommand matches the library on split tiles") {
  Workspace ws;
  Rng rng(9);
  const geom::RoadGraph g = testing::random_accepted_graph(rng);
  const auto grid = stitch::split_into_tiles(g, 2, 2);
  std::string manifest = "# row-major\n";
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const std::string name = "tile_" + std::to_string(r) + "_" + std::to_string(c) + ".rgf";
      geom::save_rgf(ws.dir() / name, grid[r][c]);
      manifest += name + "\n";
    }
  geom::write_text_file(ws.dir() / "tiles.txt", manifest);
  REQUIRE(ws.run("stitch " + ws.out_dir() + " --manifest tiles.txt --rows 2 --cols 2 --out s.rgf --svg s.svg").code ==
          0);
  CHECK(slurp(ws.dir() / "s.rgf") == geom::write_rgf(stitch::stitch_grid(grid)));
  CHECK(fs::exists(ws.dir() / "s.svg"));
  CHECK(ws.run("stitch " + ws.out_dir() + " --manifest tiles.txt --rows 3 --cols 2").code == 1);
}
