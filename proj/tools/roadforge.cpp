// roadforge: dataset building, training, evaluation and tooling from one binary.
//
// Every option is a key of a flat config: a --config file is read first, then
// --set key=value pairs, then dedicated flags. The effective config and seed go
// to <out-dir>/run_log.jsonl so a run can be repeated from its log line.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "roadforge/common/error.hpp"
#include "roadforge/common/kv_config.hpp"
#include "roadforge/dataset/dataset.hpp"
#include "roadforge/eval/eval.hpp"
#include "roadforge/geom/io.hpp"
#include "roadforge/model/model.hpp"
#include "roadforge/raster/raster.hpp"
#include "roadforge/stitch/stitch.hpp"
#include "roadforge/streetmover/streetmover.hpp"
#include "roadforge/training/training.hpp"

#ifndef ROADFORGE_VERSION
#define ROADFORGE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace roadforge;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitUsage = 64;

/// Options shared by every subcommand.
struct Common {
  std::string out_dir = ".";
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  /// Dedicated flags, applied last.
  std::map<std::string, std::string> flags;
};

struct Run {
  std::string command;
  fs::path out_dir;
  KvConfig kv;
  std::uint64_t seed = 1;
  int workers = 1;
  json outputs = json::array();
  json result = json::object();

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : out_dir / path;
  }
  fs::path output(const std::string& p) {
    const fs::path path = resolve(p);
    outputs.push_back(path.string());
    return path;
  }
  std::string str(const std::string& key, const std::string& fallback = "") const {
    return kv.get_string(key, fallback);
  }
  std::string required(const std::string& key) const {
    const auto v = kv.raw(key);
    if (!v || v->empty()) fail(ErrorCode::InvalidArgument, "missing required option '" + key + "'");
    return *v;
  }
  int integer(const std::string& key, int fallback) const { return static_cast<int>(kv.get_int(key, fallback)); }
  double real(const std::string& key, double fallback) const { return kv.get_double(key, fallback); }
};

using Handler = std::function<int(Run&)>;

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("ROADFORGE_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long s = std::stoull(v, &used);
    if (used != std::string(v).size()) throw std::invalid_argument(v);
    return s;
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, std::string("ROADFORGE_SEED is not an unsigned integer: ") + v);
  }
}

/// Layers file, --set pairs and flags; resolves seed (flag, then
/// ROADFORGE_SEED, then config, then 1) and workers.
Run make_run(const std::string& command, const Common& c) {
  Run run;
  run.command = command;
  run.out_dir = c.out_dir;
  if (!c.config.empty()) run.kv = KvConfig::load(run.resolve(c.config));
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorCode::InvalidArgument, "--set expects key=value, got '" + s + "'");
    run.kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  for (const auto& [k, v] : c.flags) run.kv.set(k, v);
  if (c.seed) {
    run.seed = *c.seed;
  } else if (const auto e = env_seed()) {
    run.seed = *e;
  } else {
    run.seed = static_cast<std::uint64_t>(run.kv.get_int("seed", 1));
  }
  run.kv.set("seed", std::to_string(run.seed));
  run.workers = c.workers ? *c.workers : static_cast<int>(run.kv.get_int("workers", 1));
  if (run.workers < 1) fail(ErrorCode::InvalidArgument, "workers must be >= 1");
  run.kv.set("workers", std::to_string(run.workers));
  return run;
}

void append_run_log(const Run& run, const std::vector<std::string>& argv, const std::string& started, double seconds,
                    int code, const std::string& error) {
  json line;
  line["command"] = run.command;
  line["argv"] = argv;
  json cfg = json::object();
  for (const auto& [k, v] : run.kv.entries()) cfg[k] = v;
  line["config"] = cfg;
  line["seed"] = run.seed;
  line["workers"] = run.workers;
  line["versions"] = {{"roadforge", ROADFORGE_VERSION},
                      {"compiler", __VERSION__},
                      {"cli11", CLI11_VERSION},
                      {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                            std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  line["started_at"] = started;
  line["wall_seconds"] = seconds;
  line["exit_code"] = code;
  if (!error.empty()) line["error"] = error;
  line["outputs"] = run.outputs;
  line["result"] = run.result;
  std::error_code ec;
  fs::create_directories(run.out_dir, ec);
  std::ofstream f(run.out_dir / "run_log.jsonl", std::ios::app);
  if (f) f << line.dump() << '\n';
}

void write_json(Run& run, const std::string& rel, const json& j) {
  geom::write_text_file(run.output(rel), j.dump(2) + "\n");
}

// ---------------------------------------------------------------- dataset

int cmd_dataset_build(Run& run) {
  dataset::DatasetConfig cfg = dataset::DatasetConfig::from_kv(run.kv);
  cfg.seed = run.seed;
  cfg.workers = run.workers;
  dataset::MapSource map;
  const int synthetic = run.integer("synthetic", 0);
  const std::string map_path = run.str("map");
  if (synthetic > 0 && !map_path.empty()) fail(ErrorCode::InvalidArgument, "use either --map or --synthetic");
  if (synthetic > 0) {
    const auto map_seed = static_cast<std::uint64_t>(run.kv.get_int("map_seed", static_cast<long long>(run.seed)));
    run.kv.set("map_seed", std::to_string(map_seed));
    map = dataset::generate_synthetic_map(map_seed, synthetic);
    if (const std::string w = run.str("write_map"); !w.empty())
      geom::write_text_file(run.output(w), dataset::to_segment_csv(map));
  } else if (!map_path.empty()) {
    map = dataset::load_segment_csv(run.resolve(map_path));
  } else {
    fail(ErrorCode::InvalidArgument, "dataset build needs --map or --synthetic");
  }
  const fs::path out = run.output(run.str("out", "dataset"));
  const dataset::DatasetStats stats = dataset::build_dataset(map, cfg, out);
  run.result = json::parse(stats.to_json());
  std::printf("dataset: %s\n", out.string().c_str());
  for (const auto& [split, n] : stats.split_counts) std::printf("  %-6s %d records\n", split.c_str(), n);
  std::printf("  frontier %d, tiles %d (discarded %d)\n", stats.frontier, stats.tiles_total, stats.tiles_discarded);
  return kExitOk;
}

// ---------------------------------------------------------------- train

std::vector<dataset::Sample> load_split(const Run& run, const fs::path& data, const std::string& split_key,
                                        const std::string& split_default, const std::string& limit_key) {
  const dataset::Split split = dataset::parse_split(run.str(split_key, split_default));
  const int limit = run.integer(limit_key, 0);
  if (limit < 0) fail(ErrorCode::InvalidArgument, limit_key + " must be >= 0");
  auto samples = dataset::load_samples(data, split, static_cast<std::size_t>(limit));
  if (samples.empty())
    fail(ErrorCode::EmptyDataset, "no '" + dataset::to_string(split) + "' records in " + data.string());
  return samples;
}

int cmd_train(Run& run) {
  const fs::path data = run.resolve(run.required("data"));
  const auto train_set = load_split(run, data, "train_split", "train", "limit");
  const auto valid = load_split(run, data, "valid_split", "valid", "valid_limit");

  if (!run.kv.has("frontier")) run.kv.set("frontier", std::to_string(dataset::load_frontier(data)));
  run.kv.set("image_size", std::to_string(train_set.front().image.width));
  if (!run.kv.has("model_seed")) run.kv.set("model_seed", std::to_string(run.seed));
  const model::ModelConfig mcfg = model::ModelConfig::from_kv(run.kv);
  mcfg.validate();
  training::TrainConfig tcfg = training::TrainConfig::from_kv(run.kv);
  tcfg.seed = run.seed;
  tcfg.workers = run.workers;
  tcfg.validate();

  const fs::path out = run.output(run.str("out", "train"));
  fs::create_directories(out);
  geom::write_text_file(out / "train.cfg", run.kv.to_text());
  model::Model m(mcfg);
  std::printf("model %s, %zu parameters, %zu train / %zu valid records\n", model::to_string(mcfg.kind).c_str(),
              m.parameter_count(), train_set.size(), valid.size());

  training::TrainHooks hooks;
  hooks.checkpoint_dir = out;
  hooks.on_eval = [](const training::EvalRecord& r) {
    std::printf("epoch %4d step %6ld  train %.5f  val_loss %.5f  val_sm %.5f  (%.1fs)\n", r.epoch, r.step,
                r.train_loss, r.val_loss, r.val_streetmover, r.seconds);
    std::fflush(stdout);
  };
  const training::TrainReport report = training::train(m, train_set, valid, tcfg, hooks);
  geom::write_text_file(out / "train_report.jsonl", report.to_jsonl());
  run.result["steps"] = report.steps;
  run.result["early_stopped"] = report.early_stopped;
  run.result["parameters"] = m.parameter_count();
  if (report.best_record >= 0) run.result["best"] = report.records[report.best_record].to_json();
  return kExitOk;
}

// ---------------------------------------------------------------- eval

eval::EvalOptions eval_options(const Run& run) {
  eval::EvalOptions o;
  o.generate.max_steps = run.integer("max_gen_steps", o.generate.max_steps);
  o.generate.threshold = run.real("threshold", o.generate.threshold);
  o.streetmover.samples = run.integer("samples", o.streetmover.samples);
  o.streetmover.sinkhorn.eps = run.real("eps", o.streetmover.sinkhorn.eps);
  o.lambda = run.real("lambda", o.lambda);
  o.workers = run.workers;
  if (o.generate.max_steps < 1 || o.streetmover.samples < 1 || o.streetmover.sinkhorn.eps <= 0.0)
    fail(ErrorCode::InvalidArgument, "max_gen_steps, samples and eps must be positive");
  return o;
}

int cmd_eval(Run& run) {
  const fs::path data = run.resolve(run.required("data"));
  const auto model = model::Model::load(run.resolve(run.required("checkpoint")));
  const auto samples = load_split(run, data, "split", "test", "limit");
  const auto result = eval::evaluate(*model, samples, eval_options(run));

  const fs::path out = run.output(run.str("out", "eval"));
  fs::create_directories(out);
  geom::write_text_file(out / "summary.json", result.summary.to_json(true).dump(2) + "\n");
  geom::write_text_file(out / "histogram.csv", result.summary.histogram_csv());
  geom::write_text_file(out / "samples.csv", result.summary.samples_csv());
  const int svgs = std::min<int>(run.integer("svg", 0), static_cast<int>(samples.size()));
  for (int i = 0; i < svgs; ++i)
    eval::write_comparison_svg(out / "svg" / (samples[i].id + ".svg"), samples[i].graph, result.predictions[i]);
  if (run.kv.get_bool("save_predictions", false))
    for (std::size_t i = 0; i < samples.size(); ++i)
      geom::save_rgf(out / "predictions" / (samples[i].id + ".rgf"), result.predictions[i]);

  run.result = result.summary.to_json(false);
  const auto& s = result.summary;
  std::printf("records %d  streetmover %.5f +- %.5f  val_loss %.5f  dV %.3f  dE %.3f  empty %d\n", s.count, s.sm_mean,
              s.sm_std, s.val_loss, s.delta_nodes_mean, s.delta_edges_mean, s.empty_predictions);
  return kExitOk;
}

// ---------------------------------------------------------------- generate

int cmd_generate(Run& run) {
  const auto model = model::Model::load(run.resolve(run.required("checkpoint")));
  const std::string image_path = run.str("image");
  const std::string graph_path = run.str("graph");
  if (image_path.empty() == graph_path.empty()) fail(ErrorCode::InvalidArgument, "give exactly one of --image, --graph");
  std::optional<geom::RoadGraph> truth;
  raster::GrayImage image;
  if (!graph_path.empty()) {
    truth = geom::load_rgf(run.resolve(graph_path));
    image = raster::rasterize(*truth, model->config().image_size);
  } else {
    image = raster::read_pgm(run.resolve(image_path));
  }
  model::GenerateOptions opts;
  opts.max_steps = run.integer("max_gen_steps", opts.max_steps);
  opts.threshold = run.real("threshold", opts.threshold);
  const model::Generation gen = model->generate(image, opts);

  geom::save_rgf(run.output(run.str("out", "generated.rgf")), gen.graph);
  if (const std::string svg = run.str("svg"); !svg.empty()) {
    const fs::path p = run.output(svg);
    geom::write_text_file(p, truth ? eval::render_comparison_svg(*truth, gen.graph)
                                   : eval::render_graph_svg(gen.graph, "generated"));
  }
  run.result = {{"nodes", gen.graph.nodes.size()}, {"edges", gen.graph.edges.size()}, {"stopped", gen.stopped}};
  if (truth && !gen.graph.edges.empty()) {
    run.result["streetmover"] = streetmover::streetmover_distance(*truth, gen.graph);
  }
  std::printf("generated %zu nodes, %zu edges%s\n", gen.graph.nodes.size(), gen.graph.edges.size(),
              gen.stopped ? "" : " (step limit reached)");
  return kExitOk;
}

// ---------------------------------------------------------------- metric

int cmd_metric(Run& run) {
  const geom::RoadGraph a = geom::load_rgf(run.resolve(run.required("a")));
  const geom::RoadGraph b = geom::load_rgf(run.resolve(run.required("b")));
  streetmover::StreetMoverOptions opts;
  opts.samples = run.integer("samples", opts.samples);
  opts.sinkhorn.eps = run.real("eps", opts.sinkhorn.eps);
  opts.sinkhorn.max_iter = run.integer("max_iter", opts.sinkhorn.max_iter);
  opts.sinkhorn.tol = run.real("tol", opts.sinkhorn.tol);
  if (opts.samples < 1 || opts.sinkhorn.eps <= 0.0 || opts.sinkhorn.max_iter < 1)
    fail(ErrorCode::InvalidArgument, "samples, eps and max_iter must be positive");

  const auto p = streetmover::sample_point_cloud(a, opts.samples);
  const auto q = streetmover::sample_point_cloud(b, opts.samples);
  const auto t = streetmover::sinkhorn(p, q, opts.sinkhorn);
  if (const std::string c = run.str("dump_coupling"); !c.empty())
    geom::write_text_file(run.output(c), streetmover::coupling_csv(t));
  if (const std::string s = run.str("svg"); !s.empty())
    geom::write_text_file(run.output(s), streetmover::render_transport_svg(p, q, t, run.integer("top_k", 60)));
  run.result = {{"streetmover", t.cost}, {"iterations", t.iterations}, {"converged", t.converged}};
  std::printf("%.10g\n", t.cost);
  if (!t.converged) std::fprintf(stderr, "warning: Sinkhorn stopped after %d iterations\n", t.iterations);
  return kExitOk;
}

// ---------------------------------------------------------------- stitch

int cmd_stitch(Run& run) {
  const int rows = run.integer("rows", 0);
  const int cols = run.integer("cols", 0);
  if (rows < 1 || cols < 1) fail(ErrorCode::InvalidArgument, "--rows and --cols must be >= 1");
  std::vector<std::string> paths;
  for (const auto& line : split(geom::read_text_file(run.resolve(run.required("manifest"))), '\n')) {
    const std::string t = trim(line);
    if (!t.empty() && t[0] != '#') paths.push_back(t);
  }
  if (paths.size() != static_cast<std::size_t>(rows) * cols)
    fail(ErrorCode::InvalidArgument, "manifest lists " + std::to_string(paths.size()) + " tiles, grid needs " +
                                         std::to_string(rows * cols));
  stitch::TileGrid grid(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) grid[r].push_back(geom::load_rgf(run.resolve(paths[r * cols + c])));
  const geom::RoadGraph g = stitch::stitch_grid(grid, run.real("tol", stitch::kDefaultBoundaryTol));
  geom::save_rgf(run.output(run.str("out", "stitched.rgf")), g);
  if (const std::string svg = run.str("svg"); !svg.empty())
    geom::write_text_file(run.output(svg), eval::render_graph_svg(g, "stitched"));
  run.result = {{"nodes", g.nodes.size()}, {"edges", g.edges.size()}};
  std::printf("stitched %dx%d tiles: %zu nodes, %zu edges\n", rows, cols, g.nodes.size(), g.edges.size());
  return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(Run& run) {
  const std::string which = run.str("model", "all");
  std::vector<model::ModelKind> kinds;
  if (which == "all") {
    kinds = {model::ModelKind::Ggt, model::ModelKind::GgtNoCa, model::ModelKind::Mlp, model::ModelKind::Rnn};
  } else {
    kinds = {model::parse_model_kind(which)};
  }
  diff::GradCheckOptions opts;
  opts.tol = run.real("tol", 1e-4);
  opts.step = run.real("step", 1e-5);
  opts.max_coords_per_param = static_cast<std::size_t>(run.integer("max_coords", 0));
  opts.seed = run.seed;
  bool passed = true;
  json rows = json::array();
  for (const auto kind : kinds) {
    const auto r = training::gradcheck_training_loss(kind, opts, run.seed);
    passed = passed && r.report.passed;
    std::printf("%-10s params %6zu  checked %6zu  max rel error %.3e (%s)  %s  %.1fs\n",
                model::to_string(kind).c_str(), r.parameter_count, r.report.checked, r.report.max_rel_error,
                r.report.worst.param.c_str(), r.report.passed ? "PASS" : "FAIL", r.seconds);
    rows.push_back({{"model", model::to_string(kind)},
                    {"parameters", r.parameter_count},
                    {"checked", r.report.checked},
                    {"max_rel_error", r.report.max_rel_error},
                    {"worst_param", r.report.worst.param},
                    {"worst_index", r.report.worst.index},
                    {"failures", r.report.failures.size()},
                    {"excluded", r.report.excluded.size()},
                    {"passed", r.report.passed},
                    {"seconds", r.seconds}});
  }
  run.result = {{"tol", opts.tol}, {"passed", passed}, {"models", rows}};
  write_json(run, run.str("out", "gradcheck.json"), run.result);
  return passed ? kExitOk : kExitValidation;
}

// ---------------------------------------------------------------- noise-bench

int cmd_noise_bench(Run& run) {
  const fs::path data = run.resolve(run.required("data"));
  const auto model = model::Model::load(run.resolve(run.required("checkpoint")));
  const auto samples = load_split(run, data, "split", "test", "limit");
  std::vector<raster::NoiseLevel> levels;
  for (const auto& s : split(run.str("levels", "none,low,medium"), ','))
    if (!trim(s).empty()) levels.push_back(raster::parse_noise_level(trim(s)));
  if (levels.empty()) fail(ErrorCode::InvalidArgument, "--levels is empty");

  const auto rows = eval::noise_bench(*model, samples, levels, run.seed, eval_options(run));
  const fs::path out = run.output(run.str("out", "noise_bench"));
  fs::create_directories(out);
  json summaries = json::array();
  std::string csv = "level,count,sm_mean,sm_std,val_loss,delta_nodes,delta_edges,empty\n";
  bool monotone = true;
  std::printf("%-8s %8s %10s %10s %8s %8s\n", "level", "records", "sm_mean", "sm_std", "dV", "dE");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& s = rows[i].summary;
    json j = s.to_json(false);
    j["level"] = raster::to_string(rows[i].level);
    summaries.push_back(j);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%d,%.6f,%.6f,%.6f,%.4f,%.4f,%d\n", raster::to_string(rows[i].level).c_str(),
                  s.count, s.sm_mean, s.sm_std, s.val_loss, s.delta_nodes_mean, s.delta_edges_mean, s.empty_predictions);
    csv += line;
    std::printf("%-8s %8d %10.5f %10.5f %8.3f %8.3f\n", raster::to_string(rows[i].level).c_str(), s.count, s.sm_mean,
                s.sm_std, s.delta_nodes_mean, s.delta_edges_mean);
    if (i > 0 && s.sm_mean < rows[i - 1].summary.sm_mean) monotone = false;
  }
  geom::write_text_file(out / "noise_bench.json", json{{"levels", summaries}, {"monotone", monotone}}.dump(2) + "\n");
  geom::write_text_file(out / "noise_bench.csv", csv);
  std::printf("streetmover non-decreasing with noise: %s\n", monotone ? "yes" : "no");
  run.result = {{"levels", summaries}, {"monotone", monotone}};
  return kExitOk;
}

// ---------------------------------------------------------------- wiring

/// Registers a flag that writes `key` into the config.
CLI::Option* flag(CLI::App* app, Common& c, const std::string& names, const std::string& key,
                  const std::string& help) {
  return app->add_option_function<std::string>(names, [&c, key](const std::string& v) { c.flags[key] = v; }, help);
}

void switch_flag(CLI::App* app, Common& c, const std::string& names, const std::string& key, const std::string& value,
                 const std::string& help) {
  app->add_flag_function(names, [&c, key, value](std::int64_t) { c.flags[key] = value; }, help);
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--out-dir", c.out_dir, "Base directory for every relative path and for run_log.jsonl")
      ->capture_default_str();
  app->add_option("--config", c.config, "Flat key = value config file");
  app->add_option("--set", c.sets, "Config override key=value (repeatable)");
  app->add_option("--seed", c.seed, "Global seed (default: $ROADFORGE_SEED, then config, then 1)");
  app->add_option("--workers", c.workers, "Worker threads for dataset building and evaluation");
}

void add_model_flags(CLI::App* app, Common& c) {
  flag(app, c, "--model", "model", "ggt | ggt_no_ca | mlp | rnn");
  flag(app, c, "--layers", "layers", "Decoder blocks");
  flag(app, c, "--d-model", "d_model", "Decoder width");
  flag(app, c, "--heads", "heads", "Attention heads");
  flag(app, c, "--mlp-inner", "mlp_inner", "Decoder MLP width");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"roadforge: road-graph datasets, GGT training and StreetMover evaluation", "roadforge"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ROADFORGE_VERSION);

  Common common;
  std::map<CLI::App*, std::pair<std::string, Handler>> handlers;
  auto sub = [&](CLI::App* parent, const std::string& name, const std::string& full, const std::string& help,
                 Handler h) {
    CLI::App* s = parent->add_subcommand(name, help);
    add_common(s, common);
    handlers[s] = {full, std::move(h)};
    return s;
  };

  CLI::App* dataset_cmd = app.add_subcommand("dataset", "Dataset operations");
  dataset_cmd->require_subcommand(1);
  CLI::App* build = sub(dataset_cmd, "build", "dataset build", "Tile, filter, augment and write a dataset",
                        cmd_dataset_build);
  flag(build, common, "--map", "map", "Segment CSV (lon1,lat1,lon2,lat2 per line)");
  flag(build, common, "--synthetic", "synthetic", "Generate a synthetic map of N x N tiles instead");
  flag(build, common, "--map-seed", "map_seed", "Seed of the synthetic map (default: --seed)");
  flag(build, common, "--write-map", "write_map", "Also write the synthetic map as CSV");
  flag(build, common, "--out", "out", "Dataset directory (default dataset)");
  flag(build, common, "--tile-side", "tile_side", "Tile side in degrees");
  flag(build, common, "--image-size", "image_size", "Raster size in pixels");
  switch_flag(build, common, "--no-augment", "augment", "false", "Skip translations and dihedral variants");

  CLI::App* train = sub(&app, "train", "train", "Train a model on a dataset", cmd_train);
  flag(train, common, "--data", "data", "Dataset directory")->required();
  add_model_flags(train, common);
  flag(train, common, "--out", "out", "Run directory for checkpoints and reports (default train)");
  flag(train, common, "--lr", "lr", "Adam learning rate");
  flag(train, common, "--weight-decay", "weight_decay", "Decoupled weight decay");
  flag(train, common, "--lambda", "lambda", "Adjacency weight in the loss");
  flag(train, common, "--batch-size", "batch_size", "Minibatch size (0: 64, RNN 16)");
  flag(train, common, "--epochs", "epochs", "Epoch budget");
  flag(train, common, "--max-steps", "max_steps", "Optimizer step budget (0: none)");
  flag(train, common, "--eval-every", "eval_every", "Epochs between validation passes");
  flag(train, common, "--patience", "patience", "Validation passes without improvement before stopping");
  flag(train, common, "--stop-below", "stop_below", "Stop once validation StreetMover is below this");
  flag(train, common, "--val-subsample", "val_subsample", "Validation records scored by StreetMover");
  flag(train, common, "--limit", "limit", "Use the first N training records (0: all)");
  flag(train, common, "--valid-split", "valid_split", "Split used for validation (default valid)");
  flag(train, common, "--valid-limit", "valid_limit", "Use the first N validation records (0: all)");

  CLI::App* evalc = sub(&app, "eval", "eval", "Generate and score a split", cmd_eval);
  flag(evalc, common, "--data", "data", "Dataset directory")->required();
  flag(evalc, common, "--checkpoint", "checkpoint", "Model checkpoint")->required();
  flag(evalc, common, "--split", "split", "train | valid | test (default test)");
  flag(evalc, common, "--limit", "limit", "Evaluate the first N records (0: all)");
  flag(evalc, common, "--out", "out", "Output directory (default eval)");
  flag(evalc, common, "--svg", "svg", "Write comparison SVGs for the first N records");
  switch_flag(evalc, common, "--save-predictions", "save_predictions", "true", "Write predictions/<id>.rgf");
  flag(evalc, common, "--max-gen-steps", "max_gen_steps", "Generation step limit");
  flag(evalc, common, "--samples", "samples", "StreetMover points per graph");

  CLI::App* gen = sub(&app, "generate", "generate", "Generate a graph from one image", cmd_generate);
  flag(gen, common, "--checkpoint", "checkpoint", "Model checkpoint")->required();
  flag(gen, common, "--image", "image", "Input PGM image");
  flag(gen, common, "--graph", "graph", "Rasterize this .rgf as input and compare against it");
  flag(gen, common, "--out", "out", "Output .rgf (default generated.rgf)");
  flag(gen, common, "--svg", "svg", "Also render an SVG");
  flag(gen, common, "--max-gen-steps", "max_gen_steps", "Generation step limit");
  flag(gen, common, "--threshold", "threshold", "Adjacency and stop threshold");

  CLI::App* metric = sub(&app, "metric", "metric", "StreetMover distance between two .rgf graphs", cmd_metric);
  metric->add_option_function<std::string>("a", [&common](const std::string& v) { common.flags["a"] = v; },
                                           "First graph")->required();
  metric->add_option_function<std::string>("b", [&common](const std::string& v) { common.flags["b"] = v; },
                                           "Second graph")->required();
  flag(metric, common, "--samples", "samples", "Points per graph (default 100)");
  flag(metric, common, "--eps", "eps", "Entropic regularization (default 1e-3)");
  flag(metric, common, "--max-iter", "max_iter", "Sinkhorn iteration limit");
  flag(metric, common, "--tol", "tol", "Marginal violation tolerance");
  flag(metric, common, "--dump-coupling", "dump_coupling", "Write the coupling as CSV");
  flag(metric, common, "--svg", "svg", "Render both clouds and the heaviest coupling entries");
  flag(metric, common, "--top-k", "top_k", "Coupling entries drawn in the SVG (default 60)");

  CLI::App* st = sub(&app, "stitch", "stitch", "Merge a grid of tile graphs into one graph", cmd_stitch);
  flag(st, common, "--manifest", "manifest", "Text file with one .rgf path per line, row-major")->required();
  flag(st, common, "--rows", "rows", "Grid rows")->required();
  flag(st, common, "--cols", "cols", "Grid columns")->required();
  flag(st, common, "--tol", "tol", "Border merge tolerance in tile units (default 0.1)");
  flag(st, common, "--out", "out", "Output .rgf (default stitched.rgf)");
  flag(st, common, "--svg", "svg", "Also render an SVG");

  CLI::App* gc = sub(&app, "gradcheck", "gradcheck", "Finite-difference check of the training loss", cmd_gradcheck);
  flag(gc, common, "--model", "model", "all | ggt | ggt_no_ca | mlp | rnn (default all)");
  flag(gc, common, "--tol", "tol", "Relative error bound (default 1e-4)");
  flag(gc, common, "--step", "step", "Central difference step (default 1e-5)");
  flag(gc, common, "--max-coords", "max_coords", "Coordinates checked per parameter (0: all)");
  flag(gc, common, "--out", "out", "Report path (default gradcheck.json)");

  CLI::App* nb = sub(&app, "noise-bench", "noise-bench", "Evaluate under increasing image noise", cmd_noise_bench);
  flag(nb, common, "--data", "data", "Dataset directory")->required();
  flag(nb, common, "--checkpoint", "checkpoint", "Model checkpoint")->required();
  flag(nb, common, "--levels", "levels", "Comma-separated noise levels (default none,low,medium)");
  flag(nb, common, "--split", "split", "train | valid | test (default test)");
  flag(nb, common, "--limit", "limit", "Evaluate the first N records (0: all)");
  flag(nb, common, "--out", "out", "Output directory (default noise_bench)");
  flag(nb, common, "--max-gen-steps", "max_gen_steps", "Generation step limit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n\n", e.what());
    // Usage text of the deepest subcommand that was recognized.
    const CLI::App* target = &app;
    for (bool descended = true; descended;) {
      descended = false;
      for (const CLI::App* s : target->get_subcommands()) {
        target = s;
        descended = true;
        break;
      }
    }
    std::fprintf(stderr, "%s", target->help().c_str());
    return kExitUsage;
  }

  const CLI::App* chosen = nullptr;
  for (const auto& [s, h] : handlers)
    if (s->parsed()) chosen = s;
  const auto& [name, handler] = handlers.at(const_cast<CLI::App*>(chosen));

  const std::vector<std::string> args(argv, argv + argc);
  const std::string started = utc_now();
  const auto t0 = std::chrono::steady_clock::now();
  Run run;
  run.command = name;
  run.out_dir = common.out_dir;
  int code = kExitOk;
  std::string error;
  try {
    run = make_run(name, common);
    code = handler(run);
  } catch (const Error& e) {
    error = e.what();
    code = (e.code() == ErrorCode::Io) ? kExitIo : kExitValidation;
  } catch (const fs::filesystem_error& e) {
    error = e.what();
    code = kExitIo;
  } catch (const std::exception& e) {
    error = e.what();
    code = kExitValidation;
  }
  if (!error.empty()) std::fprintf(stderr, "error: %s\n", error.c_str());
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  append_run_log(run, args, started, seconds, code, error);
  return code;
}
