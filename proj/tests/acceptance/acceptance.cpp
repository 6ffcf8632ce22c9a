// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,2,...] [--work-dir DIR] [--report FILE]
//
// Exit status is 0 when every hard criterion passes. Criterion 7 is soft: its
// line is printed but does not change the exit status.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "random_graphs.hpp"
#include "roadforge/common/kv_config.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/dataset/dataset.hpp"
#include "roadforge/eval/eval.hpp"
#include "roadforge/geom/canonical.hpp"
#include "roadforge/model/model.hpp"
#include "roadforge/raster/raster.hpp"
#include "roadforge/stitch/stitch.hpp"
#include "roadforge/streetmover/streetmover.hpp"
#include "roadforge/training/training.hpp"

namespace fs = std::filesystem;
using namespace roadforge;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

geom::RoadGraph rigid(const geom::RoadGraph& g, double angle, geom::Point2 shift) {
  geom::RoadGraph out = g;
  const double c = std::cos(angle), s = std::sin(angle);
  for (auto& p : out.nodes) p = geom::Point2{c * p.x - s * p.y, s * p.x + c * p.y} + shift;
  return out;
}

std::vector<geom::Point2> sorted_points(const streetmover::PointCloud& c) {
  auto pts = c.points;
  std::sort(pts.begin(), pts.end(), [](geom::Point2 a, geom::Point2 b) { return a.x != b.x ? a.x < b.x : a.y < b.y; });
  return pts;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_correctness() {
  diff::GradCheckOptions opts;
  opts.tol = 1e-4;
  opts.step = 1e-5;
  const double t0 = cpu_seconds();
  bool pass = true;
  std::string detail;
  for (auto kind : {model::ModelKind::Ggt, model::ModelKind::GgtNoCa, model::ModelKind::Mlp, model::ModelKind::Rnn}) {
    const auto r = training::gradcheck_training_loss(kind, opts, 1);
    pass = pass && r.report.passed && r.report.max_rel_error < 1e-4;
    detail += fmt("%s %.2e (%zu coords); ", model::to_string(kind).c_str(), r.report.max_rel_error, r.report.checked);
  }
  const double cpu = cpu_seconds() - t0;
  pass = pass && cpu < 120.0;
  return {pass, detail + fmt("cpu %.1fs < 120s", cpu)};
}

// 2 ------------------------------------------------------------------------

Outcome sinkhorn_fidelity() {
  Rng rng(2002);
  const int sizes[] = {4, 8, 16};
  double worst = 0.0;
  int not_converged = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = sizes[trial % 3];
    streetmover::PointCloud p, q;
    for (int i = 0; i < n; ++i) {
      p.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
      q.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
    const double exact = streetmover::exact_ot(p, q);
    const auto t = streetmover::sinkhorn(p, q);
    if (!t.converged) ++not_converged;
    worst = std::max(worst, std::abs(t.cost - exact) / exact);
  }
  double self_worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = testing::random_accepted_graph(rng);
    const auto c = streetmover::sample_point_cloud(g, 100);
    self_worst = std::max(self_worst, streetmover::sinkhorn(c, c).cost);
  }
  return {worst < 0.02 && self_worst < 1e-3,
          fmt("max rel error vs exact %.3e < 0.02 over 200 clouds (%d unconverged); self-distance max %.3e < 1e-3",
              worst, not_converged, self_worst)};
}

// 3 ------------------------------------------------------------------------

Outcome metric_invariances() {
  Rng rng(3003);
  double rigid_worst = 0.0, sym_worst = 0.0;
  bool multiset_equal = true;
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = testing::random_accepted_graph(rng);
    const auto b = testing::random_accepted_graph(rng);
    const double ab = streetmover::streetmover_distance(a, b);
    sym_worst = std::max(sym_worst, std::abs(ab - streetmover::streetmover_distance(b, a)));
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const geom::Point2 shift{rng.uniform(-3, 3), rng.uniform(-3, 3)};
    rigid_worst = std::max(
        rigid_worst, std::abs(streetmover::streetmover_distance(rigid(a, angle, shift), rigid(b, angle, shift)) - ab));
    geom::RoadGraph permuted = a;
    rng.shuffle(permuted.edges);
    for (auto& e : permuted.edges)
      if (rng.uniform() < 0.5) std::swap(e.a, e.b);
    multiset_equal = multiset_equal && sorted_points(streetmover::sample_point_cloud(a, 100)) ==
                                           sorted_points(streetmover::sample_point_cloud(permuted, 100));
  }
  return {rigid_worst < 1e-9 && sym_worst < 1e-9 && multiset_equal,
          fmt("rigid |dSM| max %.2e < 1e-9; symmetry max %.2e < 1e-9; edge permutation multisets %s", rigid_worst,
              sym_worst, multiset_equal ? "identical" : "DIFFER")};
}

// 4 ------------------------------------------------------------------------

Outcome canonicalization() {
  Rng rng(4004);
  int order_mismatch = 0, roundtrip_mismatch = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto g = testing::random_accepted_graph(rng);
    const auto s = testing::shuffled(g, rng);
    // Permutation invariance of the resulting ordered graph, compared exactly.
    const auto a = geom::reorder(g, geom::canonical_order(g));
    const auto b = geom::reorder(s, geom::canonical_order(s));
    if (a.nodes != b.nodes || a.edges != b.edges) ++order_mismatch;
    const int m = std::max(1, geom::max_edge_span(a));
    const auto back = geom::from_sequence(geom::to_soft(geom::to_sequence(a, m)), 0.5);
    if (back.nodes != a.nodes || back.edges != a.edges) ++roundtrip_mismatch;
  }
  return {order_mismatch == 0 && roundtrip_mismatch == 0,
          fmt("500 graphs: ordering mismatches under storage permutation %d; sequence round-trip mismatches %d",
              order_mismatch, roundtrip_mismatch)};
}

// 5 ------------------------------------------------------------------------

std::map<std::string, std::string> read_tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    files[fs::relative(e.path(), root).string()] = s.str();
  }
  return files;
}

Outcome pipeline_reproducibility(const fs::path& work) {
  const auto map = dataset::generate_synthetic_map(5005, 12);
  dataset::DatasetConfig cfg;
  cfg.seed = 5005;
  cfg.workers = 1;
  const auto stats_a = dataset::build_dataset(map, cfg, work / "c5_a");
  cfg.workers = 4;
  dataset::build_dataset(map, cfg, work / "c5_b");
  auto a = read_tree(work / "c5_a");
  auto b = read_tree(work / "c5_b");
  // dataset.cfg echoes the worker count.
  a.erase("dataset.cfg");
  b.erase("dataset.cfg");
  const bool identical = a == b;

  int bad_bounds = 0;
  const auto entries = dataset::load_manifest(work / "c5_a");
  for (const auto& e : entries)
    if (e.n_nodes < 4 || e.n_nodes > 9 || e.n_edges > 15) ++bad_bounds;
  // The stored graphs, not only the manifest, must respect the bounds.
  for (const auto& s : dataset::load_samples(work / "c5_a", std::nullopt))
    if (s.graph.nodes.size() < 4 || s.graph.nodes.size() > 9 || s.graph.edges.size() > 15) ++bad_bounds;

  const int train_tiles = stats_a.tiles_per_split.at("train");
  const int other_tiles = stats_a.tiles_per_split.at("valid") + stats_a.tiles_per_split.at("test");
  const bool attempts = stats_a.variants_attempted == 128 * train_tiles + other_tiles &&
                        stats_a.translations_attempted == 16 * train_tiles + other_tiles;
  const bool factor = stats_a.max_variants_per_tile <= 128;
  return {identical && bad_bounds == 0 && attempts && factor && !entries.empty(),
          fmt("%zu records, byte-identical rebuild (workers 1 vs 4): %s; bound violations %d; %d train tiles x 16x8 = "
              "%d variant attempts (+%d unaugmented): %s; max emitted per tile %d <= 128",
              entries.size(), identical ? "yes" : "NO", bad_bounds, train_tiles, 128 * train_tiles, other_tiles,
              attempts ? "exact" : "MISMATCH", stats_a.max_variants_per_tile)};
}

// 6 ------------------------------------------------------------------------

struct OverfitResult {
  double best_sm = 0.0;
  double rescored_sm = 0.0;
  long steps = 0;
  double cpu = 0.0;
};

OverfitResult overfit(const std::vector<dataset::Sample>& samples, int frontier, model::ModelKind kind) {
  model::ModelConfig mc;
  mc.kind = kind;
  mc.frontier = frontier;
  mc.layers = 4;
  mc.d_model = 64;
  mc.heads = 4;
  mc.mlp_inner = 256;
  mc.seed = 6006;
  model::Model m(mc);
  training::TrainConfig tc;
  tc.batch_size = 16;
  tc.epochs = 2000;
  tc.max_steps = 2000;
  tc.eval_every = 25;
  tc.patience = 0;
  tc.stop_below = 0.01;
  tc.val_subsample = 16;
  tc.seed = 6006;
  const double t0 = cpu_seconds();
  const auto report = training::train(m, samples, samples, tc);
  OverfitResult r;
  r.cpu = cpu_seconds() - t0;
  r.steps = report.records.empty() ? 0 : report.records[report.best_record].step;
  r.best_sm = report.records[report.best_record].val_streetmover;
  // Independent re-scoring of the restored parameters.
  const auto scored = training::generate_and_score(m, samples, {}, {}, 1);
  for (const auto& s : scored) r.rescored_sm += s.score.streetmover;
  r.rescored_sm /= static_cast<double>(scored.size());
  return r;
}

Outcome overfit_run(const fs::path& work) {
  const auto map = dataset::generate_synthetic_map(1, 10);
  dataset::DatasetConfig cfg;
  cfg.augment = false;
  const auto stats = dataset::build_dataset(map, cfg, work / "c6");
  const auto samples = dataset::load_samples(work / "c6", dataset::Split::Train, 16);
  if (samples.size() != 16) return {false, fmt("only %zu training records", samples.size())};
  const auto ca = overfit(samples, stats.frontier, model::ModelKind::Ggt);
  const auto no_ca = overfit(samples, stats.frontier, model::ModelKind::GgtNoCa);
  const bool ca_ok = ca.rescored_sm < 0.01 && ca.steps <= 2000 && ca.cpu < 1800.0;
  const bool no_ca_ok = no_ca.rescored_sm < 0.01 && no_ca.steps <= 2000 && no_ca.cpu < 1800.0;
  return {ca_ok && no_ca_ok,
          fmt("GGT: train SM %.5f (re-scored %.5f) at step %ld, cpu %.0fs; no context attention: train SM %.5f "
              "(re-scored %.5f) at step %ld, cpu %.0fs; target < 0.01 within 2000 steps and 1800s",
              ca.best_sm, ca.rescored_sm, ca.steps, ca.cpu, no_ca.best_sm, no_ca.rescored_sm, no_ca.steps,
              no_ca.cpu)};
}

// 7 ------------------------------------------------------------------------

double held_out_sm(model::ModelConfig mc, const std::vector<dataset::Sample>& train_set,
                   const std::vector<dataset::Sample>& valid, const std::vector<dataset::Sample>& test,
                   const training::TrainConfig& tc, long* steps) {
  model::Model m(mc);
  const auto report = training::train(m, train_set, valid, tc);
  *steps = report.steps;
  eval::EvalOptions eo;
  eo.workers = 4;
  return eval::evaluate(m, test, eo).summary.sm_mean;
}

Outcome desk_scale_comparison(const fs::path& work) {
  const auto map = dataset::generate_synthetic_map(7007, 40);
  dataset::DatasetConfig cfg;
  cfg.augment = false;
  cfg.seed = 7007;
  cfg.workers = 4;
  const auto stats = dataset::build_dataset(map, cfg, work / "c7");
  // 512 records: 384 train, 64 valid (model selection), 64 held-out test.
  const auto train_set = dataset::load_samples(work / "c7", dataset::Split::Train, 384);
  const auto valid = dataset::load_samples(work / "c7", dataset::Split::Valid, 64);
  const auto test = dataset::load_samples(work / "c7", dataset::Split::Test, 64);
  if (train_set.size() + valid.size() + test.size() != 512)
    return {false, fmt("dataset too small: %zu/%zu/%zu", train_set.size(), valid.size(), test.size())};

  training::TrainConfig tc;
  tc.batch_size = 32;
  tc.epochs = 60;
  tc.eval_every = 5;
  tc.patience = 4;
  tc.val_subsample = 64;
  tc.workers = 4;
  tc.seed = 7007;

  model::ModelConfig ggt;
  ggt.frontier = stats.frontier;
  ggt.layers = 4;
  ggt.d_model = 64;
  ggt.heads = 4;
  ggt.mlp_inner = 256;
  ggt.seed = 7007;
  model::ModelConfig mlp = ggt;
  mlp.kind = model::ModelKind::Mlp;
  mlp.mlp_max_nodes = 10;

  long ggt_steps = 0, mlp_steps = 0;
  const double sm_ggt = held_out_sm(ggt, train_set, valid, test, tc, &ggt_steps);
  const double sm_mlp = held_out_sm(mlp, train_set, valid, test, tc, &mlp_steps);
  const double ratio = sm_mlp / sm_ggt;
  return {ratio >= 2.0, fmt("held-out SM: GGT %.5f (%ld steps), MLP %.5f (%ld steps), MLP/GGT = %.2f (target >= 2)",
                            sm_ggt, ggt_steps, sm_mlp, mlp_steps, ratio)};
}

// 8 ------------------------------------------------------------------------

Outcome rasterizer_equivariance() {
  Rng rng(8008);
  int mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto g = testing::random_accepted_graph(rng);
    const auto base = raster::rasterize(g);
    for (int k = 0; k < 8; ++k)
      if (raster::rasterize(geom::dihedral_transform(g, k)).pixels != raster::dihedral_image(base, k).pixels)
        ++mismatches;
  }
  return {mismatches == 0, fmt("100 graphs x 8 transforms: %d images differ (exact pixel comparison)", mismatches)};
}

// 9 ------------------------------------------------------------------------

Outcome stitching_roundtrip() {
  Rng rng(9009);
  const int shapes[][2] = {{2, 1}, {1, 2}, {2, 2}, {3, 3}, {2, 4}};
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto g = testing::random_accepted_graph(rng);
    const auto [rows, cols] = shapes[trial % 5];
    const auto back = stitch::stitch_grid(stitch::split_into_tiles(g, rows, cols));
    worst = std::max(worst, streetmover::streetmover_distance(g, back));
  }
  return {worst < 1e-3, fmt("50 graphs over 2x1/1x2/2x2/3x3/2x4 grids: max SM %.3e < 1e-3", worst)};
}

// 10 -----------------------------------------------------------------------

Outcome causality() {
  Rng rng(1010);
  int violations = 0;
  int trials = 0;
  for (auto kind : {model::ModelKind::Ggt, model::ModelKind::GgtNoCa, model::ModelKind::Rnn}) {
    model::ModelConfig mc = training::gradcheck_config(kind);
    mc.seed = 1010;
    model::Model m(mc);
    const int batch = 2, steps = 8, width = mc.frontier + 3;
    std::vector<raster::GrayImage> imgs(batch, raster::GrayImage(mc.image_size, mc.image_size));
    for (auto& img : imgs)
      for (auto& v : img.pixels) v = rng.uniform();
    const raster::GrayImage* ptrs[] = {&imgs[0], &imgs[1]};
    diff::Tensor prev({batch * steps, width});
    for (auto& v : prev.storage()) v = rng.uniform(-1, 1);
    diff::Tape tape(false);
    const diff::Var code = m.encode(tape, model::stack_images(ptrs), false);
    const auto base = m.decode(tape, code, prev, batch, steps);
    for (int trial = 0; trial < 20; ++trial, ++trials) {
      const int t = static_cast<int>(rng.below(steps - 1));
      diff::Tensor perturbed = prev;
      for (int b = 0; b < batch; ++b)
        for (int r = t + 1; r < steps; ++r)
          for (int j = 0; j < width; ++j) perturbed.at(b * steps + r, j) = rng.uniform(-10, 10);
      const auto out = m.decode(tape, code, perturbed, batch, steps);
      for (int b = 0; b < batch; ++b)
        for (int r = 0; r <= t; ++r) {
          const int row = b * steps + r;
          for (int j = 0; j < mc.frontier + 1; ++j)
            if (out.adjacency_logits.value().at(row, j) != base.adjacency_logits.value().at(row, j)) ++violations;
          for (int j = 0; j < 2; ++j)
            if (out.coords.value().at(row, j) != base.coords.value().at(row, j)) ++violations;
        }
    }
  }
  return {violations == 0,
          fmt("%d trials (GGT, no-CA GGT, RNN): %d output entries at steps <= t changed", trials, violations)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"roadforge acceptance criteria"};
  std::vector<int> only;
  std::string work_dir = (fs::temp_directory_path() / "roadforge_acceptance").string();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--work-dir", work_dir, "Scratch directory for datasets");
  std::string report_path;
  app.add_option("--report", report_path, "Also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  const fs::path work(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char* name;
    bool soft;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", false, gradient_correctness},
      {2, "sinkhorn fidelity", false, sinkhorn_fidelity},
      {3, "metric invariances", false, metric_invariances},
      {4, "canonicalization", false, canonicalization},
      {5, "pipeline reproducibility and bounds", false, [&] { return pipeline_reproducibility(work); }},
      {6, "overfit run", false, [&] { return overfit_run(work); }},
      {7, "desk-scale comparison (soft)", true, [&] { return desk_scale_comparison(work); }},
      {8, "rasterizer equivariance", false, rasterizer_equivariance},
      {9, "stitching round trip", false, stitching_roundtrip},
      {10, "causality", false, causality},
  };

  const std::set<int> selected(only.begin(), only.end());
  std::ofstream report;
  if (!report_path.empty()) report.open(report_path);
  int hard_failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass && !c.soft) ++hard_failures;
    const std::string line = fmt("[%s] %2d %s: %s (%.1fs)", o.pass ? "PASS" : (c.soft ? "SOFT-FAIL" : "FAIL"), c.id,
                                 c.name, o.detail.c_str(), secs);
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (report) report << line << '\n' << std::flush;
  }
  fs::remove_all(work);
  return hard_failures == 0 ? 0 : 1;
}
