#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "roadforge/dataset/dataset.hpp"
#include "roadforge/model/model.hpp"
#include "roadforge/raster/raster.hpp"
#include "roadforge/streetmover/streetmover.hpp"

namespace roadforge::eval {

inline constexpr double kHistogramBin = 0.005;

struct SampleResult {
  std::string id;
  double streetmover = 0.0;
  int pred_nodes = 0;
  int pred_edges = 0;
  int true_nodes = 0;
  int true_edges = 0;
  /// Prediction without edges, scored against the tile-centre proxy.
  bool empty_prediction = false;

  int delta_nodes() const { return std::abs(pred_nodes - true_nodes); }
  int delta_edges() const { return std::abs(pred_edges - true_edges); }
};

struct EvalSummary {
  int count = 0;
  double sm_mean = 0.0;
  /// Population standard deviation over samples.
  double sm_std = 0.0;
  /// Teacher-forced loss on the same samples; NaN when not computed.
  double val_loss = 0.0;
  double delta_nodes_mean = 0.0;
  double delta_edges_mean = 0.0;
  int empty_predictions = 0;
  /// counts[k] holds values in [k * bin, (k + 1) * bin).
  std::vector<int> histogram;
  std::vector<SampleResult> samples;

  nlohmann::ordered_json to_json(bool with_samples = true) const;
  /// "bin_start,bin_end,count" rows.
  std::string histogram_csv() const;
  std::string samples_csv() const;
};

/// Aggregates already-scored samples (val_loss is left NaN).
EvalSummary summarize(std::vector<SampleResult> results);

/// Scores given predictions against the records, one per record.
EvalSummary evaluate_predictions(std::span<const dataset::Sample> samples, std::span<const geom::RoadGraph> predictions,
                                 const streetmover::StreetMoverOptions& sm = {}, int workers = 1);

struct EvalOptions {
  model::GenerateOptions generate;
  streetmover::StreetMoverOptions streetmover;
  double lambda = 0.5;
  int loss_batch = 64;
  int workers = 1;
};

struct Evaluation {
  EvalSummary summary;
  std::vector<geom::RoadGraph> predictions;
};

/// Greedy generation per record, all metrics, and the teacher-forced loss.
Evaluation evaluate(model::Model& m, std::span<const dataset::Sample> samples, const EvalOptions& opts = {});

struct SeedAggregate {
  int runs = 0;
  double sm_mean = 0.0;
  /// Sample standard deviation of the per-run means.
  double sm_std = 0.0;
};

/// Needs at least two runs over identical sample sets (InvalidArgument otherwise).
SeedAggregate aggregate_seeds(std::span<const EvalSummary> runs);

/// Ground truth panel above the generated one; nodes are red circles and edges
/// black lines. An edgeless prediction gets an "empty" label instead of a panel.
std::string render_comparison_svg(const geom::RoadGraph& truth, const geom::RoadGraph& pred);
/// One panel in the same style.
std::string render_graph_svg(const geom::RoadGraph& g, const std::string& title);
void write_comparison_svg(const std::filesystem::path& path, const geom::RoadGraph& truth,
                          const geom::RoadGraph& pred);

struct NoiseBenchRow {
  raster::NoiseLevel level = raster::NoiseLevel::None;
  EvalSummary summary;
};

/// Re-evaluates with each record's image replaced by inject_noise(image,
/// level, seed + index). Targets stay clean.
std::vector<NoiseBenchRow> noise_bench(model::Model& m, std::span<const dataset::Sample> samples,
                                       std::span<const raster::NoiseLevel> levels, std::uint64_t seed,
                                       const EvalOptions& opts = {});

}  // namespace roadforge::eval
