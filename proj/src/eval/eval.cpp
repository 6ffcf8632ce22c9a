#include "roadforge/eval/eval.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "roadforge/common/error.hpp"
#include "roadforge/common/parallel.hpp"
#include "roadforge/geom/io.hpp"
#include "roadforge/training/training.hpp"

namespace roadforge::eval {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

}  // namespace

nlohmann::ordered_json EvalSummary::to_json(bool with_samples) const {
  nlohmann::ordered_json j;
  j["count"] = count;
  j["streetmover_mean"] = sm_mean;
  j["streetmover_std"] = sm_std;
  j["val_loss"] = std::isnan(val_loss) ? nlohmann::ordered_json() : nlohmann::ordered_json(val_loss);
  j["delta_nodes_mean"] = delta_nodes_mean;
  j["delta_edges_mean"] = delta_edges_mean;
  j["empty_predictions"] = empty_predictions;
  j["histogram_bin"] = kHistogramBin;
  j["histogram"] = histogram;
  if (with_samples) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& s : samples) {
      nlohmann::ordered_json r;
      r["id"] = s.id;
      r["streetmover"] = s.streetmover;
      r["pred_nodes"] = s.pred_nodes;
      r["pred_edges"] = s.pred_edges;
      r["true_nodes"] = s.true_nodes;
      r["true_edges"] = s.true_edges;
      r["empty_prediction"] = s.empty_prediction;
      arr.push_back(std::move(r));
    }
    j["samples"] = std::move(arr);
  }
  return j;
}

std::string EvalSummary::histogram_csv() const {
  std::string s = "bin_start,bin_end,count\n";
  for (std::size_t k = 0; k < histogram.size(); ++k) {
    s += fmt("%.3f", k * kHistogramBin) + "," + fmt("%.3f", (k + 1) * kHistogramBin) + "," +
         std::to_string(histogram[k]) + "\n";
  }
  return s;
}

std::string EvalSummary::samples_csv() const {
  std::string s = "id,streetmover,pred_nodes,pred_edges,true_nodes,true_edges,empty_prediction\n";
  for (const auto& r : samples) {
    s += r.id + "," + fmt("%.10g", r.streetmover) + "," + std::to_string(r.pred_nodes) + "," +
         std::to_string(r.pred_edges) + "," + std::to_string(r.true_nodes) + "," + std::to_string(r.true_edges) + "," +
         (r.empty_prediction ? "1" : "0") + "\n";
  }
  return s;
}

EvalSummary summarize(std::vector<SampleResult> results) {
  if (results.empty()) fail(ErrorCode::EmptyDataset, "nothing to evaluate");
  EvalSummary s;
  s.count = static_cast<int>(results.size());
  s.val_loss = std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0, dv = 0.0, de = 0.0;
  for (const auto& r : results) {
    sum += r.streetmover;
    dv += r.delta_nodes();
    de += r.delta_edges();
    s.empty_predictions += r.empty_prediction ? 1 : 0;
    const auto bin = static_cast<std::size_t>(std::floor(r.streetmover / kHistogramBin));
    if (s.histogram.size() <= bin) s.histogram.resize(bin + 1, 0);
    ++s.histogram[bin];
  }
  s.sm_mean = sum / s.count;
  s.delta_nodes_mean = dv / s.count;
  s.delta_edges_mean = de / s.count;
  double var = 0.0;
  for (const auto& r : results) var += (r.streetmover - s.sm_mean) * (r.streetmover - s.sm_mean);
  s.sm_std = std::sqrt(var / s.count);
  s.samples = std::move(results);
  return s;
}

namespace {

SampleResult score(const dataset::Sample& sample, const geom::RoadGraph& pred,
                   const streetmover::StreetMoverOptions& sm) {
  SampleResult r;
  r.id = sample.id;
  const auto scored = training::score_prediction(pred, sample.graph, sm);
  r.streetmover = scored.streetmover;
  r.empty_prediction = scored.empty_prediction;
  r.pred_nodes = pred.node_count();
  r.pred_edges = static_cast<int>(pred.edges.size());
  r.true_nodes = sample.graph.node_count();
  r.true_edges = static_cast<int>(sample.graph.edges.size());
  return r;
}

}  // namespace

EvalSummary evaluate_predictions(std::span<const dataset::Sample> samples, std::span<const geom::RoadGraph> predictions,
                                 const streetmover::StreetMoverOptions& sm, int workers) {
  if (samples.size() != predictions.size()) {
    fail(ErrorCode::LengthMismatch, "need exactly one prediction per record");
  }
  std::vector<SampleResult> results(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) { results[i] = score(samples[i], predictions[i], sm); });
  return summarize(std::move(results));
}

Evaluation evaluate(model::Model& m, std::span<const dataset::Sample> samples, const EvalOptions& opts) {
  if (samples.empty()) fail(ErrorCode::EmptyDataset, "nothing to evaluate");
  Evaluation ev;
  ev.predictions.resize(samples.size());
  std::vector<SampleResult> results(samples.size());
  parallel_for(samples.size(), opts.workers, [&](std::size_t i) {
    ev.predictions[i] = m.generate(samples[i].image, opts.generate).graph;
    results[i] = score(samples[i], ev.predictions[i], opts.streetmover);
  });
  ev.summary = summarize(std::move(results));
  ev.summary.val_loss = training::teacher_forced_loss(m, samples, opts.lambda, opts.loss_batch).total;
  return ev;
}

SeedAggregate aggregate_seeds(std::span<const EvalSummary> runs) {
  if (runs.size() < 2) fail(ErrorCode::InvalidArgument, "aggregating seeds needs at least two runs");
  SeedAggregate a;
  a.runs = static_cast<int>(runs.size());
  for (const auto& r : runs) {
    if (r.samples.size() != runs[0].samples.size()) {
      fail(ErrorCode::InvalidArgument, "runs were evaluated on different sample sets");
    }
    for (std::size_t i = 0; i < r.samples.size(); ++i) {
      if (r.samples[i].id != runs[0].samples[i].id) {
        fail(ErrorCode::InvalidArgument, "runs were evaluated on different sample sets");
      }
    }
    a.sm_mean += r.sm_mean;
  }
  a.sm_mean /= a.runs;
  double var = 0.0;
  for (const auto& r : runs) var += (r.sm_mean - a.sm_mean) * (r.sm_mean - a.sm_mean);
  a.sm_std = std::sqrt(var / (a.runs - 1));
  return a;
}

namespace {

constexpr double kPanel = 256.0;
constexpr double kMargin = 16.0;
constexpr double kTitle = 20.0;

std::string coord(double v) { return fmt("%.2f", v); }

void draw_panel(std::string& svg, const geom::RoadGraph& g, double top, const char* title) {
  svg += "<text x=\"" + coord(kMargin) + "\" y=\"" + coord(top + 14.0) + "\" font-family=\"sans-serif\" font-size=\"12\">" +
         title + "</text>\n";
  const double y0 = top + kTitle;
  svg += "<rect x=\"" + coord(kMargin) + "\" y=\"" + coord(y0) + "\" width=\"" + coord(kPanel) + "\" height=\"" +
         coord(kPanel) + "\" fill=\"none\" stroke=\"#bbbbbb\"/>\n";
  auto px = [&](geom::Point2 p) {
    return std::pair{kMargin + (p.x + 1.0) * 0.5 * kPanel, y0 + (p.y + 1.0) * 0.5 * kPanel};
  };
  for (const auto& e : g.edges) {
    const auto [x1, y1] = px(g.nodes[e.a]);
    const auto [x2, y2] = px(g.nodes[e.b]);
    svg += "<line x1=\"" + coord(x1) + "\" y1=\"" + coord(y1) + "\" x2=\"" + coord(x2) + "\" y2=\"" + coord(y2) +
           "\" stroke=\"black\" stroke-width=\"2\"/>\n";
  }
  for (const auto& p : g.nodes) {
    const auto [x, y] = px(p);
    svg += "<circle cx=\"" + coord(x) + "\" cy=\"" + coord(y) + "\" r=\"3\" fill=\"red\"/>\n";
  }
}

}  // namespace

std::string render_comparison_svg(const geom::RoadGraph& truth, const geom::RoadGraph& pred) {
  const double panel_h = kTitle + kPanel + kMargin;
  const double width = kPanel + 2 * kMargin;
  const double height = kMargin + 2 * panel_h;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + coord(width) + "\" height=\"" +
                    coord(height) + "\" viewBox=\"0 0 " + coord(width) + " " + coord(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  draw_panel(svg, truth, kMargin, "ground truth");
  if (pred.edges.empty()) {
    svg += "<text x=\"" + coord(kMargin) + "\" y=\"" + coord(kMargin + panel_h + 14.0) +
           "\" font-family=\"sans-serif\" font-size=\"12\">empty</text>\n";
  } else {
    draw_panel(svg, pred, kMargin + panel_h, "generated");
  }
  svg += "</svg>\n";
  return svg;
}

std::string render_graph_svg(const geom::RoadGraph& g, const std::string& title) {
  const double width = kPanel + 2 * kMargin;
  const double height = kTitle + kPanel + 2 * kMargin;
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + coord(width) + "\" height=\"" +
                    coord(height) + "\" viewBox=\"0 0 " + coord(width) + " " + coord(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  draw_panel(svg, g, kMargin, title.c_str());
  svg += "</svg>\n";
  return svg;
}

void write_comparison_svg(const std::filesystem::path& path, const geom::RoadGraph& truth,
                          const geom::RoadGraph& pred) {
  geom::write_text_file(path, render_comparison_svg(truth, pred));
}

std::vector<NoiseBenchRow> noise_bench(model::Model& m, std::span<const dataset::Sample> samples,
                                       std::span<const raster::NoiseLevel> levels, std::uint64_t seed,
                                       const EvalOptions& opts) {
  std::vector<NoiseBenchRow> rows;
  for (const auto level : levels) {
    std::vector<dataset::Sample> noisy(samples.begin(), samples.end());
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      noisy[i].image = raster::inject_noise(noisy[i].image, level, seed + i);
    }
    rows.push_back({level, evaluate(m, noisy, opts).summary});
  }
  return rows;
}

}  // namespace roadforge::eval
