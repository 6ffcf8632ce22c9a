#pragma once

#include <string>
#include <vector>

#include "roadforge/geom/graph.hpp"

namespace roadforge::streetmover {

/// Points with uniform mass 1/n.
struct PointCloud {
  std::vector<geom::Point2> points;

  int size() const { return static_cast<int>(points.size()); }
};

struct TransportResult {
  double cost = 0.0;
  /// Row-major n x m transport plan.
  std::vector<double> coupling;
  int rows = 0;
  int cols = 0;
  int iterations = 0;
  bool converged = false;

  double at(int i, int j) const { return coupling[static_cast<std::size_t>(i) * cols + j]; }
};

struct SinkhornOptions {
  double eps = 1e-3;
  int max_iter = 10000;
  /// Stop once the summed marginal violation drops below tol.
  double tol = 1e-9;
  /// Anneal eps geometrically from the cost scale down to `eps`; this only
  /// changes the warm start, not the fixed point.
  bool eps_scaling = true;
};

struct StreetMoverOptions {
  int samples = 100;
  SinkhornOptions sinkhorn;
};

/// Midpoint-rule sampling: edge e gets n_e = max(1, round(n len_e / L)) points
/// at arc lengths (k + 0.5) len_e / n_e. The total may differ from n by
/// rounding. Throws NoEdges.
PointCloud sample_point_cloud(const geom::RoadGraph& g, int n);

/// Entropic OT between uniform clouds under squared Euclidean cost, with
/// log-domain updates. The result is returned even when not converged.
TransportResult sinkhorn(const PointCloud& p, const PointCloud& q, const SinkhornOptions& opts = {});

/// Exact assignment cost (mean squared distance) for equal-size clouds via
/// the Hungarian algorithm. Throws SizeMismatch.
double exact_ot(const PointCloud& p, const PointCloud& q);

TransportResult streetmover_transport(const geom::RoadGraph& a, const geom::RoadGraph& b,
                                      const StreetMoverOptions& opts = {});
double streetmover_distance(const geom::RoadGraph& a, const geom::RoadGraph& b, const StreetMoverOptions& opts = {});

/// Coupling as CSV: header "i,j,mass", one line per non-negligible entry.
std::string coupling_csv(const TransportResult& t);

/// Both clouds over the [-1, 1] tile, with the `top_k` heaviest coupling
/// entries drawn as segments.
std::string render_transport_svg(const PointCloud& p, const PointCloud& q, const TransportResult& t, int top_k = 60);

}  // namespace roadforge::streetmover
