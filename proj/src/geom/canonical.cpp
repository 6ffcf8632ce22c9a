#include "roadforge/geom/canonical.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <string>

#include "roadforge/common/error.hpp"

namespace roadforge::geom {

namespace {

bool top_left_less(Point2 a, Point2 b) { return a.y < b.y || (a.y == b.y && a.x < b.x); }

// Clockwise angle from ref to dir in [0, 2*pi); y points down, so a positive
// cross product is a clockwise turn on screen.
double clockwise_angle(Point2 ref, Point2 dir) {
  double theta = std::atan2(cross(ref, dir), dot(ref, dir));
  if (theta < 0.0) theta += 2.0 * std::numbers::pi;
  return theta;
}

}  // namespace

std::vector<int> canonical_order(const RoadGraph& g) {
  const int n = g.node_count();
  const auto adj = g.adjacency();
  std::vector<bool> visited(n, false);
  std::vector<int> order;
  order.reserve(n);

  struct Pending {
    int node;
    Point2 ref;
  };
  struct Candidate {
    int node;
    double angle;
    double dist;
  };

  while (static_cast<int>(order.size()) < n) {
    int start = -1;
    for (int i = 0; i < n; ++i) {
      if (visited[i]) continue;
      if (start < 0 || top_left_less(g.nodes[i], g.nodes[start])) start = i;
    }
    std::deque<Pending> queue{{start, {0.0, -1.0}}};
    visited[start] = true;
    while (!queue.empty()) {
      const auto [v, ref] = queue.front();
      queue.pop_front();
      order.push_back(v);
      std::vector<Candidate> next;
      for (int u : adj[v]) {
        if (visited[u]) continue;
        const Point2 dir = g.nodes[u] - g.nodes[v];
        next.push_back({u, clockwise_angle(ref, dir), norm(dir)});
      }
      std::sort(next.begin(), next.end(), [&](const Candidate& a, const Candidate& b) {
        if (a.angle != b.angle) return a.angle < b.angle;
        if (a.dist != b.dist) return a.dist < b.dist;
        return top_left_less(g.nodes[a.node], g.nodes[b.node]);
      });
      for (const auto& c : next) {
        visited[c.node] = true;
        queue.push_back({c.node, g.nodes[v] - g.nodes[c.node]});
      }
    }
  }
  return order;
}

RoadGraph reorder(const RoadGraph& g, const std::vector<int>& order) {
  if (static_cast<int>(order.size()) != g.node_count()) {
    fail(ErrorCode::SizeMismatch, "order length differs from node count");
  }
  RoadGraph out;
  std::vector<int> position(order.size(), -1);
  for (std::size_t k = 0; k < order.size(); ++k) {
    position[order[k]] = static_cast<int>(k);
    out.nodes.push_back(g.nodes[order[k]]);
  }
  for (const auto& e : g.edges) out.edges.push_back({position[e.a], position[e.b]});
  out.normalize_edges();
  return out;
}

RoadGraph canonicalize(const RoadGraph& g) { return reorder(g, canonical_order(g)); }

int max_edge_span(const RoadGraph& ordered) {
  int span = 0;
  for (const auto& e : ordered.edges) span = std::max(span, std::abs(e.b - e.a));
  return span;
}

CanonicalSequence to_sequence(const RoadGraph& ordered, int frontier) {
  if (frontier < 1) fail(ErrorCode::InvalidArgument, "frontier size must be >= 1");
  const int span = max_edge_span(ordered);
  if (span > frontier) {
    fail(ErrorCode::FrontierOverflow,
         "edge spans " + std::to_string(span) + " positions, frontier is " + std::to_string(frontier));
  }
  CanonicalSequence seq;
  seq.frontier_size = frontier;
  for (const auto& p : ordered.nodes) {
    seq.steps.push_back({std::vector<std::uint8_t>(frontier, 0), p, false});
  }
  for (const auto& e : ordered.edges) {
    const int later = std::max(e.a, e.b);
    const int earlier = std::min(e.a, e.b);
    seq.steps[later].adjacency[later - 1 - earlier] = 1;
  }
  seq.steps.push_back({std::vector<std::uint8_t>(frontier, 0), {0.0, 0.0}, true});
  return seq;
}

RoadGraph from_sequence(const SoftSequence& seq, double threshold) {
  RoadGraph g;
  for (const auto& step : seq) {
    if (step.stop > threshold) break;
    const int t = g.node_count();
    g.nodes.push_back(step.coords);
    for (int j = 0; j < static_cast<int>(step.adjacency.size()); ++j) {
      const int other = t - 1 - j;
      if (other < 0) break;
      if (step.adjacency[j] > threshold) g.edges.push_back({other, t});
    }
  }
  g.normalize_edges();
  return g;
}

SoftSequence to_soft(const CanonicalSequence& seq) {
  SoftSequence out;
  out.reserve(seq.steps.size());
  for (const auto& s : seq.steps) {
    out.push_back({std::vector<double>(s.adjacency.begin(), s.adjacency.end()), s.stop ? 1.0 : 0.0, s.coords});
  }
  return out;
}

RoadGraph from_sequence(const CanonicalSequence& seq) { return from_sequence(to_soft(seq), 0.5); }

}  // namespace roadforge::geom
