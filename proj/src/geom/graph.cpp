#include "roadforge/geom/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "roadforge/common/error.hpp"

namespace roadforge::geom {

double norm(Point2 p) { return std::hypot(p.x, p.y); }
double distance(Point2 a, Point2 b) { return norm(a - b); }

void RoadGraph::add_edge(int i, int j) {
  if (i == j) return;
  Edge e{std::min(i, j), std::max(i, j)};
  if (std::find(edges.begin(), edges.end(), e) == edges.end()) edges.push_back(e);
}

void RoadGraph::normalize_edges() {
  for (auto& e : edges) {
    if (e.a > e.b) std::swap(e.a, e.b);
  }
  std::erase_if(edges, [](const Edge& e) { return e.a == e.b; });
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
}

std::vector<std::vector<int>> RoadGraph::adjacency() const {
  std::vector<std::vector<int>> adj(nodes.size());
  for (const auto& e : edges) {
    adj[e.a].push_back(e.b);
    adj[e.b].push_back(e.a);
  }
  return adj;
}

std::vector<int> RoadGraph::degrees() const {
  std::vector<int> deg(nodes.size(), 0);
  for (const auto& e : edges) {
    ++deg[e.a];
    ++deg[e.b];
  }
  return deg;
}

double RoadGraph::total_length() const {
  double total = 0.0;
  for (const auto& e : edges) total += distance(nodes[e.a], nodes[e.b]);
  return total;
}

void validate(const RoadGraph& g) {
  for (const auto& p : g.nodes) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
      fail(ErrorCode::InvalidArgument, "non-finite node coordinate");
    }
  }
  std::vector<Edge> seen;
  for (const auto& e : g.edges) {
    if (e.a == e.b) fail(ErrorCode::InvalidArgument, "self-loop on node " + std::to_string(e.a));
    if (e.a > e.b) fail(ErrorCode::InvalidArgument, "edge not stored with a < b");
    if (e.a < 0 || e.b >= g.node_count()) fail(ErrorCode::InvalidArgument, "edge index out of range");
    seen.push_back(e);
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    fail(ErrorCode::InvalidArgument, "duplicate edge");
  }
}

std::optional<Point2> intersect_segments(const Segment2& s, const Segment2& t) {
  const Point2 r = s.b - s.a;
  const Point2 q = t.b - t.a;
  const double o1 = cross(r, t.a - s.a);
  const double o2 = cross(r, t.b - s.a);
  const double o3 = cross(q, s.a - t.a);
  const double o4 = cross(q, s.b - t.a);
  const bool straddle_s = (o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0);
  const bool straddle_t = (o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0);
  if (!straddle_s || !straddle_t) return std::nullopt;
  const double denom = cross(r, q);
  if (denom == 0.0) return std::nullopt;
  const double u = cross(t.a - s.a, q) / denom;
  return s.a + u * r;
}

std::optional<Point2> intersect_segments(const GeoSegment& s, const GeoSegment& t) {
  return intersect_segments(Segment2{s.p, s.q}, Segment2{t.p, t.q});
}

namespace {

struct Split {
  double t;
  int node;
};

double param_along(const Segment2& s, Point2 p) {
  const Point2 d = s.b - s.a;
  return dot(p - s.a, d) / dot(d, d);
}

bool planarize_pass(RoadGraph& g) {
  const int ne = g.edge_count();
  std::vector<std::vector<Split>> splits(ne);
  bool any = false;
  for (int i = 0; i < ne; ++i) {
    const Segment2 si = g.segment(g.edges[i]);
    for (int j = i + 1; j < ne; ++j) {
      const Segment2 sj = g.segment(g.edges[j]);
      auto p = intersect_segments(si, sj);
      if (!p) continue;
      any = true;
      const int id = g.node_count();
      g.nodes.push_back(*p);
      splits[i].push_back({param_along(si, *p), id});
      splits[j].push_back({param_along(sj, *p), id});
    }
  }
  if (!any) return false;
  std::vector<Edge> old = std::move(g.edges);
  g.edges.clear();
  for (int i = 0; i < ne; ++i) {
    auto& sp = splits[i];
    std::sort(sp.begin(), sp.end(), [](const Split& a, const Split& b) {
      return a.t < b.t || (a.t == b.t && a.node < b.node);
    });
    int prev = old[i].a;
    for (const auto& s : sp) {
      g.edges.push_back({prev, s.node});
      prev = s.node;
    }
    g.edges.push_back({prev, old[i].b});
  }
  g.normalize_edges();
  return true;
}

struct DisjointSets {
  std::vector<int> parent;
  explicit DisjointSets(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (b < a) std::swap(a, b);
    parent[b] = a;
    return true;
  }
};

bool merge_pass(RoadGraph& g, double eps) {
  const int n = g.node_count();
  DisjointSets sets(n);
  bool any = false;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (distance(g.nodes[i], g.nodes[j]) < eps) any |= sets.unite(i, j);
    }
  }
  if (!any) return false;
  // Clusters are numbered by their smallest member, which is also the root.
  std::vector<int> new_index(n, -1);
  std::vector<Point2> sum;
  std::vector<int> count;
  for (int i = 0; i < n; ++i) {
    const int root = sets.find(i);
    if (new_index[root] < 0) {
      new_index[root] = static_cast<int>(sum.size());
      sum.push_back({0.0, 0.0});
      count.push_back(0);
    }
    const int k = new_index[root];
    sum[k] = sum[k] + g.nodes[i];
    ++count[k];
  }
  RoadGraph out;
  out.nodes.reserve(sum.size());
  for (std::size_t k = 0; k < sum.size(); ++k) {
    out.nodes.push_back((1.0 / count[k]) * sum[k]);
  }
  for (const auto& e : g.edges) {
    out.edges.push_back({new_index[sets.find(e.a)], new_index[sets.find(e.b)]});
  }
  out.normalize_edges();
  g = std::move(out);
  return true;
}

RoadGraph remove_node(const RoadGraph& g, int victim) {
  RoadGraph out;
  std::vector<int> remap(g.nodes.size(), -1);
  for (int i = 0; i < g.node_count(); ++i) {
    if (i == victim) continue;
    remap[i] = out.node_count();
    out.nodes.push_back(g.nodes[i]);
  }
  for (const auto& e : g.edges) {
    if (e.a == victim || e.b == victim) continue;
    out.edges.push_back({remap[e.a], remap[e.b]});
  }
  out.normalize_edges();
  return out;
}

bool crosses_any(const RoadGraph& g, const Segment2& s, int skip_node) {
  for (const auto& e : g.edges) {
    if (e.a == skip_node || e.b == skip_node) continue;
    if (intersect_segments(s, g.segment(e))) return true;
  }
  return false;
}

}  // namespace

RoadGraph planarize(const RoadGraph& g) {
  RoadGraph out = g;
  out.normalize_edges();
  // Near-degenerate triple crossings can leave a residual crossing after one
  // pass; a handful of passes always settles in practice.
  for (int pass = 0; pass < 16 && planarize_pass(out); ++pass) {
  }
  return out;
}

RoadGraph merge_close_nodes(const RoadGraph& g, double eps) {
  if (!(eps > 0.0)) fail(ErrorCode::InvalidArgument, "merge eps must be positive");
  RoadGraph out = g;
  out.normalize_edges();
  while (merge_pass(out, eps)) {
  }
  return out;
}

RoadGraph straighten(const RoadGraph& g, double max_deviation_deg) {
  if (!(max_deviation_deg > 0.0 && max_deviation_deg < 90.0)) {
    fail(ErrorCode::InvalidArgument, "straighten deviation must lie in (0, 90) degrees");
  }
  RoadGraph out = g;
  out.normalize_edges();
  bool changed = true;
  while (changed) {
    changed = false;
    const auto adj = out.adjacency();
    for (int v = 0; v < out.node_count(); ++v) {
      if (adj[v].size() != 2) continue;
      const int u = adj[v][0];
      const int w = adj[v][1];
      const Point2 d1 = out.nodes[u] - out.nodes[v];
      const Point2 d2 = out.nodes[w] - out.nodes[v];
      const double n1 = norm(d1);
      const double n2 = norm(d2);
      if (n1 == 0.0 || n2 == 0.0) continue;
      const double c = std::clamp(dot(d1, d2) / (n1 * n2), -1.0, 1.0);
      const double deviation = 180.0 - std::acos(c) * 180.0 / std::numbers::pi;
      if (!(deviation < max_deviation_deg)) continue;
      const Edge fused{std::min(u, w), std::max(u, w)};
      if (std::find(out.edges.begin(), out.edges.end(), fused) != out.edges.end()) continue;
      if (crosses_any(out, {out.nodes[u], out.nodes[w]}, v)) continue;
      RoadGraph next = out;
      next.edges.push_back(fused);
      out = remove_node(next, v);
      changed = true;
      break;
    }
  }
  return out;
}

RoadGraph preprocess(const RoadGraph& g, const PreprocessOptions& opts) {
  RoadGraph cur = g;
  cur.normalize_edges();
  for (int round = 0; round < opts.max_rounds; ++round) {
    RoadGraph next = straighten(merge_close_nodes(planarize(cur), opts.merge_eps), opts.max_deviation_deg);
    if (next == cur) break;
    cur = std::move(next);
  }
  return cur;
}

RoadGraph drop_isolated_nodes(const RoadGraph& g) {
  const auto deg = g.degrees();
  RoadGraph out;
  std::vector<int> remap(g.nodes.size(), -1);
  for (int i = 0; i < g.node_count(); ++i) {
    if (deg[i] == 0) continue;
    remap[i] = out.node_count();
    out.nodes.push_back(g.nodes[i]);
  }
  for (const auto& e : g.edges) out.edges.push_back({remap[e.a], remap[e.b]});
  out.normalize_edges();
  return out;
}

int count_crossings(const RoadGraph& g) {
  int count = 0;
  for (int i = 0; i < g.edge_count(); ++i) {
    for (int j = i + 1; j < g.edge_count(); ++j) {
      if (intersect_segments(g.segment(g.edges[i]), g.segment(g.edges[j]))) ++count;
    }
  }
  return count;
}

double min_node_distance(const RoadGraph& g) {
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < g.node_count(); ++i) {
    for (int j = i + 1; j < g.node_count(); ++j) {
      best = std::min(best, distance(g.nodes[i], g.nodes[j]));
    }
  }
  return best;
}

std::string_view to_string(FilterVerdict v) {
  switch (v) {
    case FilterVerdict::Accept: return "accept";
    case FilterVerdict::RejectTrivial: return "trivial";
    case FilterVerdict::RejectCluttered: return "cluttered";
  }
  return "unknown";
}

FilterVerdict filter_graph(const RoadGraph& g, const FilterLimits& limits) {
  if (g.node_count() < limits.min_nodes) return FilterVerdict::RejectTrivial;
  if (g.node_count() > limits.max_nodes || g.edge_count() > limits.max_edges) {
    return FilterVerdict::RejectCluttered;
  }
  return FilterVerdict::Accept;
}

Point2 dihedral_apply(int k, Point2 p) {
  for (int r = 0; r < k % 4; ++r) p = {-p.y, p.x};
  if (k >= 4) p.x = -p.x;
  return p;
}

RoadGraph dihedral_transform(const RoadGraph& g, int k) {
  if (k < 0 || k >= 8) fail(ErrorCode::InvalidArgument, "dihedral index must be in [0, 8)");
  RoadGraph out = g;
  for (auto& p : out.nodes) p = dihedral_apply(k, p);
  return out;
}

std::array<RoadGraph, 8> dihedral_augment(const RoadGraph& g) {
  std::array<RoadGraph, 8> out;
  for (int k = 0; k < 8; ++k) out[k] = dihedral_transform(g, k);
  return out;
}

RoadGraph translate(const RoadGraph& g, Point2 offset) {
  RoadGraph out = g;
  for (auto& p : out.nodes) p = p + offset;
  return out;
}

RoadGraph scale(const RoadGraph& g, double factor) {
  RoadGraph out = g;
  for (auto& p : out.nodes) p = factor * p;
  return out;
}

bool same_geometry(const RoadGraph& a, const RoadGraph& b, double tol) {
  if (a.node_count() != b.node_count() || a.edge_count() != b.edge_count()) return false;
  std::vector<int> map(a.nodes.size(), -1);
  std::vector<bool> used(b.nodes.size(), false);
  for (int i = 0; i < a.node_count(); ++i) {
    int best = -1;
    double best_d = tol;
    for (int j = 0; j < b.node_count(); ++j) {
      const double d = distance(a.nodes[i], b.nodes[j]);
      if (!used[j] && d <= best_d) {
        best = j;
        best_d = d;
      }
    }
    if (best < 0) return false;
    used[best] = true;
    map[i] = best;
  }
  std::vector<Edge> mapped;
  for (const auto& e : a.edges) {
    mapped.push_back({std::min(map[e.a], map[e.b]), std::max(map[e.a], map[e.b])});
  }
  std::sort(mapped.begin(), mapped.end());
  std::vector<Edge> other = b.edges;
  std::sort(other.begin(), other.end());
  return mapped == other;
}

}  // namespace roadforge::geom
