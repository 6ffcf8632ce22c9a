#include "roadforge/stitch/stitch.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "roadforge/common/error.hpp"

namespace roadforge::stitch {

using geom::Point2;
using geom::RoadGraph;

namespace {

// Turn angle below which a merged degree-2 border node is dissolved.
constexpr double kJoinAngleRad = 1e-6;

int find_root(std::vector<int>& parent, int i) {
  while (parent[i] != i) {
    parent[i] = parent[parent[i]];
    i = parent[i];
  }
  return i;
}

}  // namespace

RoadGraph stitch_grid(const TileGrid& grid, double boundary_tol) {
  if (grid.empty() || grid[0].empty()) fail(ErrorCode::EmptyGrid, "stitch needs at least one tile");
  if (!(boundary_tol > 0.0)) fail(ErrorCode::InvalidArgument, "boundary tolerance must be positive");
  const int rows = static_cast<int>(grid.size());
  const int cols = static_cast<int>(grid[0].size());
  for (const auto& row : grid) {
    if (static_cast<int>(row.size()) != cols) fail(ErrorCode::InvalidArgument, "tile grid rows differ in length");
  }

  RoadGraph all;
  std::vector<int> cell_of;
  std::vector<int> cell_start(static_cast<std::size_t>(rows) * cols + 1, 0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const RoadGraph& g = grid[r][c];
      const int base = all.node_count();
      cell_start[static_cast<std::size_t>(r) * cols + c] = base;
      for (const Point2& p : g.nodes) {
        all.nodes.push_back({p.x + 2.0 * c, p.y + 2.0 * r});
        cell_of.push_back(r * cols + c);
      }
      for (const auto& e : g.edges) all.edges.push_back({base + e.a, base + e.b});
    }
  }
  cell_start.back() = all.node_count();

  // Border nodes pair up with their mutual nearest neighbour in each
  // adjacent tile, so a node near a border does not swallow a cut point that
  // already has its twin across the border.
  auto nearest_in = [&](int i, int cell) {
    int best = -1;
    double best_d = boundary_tol;
    for (int j = cell_start[cell]; j < cell_start[cell + 1]; ++j) {
      const double d = geom::distance(all.nodes[i], all.nodes[j]);
      if (d <= best_d) {
        best = j;
        best_d = d;
      }
    }
    return best;
  };
  std::vector<int> parent(all.nodes.size());
  std::iota(parent.begin(), parent.end(), 0);
  for (int ri = 0; ri < rows; ++ri) {
    for (int ci = 0; ci < cols; ++ci) {
      const int a = ri * cols + ci;
      for (const auto& [dr, dc] : {std::pair{0, 1}, {1, -1}, {1, 0}, {1, 1}}) {
        const int rj = ri + dr, cj = ci + dc;
        if (rj >= rows || cj < 0 || cj >= cols) continue;
        const int b = rj * cols + cj;
        for (int i = cell_start[a]; i < cell_start[a + 1]; ++i) {
          const int j = nearest_in(i, b);
          if (j < 0 || nearest_in(j, a) != i) continue;
          const int x = find_root(parent, i), y = find_root(parent, j);
          parent[std::max(x, y)] = std::min(x, y);
        }
      }
    }
  }

  // Clusters keep the order of their first member; positions are centroids.
  std::vector<int> index(all.nodes.size(), -1);
  std::vector<Point2> sum;
  std::vector<int> count;
  for (int i = 0; i < all.node_count(); ++i) {
    const int root = find_root(parent, i);
    if (index[root] < 0) {
      index[root] = static_cast<int>(sum.size());
      sum.push_back({0.0, 0.0});
      count.push_back(0);
    }
    sum[index[root]] = sum[index[root]] + all.nodes[i];
    ++count[index[root]];
  }
  RoadGraph merged;
  for (std::size_t k = 0; k < sum.size(); ++k) merged.nodes.push_back((1.0 / count[k]) * sum[k]);
  for (const auto& e : all.edges) merged.add_edge(index[find_root(parent, e.a)], index[find_root(parent, e.b)]);

  // A road crossing a border arrives as two pieces meeting at a merged node;
  // straight continuations are joined back into one edge.
  std::vector<std::vector<int>> adj(merged.nodes.size());
  for (const auto& e : merged.edges) {
    adj[e.a].push_back(e.b);
    adj[e.b].push_back(e.a);
  }
  std::vector<bool> removed(merged.nodes.size(), false);
  for (std::size_t k = 0; k < merged.nodes.size(); ++k) {
    if (count[k] < 2 || adj[k].size() != 2) continue;
    const int u = adj[k][0], w = adj[k][1];
    const Point2 d1 = merged.nodes[k] - merged.nodes[u], d2 = merged.nodes[w] - merged.nodes[k];
    const double turn = std::abs(std::atan2(geom::cross(d1, d2), geom::dot(d1, d2)));
    if (turn > kJoinAngleRad) continue;
    if (std::find(adj[u].begin(), adj[u].end(), w) != adj[u].end()) continue;
    removed[k] = true;
    std::replace(adj[u].begin(), adj[u].end(), static_cast<int>(k), w);
    std::replace(adj[w].begin(), adj[w].end(), static_cast<int>(k), u);
    adj[k].clear();
  }

  RoadGraph out;
  std::vector<int> final_index(merged.nodes.size(), -1);
  for (std::size_t k = 0; k < merged.nodes.size(); ++k) {
    if (removed[k]) continue;
    final_index[k] = out.node_count();
    const Point2 p = merged.nodes[k];
    out.nodes.push_back({(p.x + 1.0) / cols - 1.0, (p.y + 1.0) / rows - 1.0});
  }
  for (std::size_t k = 0; k < adj.size(); ++k) {
    for (int j : adj[k]) {
      if (static_cast<int>(k) < j) out.add_edge(final_index[k], final_index[j]);
    }
  }
  out.normalize_edges();
  return out;
}

TileGrid split_into_tiles(const RoadGraph& g, int rows, int cols) {
  if (rows < 1 || cols < 1) fail(ErrorCode::EmptyGrid, "grid needs at least one row and column");
  TileGrid grid(rows, std::vector<RoadGraph>(cols));
  // Global tile frame: x in [-1, 2 cols - 1], y in [-1, 2 rows - 1].
  auto to_global = [&](Point2 p) { return Point2{(p.x + 1.0) * cols - 1.0, (p.y + 1.0) * rows - 1.0}; };
  auto cell_index = [](double v, int n) { return std::clamp(static_cast<int>(std::floor((v + 1.0) / 2.0)), 0, n - 1); };

  // Per tile, node ids keyed by the exact source position of the point.
  std::vector<std::map<std::pair<int, double>, int>> ids(static_cast<std::size_t>(rows) * cols);
  auto node_in = [&](int cell, std::pair<int, double> key, Point2 global) {
    auto& m = ids[cell];
    auto it = m.find(key);
    if (it != m.end()) return it->second;
    RoadGraph& tile = grid[cell / cols][cell % cols];
    const int r = cell / cols, c = cell % cols;
    tile.nodes.push_back({global.x - 2.0 * c, global.y - 2.0 * r});
    const int id = tile.node_count() - 1;
    m.emplace(key, id);
    return id;
  };

  std::vector<bool> has_edge(g.nodes.size(), false);
  for (int ei = 0; ei < g.edge_count(); ++ei) {
    const auto& e = g.edges[ei];
    has_edge[e.a] = has_edge[e.b] = true;
    const Point2 a = to_global(g.nodes[e.a]), b = to_global(g.nodes[e.b]);
    std::vector<double> cuts{0.0, 1.0};
    auto add_cuts = [&](double from, double to, int n) {
      for (int k = 1; k < n; ++k) {
        const double line = 2.0 * k - 1.0;
        if ((from < line && line < to) || (to < line && line < from)) cuts.push_back((line - from) / (to - from));
      }
    };
    add_cuts(a.x, b.x, cols);
    add_cuts(a.y, b.y, rows);
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    auto key = [&](std::size_t k) {
      if (k == 0) return std::pair{e.a, -1.0};
      if (k + 1 == cuts.size()) return std::pair{e.b, -1.0};
      return std::pair{-1 - ei, cuts[k]};
    };
    auto point = [&](std::size_t k) {
      if (k == 0) return a;
      if (k + 1 == cuts.size()) return b;
      return a + cuts[k] * (b - a);
    };
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
      const Point2 p = point(k), q = point(k + 1);
      const Point2 mid = 0.5 * (p + q);
      const int cell = cell_index(mid.y, rows) * cols + cell_index(mid.x, cols);
      const int u = node_in(cell, key(k), p), v = node_in(cell, key(k + 1), q);
      grid[cell / cols][cell % cols].add_edge(u, v);
    }
  }
  for (int i = 0; i < g.node_count(); ++i) {
    if (has_edge[i]) continue;
    const Point2 p = to_global(g.nodes[i]);
    node_in(cell_index(p.y, rows) * cols + cell_index(p.x, cols), {i, -1.0}, p);
  }
  for (auto& row : grid) {
    for (auto& tile : row) tile.normalize_edges();
  }
  return grid;
}

}  // namespace roadforge::stitch
