#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "random_graphs.hpp"
#include "roadforge/common/error.hpp"
#include "roadforge/geom/canonical.hpp"
#include "roadforge/geom/graph.hpp"
#include "roadforge/geom/io.hpp"

using namespace roadforge;
using namespace roadforge::geom;

namespace {

RoadGraph make_graph(std::vector<Point2> nodes, std::vector<Edge> edges) {
  RoadGraph g{std::move(nodes), std::move(edges)};
  g.normalize_edges();
  return g;
}

// Independent crossing test: parametric solve with Cramer's rule, accepting
// only strictly interior parameters.
bool oracle_crosses(Segment2 s, Segment2 t) {
  const double a11 = s.b.x - s.a.x, a12 = -(t.b.x - t.a.x);
  const double a21 = s.b.y - s.a.y, a22 = -(t.b.y - t.a.y);
  const double det = a11 * a22 - a12 * a21;
  if (det == 0.0) return false;
  const double r1 = t.a.x - s.a.x, r2 = t.a.y - s.a.y;
  const double u = (r1 * a22 - a12 * r2) / det;
  const double v = (a11 * r2 - r1 * a21) / det;
  return u > 1e-12 && u < 1 - 1e-12 && v > 1e-12 && v < 1 - 1e-12;
}

int oracle_union_find_clusters(const std::vector<Point2>& pts, double eps) {
  std::vector<int> parent(pts.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x];
    return x;
  };
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      if (std::hypot(pts[i].x - pts[j].x, pts[i].y - pts[j].y) < eps) parent[find(i)] = find(j);
    }
  }
  int clusters = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) clusters += find(static_cast<int>(i)) == static_cast<int>(i);
  return clusters;
}

}  // namespace

TEST_CASE("intersect_segments") {
  SUBCASE("symmetric cross") {
    auto p = intersect_segments(Segment2{{-1, 0}, {1, 0}}, Segment2{{0, -1}, {0, 1}});
    REQUIRE(p);
    CHECK(p->x == 0.0);
    CHECK(p->y == 0.0);
  }
  SUBCASE("disjoint collinear") {
    CHECK_FALSE(intersect_segments(Segment2{{0, 0}, {1, 0}}, Segment2{{2, 0}, {3, 0}}));
  }
  SUBCASE("diagonals of the 2x2 square meet at (1,1)") {
    // (0,0)+u(2,2) = (0,2)+v(2,-2)  ->  2u = 2v, 2u = 2 - 2v  ->  u = v = 1/2.
    auto p = intersect_segments(Segment2{{0, 0}, {2, 2}}, Segment2{{0, 2}, {2, 0}});
    REQUIRE(p);
    CHECK(p->x == doctest::Approx(1.0));
    CHECK(p->y == doctest::Approx(1.0));
  }
  SUBCASE("endpoint touching and parallel pairs give nothing") {
    CHECK_FALSE(intersect_segments(Segment2{{0, 0}, {1, 0}}, Segment2{{1, 0}, {1, 1}}));
    CHECK_FALSE(intersect_segments(Segment2{{0, 0}, {1, 0}}, Segment2{{0.5, 0}, {0.5, 1}}));
    CHECK_FALSE(intersect_segments(Segment2{{0, 0}, {1, 0}}, Segment2{{0, 1}, {1, 1}}));
    CHECK_FALSE(intersect_segments(Segment2{{0, 0}, {2, 0}}, Segment2{{1, 0}, {3, 0}}));
  }
  SUBCASE("geo segments use lon as x and lat as y") {
    auto p = intersect_segments(GeoSegment{{1.0, 43.0}, {1.002, 43.002}}, GeoSegment{{1.0, 43.002}, {1.002, 43.0}});
    REQUIRE(p);
    CHECK(p->x == doctest::Approx(1.001));
    CHECK(p->y == doctest::Approx(43.001));
  }
}

TEST_CASE("planarize") {
  SUBCASE("X-cross becomes 5 nodes and 4 edges") {
    auto g = planarize(make_graph({{-1, 0}, {1, 0}, {0, -1}, {0, 1}}, {{0, 1}, {2, 3}}));
    CHECK(g.node_count() == 5);
    CHECK(g.edge_count() == 4);
    CHECK(count_crossings(g) == 0);
  }
  SUBCASE("triangle is unchanged") {
    auto tri = make_graph({{0, 0}, {1, 0}, {0, 1}}, {{0, 1}, {1, 2}, {0, 2}});
    CHECK(planarize(tri) == tri);
  }
  SUBCASE("three mutually crossing edges match the pairwise-split count") {
    auto g = make_graph({{-1, 0}, {1, 0.1}, {-0.2, -1}, {0.3, 1}, {-0.8, 0.9}, {0.7, -0.8}},
                        {{0, 1}, {2, 3}, {4, 5}});
    int crossings = 0;
    for (int i = 0; i < 3; ++i) {
      for (int j = i + 1; j < 3; ++j) crossings += oracle_crosses(g.segment(g.edges[i]), g.segment(g.edges[j]));
    }
    REQUIRE(crossings == 3);
    auto p = planarize(g);
    CHECK(p.node_count() == g.node_count() + crossings);
    CHECK(p.edge_count() == g.edge_count() + 2 * crossings);
    CHECK(count_crossings(p) == 0);
  }
  SUBCASE("idempotent on random graphs") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      auto g = planarize(testing::random_raw_graph(rng, 8, 10));
      CHECK(count_crossings(g) == 0);
      CHECK(planarize(g) == g);
    }
  }
}

TEST_CASE("merge_close_nodes") {
  const double eps = 0.1;
  SUBCASE("close pair collapses and the self-loop disappears") {
    auto g = merge_close_nodes(make_graph({{0, 0}, {0.05, 0}}, {{0, 1}}), eps);
    CHECK(g.node_count() == 1);
    CHECK(g.edge_count() == 0);
    CHECK(g.nodes[0].x == doctest::Approx(0.025));
  }
  SUBCASE("chain at 0.9 eps merges transitively") {
    std::vector<Point2> pts{{0, 0}, {0.09, 0}, {0.18, 0}};
    CHECK(oracle_union_find_clusters(pts, eps) == 1);
    auto g = merge_close_nodes(make_graph(pts, {{0, 1}, {1, 2}}), eps);
    CHECK(g.node_count() == 1);
    CHECK(g.nodes[0].x == doctest::Approx(0.09));
  }
  SUBCASE("pair at 2 eps is unchanged") {
    auto g0 = make_graph({{0, 0}, {0.2, 0}}, {{0, 1}});
    CHECK(merge_close_nodes(g0, eps) == g0);
  }
  SUBCASE("random clouds: no close pairs remain and merging is idempotent") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      auto g = merge_close_nodes(testing::random_raw_graph(rng, 20, 25), eps);
      CHECK(min_node_distance(g) >= eps);
      CHECK(merge_close_nodes(g, eps) == g);
    }
  }
  CHECK_THROWS_AS(merge_close_nodes(RoadGraph{}, 0.0), Error);
}

TEST_CASE("straighten") {
  SUBCASE("collinear path fuses") {
    auto g = straighten(make_graph({{0, 0}, {1, 0}, {2, 0}}, {{0, 1}, {1, 2}}), 15.0);
    REQUIRE(g.node_count() == 2);
    CHECK(g.edge_count() == 1);
    CHECK(g.nodes[0] == Point2{0, 0});
    CHECK(g.nodes[1] == Point2{2, 0});
  }
  SUBCASE("right angle is kept") {
    auto g0 = make_graph({{0, 0}, {1, 0}, {1, 1}}, {{0, 1}, {1, 2}});
    CHECK(straighten(g0, 15.0) == g0);
  }
  SUBCASE("10 degree bend fuses at 15 but not at 5") {
    const double bend = 10.0 * std::numbers::pi / 180.0;
    const Point2 far{1.0 + std::cos(bend), std::sin(bend)};
    auto g0 = make_graph({{0, 0}, {1, 0}, far}, {{0, 1}, {1, 2}});
    // Incoming direction (-1,0) and outgoing (cos b, sin b) meet at 180 - 10 degrees.
    const double angle = std::acos(-std::cos(bend)) * 180.0 / std::numbers::pi;
    REQUIRE(180.0 - angle == doctest::Approx(10.0));
    CHECK(straighten(g0, 15.0).node_count() == 2);
    CHECK(straighten(g0, 5.0) == g0);
  }
  SUBCASE("fusion that would duplicate an edge is skipped") {
    auto g0 = make_graph({{0, 0}, {1, 0.01}, {2, 0}}, {{0, 1}, {1, 2}, {0, 2}});
    CHECK(straighten(g0, 15.0) == g0);
  }
  SUBCASE("idempotent") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      auto g = straighten(merge_close_nodes(planarize(testing::random_raw_graph(rng, 8, 9)), 0.1), 15.0);
      CHECK(straighten(g, 15.0) == g);
    }
  }
}

TEST_CASE("filter_graph") {
  auto path = [](int n) {
    RoadGraph g;
    for (int i = 0; i < n; ++i) g.nodes.push_back({i * 0.1, 0});
    for (int i = 0; i + 1 < n; ++i) g.edges.push_back({i, i + 1});
    return g;
  };
  CHECK(filter_graph(path(3)) == FilterVerdict::RejectTrivial);
  CHECK(filter_graph(path(10)) == FilterVerdict::RejectCluttered);
  CHECK(filter_graph(path(5)) == FilterVerdict::Accept);
  auto dense = path(9);
  for (int i = 0; i < 9; ++i) {
    for (int j = i + 2; j < 9 && dense.edge_count() < 16; ++j) dense.add_edge(i, j);
  }
  REQUIRE(dense.edge_count() == 16);
  CHECK(filter_graph(dense) == FilterVerdict::RejectCluttered);
}

TEST_CASE("canonical_order") {
  SUBCASE("single edge in either storage order") {
    auto a = make_graph({{0.5, 0.5}, {-0.5, -0.5}}, {{0, 1}});
    auto b = make_graph({{-0.5, -0.5}, {0.5, 0.5}}, {{0, 1}});
    CHECK(canonicalize(a).nodes == canonicalize(b).nodes);
    CHECK(canonicalize(a).nodes[0] == Point2{-0.5, -0.5});
  }
  SUBCASE("3-node path from its top-left endpoint") {
    // Top-left is (-0.8,-0.8) (smallest y); BFS then walks the path.
    auto g = make_graph({{0.2, 0.5}, {-0.8, -0.8}, {0.0, 0.0}}, {{1, 2}, {0, 2}});
    CHECK(canonical_order(g) == std::vector<int>{1, 2, 0});
  }
  SUBCASE("clockwise from 'up' at the start node") {
    // Star centred at the top-left node; neighbours right, down, left-ish.
    auto g = make_graph({{0, -0.5}, {0.5, -0.4}, {0, 0.5}, {-0.5, -0.3}}, {{0, 1}, {0, 2}, {0, 3}});
    // Clockwise from up in screen coordinates: right (~90), down (180), left (~270).
    CHECK(canonical_order(g) == std::vector<int>{0, 1, 2, 3});
  }
  SUBCASE("clockwise from the incoming edge") {
    // 0 -> 1 goes right; from 1 the parent lies left. Sweeping clockwise from
    // "left" passes "up" (3) before "right" (2) and "down" (4).
    auto g = make_graph({{-0.5, -0.9}, {0, -0.9}, {0.5, -0.9}, {0, -1}, {0, -0.4}},
                        {{0, 1}, {1, 2}, {1, 3}, {1, 4}});
    // (0,-1) is the top-left node, so traversal starts there instead.
    auto order = canonical_order(g);
    CHECK(order.front() == 3);
    auto g2 = make_graph({{-0.5, -0.95}, {0, -0.9}, {0.5, -0.9}, {0, -0.92}, {0, -0.4}},
                         {{0, 1}, {1, 2}, {1, 3}, {1, 4}});
    // Start at node 0 (y=-0.95). At node 1 the reference points back at node 0.
    CHECK(canonical_order(g2) == std::vector<int>{0, 1, 3, 2, 4});
  }
  SUBCASE("second component restarts at its top-left node") {
    auto g = make_graph({{0.5, 0.5}, {0.9, 0.9}, {-0.9, -0.9}, {-0.5, -0.8}, {0.4, 0.5}},
                        {{0, 1}, {2, 3}, {4, 0}});
    auto order = canonical_order(g);
    REQUIRE(order.size() == 5);
    CHECK(order[0] == 2);
    CHECK(order[1] == 3);
    // Unvisited nodes 0, 1, 4: the top-left among them is (0.4,0.5) -> node 4.
    CHECK(order[2] == 4);
  }
  SUBCASE("invariant under storage permutation") {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
      auto g = testing::random_accepted_graph(rng);
      auto h = testing::shuffled(g, rng);
      CHECK(canonicalize(h).nodes == canonicalize(g).nodes);
      CHECK(canonicalize(h) == canonicalize(g));
    }
  }
}

TEST_CASE("sequence encoding") {
  SUBCASE("two nodes, one edge, M = 2") {
    auto g = make_graph({{0, 0}, {0.5, 0}}, {{0, 1}});
    auto seq = to_sequence(g, 2);
    REQUIRE(seq.steps.size() == 3);
    CHECK(seq.steps[0].adjacency == std::vector<std::uint8_t>{0, 0});
    CHECK(seq.steps[0].coords == Point2{0, 0});
    CHECK(seq.steps[1].adjacency == std::vector<std::uint8_t>{1, 0});
    CHECK(seq.steps[1].coords == Point2{0.5, 0});
    CHECK(seq.steps[2].stop);
    CHECK_FALSE(seq.steps[1].stop);
    CHECK(seq.steps[2].adjacency == std::vector<std::uint8_t>{0, 0});
    CHECK(seq.steps[2].coords == Point2{0, 0});
  }
  SUBCASE("span M + 1 overflows") {
    auto g = make_graph({{0, 0}, {0.3, 0}, {0.6, 0}, {0.9, 0}}, {{0, 3}});
    REQUIRE(max_edge_span(g) == 3);
    CHECK_NOTHROW(to_sequence(g, 3));
    try {
      to_sequence(g, 2);
      FAIL("expected FrontierOverflow");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::FrontierOverflow);
    }
  }
  SUBCASE("4-cycle labelled around the square") {
    // 0-1-2-3-0: step 3 links to node 2 (offset 0) and node 0 (offset 2).
    auto g = make_graph({{-0.5, -0.5}, {0.5, -0.5}, {0.5, 0.5}, {-0.5, 0.5}}, {{0, 1}, {1, 2}, {2, 3}, {0, 3}});
    auto seq = to_sequence(g, 3);
    CHECK(seq.steps[3].adjacency == std::vector<std::uint8_t>{1, 0, 1});
  }
  SUBCASE("soft decoding") {
    SoftSequence soft(3);
    for (int t = 0; t < 3; ++t) soft[t] = {{0.4, 0.4}, 0.0, {0.1 * t, 0}};
    auto g = from_sequence(soft, 0.5);
    CHECK(g.node_count() == 3);
    CHECK(g.edge_count() == 0);
    soft[1].adjacency[0] = 0.5;
    CHECK(from_sequence(soft, 0.5).edge_count() == 0);
    soft[1].adjacency[0] = 0.5000001;
    CHECK(from_sequence(soft, 0.5).edge_count() == 1);
    soft[2].stop = 0.9;
    CHECK(from_sequence(soft, 0.5).node_count() == 2);
  }
  SUBCASE("round trip on random accepted graphs") {
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
      auto g = testing::random_accepted_graph(rng);
      const int m = std::max(1, max_edge_span(g));
      auto seq = to_sequence(g, m);
      CHECK(seq.steps.back().stop);
      CHECK(std::count_if(seq.steps.begin(), seq.steps.end(), [](const auto& s) { return s.stop; }) == 1);
      for (std::size_t t = 0; t < seq.steps.size(); ++t) {
        for (int j = 0; j < m; ++j) {
          if (seq.steps[t].adjacency[j]) CHECK(static_cast<int>(t) - 1 - j >= 0);
        }
      }
      CHECK(from_sequence(to_soft(seq), 0.5) == g);
    }
  }
}

TEST_CASE("dihedral_augment") {
  SUBCASE("quarter turn clockwise on screen") {
    auto p = dihedral_apply(1, {0.5, 0.2});
    CHECK(p == Point2{-0.2, 0.5});
  }
  SUBCASE("four quarter turns are the identity") {
    Rng rng(2);
    auto g = testing::random_accepted_graph(rng);
    auto r = g;
    for (int i = 0; i < 4; ++i) r = dihedral_transform(r, 1);
    CHECK(r == g);
  }
  SUBCASE("asymmetric graph has 8 distinct images that each round-trip") {
    auto g = make_graph({{-0.7, -0.2}, {0.1, -0.2}, {0.1, 0.6}}, {{0, 1}, {1, 2}});
    auto images = dihedral_augment(g);
    for (int i = 0; i < 8; ++i) {
      for (int j = i + 1; j < 8; ++j) CHECK_FALSE(canonicalize(images[i]) == canonicalize(images[j]));
    }
    for (const auto& img : images) {
      auto c = canonicalize(img);
      for (const auto& p : c.nodes) {
        CHECK(std::abs(p.x) <= 1.0);
        CHECK(std::abs(p.y) <= 1.0);
      }
      CHECK(from_sequence(to_sequence(c, std::max(1, max_edge_span(c)))) == c);
    }
  }
}

TEST_CASE("full chain leaves no crossings or close pairs") {
  Rng rng(41);
  for (int trial = 0; trial < 100; ++trial) {
    auto g = testing::random_raw_graph(rng, 10, 12);
    g = preprocess(g);
    // Brute-force O(n^2) checks with the independent oracle.
    for (int i = 0; i < g.edge_count(); ++i) {
      for (int j = i + 1; j < g.edge_count(); ++j) {
        const auto& a = g.edges[i];
        const auto& b = g.edges[j];
        if (a.a == b.a || a.a == b.b || a.b == b.a || a.b == b.b) continue;
        CHECK_FALSE(oracle_crosses(g.segment(a), g.segment(b)));
      }
    }
    CHECK(min_node_distance(g) >= 0.1);
  }
}

TEST_CASE("rgf format") {
  auto g = make_graph({{0.25, -0.125}, {-1, 1}, {1.0 / 3.0, 1e-7}}, {{0, 1}, {1, 2}});
  const std::string text = write_rgf(g);
  CHECK(text.rfind("RGF1 3 2\n", 0) == 0);
  CHECK(text.find("v -1.000000 1.000000\n") != std::string::npos);
  auto back = parse_rgf(text);
  CHECK(back == canonicalize(g));
  CHECK(write_rgf(back) == text);
  CHECK(format_decimal(0.5) == "0.500000");
  CHECK(format_decimal(1.0 / 3.0) == "0.3333333333333333");
  CHECK_THROWS_AS(parse_rgf("RGF1 2 1\nv 0 0\nv 1 1\ne 1 1\n"), Error);
  CHECK_THROWS_AS(parse_rgf("RGF2 0 0\n"), Error);
  CHECK_THROWS_AS(parse_rgf("RGF1 2 0\nv 0 0\n"), Error);

  auto seq = to_sequence(canonicalize(g), 2);
  CHECK(parse_sequence(write_sequence(seq)) == seq);
}
