#pragma once

#include <array>
#include <optional>
#include <string_view>
#include <vector>

namespace roadforge::geom {

/// Position in normalized tile space. y grows downward (image row order).
struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
inline double dot(Point2 a, Point2 b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }
double norm(Point2 p);
double distance(Point2 a, Point2 b);

/// Undirected edge, stored with a < b.
struct Edge {
  int a = 0;
  int b = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

struct Segment2 {
  Point2 a;
  Point2 b;
};

/// Map segment in degrees: x = longitude, y = latitude.
struct GeoSegment {
  Point2 p;
  Point2 q;
};

struct RoadGraph {
  std::vector<Point2> nodes;
  std::vector<Edge> edges;

  int node_count() const { return static_cast<int>(nodes.size()); }
  int edge_count() const { return static_cast<int>(edges.size()); }

  /// Adds an edge unless it is a self-loop or already present.
  void add_edge(int i, int j);
  /// Sorts edges, drops self-loops and duplicates.
  void normalize_edges();
  std::vector<std::vector<int>> adjacency() const;
  std::vector<int> degrees() const;
  Segment2 segment(const Edge& e) const { return {nodes[e.a], nodes[e.b]}; }
  double total_length() const;

  friend bool operator==(const RoadGraph&, const RoadGraph&) = default;
};

/// Throws InvalidArgument when the graph breaks its structural invariants.
void validate(const RoadGraph& g);

/// Proper crossing of the open segments; touching endpoints, parallel and
/// collinear pairs yield nothing.
std::optional<Point2> intersect_segments(const Segment2& s, const Segment2& t);
std::optional<Point2> intersect_segments(const GeoSegment& s, const GeoSegment& t);

/// Splits edges at every pairwise proper crossing until none remain.
RoadGraph planarize(const RoadGraph& g);

/// Contracts the transitive closure of "closer than eps" into cluster
/// centroids. Repeats until no pair is closer than eps.
RoadGraph merge_close_nodes(const RoadGraph& g, double eps);

/// Fuses degree-2 nodes whose incident edges deviate from a straight line by
/// less than max_deviation_deg. Iterates to a fixpoint. A fusion is skipped
/// when the replacement edge already exists or would cross another edge.
RoadGraph straighten(const RoadGraph& g, double max_deviation_deg);

struct PreprocessOptions {
  double merge_eps = 0.1;
  double max_deviation_deg = 15.0;
  int max_rounds = 32;
};

/// planarize -> merge_close_nodes -> straighten, repeated until a round
/// changes nothing (or max_rounds is hit; check the result if that matters).
RoadGraph preprocess(const RoadGraph& g, const PreprocessOptions& opts = {});

/// Removes nodes that have no incident edge.
RoadGraph drop_isolated_nodes(const RoadGraph& g);

/// Counts proper crossings between edge pairs, O(E^2).
int count_crossings(const RoadGraph& g);
/// Smallest distance between two distinct nodes (infinity for < 2 nodes).
double min_node_distance(const RoadGraph& g);

enum class FilterVerdict { Accept, RejectTrivial, RejectCluttered };
std::string_view to_string(FilterVerdict v);

struct FilterLimits {
  int min_nodes = 4;
  int max_nodes = 9;
  int max_edges = 15;
};

/// Accepts graphs with min_nodes <= |V| <= max_nodes and |E| <= max_edges.
FilterVerdict filter_graph(const RoadGraph& g, const FilterLimits& limits = {});

/// Element k of the dihedral group of the square: k % 4 clockwise quarter
/// turns followed, when k >= 4, by a horizontal flip (x -> -x).
Point2 dihedral_apply(int k, Point2 p);
RoadGraph dihedral_transform(const RoadGraph& g, int k);
/// All 8 images of g, indexed as in dihedral_apply.
std::array<RoadGraph, 8> dihedral_augment(const RoadGraph& g);

RoadGraph translate(const RoadGraph& g, Point2 offset);
RoadGraph scale(const RoadGraph& g, double factor);

/// Structural equality up to node relabelling, with coordinate tolerance.
/// Matches nodes greedily by position, so it requires distinct node positions.
bool same_geometry(const RoadGraph& a, const RoadGraph& b, double tol);

}  // namespace roadforge::geom
