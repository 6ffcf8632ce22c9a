#pragma once

#include <cstdint>
#include <vector>

#include "roadforge/geom/graph.hpp"

namespace roadforge::geom {

/// One step of the BFS-ordered encoding. Bit j of `adjacency` marks an edge to
/// the node emitted 1 + j steps earlier.
struct SequenceStep {
  std::vector<std::uint8_t> adjacency;
  Point2 coords;
  bool stop = false;

  friend bool operator==(const SequenceStep&, const SequenceStep&) = default;
};

struct CanonicalSequence {
  std::vector<SequenceStep> steps;
  int frontier_size = 0;

  friend bool operator==(const CanonicalSequence&, const CanonicalSequence&) = default;
};

/// Model-space step: edge probabilities, stop probability, coordinates.
struct SoftStep {
  std::vector<double> adjacency;
  double stop = 0.0;
  Point2 coords;
};
using SoftSequence = std::vector<SoftStep>;

/// BFS node order: order[k] is the input index of the k-th emitted node.
///
/// Every traversal (the first and each restart on a new component) begins at
/// the unvisited node with the smallest (y, x). Unvisited neighbours are
/// enqueued clockwise, measured from the edge back to the node's BFS parent;
/// a start node uses "up", (0, -1), as its reference. Ties in angle fall back
/// to distance and then to (y, x), so the result depends only on geometry and
/// not on how nodes or edges are stored.
std::vector<int> canonical_order(const RoadGraph& g);

/// Relabels nodes so that node k of the result is g.nodes[order[k]].
RoadGraph reorder(const RoadGraph& g, const std::vector<int>& order);
RoadGraph canonicalize(const RoadGraph& g);

/// Largest |i - j| over edges; 0 for an edgeless graph.
int max_edge_span(const RoadGraph& ordered);

/// Throws FrontierOverflow when an edge spans more than `frontier` positions.
CanonicalSequence to_sequence(const RoadGraph& ordered, int frontier);

/// Decodes up to (not including) the first step whose stop probability
/// exceeds the threshold. An edge is kept iff its value is strictly greater
/// than the threshold.
RoadGraph from_sequence(const SoftSequence& seq, double threshold = 0.5);
RoadGraph from_sequence(const CanonicalSequence& seq);

SoftSequence to_soft(const CanonicalSequence& seq);

}  // namespace roadforge::geom
