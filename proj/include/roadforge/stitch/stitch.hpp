#pragma once

#include <vector>

#include "roadforge/geom/graph.hpp"

namespace roadforge::stitch {

/// grid[r][c] is the tile in row r (top to bottom) and column c.
using TileGrid = std::vector<std::vector<geom::RoadGraph>>;

inline constexpr double kDefaultBoundaryTol = 0.1;

/// Places tile (r, c) at [2c - 1, 2c + 1] x [2r - 1, 2r + 1], unions the
/// tiles, merges mutual nearest nodes of neighbouring tiles (8-neighbourhood)
/// closer than `boundary_tol` (tile units) into their centroid, re-joins
/// roads that continue straight through a merged border node, and maps the
/// result back onto [-1, 1] per axis. Throws EmptyGrid, or InvalidArgument for
/// ragged grids and a non-positive tolerance.
geom::RoadGraph stitch_grid(const TileGrid& grid, double boundary_tol = kDefaultBoundaryTol);

/// Inverse layout of `stitch_grid`: cuts edges at tile borders (inserting a node
/// at each cut) and expresses every piece in its tile's [-1, 1] frame.
TileGrid split_into_tiles(const geom::RoadGraph& g, int rows, int cols);

}  // namespace roadforge::stitch
