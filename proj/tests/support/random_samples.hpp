#pragma once

// In-memory dataset records built from random accepted graphs.

#include <string>
#include <vector>

#include "random_graphs.hpp"
#include "roadforge/dataset/dataset.hpp"
#include "roadforge/raster/raster.hpp"

namespace roadforge::testing {

/// Records whose max edge span fits `frontier`, rasterized at `image_size`.
inline std::vector<dataset::Sample> random_samples(Rng& rng, int count, int frontier, int image_size) {
  std::vector<dataset::Sample> out;
  while (static_cast<int>(out.size()) < count) {
    geom::RoadGraph g = random_accepted_graph(rng);
    if (geom::max_edge_span(g) > frontier) continue;
    dataset::Sample s;
    s.id = "s" + std::to_string(out.size());
    s.sequence = geom::to_sequence(g, frontier);
    s.image = raster::rasterize(g, image_size);
    s.graph = std::move(g);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace roadforge::testing
