#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "roadforge/common/kv_config.hpp"
#include "roadforge/geom/canonical.hpp"
#include "roadforge/geom/graph.hpp"
#include "roadforge/raster/raster.hpp"

namespace roadforge::dataset {

struct Bounds {
  double lon_min = 0.0;
  double lat_min = 0.0;
  double lon_max = 0.0;
  double lat_max = 0.0;

  friend bool operator==(const Bounds&, const Bounds&) = default;
};

/// Road map as a flat list of segments in degrees.
struct MapSource {
  std::vector<geom::GeoSegment> segments;
  Bounds bounds;
};

/// Segment CSV, one `lon1,lat1,lon2,lat2` per line. Blank lines and lines
/// starting with '#' are skipped. Bounds are the segment bounding box unless
/// a `# bounds lon_min,lat_min,lon_max,lat_max` line is present.
MapSource parse_segment_csv(const std::string& text);
MapSource load_segment_csv(const std::filesystem::path& path);
std::string to_segment_csv(const MapSource& map);

/// Square window whose lower-left corner (min lon, min lat) is `origin`.
struct Tile {
  geom::Point2 origin;
  double side = 0.001;
};

inline constexpr int kTranslations = 16;
inline constexpr int kDihedral = 8;

/// Offset of translation k in degrees: (k % 4, k / 4) quarter sides.
geom::Point2 translation_offset(int k, double side);

struct ExtractOptions {
  double merge_eps_deg = 0.00005;
  double straighten_max_deviation_deg = 15.0;
};

/// Clips the map to the (translated) tile window, maps it onto [-1, 1]^2 with
/// y pointing south, then preprocesses. Throws EmptyTile.
geom::RoadGraph extract_tile(const MapSource& map, const Tile& tile, int translation,
                             const ExtractOptions& opts = {});

/// Liang-Barsky clip of p->q against [lo, hi]; nullopt if nothing (or a
/// single point) remains.
std::optional<std::pair<geom::Point2, geom::Point2>> clip_segment(geom::Point2 p, geom::Point2 q, geom::Point2 lo,
                                                                  geom::Point2 hi);

enum class Split { Train, Valid, Test, Discard };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Three longitude bands across `bounds`: train west of train_end, valid up to
/// valid_end, test beyond (fractions of the width). Tiles whose centre lies
/// within `margin_tiles` tile sides of a band boundary are discarded.
struct SplitLayout {
  Bounds bounds;
  double train_end = 0.724;
  double valid_end = 0.829;
  double margin_tiles = 1.0;

  /// Longitudes of the two band boundaries.
  std::array<double, 2> boundaries() const;
};

Split assign_split(const Tile& tile, const SplitLayout& layout);

/// Nearest-rank percentile (default 99th) of the spans. Throws EmptyDataset.
int compute_frontier(const std::vector<int>& spans, double percentile = 99.0);

/// Tiles laid out row-major from the south-west corner. The grid leaves room
/// for the largest translation (3/4 side) inside the bounds.
std::vector<Tile> tile_grid(const Bounds& bounds, double side, int* cols_out = nullptr);

/// Road-like test map: a jittered irregular grid with dropped blocks and
/// occasional diagonals, `size` x `size` tiles of side 0.001 deg.
MapSource generate_synthetic_map(std::uint64_t seed, int size);

struct DatasetConfig {
  double tile_side = 0.001;
  ExtractOptions extract;
  double train_end = 0.724;
  double valid_end = 0.829;
  double margin_tiles = 1.0;
  bool augment = true;
  double frontier_percentile = 99.0;
  geom::FilterLimits limits;
  int image_size = raster::kImageSize;
  double half_width = raster::kHalfWidth;
  std::uint64_t seed = 1;
  int workers = 1;

  /// Reads the documented keys, falling back to the defaults above.
  static DatasetConfig from_kv(const KvConfig& kv);
  KvConfig to_kv() const;
};

struct ManifestEntry {
  std::string id;
  Split split = Split::Train;
  std::string graph_path;
  std::string image_path;
  std::string sequence_path;
  int n_nodes = 0;
  int n_edges = 0;
  int max_span = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetStats {
  std::map<std::string, int> split_counts;
  int frontier = 0;
  int tiles_total = 0;
  int tiles_discarded = 0;
  /// Per split: tiles whose untranslated window was kept.
  std::map<std::string, int> tiles_per_split;
  int translations_attempted = 0;
  int variants_attempted = 0;
  int empty_windows = 0;
  int rejected_trivial = 0;
  int rejected_cluttered = 0;
  int rejected_crossings = 0;
  int dropped_by_frontier = 0;
  /// Largest number of emitted variants from a single train tile.
  int max_variants_per_tile = 0;
  std::map<int, int> node_histogram;
  std::map<int, int> edge_histogram;

  std::string to_json() const;
};

/// Writes graphs/, images/, sequences/, manifest.jsonl and stats.json under
/// `out_dir`. Output bytes depend only on the map and the config.
DatasetStats build_dataset(const MapSource& map, const DatasetConfig& cfg, const std::filesystem::path& out_dir);

std::string manifest_line(const ManifestEntry& e);
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& dataset_dir);
/// Frontier size recorded in stats.json.
int load_frontier(const std::filesystem::path& dataset_dir);

/// Fully loaded data point.
struct Sample {
  std::string id;
  Split split = Split::Train;
  geom::RoadGraph graph;
  geom::CanonicalSequence sequence;
  raster::GrayImage image;
};

/// Loads every entry of `split` (all splits when nullopt), in manifest order.
std::vector<Sample> load_samples(const std::filesystem::path& dataset_dir, std::optional<Split> split,
                                 std::size_t limit = 0);

}  // namespace roadforge::dataset
