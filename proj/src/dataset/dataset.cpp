#include "roadforge/dataset/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "json.hpp"

#include "roadforge/common/error.hpp"
#include "roadforge/common/parallel.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/geom/io.hpp"

namespace roadforge::dataset {

using geom::Point2;
using geom::RoadGraph;
namespace fs = std::filesystem;

namespace {

double parse_number(const std::string& s, int line_no) {
  const std::string t = trim(s);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != t.size()) {
    fail(ErrorCode::Parse, "segment csv line " + std::to_string(line_no) + ": bad number '" + t + "'");
  }
  return v;
}

}  // namespace

MapSource parse_segment_csv(const std::string& text) {
  MapSource map;
  std::optional<Bounds> declared;
  int line_no = 0;
  for (const auto& raw : split(text, '\n')) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# bounds ";
      if (line.rfind(tag, 0) == 0) {
        auto f = split(line.substr(tag.size()), ',');
        if (f.size() != 4) fail(ErrorCode::Parse, "segment csv line " + std::to_string(line_no) + ": bad bounds");
        declared = Bounds{parse_number(f[0], line_no), parse_number(f[1], line_no), parse_number(f[2], line_no),
                          parse_number(f[3], line_no)};
      }
      continue;
    }
    auto f = split(line, ',');
    if (f.size() != 4) {
      fail(ErrorCode::Parse, "segment csv line " + std::to_string(line_no) + ": expected 4 fields");
    }
    map.segments.push_back({{parse_number(f[0], line_no), parse_number(f[1], line_no)},
                            {parse_number(f[2], line_no), parse_number(f[3], line_no)}});
  }
  if (declared) {
    map.bounds = *declared;
  } else if (!map.segments.empty()) {
    Bounds b{1e300, 1e300, -1e300, -1e300};
    for (const auto& s : map.segments) {
      for (Point2 p : {s.p, s.q}) {
        b.lon_min = std::min(b.lon_min, p.x);
        b.lat_min = std::min(b.lat_min, p.y);
        b.lon_max = std::max(b.lon_max, p.x);
        b.lat_max = std::max(b.lat_max, p.y);
      }
    }
    map.bounds = b;
  }
  for (const auto& s : map.segments) {
    for (Point2 p : {s.p, s.q}) {
      if (p.x < map.bounds.lon_min || p.x > map.bounds.lon_max || p.y < map.bounds.lat_min ||
          p.y > map.bounds.lat_max) {
        fail(ErrorCode::Parse, "segment csv: segment endpoint outside the declared bounds");
      }
    }
  }
  return map;
}

MapSource load_segment_csv(const fs::path& path) { return parse_segment_csv(geom::read_text_file(path)); }

std::string to_segment_csv(const MapSource& map) {
  using geom::format_decimal;
  const Bounds& b = map.bounds;
  std::string out = "# bounds " + format_decimal(b.lon_min) + "," + format_decimal(b.lat_min) + "," +
                    format_decimal(b.lon_max) + "," + format_decimal(b.lat_max) + "\n";
  for (const auto& s : map.segments) {
    out += format_decimal(s.p.x) + "," + format_decimal(s.p.y) + "," + format_decimal(s.q.x) + "," +
           format_decimal(s.q.y) + "\n";
  }
  return out;
}

Point2 translation_offset(int k, double side) {
  if (k < 0 || k >= kTranslations) fail(ErrorCode::InvalidArgument, "translation index out of range");
  return {(k % 4) * side / 4.0, (k / 4) * side / 4.0};
}

std::optional<std::pair<Point2, Point2>> clip_segment(Point2 p, Point2 q, Point2 lo, Point2 hi) {
  const Point2 d = q - p;
  double t0 = 0.0, t1 = 1.0;
  const double pk[4] = {-d.x, d.x, -d.y, d.y};
  const double qk[4] = {p.x - lo.x, hi.x - p.x, p.y - lo.y, hi.y - p.y};
  for (int k = 0; k < 4; ++k) {
    if (pk[k] == 0.0) {
      if (qk[k] < 0.0) return std::nullopt;
      continue;
    }
    const double r = qk[k] / pk[k];
    if (pk[k] < 0.0) {
      t0 = std::max(t0, r);
    } else {
      t1 = std::min(t1, r);
    }
  }
  if (!(t0 < t1)) return std::nullopt;
  const Point2 a = t0 == 0.0 ? p : p + t0 * d;
  const Point2 b = t1 == 1.0 ? q : p + t1 * d;
  return std::make_pair(a, b);
}

RoadGraph extract_tile(const MapSource& map, const Tile& tile, int translation, const ExtractOptions& opts) {
  if (!(tile.side > 0)) fail(ErrorCode::InvalidArgument, "tile side must be positive");
  const Point2 lo = tile.origin + translation_offset(translation, tile.side);
  const Point2 hi = lo + Point2{tile.side, tile.side};
  const Point2 centre = lo + Point2{tile.side / 2, tile.side / 2};
  const double half = tile.side / 2;
  auto normalize = [&](Point2 p) {
    return Point2{std::clamp((p.x - centre.x) / half, -1.0, 1.0), std::clamp(-(p.y - centre.y) / half, -1.0, 1.0)};
  };

  RoadGraph g;
  std::map<std::pair<double, double>, int> index;
  auto node = [&](Point2 p) {
    auto [it, inserted] = index.try_emplace({p.x, p.y}, g.node_count());
    if (inserted) g.nodes.push_back(p);
    return it->second;
  };
  for (const auto& s : map.segments) {
    auto clipped = clip_segment(s.p, s.q, lo, hi);
    if (!clipped) continue;
    g.add_edge(node(normalize(clipped->first)), node(normalize(clipped->second)));
  }
  if (g.edges.empty()) fail(ErrorCode::EmptyTile, "no segment intersects the tile window");

  geom::PreprocessOptions pre;
  pre.merge_eps = 2.0 * opts.merge_eps_deg / tile.side;
  pre.max_deviation_deg = opts.straighten_max_deviation_deg;
  return geom::canonicalize(geom::drop_isolated_nodes(geom::preprocess(g, pre)));
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
    case Split::Discard: return "discard";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  if (s == "discard") return Split::Discard;
  fail(ErrorCode::InvalidArgument, "unknown split '" + s + "'");
}

std::array<double, 2> SplitLayout::boundaries() const {
  const double w = bounds.lon_max - bounds.lon_min;
  return {bounds.lon_min + train_end * w, bounds.lon_min + valid_end * w};
}

Split assign_split(const Tile& tile, const SplitLayout& layout) {
  const double cx = tile.origin.x + tile.side / 2;
  const auto [b1, b2] = layout.boundaries();
  const double margin = layout.margin_tiles * tile.side;
  if (std::abs(cx - b1) < margin || std::abs(cx - b2) < margin) return Split::Discard;
  if (cx < b1) return Split::Train;
  if (cx < b2) return Split::Valid;
  return Split::Test;
}

int compute_frontier(const std::vector<int>& spans, double percentile) {
  if (spans.empty()) fail(ErrorCode::EmptyDataset, "compute_frontier: no training graphs");
  std::vector<int> sorted = spans;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return std::max(1, sorted[rank - 1]);
}

std::vector<Tile> tile_grid(const Bounds& bounds, double side, int* cols_out) {
  const double reach = 0.75 * side;
  const int cols = std::max(0, static_cast<int>(std::floor((bounds.lon_max - bounds.lon_min - reach) / side)));
  const int rows = std::max(0, static_cast<int>(std::floor((bounds.lat_max - bounds.lat_min - reach) / side)));
  std::vector<Tile> tiles;
  tiles.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) tiles.push_back({{bounds.lon_min + c * side, bounds.lat_min + r * side}, side});
  }
  if (cols_out) *cols_out = cols;
  return tiles;
}

MapSource generate_synthetic_map(std::uint64_t seed, int size) {
  if (size <= 0) fail(ErrorCode::InvalidArgument, "synthetic map size must be positive");
  const double side = 0.001;
  const Point2 origin{1.40, 43.58};
  // 0.8 extra sides: room for the 3/4-side translations plus rounding slack.
  const double width = (size + 0.8) * side;
  MapSource map;
  map.bounds = {origin.x, origin.y, origin.x + width, origin.y + width};

  Rng rng(seed);
  auto grid_lines = [&](double start, double end) {
    std::vector<double> v;
    for (double x = start + rng.uniform(0.05, 0.3) * side; x < end - 0.05 * side;
         x += rng.uniform(0.55, 1.0) * side) {
      v.push_back(x);
    }
    return v;
  };
  const auto xs = grid_lines(map.bounds.lon_min, map.bounds.lon_max);
  const auto ys = grid_lines(map.bounds.lat_min, map.bounds.lat_max);
  const int nx = static_cast<int>(xs.size()), ny = static_cast<int>(ys.size());

  std::vector<Point2> pts(static_cast<std::size_t>(nx) * ny);
  const double jitter = 0.08 * side;
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      Point2 p{xs[i] + rng.uniform(-jitter, jitter), ys[j] + rng.uniform(-jitter, jitter)};
      p.x = std::clamp(p.x, map.bounds.lon_min, map.bounds.lon_max);
      p.y = std::clamp(p.y, map.bounds.lat_min, map.bounds.lat_max);
      pts[static_cast<std::size_t>(j) * nx + i] = p;
    }
  }
  auto at = [&](int i, int j) { return pts[static_cast<std::size_t>(j) * nx + i]; };
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) {
      if (i + 1 < nx && rng.uniform() < 0.8) map.segments.push_back({at(i, j), at(i + 1, j)});
      if (j + 1 < ny && rng.uniform() < 0.8) map.segments.push_back({at(i, j), at(i, j + 1)});
      if (i + 1 < nx && j + 1 < ny && rng.uniform() < 0.15) {
        if (rng.uniform() < 0.5) {
          map.segments.push_back({at(i, j), at(i + 1, j + 1)});
        } else {
          map.segments.push_back({at(i + 1, j), at(i, j + 1)});
        }
      }
    }
  }
  return map;
}

DatasetConfig DatasetConfig::from_kv(const KvConfig& kv) {
  DatasetConfig c;
  c.tile_side = kv.get_double("tile_side", c.tile_side);
  c.extract.merge_eps_deg = kv.get_double("eps_merge_deg", c.extract.merge_eps_deg);
  c.extract.straighten_max_deviation_deg =
      kv.get_double("straighten_max_deviation_deg", c.extract.straighten_max_deviation_deg);
  c.train_end = kv.get_double("split_train_end", c.train_end);
  c.valid_end = kv.get_double("split_valid_end", c.valid_end);
  c.margin_tiles = kv.get_double("split_margin_tiles", c.margin_tiles);
  c.augment = kv.get_bool("augment", c.augment);
  c.frontier_percentile = kv.get_double("frontier_percentile", c.frontier_percentile);
  c.limits.min_nodes = static_cast<int>(kv.get_int("min_nodes", c.limits.min_nodes));
  c.limits.max_nodes = static_cast<int>(kv.get_int("max_nodes", c.limits.max_nodes));
  c.limits.max_edges = static_cast<int>(kv.get_int("max_edges", c.limits.max_edges));
  c.image_size = static_cast<int>(kv.get_int("image_size", c.image_size));
  c.half_width = kv.get_double("half_width", c.half_width);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
  c.workers = static_cast<int>(kv.get_int("workers", c.workers));
  if (!(c.tile_side > 0)) fail(ErrorCode::InvalidArgument, "tile_side must be positive");
  if (!(0 < c.train_end && c.train_end < c.valid_end && c.valid_end < 1)) {
    fail(ErrorCode::InvalidArgument, "split bands need 0 < split_train_end < split_valid_end < 1");
  }
  if (c.workers < 1) fail(ErrorCode::InvalidArgument, "workers must be >= 1");
  return c;
}

KvConfig DatasetConfig::to_kv() const {
  KvConfig kv;
  kv.set("tile_side", geom::format_decimal(tile_side));
  kv.set("eps_merge_deg", geom::format_decimal(extract.merge_eps_deg));
  kv.set("straighten_max_deviation_deg", geom::format_decimal(extract.straighten_max_deviation_deg));
  kv.set("split_train_end", geom::format_decimal(train_end));
  kv.set("split_valid_end", geom::format_decimal(valid_end));
  kv.set("split_margin_tiles", geom::format_decimal(margin_tiles));
  kv.set("augment", augment ? "true" : "false");
  kv.set("frontier_percentile", geom::format_decimal(frontier_percentile));
  kv.set("min_nodes", std::to_string(limits.min_nodes));
  kv.set("max_nodes", std::to_string(limits.max_nodes));
  kv.set("max_edges", std::to_string(limits.max_edges));
  kv.set("image_size", std::to_string(image_size));
  kv.set("half_width", geom::format_decimal(half_width));
  kv.set("seed", std::to_string(seed));
  kv.set("workers", std::to_string(workers));
  return kv;
}

std::string DatasetStats::to_json() const {
  nlohmann::ordered_json j;
  j["split_counts"] = split_counts;
  j["frontier"] = frontier;
  j["tiles_total"] = tiles_total;
  j["tiles_discarded"] = tiles_discarded;
  j["tiles_per_split"] = tiles_per_split;
  j["translations_attempted"] = translations_attempted;
  j["variants_attempted"] = variants_attempted;
  j["empty_windows"] = empty_windows;
  j["rejected_trivial"] = rejected_trivial;
  j["rejected_cluttered"] = rejected_cluttered;
  j["rejected_crossings"] = rejected_crossings;
  j["dropped_by_frontier"] = dropped_by_frontier;
  j["max_variants_per_tile"] = max_variants_per_tile;
  auto hist = [](const std::map<int, int>& h) {
    nlohmann::ordered_json o = nlohmann::ordered_json::object();
    for (auto [k, v] : h) o[std::to_string(k)] = v;
    return o;
  };
  j["node_histogram"] = hist(node_histogram);
  j["edge_histogram"] = hist(edge_histogram);
  return j.dump(2) + "\n";
}

std::string manifest_line(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["split"] = to_string(e.split);
  j["graph_path"] = e.graph_path;
  j["image_path"] = e.image_path;
  j["sequence_path"] = e.sequence_path;
  j["n_nodes"] = e.n_nodes;
  j["n_edges"] = e.n_edges;
  j["max_span"] = e.max_span;
  return j.dump();
}

namespace {

struct Candidate {
  std::string id;
  Split split;
  RoadGraph graph;
  int span;
};

struct TileOutcome {
  Split split = Split::Discard;
  std::vector<Candidate> candidates;
  int translations = 0;
  int variants = 0;
  int empty = 0;
  int trivial = 0;
  int cluttered = 0;
  int crossings = 0;
};

std::string record_id(int row, int col, int translation, int dihedral) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "t%03d_%03d_%02d_%d", row, col, translation, dihedral);
  return buf;
}

TileOutcome process_tile(const MapSource& map, const Tile& tile, int row, int col, const DatasetConfig& cfg,
                         const SplitLayout& layout) {
  TileOutcome out;
  out.split = assign_split(tile, layout);
  if (out.split == Split::Discard) return out;
  const bool augment = cfg.augment && out.split == Split::Train;
  const int translations = augment ? kTranslations : 1;
  const int dihedrals = augment ? kDihedral : 1;
  for (int tr = 0; tr < translations; ++tr) {
    ++out.translations;
    RoadGraph base;
    try {
      base = extract_tile(map, tile, tr, cfg.extract);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyTile) throw;
      out.variants += dihedrals;
      out.empty += dihedrals;
      continue;
    }
    for (int k = 0; k < dihedrals; ++k) {
      ++out.variants;
      RoadGraph g = geom::canonicalize(geom::dihedral_transform(base, k));
      if (geom::count_crossings(g) != 0) {
        ++out.crossings;
        continue;
      }
      const auto verdict = geom::filter_graph(g, cfg.limits);
      if (verdict == geom::FilterVerdict::RejectTrivial) {
        ++out.trivial;
        continue;
      }
      if (verdict == geom::FilterVerdict::RejectCluttered) {
        ++out.cluttered;
        continue;
      }
      const int span = geom::max_edge_span(g);
      out.candidates.push_back({record_id(row, col, tr, k), out.split, std::move(g), span});
    }
  }
  return out;
}

}  // namespace

DatasetStats build_dataset(const MapSource& map, const DatasetConfig& cfg, const fs::path& out_dir) {
  int cols = 0;
  const auto tiles = tile_grid(map.bounds, cfg.tile_side, &cols);
  SplitLayout layout{map.bounds, cfg.train_end, cfg.valid_end, cfg.margin_tiles};

  std::vector<TileOutcome> outcomes(tiles.size());
  parallel_for(tiles.size(), cfg.workers, [&](std::size_t i) {
    const int row = cols ? static_cast<int>(i) / cols : 0;
    const int col = cols ? static_cast<int>(i) % cols : 0;
    outcomes[i] = process_tile(map, tiles[i], row, col, cfg, layout);
  });

  DatasetStats stats;
  stats.tiles_total = static_cast<int>(tiles.size());
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    stats.split_counts[to_string(s)] = 0;
    stats.tiles_per_split[to_string(s)] = 0;
  }
  std::vector<int> train_spans;
  for (const auto& o : outcomes) {
    if (o.split == Split::Discard) {
      ++stats.tiles_discarded;
      continue;
    }
    ++stats.tiles_per_split[to_string(o.split)];
    stats.translations_attempted += o.translations;
    stats.variants_attempted += o.variants;
    stats.empty_windows += o.empty;
    stats.rejected_trivial += o.trivial;
    stats.rejected_cluttered += o.cluttered;
    stats.rejected_crossings += o.crossings;
    for (const auto& c : o.candidates) {
      if (c.split == Split::Train) train_spans.push_back(c.span);
    }
  }
  stats.frontier = compute_frontier(train_spans, cfg.frontier_percentile);

  std::vector<const Candidate*> kept;
  for (const auto& o : outcomes) {
    int emitted = 0;
    for (const auto& c : o.candidates) {
      if (c.span > stats.frontier) {
        ++stats.dropped_by_frontier;
        continue;
      }
      kept.push_back(&c);
      ++emitted;
    }
    if (o.split == Split::Train) stats.max_variants_per_tile = std::max(stats.max_variants_per_tile, emitted);
  }

  for (const char* sub : {"graphs", "images", "sequences"}) fs::create_directories(out_dir / sub);
  std::vector<ManifestEntry> entries(kept.size());
  parallel_for(kept.size(), cfg.workers, [&](std::size_t i) {
    const Candidate& c = *kept[i];
    ManifestEntry e;
    e.id = c.id;
    e.split = c.split;
    e.graph_path = "graphs/" + c.id + ".rgf";
    e.image_path = "images/" + c.id + ".pgm";
    e.sequence_path = "sequences/" + c.id + ".seq";
    e.n_nodes = c.graph.node_count();
    e.n_edges = c.graph.edge_count();
    e.max_span = c.span;
    geom::save_rgf(out_dir / e.graph_path, c.graph);
    raster::write_pgm(out_dir / e.image_path, raster::rasterize(c.graph, cfg.image_size, cfg.half_width));
    geom::save_sequence(out_dir / e.sequence_path, geom::to_sequence(c.graph, stats.frontier));
    entries[i] = std::move(e);
  });

  std::string manifest;
  for (const auto& e : entries) {
    manifest += manifest_line(e) + "\n";
    ++stats.split_counts[to_string(e.split)];
    ++stats.node_histogram[e.n_nodes];
    ++stats.edge_histogram[e.n_edges];
  }
  geom::write_text_file(out_dir / "manifest.jsonl", manifest);
  geom::write_text_file(out_dir / "stats.json", stats.to_json());
  geom::write_text_file(out_dir / "dataset.cfg", cfg.to_kv().to_text());
  return stats;
}

std::vector<ManifestEntry> load_manifest(const fs::path& dataset_dir) {
  std::vector<ManifestEntry> out;
  const std::string text = geom::read_text_file(dataset_dir / "manifest.jsonl");
  int line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
      e.graph_path = j.at("graph_path").get<std::string>();
      e.image_path = j.at("image_path").get<std::string>();
      e.sequence_path = j.value("sequence_path", "sequences/" + e.id + ".seq");
      e.n_nodes = j.at("n_nodes").get<int>();
      e.n_edges = j.at("n_edges").get<int>();
      e.max_span = j.at("max_span").get<int>();
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorCode::Parse, "manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

int load_frontier(const fs::path& dataset_dir) {
  try {
    return nlohmann::json::parse(geom::read_text_file(dataset_dir / "stats.json")).at("frontier").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::Parse, std::string("stats.json: ") + ex.what());
  }
}

std::vector<Sample> load_samples(const fs::path& dataset_dir, std::optional<Split> split, std::size_t limit) {
  std::vector<Sample> out;
  for (const auto& e : load_manifest(dataset_dir)) {
    if (split && e.split != *split) continue;
    if (limit && out.size() >= limit) break;
    Sample s;
    s.id = e.id;
    s.split = e.split;
    s.graph = geom::load_rgf(dataset_dir / e.graph_path);
    s.sequence = geom::load_sequence(dataset_dir / e.sequence_path);
    s.image = raster::read_pgm(dataset_dir / e.image_path);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace roadforge::dataset
