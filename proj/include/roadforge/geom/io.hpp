#pragma once

#include <filesystem>
#include <string>

#include "roadforge/geom/canonical.hpp"
#include "roadforge/geom/graph.hpp"

namespace roadforge::geom {

/// Fixed-point decimal with at least six fractional digits that parses back
/// to the identical double.
std::string format_decimal(double v);

/// RGF1 text: `RGF1 <V> <E>`, V lines `v <x> <y>`, E lines `e <i> <j>` (i < j).
/// Nodes are written in canonical order.
std::string write_rgf(const RoadGraph& g);
RoadGraph parse_rgf(const std::string& text);
void save_rgf(const std::filesystem::path& path, const RoadGraph& g);
RoadGraph load_rgf(const std::filesystem::path& path);

/// SEQ1 text: `SEQ1 <N> <M>`, then N lines `s <bits> <x> <y> <stop>` where
/// bits is an M-character 0/1 string.
std::string write_sequence(const CanonicalSequence& seq);
CanonicalSequence parse_sequence(const std::string& text);
void save_sequence(const std::filesystem::path& path, const CanonicalSequence& seq);
CanonicalSequence load_sequence(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Writes through a temporary file and renames it into place.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace roadforge::geom
