#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "roadforge/geom/graph.hpp"

namespace roadforge::raster {

/// Row-major grayscale image, values in [0, 1].
struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(int w, int h, double fill = 0.0) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }
  double at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

inline constexpr int kImageSize = 64;
inline constexpr double kHalfWidth = 1.5;

/// Distance-field rendering: a pixel is 1 iff its centre lies within
/// `half_width` pixels of some edge. Node coordinates map [-1, 1] onto the
/// full image extent.
///
/// Distances are evaluated in a half-pixel lattice where pixel centres sit on
/// odd integers and node coordinates are scaled by `size`; every dihedral
/// symmetry then only swaps or negates operands, which keeps rendering
/// exactly equivariant.
GrayImage rasterize(const geom::RoadGraph& g, int size = kImageSize, double half_width = kHalfWidth);

/// Image counterpart of geom::dihedral_apply (square images only).
GrayImage dihedral_image(const GrayImage& img, int k);

enum class NoiseLevel { None, Low, Medium };
NoiseLevel parse_noise_level(const std::string& s);
std::string to_string(NoiseLevel level);

struct NoiseConfig {
  double low_fraction = 0.02;
  double medium_fraction = 0.08;
  /// Probability that a road-boundary pixel shifts by one pixel.
  double low_jitter = 0.25;
  double medium_jitter = 0.5;
};

/// Boundary jitter on the clean image followed by flipping exactly
/// round(fraction * pixel_count) distinct pixels chosen by the seeded PRNG.
GrayImage inject_noise(const GrayImage& img, NoiseLevel level, std::uint64_t seed, const NoiseConfig& cfg = {});

/// Binary PGM (P5, maxval 255); value v is stored as round(255 * v).
std::string encode_pgm(const GrayImage& img);
GrayImage decode_pgm(const std::string& bytes);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

/// Quantizes to the 8-bit levels a PGM round trip produces.
GrayImage quantize(const GrayImage& img);

}  // namespace roadforge::raster
