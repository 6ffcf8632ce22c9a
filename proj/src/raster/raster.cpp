#include "roadforge/raster/raster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "roadforge/common/error.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/geom/io.hpp"

namespace roadforge::raster {

using geom::Point2;

namespace {

double squared_distance_to_segment(Point2 p, Point2 a, Point2 b) {
  const Point2 d = b - a;
  const Point2 w = p - a;
  const double len2 = d.x * d.x + d.y * d.y;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp((w.x * d.x + w.y * d.y) / len2, 0.0, 1.0);
  const Point2 c{a.x + t * d.x, a.y + t * d.y};
  const double dx = p.x - c.x;
  const double dy = p.y - c.y;
  return dx * dx + dy * dy;
}

}  // namespace

GrayImage rasterize(const geom::RoadGraph& g, int size, double half_width) {
  if (size <= 0) fail(ErrorCode::InvalidArgument, "image size must be positive");
  if (!(half_width > 0.0)) fail(ErrorCode::InvalidArgument, "half width must be positive");
  GrayImage img(size, size, 0.0);
  const double s = static_cast<double>(size);
  const double reach = 2.0 * half_width;
  const double reach2 = reach * reach;
  for (const auto& e : g.edges) {
    const Point2 a{g.nodes[e.a].x * s, g.nodes[e.a].y * s};
    const Point2 b{g.nodes[e.b].x * s, g.nodes[e.b].y * s};
    // Only scan the bounding box of the stroke.
    const double lo_x = std::min(a.x, b.x) - reach, hi_x = std::max(a.x, b.x) + reach;
    const double lo_y = std::min(a.y, b.y) - reach, hi_y = std::max(a.y, b.y) + reach;
    const int c0 = std::max(0, static_cast<int>(std::floor((lo_x + s - 1.0) / 2.0)));
    const int c1 = std::min(size - 1, static_cast<int>(std::ceil((hi_x + s - 1.0) / 2.0)));
    const int r0 = std::max(0, static_cast<int>(std::floor((lo_y + s - 1.0) / 2.0)));
    const int r1 = std::min(size - 1, static_cast<int>(std::ceil((hi_y + s - 1.0) / 2.0)));
    for (int r = r0; r <= r1; ++r) {
      const double v = 2.0 * r + 1.0 - s;
      for (int c = c0; c <= c1; ++c) {
        if (img.at(r, c) == 1.0) continue;
        const double u = 2.0 * c + 1.0 - s;
        if (squared_distance_to_segment({u, v}, a, b) <= reach2) img.at(r, c) = 1.0;
      }
    }
  }
  return img;
}

GrayImage dihedral_image(const GrayImage& img, int k) {
  if (img.width != img.height) fail(ErrorCode::ShapeMismatch, "dihedral_image needs a square image");
  const int s = img.width;
  GrayImage out(s, s);
  for (int r = 0; r < s; ++r) {
    for (int c = 0; c < s; ++c) {
      const Point2 q = geom::dihedral_apply(k, {2.0 * c + 1.0 - s, 2.0 * r + 1.0 - s});
      const int c2 = static_cast<int>(std::lround((q.x + s - 1.0) / 2.0));
      const int r2 = static_cast<int>(std::lround((q.y + s - 1.0) / 2.0));
      out.at(r2, c2) = img.at(r, c);
    }
  }
  return out;
}

NoiseLevel parse_noise_level(const std::string& s) {
  if (s == "none") return NoiseLevel::None;
  if (s == "low") return NoiseLevel::Low;
  if (s == "medium") return NoiseLevel::Medium;
  fail(ErrorCode::InvalidArgument, "unknown noise level '" + s + "'");
}

std::string to_string(NoiseLevel level) {
  switch (level) {
    case NoiseLevel::None: return "none";
    case NoiseLevel::Low: return "low";
    case NoiseLevel::Medium: return "medium";
  }
  return "none";
}

GrayImage inject_noise(const GrayImage& img, NoiseLevel level, std::uint64_t seed, const NoiseConfig& cfg) {
  if (level == NoiseLevel::None) return img;
  const double fraction = level == NoiseLevel::Low ? cfg.low_fraction : cfg.medium_fraction;
  const double jitter = level == NoiseLevel::Low ? cfg.low_jitter : cfg.medium_jitter;
  Rng rng(seed);
  GrayImage out = img;

  const int dr[4] = {-1, 1, 0, 0};
  const int dc[4] = {0, 0, -1, 1};
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      if (img.at(r, c) < 0.5) continue;
      int background[4];
      int nb = 0;
      for (int k = 0; k < 4; ++k) {
        const int rr = r + dr[k], cc = c + dc[k];
        if (rr < 0 || rr >= img.height || cc < 0 || cc >= img.width) continue;
        if (img.at(rr, cc) < 0.5) background[nb++] = k;
      }
      if (nb == 0) continue;
      if (rng.uniform() >= jitter) continue;
      const int k = background[rng.below(static_cast<std::uint64_t>(nb))];
      out.at(r + dr[k], c + dc[k]) = img.at(r, c);
      out.at(r, c) = img.at(r + dr[k], c + dc[k]);
    }
  }

  const std::size_t n = out.pixels.size();
  const auto flips = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < flips && i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
    out.pixels[idx[i]] = 1.0 - out.pixels[idx[i]];
  }
  for (auto& v : out.pixels) v = std::clamp(v, 0.0, 1.0);
  return out;
}

std::string encode_pgm(const GrayImage& img) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.pixels.size());
  for (double v : img.pixels) {
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)))));
  }
  return out;
}

GrayImage decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P5") fail(ErrorCode::Parse, "not a binary PGM (P5)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    fail(ErrorCode::Parse, "malformed PGM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) fail(ErrorCode::Parse, "unsupported PGM dimensions or maxval");
  ++pos;  // single whitespace after maxval
  if (bytes.size() < pos + static_cast<std::size_t>(w) * h) fail(ErrorCode::Parse, "truncated PGM payload");
  GrayImage img(w, h);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<unsigned char>(bytes[pos + i]) / 255.0;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  geom::write_text_file(path, encode_pgm(img));
}

GrayImage read_pgm(const std::filesystem::path& path) { return decode_pgm(geom::read_text_file(path)); }

GrayImage quantize(const GrayImage& img) {
  GrayImage out = img;
  for (auto& v : out.pixels) v = std::lround(255.0 * std::clamp(v, 0.0, 1.0)) / 255.0;
  return out;
}

}  // namespace roadforge::raster
