#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "random_graphs.hpp"
#include "roadforge/common/error.hpp"
#include "roadforge/raster/raster.hpp"

using namespace roadforge;
using namespace roadforge::raster;
using geom::Point2;
using geom::RoadGraph;

namespace {

// Distance from pixel (r, c) to the nearest edge, measured in pixels with the
// tile [-1, 1] spread over `size` pixels.
double oracle_distance(const RoadGraph& g, int size, int r, int c) {
  const double px = c + 0.5, py = r + 0.5;
  double best = 1e300;
  for (const auto& e : g.edges) {
    const double ax = (g.nodes[e.a].x + 1) * size / 2, ay = (g.nodes[e.a].y + 1) * size / 2;
    const double bx = (g.nodes[e.b].x + 1) * size / 2, by = (g.nodes[e.b].y + 1) * size / 2;
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, std::hypot(px - (ax + t * dx), py - (ay + t * dy)));
  }
  return best;
}

int count_set(const GrayImage& img) {
  return static_cast<int>(std::count_if(img.pixels.begin(), img.pixels.end(), [](double v) { return v > 0.5; }));
}

}  // namespace

TEST_CASE("rasterize") {
  SUBCASE("empty graph is all zero") {
    auto img = rasterize(RoadGraph{});
    CHECK(img.width == 64);
    CHECK(img.height == 64);
    CHECK(count_set(img) == 0);
  }
  SUBCASE("horizontal edge through the centre") {
    RoadGraph g{{{-1, 0}, {1, 0}}, {{0, 1}}};
    auto img = rasterize(g, 64, 1.5);
    std::set<int> rows;
    for (int r = 0; r < 64; ++r) {
      for (int c = 0; c < 64; ++c) {
        const bool expect = oracle_distance(g, 64, r, c) <= 1.5;
        CHECK((img.at(r, c) == 1.0) == expect);
        if (expect) rows.insert(r);
      }
    }
    // Row centres sit at 0.5, 1.5, 2.5 px from y = 0, so rows 30..33 qualify.
    CHECK(rows == std::set<int>{30, 31, 32, 33});
  }
  SUBCASE("matches the distance oracle on random graphs") {
    Rng rng(7);
    for (int trial = 0; trial < 30; ++trial) {
      auto g = testing::random_accepted_graph(rng);
      auto img = rasterize(g);
      for (int r = 0; r < 64; ++r) {
        for (int c = 0; c < 64; ++c) {
          const double d = oracle_distance(g, 64, r, c);
          if (std::abs(d - 1.5) < 1e-9) continue;
          CHECK((img.at(r, c) == 1.0) == (d <= 1.5));
        }
      }
      CHECK(count_set(img) > 0);
    }
  }
  SUBCASE("binary valued") {
    Rng rng(8);
    auto img = rasterize(testing::random_accepted_graph(rng));
    for (double v : img.pixels) CHECK((v == 0.0 || v == 1.0));
  }
  SUBCASE("exact dihedral equivariance") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      auto g = testing::random_accepted_graph(rng);
      auto base = rasterize(g);
      for (int k = 0; k < 8; ++k) CHECK(rasterize(geom::dihedral_transform(g, k)) == dihedral_image(base, k));
    }
  }
}

TEST_CASE("dihedral_image agrees with dihedral_apply on pixel centres") {
  // Place a single marked pixel and check where the point transform sends its centre.
  GrayImage img(8, 8);
  img.at(1, 6) = 1.0;
  const Point2 centre{(6 + 0.5) / 4 - 1, (1 + 0.5) / 4 - 1};
  for (int k = 0; k < 8; ++k) {
    auto out = dihedral_image(img, k);
    const Point2 q = geom::dihedral_apply(k, centre);
    const int c = static_cast<int>(std::floor((q.x + 1) * 4));
    const int r = static_cast<int>(std::floor((q.y + 1) * 4));
    CHECK(out.at(r, c) == 1.0);
    CHECK(count_set(out) == 1);
  }
}

TEST_CASE("inject_noise") {
  GrayImage zero(64, 64);
  SUBCASE("none is the identity") {
    Rng rng(1);
    auto img = rasterize(testing::random_accepted_graph(rng));
    CHECK(inject_noise(img, NoiseLevel::None, 5) == img);
  }
  SUBCASE("flip counts on an empty image") {
    // No road pixels means no jitter, so only the flips remain.
    CHECK(count_set(inject_noise(zero, NoiseLevel::Low, 3)) == static_cast<int>(std::lround(0.02 * 4096)));
    CHECK(count_set(inject_noise(zero, NoiseLevel::Medium, 3)) == static_cast<int>(std::lround(0.08 * 4096)));
  }
  SUBCASE("deterministic per seed") {
    Rng rng(2);
    auto img = rasterize(testing::random_accepted_graph(rng));
    CHECK(inject_noise(img, NoiseLevel::Medium, 42) == inject_noise(img, NoiseLevel::Medium, 42));
    CHECK_FALSE(inject_noise(img, NoiseLevel::Medium, 42) == inject_noise(img, NoiseLevel::Medium, 43));
  }
  SUBCASE("values stay in [0, 1]") {
    Rng rng(4);
    auto img = inject_noise(rasterize(testing::random_accepted_graph(rng)), NoiseLevel::Medium, 1);
    for (double v : img.pixels) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK(parse_noise_level("low") == NoiseLevel::Low);
  CHECK(to_string(NoiseLevel::Medium) == "medium");
  CHECK_THROWS_AS(parse_noise_level("loud"), Error);
}

TEST_CASE("pgm round trip") {
  GrayImage img(3, 2);
  img.pixels = {0.0, 0.5, 1.0, 0.25, 0.75, 0.1};
  const std::string bytes = encode_pgm(img);
  CHECK(bytes.rfind("P5\n3 2\n255\n", 0) == 0);
  REQUIRE(bytes.size() == std::string("P5\n3 2\n255\n").size() + 6);
  CHECK(static_cast<unsigned char>(bytes[bytes.size() - 5]) == 128);  // round(127.5)
  auto back = decode_pgm(bytes);
  CHECK(back == quantize(img));
  CHECK(decode_pgm(encode_pgm(back)) == back);
  CHECK_THROWS_AS(decode_pgm("P2\n1 1\n255\n0"), Error);
  CHECK_THROWS_AS(decode_pgm("P5\n2 2\n255\n\x01"), Error);
}
