#include <doctest.h>

#include "iconforge/preprocess.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace testing;

namespace {

Volume from_values(std::vector<float> v, const Dims3& d) { return Volume(Grid{d}, std::move(v)); }

}  // namespace

TEST_CASE("normalize_ct") {
  const Volume v = from_values({-1000, 1000, 0, 2500, -3000, 500, -250, 999}, {2, 2, 2});
  const Volume n = normalize_ct(v);
  CHECK(n[0] == 0.0f);
  CHECK(n[1] == 1.0f);
  CHECK(n[2] == 0.5f);
  CHECK(n[3] == 1.0f);
  CHECK(n[4] == 0.0f);
  CHECK(n[5] == 0.75f);
  CHECK(n[6] == 0.375f);
  CHECK(n.grid() == v.grid());

  const Volume r = normalize_ct(random_volume(cube(6), 4, -4000, 4000));
  for (float x : r.values()) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }
}

TEST_CASE("normalize_ct is monotone") {
  std::vector<float> hu;
  for (int i = 0; i < 64; ++i) hu.push_back(-1600.0f + 50.0f * i);
  const Volume n = normalize_ct(from_values(hu, {4, 4, 4}));
  for (std::size_t i = 1; i < n.size(); ++i) CHECK(n[i] >= n[i - 1]);
}

TEST_CASE("normalize_mri") {
  const Volume c = normalize_mri(Volume::filled(cube(3), 7.5f));
  for (float x : c.values()) CHECK(x == 1.0f);

  const Volume z = normalize_mri(Volume::filled(cube(3), 0.0f));
  for (float x : z.values()) CHECK(x == 0.0f);

  std::vector<float> ramp(1000);
  for (int i = 0; i < 1000; ++i) ramp[i] = static_cast<float>(i);
  std::shuffle(ramp.begin(), ramp.end(), std::mt19937_64(3));
  const double p99 = sorted_percentile(ramp, 99);
  CHECK(p99 == doctest::Approx(989.01));
  CHECK(percentile(ramp, 99) == p99);
  const Volume n = normalize_mri(from_values(ramp, {10, 10, 10}));
  for (std::size_t i = 0; i < n.size(); ++i) {
    const float expect = static_cast<float>(std::min<double>(ramp[i], p99) / p99);
    CHECK(n[i] == expect);
  }
}

TEST_CASE("percentile agrees with sorting on random data") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Volume v = random_volume(Grid{{7, 5, 3}}, seed, 0, 300);
    std::vector<float> vals(v.values().begin(), v.values().end());
    for (double q : {0.0, 1.0, 50.0, 99.0, 100.0}) CHECK(percentile(vals, q) == sorted_percentile(vals, q));
    const Volume n = normalize_mri(v);
    for (float x : n.values()) {
      CHECK(x >= 0.0f);
      CHECK(x <= 1.0f);
    }
  }
}

TEST_CASE("normalize_mri clips negatives") {
  const Volume n = normalize_mri(from_values({-5, 1, 2, 3, 4, 5, 6, 7}, {2, 2, 2}));
  CHECK(n[0] == 0.0f);
}

TEST_CASE("to_canonical and prepare_input") {
  const Grid g{{5, 7, 4}, {1.2, 0.8, 2.5}, {10, -5, 3}};
  const Volume v = random_volume(g, 2, -1200, 1200);
  const Volume c = to_canonical(v, 9);
  CHECK(c.dims() == Dims3{9, 9, 9});
  for (int a = 0; a < 3; ++a) {
    CHECK(c.spacing()[a] * 8 == doctest::Approx(g.spacing[a] * (g.dims[a] - 1)));
    CHECK(c.origin()[a] == g.origin[a]);
  }
  const Volume p = prepare_input(v, Modality::ct, 9);
  const Volume manual = resample_to_shape(normalize_ct(v), {9, 9, 9});
  CHECK(std::equal(p.values().begin(), p.values().end(), manual.values().begin()));
  CHECK(to_canonical(Volume::filled(g, 3.f), 6).max() == doctest::Approx(3.0));

  CHECK(parse_modality("mri") == Modality::mri);
  CHECK(error_code([] { parse_modality("pet"); }) == "usage");
}

TEST_CASE("map_to_original") {
  const Volume orig = Volume::filled(Grid{{10, 12, 8}, {1, 1, 2}}, 0.f);
  const TransformMap id = map_to_original(identity_map({6, 6, 6}), orig);
  CHECK(id.dims() == orig.dims());
  const TransformMap id_ref = identity_map(orig.dims());
  for (std::size_t i = 0; i < id.values().size(); ++i) {
    CHECK(std::abs(id.values()[i] - id_ref.values()[i]) <= 1e-6);
  }

  const TransformMap shift = affine_map({6, 6, 6}, {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}, {0.1, -0.05, 0.2});
  const TransformMap up = map_to_original(shift, orig);
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < 12; ++j)
      for (int i = 0; i < 10; ++i) {
        const auto p = up.at(i, j, k);
        CHECK(p[0] == doctest::Approx(i / 9.0 + 0.1).epsilon(1e-6));
        CHECK(p[1] == doctest::Approx(j / 11.0 - 0.05).epsilon(1e-6));
        CHECK(p[2] == doctest::Approx(k / 7.0 + 0.2).epsilon(1e-6));
      }

  // Smooth random map predicted at 32^3, carried to 49^3, evaluated directly.
  const Dims3 d{32, 32, 32};
  const TransformMap phi = map_from_displacement(d, smooth_displacement(d, 4, 3, 17));
  const Volume big = Volume::filled(cube(49), 0.f);
  const TransformMap moved = map_to_original(phi, big);
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> node(0, 48);
  double worst = 0;
  for (int s = 0; s < 100; ++s) {
    const int i = node(rng), j = node(rng), k = node(rng);
    const auto direct = phi.evaluate({i / 48.0, j / 48.0, k / 48.0});
    const auto got = moved.at(i, j, k);
    for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(direct[c] - got[c]));
  }
  CHECK(worst <= 1e-3);
}
