#include <doctest.h>

#include <set>

#include "iconforge/eval.hpp"
#include "iconforge/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace testing;

TEST_CASE("physical and normalized coordinates") {
  const Grid g{{7, 9, 4}, {0.8, 1.25, 3.0}, {-20.5, 3.0, 11.0}};
  const auto o = physical_to_normalized(g.origin, g);
  for (double x : o) CHECK(x == 0.0);
  const Vec3 far{g.origin[0] + 0.8 * 6, g.origin[1] + 1.25 * 8, g.origin[2] + 3.0 * 3};
  for (double x : physical_to_normalized(far, g)) CHECK(x == doctest::Approx(1.0).epsilon(1e-15));

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int i = 0; i < 100; ++i) {
    const Vec3 p{u(rng), u(rng), u(rng)};
    const Vec3 back = normalized_to_physical(physical_to_normalized(p, g), g);
    for (int a = 0; a < 3; ++a) CHECK(std::abs(back[a] - p[a]) <= 1e-9);
  }
}

TEST_CASE("mtre") {
  // n - 1 = 8 keeps node coordinates exact in float.
  const Grid g{{9, 9, 9}, {2.0, 2.0, 2.0}, {-8.0, 0.0, 4.0}};
  const TransformMap id = identity_map(g.dims);
  LandmarkSet fixed;
  for (int i = 0; i < 6; ++i) fixed.push_back({g.origin[0] + 2.0 * i, g.origin[1] + 2.0 * (7 - i), g.origin[2] + 4.0});
  CHECK(mtre(id, fixed, fixed, g, g) == 0.0);

  LandmarkSet moved = fixed;
  for (auto& p : moved) {
    p[0] += 3;
    p[1] += 4;
  }
  CHECK(mtre(id, fixed, moved, g, g) == 5.0);

  SUBCASE("identity map gives the mean raw distance") {
    const auto f = random_points(g, 12, 1, 0.0), m = random_points(g, 12, 2, 0.0);
    double raw = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      raw += std::hypot(f[i][0] - m[i][0], f[i][1] - m[i][1], f[i][2] - m[i][2]);
    }
    CHECK(mtre(id, f, m, g, g) == doctest::Approx(raw / f.size()).epsilon(1e-6));
  }

  SUBCASE("random smooth map against the brute-force reference") {
    const Grid fg{{8, 8, 8}, {1.5, 0.9, 2.2}, {3, -4, 10}};
    const Grid mg{{10, 7, 9}, {1.1, 1.3, 1.7}, {-2, 5, 0}};
    const TransformMap phi = map_from_displacement(fg.dims, smooth_displacement(fg.dims, 2, 1.5, 6));
    const auto f = random_points(fg, 10, 7), m = random_points(mg, 10, 8);
    CHECK(std::abs(mtre(phi, f, m, fg, mg) - oracle_mtre(phi, f, m, fg, mg)) <= 1e-6);
  }

  CHECK(error_code([&] { mtre(id, fixed, LandmarkSet(fixed.begin(), fixed.end() - 1), g, g); }) == "landmark-count");
  CHECK(error_code([&] { mtre(id, {}, {}, g, g); }) == "landmark-count");
}

TEST_CASE("dice") {
  const Grid g = cube(8);
  const LabelVolume r = random_labels(g, 3, 1);
  const auto same = dice(r, r);
  CHECK(same.per_label.size() == 3);
  for (const auto& [l, d] : same.per_label) CHECK(d == 1.0);
  CHECK(same.mean == 1.0);

  std::vector<std::int32_t> a(g.size(), 0), b(g.size(), 0);
  // Rows of 8 voxels: A takes rows 0..3, B rows 2..5, so overlap 16 of 32 each.
  for (int row = 0; row < 4; ++row)
    for (int i = 0; i < 8; ++i) a[g.index(i, row, 0)] = 1;
  for (int row = 2; row < 6; ++row)
    for (int i = 0; i < 8; ++i) b[g.index(i, row, 0)] = 1;
  const LabelVolume la(g, a), lb(g, b);
  CHECK(dice(la, lb).per_label.at(1) == 0.5);
  CHECK(dice(la, lb).mean == 0.5);

  std::vector<std::int32_t> c(g.size(), 0);
  for (int i = 0; i < 8; ++i) c[g.index(i, 7, 7)] = 1;
  CHECK(dice(la, LabelVolume(g, c)).mean == 0.0);

  // A label missing from one side counts as 0; absent from both, it is skipped.
  std::vector<std::int32_t> d = a;
  d[g.index(0, 7, 7)] = 5;
  const auto partial = dice(LabelVolume(g, d), la);
  CHECK(partial.per_label.size() == 2);
  CHECK(partial.per_label.at(5) == 0.0);
  CHECK(dice(LabelVolume(g, std::vector<std::int32_t>(g.size(), 0)), LabelVolume(g, std::vector<std::int32_t>(g.size(), 0))).per_label.empty());

  for (std::uint64_t s = 0; s < 5; ++s) {
    const LabelVolume x = random_labels(g, 4, 10 + s), y = random_labels(g, 4, 20 + s);
    const auto got = dice(x, y);
    const auto ref = oracle_dice(x, y);
    CHECK(got.per_label.size() == ref.size());
    double mean = 0;
    for (const auto& [l, v] : ref) {
      CHECK(std::abs(got.per_label.at(l) - v) <= 1e-12);
      mean += v;
    }
    CHECK(std::abs(got.mean - mean / ref.size()) <= 1e-12);
    const auto swapped = dice(y, x);
    CHECK(swapped.per_label == got.per_label);
  }

  CHECK(error_code([&] { dice(r, random_labels(cube(7), 2, 1)); }) == "shape");
}

TEST_CASE("metrics report serialization") {
  MetricsReport full;
  full.mtre_mm = 1.2345678901234567;
  full.dice_per_label = {{1, 0.25}, {7, 1.0 / 3.0}};
  full.dice_mean = (0.25 + 1.0 / 3.0) / 2;
  full.neg_jac_fraction = 9.3e-5;
  full.wall_time_s = 0.125;
  CHECK(MetricsReport::from_json(full.to_json()) == full);

  MetricsReport bare;
  bare.neg_jac_fraction = 0.0;
  const MetricsReport back = MetricsReport::from_json(bare.to_json());
  CHECK(back == bare);
  CHECK(!back.mtre_mm.has_value());
  CHECK(!back.dice_mean.has_value());

  CHECK(error_code([] { MetricsReport::from_json("{\"mtre_mm\": 1}"); }) == "format");
  CHECK(error_code([] { MetricsReport::from_json("not json"); }) == "format");

  const std::string csv = metrics_csv({{"p1", full}, {"p2", bare}});
  CHECK(csv.rfind("pair,mtre_mm,dice_mean,neg_jac_fraction,wall_time_s\n", 0) == 0);
  CHECK(csv.find("\np2,,,0,0\n") != std::string::npos);
  CHECK(csv.find("\np1,1.2345678901234567,") != std::string::npos);
}

TEST_CASE("evaluate_map needs the original grid") {
  const Grid g{{10, 12, 9}, {1, 1, 2}, {0, 0, 0}};
  const Volume f = random_volume(g, 1), m = random_volume(g, 2);
  CHECK(error_code([&] { evaluate_map(identity_map({8, 8, 8}), f, m); }) == "shape");
  const EvalResult r = evaluate_map(identity_map(g.dims), f, m);
  CHECK(r.report.neg_jac_fraction == 0.0);
  CHECK(!r.report.mtre_mm);
  CHECK(!r.report.dice_mean);

  EvalInputs half;
  half.landmarks_fixed = LandmarkSet{{1, 1, 1}};
  CHECK(error_code([&] { evaluate_map(identity_map(g.dims), f, m, half); }) == "landmark-count");
}

TEST_CASE("evaluate_pair runs on the original grids") {
  ModelConfig mc;
  mc.unet.base_channels = 2;
  mc.canonical_side = 8;
  const RegistrationModel model(mc);

  const Grid fixed_grid{{13, 10, 11}, {0.7, 1.1, 1.6}, {4, -3, 2}};
  const Volume img = textured_volume(fixed_grid, 3);
  const LabelVolume lab = random_labels(fixed_grid, 2, 4);
  EvalInputs in;
  in.labels_fixed = lab;
  in.labels_moving = lab;
  in.landmarks_fixed = random_points(fixed_grid, 5, 5);
  in.landmarks_moving = in.landmarks_fixed;

  const EvalResult r = evaluate_pair(model, img, img, in);
  CHECK(r.phi.dims() == fixed_grid.dims);
  CHECK(*r.report.dice_mean == doctest::Approx(1.0));
  CHECK(r.report.neg_jac_fraction == 0.0);
  CHECK(*r.report.mtre_mm <= 1e-4);
  CHECK(r.report.wall_time_s >= 0.0);

  REQUIRE(r.trace.size() == 4);
  CHECK(r.trace[0].stage == "prepare_input");
  CHECK(r.trace[0].dims == Dims3{8, 8, 8});
  CHECK(r.trace[1].stage == "predict");
  CHECK(r.trace[2].stage == "map_to_original");
  CHECK(r.trace[2].dims == fixed_grid.dims);
  CHECK(r.trace[3].stage == "metrics");
  CHECK(r.trace[3].dims == fixed_grid.dims);

  // Moving image on a different grid: the map still lives on the fixed one.
  const Grid moving_grid{{9, 12, 8}, {1.0, 0.9, 2.0}, {4, -3, 2}};
  const EvalResult other = evaluate_pair(model, img, resample_to_shape(img, moving_grid.dims));
  CHECK(other.phi.dims() == fixed_grid.dims);
  CHECK(other.trace.back().dims == fixed_grid.dims);
}

TEST_CASE("instance optimization lowers the landmark error") {
  ModelConfig mc;
  mc.unet.base_channels = 2;
  mc.canonical_side = 16;
  const RegistrationModel model(mc);

  const Grid g{{18, 16, 17}, {1.0, 1.2, 0.9}, {0, 0, 0}};
  const Volume moving = textured_volume(g, 8);
  const TransformMap truth = map_from_displacement(g.dims, smooth_displacement(g.dims, 4, 2.0, 9));
  const Volume fixed = warp(moving, truth);

  // fixed(x) = moving(truth(x)), so x corresponds to truth(x).
  EvalInputs in;
  in.landmarks_fixed = random_points(g, 20, 10, 0.2);
  LandmarkSet mv;
  for (const auto& p : *in.landmarks_fixed) {
    mv.push_back(normalized_to_physical(truth.evaluate(physical_to_normalized(p, g)), g));
  }
  in.landmarks_moving = mv;

  const double initial = mtre(identity_map(g.dims), *in.landmarks_fixed, mv, g, g);
  PairOptions opt;
  opt.io_iterations = 50;
  opt.io_lr = 1e-4;
  const EvalResult r = evaluate_pair(model, fixed, moving, in, opt);
  CHECK(r.trace[1].stage == "instance_optimize");
  CHECK(initial > 0.5);
  CHECK(*r.report.mtre_mm < initial);
}
