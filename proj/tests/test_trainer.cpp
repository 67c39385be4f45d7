#include <doctest.h>

#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "iconforge/io.hpp"
#include "iconforge/parallel.hpp"
#include "iconforge/trainer.hpp"
#include "support.hpp"

using namespace testing;

namespace {

DatasetSpec inter_set(const std::string& name, int n, const Grid& g, std::uint64_t seed) {
  DatasetSpec ds;
  ds.name = name;
  for (int i = 0; i < n; ++i) ds.volumes.push_back(random_volume(g, seed + i));
  return ds;
}

DatasetSpec shape_set(const std::string& name, int n, const Grid& g, double sigma, double max_voxels,
                      std::uint64_t seed) {
  DatasetSpec ds;
  ds.name = name;
  for (int i = 0; i < n; ++i) {
    auto s = deformed_shapes(g, sigma, max_voxels, seed + i);
    ds.volumes.push_back(std::move(s.image));
    ds.labels.push_back(std::move(s.labels));
  }
  return ds;
}

ModelConfig tiny_model(int side, bool step2 = false, std::uint64_t seed = 1) {
  ModelConfig c;
  c.unet.base_channels = 2;
  c.canonical_side = side;
  c.step2_enabled = step2;
  c.init_seed = seed;
  return c;
}

TrainConfig tiny_train(int side, int epochs, double lr = 5e-5) {
  TrainConfig c;
  c.pairs_per_dataset = 3;
  c.epochs_phase1 = epochs;
  c.lr = lr;
  c.canonical_side = side;
  c.seed = 9;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

TEST_CASE("sample_epoch counts and membership") {
  const Grid g = cube(4);
  std::mt19937_64 rng(1);

  const std::vector<DatasetSpec> two{inter_set("a", 3, g, 1), inter_set("b", 4, g, 10)};
  const auto pairs = sample_epoch(two, 3, rng);
  CHECK(pairs.size() == 6);
  CHECK(std::count_if(pairs.begin(), pairs.end(), [](const SampledPair& p) { return p.dataset == 0; }) == 3);
  for (const auto& p : pairs) {
    CHECK(p.moving != p.target);
    CHECK(p.moving < static_cast<int>(two[p.dataset].volumes.size()));
    CHECK(p.target < static_cast<int>(two[p.dataset].volumes.size()));
  }

  DatasetSpec intra = inter_set("i", 2, g, 20);
  intra.mode = PairingMode::intra;
  intra.pairs = {{1, 0}};
  for (const auto& p : sample_epoch({intra}, 4, rng)) CHECK(p == SampledPair{0, 1, 0});

  std::vector<DatasetSpec> four;
  for (int d = 0; d < 4; ++d) four.push_back(inter_set("d" + std::to_string(d), 2, g, 30 + 5 * d));
  CHECK(sample_epoch(four, 1000, rng).size() == 4000);

  std::mt19937_64 r1(77), r2(77);
  CHECK(sample_epoch(two, 50, r1) == sample_epoch(two, 50, r2));
}

TEST_CASE("sample_epoch rejects empty datasets") {
  const Grid g = cube(4);
  std::mt19937_64 rng(1);
  CHECK(error_code([&] { sample_epoch({inter_set("one", 1, g, 1)}, 2, rng); }) == "empty-dataset");
  DatasetSpec intra = inter_set("i", 2, g, 1);
  intra.mode = PairingMode::intra;
  CHECK(error_code([&] { sample_epoch({intra}, 2, rng); }) == "empty-dataset");
  intra.pairs = {{0, 2}};
  CHECK(error_code([&] { intra.validate(); }) == "config");
  CHECK(error_code([&] { sample_epoch({inter_set("a", 2, g, 1)}, 0, rng); }) == "config");
  CHECK(error_code([] { parse_pairing("both"); }) == "usage");
}

TEST_CASE("sample_epoch marginals are uniform") {
  const std::vector<DatasetSpec> ds{inter_set("three", 3, cube(4), 3)};
  std::mt19937_64 rng(2024);
  const int n = 10000;
  std::map<std::pair<int, int>, int> ordered, unordered;
  for (const auto& p : sample_epoch(ds, n, rng)) {
    ++ordered[{p.moving, p.target}];
    ++unordered[{std::min(p.moving, p.target), std::max(p.moving, p.target)}];
  }
  CHECK(unordered.size() == 3);
  CHECK(ordered.size() == 6);
  const double pu = 1.0 / 3, po = 1.0 / 6;
  for (const auto& [k, c] : unordered) CHECK(std::abs(c - n * pu) <= 3 * std::sqrt(n * pu * (1 - pu)));
  for (const auto& [k, c] : ordered) CHECK(std::abs(c - n * po) <= 3 * std::sqrt(n * po * (1 - po)));
}

TEST_CASE("zero epochs leaves the initialization in the checkpoint") {
  const int side = 8;
  const auto dir = scratch_dir("trainer_zero");
  RegistrationModel m(tiny_model(side));
  const RegistrationModel init = m;
  TrainConfig cfg = tiny_train(side, 0);
  cfg.out_dir = dir;
  const TrainResult r = train(m, {inter_set("a", 3, cube(side), 1)}, cfg);
  CHECK(r.epochs.empty());
  REQUIRE(r.checkpoints.size() == 1);
  CHECK(m.params().same_values(init.params()));
  const io::Checkpoint ck = io::read_checkpoint(r.checkpoints.front());
  CHECK(ck.params.same_values(init.params()));
  CHECK(ck.epoch == 0);
  CHECK(ck.config == m.config());
}

TEST_CASE("identical pairs start at a near-zero loss") {
  const int side = 16;
  DatasetSpec ds = inter_set("same", 2, cube(side), 5);
  ds.mode = PairingMode::intra;
  ds.pairs = {{0, 0}, {1, 1}};
  RegistrationModel m(tiny_model(side));
  std::vector<EpochLog> logs;
  // One pair per epoch, so the logged mean is the loss of the zero-initialized model.
  TrainConfig cfg = tiny_train(side, 1);
  cfg.pairs_per_dataset = 1;
  train(m, {ds}, cfg, [&](const EpochLog& e) { logs.push_back(e); });
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].skipped == 0);
  CHECK(logs[0].pairs == 1);
  CHECK(logs[0].mean.total <= 2e-3);
  CHECK(logs[0].mean.reg <= 1e-6);
}

TEST_CASE("toy training lowers the loss and logs every epoch") {
  const int side = 16;
  const Grid g = cube(side);
  const std::vector<DatasetSpec> sets{shape_set("wide", 6, g, 3.0, 2.5, 100),
                                      shape_set("smooth", 6, g, 5.0, 3.0, 200)};
  const auto dir = scratch_dir("trainer_toy");
  RegistrationModel m(tiny_model(side));
  TrainConfig cfg = tiny_train(side, 30, 2e-3);
  cfg.pairs_per_dataset = 4;
  cfg.checkpoint_every = 10;
  cfg.out_dir = dir;
  int calls = 0;
  const TrainResult r = train(m, sets, cfg, [&](const EpochLog&) { ++calls; });
  REQUIRE(r.epochs.size() == 30);
  CHECK(calls == 30);
  CHECK(r.epochs.back().mean.total < r.epochs.front().mean.total);
  for (const auto& e : r.epochs) {
    CHECK(e.phase == TrainingPhase::step1);
    CHECK(e.pairs == 8);
    CHECK(e.skipped == 0);
  }
  // Epochs 10 and 20, then the final one.
  REQUIRE(r.checkpoints.size() == 3);
  CHECK(r.checkpoints[0].filename() == "checkpoint_epoch0010.json");
  CHECK(io::read_checkpoint(r.checkpoints.back()).params.same_values(m.params()));

  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "epoch,sim_ab,sim_ba,reg,total");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
  }
  CHECK(rows == 30);
}

TEST_CASE("phase two trains only the refinement net") {
  const int side = 8;
  RegistrationModel m(tiny_model(side, true));
  TrainConfig cfg = tiny_train(side, 1, 1e-3);
  cfg.epochs_phase2 = 1;
  cfg.out_dir = scratch_dir("trainer_phase2");
  std::vector<TrainingPhase> phases;
  ad::ParamStore after1;
  const TrainResult r = train(m, {inter_set("a", 3, cube(side), 1)}, cfg, [&](const EpochLog& e) {
    phases.push_back(e.phase);
    if (e.epoch == 1) after1 = m.params();
  });
  CHECK(phases == std::vector<TrainingPhase>{TrainingPhase::step1, TrainingPhase::step2});
  for (const auto& p : m.params().all()) {
    const bool refine = p.name.rfind(kRefinePrefix, 0) == 0;
    const bool same = p.value == after1.get(p.name).value;
    CHECK_MESSAGE(same != refine, p.name);
  }
  REQUIRE(r.checkpoints.size() == 1);
  CHECK(io::read_checkpoint(r.checkpoints.back()).phase == TrainingPhase::step2);
}

TEST_CASE("non-finite losses abort the epoch as divergence") {
  const int side = 8;
  RegistrationModel m(tiny_model(side));
  for (auto& p : m.params().all()) {
    if (p.name.find(".out.") != std::string::npos) std::fill(p.value.begin(), p.value.end(), std::numeric_limits<float>::quiet_NaN());
  }
  std::vector<EpochLog> logs;
  CHECK(error_code([&] {
          train(m, {inter_set("a", 3, cube(side), 1)}, tiny_train(side, 2),
                [&](const EpochLog& e) { logs.push_back(e); });
        }) == "divergence");
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].skipped == logs[0].pairs);
}

TEST_CASE("training config validation") {
  const int side = 8;
  RegistrationModel m(tiny_model(side));
  const std::vector<DatasetSpec> ds{inter_set("a", 3, cube(side), 1)};
  TrainConfig bad = tiny_train(side, 1, 0.0);
  CHECK(error_code([&] { train(m, ds, bad); }) == "config");
  bad = tiny_train(side + 1, 1);
  CHECK(error_code([&] { train(m, ds, bad); }) == "config");
  bad = tiny_train(side, -1);
  CHECK(error_code([&] { train(m, ds, bad); }) == "config");
}

TEST_CASE("training is bit-for-bit reproducible") {
  const int side = 8;
  const std::vector<DatasetSpec> ds{inter_set("a", 4, cube(side), 1)};
  const int worker_count_before = worker_count();
  auto run = [&](const std::string& tag) {
    set_worker_count(1);
    RegistrationModel m(tiny_model(side, true));
    TrainConfig cfg = tiny_train(side, 2, 1e-3);
    cfg.epochs_phase2 = 1;
    cfg.out_dir = scratch_dir("trainer_det_" + tag);
    const TrainResult r = train(m, ds, cfg);
    return slurp(std::filesystem::path(r.checkpoints.back()).replace_extension(".bin"));
  };
  const std::string a = run("a"), b = run("b");
  CHECK(!a.empty());
  CHECK(a == b);
  set_worker_count(worker_count_before);
}

TEST_CASE("finetune") {
  const int side = 16;
  const Grid g = cube(side);
  const std::vector<DatasetSpec> sets{shape_set("wide", 6, g, 3.0, 2.5, 100)};
  RegistrationModel m(tiny_model(side, true));
  TrainConfig cfg = tiny_train(side, 15, 2e-3);
  cfg.pairs_per_dataset = 4;
  train(m, sets, cfg);

  SUBCASE("zero epochs keeps the parameters") {
    const RegistrationModel before = m;
    const TrainResult r = finetune(m, sets, cfg, 0);
    CHECK(r.epochs.empty());
    for (std::size_t i = 0; i < m.params().all().size(); ++i) {
      CHECK(m.params().all()[i].value == before.params().all()[i].value);
    }
  }

  SUBCASE("on the training distribution the loss stays put") {
    std::vector<double> totals;
    finetune(m, sets, cfg, 10, [&](const EpochLog& e) {
      CHECK(e.phase == TrainingPhase::finetune);
      totals.push_back(e.mean.total);
    });
    REQUIRE(totals.size() == 10);
    CHECK(totals.back() <= 1.05 * totals.front());
    for (const auto& p : m.params().all()) CHECK(p.trainable);
  }
}

TEST_CASE("instance optimization") {
  const int side = 16;
  const Grid g = cube(side);
  const ShapeSample a = deformed_shapes(g, 3.0, 2.5, 40), b = deformed_shapes(g, 3.0, 2.5, 41);

  SUBCASE("zero iterations return the zero-shot maps") {
    RegistrationModel m(tiny_model(side, true));
    InstanceConfig cfg;
    cfg.iterations = 0;
    const InstanceResult r = instance_optimize(m, a.image, b.image, cfg);
    CHECK(r.iterations_run == 0);
    CHECK(r.trace.size() == 1);
    CHECK(r.phi_ab == predict_full(m, a.image, b.image));
    CHECK(r.phi_ba == predict_full(m, b.image, a.image));
  }

  SUBCASE("identical images keep the identity") {
    RegistrationModel m(tiny_model(side));
    const Volume same = random_volume(g, 3);
    const InstanceResult r = instance_optimize(m, same, same);
    CHECK(r.status == InstanceStatus::ok);
    CHECK(r.iterations_run == 50);
    const auto id = identity_map(g.dims);
    double worst = 0;
    for (std::size_t i = 0; i < id.values().size(); ++i) {
      worst = std::max(worst, static_cast<double>(std::abs(r.phi_ab.values()[i] - id.values()[i])));
      worst = std::max(worst, static_cast<double>(std::abs(r.phi_ba.values()[i] - id.values()[i])));
    }
    CHECK(worst <= 1e-3);
  }

  SUBCASE("a warped pair ends no worse than zero-shot, model untouched") {
    RegistrationModel m(tiny_model(side, true));
    const RegistrationModel before = m;
    const InstanceResult r = instance_optimize(m, a.image, b.image);
    REQUIRE(r.trace.size() == 51);
    CHECK(r.trace.back().total <= r.trace.front().total);
    const LossBreakdown check = total_loss(a.image, b.image, r.phi_ab, r.phi_ba);
    CHECK(check.total == doctest::Approx(r.trace.back().total).epsilon(1e-5));
    CHECK(m.params().same_values(before.params()));
    for (std::size_t i = 0; i < m.params().all().size(); ++i) {
      CHECK(m.params().all()[i].trainable == before.params().all()[i].trainable);
    }
  }

  CHECK(error_code([&] {
          InstanceConfig c;
          c.lr = 0;
          instance_optimize(RegistrationModel(tiny_model(side)), a.image, b.image, c);
        }) == "config");
}
