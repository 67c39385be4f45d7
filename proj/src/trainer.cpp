#include "iconforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "iconforge/error.hpp"
#include "iconforge/io.hpp"

namespace iconforge {

PairingMode parse_pairing(const std::string& name) {
  if (name == "intra") return PairingMode::intra;
  if (name == "inter") return PairingMode::inter;
  throw Error("usage", "pairing mode must be intra or inter, got '" + name + "'");
}

void DatasetSpec::validate() const {
  const int n = static_cast<int>(volumes.size());
  if (mode == PairingMode::inter && n < 2) {
    throw Error("empty-dataset", name + ": inter-patient sampling needs at least 2 volumes");
  }
  if (mode == PairingMode::intra && pairs.empty()) {
    throw Error("empty-dataset", name + ": intra-patient sampling needs at least one explicit pair");
  }
  for (const auto& [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= n || b >= n) {
      throw Error("config", name + ": pair index out of range");
    }
  }
  if (!labels.empty() && labels.size() != volumes.size()) {
    throw Error("config", name + ": labels must be given for every volume or none");
  }
}

std::size_t DatasetSpec::pair_space() const {
  if (mode == PairingMode::intra) return pairs.size();
  const std::size_t n = volumes.size();
  return n * (n - 1);
}

std::vector<SampledPair> sample_epoch(const std::vector<DatasetSpec>& datasets, int pairs_per_dataset,
                                      std::mt19937_64& rng) {
  if (pairs_per_dataset < 1) throw Error("config", "pairs per dataset must be >= 1");
  std::vector<SampledPair> out;
  out.reserve(datasets.size() * pairs_per_dataset);
  for (std::size_t d = 0; d < datasets.size(); ++d) {
    const auto& ds = datasets[d];
    ds.validate();
    std::uniform_int_distribution<std::size_t> pick(0, ds.pair_space() - 1);
    for (int i = 0; i < pairs_per_dataset; ++i) {
      const std::size_t k = pick(rng);
      SampledPair p{static_cast<int>(d), 0, 0};
      if (ds.mode == PairingMode::intra) {
        p.moving = ds.pairs[k].first;
        p.target = ds.pairs[k].second;
      } else {
        // k enumerates ordered pairs (a, b) with a != b.
        const std::size_t others = ds.volumes.size() - 1;
        p.moving = static_cast<int>(k / others);
        const int b = static_cast<int>(k % others);
        p.target = b >= p.moving ? b + 1 : b;
      }
      out.push_back(p);
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::vector<DatasetSpec> load_datasets(const io::Manifest& manifest) {
  std::vector<DatasetSpec> out;
  for (const auto& e : manifest.datasets) {
    DatasetSpec ds;
    ds.name = e.name;
    ds.mode = parse_pairing(e.mode);
    ds.preprocessing = parse_modality(e.preprocessing);
    ds.pairs = e.pairs;
    for (const auto& p : e.volumes) ds.volumes.push_back(io::read_volume(p));
    for (const auto& p : e.labels) ds.labels.push_back(io::read_labels(p));
    ds.validate();
    out.push_back(std::move(ds));
  }
  return out;
}

std::vector<Volume> prepare_dataset(const DatasetSpec& ds, int side) {
  std::vector<Volume> out;
  out.reserve(ds.volumes.size());
  for (const auto& v : ds.volumes) out.push_back(prepare_input(v, ds.preprocessing, side));
  return out;
}

void write_metrics_log(const std::vector<EpochLog>& epochs, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "epoch,sim_ab,sim_ba,reg,total\n";
  char line[256];
  for (const auto& e : epochs) {
    std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.mean.sim_ab,
                  e.mean.sim_ba, e.mean.reg, e.mean.total);
    out << line;
  }
  if (!out) throw Error("io", "write failed for " + path.string());
}

namespace {

struct StepOutcome {
  LossBreakdown loss;
  bool finite = true;
};

// One symmetric step on a single pair: both directions, total loss, Adam.
StepOutcome train_step(RegistrationModel& model, const Tensor& a, const Tensor& b,
                       const LossConfig& loss_cfg, const ad::AdamConfig& adam) {
  StepOutcome out;
  ad::Tape tape;
  const auto ia = tape.constant(a);
  const auto ib = tape.constant(b);
  const auto phi_ab = predict_full(tape, model, ia, ib);
  const auto phi_ba = predict_full(tape, model, ib, ia);
  const auto total = record_total_loss(tape, ia, ib, phi_ab, phi_ba, loss_cfg, out.loss);
  if (!std::isfinite(out.loss.total)) {
    out.finite = false;
    model.params().zero_grad();
    return out;
  }
  tape.backward(total);
  try {
    ad::adam_step(model.params(), adam);
  } catch (const Error& e) {
    if (e.code() != "nonfinite-grad") throw;
    out.finite = false;
  }
  return out;
}

class Loop {
 public:
  Loop(RegistrationModel& model, const std::vector<DatasetSpec>& datasets, const TrainConfig& cfg,
       const EpochCallback& on_epoch)
      : model_(model), datasets_(datasets), cfg_(cfg), on_epoch_(on_epoch), rng_(cfg.seed) {
    if (cfg.lr <= 0.0) throw Error("config", "learning rate must be positive");
    cfg.loss.validate();
    if (model.config().canonical_side != cfg.canonical_side) {
      throw Error("config", "model canonical side differs from the training config");
    }
    for (const auto& ds : datasets) {
      ds.validate();
      std::vector<Tensor> prepared;
      for (const auto& v : prepare_dataset(ds, cfg.canonical_side)) prepared.push_back(to_tensor(v));
      inputs_.push_back(std::move(prepared));
    }
    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);
  }

  void run(TrainingPhase phase, int epochs, bool last_block) {
    for (int e = 0; e < epochs; ++e) {
      EpochLog log = run_epoch(phase);
      result_.epochs.push_back(log);
      if (on_epoch_) on_epoch_(log);
      if (!cfg_.out_dir.empty()) write_metrics_log(result_.epochs, cfg_.out_dir / "metrics.csv");
      if (log.skipped * 10 >= log.pairs) {
        throw Error("divergence", "epoch " + std::to_string(log.epoch) + ": " +
                                      std::to_string(log.skipped) + " of " +
                                      std::to_string(log.pairs) + " pairs gave a non-finite loss");
      }
      const bool final_epoch = last_block && e + 1 == epochs;
      if (cfg_.checkpoint_every > 0 && log.epoch % cfg_.checkpoint_every == 0 && !final_epoch) {
        checkpoint(phase);
      }
    }
  }

  void checkpoint(TrainingPhase phase) {
    if (cfg_.out_dir.empty()) return;
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_epoch%04d.json", epoch_);
    const auto path = cfg_.out_dir / name;
    io::write_checkpoint(model_, phase, epoch_, path);
    result_.checkpoints.push_back(path);
  }

  TrainResult take() { return std::move(result_); }

 private:
  EpochLog run_epoch(TrainingPhase phase) {
    const ad::AdamConfig adam{.lr = cfg_.lr};
    const auto pairs = sample_epoch(datasets_, cfg_.pairs_per_dataset, rng_);
    EpochLog log;
    log.epoch = ++epoch_;
    log.phase = phase;
    log.pairs = static_cast<int>(pairs.size());
    for (const auto& p : pairs) {
      const auto& set = inputs_[p.dataset];
      const StepOutcome s = train_step(model_, set[p.moving], set[p.target], cfg_.loss, adam);
      if (!s.finite) {
        ++log.skipped;
        continue;
      }
      log.mean.sim_ab += s.loss.sim_ab;
      log.mean.sim_ba += s.loss.sim_ba;
      log.mean.reg += s.loss.reg;
      log.mean.total += s.loss.total;
    }
    const int used = log.pairs - log.skipped;
    if (used > 0) {
      log.mean.sim_ab /= used;
      log.mean.sim_ba /= used;
      log.mean.reg /= used;
      log.mean.total /= used;
    }
    return log;
  }

  RegistrationModel& model_;
  const std::vector<DatasetSpec>& datasets_;
  const TrainConfig& cfg_;
  const EpochCallback& on_epoch_;
  std::mt19937_64 rng_;
  std::vector<std::vector<Tensor>> inputs_;
  TrainResult result_;
  int epoch_ = 0;
};

}  // namespace

TrainResult train(RegistrationModel& model, const std::vector<DatasetSpec>& datasets,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (cfg.epochs_phase1 < 0 || cfg.epochs_phase2 < 0) throw Error("config", "epoch counts must be >= 0");
  Loop loop(model, datasets, cfg, on_epoch);
  TrainingPhase phase = TrainingPhase::step1;
  if (cfg.epochs_phase1 > 0) {
    model.set_phase(phase);
    loop.run(phase, cfg.epochs_phase1, cfg.epochs_phase2 == 0);
  }
  if (cfg.epochs_phase2 > 0) {
    phase = TrainingPhase::step2;
    model.set_phase(phase, cfg.unfreeze_step1);
    loop.run(phase, cfg.epochs_phase2, true);
  }
  loop.checkpoint(phase);
  return loop.take();
}

TrainResult finetune(RegistrationModel& model, const std::vector<DatasetSpec>& datasets,
                     const TrainConfig& cfg, int epochs, const EpochCallback& on_epoch) {
  if (epochs < 0) throw Error("config", "epoch count must be >= 0");
  Loop loop(model, datasets, cfg, on_epoch);
  model.set_phase(TrainingPhase::finetune);
  loop.run(TrainingPhase::finetune, epochs, true);
  loop.checkpoint(TrainingPhase::finetune);
  return loop.take();
}

InstanceResult instance_optimize(const RegistrationModel& model, const Volume& ia, const Volume& ib,
                                 const InstanceConfig& cfg) {
  if (cfg.iterations < 0) throw Error("config", "iterations must be >= 0");
  if (cfg.lr <= 0.0) throw Error("config", "learning rate must be positive");
  RegistrationModel local = model;
  local.params().set_trainable("", true);
  if (!local.config().step2_enabled) local.params().set_trainable(kRefinePrefix, false);

  const Tensor a = to_tensor(ia), b = to_tensor(ib);
  const ad::AdamConfig adam{.lr = cfg.lr};
  InstanceResult out;
  std::optional<std::pair<TransformMap, TransformMap>> best;
  double best_total = 0.0;
  for (int it = 0;; ++it) {
    ad::Tape tape;
    const auto va = tape.constant(a), vb = tape.constant(b);
    const auto phi_ab = predict_full(tape, local, va, vb);
    const auto phi_ba = predict_full(tape, local, vb, va);
    LossBreakdown loss;
    const auto total = record_total_loss(tape, va, vb, phi_ab, phi_ba, cfg.loss, loss);
    if (!std::isfinite(loss.total)) {
      out.status = InstanceStatus::nonfinite;
      break;
    }
    out.trace.push_back(loss);
    if (!best || loss.total < best_total) {
      best.emplace(TransformMap(phi_ab.value()), TransformMap(phi_ba.value()));
      best_total = loss.total;
    }
    if (it == cfg.iterations) {
      out.phi_ab = TransformMap(phi_ab.value());
      out.phi_ba = TransformMap(phi_ba.value());
      return out;
    }
    tape.backward(total);
    try {
      ad::adam_step(local.params(), adam);
    } catch (const Error& e) {
      if (e.code() != "nonfinite-grad") throw;
      out.status = InstanceStatus::nonfinite;
      break;
    }
    ++out.iterations_run;
  }
  if (!best) throw Error("divergence", "instance optimization produced no finite loss");
  out.phi_ab = std::move(best->first);
  out.phi_ba = std::move(best->second);
  return out;
}

}  // namespace iconforge
