// Command-line front end: register, train, finetune, evaluate, preprocess, warp.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "iconforge/error.hpp"
#include "iconforge/eval.hpp"
#include "iconforge/io.hpp"
#include "iconforge/network.hpp"
#include "iconforge/preprocess.hpp"
#include "iconforge/trainer.hpp"

namespace fs = std::filesystem;
using namespace iconforge;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitIo = 2;
constexpr int kExitDivergence = 3;

int exit_code_for(const std::string& code) {
  if (code == "usage" || code == "config") return kExitUsage;
  if (code == "divergence") return kExitDivergence;
  return kExitIo;
}

void report_error(const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << "\n";
}

struct PairFlags {
  std::string landmarks_fixed, landmarks_moving, labels_fixed, labels_moving;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--landmarks-fixed", landmarks_fixed, "CSV landmarks on the fixed image");
    cmd->add_option("--landmarks-moving", landmarks_moving, "CSV landmarks on the moving image");
    cmd->add_option("--labels-fixed", labels_fixed, "label map of the fixed image");
    cmd->add_option("--labels-moving", labels_moving, "label map of the moving image");
  }

  EvalInputs load() const {
    if (landmarks_fixed.empty() != landmarks_moving.empty()) {
      throw Error("usage", "--landmarks-fixed and --landmarks-moving go together");
    }
    if (labels_fixed.empty() != labels_moving.empty()) {
      throw Error("usage", "--labels-fixed and --labels-moving go together");
    }
    EvalInputs in;
    if (!landmarks_fixed.empty()) {
      in.landmarks_fixed = io::read_landmarks(landmarks_fixed);
      in.landmarks_moving = io::read_landmarks(landmarks_moving);
    }
    if (!labels_fixed.empty()) {
      in.labels_fixed = io::read_labels(labels_fixed);
      in.labels_moving = io::read_labels(labels_moving);
    }
    return in;
  }
};

void write_report(const MetricsReport& report, const std::string& out) {
  const std::string line = report.to_json();
  std::cout << line << "\n";
  if (!out.empty()) {
    std::ofstream f(out);
    f << line << "\n";
    if (!f) throw Error("io", "write failed for " + out);
  }
}

// Mid-axial slices of fixed | warped | difference, side by side.
void write_snapshot(const Volume& fixed, const Volume& warped, const fs::path& path) {
  const auto& d = fixed.dims();
  const int k = d[2] / 2;
  const int w = d[0], h = d[1];
  std::vector<float> pixels(static_cast<std::size_t>(3 * w) * h);
  float lo = std::min(fixed.min(), warped.min()), hi = std::max(fixed.max(), warped.max());
  const float span = hi > lo ? hi - lo : 1.0f;
  for (int j = 0; j < h; ++j)
    for (int i = 0; i < w; ++i) {
      const float f = fixed.at(i, j, k), m = warped.at(i, j, k);
      const std::size_t row = static_cast<std::size_t>(h - 1 - j) * 3 * w;
      pixels[row + i] = (f - lo) / span;
      pixels[row + w + i] = (m - lo) / span;
      pixels[row + 2 * w + i] = 0.5f + 0.5f * (m - f) / span;
    }
  io::write_pgm(pixels, 3 * w, h, 0.0f, 1.0f, path);
}

struct RegisterArgs {
  std::string fixed, moving, out_map, out_warped, checkpoint, snapshot, out_report;
  std::string modality_fixed = "none", modality_moving = "none";
  int io = 0;
  double io_lr = 1e-5;
  std::optional<int> canonical_side;
  PairFlags pair;
};

int run_register(const RegisterArgs& a) {
  const Volume fixed = io::read_volume(a.fixed);
  const Volume moving = io::read_volume(a.moving);
  const EvalInputs inputs = a.pair.load();

  std::optional<RegistrationModel> model;
  if (!a.checkpoint.empty()) {
    model.emplace(io::load_model(a.checkpoint));
    if (a.canonical_side && *a.canonical_side != model->config().canonical_side) {
      throw Error("usage", "--canonical-side differs from the checkpoint's canonical side " +
                               std::to_string(model->config().canonical_side));
    }
  } else {
    ModelConfig cfg;
    cfg.canonical_side = a.canonical_side.value_or(kDefaultCanonicalSide);
    model.emplace(cfg);
  }

  PairOptions options;
  options.modality_fixed = parse_modality(a.modality_fixed);
  options.modality_moving = parse_modality(a.modality_moving);
  options.io_iterations = a.io;
  options.io_lr = a.io_lr;
  const EvalResult result = evaluate_pair(*model, fixed, moving, inputs, options);

  io::write_transform(result.phi, a.out_map);
  if (!a.out_warped.empty() || !a.snapshot.empty()) {
    const Volume warped = warp(moving, result.phi, fixed.grid());
    if (!a.out_warped.empty()) io::write_volume(warped, a.out_warped);
    if (!a.snapshot.empty()) write_snapshot(fixed, warped, a.snapshot);
  }
  write_report(result.report, a.out_report);
  return 0;
}

struct TrainArgs {
  std::string manifest, out_dir, checkpoint;
  std::optional<int> pairs_per_dataset, epochs_phase1, epochs_phase2, canonical_side, epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr, lambda;
  int base_channels = UNetConfig{}.base_channels;
  int checkpoint_every = 0;
  bool unfreeze_step1 = false;
};

// flags > manifest > built-in defaults
TrainConfig resolve_config(const TrainArgs& a, const io::ManifestSettings& s) {
  TrainConfig cfg;
  cfg.pairs_per_dataset = a.pairs_per_dataset.value_or(s.pairs_per_dataset.value_or(cfg.pairs_per_dataset));
  cfg.epochs_phase1 = a.epochs_phase1.value_or(s.epochs_phase1.value_or(cfg.epochs_phase1));
  cfg.epochs_phase2 = a.epochs_phase2.value_or(s.epochs_phase2.value_or(cfg.epochs_phase2));
  cfg.lr = a.lr.value_or(s.lr.value_or(cfg.lr));
  cfg.loss.lambda = a.lambda.value_or(s.lambda.value_or(cfg.loss.lambda));
  cfg.seed = a.seed.value_or(s.seed.value_or(cfg.seed));
  cfg.canonical_side = a.canonical_side.value_or(s.canonical_side.value_or(cfg.canonical_side));
  cfg.checkpoint_every = a.checkpoint_every;
  cfg.unfreeze_step1 = a.unfreeze_step1;
  cfg.out_dir = a.out_dir;
  return cfg;
}

void log_epoch(const EpochLog& e) {
  std::fprintf(stderr, "epoch %d  total %.6f  sim_ab %.6f  sim_ba %.6f  reg %.6f  skipped %d\n",
               e.epoch, e.mean.total, e.mean.sim_ab, e.mean.sim_ba, e.mean.reg, e.skipped);
}

int run_train(const TrainArgs& a) {
  const io::Manifest manifest = io::read_manifest(a.manifest);
  const TrainConfig cfg = resolve_config(a, manifest.settings);
  const auto datasets = load_datasets(manifest);
  ModelConfig mc;
  mc.canonical_side = cfg.canonical_side;
  mc.unet.base_channels = a.base_channels;
  mc.init_seed = cfg.seed;
  RegistrationModel model(mc);
  train(model, datasets, cfg, log_epoch);
  return 0;
}

int run_finetune(const TrainArgs& a) {
  const io::Manifest manifest = io::read_manifest(a.manifest);
  RegistrationModel model = io::load_model(a.checkpoint);
  TrainArgs b = a;
  b.canonical_side = model.config().canonical_side;
  const TrainConfig cfg = resolve_config(b, manifest.settings);
  finetune(model, load_datasets(manifest), cfg, a.epochs.value_or(0), log_epoch);
  return 0;
}

struct EvaluateArgs {
  std::string map, fixed, moving, out;
  PairFlags pair;
};

int run_evaluate(const EvaluateArgs& a) {
  const TransformMap phi = io::read_transform(a.map);
  const Volume fixed = io::read_volume(a.fixed);
  const Volume moving = io::read_volume(a.moving);
  write_report(evaluate_map(phi, fixed, moving, a.pair.load()).report, a.out);
  return 0;
}

struct PreprocessArgs {
  std::string in, out, modality;
  std::optional<int> canonical_side;
};

int run_preprocess(const PreprocessArgs& a) {
  const Volume v = io::read_volume(a.in);
  const Modality m = parse_modality(a.modality);
  io::write_volume(a.canonical_side ? prepare_input(v, m, *a.canonical_side) : normalize(v, m), a.out);
  return 0;
}

struct WarpArgs {
  std::string in, map, out;
  bool labels = false;
};

int run_warp(const WarpArgs& a) {
  const TransformMap phi = io::read_transform(a.map);
  if (a.labels) {
    const LabelVolume lv = io::read_labels(a.in);
    const LabelVolume out = warp_labels(lv, phi);
    std::vector<float> values(out.labels().begin(), out.labels().end());
    io::write_volume(Volume(out.grid(), std::move(values)), a.out);
  } else {
    io::write_volume(warp(io::read_volume(a.in), phi), a.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iconforge: deformable registration with inverse-consistency training"};
  app.require_subcommand(1);

  RegisterArgs reg;
  auto* r = app.add_subcommand("register", "register a moving image to a fixed image");
  r->add_option("--fixed", reg.fixed)->required();
  r->add_option("--moving", reg.moving)->required();
  r->add_option("--out-map", reg.out_map)->required();
  r->add_option("--out-warped", reg.out_warped);
  r->add_option("--out-report", reg.out_report, "also write the metrics JSON here");
  r->add_option("--checkpoint", reg.checkpoint, "trained model; identity model when omitted");
  r->add_option("--io", reg.io, "instance-optimization iterations")->check(CLI::NonNegativeNumber);
  r->add_option("--io-lr", reg.io_lr, "instance-optimization learning rate")->check(CLI::PositiveNumber);
  r->add_option("--modality-fixed", reg.modality_fixed)->check(CLI::IsMember({"ct", "mri", "none"}));
  r->add_option("--modality-moving", reg.modality_moving)->check(CLI::IsMember({"ct", "mri", "none"}));
  r->add_option("--canonical-side", reg.canonical_side)->check(CLI::Range(4, 4096));
  r->add_option("--snapshot", reg.snapshot, "PGM of mid-axial fixed | warped | difference");
  reg.pair.add_to(r);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on the datasets of a manifest");
  t->add_option("--manifest", tr.manifest)->required();
  t->add_option("--out-dir", tr.out_dir)->required();
  t->add_option("--pairs-per-dataset", tr.pairs_per_dataset)->check(CLI::PositiveNumber);
  t->add_option("--epochs-phase1", tr.epochs_phase1)->check(CLI::NonNegativeNumber);
  t->add_option("--epochs-phase2", tr.epochs_phase2)->check(CLI::NonNegativeNumber);
  t->add_option("--seed", tr.seed);
  t->add_option("--lr", tr.lr)->check(CLI::PositiveNumber);
  t->add_option("--lambda", tr.lambda)->check(CLI::NonNegativeNumber);
  t->add_option("--canonical-side", tr.canonical_side)->check(CLI::Range(4, 4096));
  t->add_option("--base-channels", tr.base_channels)->check(CLI::PositiveNumber);
  t->add_option("--checkpoint-every", tr.checkpoint_every)->check(CLI::NonNegativeNumber);
  t->add_flag("--unfreeze-step1", tr.unfreeze_step1, "keep step-1 nets trainable in phase 2");

  TrainArgs ft;
  auto* f = app.add_subcommand("finetune", "continue training a checkpoint on new datasets");
  f->add_option("--checkpoint", ft.checkpoint)->required();
  f->add_option("--manifest", ft.manifest)->required();
  f->add_option("--epochs", ft.epochs)->required()->check(CLI::NonNegativeNumber);
  f->add_option("--out-dir", ft.out_dir)->required();
  f->add_option("--pairs-per-dataset", ft.pairs_per_dataset)->check(CLI::PositiveNumber);
  f->add_option("--seed", ft.seed);
  f->add_option("--lr", ft.lr)->check(CLI::PositiveNumber);
  f->add_option("--lambda", ft.lambda)->check(CLI::NonNegativeNumber);
  f->add_option("--checkpoint-every", ft.checkpoint_every)->check(CLI::NonNegativeNumber);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "metrics of a saved map");
  e->add_option("--map", ev.map)->required();
  e->add_option("--fixed", ev.fixed)->required();
  e->add_option("--moving", ev.moving)->required();
  e->add_option("--out", ev.out)->required();
  ev.pair.add_to(e);

  PreprocessArgs pp;
  auto* p = app.add_subcommand("preprocess", "intensity normalization and canonical resize");
  p->add_option("--in", pp.in)->required();
  p->add_option("--out", pp.out)->required();
  p->add_option("--modality", pp.modality)->required()->check(CLI::IsMember({"ct", "mri", "none"}));
  p->add_option("--canonical-side", pp.canonical_side)->check(CLI::Range(4, 4096));

  WarpArgs wp;
  auto* w = app.add_subcommand("warp", "apply a saved map to a volume");
  w->add_option("--in", wp.in)->required();
  w->add_option("--map", wp.map)->required();
  w->add_option("--out", wp.out)->required();
  w->add_flag("--labels", wp.labels, "nearest-neighbour lookup for label maps");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    report_error("usage", err.what());
    return kExitUsage;
  }

  try {
    if (r->parsed()) return run_register(reg);
    if (t->parsed()) return run_train(tr);
    if (f->parsed()) return run_finetune(ft);
    if (e->parsed()) return run_evaluate(ev);
    if (p->parsed()) return run_preprocess(pp);
    if (w->parsed()) return run_warp(wp);
  } catch (const Error& err) {
    report_error(err.code(), err.what());
    return exit_code_for(err.code());
  } catch (const std::exception& err) {
    report_error("io", err.what());
    return kExitIo;
  }
  return kExitUsage;
}
