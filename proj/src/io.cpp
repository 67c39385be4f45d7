#include "iconforge/io.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "iconforge/error.hpp"

namespace iconforge::io {
namespace {

using nlohmann::json;

fs::path sidecar(const fs::path& path) { return fs::path(path.string() + ".json"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("format", path.string() + ": " + e.what());
  }
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("io", "write failed for " + path.string());
}

std::vector<float> read_floats(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != expected * sizeof(float)) {
    throw Error("format", path.string() + ": expected " + std::to_string(expected * sizeof(float)) +
                              " bytes, found " + std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<float> v(expected);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!in) throw Error("io", "read failed for " + path.string());
  return v;
}

void write_floats(std::span<const float> v, const fs::path& path) {
  static_assert(std::endian::native == std::endian::little, "raw formats are little-endian");
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
  if (!out) throw Error("io", "write failed for " + path.string());
}

Dims3 dims_from(const json& j, const fs::path& where) {
  if (!j.is_array() || j.size() != 3) throw Error("format", where.string() + ": dims must have 3 entries");
  Dims3 d{};
  for (int a = 0; a < 3; ++a) d[a] = j.at(a).get<int>();
  return d;
}

Vec3 vec_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

bool is_nifti_path(const fs::path& path) {
  const std::string s = path.filename().string();
  auto ends = [&](const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends(".nii") || ends(".nii.gz");
}

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const fs::path& path, int line) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw Error("format", path.string() + ":" + std::to_string(line) + ": bad coordinate '" +
                              std::string(s) + "'");
  }
  return v;
}

}  // namespace

// ---- generic volume dispatch -------------------------------------------------

Volume read_volume(const fs::path& path) {
  return is_nifti_path(path) ? read_nifti(path) : read_raw_volume(path);
}

void write_volume(const Volume& v, const fs::path& path) {
  if (is_nifti_path(path)) {
    write_nifti(v, path);
  } else {
    write_raw_volume(v, path);
  }
}

LabelVolume read_labels(const fs::path& path) {
  if (is_nifti_path(path)) return read_nifti_labels(path);
  const Volume v = read_raw_volume(path);
  std::vector<std::int32_t> labels(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0.0f || v[i] != std::floor(v[i])) {
      throw Error("label", path.string() + ": voxel value is not a non-negative integer label");
    }
    labels[i] = static_cast<std::int32_t>(v[i]);
  }
  return LabelVolume(v.grid(), std::move(labels));
}

// ---- raw volume ---------------------------------------------------------------

void write_raw_volume(const Volume& v, const fs::path& path) {
  const auto& g = v.grid();
  json meta = {{"dims", g.dims},
               {"spacing", g.spacing},
               {"origin", g.origin},
               {"dtype", "float32"},
               {"byte_order", "little"}};
  write_floats(v.values(), path);
  write_text(meta.dump(2) + "\n", sidecar(path));
}

Volume read_raw_volume(const fs::path& path) {
  const json meta = read_json(sidecar(path));
  if (meta.value("dtype", "") != "float32") throw Error("format", path.string() + ": dtype must be float32");
  Grid g;
  g.dims = dims_from(meta.at("dims"), path);
  g.spacing = vec_from(meta.at("spacing"));
  g.origin = vec_from(meta.at("origin"));
  g.validate();
  return Volume(g, read_floats(path, g.size()));
}

// ---- transform ------------------------------------------------------------------

void write_transform(const TransformMap& phi, const fs::path& path) {
  const std::size_t n = phi.nodes();
  std::vector<float> interleaved(3 * n);
  for (int c = 0; c < 3; ++c) {
    const auto comp = phi.component(c);
    for (std::size_t v = 0; v < n; ++v) interleaved[3 * v + c] = comp[v];
  }
  write_floats(interleaved, path);
  const json meta = {{"dims", phi.dims()}, {"convention", kTransformConvention}};
  write_text(meta.dump() + "\n", sidecar(path));
}

TransformMap read_transform(const fs::path& path) {
  const json meta = read_json(sidecar(path));
  if (meta.value("convention", "") != kTransformConvention) {
    throw Error("format", path.string() + ": unknown transform convention");
  }
  const Dims3 dims = dims_from(meta.at("dims"), path);
  for (int d : dims) {
    if (d < 2) throw Error("shape", path.string() + ": transform dims must be >= 2");
  }
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  const auto interleaved = read_floats(path, 3 * n);
  std::vector<float> planar(3 * n);
  for (std::size_t v = 0; v < n; ++v)
    for (int c = 0; c < 3; ++c) planar[c * n + v] = interleaved[3 * v + c];
  return TransformMap(dims, std::move(planar));
}

// ---- landmarks -----------------------------------------------------------------

LandmarkSet read_landmarks(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  LandmarkSet points;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (number == 1 && line.find_first_of("xX") != std::string::npos &&
        line.find_first_of("0123456789") == std::string::npos) {
      continue;  // header
    }
    std::vector<std::string_view> cells;
    std::string_view rest = line;
    for (;;) {
      const auto comma = rest.find(',');
      cells.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (cells.size() != 3) {
      throw Error("format", path.string() + ":" + std::to_string(number) + ": expected 3 columns");
    }
    points.push_back({parse_double(cells[0], path, number), parse_double(cells[1], path, number),
                      parse_double(cells[2], path, number)});
  }
  return points;
}

void write_landmarks(const LandmarkSet& points, const fs::path& path) {
  std::string text = "x_mm,y_mm,z_mm\n";
  for (const auto& p : points) {
    text += format_double(p[0]) + "," + format_double(p[1]) + "," + format_double(p[2]) + "\n";
  }
  write_text(text, path);
}

// ---- checkpoint ---------------------------------------------------------------

std::string to_string(TrainingPhase phase) {
  switch (phase) {
    case TrainingPhase::step1: return "step1";
    case TrainingPhase::step2: return "step2";
    case TrainingPhase::finetune: return "finetune";
  }
  return "step1";
}

TrainingPhase parse_phase(const std::string& name) {
  if (name == "step1") return TrainingPhase::step1;
  if (name == "step2") return TrainingPhase::step2;
  if (name == "finetune") return TrainingPhase::finetune;
  throw Error("format", "unknown training phase '" + name + "'");
}

void write_checkpoint(const RegistrationModel& model, TrainingPhase phase, int epoch,
                      const fs::path& path) {
  const auto& cfg = model.config();
  fs::path blob = path;
  blob.replace_extension(".bin");
  json names = json::array(), shapes = json::array();
  std::vector<float> flat;
  flat.reserve(model.params().total_size());
  for (const auto& p : model.params().all()) {
    names.push_back(p.name);
    shapes.push_back(p.shape);
    flat.insert(flat.end(), p.value.begin(), p.value.end());
  }
  const json manifest = {
      {"format", "iconforge-checkpoint"},
      {"version", 1},
      {"dtype", "float32"},
      {"byte_order", "little"},
      {"training_phase", to_string(phase)},
      {"epoch", epoch},
      {"blob", blob.filename().string()},
      {"model",
       {{"depth", cfg.unet.depth},
        {"base_channels", cfg.unet.base_channels},
        {"in_channels", cfg.unet.in_channels},
        {"out_channels", cfg.unet.out_channels},
        {"canonical_side", cfg.canonical_side},
        {"gain_voxels", cfg.gain_voxels},
        {"step2_enabled", cfg.step2_enabled},
        {"init_seed", cfg.init_seed}}},
      {"names", names},
      {"shapes", shapes},
  };
  write_floats(flat, blob);
  write_text(manifest.dump(2) + "\n", path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  const json m = read_json(path);
  if (m.value("format", "") != "iconforge-checkpoint" || m.value("dtype", "") != "float32") {
    throw Error("format", path.string() + ": not a float32 iconforge checkpoint");
  }
  Checkpoint ck;
  const json& mc = m.at("model");
  ck.config.unet.depth = mc.at("depth").get<int>();
  ck.config.unet.base_channels = mc.at("base_channels").get<int>();
  ck.config.unet.in_channels = mc.at("in_channels").get<int>();
  ck.config.unet.out_channels = mc.at("out_channels").get<int>();
  ck.config.canonical_side = mc.at("canonical_side").get<int>();
  ck.config.gain_voxels = mc.at("gain_voxels").get<double>();
  ck.config.step2_enabled = mc.at("step2_enabled").get<bool>();
  ck.config.init_seed = mc.at("init_seed").get<std::uint64_t>();
  ck.phase = parse_phase(m.at("training_phase").get<std::string>());
  ck.epoch = m.at("epoch").get<int>();

  const auto& names = m.at("names");
  const auto& shapes = m.at("shapes");
  if (names.size() != shapes.size()) throw Error("format", path.string() + ": names/shapes differ in length");
  std::vector<std::vector<int>> shape_list;
  std::size_t total = 0;
  for (const auto& s : shapes) {
    auto shape = s.get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    total += n;
    shape_list.push_back(std::move(shape));
  }
  const auto flat = read_floats(path.parent_path() / m.at("blob").get<std::string>(), total);
  std::size_t at = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    std::size_t n = 1;
    for (int d : shape_list[i]) n *= static_cast<std::size_t>(d);
    ck.params.add(names[i].get<std::string>(), shape_list[i],
                  std::vector<float>(flat.begin() + at, flat.begin() + at + n));
    at += n;
  }
  return ck;
}

RegistrationModel load_model(const fs::path& path) {
  Checkpoint ck = read_checkpoint(path);
  return RegistrationModel(ck.config, std::move(ck.params));
}

// ---- dataset manifest ---------------------------------------------------------

namespace {

fs::path resolve_existing(const fs::path& base, const std::string& entry) {
  fs::path p(entry);
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) throw Error("missing-file", "referenced file does not exist: " + p.string());
  return p;
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
  const json m = read_json(path);
  const fs::path base = path.parent_path();
  Manifest out;
  try {
    for (const auto& d : m.at("datasets")) {
      DatasetEntry e;
      e.name = d.at("name").get<std::string>();
      e.mode = d.value("mode", "inter");
      e.preprocessing = d.value("preprocessing", "none");
      if (e.mode != "intra" && e.mode != "inter") {
        throw Error("manifest", e.name + ": mode must be intra or inter");
      }
      parse_modality(e.preprocessing);
      for (const auto& v : d.at("volumes")) e.volumes.push_back(resolve_existing(base, v.get<std::string>()));
      if (d.contains("pairs")) {
        for (const auto& pr : d.at("pairs")) e.pairs.emplace_back(pr.at(0).get<int>(), pr.at(1).get<int>());
      }
      for (const char* key : {"labels", "landmarks"}) {
        if (!d.contains(key)) continue;
        auto& dst = std::string(key) == "labels" ? e.labels : e.landmarks;
        for (const auto& v : d.at(key)) dst.push_back(resolve_existing(base, v.get<std::string>()));
        if (dst.size() != e.volumes.size()) {
          throw Error("manifest", e.name + ": " + key + " must list one file per volume");
        }
      }
      out.datasets.push_back(std::move(e));
    }
    if (m.contains("settings")) {
      const auto& s = m.at("settings");
      auto& st = out.settings;
      if (s.contains("lambda")) st.lambda = s.at("lambda").get<double>();
      if (s.contains("lr")) st.lr = s.at("lr").get<double>();
      if (s.contains("canonical_side")) st.canonical_side = s.at("canonical_side").get<int>();
      if (s.contains("pairs_per_dataset")) st.pairs_per_dataset = s.at("pairs_per_dataset").get<int>();
      if (s.contains("epochs_phase1")) st.epochs_phase1 = s.at("epochs_phase1").get<int>();
      if (s.contains("epochs_phase2")) st.epochs_phase2 = s.at("epochs_phase2").get<int>();
      if (s.contains("seed")) st.seed = s.at("seed").get<std::uint64_t>();
    }
  } catch (const json::exception& e) {
    throw Error("manifest", path.string() + ": " + e.what());
  }
  return out;
}

void write_manifest(const Manifest& m, const fs::path& path) {
  json datasets = json::array();
  auto strings = [](const std::vector<fs::path>& ps) {
    json a = json::array();
    for (const auto& p : ps) a.push_back(p.string());
    return a;
  };
  for (const auto& e : m.datasets) {
    json d = {{"name", e.name},
              {"mode", e.mode},
              {"preprocessing", e.preprocessing},
              {"volumes", strings(e.volumes)}};
    if (!e.pairs.empty()) {
      json pairs = json::array();
      for (const auto& [a, b] : e.pairs) pairs.push_back({a, b});
      d["pairs"] = pairs;
    }
    if (!e.labels.empty()) d["labels"] = strings(e.labels);
    if (!e.landmarks.empty()) d["landmarks"] = strings(e.landmarks);
    datasets.push_back(d);
  }
  json out = {{"datasets", datasets}};
  json settings = json::object();
  const auto& s = m.settings;
  if (s.lambda) settings["lambda"] = *s.lambda;
  if (s.lr) settings["lr"] = *s.lr;
  if (s.canonical_side) settings["canonical_side"] = *s.canonical_side;
  if (s.pairs_per_dataset) settings["pairs_per_dataset"] = *s.pairs_per_dataset;
  if (s.epochs_phase1) settings["epochs_phase1"] = *s.epochs_phase1;
  if (s.epochs_phase2) settings["epochs_phase2"] = *s.epochs_phase2;
  if (s.seed) settings["seed"] = *s.seed;
  if (!settings.empty()) out["settings"] = settings;
  write_text(out.dump(2) + "\n", path);
}

}  // namespace iconforge::io
