#include "babymamba/run.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include "babymamba/errors.hpp"

namespace bm {

namespace fs = std::filesystem;

// ---- files ------------------------------------------------------------------

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed while writing " + path.string());
}

namespace {

nlohmann::json parse_json_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace

// ---- configuration ----------------------------------------------------------

void RunConfig::merge_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "model" && key != "train" && key != "manifest" && key != "seq_len" && key != "fold" && key != "out_dir") {
      throw ConfigError("run config: unknown key '" + key + "'");
    }
  }
  try {
    if (j.contains("model")) {
      const auto& mj = j.at("model");
      nlohmann::json base = model.to_json();
      if (mj.contains("variant") && parse_variant(mj.at("variant").get<std::string>()) != model.variant) {
        const auto v = parse_variant(mj.at("variant").get<std::string>());
        ModelConfig fresh = v == Variant::kCI ? ModelConfig::ci_default(model.num_channels, model.num_classes, model.seq_len)
                                              : ModelConfig::crossover_default(model.num_channels, model.num_classes,
                                                                               model.seq_len);
        base = fresh.to_json();
      }
      if (model.dt_rank == 0) base.erase("dt_rank");
      if (model.d_attn == 0) base.erase("d_attn");
      base.merge_patch(mj);
      model = ModelConfig::from_json(base);
    }
    if (j.contains("train")) {
      nlohmann::json base = train.to_json();
      base.merge_patch(j.at("train"));
      train = TrainConfig::from_json(base);
    }
    if (j.contains("manifest")) manifest = j.at("manifest").get<std::string>();
    if (j.contains("seq_len")) {
      if (j.at("seq_len").is_null()) {
        seq_len.reset();
      } else {
        seq_len = j.at("seq_len").get<std::size_t>();
      }
    }
    if (j.contains("fold")) fold = j.at("fold").get<std::size_t>();
    if (j.contains("out_dir")) out_dir = j.at("out_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j{{"model", model.to_json()},
                   {"train", train.to_json()},
                   {"manifest", manifest.string()},
                   {"fold", fold},
                   {"out_dir", out_dir.string()}};
  j["seq_len"] = seq_len ? nlohmann::json(*seq_len) : nlohmann::json(nullptr);
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig c;
  c.merge_json(j);
  return c;
}

RunConfig load_run_config(const fs::path& path) { return RunConfig::from_json(parse_json_file(path)); }

DatasetManifest effective_manifest(const DatasetManifest& m, std::optional<std::size_t> seq_len) {
  if (!seq_len || *seq_len == m.seq_len) return m;
  if (*seq_len == 0) throw ConfigError("seq_len must be >= 1");
  DatasetManifest out = m;
  out.seq_len = *seq_len;
  out.stride = std::max<std::size_t>(1, *seq_len * m.stride / m.seq_len);
  return out;
}

ModelConfig shaped_model(ModelConfig cfg, const DatasetManifest& m) {
  cfg.num_channels = m.channels;
  cfg.num_classes = m.num_classes;
  cfg.seq_len = m.seq_len;
  cfg.validate();
  return cfg;
}

// ---- train --------------------------------------------------------------------

namespace {

std::vector<Recording> load_recordings(const DatasetManifest& m, const fs::path& manifest_path) {
  if (m.files.empty()) throw DataError("manifest " + manifest_path.string() + " lists no data files");
  std::vector<Recording> recs;
  for (const auto& f : m.files) {
    fs::path p(f);
    if (p.is_relative()) p = manifest_path.parent_path() / p;
    auto part = load_csv(p, m.fs);
    recs.insert(recs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return recs;
}

// Copies the dataset into run_dir and returns the copied manifest's path.
fs::path snapshot_dataset(const DatasetManifest& m, const fs::path& manifest_path, const fs::path& run_dir) {
  fs::create_directories(run_dir / "data");
  DatasetManifest copy = m;
  copy.files.clear();
  for (std::size_t i = 0; i < m.files.size(); ++i) {
    fs::path src(m.files[i]);
    if (src.is_relative()) src = manifest_path.parent_path() / src;
    const std::string name = std::to_string(i) + "_" + src.filename().string();
    fs::copy_file(src, run_dir / "data" / name, fs::copy_options::overwrite_existing);
    copy.files.push_back("data/" + name);
  }
  const fs::path out = run_dir / "manifest.json";
  save_manifest(copy, out);
  return out;
}

nlohmann::json seed_json(const SeedResult& r) {
  return {{"seed", r.seed},
          {"macro_f1", r.macro_f1},
          {"per_class_f1", r.per_class_f1},
          {"confusion_matrix", r.confusion.to_json()},
          {"best_val_f1", r.best_val_f1},
          {"best_epoch", r.best_epoch}};
}

}  // namespace

TrainOutcome run_train(const RunConfig& cfg, std::ostream* progress) {
  cfg.train.validate();
  if (cfg.manifest.empty()) throw ConfigError("train: no dataset manifest given");
  const auto base_manifest = load_manifest(cfg.manifest);
  const auto manifest = effective_manifest(base_manifest, cfg.seq_len);
  const auto recs = load_recordings(manifest, cfg.manifest);
  const auto data = prepare(recs, manifest, cfg.fold);
  const ModelConfig model_cfg = shaped_model(cfg.model, manifest);

  TrainOutcome out;
  out.run_dir = cfg.out_dir;
  fs::create_directories(out.run_dir);
  const fs::path manifest_copy = snapshot_dataset(manifest, cfg.manifest, out.run_dir);
  const std::string manifest_digest = git_blob_hash(read_text(manifest_copy));

  RunConfig effective = cfg;
  effective.model = model_cfg;
  effective.manifest = "manifest.json";
  effective.seq_len = manifest.seq_len;
  effective.out_dir = ".";
  const nlohmann::json config_doc = effective.to_json();
  write_text(out.run_dir / "config.json", config_doc.dump(2) + "\n");

  if (progress) {
    *progress << "data: train " << data.train.size() << ", val " << data.val.size() << ", test " << data.test.size()
              << " windows\n";
  }
  for (std::size_t i = 0; i < cfg.train.n_seeds; ++i) {
    const std::uint64_t seed = cfg.train.seed_for(i);
    const fs::path seed_dir = out.run_dir / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);
    std::ofstream epochs(seed_dir / "epochs.jsonl", std::ios::binary);
    std::ofstream timing(seed_dir / "timing.jsonl", std::ios::binary);
    if (!epochs || !timing) throw DataError("cannot write logs in " + seed_dir.string());
    auto on_epoch = [&](const EpochRecord& e) {
      epochs << e.to_json().dump() << "\n";
      epochs.flush();
      timing << nlohmann::json{{"epoch", e.epoch}, {"elapsed", e.elapsed}}.dump() << "\n";
      if (progress) {
        *progress << "seed " << seed << " epoch " << std::setw(3) << e.epoch << "  loss " << std::fixed
                  << std::setprecision(4) << e.train_loss << "  val F1 " << e.val_f1 << "  lr " << std::scientific
                  << std::setprecision(2) << e.lr << std::defaultfloat << std::setprecision(6) << "\n";
      }
    };
    auto run = train_seed(model_cfg, data, cfg.train, seed, on_epoch);
    save_model(run.model, seed_dir / "model.bmm");
    write_text(seed_dir / "result.json", seed_json(run.result).dump(2) + "\n");
    if (progress) {
      *progress << "seed " << seed << ": best val F1 " << run.fit.best_val_f1 << " (epoch " << run.fit.best_epoch
                << "), test macro F1 " << run.result.macro_f1 << "\n";
    }
    out.seeds.push_back(std::move(run.result));
  }
  out.results = results_json(out.seeds, config_hash(config_doc), manifest_digest);
  write_text(out.run_dir / "results.json", out.results.dump(2) + "\n");
  return out;
}

// ---- eval ---------------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
  return {{"split", split}, {"macro_f1", macro_f1}, {"per_class_f1", per_class_f1}, {"confusion_matrix", confusion.to_json()}};
}

EvalSplit parse_eval_split(const std::string& s) {
  if (s == "train") return EvalSplit::kTrain;
  if (s == "val") return EvalSplit::kVal;
  if (s == "test") return EvalSplit::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train|val|test)");
}

std::string to_string(EvalSplit s) {
  switch (s) {
    case EvalSplit::kTrain: return "train";
    case EvalSplit::kVal: return "val";
    case EvalSplit::kTest: return "test";
  }
  return "?";
}

EvalReport run_eval(const fs::path& model_path, const fs::path& manifest_path, EvalSplit split, std::size_t fold) {
  if (!fs::exists(model_path)) throw DataError("model file " + model_path.string() + " does not exist");
  Model model = load_model(model_path);
  const auto& mc = model.config();
  const auto m = load_manifest(manifest_path);
  if (m.channels != mc.num_channels || m.num_classes != mc.num_classes || m.seq_len != mc.seq_len) {
    throw ConfigError("manifest shape (C=" + std::to_string(m.channels) + ", K=" + std::to_string(m.num_classes) +
                      ", L=" + std::to_string(m.seq_len) + ") does not match the model (C=" +
                      std::to_string(mc.num_channels) + ", K=" + std::to_string(mc.num_classes) +
                      ", L=" + std::to_string(mc.seq_len) + ")");
  }
  const auto data = prepare(load_recordings(m, manifest_path), m, fold);
  const auto center = model.extras.find("norm.center");
  if (center != model.extras.end()) {
    const auto& c = center->second.storage();
    const auto& s = model.extras.at("norm.scale").storage();
    if (!std::ranges::equal(c, data.norm.center) || !std::ranges::equal(s, data.norm.scale)) {
      throw DataError("normalization statistics of " + manifest_path.string() +
                      " differ from those stored in the model; the dataset is not the training dataset");
    }
  }
  const WindowSet& ws = split == EvalSplit::kTrain ? data.train : split == EvalSplit::kVal ? data.val : data.test;
  EvalReport rep;
  rep.split = to_string(split);
  rep.confusion = evaluate(model, ws, mc.num_classes);
  rep.macro_f1 = macro_f1(rep.confusion);
  rep.per_class_f1 = per_class_f1(rep.confusion);
  return rep;
}

std::vector<EvalReport> run_eval_dir(const fs::path& run_dir, EvalSplit split) {
  const auto cfg = parse_json_file(run_dir / "config.json");
  const auto results = parse_json_file(run_dir / "results.json");
  const std::size_t fold = cfg.value("fold", std::size_t{0});
  std::vector<EvalReport> out;
  for (const auto& s : results.at("seeds")) {
    const auto seed = s.at("seed").get<std::uint64_t>();
    out.push_back(run_eval(run_dir / ("seed_" + std::to_string(seed)) / "model.bmm", run_dir / "manifest.json", split,
                           fold));
  }
  return out;
}

// ---- ablate -------------------------------------------------------------------

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "bidir") return AblationAxis::kBidir;
  if (s == "pooling") return AblationAxis::kPooling;
  if (s == "stem") return AblationAxis::kStem;
  if (s == "d_state") return AblationAxis::kDState;
  if (s == "d_model") return AblationAxis::kDModel;
  if (s == "expand") return AblationAxis::kExpand;
  if (s == "seq_len") return AblationAxis::kSeqLen;
  throw ConfigError("unknown ablation axis '" + s + "' (expected bidir|pooling|stem|d_state|d_model|expand|seq_len)");
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kBidir: return "bidir";
    case AblationAxis::kPooling: return "pooling";
    case AblationAxis::kStem: return "stem";
    case AblationAxis::kDState: return "d_state";
    case AblationAxis::kDModel: return "d_model";
    case AblationAxis::kExpand: return "expand";
    case AblationAxis::kSeqLen: return "seq_len";
  }
  return "?";
}

std::vector<AblationVariant> ablation_variants(const RunConfig& base, AblationAxis axis,
                                               const std::vector<std::size_t>& values) {
  std::vector<AblationVariant> out{{"baseline", base}};
  auto numeric = [&](const std::string& name, std::size_t current, auto apply) {
    std::vector<std::size_t> vals = values;
    if (vals.empty()) vals = {std::max<std::size_t>(1, current / 2)};
    for (std::size_t v : vals) {
      if (v == current) continue;
      RunConfig c = base;
      apply(c, v);
      out.push_back({name + "=" + std::to_string(v), c});
    }
  };
  switch (axis) {
    case AblationAxis::kBidir: {
      RunConfig c = base;
      c.model.bidirectional = !base.model.bidirectional;
      out.push_back({c.model.bidirectional ? "bidirectional" : "unidirectional", c});
      break;
    }
    case AblationAxis::kPooling: {
      RunConfig mean = base;
      mean.model.pooling = base.model.pooling == Pooling::kGated ? Pooling::kMean : Pooling::kGated;
      out.push_back({to_string(mean.model.pooling) + " pooling", mean});
      if (base.model.pooling == Pooling::kGated) {
        RunConfig frozen = base;
        frozen.model.zero_attention_v = true;
        frozen.train.frozen.push_back("pool.v");
        out.push_back({"gated, v=0 frozen", frozen});
      }
      break;
    }
    case AblationAxis::kStem: {
      RunConfig c = base;
      c.model.variant = base.model.variant == Variant::kCI ? Variant::kCrossover : Variant::kCI;
      out.push_back({to_string(c.model.variant) + " stem", c});
      break;
    }
    case AblationAxis::kDState:
      numeric("d_state", base.model.d_state, [](RunConfig& c, std::size_t v) { c.model.d_state = v; });
      break;
    case AblationAxis::kDModel:
      numeric("d_model", base.model.d_model, [](RunConfig& c, std::size_t v) { c.model.d_model = v; });
      break;
    case AblationAxis::kExpand:
      numeric("expand", base.model.expand, [](RunConfig& c, std::size_t v) { c.model.expand = v; });
      break;
    case AblationAxis::kSeqLen: {
      const std::size_t current = base.seq_len.value_or(base.model.seq_len);
      std::vector<std::size_t> vals = values;
      if (vals.empty()) vals = {64, 128, 256, 512};
      for (std::size_t v : vals) {
        if (v == current) continue;
        RunConfig c = base;
        c.seq_len = v;
        c.model.seq_len = v;
        out.push_back({"seq_len=" + std::to_string(v), c});
      }
      break;
    }
  }
  return out;
}

namespace {

std::string slug(const std::string& label) {
  std::string s;
  for (char ch : label) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      s += ch;
    } else if (!s.empty() && s.back() != '_') {
      s += '_';
    }
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

}  // namespace

std::vector<AblationRow> run_ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::size_t>& values,
                                    bool count_only, std::ostream* progress) {
  std::optional<DatasetManifest> manifest;
  if (!base.manifest.empty()) manifest = load_manifest(base.manifest);
  if (!count_only && !manifest) throw ConfigError("ablate: training needs a dataset manifest");

  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants(base, axis, values)) {
    ModelConfig mc = v.config.model;
    if (manifest) mc = shaped_model(mc, effective_manifest(*manifest, v.config.seq_len));
    AblationRow row;
    row.label = v.label;
    row.params = count_params(mc).total_params();
    if (!count_only) {
      RunConfig rc = v.config;
      rc.out_dir = base.out_dir / slug(v.label);
      if (progress) *progress << "== " << v.label << "\n";
      const auto outcome = run_train(rc, progress);
      std::vector<double> f1s;
      for (const auto& s : outcome.seeds) f1s.push_back(s.macro_f1);
      row.f1 = aggregate_seeds(f1s);
    }
    rows.push_back(row);
  }
  for (auto& r : rows) {
    r.param_delta_pct = 100.0 * (double(r.params) - double(rows[0].params)) / double(rows[0].params);
    if (r.f1 && rows[0].f1) r.delta_f1 = r.f1->mean - rows[0].f1->mean;
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "variant" << std::right << std::setw(9) << "params" << std::setw(9) << "dParams"
     << std::setw(10) << "F1 mean" << std::setw(9) << "F1 std" << std::setw(9) << "dF1" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(22) << r.label << std::right << std::setw(9) << r.params << std::setw(8) << std::fixed
       << std::setprecision(1) << r.param_delta_pct << "%";
    if (r.f1) {
      os << std::setprecision(4) << std::setw(10) << r.f1->mean << std::setw(9) << r.f1->std;
      os << std::showpos << std::setw(9) << r.delta_f1.value_or(0.0) << std::noshowpos;
    } else {
      os << std::setw(10) << "-" << std::setw(9) << "-" << std::setw(9) << "-";
    }
    os << std::defaultfloat << std::setprecision(6) << "\n";
  }
  return os.str();
}

nlohmann::json ablation_json(const std::vector<AblationRow>& rows, AblationAxis axis) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"variant", r.label}, {"params", r.params}, {"param_delta_pct", r.param_delta_pct}};
    if (r.f1) {
      j["macro_f1_mean"] = r.f1->mean;
      j["macro_f1_std"] = r.f1->std;
      j["delta_f1"] = r.delta_f1.value_or(0.0);
    }
    arr.push_back(j);
  }
  return {{"axis", to_string(axis)}, {"rows", arr}};
}

// ---- synth --------------------------------------------------------------------

fs::path run_synth(const SynthConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  const auto recs = synth_har(cfg);
  write_csv(out_dir / "data.csv", recs);
  DatasetManifest m;
  m.name = cfg.asymmetric ? "synth-asymmetric" : "synth";
  m.channels = cfg.channels;
  m.num_classes = cfg.classes;
  m.fs = cfg.fs;
  m.seq_len = cfg.seq_len;
  m.stride = std::max<std::size_t>(1, cfg.seq_len / 2);
  m.files = {"data.csv"};
  const fs::path path = out_dir / "manifest.json";
  save_manifest(m, path);
  write_text(out_dir / "synth.json", cfg.to_json().dump(2) + "\n");
  return path;
}

// ---- count --------------------------------------------------------------------

std::vector<PresetCost> preset_costs(Variant variant, MacConvention convention) {
  std::vector<PresetCost> rows;
  for (const auto& p : dataset_presets()) {
    const auto cfg = variant == Variant::kCI ? ModelConfig::ci_default(p.channels, p.classes, p.seq_len)
                                             : ModelConfig::crossover_default(p.channels, p.classes, p.seq_len);
    const auto rep = count_macs(cfg, p.channels, p.seq_len, convention);
    rows.push_back({p.name, p.channels, p.seq_len, rep.total_params(), rep.total_macs()});
  }
  return rows;
}

std::string preset_cost_table(const std::vector<PresetCost>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "dataset" << std::right << std::setw(5) << "C" << std::setw(6) << "L"
     << std::setw(10) << "params" << std::setw(14) << "MACs" << "\n";
  double params = 0.0, macs = 0.0;
  for (const auto& r : rows) {
    os << std::left << std::setw(14) << r.preset << std::right << std::setw(5) << r.channels << std::setw(6) << r.seq_len
       << std::setw(10) << r.params << std::setw(14) << r.macs << "\n";
    params += double(r.params);
    macs += double(r.macs);
  }
  const double n = double(rows.size());
  os << std::left << std::setw(25) << "average" << std::right << std::fixed << std::setprecision(0) << std::setw(10)
     << params / n << std::setw(14) << macs / n << "\n";
  return os.str();
}

nlohmann::json preset_cost_json(const std::vector<PresetCost>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  double params = 0.0, macs = 0.0;
  for (const auto& r : rows) {
    arr.push_back({{"dataset", r.preset}, {"channels", r.channels}, {"seq_len", r.seq_len}, {"params", r.params},
                   {"macs", r.macs}});
    params += double(r.params);
    macs += double(r.macs);
  }
  const double n = double(rows.size());
  return {{"presets", arr}, {"average_params", params / n}, {"average_macs", macs / n}};
}

}  // namespace bm
