#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "babymamba/errors.hpp"
#include "babymamba/run.hpp"

using namespace bm;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string manifest;
  std::string preset;
  std::string variant;
  std::string pooling;
  std::string out;
  std::size_t seeds = 0;
  std::size_t seq_len = 0;
  std::size_t epochs = 0;
  std::size_t fold = 0;
  bool fold_set = false;
  std::int64_t master_seed = -1;
  bool uni = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration");
  cmd->add_option("--manifest", f.manifest, "dataset manifest (JSON)");
  cmd->add_option("--variant", f.variant, "ci | crossover");
  cmd->add_option("--pooling", f.pooling, "gated | mean");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seeds", f.seeds, "number of seeds (master_seed + i)");
  cmd->add_option("--master-seed", f.master_seed, "master seed");
  cmd->add_option("--seq-len", f.seq_len, "window length override");
  cmd->add_option("--epochs", f.epochs, "maximum epochs");
  cmd->add_option("--fold", f.fold, "held-out subject index for LOSO")->each([&](const std::string&) { f.fold_set = true; });
  cmd->add_flag("--unidirectional", f.uni, "disable bidirectional scanning");
  cmd->add_flag("--quiet", f.quiet, "no per-epoch progress");
}

// Config file first, then flags on top.
RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = load_run_config(f.config);
  nlohmann::json patch = nlohmann::json::object();
  if (!f.variant.empty()) patch["model"]["variant"] = f.variant;
  if (!f.pooling.empty()) patch["model"]["pooling"] = f.pooling;
  if (f.uni) patch["model"]["bidirectional"] = false;
  if (f.seeds) patch["train"]["n_seeds"] = f.seeds;
  if (f.master_seed >= 0) patch["train"]["master_seed"] = f.master_seed;
  if (f.epochs) patch["train"]["max_epochs"] = f.epochs;
  if (!f.manifest.empty()) patch["manifest"] = f.manifest;
  if (f.seq_len) patch["seq_len"] = f.seq_len;
  if (f.fold_set) patch["fold"] = f.fold;
  if (!f.out.empty()) patch["out_dir"] = f.out;
  cfg.merge_json(patch);
  return cfg;
}

ModelConfig count_model(const CommonFlags& f, std::size_t channels, std::size_t classes, std::size_t seq_len) {
  RunConfig cfg;
  if (!f.config.empty()) cfg = load_run_config(f.config);
  nlohmann::json patch{{"model", {{"num_channels", channels}, {"num_classes", classes}, {"seq_len", seq_len}}}};
  if (!f.variant.empty()) patch["model"]["variant"] = f.variant;
  if (!f.pooling.empty()) patch["model"]["pooling"] = f.pooling;
  if (f.uni) patch["model"]["bidirectional"] = false;
  cfg.merge_json(patch);
  return cfg.model;
}

void emit_json(const nlohmann::json& j, const std::string& path) {
  if (path.empty()) return;
  write_text(path, j.dump(2) + "\n");
}

void print_confusion(const ConfusionMatrix& cm) {
  std::cout << "confusion (rows true, cols predicted):\n";
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    for (std::size_t j = 0; j < cm.num_classes(); ++j) std::cout << (j ? " " : "  ") << cm.at(i, j);
    std::cout << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed training buffers in the process instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Compact selective state-space models for inertial activity recognition"};
  app.require_subcommand(1);

  // count
  CommonFlags count_flags;
  std::string presets, convention = "layers", count_json;
  std::size_t channels = 6, classes = 6;
  auto* count = app.add_subcommand("count", "parameter and MAC report");
  add_common(count, count_flags);
  count->add_option("--preset", count_flags.preset, "dataset preset shape");
  count->add_option("--presets", presets, "'all' for every dataset preset and their average");
  count->add_option("--channels", channels, "input channels");
  count->add_option("--classes", classes, "classes");
  count->add_option("--mac-convention", convention, "layers | executed");
  count->add_option("--json", count_json, "also write the report as JSON");

  // train
  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "train every seed and write a run directory");
  add_common(train, train_flags);

  // eval
  std::string eval_model, eval_manifest, eval_run, eval_split = "test", eval_json;
  std::size_t eval_fold = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a model file or a whole run directory");
  eval->add_option("--model", eval_model, "model file");
  eval->add_option("--manifest", eval_manifest, "dataset manifest");
  eval->add_option("--run", eval_run, "run directory (every seed)");
  eval->add_option("--split", eval_split, "train | val | test");
  eval->add_option("--fold", eval_fold, "held-out subject index for LOSO");
  eval->add_option("--json", eval_json, "write metrics JSON here");

  // ablate
  CommonFlags ablate_flags;
  std::string axis;
  std::vector<std::size_t> axis_values;
  bool count_only = false;
  auto* ablate = app.add_subcommand("ablate", "single-variable ablation against the baseline");
  add_common(ablate, ablate_flags);
  ablate->add_option("--axis", axis, "bidir | pooling | stem | d_state | d_model | expand | seq_len")->required();
  ablate->add_option("--values", axis_values, "values for numeric axes")->delimiter(',');
  ablate->add_flag("--count-only", count_only, "report parameter deltas without training");

  // synth
  SynthConfig synth_cfg;
  std::string synth_out = "data/synth";
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset and its manifest");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--subjects", synth_cfg.n_subjects, "subjects");
  synth->add_option("--classes", synth_cfg.classes, "classes");
  synth->add_option("--channels", synth_cfg.channels, "channels");
  synth->add_option("--seq-len", synth_cfg.seq_len, "window length");
  synth->add_option("--fs", synth_cfg.fs, "sampling rate in Hz");
  synth->add_option("--windows-per-class", synth_cfg.windows_per_class, "windows per class and subject");
  synth->add_option("--noise", synth_cfg.noise, "noise standard deviation");
  synth->add_flag("--asymmetric", synth_cfg.asymmetric, "time-reversed class signatures");
  synth->add_option("--seed", synth_cfg.seed, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*count) {
      const auto conv = parse_mac_convention(convention);
      if (!presets.empty()) {
        if (presets != "all") throw ConfigError("--presets accepts only 'all'");
        const auto variant = count_flags.variant.empty() ? Variant::kCrossover : parse_variant(count_flags.variant);
        const auto rows = preset_costs(variant, conv);
        std::cout << to_string(variant) << " defaults, " << to_string(conv) << " MAC convention\n"
                  << preset_cost_table(rows);
        emit_json(preset_cost_json(rows), count_json);
        return 0;
      }
      std::size_t L = 128;
      if (!count_flags.preset.empty()) {
        const auto& p = dataset_preset(count_flags.preset);
        channels = p.channels;
        classes = p.classes;
        L = p.seq_len;
      }
      if (count_flags.seq_len) L = count_flags.seq_len;
      const auto cfg = count_model(count_flags, channels, classes, L);
      const auto rep = count_macs(cfg, channels, L, conv);
      std::cout << to_string(cfg.variant) << " C=" << channels << " L=" << L << " K=" << classes << ", "
                << to_string(conv) << " MAC convention\n"
                << rep.table();
      emit_json(rep.to_json(), count_json);
      return 0;
    }
    if (*train) {
      const auto cfg = resolve(train_flags);
      const auto outcome = run_train(cfg, train_flags.quiet ? nullptr : &std::cout);
      std::cout << "macro F1 " << outcome.results.value("macro_f1_mean", 0.0) << " +/- "
                << outcome.results.value("macro_f1_std", 0.0) << " over " << outcome.seeds.size() << " seed(s); run in "
                << outcome.run_dir.string() << "\n";
      return 0;
    }
    if (*eval) {
      const auto split = parse_eval_split(eval_split);
      nlohmann::json out;
      if (!eval_run.empty()) {
        out = nlohmann::json::array();
        for (const auto& rep : run_eval_dir(eval_run, split)) {
          std::cout << rep.split << " macro F1 " << rep.macro_f1 << "\n";
          print_confusion(rep.confusion);
          out.push_back(rep.to_json());
        }
      } else {
        if (eval_model.empty() || eval_manifest.empty()) throw ConfigError("eval needs --run, or --model and --manifest");
        const auto rep = run_eval(eval_model, eval_manifest, split, eval_fold);
        std::cout << rep.split << " macro F1 " << rep.macro_f1 << "\n";
        print_confusion(rep.confusion);
        out = rep.to_json();
      }
      emit_json(out, eval_json);
      return 0;
    }
    if (*ablate) {
      auto cfg = resolve(ablate_flags);
      if (ablate_flags.out.empty()) cfg.out_dir = "runs/ablate_" + axis;
      const auto ax = parse_ablation_axis(axis);
      const auto rows = run_ablate(cfg, ax, axis_values, count_only, ablate_flags.quiet ? nullptr : &std::cout);
      std::cout << ablation_table(rows);
      if (!count_only) {
        fs::create_directories(cfg.out_dir);
        emit_json(ablation_json(rows, ax), (cfg.out_dir / "ablation.json").string());
      }
      return 0;
    }
    if (*synth) {
      const auto path = run_synth(synth_cfg, synth_out);
      std::cout << "wrote " << path.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kInternal);
  }
  return 0;
}
