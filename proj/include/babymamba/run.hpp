#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "babymamba/datapipe.hpp"
#include "babymamba/metrics.hpp"
#include "babymamba/model.hpp"
#include "babymamba/optim.hpp"

namespace bm {

// Everything a training run needs. Model shape fields (channels, classes,
// seq_len) are filled from the manifest when the run starts.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path manifest;
  std::optional<std::size_t> seq_len;  // overrides the manifest window length
  std::size_t fold = 0;
  std::filesystem::path out_dir = "runs/latest";

  // Merges `j` over the current values; unknown top-level keys are errors.
  void merge_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

RunConfig load_run_config(const std::filesystem::path& path);

// Manifest adjusted for a window-length override.
DatasetManifest effective_manifest(const DatasetManifest& m, std::optional<std::size_t> seq_len);
// Model config with shape fields taken from the manifest.
ModelConfig shaped_model(ModelConfig cfg, const DatasetManifest& m);

// ---- train --------------------------------------------------------------------

struct TrainOutcome {
  std::vector<SeedResult> seeds;
  nlohmann::json results;
  std::filesystem::path run_dir;
};

// Layout of the run directory:
//   config.json            effective configuration
//   manifest.json, data/   copy of the dataset
//   seed_<s>/model.bmm     best checkpoint
//   seed_<s>/epochs.jsonl  per-epoch record (deterministic fields)
//   seed_<s>/timing.jsonl  per-epoch wall-clock seconds
//   seed_<s>/result.json   test metrics for the seed
//   results.json           all seeds and the aggregate
TrainOutcome run_train(const RunConfig& cfg, std::ostream* progress = nullptr);

// ---- eval ---------------------------------------------------------------------

struct EvalReport {
  std::string split;
  ConfusionMatrix confusion{2};
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;

  nlohmann::json to_json() const;
};

enum class EvalSplit { kTrain, kVal, kTest };
EvalSplit parse_eval_split(const std::string& s);
std::string to_string(EvalSplit s);

// Evaluates a model file on a manifest's split. The manifest must match the
// model's channel count, class count and window length.
EvalReport run_eval(const std::filesystem::path& model_path, const std::filesystem::path& manifest_path,
                    EvalSplit split = EvalSplit::kTest, std::size_t fold = 0);

// Re-evaluates every seed of a run directory from its own contents.
std::vector<EvalReport> run_eval_dir(const std::filesystem::path& run_dir, EvalSplit split = EvalSplit::kTest);

// ---- ablate -------------------------------------------------------------------

enum class AblationAxis { kBidir, kPooling, kStem, kDState, kDModel, kExpand, kSeqLen };
AblationAxis parse_ablation_axis(const std::string& s);
std::string to_string(AblationAxis a);

struct AblationVariant {
  std::string label;
  RunConfig config;
};

// Baseline first, then one variant per value. Numeric axes take `values`;
// the categorical axes ignore them.
std::vector<AblationVariant> ablation_variants(const RunConfig& base, AblationAxis axis,
                                               const std::vector<std::size_t>& values);

struct AblationRow {
  std::string label;
  std::uint64_t params = 0;
  double param_delta_pct = 0.0;
  std::optional<SeedSummary> f1;
  std::optional<double> delta_f1;
};

// Trains each variant with the baseline's seeds unless count_only.
std::vector<AblationRow> run_ablate(const RunConfig& base, AblationAxis axis, const std::vector<std::size_t>& values,
                                    bool count_only, std::ostream* progress = nullptr);
std::string ablation_table(const std::vector<AblationRow>& rows);
nlohmann::json ablation_json(const std::vector<AblationRow>& rows, AblationAxis axis);

// ---- synth --------------------------------------------------------------------

// Writes data.csv and manifest.json into out_dir; returns the manifest path.
std::filesystem::path run_synth(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// ---- count --------------------------------------------------------------------

struct PresetCost {
  std::string preset;
  std::size_t channels = 0;
  std::size_t seq_len = 0;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

// Cost of `variant` defaults at every dataset preset shape.
std::vector<PresetCost> preset_costs(Variant variant, MacConvention convention);
std::string preset_cost_table(const std::vector<PresetCost>& rows);
nlohmann::json preset_cost_json(const std::vector<PresetCost>& rows);

// Reads a whole file as bytes / text.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace bm
