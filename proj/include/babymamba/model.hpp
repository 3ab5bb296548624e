#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "babymamba/blocks.hpp"

namespace bm {

enum class Variant { kCI, kCrossover };
enum class Pooling { kGated, kMean };

std::string to_string(Variant v);
std::string to_string(Pooling p);
Variant parse_variant(const std::string& s);
Pooling parse_pooling(const std::string& s);

struct ModelConfig {
  Variant variant = Variant::kCrossover;
  std::size_t d_model = 26;
  std::size_t d_state = 8;
  std::size_t n_layers = 4;
  std::size_t expand = 2;
  std::size_t k_stem = 5;
  std::size_t k_conv = 4;
  std::size_t dt_rank = 0;  // 0: ceil(d_model / 16)
  std::size_t d_attn = 0;   // 0: d_model
  std::size_t num_classes = 6;
  std::size_t num_channels = 6;
  std::size_t seq_len = 128;
  bool bidirectional = true;
  Pooling pooling = Pooling::kGated;
  bool zero_attention_v = false;  // start the pooling score vector at 0
  std::uint64_t seed = 0;

  static ModelConfig crossover_default(std::size_t channels, std::size_t classes, std::size_t seq_len = 128);
  static ModelConfig ci_default(std::size_t channels, std::size_t classes, std::size_t seq_len = 128);

  std::size_t d_inner() const { return expand * d_model; }
  std::size_t resolved_dt_rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
  std::size_t resolved_d_attn() const { return d_attn ? d_attn : d_model; }
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  // X: [B x C x L] or [C x L] -> logits [B x K].
  Var forward(const Tensor& X, bool training);
  // Inference-mode logits without recording a graph.
  Tensor predict(const Tensor& X);

  std::vector<NamedVar> parameters() const;
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;
  std::size_t parameter_count() const;

  StemParams stem;
  std::vector<SsmBlockParams> blocks;
  std::optional<PoolingParams> pool;
  HeadParams head;

  // Non-parameter tensors carried in the model file (e.g. input
  // normalization statistics).
  std::map<std::string, Tensor> extras;

 private:
  ModelConfig cfg_;
};

Model build(const ModelConfig& cfg);

// Copy all parameter and buffer values (shapes must agree).
void copy_state(const Model& from, Model& to);

inline constexpr char kModelMagic[8] = {'B', 'M', 'H', 'A', 'R', 'M', 'D', 'L'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// ---- cost accounting --------------------------------------------------------

enum class MacConvention {
  kLayers,    // every weight-bearing linear/conv layer once per forward pass
  kExecuted,  // every multiply performed, incl. the scan and both directions
};

std::string to_string(MacConvention c);
MacConvention parse_mac_convention(const std::string& s);

struct CostRow {
  std::string name;
  std::string group;  // "stem", "backbone" or "head"
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

struct CostReport {
  std::vector<CostRow> rows;
  std::size_t channels = 0;
  std::size_t seq_len = 0;
  MacConvention convention = MacConvention::kLayers;

  std::uint64_t total_params() const;
  std::uint64_t total_macs() const;
  std::uint64_t params_in(const std::string& group) const;
  std::uint64_t macs_in(const std::string& group) const;
  std::uint64_t backbone_macs() const { return macs_in("backbone"); }

  nlohmann::json to_json() const;
  std::string table() const;
};

// Closed-form parameter rows for cfg (MACs left at zero).
CostReport count_params(const ModelConfig& cfg);
// Closed-form parameter and MAC rows for one window of shape C x L.
CostReport count_macs(const ModelConfig& cfg, std::size_t channels, std::size_t seq_len,
                      MacConvention convention = MacConvention::kLayers);

}  // namespace bm
