#include <iomanip>
#include <sstream>

#include "babymamba/model.hpp"

namespace bm {

std::string to_string(MacConvention c) { return c == MacConvention::kLayers ? "layers" : "executed"; }

MacConvention parse_mac_convention(const std::string& s) {
  if (s == "layers") return MacConvention::kLayers;
  if (s == "executed") return MacConvention::kExecuted;
  throw ConfigError("unknown MAC convention '" + s + "' (expected layers|executed)");
}

std::uint64_t CostReport::total_params() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.params;
  return n;
}

std::uint64_t CostReport::total_macs() const {
  std::uint64_t n = 0;
  for (const auto& r : rows) n += r.macs;
  return n;
}

std::uint64_t CostReport::params_in(const std::string& group) const {
  std::uint64_t n = 0;
  for (const auto& r : rows)
    if (r.group == group) n += r.params;
  return n;
}

std::uint64_t CostReport::macs_in(const std::string& group) const {
  std::uint64_t n = 0;
  for (const auto& r : rows)
    if (r.group == group) n += r.macs;
  return n;
}

nlohmann::json CostReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"name", r.name}, {"group", r.group}, {"params", r.params}, {"macs", r.macs}});
  }
  return {{"channels", channels},
          {"seq_len", seq_len},
          {"convention", to_string(convention)},
          {"rows", rows_json},
          {"total_params", total_params()},
          {"total_macs", total_macs()},
          {"backbone_params", params_in("backbone")},
          {"backbone_macs", macs_in("backbone")},
          {"stem_macs", macs_in("stem")},
          {"head_macs", macs_in("head")}};
}

std::string CostReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(26) << "layer" << std::setw(10) << "group" << std::right << std::setw(10) << "params"
     << std::setw(16) << "MACs" << "\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(26) << r.name << std::setw(10) << r.group << std::right << std::setw(10) << r.params
       << std::setw(16) << r.macs << "\n";
  }
  os << std::left << std::setw(36) << "total" << std::right << std::setw(10) << total_params() << std::setw(16)
     << total_macs() << "\n";
  os << std::left << std::setw(36) << "backbone" << std::right << std::setw(10) << params_in("backbone")
     << std::setw(16) << macs_in("backbone") << "\n";
  return os.str();
}

namespace {

CostReport analytic(const ModelConfig& cfg, std::size_t C, std::size_t L, MacConvention convention) {
  cfg.validate();
  const std::uint64_t D = cfg.d_model, E = cfg.d_inner(), N = cfg.d_state, R = cfg.resolved_dt_rank();
  const std::uint64_t A = cfg.resolved_d_attn(), K = cfg.num_classes, k = cfg.k_stem, kc = cfg.k_conv;
  const bool ci = cfg.variant == Variant::kCI;
  // Sequences the backbone processes per window.
  const std::uint64_t seqs = ci ? C : 1;
  const std::uint64_t dirs = (cfg.bidirectional && convention == MacConvention::kExecuted) ? 2 : 1;
  const bool scan_counted = convention == MacConvention::kExecuted;

  CostReport rep;
  rep.channels = C;
  rep.seq_len = L;
  rep.convention = convention;

  const std::uint64_t stem_in = ci ? 1 : C;
  rep.rows.push_back({"stem.conv", "stem", D * stem_in * k + D, seqs * D * stem_in * k * L});
  rep.rows.push_back({"stem.bn", "stem", 2 * D, 0});

  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    rep.rows.push_back({p + "in_proj", "backbone", 2 * E * D, seqs * L * D * 2 * E});
    rep.rows.push_back({p + "dw_conv", "backbone", E * kc + E, dirs * seqs * E * kc * L});
    rep.rows.push_back({p + "x_proj", "backbone", (2 * N + R) * E, dirs * seqs * L * E * (2 * N + R)});
    rep.rows.push_back({p + "dt_proj", "backbone", R * E + E, dirs * seqs * L * R * E});
    rep.rows.push_back({p + "ssm", "backbone", E * N + E, scan_counted ? dirs * seqs * 3 * L * E * N : 0});
    rep.rows.push_back({p + "out_proj", "backbone", E * D, seqs * L * E * D});
    rep.rows.push_back({p + "norm", "backbone", 2 * D, 0});
  }

  if (cfg.pooling == Pooling::kGated) {
    rep.rows.push_back({"pool.attention", "head", D * A + 2 * A, seqs * (L * D * A + L * A + L * D)});
  } else {
    rep.rows.push_back({"pool.mean", "head", 0, 0});
  }
  rep.rows.push_back({"head.classifier", "head", K * D + K, K * D});
  return rep;
}

}  // namespace

CostReport count_params(const ModelConfig& cfg) {
  auto rep = analytic(cfg, cfg.num_channels, cfg.seq_len, MacConvention::kLayers);
  for (auto& r : rep.rows) r.macs = 0;
  return rep;
}

CostReport count_macs(const ModelConfig& cfg, std::size_t channels, std::size_t seq_len, MacConvention convention) {
  if (channels == 0 || seq_len == 0) throw ConfigError("count_macs: channels and seq_len must be >= 1");
  ModelConfig shaped = cfg;
  shaped.num_channels = channels;
  shaped.seq_len = seq_len;
  return analytic(shaped, channels, seq_len, convention);
}

}  // namespace bm
