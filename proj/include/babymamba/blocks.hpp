#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "babymamba/autodiff.hpp"
#include "babymamba/ssm_core.hpp"

namespace bm {

using NamedVar = std::pair<std::string, Var>;

enum class Direction { kForward, kBackward };

// Mamba-style expanded block: in_proj -> (u, gate); u -> causal depthwise conv
// -> SiLU -> selective scan; (y * SiLU(gate)) -> out_proj. LayerNorm applies
// to the residual sum in bidir_block.
struct SsmBlockParams {
  Var in_proj;   // [2E x D]
  Var conv_w;    // [E x k_conv]
  Var conv_b;    // [E]
  Var out_proj;  // [D x E]
  Var norm_gamma;
  Var norm_beta;
  ssm::SsmKernelParams kernel;

  std::size_t d_model() const { return in_proj.dim(1); }
  std::size_t d_inner() const { return conv_w.dim(0); }

  static SsmBlockParams init(std::size_t d_model, std::size_t expand, std::size_t d_state, std::size_t dt_rank,
                             std::size_t k_conv, std::uint64_t seed, const std::string& prefix);
  std::vector<NamedVar> named(const std::string& prefix) const;
};

struct StemParams {
  Var weight;  // [D x Cin x k]; Cin = 1 for the channel-independent stem
  Var bias;    // [D]
  Var bn_gamma;
  Var bn_beta;
  BatchNormState bn;

  static StemParams init(std::size_t d_model, std::size_t in_channels, std::size_t k, std::uint64_t seed,
                         const std::string& prefix);
  std::vector<NamedVar> named(const std::string& prefix) const;
};

struct PoolingParams {
  Var W_g;  // [A x D]
  Var b_g;  // [A]
  Var v;    // [A]

  static PoolingParams init(std::size_t d_model, std::size_t d_attn, std::uint64_t seed, const std::string& prefix,
                            bool zero_v = false);
  std::vector<NamedVar> named(const std::string& prefix) const;
  std::size_t parameter_count() const { return W_g.numel() + b_g.numel() + v.numel(); }
};

struct HeadParams {
  Var weight;  // [K x D]
  Var bias;    // [K]

  static HeadParams init(std::size_t d_model, std::size_t num_classes, std::uint64_t seed, const std::string& prefix);
  std::vector<NamedVar> named(const std::string& prefix) const;
};

// One directional pass of the block for Z[N x L x D]; the backward direction
// wraps the same machinery in temporal reversals.
Var ssm_block_forward(const Var& Z, const SsmBlockParams& p, Direction direction);

// LN(Z + H_fwd + H_bwd) with both scans sharing p; LN(Z + H_fwd) when
// `bidirectional` is false.
Var bidir_block(const Var& Z, const SsmBlockParams& p, bool bidirectional = true);

// X[B x C x L] (or [C x L]) -> [B*C x L x D]: every channel through the same
// conv + BN + SiLU as an independent sequence.
Var stem_ci(const Var& X, StemParams& p, bool training);

// X[B x C x L] (or [C x L]) -> [B x L x D].
Var stem_crossover(const Var& X, StemParams& p, bool training);

// Z[N x L x D] -> [N x D]
Var attention_pool(const Var& Z, const PoolingParams& p);
Var attention_weights(const Var& Z, const PoolingParams& p);
Var mean_pool(const Var& Z);

// Per-channel pooled vectors [B*C x D] -> channel average [B x D].
Var late_fuse(const Var& pooled, std::size_t channels);

Var classify(const Var& h, const HeadParams& p);

}  // namespace bm
