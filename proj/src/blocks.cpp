#include "babymamba/blocks.hpp"

#include "babymamba/init.hpp"

namespace bm {

SsmBlockParams SsmBlockParams::init(std::size_t d_model, std::size_t expand, std::size_t d_state, std::size_t dt_rank,
                                    std::size_t k_conv, std::uint64_t seed, const std::string& prefix) {
  if (d_model == 0 || expand == 0 || k_conv == 0) throw ConfigError("block extents must be >= 1");
  const std::size_t E = expand * d_model;
  SsmBlockParams p;
  p.in_proj = Var::parameter(fan_in_uniform({2 * E, d_model}, d_model, seed, prefix + "in_proj"));
  p.conv_w = Var::parameter(fan_in_uniform({E, k_conv}, k_conv, seed, prefix + "conv_w"));
  p.conv_b = Var::parameter(fan_in_uniform({E}, k_conv, seed, prefix + "conv_b"));
  p.out_proj = Var::parameter(fan_in_uniform({d_model, E}, E, seed, prefix + "out_proj"));
  p.norm_gamma = Var::parameter(Tensor(Shape{d_model}, 1.0));
  p.norm_beta = Var::parameter(Tensor(Shape{d_model}, 0.0));
  p.kernel = ssm::SsmKernelParams::init(E, d_state, dt_rank, seed, prefix + "ssm.");
  return p;
}

std::vector<NamedVar> SsmBlockParams::named(const std::string& prefix) const {
  return {
      {prefix + "in_proj", in_proj},
      {prefix + "conv_w", conv_w},
      {prefix + "conv_b", conv_b},
      {prefix + "ssm.W_dt_low", kernel.W_dt_low},
      {prefix + "ssm.W_B", kernel.W_B},
      {prefix + "ssm.W_C", kernel.W_C},
      {prefix + "ssm.W_dt_up", kernel.W_dt_up},
      {prefix + "ssm.dt_bias", kernel.dt_bias},
      {prefix + "ssm.A_log", kernel.A_log},
      {prefix + "ssm.D", kernel.D},
      {prefix + "out_proj", out_proj},
      {prefix + "norm.gamma", norm_gamma},
      {prefix + "norm.beta", norm_beta},
  };
}

StemParams StemParams::init(std::size_t d_model, std::size_t in_channels, std::size_t k, std::uint64_t seed,
                            const std::string& prefix) {
  if (k % 2 == 0) throw ConfigError("stem kernel size must be odd, got " + std::to_string(k));
  StemParams p;
  const std::size_t fan_in = in_channels * k;
  p.weight = Var::parameter(fan_in_uniform({d_model, in_channels, k}, fan_in, seed, prefix + "conv_w"));
  p.bias = Var::parameter(fan_in_uniform({d_model}, fan_in, seed, prefix + "conv_b"));
  p.bn_gamma = Var::parameter(Tensor(Shape{d_model}, 1.0));
  p.bn_beta = Var::parameter(Tensor(Shape{d_model}, 0.0));
  p.bn.running_mean = Tensor(Shape{d_model}, 0.0);
  p.bn.running_var = Tensor(Shape{d_model}, 1.0);
  return p;
}

std::vector<NamedVar> StemParams::named(const std::string& prefix) const {
  return {{prefix + "conv_w", weight}, {prefix + "conv_b", bias}, {prefix + "bn.gamma", bn_gamma},
          {prefix + "bn.beta", bn_beta}};
}

PoolingParams PoolingParams::init(std::size_t d_model, std::size_t d_attn, std::uint64_t seed,
                                  const std::string& prefix, bool zero_v) {
  PoolingParams p;
  p.W_g = Var::parameter(fan_in_uniform({d_attn, d_model}, d_model, seed, prefix + "W_g"));
  p.b_g = Var::parameter(fan_in_uniform({d_attn}, d_model, seed, prefix + "b_g"));
  p.v = Var::parameter(zero_v ? Tensor(Shape{d_attn}, 0.0) : fan_in_uniform({d_attn}, d_attn, seed, prefix + "v"));
  return p;
}

std::vector<NamedVar> PoolingParams::named(const std::string& prefix) const {
  return {{prefix + "W_g", W_g}, {prefix + "b_g", b_g}, {prefix + "v", v}};
}

HeadParams HeadParams::init(std::size_t d_model, std::size_t num_classes, std::uint64_t seed, const std::string& prefix) {
  HeadParams p;
  p.weight = Var::parameter(fan_in_uniform({num_classes, d_model}, d_model, seed, prefix + "weight"));
  p.bias = Var::parameter(Tensor(Shape{num_classes}, 0.0));
  return p;
}

std::vector<NamedVar> HeadParams::named(const std::string& prefix) const {
  return {{prefix + "weight", weight}, {prefix + "bias", bias}};
}

namespace {

// conv -> SiLU -> selective scan for one direction, u[N x L x E].
Var scan_path(const Var& u, const SsmBlockParams& p) {
  const Var x = silu(depthwise_causal_conv(u, p.conv_w, p.conv_b));
  const auto sel = ssm::selective_params(x, p.kernel);
  return ssm::selective_scan(x, sel.delta, p.kernel.A_log, sel.B, sel.C, p.kernel.D);
}

void check_sequence(const Var& Z, const SsmBlockParams& p) {
  if (Z.value().rank() != 3 || Z.dim(2) != p.d_model()) {
    throw DimensionError("ssm block expects [N x L x " + std::to_string(p.d_model()) + "], got " + shape_str(Z.shape()));
  }
}

}  // namespace

Var ssm_block_forward(const Var& Z, const SsmBlockParams& p, Direction direction) {
  check_sequence(Z, p);
  const std::size_t E = p.d_inner();
  const Var xz = linear(Z, p.in_proj);
  const Var u = slice_last(xz, 0, E);
  const Var gate = slice_last(xz, E, E);
  const Var y = direction == Direction::kForward ? scan_path(u, p) : reverse_time(scan_path(reverse_time(u), p));
  return linear(mul(y, silu(gate)), p.out_proj);
}

Var bidir_block(const Var& Z, const SsmBlockParams& p, bool bidirectional) {
  check_sequence(Z, p);
  const std::size_t E = p.d_inner();
  // in_proj, the gate and out_proj act per timestep and commute with time
  // reversal, so both directions share them; only conv + scan run twice.
  const Var xz = linear(Z, p.in_proj);
  const Var u = slice_last(xz, 0, E);
  const Var gate = slice_last(xz, E, E);
  Var y = scan_path(u, p);
  if (bidirectional) y = add(y, reverse_time(scan_path(reverse_time(u), p)));
  const Var h = linear(mul(y, silu(gate)), p.out_proj);
  return layer_norm(add(Z, h), p.norm_gamma, p.norm_beta);
}

namespace {

Var as_batch(const Var& X) {
  if (X.value().rank() == 2) return reshape(X, Shape{1, X.dim(0), X.dim(1)});
  if (X.value().rank() != 3) throw DimensionError("stem expects [C x L] or [B x C x L], got " + shape_str(X.shape()));
  return X;
}

Var stem_apply(const Var& X3, StemParams& p, bool training) {
  const Var conv = conv1d(X3, p.weight, p.bias);
  const Var normed = batch_norm_1d(conv, p.bn_gamma, p.bn_beta, p.bn, training);
  return transpose_last(silu(normed));
}

}  // namespace

Var stem_ci(const Var& X, StemParams& p, bool training) {
  const Var X3 = as_batch(X);
  if (p.weight.dim(1) != 1) throw ConfigError("channel-independent stem needs a single-input-channel kernel");
  const std::size_t B = X3.dim(0), C = X3.dim(1), L = X3.dim(2);
  return stem_apply(reshape(X3, Shape{B * C, 1, L}), p, training);
}

Var stem_crossover(const Var& X, StemParams& p, bool training) {
  const Var X3 = as_batch(X);
  if (X3.dim(1) != p.weight.dim(1)) {
    throw ConfigError("crossover stem expects " + std::to_string(p.weight.dim(1)) + " channels, input has " +
                      std::to_string(X3.dim(1)));
  }
  return stem_apply(X3, p, training);
}

Var attention_weights(const Var& Z, const PoolingParams& p) {
  if (Z.value().rank() != 3) throw DimensionError("attention_pool expects [N x L x D], got " + shape_str(Z.shape()));
  const std::size_t N = Z.dim(0), L = Z.dim(1);
  const Var e = tanh(linear(Z, p.W_g, p.b_g));
  const Var scores = linear(e, reshape(p.v, Shape{1, p.v.numel()}));
  return softmax(reshape(scores, Shape{N, L}), 1);
}

Var attention_pool(const Var& Z, const PoolingParams& p) { return weighted_time_sum(attention_weights(Z, p), Z); }

Var mean_pool(const Var& Z) {
  if (Z.value().rank() != 3) throw DimensionError("mean_pool expects [N x L x D], got " + shape_str(Z.shape()));
  return mean_axis(Z, 1);
}

Var late_fuse(const Var& pooled, std::size_t channels) {
  if (pooled.value().rank() != 2 || channels == 0 || pooled.dim(0) % channels != 0) {
    throw DimensionError("late_fuse: " + shape_str(pooled.shape()) + " is not a stack of " + std::to_string(channels) +
                         "-channel groups");
  }
  const std::size_t B = pooled.dim(0) / channels;
  return mean_axis(reshape(pooled, Shape{B, channels, pooled.dim(1)}), 1);
}

Var classify(const Var& h, const HeadParams& p) { return linear(h, p.weight, p.bias); }

}  // namespace bm
