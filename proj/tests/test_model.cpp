#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "babymamba/grad_check.hpp"
#include "babymamba/model.hpp"
#include "test_util.hpp"

using namespace bm;
using bm::testing::random_tensor;

namespace {

ModelConfig toy(Variant v, std::size_t C, std::size_t L) {
  ModelConfig c = v == Variant::kCI ? ModelConfig::ci_default(C, 3, L) : ModelConfig::crossover_default(C, 3, L);
  c.d_model = 8;
  c.d_state = 4;
  c.n_layers = 2;
  c.seed = 5;
  return c;
}

std::uint64_t row_params(const CostReport& r, const std::string& name) {
  for (const auto& row : r.rows)
    if (row.name == name) return row.params;
  return 0;
}

}  // namespace

TEST_CASE("default parameter budgets") {
  const Model cross = build(ModelConfig::crossover_default(6, 6));
  CHECK(cross.parameter_count() >= 21600);
  CHECK(cross.parameter_count() <= 32400);
  const Model ci = build(ModelConfig::ci_default(9, 6));
  CHECK(ci.parameter_count() >= 22400);
  CHECK(ci.parameter_count() <= 33600);
  CHECK(row_params(count_params(ModelConfig::ci_default(9, 6)), "pool.attention") == 624);
}

TEST_CASE("analytic parameter count equals the built inventory") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c;
    c.variant = rng.bernoulli(0.5) ? Variant::kCI : Variant::kCrossover;
    c.d_model = 2 + rng.below(30);
    c.d_state = 1 + rng.below(16);
    c.n_layers = 1 + rng.below(4);
    c.expand = 1 + rng.below(3);
    c.k_stem = 1 + 2 * rng.below(4);
    c.k_conv = 1 + rng.below(5);
    c.dt_rank = rng.below(4);
    c.d_attn = rng.below(20);
    c.num_classes = 2 + rng.below(10);
    c.num_channels = 1 + rng.below(40);
    c.seq_len = 8 + rng.below(200);
    c.bidirectional = rng.bernoulli(0.5);
    c.pooling = rng.bernoulli(0.5) ? Pooling::kGated : Pooling::kMean;
    CHECK(count_params(c).total_params() == build(c).parameter_count());
  }
}

TEST_CASE("tying and sequence length leave the parameter count unchanged") {
  auto c = ModelConfig::crossover_default(6, 6);
  auto uni = c;
  uni.bidirectional = false;
  CHECK(build(c).parameter_count() == build(uni).parameter_count());
  const auto pb = build(c).parameters(), pu = build(uni).parameters();
  REQUIRE(pb.size() == pu.size());
  for (std::size_t i = 0; i < pb.size(); ++i) {
    CHECK(pb[i].first == pu[i].first);
    CHECK(pb[i].second.value() == pu[i].second.value());
  }
  auto longer = c;
  longer.seq_len = 512;
  CHECK(count_params(longer).total_params() == count_params(c).total_params());
  auto more = c;
  more.num_channels = 79;
  CHECK(count_params(more).params_in("backbone") == count_params(c).params_in("backbone"));
  CHECK(count_params(more).params_in("head") == count_params(c).params_in("head"));
}

TEST_CASE("hyperparameter deltas") {
  const auto base = ModelConfig::ci_default(9, 6);
  const double p0 = double(count_params(base).total_params());
  auto small_state = base;
  small_state.d_state = 8;
  const double ds = double(count_params(small_state).total_params()) / p0 - 1.0;
  CHECK(ds <= -0.10);
  CHECK(ds >= -0.20);
  auto wide = base;
  wide.expand = 3;
  const double de = double(count_params(wide).total_params()) / p0 - 1.0;
  CHECK(de >= 0.35);
  CHECK(de <= 0.55);
}

TEST_CASE("MAC scaling laws") {
  for (auto conv : {MacConvention::kLayers, MacConvention::kExecuted}) {
    const auto cross = ModelConfig::crossover_default(6, 6);
    const auto b3 = count_macs(cross, 3, 128, conv).backbone_macs();
    CHECK(b3 == count_macs(cross, 19, 128, conv).backbone_macs());
    CHECK(b3 == count_macs(cross, 79, 128, conv).backbone_macs());
    CHECK(count_macs(cross, 3, 256, conv).backbone_macs() == 2 * b3);

    const auto ci = ModelConfig::ci_default(9, 6);
    const auto c19 = count_macs(ci, 19, 128, conv).backbone_macs();
    const auto c79 = count_macs(ci, 79, 128, conv).backbone_macs();
    CHECK(c19 * 79 == c79 * 19);
    CHECK(count_macs(ci, 19, 256, conv).backbone_macs() == 2 * c19);

    // Stem cost grows linearly in C for the fused stem.
    CHECK(count_macs(cross, 6, 128, conv).macs_in("stem") == 2 * count_macs(cross, 3, 128, conv).macs_in("stem"));
  }
}

TEST_CASE("report totals equal the sum of rows") {
  const auto r = count_macs(ModelConfig::ci_default(9, 6), 9, 128, MacConvention::kExecuted);
  std::uint64_t p = 0, m = 0;
  for (const auto& row : r.rows) {
    p += row.params;
    m += row.macs;
  }
  CHECK(r.total_params() == p);
  CHECK(r.total_macs() == m);
  const auto j = r.to_json();
  CHECK(j["total_macs"].get<std::uint64_t>() == m);
  CHECK(r.macs_in("stem") + r.macs_in("backbone") + r.macs_in("head") == m);
}

TEST_CASE("instrumented forward matches the executed MAC count") {
  for (auto variant : {Variant::kCI, Variant::kCrossover})
    for (bool bidir : {true, false})
      for (auto pooling : {Pooling::kGated, Pooling::kMean}) {
        auto c = toy(variant, 3, 16);
        c.bidirectional = bidir;
        c.pooling = pooling;
        Model m = build(c);
        const Tensor X = random_tensor({1, 3, 16}, 1);
        MacCounter counter;
        m.predict(X);
        CHECK(counter.tally().total() == count_macs(c, 3, 16, MacConvention::kExecuted).total_macs());
      }
}

TEST_CASE("scan cost is linear in sequence length") {
  auto c = toy(Variant::kCrossover, 2, 16);
  auto c2 = c;
  c2.seq_len = 32;
  Model m = build(c), m2 = build(c2);
  std::uint64_t s1, s2;
  {
    MacCounter counter;
    m.predict(random_tensor({1, 2, 16}, 1));
    s1 = counter.tally().scan;
  }
  {
    MacCounter counter;
    m2.predict(random_tensor({1, 2, 32}, 1));
    s2 = counter.tally().scan;
  }
  CHECK(s1 > 0);
  CHECK(s2 == 2 * s1);
}

TEST_CASE("forward shapes and finiteness") {
  for (auto variant : {Variant::kCI, Variant::kCrossover}) {
    Model m = build(toy(variant, 3, 16));
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
      const Tensor logits = m.predict(random_tensor({3, 16}, rng, -5.0, 5.0));
      CHECK(logits.shape() == Shape{1, 3});
      CHECK(logits.all_finite());
    }
    CHECK(m.predict(random_tensor({4, 3, 16}, 1)).shape() == Shape{4, 3});
    CHECK_THROWS_AS(m.predict(Tensor(Shape{2, 16})), DimensionError);
    CHECK_THROWS_AS(m.predict(Tensor(Shape{3, 15})), DimensionError);
  }
}

TEST_CASE("CI with identical channels equals the single-channel model") {
  auto c3 = toy(Variant::kCI, 3, 16);
  auto c1 = c3;
  c1.num_channels = 1;
  Model m3 = build(c3), m1 = build(c1);
  const Tensor x = random_tensor({1, 16}, 4);
  Tensor X(Shape{3, 16});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 16; ++t) X.at(c, t) = x[t];
  CHECK(max_abs_diff(m3.predict(X), m1.predict(x)) < 1e-12);
}

TEST_CASE("build is deterministic") {
  const auto c = ModelConfig::crossover_default(6, 6);
  CHECK(serialize(build(c)) == serialize(build(c)));
  auto other = c;
  other.seed = 1;
  CHECK(serialize(build(c)) != serialize(build(other)));
}

TEST_CASE("serialization round-trip") {
  auto c = toy(Variant::kCI, 3, 16);
  Model m = build(c);
  m.extras["norm.mean"] = Tensor::vector({1.0, 2.0, 3.0});
  m.stem.bn.running_mean.fill(0.25);
  const auto bytes = serialize(m);
  Model back = deserialize(bytes);
  CHECK(serialize(back) == bytes);
  CHECK(back.extras.at("norm.mean") == m.extras.at("norm.mean"));
  const Tensor X = random_tensor({3, 16}, 2);
  CHECK(back.predict(X) == m.predict(X));

  const auto path = std::filesystem::temp_directory_path() / "bm_model_roundtrip.bin";
  save_model(m, path);
  CHECK(serialize(load_model(path)) == bytes);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_model(path), DataError);
}

TEST_CASE("malformed model files are rejected") {
  const auto bytes = serialize(build(toy(Variant::kCrossover, 2, 8)));
  auto bad_version = bytes;
  bad_version[8] = 2;
  CHECK_THROWS_WITH_AS(deserialize(bad_version), doctest::Contains("version"), DataError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad_magic), DataError);
  for (std::size_t cut : {std::size_t(4), std::size_t(20), bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize(std::span(bytes).first(cut)), DataError);
  }
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize(trailing), DataError);
}

TEST_CASE("config JSON round-trip and validation") {
  auto c = toy(Variant::kCI, 7, 32);
  c.pooling = Pooling::kMean;
  c.bidirectional = false;
  const auto back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto bad = c;
  bad.d_state = 0;
  CHECK_THROWS_AS(build(bad), ConfigError);
  bad = c;
  bad.k_stem = 4;
  CHECK_THROWS_AS(build(bad), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"variant", "transformer"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json({{"d_model", "wide"}}), ConfigError);
}

TEST_CASE("full-model gradients match finite differences") {
  for (auto variant : {Variant::kCI, Variant::kCrossover})
    for (auto pooling : {Pooling::kGated, Pooling::kMean}) {
      auto c = toy(variant, 2, 8);
      c.d_model = 4;
      c.d_state = 2;
      c.n_layers = 1;
      c.pooling = pooling;
      Model m = build(c);
      const Tensor X = random_tensor({2, 2, 8}, 3);
      const int labels[] = {0, 2};
      std::vector<Var> params;
      for (auto& [name, v] : m.parameters()) params.push_back(v);
      const auto saved = m.stem.bn;
      const double err = grad_check(
          [&] {
            m.stem.bn = saved;
            return smoothed_cross_entropy(m.forward(X, true), labels, 0.1);
          },
          params, 1e-6);
      CHECK(err < 1e-3);
    }
}
