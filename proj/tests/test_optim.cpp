#include "doctest.h"

#include <cmath>
#include <sstream>

#include "babymamba/errors.hpp"
#include "babymamba/optim.hpp"
#include "test_util.hpp"

using namespace bm;

namespace {

PreparedData tiny_data(std::uint64_t seed = 1, std::size_t channels = 2, std::size_t L = 16) {
  SynthConfig sc;
  sc.n_subjects = 5;
  sc.channels = channels;
  sc.seq_len = L;
  sc.windows_per_class = 3;
  sc.noise = 0.2;
  sc.seed = seed;
  DatasetManifest m;
  m.name = "tiny";
  m.channels = channels;
  m.num_classes = 3;
  m.fs = sc.fs;
  m.seq_len = L;
  m.stride = L;
  return prepare(synth_har(sc), m);
}

ModelConfig tiny_model(Variant v = Variant::kCrossover, std::size_t channels = 2, std::size_t L = 16) {
  ModelConfig c = v == Variant::kCI ? ModelConfig::ci_default(channels, 3, L) : ModelConfig::crossover_default(channels, 3, L);
  c.d_model = 8;
  c.d_state = 4;
  c.n_layers = 1;
  return c;
}

TrainConfig quick_train(std::size_t epochs = 3) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 8;
  return t;
}

}  // namespace

// ---- AdamW ------------------------------------------------------------------

TEST_CASE("AdamW first step closed form") {
  Tensor theta = Tensor::scalar(1.0);
  AdamMoments s;
  adamw_step(theta, Tensor::scalar(1.0), s, 1, {1e-3, 0.9, 0.999, 1e-8, 0.01});
  CHECK(theta[0] == doctest::Approx(1.0 - 1e-3 / (1.0 + 1e-8) - 1e-5).epsilon(1e-14));
  CHECK(std::abs(theta[0] - 0.998990) < 5e-7);

  Tensor still = Tensor::vector({2.0, -3.0});
  AdamMoments s0;
  adamw_step(still, Tensor(Shape{2}), s0, 1, {1e-3, 0.9, 0.999, 1e-8, 0.0});
  CHECK(still == Tensor::vector({2.0, -3.0}));
  CHECK_THROWS_AS(adamw_step(still, Tensor(Shape{2}), s0, 0, {}), ContractError);
}

TEST_CASE("AdamW without decay matches textbook Adam") {
  Rng rng(7);
  double theta = 0.3, m = 0.0, v = 0.0;
  Tensor t = Tensor::scalar(theta);
  AdamMoments s;
  const AdamHyper h{3e-3, 0.9, 0.999, 1e-8, 0.0};
  for (std::size_t step = 1; step <= 20; ++step) {
    const double g = rng.normal();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, double(step)));
    const double vh = v / (1.0 - std::pow(0.999, double(step)));
    theta -= 3e-3 * mh / (std::sqrt(vh) + 1e-8);
    adamw_step(t, Tensor::scalar(g), s, step, h);
    CHECK(std::abs(t[0] - theta) < 1e-12);
  }
}

TEST_CASE("AdamW minimizes a scalar quadratic") {
  Var theta = Var::parameter(Tensor::scalar(5.0));
  AdamW opt({{"theta", theta}}, {1e-2, 0.9, 0.999, 1e-8, 0.0});
  std::size_t steps = 0;
  while (std::abs(theta.value()[0]) >= 0.1 && steps < 5000) {
    opt.zero_grad();
    backward(mul(theta, theta));
    opt.step();
    ++steps;
  }
  CHECK(std::abs(theta.value()[0]) < 0.1);
  CHECK(steps < 5000);
}

TEST_CASE("AdamW aborts on non-finite gradients without touching parameters") {
  Var a = Var::parameter(Tensor::scalar(1.0));
  Var b = Var::parameter(Tensor::scalar(2.0));
  AdamW opt({{"a", a}, {"b", b}}, {});
  a.node()->grad_ref()[0] = 0.5;
  b.node()->grad_ref()[0] = std::nan("");
  CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("'b'"), NumericError);
  CHECK(a.value()[0] == 1.0);
  CHECK(opt.steps() == 0);
}

// ---- clipping ---------------------------------------------------------------

TEST_CASE("global gradient norm clipping") {
  std::vector<Tensor> g{Tensor::vector({1.2, 0.0}), Tensor::vector({1.6})};
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(2.0));
  CHECK(g[0][0] == doctest::Approx(0.6));
  CHECK(g[1][0] == doctest::Approx(0.8));

  std::vector<Tensor> small{Tensor::vector({0.3, 0.4})};
  clip_grad_norm(small, 1.0);
  CHECK(small[0] == Tensor::vector({0.3, 0.4}));

  std::vector<Tensor> zero{Tensor(Shape{3})};
  CHECK(clip_grad_norm(zero, 1.0) == 0.0);
  CHECK(zero[0] == Tensor(Shape{3}));

  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> gs{testing::random_tensor({5}, rng, -10, 10), testing::random_tensor({2, 3}, rng, -10, 10)};
    clip_grad_norm(gs, 1.0);
    double sq = 0.0;
    for (const auto& t : gs) sq += t.flat().squaredNorm();
    CHECK(std::sqrt(sq) <= 1.0 + 1e-9);
  }
}

// ---- loss -------------------------------------------------------------------

TEST_CASE("label-smoothed cross-entropy") {
  const int y0[] = {0}, y1[] = {1};
  const Var uniform = Var::constant(Tensor::matrix({{0.0, 0.0}}));
  CHECK(smoothed_cross_entropy(uniform, y0, 0.1).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(smoothed_cross_entropy(uniform, y1, 0.1).value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  double prev = 1e300;
  for (double margin : {1.0, 5.0, 20.0, 50.0}) {
    const double l = smoothed_cross_entropy(Var::constant(Tensor::matrix({{margin, 0.0, 0.0}})), y0, 0.0).value()[0];
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-20);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t K = 2 + std::size_t(rng.below(5));
    const int y[] = {int(rng.below(K))};
    Var z = Var::parameter(testing::random_tensor({1, K}, rng, -3, 3));
    const double eps = 0.1;
    const Var loss = smoothed_cross_entropy(z, y, eps);
    // Gibbs: cross-entropy >= entropy of the smoothed target.
    double entropy = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double q = (int(k) == y[0] ? 1.0 - eps : 0.0) + eps / double(K);
      entropy -= q * std::log(q);
    }
    CHECK(loss.value()[0] >= entropy - 1e-12);
    backward(loss);
    CHECK(std::abs(z.grad().flat().sum()) < 1e-12);
  }
}

// ---- scheduler ----------------------------------------------------------------

TEST_CASE("plateau scheduler traces") {
  PlateauScheduler flat(1.0, 0.5, 5);
  double lr = 1.0;
  lr = flat.step(0.5);  // first value is an improvement
  for (int e = 0; e < 6; ++e) lr = flat.step(0.5);
  CHECK(lr == 0.5);
  CHECK(flat.reductions() == 1);
  for (int e = 0; e < 6; ++e) lr = flat.step(0.5);
  CHECK(flat.reductions() == 2);
  CHECK(lr == 0.25);

  PlateauScheduler up(1.0, 0.5, 5);
  for (int e = 0; e < 30; ++e) CHECK(up.step(0.01 * e) == 1.0);

  PlateauScheduler reset(1.0, 0.5, 3);
  for (double m : {0.1, 0.1, 0.1, 0.2, 0.2, 0.2}) reset.step(m);
  CHECK(reset.lr() == 1.0);
  reset.step(0.2);
  CHECK(reset.lr() == 0.5);
  CHECK_THROWS_AS(PlateauScheduler(1.0, 1.0, 5), ConfigError);
  CHECK_THROWS_AS(PlateauScheduler(1.0, 0.5, 0), ConfigError);
}

// ---- configuration ----------------------------------------------------------------

TEST_CASE("train config defaults and round-trip") {
  TrainConfig t;
  CHECK(t.lr == 1e-3);
  CHECK(t.batch_size == 64);
  CHECK(t.lr_patience == 5);
  CHECK(t.early_stop_patience == 10);
  CHECK(t.max_epochs == 200);
  CHECK(t.label_smoothing == 0.1);
  CHECK(t.n_seeds == 5);
  t.master_seed = 40;
  CHECK(t.seed_for(0) == 40);
  CHECK(t.seed_for(4) == 44);
  t.frozen = {"pool.v"};
  CHECK(TrainConfig::from_json(t.to_json()).to_json() == t.to_json());
  auto j = t.to_json();
  j["lr_factor"] = 1.5;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
  j = t.to_json();
  j["label_smoothing"] = 1.0;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
}

// ---- fit ----------------------------------------------------------------------

TEST_CASE("fit rejects empty or mismatched splits") {
  const auto data = tiny_data();
  Model m = build(tiny_model());
  WindowSet empty;
  CHECK_THROWS_AS(fit(m, empty, data.val, quick_train(), 0), ConfigError);
  CHECK_THROWS_AS(fit(m, data.train, empty, quick_train(), 0), ConfigError);
  Model wrong = build(tiny_model(Variant::kCrossover, 3));
  CHECK_THROWS_AS(fit(wrong, data.train, data.val, quick_train(), 0), DataError);
  auto cfg = quick_train();
  cfg.frozen = {"pool.nope"};
  CHECK_THROWS_AS(fit(m, data.train, data.val, cfg, 0), ConfigError);
}

TEST_CASE("fit is deterministic and restores the best checkpoint") {
  const auto data = tiny_data();
  auto run = [&](std::uint64_t seed) {
    ModelConfig mc = tiny_model();
    mc.seed = seed;
    Model m = build(mc);
    const auto r = fit(m, data.train, data.val, quick_train(4), seed);
    return std::make_pair(serialize(m), r);
  };
  const auto [bytes_a, ra] = run(3);
  const auto [bytes_b, rb] = run(3);
  CHECK(bytes_a == bytes_b);
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) CHECK(ra.log[i].to_json().dump() == rb.log[i].to_json().dump());
  const auto [bytes_c, rc] = run(4);
  CHECK(bytes_c != bytes_a);

  // The restored model reproduces the best logged validation F1.
  Model restored = deserialize(bytes_a);
  CHECK(macro_f1(evaluate(restored, data.val, 3)) == ra.best_val_f1);
  double best = -1.0;
  for (const auto& e : ra.log) best = std::max(best, e.val_f1);
  CHECK(ra.best_val_f1 == best);
  CHECK(ra.log[ra.best_epoch - 1].val_f1 == best);
}

TEST_CASE("early stopping after the patience window") {
  const auto data = tiny_data();
  Model m = build(tiny_model());
  auto cfg = quick_train(40);
  cfg.lr = 1e-12;
  cfg.weight_decay = 0.0;
  cfg.early_stop_patience = 3;
  cfg.augment = AugmentConfig::none();
  const auto r = fit(m, data.train, data.val, cfg, 1);
  CHECK(r.early_stopped);
  CHECK(r.log.size() == r.best_epoch + 3);
  CHECK(r.log.size() < 40);
}

TEST_CASE("frozen parameters keep their values") {
  const auto data = tiny_data();
  ModelConfig mc = tiny_model();
  mc.zero_attention_v = true;
  Model m = build(mc);
  auto cfg = quick_train(2);
  cfg.frozen = {"pool.v"};
  fit(m, data.train, data.val, cfg, 2);
  for (double v : m.pool->v.value().data()) CHECK(v == 0.0);
}

TEST_CASE("zero frozen attention scores reproduce mean pooling training") {
  const auto data = tiny_data(2);
  ModelConfig gated = tiny_model();
  gated.zero_attention_v = true;
  ModelConfig mean = tiny_model();
  mean.pooling = Pooling::kMean;
  auto cfg = quick_train(3);
  TrainConfig frozen = cfg;
  frozen.frozen = {"pool.v"};
  Model a = build(gated), b = build(mean);
  const auto ra = fit(a, data.train, data.val, frozen, 9);
  const auto rb = fit(b, data.train, data.val, cfg, 9);
  REQUIRE(ra.log.size() == rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].train_loss == rb.log[i].train_loss);
    CHECK(ra.log[i].val_f1 == rb.log[i].val_f1);
  }
}

TEST_CASE("train_seed scores the test split and stores normalization") {
  const auto data = tiny_data();
  auto run = train_seed(tiny_model(), data, quick_train(2), 11);
  CHECK(run.model.config().seed == 11);
  CHECK(run.result.seed == 11);
  CHECK(run.result.confusion.total() == data.test.size());
  CHECK(run.result.best_val_f1 == run.fit.best_val_f1);
  CHECK(run.model.extras.at("norm.center").numel() == 2);
}
