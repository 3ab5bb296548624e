#include "babymamba/optim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "babymamba/errors.hpp"

namespace bm {

// ---- config -----------------------------------------------------------------

bool TrainConfig::is_frozen(const std::string& name) const {
  return std::find(frozen.begin(), frozen.end(), name) != frozen.end();
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("scheduler factor must lie in (0, 1)");
  if (lr_patience < 1 || early_stop_patience < 1) throw ConfigError("patiences must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (!(clip_max_norm > 0.0)) throw ConfigError("clip_max_norm must be positive");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw ConfigError("label smoothing must lie in [0, 1)");
  if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
  if (n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"adam_eps", adam_eps},
          {"weight_decay", weight_decay},
          {"lr_factor", lr_factor},
          {"lr_patience", lr_patience},
          {"early_stop_patience", early_stop_patience},
          {"max_epochs", max_epochs},
          {"clip_max_norm", clip_max_norm},
          {"label_smoothing", label_smoothing},
          {"batch_size", batch_size},
          {"eval_batch_size", eval_batch_size},
          {"master_seed", master_seed},
          {"n_seeds", n_seeds},
          {"augment", augment.to_json()},
          {"frozen", frozen}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("weight_decay", c.weight_decay);
    get("lr_factor", c.lr_factor);
    get("lr_patience", c.lr_patience);
    get("early_stop_patience", c.early_stop_patience);
    get("max_epochs", c.max_epochs);
    get("clip_max_norm", c.clip_max_norm);
    get("label_smoothing", c.label_smoothing);
    get("batch_size", c.batch_size);
    get("eval_batch_size", c.eval_batch_size);
    get("master_seed", c.master_seed);
    get("n_seeds", c.n_seeds);
    get("frozen", c.frozen);
    if (j.contains("augment")) c.augment = AugmentConfig::from_json(j.at("augment"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- AdamW ------------------------------------------------------------------

void adamw_step(Tensor& theta, const Tensor& grad, AdamMoments& state, std::size_t t, const AdamHyper& h) {
  if (t < 1) throw ContractError("adamw_step: step count must be >= 1");
  if (grad.shape() != theta.shape()) {
    throw DimensionError("adamw_step: gradient " + shape_str(grad.shape()) + " vs parameter " + shape_str(theta.shape()));
  }
  if (state.m.empty()) {
    state.m = Tensor(theta.shape());
    state.v = Tensor(theta.shape());
  }
  const double bc1 = 1.0 - std::pow(h.beta1, double(t));
  const double bc2 = 1.0 - std::pow(h.beta2, double(t));
  auto p = theta.flat();
  auto m = state.m.flat();
  auto v = state.v.flat();
  const auto g = grad.flat();
  m = h.beta1 * m + (1.0 - h.beta1) * g;
  v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);
  const Eigen::VectorXd update = (m.array() / bc1) / ((v.array() / bc2).sqrt() + h.eps);
  p -= h.lr * update + h.lr * h.weight_decay * p;
}

AdamW::AdamW(std::vector<NamedVar> params, const AdamHyper& h)
    : params_(std::move(params)), state_(params_.size()), h_(h) {}

void AdamW::step() {
  for (const auto& [name, var] : params_) {
    if (var.has_grad() && !var.node()->grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + name + "' at optimizer step " + std::to_string(t_ + 1));
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& var = params_[i].second;
    adamw_step(var.mutable_value(), var.grad(), state_[i], t_, h_);
  }
}

void AdamW::zero_grad() {
  for (auto& [name, var] : params_) var.zero_grad();
}

// ---- clipping ---------------------------------------------------------------

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.flat().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) g.flat() *= s;
  }
  return norm;
}

double clip_grad_norm(const std::vector<NamedVar>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, var] : params)
    if (var.has_grad()) sq += var.node()->grad.flat().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, var] : params)
      if (var.has_grad()) var.node()->grad.flat() *= s;
  }
  return norm;
}

// ---- scheduler ----------------------------------------------------------------

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience)
    : lr_(lr), factor_(factor), patience_(patience) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("scheduler factor must lie in (0, 1)");
  if (patience < 1) throw ConfigError("scheduler patience must be >= 1");
}

double PlateauScheduler::step(double metric) {
  if (metric > best_) {
    best_ = metric;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= patience_) {
    lr_ *= factor_;
    ++reductions_;
    bad_epochs_ = 0;
  }
  return lr_;
}

// ---- training ---------------------------------------------------------------

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_f1", val_f1}, {"lr", lr}};
}

std::vector<int> predict_labels(Model& model, const WindowSet& ws, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(ws.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ws.size(); start += batch_size) {
    idx.resize(std::min(batch_size, ws.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = model.predict(ws.batch(idx));
    const std::size_t K = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < K; ++k)
        if (logits.at(i, k) > logits.at(i, best)) best = k;
      out.push_back(int(best));
    }
  }
  return out;
}

ConfusionMatrix evaluate(Model& model, const WindowSet& ws, std::size_t num_classes, std::size_t batch_size) {
  if (ws.empty()) throw ConfigError("cannot evaluate on an empty " + (ws.split.empty() ? std::string("set") : ws.split + " set"));
  return ConfusionMatrix::from_labels(ws.labels, predict_labels(model, ws, batch_size), num_classes);
}

namespace {

void check_compatible(const Model& model, const WindowSet& ws, const std::string& what) {
  const auto& mc = model.config();
  if (ws.channels != mc.num_channels) {
    throw DataError(what + " windows have " + std::to_string(ws.channels) + " channels, the model expects " +
                    std::to_string(mc.num_channels));
  }
  for (int y : ws.labels) {
    if (y < 0 || std::size_t(y) >= mc.num_classes) {
      throw DataError(what + " label " + std::to_string(y) + " is outside [0, " + std::to_string(mc.num_classes) + ")");
    }
  }
}

}  // namespace

FitResult fit(Model& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg, std::uint64_t seed,
              const EpochCallback& on_epoch) {
  cfg.validate();
  if (train.empty()) throw ConfigError("training split is empty");
  if (val.empty()) throw ConfigError("validation split is empty");
  check_compatible(model, train, "training");
  check_compatible(model, val, "validation");
  const std::size_t K = model.config().num_classes;

  std::vector<NamedVar> trainable;
  for (const auto& p : model.parameters())
    if (!cfg.is_frozen(p.first)) trainable.push_back(p);
  for (const auto& name : cfg.frozen) {
    const auto all = model.parameters();
    if (std::none_of(all.begin(), all.end(), [&](const NamedVar& p) { return p.first == name; })) {
      throw ConfigError("frozen parameter '" + name + "' does not exist");
    }
  }
  AdamW opt(trainable, {cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay});
  PlateauScheduler sched(cfg.lr, cfg.lr_factor, cfg.lr_patience);

  Model best = build(model.config());
  copy_state(model, best);
  Rng rng = named_stream(seed, "fit");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t C = train.channels, L = train.seq_len;

  FitResult result;
  result.best_val_f1 = -1.0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      Tensor X(Shape{n, C, L});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t w = order[start + i];
        const Tensor x = augment(train.windows[w], cfg.augment, rng);
        std::copy(x.data().begin(), x.data().end(), X.data().begin() + std::ptrdiff_t(i * C * L));
        labels[i] = train.labels[w];
      }
      opt.zero_grad();
      const Var loss = smoothed_cross_entropy(model.forward(X, true), labels, cfg.label_smoothing);
      if (!std::isfinite(loss.value()[0])) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      backward(loss);
      clip_grad_norm(trainable, cfg.clip_max_norm);
      opt.step();
      loss_sum += loss.value()[0] * double(n);
    }
    opt.zero_grad();

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(train.size());
    rec.val_f1 = macro_f1(evaluate(model, val, K, cfg.eval_batch_size));
    rec.lr = opt.lr();
    rec.elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.val_f1 > result.best_val_f1) {
      result.best_val_f1 = rec.val_f1;
      result.best_epoch = epoch;
      copy_state(model, best);
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      result.early_stopped = true;
      break;
    }
    opt.set_lr(sched.step(rec.val_f1));
  }
  copy_state(best, model);
  return result;
}

SeedRun train_seed(ModelConfig model_cfg, const PreparedData& data, const TrainConfig& cfg, std::uint64_t seed,
                   const EpochCallback& on_epoch) {
  model_cfg.seed = seed;
  SeedRun run{build(model_cfg), {}, {}};
  run.model.extras["norm.center"] = Tensor(Shape{data.norm.center.size()}, data.norm.center);
  run.model.extras["norm.scale"] = Tensor(Shape{data.norm.scale.size()}, data.norm.scale);
  run.fit = fit(run.model, data.train, data.val, cfg, seed, on_epoch);
  const auto cm = evaluate(run.model, data.test, model_cfg.num_classes, cfg.eval_batch_size);
  run.result.seed = seed;
  run.result.macro_f1 = macro_f1(cm);
  run.result.per_class_f1 = per_class_f1(cm);
  run.result.confusion = cm;
  run.result.best_val_f1 = run.fit.best_val_f1;
  run.result.best_epoch = run.fit.best_epoch;
  return run;
}

}  // namespace bm
