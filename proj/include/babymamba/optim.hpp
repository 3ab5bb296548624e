#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "babymamba/datapipe.hpp"
#include "babymamba/metrics.hpp"
#include "babymamba/model.hpp"

namespace bm {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  double lr_factor = 0.5;
  std::size_t lr_patience = 5;
  std::size_t early_stop_patience = 10;
  std::size_t max_epochs = 200;
  double clip_max_norm = 1.0;
  double label_smoothing = 0.1;
  std::size_t batch_size = 64;
  std::size_t eval_batch_size = 256;
  std::uint64_t master_seed = 0;
  std::size_t n_seeds = 5;
  AugmentConfig augment;
  std::vector<std::string> frozen;  // parameter names excluded from updates

  std::uint64_t seed_for(std::size_t i) const { return master_seed + i; }
  bool is_frozen(const std::string& name) const;
  void validate() const;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// ---- AdamW ------------------------------------------------------------------

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamMoments {
  Tensor m;
  Tensor v;
};

// One decoupled-weight-decay Adam update of theta in place; t is the
// 1-based step count.
void adamw_step(Tensor& theta, const Tensor& grad, AdamMoments& state, std::size_t t, const AdamHyper& h);

class AdamW {
 public:
  AdamW(std::vector<NamedVar> params, const AdamHyper& h);

  // Applies one update to every parameter from its accumulated gradient.
  // Throws NumericError naming the first non-finite gradient before any
  // parameter changes.
  void step();
  void zero_grad();

  double lr() const { return h_.lr; }
  void set_lr(double lr) { h_.lr = lr; }
  std::size_t steps() const { return t_; }
  const std::vector<NamedVar>& params() const { return params_; }

 private:
  std::vector<NamedVar> params_;
  std::vector<AdamMoments> state_;
  AdamHyper h_;
  std::size_t t_ = 0;
};

// ---- gradient clipping --------------------------------------------------------

// Rescales all gradients by max_norm / norm when their global L2 norm exceeds
// max_norm. Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);
double clip_grad_norm(const std::vector<NamedVar>& params, double max_norm);

// ---- learning-rate schedule -----------------------------------------------------

// Maximizing reduce-on-plateau: after `patience` consecutive epochs without a
// strict improvement the rate is multiplied by `factor` and the count resets.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience);

  double step(double metric);
  double lr() const { return lr_; }
  std::size_t reductions() const { return reductions_; }

 private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::size_t bad_epochs_ = 0;
  std::size_t reductions_ = 0;
};

// ---- training -----------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_f1 = 0.0;
  double lr = 0.0;
  double elapsed = 0.0;  // seconds since the start of fit

  // The deterministic fields only; timing is logged separately.
  nlohmann::json to_json() const;
};

struct FitResult {
  std::vector<EpochRecord> log;
  double best_val_f1 = 0.0;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place and restores the best-validation checkpoint. Batch order and
// augmentation come from one stream seeded by `seed`.
FitResult fit(Model& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg, std::uint64_t seed,
              const EpochCallback& on_epoch = {});

std::vector<int> predict_labels(Model& model, const WindowSet& ws, std::size_t batch_size = 256);
ConfusionMatrix evaluate(Model& model, const WindowSet& ws, std::size_t num_classes, std::size_t batch_size = 256);

struct SeedRun {
  Model model;
  FitResult fit;
  SeedResult result;
};

// Builds the model with cfg.seed = seed, fits on train/val and scores on test.
SeedRun train_seed(ModelConfig model_cfg, const PreparedData& data, const TrainConfig& cfg, std::uint64_t seed,
                   const EpochCallback& on_epoch = {});

}  // namespace bm
