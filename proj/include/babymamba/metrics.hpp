#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace bm {

// Rows are true classes, columns predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes);
  static ConfusionMatrix from_labels(std::span<const int> truth, std::span<const int> predicted,
                                     std::size_t num_classes);

  void add(int truth, int predicted);
  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }
  std::uint64_t total() const;

  nlohmann::json to_json() const;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

// Per-class F1 with F1 = 0 whenever precision + recall = 0.
std::vector<double> per_class_f1(const ConfusionMatrix& cm);
double macro_f1(const ConfusionMatrix& cm);
double balanced_accuracy(const ConfusionMatrix& cm);

struct SeedSummary {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1); 0 for a single value
};

SeedSummary aggregate_seeds(std::span<const double> values);

struct SeedResult {
  std::uint64_t seed = 0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  ConfusionMatrix confusion{2};
  double best_val_f1 = 0.0;
  std::size_t best_epoch = 0;
};

// SHA-1 of "blob <size>\0" + content, as hex (the git object id).
std::string git_blob_hash(std::string_view content);
// SHA-1 hex of the compact JSON dump.
std::string config_hash(const nlohmann::json& config);

nlohmann::json results_json(const std::vector<SeedResult>& seeds, const std::string& config_digest,
                            const std::string& manifest_digest);

}  // namespace bm
