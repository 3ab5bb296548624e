#include "babymamba/metrics.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>

#include "babymamba/errors.hpp"

namespace bm {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes < 2) throw ConfigError("confusion matrix needs at least 2 classes");
}

ConfusionMatrix ConfusionMatrix::from_labels(std::span<const int> truth, std::span<const int> predicted,
                                             std::size_t num_classes) {
  if (truth.size() != predicted.size()) {
    throw DimensionError("confusion matrix: " + std::to_string(truth.size()) + " labels vs " +
                         std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

void ConfusionMatrix::add(int truth, int predicted) {
  const auto k = static_cast<int>(k_);
  if (truth < 0 || truth >= k || predicted < 0 || predicted >= k) {
    throw DataError("confusion matrix: label pair (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                    ") outside 0.." + std::to_string(k - 1));
  }
  ++counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(predicted)];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t n = 0;
  for (auto c : counts_) n += c;
  return n;
}

nlohmann::json ConfusionMatrix::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < k_; ++i) {
    std::vector<std::uint64_t> row(counts_.begin() + static_cast<std::ptrdiff_t>(i * k_),
                                   counts_.begin() + static_cast<std::ptrdiff_t>((i + 1) * k_));
    rows.push_back(row);
  }
  return rows;
}

std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NumericError("F1 is undefined for an empty confusion matrix");
  const std::size_t K = cm.num_classes();
  std::vector<double> f1(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t tp = cm.at(k, k), pred = 0, actual = 0;
    for (std::size_t j = 0; j < K; ++j) {
      pred += cm.at(j, k);
      actual += cm.at(k, j);
    }
    // 2PR / (P + R) = 2 tp / (pred + actual)
    if (pred + actual > 0) f1[k] = 2.0 * double(tp) / double(pred + actual);
  }
  return f1;
}

double macro_f1(const ConfusionMatrix& cm) {
  const auto f1 = per_class_f1(cm);
  double s = 0.0;
  for (double v : f1) s += v;
  return s / double(f1.size());
}

double balanced_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw NumericError("balanced accuracy is undefined for an empty confusion matrix");
  const std::size_t K = cm.num_classes();
  double s = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t actual = 0;
    for (std::size_t j = 0; j < K; ++j) actual += cm.at(k, j);
    if (actual == 0) continue;
    s += double(cm.at(k, k)) / double(actual);
    ++present;
  }
  return s / double(present);
}

SeedSummary aggregate_seeds(std::span<const double> values) {
  if (values.empty()) throw ContractError("aggregate_seeds needs at least one value");
  SeedSummary s;
  for (double v : values) s.mean += v;
  s.mean /= double(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / double(values.size() - 1));
  }
  return s;
}

namespace {

std::string sha1_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("SHA-1 digest failed");
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

}  // namespace

std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  return sha1_hex(blob);
}

std::string config_hash(const nlohmann::json& config) { return sha1_hex(config.dump()); }

nlohmann::json results_json(const std::vector<SeedResult>& seeds, const std::string& config_digest,
                            const std::string& manifest_digest) {
  nlohmann::json per_seed = nlohmann::json::array();
  std::vector<double> f1s;
  for (const auto& r : seeds) {
    per_seed.push_back({{"seed", r.seed},
                        {"macro_f1", r.macro_f1},
                        {"per_class_f1", r.per_class_f1},
                        {"confusion_matrix", r.confusion.to_json()},
                        {"best_val_f1", r.best_val_f1},
                        {"best_epoch", r.best_epoch}});
    f1s.push_back(r.macro_f1);
  }
  nlohmann::json j{{"seeds", per_seed}, {"config_hash", config_digest}, {"manifest_hash", manifest_digest}};
  if (!f1s.empty()) {
    const auto s = aggregate_seeds(f1s);
    j["macro_f1_mean"] = s.mean;
    j["macro_f1_std"] = s.std;
  }
  return j;
}

}  // namespace bm
