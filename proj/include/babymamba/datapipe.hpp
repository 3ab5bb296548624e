#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "babymamba/random.hpp"
#include "babymamba/tensor.hpp"

namespace bm {

// ---- recordings and windows -------------------------------------------------

struct Recording {
  std::int64_t subject = 0;
  Tensor channels;                // [C x T]
  std::vector<double> timestamps;  // length T
  std::vector<int> labels;        // length T
  double sampling_rate = 0.0;

  std::size_t num_channels() const { return channels.dim(0); }
  std::size_t length() const { return channels.dim(1); }
  void validate() const;
};

struct WindowSet {
  std::size_t channels = 0;
  std::size_t seq_len = 0;
  std::vector<Tensor> windows;  // each [C x L]
  std::vector<int> labels;
  std::vector<std::int64_t> subjects;
  std::vector<std::size_t> sources;  // index of the source recording
  std::vector<std::size_t> chrono;   // window order within its source
  std::vector<std::size_t> starts;   // first sample within its source
  std::string split;
  std::vector<std::string> warnings;

  std::size_t size() const { return windows.size(); }
  bool empty() const { return windows.empty(); }

  void append(const WindowSet& other);
  WindowSet subset(std::span<const std::size_t> indices, const std::string& tag) const;
  // Stack selected windows into [n x C x L].
  Tensor batch(std::span<const std::size_t> indices) const;
  std::vector<std::int64_t> subject_ids() const;  // sorted, unique
  std::size_t num_classes_seen() const;
};

// Most frequent label; ties go to the label whose first occurrence is earliest.
int majority_label(std::span<const int> labels);

WindowSet window(const Recording& rec, std::size_t seq_len, std::size_t stride, std::size_t source = 0);
WindowSet window_all(std::span<const Recording> recs, std::size_t seq_len, std::size_t stride);

// ---- normalization ----------------------------------------------------------

enum class NormMode { kZscore, kRobust };

std::string to_string(NormMode m);

inline constexpr double kScaleFloor = 1e-8;

struct NormStats {
  NormMode mode = NormMode::kZscore;
  std::vector<double> center;  // mean or median per channel
  std::vector<double> scale;   // std or IQR per channel, floored

  static NormStats fit(const WindowSet& train, NormMode mode);
  Tensor apply(const Tensor& window) const;
  WindowSet apply(const WindowSet& ws) const;

  nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);
};

WindowSet normalize(const WindowSet& ws, const NormStats& stats);

// Linear-interpolation quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> values, double q);

// ---- filtering --------------------------------------------------------------

struct IirFilter {
  std::vector<double> b;
  std::vector<double> a;  // a[0] == 1
};

// Digital Butterworth low-pass via the bilinear transform with pre-warping.
IirFilter butter_lowpass(std::size_t order, double cutoff_hz, double fs_hz);

// Direct form II transposed; `zi` (length max(|a|,|b|) - 1) may be empty.
std::vector<double> lfilter(const IirFilter& f, std::span<const double> x, std::span<const double> zi = {});
// Steady-state initial conditions for a unit step.
std::vector<double> lfilter_zi(const IirFilter& f);
// Forward-backward filtering with odd reflection padding.
std::vector<double> filtfilt(const IirFilter& f, std::span<const double> x, std::size_t padlen);

// x: [C x T]. Zero-phase low-pass applied per channel.
Tensor butter_lowpass_filtfilt(const Tensor& x, double cutoff_hz, double fs_hz, std::size_t order = 4);

// ---- splits -----------------------------------------------------------------

enum class SplitProtocol { kSubject, kLoso, kTemporal };

std::string to_string(SplitProtocol p);
SplitProtocol parse_split_protocol(const std::string& s);

struct Split {
  WindowSet train;
  WindowSet test;
};

Split split_subject(const WindowSet& ws, std::span<const std::int64_t> test_subjects);
std::vector<Split> split_loso(const WindowSet& ws);
// Per class, the chronologically first floor(train_frac * n) windows train.
Split split_temporal(const WindowSet& ws, double train_frac = 0.8);

// ---- augmentation -----------------------------------------------------------

struct AugmentConfig {
  double p_time_warp = 0.5;
  std::size_t warp_knots = 4;
  double warp_sigma = 0.1;  // knot displacement std as a fraction of L
  double p_magnitude = 0.5;
  double magnitude_lo = 0.8;
  double magnitude_hi = 1.2;
  double p_jitter = 0.3;
  double jitter_sigma = 0.05;
  double p_channel_dropout = 0.2;

  static AugmentConfig none();
  nlohmann::json to_json() const;
  static AugmentConfig from_json(const nlohmann::json& j);
};

// Monotone piecewise-linear reparameterization of time, resampled to L.
Tensor time_warp(const Tensor& x, std::size_t knots, double sigma, Rng& rng);
// x: [C x L]. Each transform is gated independently, in the order time warp,
// magnitude, jitter, channel dropout.
Tensor augment(const Tensor& x, const AugmentConfig& cfg, Rng& rng);

// ---- synthetic data ---------------------------------------------------------

struct SynthConfig {
  std::size_t n_subjects = 8;
  std::size_t classes = 3;
  std::size_t channels = 6;
  std::size_t seq_len = 128;
  double fs = 50.0;
  std::size_t windows_per_class = 8;  // per subject, in units of seq_len samples
  double noise = 0.3;
  // Classes are time-reversed copies of one another instead of distinct tones.
  bool asymmetric = false;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

// One recording per subject; class segments follow each other in a
// subject-specific order.
std::vector<Recording> synth_har(const SynthConfig& cfg);

// ---- files, manifests and presets ---------------------------------------------

// Canonical CSV: header `subject,timestamp,label,ch_0,...`, one row per sample.
// Rows of one subject form one recording.
std::vector<Recording> load_csv(const std::filesystem::path& path, double sampling_rate);
void write_csv(const std::filesystem::path& path, std::span<const Recording> recs);

enum class Preprocessing { kZscore, kRescueRobust, kRescueLowpass };

std::string to_string(Preprocessing p);
Preprocessing parse_preprocessing(const std::string& s);

struct DatasetManifest {
  std::string name;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  double fs = 0.0;
  std::size_t seq_len = 0;
  std::size_t stride = 0;
  Preprocessing preprocessing = Preprocessing::kZscore;
  SplitProtocol protocol = SplitProtocol::kSubject;
  double cutoff_hz = 5.0;
  double train_frac = 0.8;
  std::vector<std::int64_t> test_subjects;  // empty: last 20% of subject ids
  std::vector<std::string> files;           // CSV paths, relative to the manifest

  void validate() const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

struct DatasetPreset {
  std::string name;
  std::size_t subjects;
  std::size_t classes;
  std::size_t channels;
  double fs;
  std::size_t seq_len;
  std::size_t stride;
  Preprocessing preprocessing;
  SplitProtocol protocol;
};

const std::vector<DatasetPreset>& dataset_presets();
const DatasetPreset& dataset_preset(const std::string& name);
DatasetManifest manifest_from_preset(const DatasetPreset& p);

// ---- end-to-end preparation -------------------------------------------------

struct PreparedData {
  WindowSet train;
  WindowSet val;
  WindowSet test;
  NormStats norm;
};

// Filter (rescue modes), window, split into train/val/test by the manifest
// protocol, and normalize with statistics of the training windows. `fold`
// selects the held-out subject for LOSO.
PreparedData prepare(std::span<const Recording> recs, const DatasetManifest& m, std::size_t fold = 0);

// Loads every manifest file and runs prepare().
PreparedData prepare_from_manifest(const std::filesystem::path& manifest_path, std::size_t fold = 0);

}  // namespace bm
