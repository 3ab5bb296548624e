#include "babymamba/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "babymamba/errors.hpp"

namespace bm {

// ---- recordings and windows -------------------------------------------------

void Recording::validate() const {
  if (channels.rank() != 2) throw DataError("recording channels must be [C x T], got " + shape_str(channels.shape()));
  if (labels.size() != length() || timestamps.size() != length()) {
    throw DataError("recording of subject " + std::to_string(subject) + ": " + std::to_string(length()) +
                    " samples but " + std::to_string(labels.size()) + " labels and " +
                    std::to_string(timestamps.size()) + " timestamps");
  }
  if (!(sampling_rate > 0.0)) throw DataError("recording sampling rate must be positive");
}

void WindowSet::append(const WindowSet& other) {
  if (other.empty()) {
    warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
    return;
  }
  if (empty() && channels == 0) {
    channels = other.channels;
    seq_len = other.seq_len;
  }
  if (other.channels != channels || other.seq_len != seq_len) {
    throw DimensionError("window sets differ in shape: " + std::to_string(channels) + "x" + std::to_string(seq_len) +
                         " vs " + std::to_string(other.channels) + "x" + std::to_string(other.seq_len));
  }
  windows.insert(windows.end(), other.windows.begin(), other.windows.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  subjects.insert(subjects.end(), other.subjects.begin(), other.subjects.end());
  sources.insert(sources.end(), other.sources.begin(), other.sources.end());
  chrono.insert(chrono.end(), other.chrono.begin(), other.chrono.end());
  starts.insert(starts.end(), other.starts.begin(), other.starts.end());
  warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
}

WindowSet WindowSet::subset(std::span<const std::size_t> indices, const std::string& tag) const {
  WindowSet out;
  out.channels = channels;
  out.seq_len = seq_len;
  out.split = tag;
  for (auto i : indices) {
    out.windows.push_back(windows.at(i));
    out.labels.push_back(labels[i]);
    out.subjects.push_back(subjects[i]);
    out.sources.push_back(sources[i]);
    out.chrono.push_back(chrono[i]);
    out.starts.push_back(starts[i]);
  }
  return out;
}

Tensor WindowSet::batch(std::span<const std::size_t> indices) const {
  Tensor out(Shape{indices.size(), channels, seq_len});
  const std::size_t stride = channels * seq_len;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& w = windows.at(indices[k]);
    std::copy(w.data().begin(), w.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(k * stride));
  }
  return out;
}

std::vector<std::int64_t> WindowSet::subject_ids() const {
  std::set<std::int64_t> ids(subjects.begin(), subjects.end());
  return {ids.begin(), ids.end()};
}

std::size_t WindowSet::num_classes_seen() const { return std::set<int>(labels.begin(), labels.end()).size(); }

int majority_label(std::span<const int> labels) {
  if (labels.empty()) throw ContractError("majority_label of an empty span");
  std::map<int, std::pair<std::size_t, std::size_t>> stats;  // label -> (count, first position)
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = stats.try_emplace(labels[i], 0, i);
    ++it->second.first;
  }
  int best = labels[0];
  std::size_t best_count = 0, best_first = 0;
  for (const auto& [label, cf] : stats) {
    if (cf.first > best_count || (cf.first == best_count && cf.second < best_first)) {
      best = label;
      best_count = cf.first;
      best_first = cf.second;
    }
  }
  return best;
}

WindowSet window(const Recording& rec, std::size_t seq_len, std::size_t stride, std::size_t source) {
  rec.validate();
  if (seq_len == 0 || stride == 0) throw ConfigError("window length and stride must be >= 1");
  WindowSet ws;
  ws.channels = rec.num_channels();
  ws.seq_len = seq_len;
  const std::size_t C = rec.num_channels(), T = rec.length();
  if (seq_len > T) {
    ws.warnings.push_back("subject " + std::to_string(rec.subject) + ": recording of " + std::to_string(T) +
                          " samples is shorter than the window length " + std::to_string(seq_len));
    return ws;
  }
  std::size_t k = 0;
  for (std::size_t off = 0; off + seq_len <= T; off += stride, ++k) {
    Tensor w(Shape{C, seq_len});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < seq_len; ++t) w.at(c, t) = rec.channels.at(c, off + t);
    ws.windows.push_back(std::move(w));
    ws.labels.push_back(majority_label(std::span(rec.labels).subspan(off, seq_len)));
    ws.subjects.push_back(rec.subject);
    ws.sources.push_back(source);
    ws.chrono.push_back(k);
    ws.starts.push_back(off);
  }
  return ws;
}

WindowSet window_all(std::span<const Recording> recs, std::size_t seq_len, std::size_t stride) {
  WindowSet ws;
  for (std::size_t i = 0; i < recs.size(); ++i) ws.append(window(recs[i], seq_len, stride, i));
  return ws;
}

// ---- normalization ----------------------------------------------------------

std::string to_string(NormMode m) { return m == NormMode::kZscore ? "zscore" : "robust"; }

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - double(lo)) * (values[hi] - values[lo]);
}

NormStats NormStats::fit(const WindowSet& train, NormMode mode) {
  if (train.empty()) throw ConfigError("normalization statistics need a non-empty training set");
  const std::size_t C = train.channels, L = train.seq_len;
  NormStats s;
  s.mode = mode;
  s.center.resize(C);
  s.scale.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    std::vector<double> v;
    v.reserve(train.size() * L);
    for (const auto& w : train.windows)
      for (std::size_t t = 0; t < L; ++t) v.push_back(w.at(c, t));
    if (mode == NormMode::kZscore) {
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      s.center[c] = mean;
      s.scale[c] = std::sqrt(ss / double(v.size()));
    } else {
      s.center[c] = quantile(v, 0.5);
      s.scale[c] = quantile(v, 0.75) - quantile(v, 0.25);
    }
    s.scale[c] = std::max(s.scale[c], kScaleFloor);
  }
  return s;
}

Tensor NormStats::apply(const Tensor& w) const {
  if (w.rank() != 2 || w.dim(0) != center.size()) {
    throw DimensionError("normalization expects " + std::to_string(center.size()) + " channels, got " +
                         shape_str(w.shape()));
  }
  Tensor out(w.shape());
  for (std::size_t c = 0; c < w.dim(0); ++c)
    for (std::size_t t = 0; t < w.dim(1); ++t) out.at(c, t) = (w.at(c, t) - center[c]) / scale[c];
  return out;
}

WindowSet NormStats::apply(const WindowSet& ws) const {
  WindowSet out = ws;
  for (auto& w : out.windows) w = apply(w);
  return out;
}

nlohmann::json NormStats::to_json() const {
  return {{"mode", to_string(mode)}, {"center", center}, {"scale", scale}};
}

NormStats NormStats::from_json(const nlohmann::json& j) {
  NormStats s;
  try {
    const auto mode = j.at("mode").get<std::string>();
    if (mode != "zscore" && mode != "robust") throw ConfigError("unknown normalization mode '" + mode + "'");
    s.mode = mode == "zscore" ? NormMode::kZscore : NormMode::kRobust;
    s.center = j.at("center").get<std::vector<double>>();
    s.scale = j.at("scale").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("normalization stats: ") + e.what());
  }
  if (s.center.size() != s.scale.size()) throw ConfigError("normalization stats: center/scale length mismatch");
  return s;
}

WindowSet normalize(const WindowSet& ws, const NormStats& stats) { return stats.apply(ws); }

// ---- splits -----------------------------------------------------------------

std::string to_string(SplitProtocol p) {
  switch (p) {
    case SplitProtocol::kSubject: return "subject";
    case SplitProtocol::kLoso: return "loso";
    case SplitProtocol::kTemporal: return "temporal";
  }
  return "?";
}

SplitProtocol parse_split_protocol(const std::string& s) {
  if (s == "subject") return SplitProtocol::kSubject;
  if (s == "loso") return SplitProtocol::kLoso;
  if (s == "temporal") return SplitProtocol::kTemporal;
  throw ConfigError("unknown split protocol '" + s + "' (expected subject|loso|temporal)");
}

namespace {

void require_multiple_subjects(const WindowSet& ws, const char* what) {
  if (ws.subject_ids().size() < 2) {
    throw ProtocolError(std::string(what) +
                        " needs at least two subjects; overlapping windows of a single subject leak across a "
                        "random split, use the temporal split instead");
  }
}

}  // namespace

Split split_subject(const WindowSet& ws, std::span<const std::int64_t> test_subjects) {
  require_multiple_subjects(ws, "subject split");
  const std::set<std::int64_t> test(test_subjects.begin(), test_subjects.end());
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < ws.size(); ++i) (test.count(ws.subjects[i]) ? te : tr).push_back(i);
  if (tr.empty() || te.empty()) {
    throw ProtocolError("subject split leaves an empty " + std::string(tr.empty() ? "training" : "test") + " set");
  }
  return {ws.subset(tr, "train"), ws.subset(te, "test")};
}

std::vector<Split> split_loso(const WindowSet& ws) {
  require_multiple_subjects(ws, "leave-one-subject-out");
  std::vector<Split> folds;
  for (auto s : ws.subject_ids()) {
    const std::int64_t one[] = {s};
    folds.push_back(split_subject(ws, one));
  }
  return folds;
}

Split split_temporal(const WindowSet& ws, double train_frac) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("temporal split fraction must be in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ws.size(); ++i) by_class[ws.labels[i]].push_back(i);
  std::vector<std::size_t> tr, te;
  for (auto& [label, idx] : by_class) {
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return std::tie(ws.sources[a], ws.chrono[a]) < std::tie(ws.sources[b], ws.chrono[b]);
    });
    const auto n_train = static_cast<std::size_t>(std::floor(train_frac * double(idx.size()) + 1e-9));
    tr.insert(tr.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    te.insert(te.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  return {ws.subset(tr, "train"), ws.subset(te, "test")};
}

// ---- augmentation -----------------------------------------------------------

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  c.p_time_warp = c.p_magnitude = c.p_jitter = c.p_channel_dropout = 0.0;
  return c;
}

nlohmann::json AugmentConfig::to_json() const {
  return {{"p_time_warp", p_time_warp},   {"warp_knots", warp_knots},     {"warp_sigma", warp_sigma},
          {"p_magnitude", p_magnitude},   {"magnitude_lo", magnitude_lo}, {"magnitude_hi", magnitude_hi},
          {"p_jitter", p_jitter},         {"jitter_sigma", jitter_sigma}, {"p_channel_dropout", p_channel_dropout}};
}

AugmentConfig AugmentConfig::from_json(const nlohmann::json& j) {
  AugmentConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("p_time_warp", c.p_time_warp);
    get("warp_knots", c.warp_knots);
    get("warp_sigma", c.warp_sigma);
    get("p_magnitude", c.p_magnitude);
    get("magnitude_lo", c.magnitude_lo);
    get("magnitude_hi", c.magnitude_hi);
    get("p_jitter", c.p_jitter);
    get("jitter_sigma", c.jitter_sigma);
    get("p_channel_dropout", c.p_channel_dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("augmentation config: ") + e.what());
  }
  for (double p : {c.p_time_warp, c.p_magnitude, c.p_jitter, c.p_channel_dropout}) {
    if (p < 0.0 || p > 1.0) throw ConfigError("augmentation probabilities must lie in [0, 1]");
  }
  if (c.magnitude_lo <= 0.0 || c.magnitude_hi < c.magnitude_lo) throw ConfigError("bad magnitude scaling range");
  return c;
}

Tensor time_warp(const Tensor& x, std::size_t knots, double sigma, Rng& rng) {
  const std::size_t C = x.dim(0), L = x.dim(1);
  if (L < 2) return x;
  const double last = double(L - 1);
  // Anchors (output time) and their displaced source positions.
  std::vector<double> anchor{0.0}, source{0.0};
  std::vector<double> moved;
  for (std::size_t j = 1; j <= knots; ++j) {
    const double a = double(j) * last / double(knots + 1);
    anchor.push_back(a);
    moved.push_back(std::clamp(a + rng.normal(0.0, sigma * double(L)), 0.0, last));
  }
  std::sort(moved.begin(), moved.end());
  source.insert(source.end(), moved.begin(), moved.end());
  anchor.push_back(last);
  source.push_back(last);

  Tensor out(x.shape());
  std::size_t seg = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const double tt = double(t);
    while (seg + 2 < anchor.size() && tt > anchor[seg + 1]) ++seg;
    const double frac = (tt - anchor[seg]) / (anchor[seg + 1] - anchor[seg]);
    const double pos = source[seg] + frac * (source[seg + 1] - source[seg]);
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(pos)), L - 1);
    const auto i1 = std::min(i0 + 1, L - 1);
    const double w = pos - double(i0);
    for (std::size_t c = 0; c < C; ++c) out.at(c, t) = (1.0 - w) * x.at(c, i0) + w * x.at(c, i1);
  }
  return out;
}

Tensor augment(const Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  if (x.rank() != 2) throw DimensionError("augment expects a [C x L] window, got " + shape_str(x.shape()));
  Tensor out = x;
  if (rng.bernoulli(cfg.p_time_warp)) out = time_warp(out, cfg.warp_knots, cfg.warp_sigma, rng);
  if (rng.bernoulli(cfg.p_magnitude)) out.flat() *= rng.uniform(cfg.magnitude_lo, cfg.magnitude_hi);
  if (rng.bernoulli(cfg.p_jitter)) {
    for (auto& v : out.data()) v += rng.normal(0.0, cfg.jitter_sigma);
  }
  if (rng.bernoulli(cfg.p_channel_dropout)) {
    const auto c = rng.below(out.dim(0));
    for (std::size_t t = 0; t < out.dim(1); ++t) out.at(c, t) = 0.0;
  }
  return out;
}

// ---- synthetic data ---------------------------------------------------------

nlohmann::json SynthConfig::to_json() const {
  return {{"n_subjects", n_subjects}, {"classes", classes},
          {"channels", channels},     {"seq_len", seq_len},
          {"fs", fs},                 {"windows_per_class", windows_per_class},
          {"noise", noise},           {"asymmetric", asymmetric},
          {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("n_subjects", c.n_subjects);
    get("classes", c.classes);
    get("channels", c.channels);
    get("seq_len", c.seq_len);
    get("fs", c.fs);
    get("windows_per_class", c.windows_per_class);
    get("noise", c.noise);
    get("asymmetric", c.asymmetric);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synth config: ") + e.what());
  }
  return c;
}

namespace {

// Periodic ramp on phase in [0, 1): rises over `rise` of the period, falls
// over the rest; rise = 0.5 is a triangle. Range [-1, 1].
double skewed_ramp(double phase, double rise) {
  phase -= std::floor(phase);
  const double v = phase < rise ? phase / rise : (1.0 - phase) / (1.0 - rise);
  return 2.0 * v - 1.0;
}

}  // namespace

std::vector<Recording> synth_har(const SynthConfig& cfg) {
  if (cfg.n_subjects == 0 || cfg.classes < 2 || cfg.channels == 0 || cfg.seq_len == 0 || cfg.windows_per_class == 0 ||
      !(cfg.fs > 0.0) || cfg.noise < 0.0) {
    throw ConfigError("synth: need >= 1 subject, >= 2 classes, >= 1 channel, positive rate and window count");
  }
  const std::size_t K = cfg.classes, C = cfg.channels;
  auto sig_rng = named_stream(cfg.seed, "synth.signatures");

  // Class signatures per (class, channel).
  struct Signature {
    double freq, amp, harmonic, phase, rise;
  };
  std::vector<Signature> sig(K * C);
  const double nyquist = cfg.fs / 2.0;
  for (std::size_t c = 0; c < C; ++c) {
    const double shared_freq = std::min(0.8 + 0.3 * double(c), 0.2 * nyquist);
    for (std::size_t k = 0; k < K; ++k) {
      auto& s = sig[k * C + c];
      if (cfg.asymmetric) {
        // Same tone and amplitude everywhere; only the ramp skew differs, and
        // classes k and K-1-k are exact time reversals of each other.
        s.freq = shared_freq;
        s.amp = 1.0;
        s.harmonic = 0.0;
        s.phase = 0.0;
        s.rise = 0.1 + 0.8 * double(k) / double(K - 1);
      } else {
        const double base = 0.6 + 1.4 * double(k);
        s.freq = std::min(base * (1.0 + 0.12 * double(c)), 0.4 * nyquist);
        s.amp = sig_rng.uniform(0.6, 1.4);
        s.harmonic = sig_rng.uniform(0.0, 0.6);
        s.phase = sig_rng.uniform(0.0, 2.0 * M_PI);
        s.rise = 0.5;
      }
    }
  }

  const std::size_t seg_len = cfg.windows_per_class * cfg.seq_len;
  std::vector<Recording> recs;
  for (std::size_t subj = 0; subj < cfg.n_subjects; ++subj) {
    auto rng = named_stream(cfg.seed, "synth.subject." + std::to_string(subj));
    std::vector<double> gain(C), offset(C);
    for (std::size_t c = 0; c < C; ++c) {
      gain[c] = rng.uniform(0.8, 1.2);
      offset[c] = rng.uniform(0.0, 2.0 * M_PI);
    }
    const double tempo = rng.uniform(0.95, 1.05);
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());

    Recording rec;
    rec.subject = static_cast<std::int64_t>(subj + 1);
    rec.sampling_rate = cfg.fs;
    const std::size_t T = K * seg_len;
    rec.channels = Tensor(Shape{C, T});
    rec.labels.resize(T);
    rec.timestamps.resize(T);
    for (std::size_t seg = 0; seg < K; ++seg) {
      const std::size_t k = order[seg];
      for (std::size_t i = 0; i < seg_len; ++i) {
        const std::size_t t = seg * seg_len + i;
        const double time = double(t) / cfg.fs;
        rec.timestamps[t] = time;
        rec.labels[t] = static_cast<int>(k);
        for (std::size_t c = 0; c < C; ++c) {
          const auto& s = sig[k * C + c];
          const double f = s.freq * tempo;
          double v;
          if (cfg.asymmetric) {
            v = skewed_ramp(f * time + offset[c] / (2.0 * M_PI), s.rise);
          } else {
            const double ph = 2.0 * M_PI * f * time + s.phase + offset[c];
            v = std::sin(ph) + s.harmonic * std::sin(2.0 * ph);
          }
          rec.channels.at(c, t) = gain[c] * s.amp * v + rng.normal(0.0, cfg.noise);
        }
      }
    }
    recs.push_back(std::move(rec));
  }
  return recs;
}

// ---- end-to-end preparation -------------------------------------------------

namespace {

std::vector<std::int64_t> last_fraction(const std::vector<std::int64_t>& ids, double frac) {
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(frac * double(ids.size()) - 1e-9)));
  return {ids.end() - static_cast<std::ptrdiff_t>(std::min(n, ids.size())), ids.end()};
}

// Carves a validation set out of a training set without mixing subjects
// when there are at least two of them.
Split carve_validation(const WindowSet& train, double train_frac) {
  const auto ids = train.subject_ids();
  if (ids.size() >= 2) return split_subject(train, last_fraction(ids, 1.0 - train_frac));
  return split_temporal(train, train_frac);
}

}  // namespace

PreparedData prepare(std::span<const Recording> recs, const DatasetManifest& m, std::size_t fold) {
  m.validate();
  if (recs.empty()) throw DataError("dataset '" + m.name + "' has no recordings");
  std::vector<Recording> work(recs.begin(), recs.end());
  for (auto& r : work) {
    r.validate();
    if (r.num_channels() != m.channels) {
      throw DataError("dataset '" + m.name + "' declares " + std::to_string(m.channels) + " channels, recording of subject " +
                      std::to_string(r.subject) + " has " + std::to_string(r.num_channels()));
    }
    for (int y : r.labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= m.num_classes) {
        throw DataError("label " + std::to_string(y) + " outside 0.." + std::to_string(m.num_classes - 1));
      }
    }
    if (m.preprocessing != Preprocessing::kZscore) {
      r.channels = butter_lowpass_filtfilt(r.channels, m.cutoff_hz, m.fs);
    }
  }
  const WindowSet all = window_all(work, m.seq_len, m.stride);
  if (all.empty()) throw DataError("dataset '" + m.name + "' yields no windows of length " + std::to_string(m.seq_len));

  Split outer;
  switch (m.protocol) {
    case SplitProtocol::kSubject: {
      const auto test = m.test_subjects.empty() ? last_fraction(all.subject_ids(), 1.0 - m.train_frac) : m.test_subjects;
      outer = split_subject(all, test);
      break;
    }
    case SplitProtocol::kLoso: {
      auto folds = split_loso(all);
      if (fold >= folds.size()) {
        throw ConfigError("fold " + std::to_string(fold) + " out of range (" + std::to_string(folds.size()) + " subjects)");
      }
      outer = std::move(folds[fold]);
      break;
    }
    case SplitProtocol::kTemporal:
      outer = split_temporal(all, m.train_frac);
      break;
  }
  Split inner = carve_validation(outer.train, m.train_frac);
  if (inner.train.empty() || inner.test.empty() || outer.test.empty()) {
    throw DataError("dataset '" + m.name + "' is too small for a train/val/test split");
  }

  PreparedData out;
  out.norm = NormStats::fit(inner.train, m.preprocessing == Preprocessing::kRescueRobust ? NormMode::kRobust
                                                                                          : NormMode::kZscore);
  out.train = out.norm.apply(inner.train);
  out.val = out.norm.apply(inner.test);
  out.test = out.norm.apply(outer.test);
  out.train.split = "train";
  out.val.split = "val";
  out.test.split = "test";
  out.train.warnings = all.warnings;
  return out;
}

}  // namespace bm
