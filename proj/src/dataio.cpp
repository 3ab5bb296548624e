#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "babymamba/datapipe.hpp"
#include "babymamba/errors.hpp"

namespace bm {

// ---- CSV --------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    auto field = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, const std::filesystem::path& path, std::size_t line_no, const std::string& column) {
  T value{};
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (field.empty() || ec != std::errc() || ptr != end) {
    throw DataError(path.string() + ":" + std::to_string(line_no) + ": column '" + column + "': cannot parse '" +
                    std::string(field) + "' as a number");
  }
  return value;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::vector<Recording> load_csv(const std::filesystem::path& path, double sampling_rate) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": empty file, expected a header row");
  const auto header = split_fields(line);
  const char* fixed[] = {"subject", "timestamp", "label"};
  for (std::size_t i = 0; i < 3; ++i) {
    if (header.size() <= i || header[i] != fixed[i]) {
      throw DataError(path.string() + ": schema error, column " + std::to_string(i + 1) + " must be '" + fixed[i] + "'");
    }
  }
  const std::size_t C = header.size() - 3;
  if (C == 0) throw DataError(path.string() + ": schema error, no channel columns (ch_0, ...)");
  std::vector<std::string> names{"subject", "timestamp", "label"};
  for (std::size_t c = 0; c < C; ++c) {
    const std::string want = "ch_" + std::to_string(c);
    if (header[3 + c] != want) {
      throw DataError(path.string() + ": schema error, column " + std::to_string(4 + c) + " must be '" + want + "', found '" +
                      std::string(header[3 + c]) + "'");
    }
    names.push_back(want);
  }

  struct Rows {
    std::vector<double> ts;
    std::vector<int> labels;
    std::vector<std::vector<double>> ch;
  };
  std::map<std::int64_t, Rows> by_subject;
  std::vector<std::int64_t> order;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                      " fields, got " + std::to_string(fields.size()));
    }
    const auto subject = parse_number<std::int64_t>(fields[0], path, line_no, names[0]);
    const auto ts = parse_number<double>(fields[1], path, line_no, names[1]);
    const auto label = parse_number<int>(fields[2], path, line_no, names[2]);
    auto [it, inserted] = by_subject.try_emplace(subject);
    auto& rows = it->second;
    if (inserted) {
      order.push_back(subject);
      rows.ch.resize(C);
    }
    if (!rows.ts.empty() && ts < rows.ts.back()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": timestamp goes backwards for subject " +
                      std::to_string(subject));
    }
    rows.ts.push_back(ts);
    rows.labels.push_back(label);
    for (std::size_t c = 0; c < C; ++c) rows.ch[c].push_back(parse_number<double>(fields[3 + c], path, line_no, names[3 + c]));
  }
  if (order.empty()) throw DataError(path.string() + ": no data rows");

  std::vector<Recording> recs;
  for (auto s : order) {
    auto& rows = by_subject.at(s);
    Recording r;
    r.subject = s;
    r.sampling_rate = sampling_rate;
    r.timestamps = std::move(rows.ts);
    r.labels = std::move(rows.labels);
    const std::size_t T = r.labels.size();
    r.channels = Tensor(Shape{C, T});
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) r.channels.at(c, t) = rows.ch[c][t];
    r.validate();
    recs.push_back(std::move(r));
  }
  return recs;
}

void write_csv(const std::filesystem::path& path, std::span<const Recording> recs) {
  if (recs.empty()) throw DataError("write_csv: nothing to write");
  const std::size_t C = recs[0].num_channels();
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file " + path.string());
  out << "subject,timestamp,label";
  for (std::size_t c = 0; c < C; ++c) out << ",ch_" << c;
  out << "\n";
  for (const auto& r : recs) {
    r.validate();
    if (r.num_channels() != C) throw DataError("write_csv: recordings disagree on the channel count");
    for (std::size_t t = 0; t < r.length(); ++t) {
      out << r.subject << ',' << format_double(r.timestamps[t]) << ',' << r.labels[t];
      for (std::size_t c = 0; c < C; ++c) out << ',' << format_double(r.channels.at(c, t));
      out << '\n';
    }
  }
  if (!out) throw DataError("failed while writing " + path.string());
}

// ---- manifests --------------------------------------------------------------

std::string to_string(Preprocessing p) {
  switch (p) {
    case Preprocessing::kZscore: return "zscore";
    case Preprocessing::kRescueRobust: return "rescue_robust";
    case Preprocessing::kRescueLowpass: return "rescue_lowpass";
  }
  return "?";
}

Preprocessing parse_preprocessing(const std::string& s) {
  if (s == "zscore") return Preprocessing::kZscore;
  if (s == "rescue_robust") return Preprocessing::kRescueRobust;
  if (s == "rescue_lowpass") return Preprocessing::kRescueLowpass;
  throw ConfigError("unknown preprocessing '" + s + "' (expected zscore|rescue_robust|rescue_lowpass)");
}

void DatasetManifest::validate() const {
  if (channels == 0) throw ConfigError("manifest '" + name + "': channels must be >= 1");
  if (num_classes < 2) throw ConfigError("manifest '" + name + "': need at least 2 classes");
  if (!(fs > 0.0)) throw ConfigError("manifest '" + name + "': fs must be positive");
  if (seq_len == 0 || stride == 0) throw ConfigError("manifest '" + name + "': seq_len and stride must be >= 1");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("manifest '" + name + "': train_frac must be in (0, 1)");
  if (preprocessing != Preprocessing::kZscore && !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0)) {
    throw ConfigError("manifest '" + name + "': cutoff " + std::to_string(cutoff_hz) + " Hz is not below Nyquist");
  }
}

nlohmann::json DatasetManifest::to_json() const {
  return {{"name", name},
          {"channels", channels},
          {"num_classes", num_classes},
          {"fs", fs},
          {"seq_len", seq_len},
          {"stride", stride},
          {"preprocessing", to_string(preprocessing)},
          {"protocol", to_string(protocol)},
          {"cutoff_hz", cutoff_hz},
          {"train_frac", train_frac},
          {"test_subjects", test_subjects},
          {"files", files}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.name = j.value("name", std::string("dataset"));
    m.channels = j.at("channels").get<std::size_t>();
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.fs = j.at("fs").get<double>();
    m.seq_len = j.at("seq_len").get<std::size_t>();
    m.stride = j.value("stride", m.seq_len / 2 ? m.seq_len / 2 : 1);
    m.preprocessing = parse_preprocessing(j.value("preprocessing", std::string("zscore")));
    m.protocol = parse_split_protocol(j.value("protocol", std::string("subject")));
    m.cutoff_hz = j.value("cutoff_hz", 5.0);
    m.train_frac = j.value("train_frac", 0.8);
    m.test_subjects = j.value("test_subjects", std::vector<std::int64_t>{});
    m.files = j.value("files", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  return DatasetManifest::from_json(j);
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << m.to_json().dump(2) << "\n";
}

// ---- presets ----------------------------------------------------------------

const std::vector<DatasetPreset>& dataset_presets() {
  using P = Preprocessing;
  using S = SplitProtocol;
  static const std::vector<DatasetPreset> presets{
      {"uci-har", 30, 6, 9, 50.0, 128, 64, P::kZscore, S::kSubject},
      {"motionsense", 24, 6, 6, 50.0, 128, 64, P::kZscore, S::kSubject},
      {"wisdm", 36, 6, 3, 20.0, 128, 64, P::kZscore, S::kSubject},
      {"pamap2", 9, 12, 19, 100.0, 128, 64, P::kRescueRobust, S::kLoso},
      {"opportunity", 4, 5, 79, 30.0, 128, 64, P::kZscore, S::kSubject},
      {"unimib", 30, 9, 3, 50.0, 128, 64, P::kZscore, S::kSubject},
      {"skoda", 1, 11, 30, 98.0, 98, 24, P::kRescueLowpass, S::kTemporal},
      {"daphnet", 10, 2, 9, 64.0, 64, 32, P::kZscore, S::kLoso},
  };
  return presets;
}

const DatasetPreset& dataset_preset(const std::string& name) {
  for (const auto& p : dataset_presets())
    if (p.name == name) return p;
  std::string known;
  for (const auto& p : dataset_presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

DatasetManifest manifest_from_preset(const DatasetPreset& p) {
  DatasetManifest m;
  m.name = p.name;
  m.channels = p.channels;
  m.num_classes = p.classes;
  m.fs = p.fs;
  m.seq_len = p.seq_len;
  m.stride = p.stride;
  m.preprocessing = p.preprocessing;
  m.protocol = p.protocol;
  return m;
}

PreparedData prepare_from_manifest(const std::filesystem::path& manifest_path, std::size_t fold) {
  const auto m = load_manifest(manifest_path);
  if (m.files.empty()) throw DataError("manifest " + manifest_path.string() + " lists no data files");
  std::vector<Recording> recs;
  for (const auto& f : m.files) {
    std::filesystem::path p(f);
    if (p.is_relative()) p = manifest_path.parent_path() / p;
    auto part = load_csv(p, m.fs);
    recs.insert(recs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return prepare(recs, m, fold);
}

}  // namespace bm
