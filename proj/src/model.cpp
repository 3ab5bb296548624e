#include "babymamba/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace bm {

static_assert(std::endian::native == std::endian::little, "model files are written little-endian");

std::string to_string(Variant v) { return v == Variant::kCI ? "ci" : "crossover"; }
std::string to_string(Pooling p) { return p == Pooling::kGated ? "gated" : "mean"; }

Variant parse_variant(const std::string& s) {
  if (s == "ci" || s == "CI") return Variant::kCI;
  if (s == "crossover" || s == "Crossover") return Variant::kCrossover;
  throw ConfigError("unknown variant '" + s + "' (expected ci|crossover)");
}

Pooling parse_pooling(const std::string& s) {
  if (s == "gated") return Pooling::kGated;
  if (s == "mean") return Pooling::kMean;
  throw ConfigError("unknown pooling '" + s + "' (expected gated|mean)");
}

ModelConfig ModelConfig::crossover_default(std::size_t channels, std::size_t classes, std::size_t seq_len) {
  ModelConfig c;
  c.variant = Variant::kCrossover;
  c.d_model = 26;
  c.d_state = 8;
  c.n_layers = 4;
  c.expand = 2;
  c.num_channels = channels;
  c.num_classes = classes;
  c.seq_len = seq_len;
  return c;
}

ModelConfig ModelConfig::ci_default(std::size_t channels, std::size_t classes, std::size_t seq_len) {
  ModelConfig c;
  c.variant = Variant::kCI;
  c.d_model = 24;
  c.d_state = 16;
  c.n_layers = 4;
  c.expand = 2;
  c.num_channels = channels;
  c.num_classes = classes;
  c.seq_len = seq_len;
  return c;
}

void ModelConfig::validate() const {
  const std::pair<const char*, std::size_t> extents[] = {
      {"d_model", d_model}, {"d_state", d_state},         {"n_layers", n_layers},
      {"expand", expand},   {"k_stem", k_stem},           {"k_conv", k_conv},
      {"seq_len", seq_len}, {"num_channels", num_channels}, {"num_classes", num_classes}};
  for (const auto& [name, value] : extents) {
    if (value == 0) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
  }
  if (k_stem % 2 == 0) throw ConfigError("model config: k_stem must be odd, got " + std::to_string(k_stem));
  if (num_classes < 2) throw ConfigError("model config: need at least 2 classes");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"variant", to_string(variant)},
          {"d_model", d_model},
          {"d_state", d_state},
          {"n_layers", n_layers},
          {"expand", expand},
          {"k_stem", k_stem},
          {"k_conv", k_conv},
          {"dt_rank", resolved_dt_rank()},
          {"d_attn", resolved_d_attn()},
          {"num_classes", num_classes},
          {"num_channels", num_channels},
          {"seq_len", seq_len},
          {"bidirectional", bidirectional},
          {"pooling", to_string(pooling)},
          {"zero_attention_v", zero_attention_v},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("variant")) c = parse_variant(j.at("variant").get<std::string>()) == Variant::kCI
                                     ? ci_default(c.num_channels, c.num_classes)
                                     : crossover_default(c.num_channels, c.num_classes);
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("d_model", c.d_model);
    get("d_state", c.d_state);
    get("n_layers", c.n_layers);
    get("expand", c.expand);
    get("k_stem", c.k_stem);
    get("k_conv", c.k_conv);
    get("dt_rank", c.dt_rank);
    get("d_attn", c.d_attn);
    get("num_classes", c.num_classes);
    get("num_channels", c.num_channels);
    get("seq_len", c.seq_len);
    get("bidirectional", c.bidirectional);
    get("zero_attention_v", c.zero_attention_v);
    get("seed", c.seed);
    if (j.contains("pooling")) c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto seed = cfg_.seed;
  const std::size_t stem_in = cfg_.variant == Variant::kCI ? 1 : cfg_.num_channels;
  stem = StemParams::init(cfg_.d_model, stem_in, cfg_.k_stem, seed, "stem.");
  for (std::size_t i = 0; i < cfg_.n_layers; ++i) {
    blocks.push_back(SsmBlockParams::init(cfg_.d_model, cfg_.expand, cfg_.d_state, cfg_.resolved_dt_rank(),
                                          cfg_.k_conv, seed, "blocks." + std::to_string(i) + "."));
  }
  if (cfg_.pooling == Pooling::kGated) {
    pool = PoolingParams::init(cfg_.d_model, cfg_.resolved_d_attn(), seed, "pool.", cfg_.zero_attention_v);
  }
  head = HeadParams::init(cfg_.d_model, cfg_.num_classes, seed, "head.");
}

Model build(const ModelConfig& cfg) { return Model(cfg); }

Var Model::forward(const Tensor& X, bool training) {
  const bool batched = X.rank() == 3;
  if (!batched && X.rank() != 2) throw DimensionError("model input must be [C x L] or [B x C x L], got " + shape_str(X.shape()));
  const std::size_t C = X.dim(batched ? 1 : 0);
  const std::size_t L = X.dim(batched ? 2 : 1);
  if (C != cfg_.num_channels || L != cfg_.seq_len) {
    throw DimensionError("model expects windows of " + std::to_string(cfg_.num_channels) + " x " +
                         std::to_string(cfg_.seq_len) + ", got " + shape_str(X.shape()));
  }
  const Var input = Var::constant(batched ? X : X.reshaped(Shape{1, C, L}));
  Var z = cfg_.variant == Variant::kCI ? stem_ci(input, stem, training) : stem_crossover(input, stem, training);
  for (const auto& blk : blocks) z = bidir_block(z, blk, cfg_.bidirectional);
  Var pooled = pool ? attention_pool(z, *pool) : mean_pool(z);
  if (cfg_.variant == Variant::kCI) pooled = late_fuse(pooled, C);
  return classify(pooled, head);
}

Tensor Model::predict(const Tensor& X) {
  NoGradGuard guard;
  return forward(X, false).value();
}

std::vector<NamedVar> Model::parameters() const {
  std::vector<NamedVar> out = stem.named("stem.");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto b = blocks[i].named("blocks." + std::to_string(i) + ".");
    out.insert(out.end(), b.begin(), b.end());
  }
  if (pool) {
    auto p = pool->named("pool.");
    out.insert(out.end(), p.begin(), p.end());
  }
  auto h = head.named("head.");
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Model::buffers() {
  return {{"stem.bn.running_mean", &stem.bn.running_mean}, {"stem.bn.running_var", &stem.bn.running_var}};
}

std::vector<std::pair<std::string, const Tensor*>> Model::buffers() const {
  return {{"stem.bn.running_mean", &stem.bn.running_mean}, {"stem.bn.running_var", &stem.bn.running_var}};
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : parameters()) n += v.numel();
  return n;
}

void copy_state(const Model& from, Model& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw DimensionError("copy_state: parameter inventories differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].second.shape() != dst[i].second.shape()) throw DimensionError("copy_state: shape mismatch for " + src[i].first);
    dst[i].second.mutable_value() = src[i].second.value();
  }
  auto sb = from.buffers();
  auto db = to.buffers();
  for (std::size_t i = 0; i < sb.size(); ++i) *db[i].second = *sb[i].second;
  to.extras = from.extras;
}

// ---- serialization ----------------------------------------------------------

namespace {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_tensor(const std::string& name, const Tensor& t) {
    put_string(name);
    put<std::uint8_t>(1);  // dtype f64
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(d);
    put_bytes(t.data().data(), t.numel() * sizeof(double));
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("model file truncated at byte " + std::to_string(pos_));
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string(std::size_t max_len = 1 << 20) {
    const auto n = get<std::uint32_t>();
    if (n > max_len) throw DataError("model file: implausible string length");
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor> get_tensor() {
    auto name = get_string();
    if (get<std::uint8_t>() != 1) throw DataError("model file: unsupported dtype for " + name);
    const auto rank = get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw DataError("model file: bad rank for " + name);
    Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>();
      if (d == 0 || d > (1ULL << 32)) throw DataError("model file: bad extent for " + name);
      count *= d;
    }
    need(count * sizeof(double));
    std::vector<double> data(count);
    std::memcpy(data.data(), bytes_.data() + pos_, count * sizeof(double));
    pos_ += count * sizeof(double);
    return {std::move(name), Tensor(std::move(shape), std::move(data))};
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const Model& model) {
  ByteWriter w;
  w.put_bytes(kModelMagic, sizeof(kModelMagic));
  w.put<std::uint32_t>(kModelFormatVersion);
  const std::string cfg = model.config().to_json().dump();
  w.put<std::uint64_t>(cfg.size());
  w.put_bytes(cfg.data(), cfg.size());
  const auto params = model.parameters();
  const auto bufs = model.buffers();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size() + bufs.size() + model.extras.size()));
  for (const auto& [name, v] : params) w.put_tensor(name, v.value());
  for (const auto& [name, t] : bufs) w.put_tensor(name, *t);
  for (const auto& [name, t] : model.extras) w.put_tensor("extra." + name, t);
  return w.take();
}

Model deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.need(sizeof(kModelMagic));
  if (std::memcmp(bytes.data(), kModelMagic, sizeof(kModelMagic)) != 0) throw DataError("not a model file (bad magic)");
  for (std::size_t i = 0; i < sizeof(kModelMagic); ++i) r.get<std::uint8_t>();
  const auto version = r.get<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw DataError("model file format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kModelFormatVersion) + ")");
  }
  const auto cfg_len = r.get<std::uint64_t>();
  if (cfg_len > (1 << 20)) throw DataError("model file: implausible config length");
  r.need(cfg_len);
  std::string cfg_text(cfg_len, '\0');
  for (auto& c : cfg_text) c = static_cast<char>(r.get<std::uint8_t>());
  nlohmann::json cfg_json;
  try {
    cfg_json = nlohmann::json::parse(cfg_text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model file: bad config JSON: ") + e.what());
  }
  Model model(ModelConfig::from_json(cfg_json));

  std::map<std::string, Tensor> tensors;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, t] = r.get_tensor();
    tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw DataError("model file: trailing bytes");

  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("model file: missing tensor " + name);
    if (it->second.shape() != dst.shape()) {
      throw DataError("model file: tensor " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                      shape_str(dst.shape()));
    }
    dst = std::move(it->second);
    tensors.erase(it);
  };
  for (auto& [name, v] : model.parameters()) {
    Var handle = v;
    take(name, handle.mutable_value());
  }
  for (auto& [name, t] : model.buffers()) take(name, *t);
  for (auto& [name, t] : tensors) {
    if (name.rfind("extra.", 0) != 0) throw DataError("model file: unexpected tensor " + name);
    model.extras.emplace(name.substr(6), std::move(t));
  }
  return model;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  const auto bytes = serialize(model);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace bm
