#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "reidkit/alignment.hpp"
#include "reidkit/architecture.hpp"
#include "reidkit/retrieval.hpp"
#include "reidkit/synthetic.hpp"
#include "reidkit/training.hpp"

namespace reidkit {

/// Malformed binary file; `offset` is the byte position of the problem.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset(offset) {}
  std::size_t offset;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) {
    const auto b = std::bit_cast<std::uint64_t>(v);
    u32(static_cast<std::uint32_t>(b));
    u32(static_cast<std::uint32_t>(b >> 32));
  }
  void magic(const char (&m)[5]) { buf_.append(m, 4); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : buf_(std::move(bytes)) {}

  void expect_magic(const char (&m)[5], const char* what) {
    need(4, "magic");
    if (std::memcmp(buf_.data(), m, 4) != 0)
      throw FormatError(std::string(what) + ": bad magic (expected \"" + m + "\")", 0);
    pos_ = 4;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int32_t i32(const char* field) { return static_cast<std::int32_t>(u32(field)); }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  double f64(const char* field) {
    const std::uint64_t lo = u32(field), hi = u32(field);
    return std::bit_cast<double>(lo | (hi << 32));
  }
  std::size_t pos() const { return pos_; }
  void expect_end() const {
    if (pos_ != buf_.size()) throw FormatError("trailing bytes after payload", pos_);
  }

 private:
  void need(std::size_t n, const char* field) const {
    if (pos_ + n > buf_.size())
      throw FormatError(std::string("truncated while reading ") + field, pos_);
  }
  std::string buf_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void check_version(ByteReader& r, const char* what) {
  const std::size_t at = r.pos();
  const auto v = r.u32("version");
  if (v != 1) throw FormatError(std::string(what) + ": unsupported version " + std::to_string(v), at);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// embeddings: "AAPR", u32 version=1, u32 count, u32 dim, then per record
// i32 person_id, i32 camera_id, dim x f32. Little-endian.

inline std::string encode_embeddings(const EmbeddingSet& set) {
  set.validate();
  detail::ByteWriter w;
  w.magic("AAPR");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(set.size()));
  w.u32(static_cast<std::uint32_t>(set.dim));
  for (const auto& r : set.records) {
    w.i32(r.person_id);
    w.i32(r.camera_id);
    for (float f : r.feature) w.f32(f);
  }
  return w.bytes();
}

inline EmbeddingSet decode_embeddings(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  r.expect_magic("AAPR", "embedding file");
  detail::check_version(r, "embedding file");
  const auto count = r.u32("record count");
  EmbeddingSet set;
  set.dim = static_cast<int>(r.u32("feature dim"));
  for (std::uint32_t i = 0; i < count; ++i) {
    EmbeddingRecord rec;
    rec.person_id = r.i32("person_id");
    rec.camera_id = r.i32("camera_id");
    rec.feature.resize(set.dim);
    for (float& f : rec.feature) f = r.f32("feature");
    set.records.push_back(std::move(rec));
  }
  r.expect_end();
  return set;
}

inline void write_embeddings(const EmbeddingSet& set, const std::filesystem::path& path) {
  detail::write_file(path, encode_embeddings(set));
}
inline EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// stripes: "AAPL", u32 version=1, u32 count, u32 H, u32 C, count*H*C x f32.

inline void write_stripes(const std::vector<StripeSet>& sets, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.magic("AAPL");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(sets.size()));
  const int h = sets.empty() ? 1 : sets[0].h, c = sets.empty() ? 1 : sets[0].c;
  w.u32(h);
  w.u32(c);
  for (const auto& s : sets) {
    if (s.h != h || s.c != c) throw ConfigError("write_stripes: stripe sets differ in shape");
    for (double v : s.values) w.f32(static_cast<float>(v));
  }
  detail::write_file(path, w.bytes());
}

inline std::vector<StripeSet> read_stripes(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path));
  r.expect_magic("AAPL", "stripe file");
  detail::check_version(r, "stripe file");
  const auto count = r.u32("count");
  const std::size_t at = r.pos();
  const int h = static_cast<int>(r.u32("H")), c = static_cast<int>(r.u32("C"));
  if (h < 1 || c < 1) throw FormatError("stripe file: H and C must be positive", at);
  std::vector<StripeSet> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    StripeSet s(h, c);
    for (double& v : s.values) v = r.f32("stripe value");
    out.push_back(std::move(s));
  }
  r.expect_end();
  return out;
}

// ---------------------------------------------------------------------------
// image tensors: "AAPT", u32 version=1, u32 N, C, H, W, values as f32.

inline void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.magic("AAPT");
  w.u32(1);
  for (int d : {t.n(), t.c(), t.h(), t.w()}) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.values()) w.f32(static_cast<float>(v));
  detail::write_file(path, w.bytes());
}

inline Tensor read_tensor(const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path));
  r.expect_magic("AAPT", "tensor file");
  detail::check_version(r, "tensor file");
  const std::size_t at = r.pos();
  int d[4];
  for (int& v : d) v = static_cast<int>(r.u32("dim"));
  if (d[0] < 1 || d[1] < 1 || d[2] < 1 || d[3] < 1)
    throw FormatError("tensor file: dims must be positive", at);
  Tensor t(d[0], d[1], d[2], d[3]);
  for (double& v : t.values()) v = r.f32("tensor value");
  r.expect_end();
  return t;
}

// ---------------------------------------------------------------------------
// model weights: "AAPM", u32 version=1, u32 layer count, then per layer
// u32 kind, u32 dim count, dims, and four f64 arrays each prefixed by a u32
// length: weight, bias, running_mean, running_var.

inline void write_model(Model& model, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.magic("AAPM");
  w.u32(1);
  std::uint32_t layers = 0;
  model.visit([&](LayerParams&) { ++layers; });
  w.u32(layers);
  auto arr = [&](const std::vector<double>& v) {
    w.u32(static_cast<std::uint32_t>(v.size()));
    for (double x : v) w.f64(x);
  };
  model.visit([&](LayerParams& p) {
    w.u32(static_cast<std::uint32_t>(p.kind));
    w.u32(static_cast<std::uint32_t>(p.dims.size()));
    for (int d : p.dims) w.u32(static_cast<std::uint32_t>(d));
    arr(p.weight.value);
    arr(p.bias.value);
    arr(p.running_mean);
    arr(p.running_var);
  });
  detail::write_file(path, w.bytes());
}

/// Loads weights into a model built from the matching ArchSpec.
inline void read_model(Model& model, const std::filesystem::path& path) {
  detail::ByteReader r(detail::read_file(path));
  r.expect_magic("AAPM", "model file");
  detail::check_version(r, "model file");
  std::uint32_t layers = 0;
  model.visit([&](LayerParams&) { ++layers; });
  const std::size_t at = r.pos();
  if (r.u32("layer count") != layers)
    throw FormatError("model file: layer count does not match the architecture", at);
  auto arr = [&](std::vector<double>& v, const char* field) {
    const std::size_t pos = r.pos();
    if (r.u32(field) != v.size())
      throw FormatError(std::string("model file: ") + field + " length mismatch", pos);
    for (double& x : v) x = r.f64(field);
  };
  model.visit([&](LayerParams& p) {
    const std::size_t pos = r.pos();
    if (r.u32("kind") != static_cast<std::uint32_t>(p.kind))
      throw FormatError("model file: layer kind mismatch", pos);
    const std::size_t dpos = r.pos();
    if (r.u32("dim count") != p.dims.size())
      throw FormatError("model file: dim count mismatch", dpos);
    for (int d : p.dims) {
      const std::size_t q = r.pos();
      if (r.u32("dim") != static_cast<std::uint32_t>(d))
        throw FormatError("model file: layer dims mismatch", q);
    }
    arr(p.weight.value, "weight");
    arr(p.bias.value, "bias");
    arr(p.running_mean, "running_mean");
    arr(p.running_var, "running_var");
  });
  r.expect_end();
}

// ---------------------------------------------------------------------------
// structured text documents

using Json = nlohmann::ordered_json;

inline Json to_json(const ArchSpec& s) {
  Json j;
  j["variant"] = to_string(s.variant);
  j["width_multiplier"] = {s.width.num, s.width.den};
  j["attention_layers"] = std::vector<int>(s.attention_layers.begin(), s.attention_layers.end());
  j["fusion"] = to_string(s.fusion);
  j["last_stride"] = s.last_stride;
  j["num_classes"] = s.num_classes;
  j["local_dim"] = s.local_dim;
  j["band_enabled"] = s.band_enabled;
  j["reduction"] = s.reduction;
  j["dropout"] = s.dropout;
  return j;
}

inline Fusion parse_fusion(const std::string& s) {
  if (s == "mul" || s == "x") return Fusion::mul;
  if (s == "add" || s == "+") return Fusion::add;
  throw ConfigError("unknown fusion '" + s + "' (expected mul or add)");
}

/// Fields missing from `j` keep the values already in `s`.
inline void from_json(const Json& j, ArchSpec& s) {
  if (j.contains("variant")) s.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("width_multiplier")) {
    const auto& w = j["width_multiplier"];
    if (w.is_array()) {
      s.width = {w.at(0).get<int>(), w.at(1).get<int>()};
    } else {
      s.width = {w.get<int>(), 1};
    }
  }
  if (j.contains("attention_layers")) {
    s.attention_layers.clear();
    for (int l : j["attention_layers"]) s.attention_layers.insert(l);
  }
  if (j.contains("fusion")) s.fusion = parse_fusion(j["fusion"].get<std::string>());
  if (j.contains("last_stride")) s.last_stride = j["last_stride"].get<int>();
  if (j.contains("num_classes")) s.num_classes = j["num_classes"].get<int>();
  if (j.contains("local_dim")) s.local_dim = j["local_dim"].get<int>();
  if (j.contains("band_enabled")) s.band_enabled = j["band_enabled"].get<bool>();
  if (j.contains("reduction")) s.reduction = j["reduction"].get<int>();
  if (j.contains("dropout")) s.dropout = j["dropout"].get<double>();
  s.validate();
}

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["p"] = c.p;
  j["k"] = c.k;
  j["iterations_per_epoch"] = c.iterations_per_epoch;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["lr_steps"] = c.lr_steps;
  j["lr_decay"] = c.lr_decay;
  j["margin"] = c.margin;
  j["loss_weights"] = {c.id_weight, c.global_weight, c.local_weight};
  j["local_metric"] = c.local_metric == StripeMetric::normalized ? "normalized" : "raw";
  j["random_flip"] = c.augment.flip;
  j["random_erase"] = c.augment.erase;
  return j;
}

inline void from_json(const Json& j, TrainConfig& c) {
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("p")) c.p = j["p"].get<int>();
  if (j.contains("k")) c.k = j["k"].get<int>();
  if (j.contains("iterations_per_epoch")) c.iterations_per_epoch = j["iterations_per_epoch"].get<int>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("lr_steps")) c.lr_steps = j["lr_steps"].get<std::vector<int>>();
  if (j.contains("lr_decay")) c.lr_decay = j["lr_decay"].get<double>();
  if (j.contains("margin")) c.margin = j["margin"].get<double>();
  if (j.contains("loss_weights")) {
    const auto w = j["loss_weights"].get<std::vector<double>>();
    if (w.size() != 3) throw ConfigError("loss_weights must have three entries");
    c.id_weight = w[0];
    c.global_weight = w[1];
    c.local_weight = w[2];
  }
  if (j.contains("local_metric")) {
    const auto m = j["local_metric"].get<std::string>();
    if (m != "normalized" && m != "raw") throw ConfigError("local_metric must be normalized or raw");
    c.local_metric = m == "raw" ? StripeMetric::raw : StripeMetric::normalized;
  }
  if (j.contains("random_flip")) c.augment.flip = j["random_flip"].get<bool>();
  if (j.contains("random_erase")) c.augment.erase = j["random_erase"].get<bool>();
}

inline Json to_json(const SyntheticSpec& s) {
  Json j;
  j["num_identities"] = s.num_identities;
  j["train_identities"] = s.train_identities;
  j["images_per_identity"] = s.images_per_identity;
  j["height"] = s.height;
  j["width"] = s.width;
  j["camera_count"] = s.camera_count;
  j["occlusion_probability"] = s.occlusion_probability;
  j["noise_sigma"] = s.noise_sigma;
  j["seed"] = s.seed;
  return j;
}

inline void from_json(const Json& j, SyntheticSpec& s) {
  if (j.contains("num_identities")) s.num_identities = j["num_identities"].get<int>();
  if (j.contains("train_identities")) s.train_identities = j["train_identities"].get<int>();
  if (j.contains("images_per_identity")) s.images_per_identity = j["images_per_identity"].get<int>();
  if (j.contains("height")) s.height = j["height"].get<int>();
  if (j.contains("width")) s.width = j["width"].get<int>();
  if (j.contains("camera_count")) s.camera_count = j["camera_count"].get<int>();
  if (j.contains("occlusion_probability"))
    s.occlusion_probability = j["occlusion_probability"].get<double>();
  if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
}

inline Json to_json(const Manifest& m) {
  Json recs = Json::array();
  for (const auto& r : m.records)
    recs.push_back({{"image", r.image},
                    {"person_id", r.person_id},
                    {"camera_id", r.camera_id},
                    {"split", to_string(r.split)}});
  return Json{{"records", recs}};
}

inline Manifest manifest_from_json(const Json& j) {
  Manifest m;
  for (const auto& r : j.at("records"))
    m.records.push_back({r.at("image").get<int>(), r.at("person_id").get<int>(),
                         r.at("camera_id").get<int>(),
                         parse_split(r.at("split").get<std::string>())});
  return m;
}

inline Json to_json(const EvalReport& r) {
  Json j;
  j["cmc"] = r.cmc;
  j["map"] = r.map;
  j["num_valid_queries"] = r.num_valid_queries;
  return j;
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(detail::read_file(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

inline void write_json(const Json& j, const std::filesystem::path& path) {
  detail::write_file(path, j.dump(2) + "\n");
}

}  // namespace reidkit
