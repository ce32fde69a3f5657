// SPDX-License-Identifier: Apache-2.0
#include "bitformer/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "bitformer/errors.hpp"

namespace bitformer {

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'B', 'P', 'F', 'T'};

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  std::vector<std::uint8_t> out;

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > size_ - pos_) {
      throw TruncatedFileError("checkpoint truncated: need " + std::to_string(n) + " bytes at offset " +
                               std::to_string(pos_) + ", " + std::to_string(size_ - pos_) + " left");
    }
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

struct StoredTensor {
  std::vector<std::uint64_t> dims;
  std::vector<float> values;
};

struct Parsed {
  std::string blob;
  std::map<std::string, StoredTensor> tensors;
  std::vector<std::string> order;
};

std::string make_blob(const ModelConfig& config, const std::vector<std::string>& vocab) {
  std::string blob = config.to_text();
  if (!vocab.empty()) {
    blob += "[vocab]\n";
    for (const auto& w : vocab) blob += w + '\n';
  }
  return blob;
}

void split_blob(const std::string& blob, std::string& config_text, std::vector<std::string>& vocab) {
  const std::string marker = "[vocab]\n";
  const auto at = blob.find(marker);
  config_text = blob.substr(0, at);
  if (at == std::string::npos) return;
  std::istringstream in(blob.substr(at + marker.size()));
  std::string line;
  while (std::getline(in, line)) vocab.push_back(line);
}

// Parses everything up to the trailing checksum, which must be exactly the
// last 8 bytes.
Parsed parse_body(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes.data(), bytes.size());
  const std::string magic = r.str(4);
  if (magic != std::string(kMagic, 4)) throw IoError("not a checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + ", this build reads version " +
                       std::to_string(kCheckpointVersion));
  }
  Parsed p;
  p.blob = r.str(r.u64());
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.str(r.u32());
    StoredTensor st;
    const std::uint32_t rank = r.u32();
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      st.dims.push_back(r.u64());
      n *= st.dims.back();
    }
    if (n > bytes.size()) throw TruncatedFileError("checkpoint truncated: tensor '" + name + "' overruns the file");
    st.values.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) st.values.push_back(r.f32());
    p.order.push_back(name);
    p.tensors.emplace(std::move(name), std::move(st));
  }
  if (bytes.size() - r.pos() < 8) throw TruncatedFileError("checkpoint truncated: missing checksum");
  if (bytes.size() - r.pos() > 8) throw IoError("checkpoint has trailing bytes after the checksum");
  return p;
}

Parsed parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw TruncatedFileError("checkpoint truncated: " + std::to_string(bytes.size()) + " bytes");
  // A structurally short file is reported as truncated; a well-formed file
  // whose bytes do not hash to the stored value is reported as corrupt.
  Parsed p = parse_body(bytes);
  const std::size_t body = bytes.size() - 8;
  Reader tail(bytes.data() + body, 8);
  if (tail.u64() != fnv1a64(bytes.data(), body)) throw ChecksumError("checkpoint checksum mismatch");
  return p;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

ModelConfig config_of(const Parsed& p, std::vector<std::string>* vocab) {
  std::string text;
  std::vector<std::string> v;
  split_blob(p.blob, text, v);
  if (vocab) *vocab = std::move(v);
  return ModelConfig::from_text(text);
}

void assign(Parameter& param, const StoredTensor& st) {
  const bool shape_ok = st.dims.size() == 2 && st.dims[0] == param.value.rows() && st.dims[1] == param.value.cols();
  if (!shape_ok) {
    std::string dims;
    for (auto d : st.dims) dims += (dims.empty() ? "" : "x") + std::to_string(d);
    throw SchemaError("tensor '" + param.name + "' stored as " + dims + ", model expects " +
                          param.value.shape_string(),
                      {});
  }
  for (std::size_t i = 0; i < st.values.size(); ++i) param.value[i] = static_cast<double>(st.values[i]);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& model, const std::vector<std::string>& vocab) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  const std::string blob = make_blob(model.config(), vocab);
  w.u64(blob.size());
  w.bytes(blob.data(), blob.size());
  const ParameterSet& ps = model.params();
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Parameter& p = ps[i];
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name.data(), p.name.size());
    w.u32(2);
    w.u64(p.value.rows());
    w.u64(p.value.cols());
    for (double v : p.value.values()) w.f32(static_cast<float>(v));
  }
  w.u64(fnv1a64(w.out.data(), w.out.size()));
  return std::move(w.out);
}

void save_checkpoint(const Model& model, const std::filesystem::path& path, const std::vector<std::string>& vocab) {
  const auto bytes = serialize_checkpoint(model, vocab);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

LoadedCheckpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes,
                                        const std::optional<ModelConfig>& expected) {
  const Parsed p = parse(bytes);
  std::vector<std::string> vocab;
  const ModelConfig stored = config_of(p, &vocab);
  Model model = Model::build(expected ? *expected : stored);
  if (const auto it = p.tensors.find("cls.weight"); it != p.tensors.end() && !it->second.dims.empty()) {
    model.ensure_classifier(static_cast<std::size_t>(it->second.dims[0]));
  }

  std::vector<std::string> missing;
  ParameterSet& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!p.tensors.contains(ps[i].name)) missing.push_back(ps[i].name);
  }
  if (!missing.empty()) {
    std::string msg = "checkpoint lacks " + std::to_string(missing.size()) + " tensor(s) required by the " +
                      to_string(model.config().variant) + " config:";
    for (const auto& m : missing) msg += " " + m;
    throw SchemaError(msg, missing);
  }
  std::vector<std::string> unexpected;
  for (const auto& name : p.order)
    if (!ps.find(name)) unexpected.push_back(name);
  if (!unexpected.empty()) {
    std::string msg = "checkpoint carries tensor(s) the config has no slot for:";
    for (const auto& m : unexpected) msg += " " + m;
    throw SchemaError(msg, {});
  }
  for (std::size_t i = 0; i < ps.size(); ++i) assign(ps[i], p.tensors.at(ps[i].name));
  model.mark_calibrated();
  return LoadedCheckpoint{std::move(model), std::move(vocab)};
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
  return deserialize_checkpoint(read_file(path), expected);
}

ModelConfig peek_checkpoint_config(const std::filesystem::path& path) {
  return config_of(parse(read_file(path)), nullptr);
}

std::size_t init_from_checkpoint(Model& model, const std::filesystem::path& path) {
  const Parsed p = parse(read_file(path));
  std::size_t copied = 0;
  ParameterSet& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto it = p.tensors.find(ps[i].name);
    if (it == p.tensors.end()) continue;
    const auto& d = it->second.dims;
    if (d.size() != 2 || d[0] != ps[i].value.rows() || d[1] != ps[i].value.cols()) continue;
    assign(ps[i], it->second);
    ++copied;
  }
  model.init_estimators();
  return copied;
}

}  // namespace bitformer
