#include "mcm/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

MCM_BEGIN_NAMESPACE

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'C', 'M', 'C', 'K', 'P', 'T', '\0'};

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::span<const Scalar> v) {
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(Scalar));
  }
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<Scalar> raw(std::size_t count) {
    need(count * sizeof(Scalar));
    std::vector<Scalar> v(count);
    std::memcpy(v.data(), in_.data() + pos_, count * sizeof(Scalar));
    pos_ += count * sizeof(Scalar);
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw IntegrityError("checkpoint is truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), chunk);
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_map(Writer& w, const std::map<std::string, std::string>& m) {
  w.pod(static_cast<std::uint32_t>(m.size()));
  for (const auto& [k, v] : m) {
    w.str(k);
    w.str(v);
  }
}

std::map<std::string, std::string> read_map(Reader& r) {
  std::map<std::string, std::string> m;
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string k = r.str();
    m[k] = r.str();
  }
  return m;
}

}  // namespace

std::string serialize_checkpoint(const Model& model, const AdamW* optimizer, const TrainConfig& train,
                                 std::int64_t step) {
  const auto& entries = model.params().entries();
  std::vector<std::size_t> order(entries.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return entries[a].name < entries[b].name; });

  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kCheckpointVersion);
  w.str(kDtypeName);
  write_map(w, model.config().to_map());
  write_map(w, train.to_map());
  w.pod(static_cast<std::int64_t>(step));
  w.pod(static_cast<std::int64_t>(optimizer ? optimizer->steps() : 0));
  w.pod(static_cast<std::uint8_t>(optimizer ? 1 : 0));
  w.pod(static_cast<std::uint32_t>(entries.size()));
  for (std::size_t i : order) {
    const auto& e = entries[i];
    w.str(e.name);
    w.pod(static_cast<std::uint32_t>(e.tensor.dim()));
    for (std::size_t extent : e.tensor.shape()) w.pod(static_cast<std::uint64_t>(extent));
    w.raw(e.tensor.data());
    if (optimizer) {
      w.raw(optimizer->first_moment(i));
      w.raw(optimizer->second_moment(i));
    }
  }
  const std::uint32_t crc = crc32_of(w.buffer());
  w.pod(crc);
  return std::move(w.buffer());
}

CheckpointData parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    if (bytes.size() >= sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0) {
      throw IntegrityError("checkpoint is truncated");
    }
    throw IntegrityError("not a checkpoint file (bad magic)");
  }
  Reader head(std::string_view(bytes).substr(sizeof(kMagic)));
  const auto version = head.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view body(bytes.data(), bytes.size() - sizeof(std::uint32_t));
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body.size(), sizeof(stored));
  if (crc32_of(body) != stored) throw IntegrityError("checkpoint checksum mismatch (file is corrupt or truncated)");

  Reader r(body.substr(sizeof(kMagic) + sizeof(std::uint32_t)));
  CheckpointData c;
  c.version = version;
  c.dtype = r.str();
  if (c.dtype != kDtypeName) {
    throw ConfigError("checkpoint holds " + c.dtype + " values but this build computes in " + kDtypeName);
  }
  c.model = ModelConfig::from_map(read_map(r));
  c.train = read_map(r);
  c.step = r.pod<std::int64_t>();
  c.optimizer_steps = r.pod<std::int64_t>();
  c.has_optimizer = r.pod<std::uint8_t>() != 0;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointData::Blob b;
    b.name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw IntegrityError("checkpoint parameter " + b.name + " has implausible rank");
    for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(static_cast<std::size_t>(r.pod<std::uint64_t>()));
    const std::size_t n = shape_numel(b.shape);
    b.values = r.raw(n);
    if (c.has_optimizer) {
      b.first_moment = r.raw(n);
      b.second_moment = r.raw(n);
    }
    c.params.push_back(std::move(b));
  }
  if (!r.done()) throw IntegrityError("checkpoint has trailing bytes");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamW* optimizer,
                     const TrainConfig& train, std::int64_t step) {
  const std::string bytes = serialize_checkpoint(model, optimizer, train, step);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void restore_model(const CheckpointData& ckpt, Model& model) {
  const auto diffs = model.config().differences(ckpt.model);
  if (!diffs.empty()) {
    std::string msg = "checkpoint config differs from the model:";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  auto& reg = model.params();
  if (ckpt.params.size() != reg.size()) throw ConfigError("checkpoint parameter count differs from the model");
  for (const auto& b : ckpt.params) {
    if (!reg.contains(b.name)) throw ConfigError("checkpoint has unknown parameter " + b.name);
    Tensor& t = reg.get(b.name);
    if (t.shape() != b.shape) {
      throw ConfigError("parameter " + b.name + " is " + shape_str(b.shape) + " in the checkpoint but " +
                        shape_str(t.shape()) + " in the model");
    }
    std::copy(b.values.begin(), b.values.end(), t.mutable_data().begin());
  }
}

void restore_optimizer(const CheckpointData& ckpt, const Model& model, AdamW& optimizer) {
  if (!ckpt.has_optimizer) throw ContractError("checkpoint carries no optimizer state");
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto it = std::find_if(ckpt.params.begin(), ckpt.params.end(),
                           [&](const CheckpointData::Blob& b) { return b.name == entries[i].name; });
    if (it == ckpt.params.end()) throw ConfigError("checkpoint lacks parameter " + entries[i].name);
    optimizer.first_moment(i) = it->first_moment;
    optimizer.second_moment(i) = it->second_moment;
  }
  optimizer.set_steps(ckpt.optimizer_steps);
}

Model model_from_checkpoint(const CheckpointData& ckpt) {
  Model model(ckpt.model, 0);
  restore_model(ckpt, model);
  return model;
}

MCM_END_NAMESPACE
