#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pptrn/hash.hpp"
#include "pptrn/training.hpp"

namespace pptrn {

namespace {

constexpr char kMagic[8] = {'P', 'P', 'T', 'R', 'N', 'C', 'K', 'P'};

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, std::string origin)
      : bytes_(bytes), end_(end), origin_(std::move(origin)) {}

  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw CorruptCheckpoint(origin_ + ": blob extends past the end of the file");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s(bytes_.begin() + std::ptrdiff_t(pos_), bytes_.begin() + std::ptrdiff_t(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
  std::size_t end_;
  std::string origin_;
};

std::uint64_t fnv(const std::uint8_t* data, std::size_t n) {
  Fnv1a64 h;
  h.update({data, n});
  return h.value();
}


}  // namespace

std::uint64_t Checkpoint::weights_hash() const {
  Fnv1a64 h;
  for (const auto& b : blobs) {
    h.update(b.name);
    for (std::size_t e : b.shape) h.update_u64(e);
    h.update({reinterpret_cast<const std::uint8_t*>(b.data.data()), b.data.size() * sizeof(float)});
  }
  return h.value();
}

Checkpoint capture(const Pipeline& pipeline, std::uint32_t stage, std::uint64_t step, const Philox& rng) {
  Checkpoint ck;
  ck.stage = stage;
  ck.config_text = pipeline.config().to_text();
  ck.config_hash = pipeline.config().model_hash();
  ck.step = step;
  ck.encoder_hash = stage == 2 ? pipeline.encoder.params().hash() : 0;
  ck.estimator_trained = pipeline.estimator.trained();
  ck.rng = rng.state();
  for (const auto* store : pipeline.stores()) {
    for (const auto& e : store->entries()) ck.blobs.push_back({e.name, e.value.shape(), {e.value.data().begin(), e.value.data().end()}});
  }
  return ck;
}

void apply(const Checkpoint& ck, Pipeline& pipeline) {
  if (ck.config_hash != pipeline.config().model_hash()) {
    throw ConfigError("checkpoint architecture (hash " + hex64(ck.config_hash) + ") does not match the configuration (" +
                      hex64(pipeline.config().model_hash()) + ")");
  }
  std::vector<NamedParam<float>*> targets;
  for (auto* store : pipeline.stores()) {
    for (auto& e : store->entries()) targets.push_back(&e);
  }
  if (targets.size() != ck.blobs.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(ck.blobs.size()) + " tensors, model expects " +
                      std::to_string(targets.size()));
  }
  // Validate everything before writing anything.
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i]->name != ck.blobs[i].name || targets[i]->value.shape() != ck.blobs[i].shape) {
      throw ConfigError("checkpoint tensor " + ck.blobs[i].name + " " + shape_str(ck.blobs[i].shape) +
                        " does not match model tensor " + targets[i]->name + " " + shape_str(targets[i]->value.shape()));
    }
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i]->value.mutable_data();
    std::copy(ck.blobs[i].data.begin(), ck.blobs[i].data.end(), dst.begin());
  }
  pipeline.estimator.set_trained(ck.estimator_trained);
}

Pipeline load_pipeline(const Checkpoint& ck) {
  Pipeline p(ck.config());
  apply(ck, p);
  return p;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ck) {
  Writer w;
  w.bytes.insert(w.bytes.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(ck.version);
  w.u32(ck.stage);
  w.u64(ck.config_hash);
  w.u64(ck.step);
  w.u64(ck.encoder_hash);
  w.u8(ck.estimator_trained ? 1 : 0);
  w.str(ck.config_text);
  w.u64(ck.rng.seed);
  w.u64(ck.rng.stream);
  w.u64(ck.rng.block_index);
  for (std::uint32_t v : ck.rng.buffer) w.u32(v);
  w.u32(ck.rng.buffered);
  w.u8(ck.rng.has_spare ? 1 : 0);
  w.f64(ck.rng.spare);
  w.u64(ck.blobs.size());
  for (const auto& b : ck.blobs) {
    w.str(b.name);
    w.u32(std::uint32_t(b.shape.size()));
    for (std::size_t e : b.shape) w.u64(e);
    w.u64(b.data.size());
    for (float v : b.data) w.f32(v);
  }
  w.u64(fnv(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  constexpr std::size_t kHeader = sizeof kMagic + 4;
  if (bytes.size() < kHeader + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CorruptCheckpoint(origin + ": not a checkpoint (bad magic or too short)");
  }
  Reader head(bytes, kHeader, origin);
  for (std::size_t i = 0; i < sizeof kMagic; ++i) head.u8();
  const std::uint32_t version = head.u32();
  if (version != Checkpoint::kVersion) {
    throw VersionMismatch(origin + ": checkpoint format version " + std::to_string(version) + ", expected " +
                          std::to_string(Checkpoint::kVersion));
  }
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= std::uint64_t(bytes[body + std::size_t(i)]) << (8 * i);
  if (stored != fnv(bytes.data(), body)) throw CorruptCheckpoint(origin + ": integrity hash mismatch (truncated or modified)");

  Reader r(bytes, body, origin);
  for (std::size_t i = 0; i < kHeader; ++i) r.u8();
  Checkpoint ck;
  ck.version = version;
  ck.stage = r.u32();
  ck.config_hash = r.u64();
  ck.step = r.u64();
  ck.encoder_hash = r.u64();
  ck.estimator_trained = r.u8() != 0;
  ck.config_text = r.str();
  ck.rng.seed = r.u64();
  ck.rng.stream = r.u64();
  ck.rng.block_index = r.u64();
  for (auto& v : ck.rng.buffer) v = r.u32();
  ck.rng.buffered = r.u32();
  ck.rng.has_spare = r.u8() != 0;
  ck.rng.spare = r.f64();
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    Blob b;
    b.name = r.str();
    const std::uint32_t rank = r.u32();
    std::uint64_t expect = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      b.shape.push_back(std::size_t(r.u64()));
      expect *= b.shape.back();
    }
    const std::uint64_t n = r.u64();
    if (n != expect) throw CorruptCheckpoint(origin + ": blob " + b.name + " length disagrees with its shape");
    r.need(std::size_t(n) * 4);
    b.data.resize(std::size_t(n));
    for (float& v : b.data) v = r.f32();
    ck.blobs.push_back(std::move(b));
  }
  if (!r.done()) throw CorruptCheckpoint(origin + ": trailing bytes after the last blob");
  if (ck.stage != 1 && ck.stage != 2) throw CorruptCheckpoint(origin + ": invalid stage tag");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto bytes = serialize(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return deserialize(bytes, path.string());
}

}  // namespace pptrn
