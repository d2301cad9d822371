#pragma once

// Checkpoint container, all integers and floats little-endian:
//
//   magic      8 bytes  "HGRNCKPT"
//   version    u32      1
//   config     u32 length + UTF-8 JSON of the ModelConfig
//   count      u32      number of tensors
//   per tensor u32 name length, name bytes, u32 rank, u64 dims[rank],
//              f32 values[prod(dims)]
//
// Tensors appear in ModelParams::named() order.

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hgrn/model.hpp"

namespace hgrn {

struct CheckpointError : Error {
  using Error::Error;
};

inline constexpr char kCheckpointMagic[8] = {'H', 'G', 'R', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(char((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(char((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(std::uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<char> buf) : buf_(std::move(buf)) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(buf_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(buf_[pos_++])) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    return raw(u32());
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<char> serialize_checkpoint(const ModelConfig& cfg, ModelParams<T>& params) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(nlohmann::json(cfg).dump());
  auto named = params.named();
  w.u32(std::uint32_t(named.size()));
  for (const auto& p : named) {
    w.str(p.name);
    w.u32(std::uint32_t(p.tensor.rank()));
    for (auto dim : p.tensor.shape()) w.u64(dim);
    for (T v : p.tensor.values()) w.f32(float(v));
  }
  return w.data();
}

template <typename T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, ModelParams<T>& params) {
  const auto bytes = serialize_checkpoint(cfg, params);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path);
  os.write(bytes.data(), std::streamsize(bytes.size()));
}

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ModelParams<T> params;
};

template <typename T>
Checkpoint<T> deserialize_checkpoint(std::vector<char> bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.raw(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw CheckpointError("not a checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint<T> ck;
  try {
    ck.config = nlohmann::json::parse(r.str()).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint config: ") + e.what());
  }
  ck.params = init_params<T>(ck.config, 0);
  auto named = ck.params.named();
  const std::uint32_t count = r.u32();
  if (count != named.size())
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors, config expects " +
                          std::to_string(named.size()));
  for (auto& p : named) {
    const std::string name = r.str();
    if (name != p.name) throw CheckpointError("checkpoint tensor " + name + " where " + p.name + " was expected");
    const std::uint32_t rank = r.u32();
    if (rank != p.tensor.rank())
      throw CheckpointError("checkpoint tensor " + name + " has rank " + std::to_string(rank) + ", config expects " +
                            std::to_string(p.tensor.rank()));
    Shape shape(rank);
    for (auto& dim : shape) dim = r.u64();
    if (shape != p.tensor.shape())
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(shape) + ", config expects " +
                            shape_str(p.tensor.shape()));
    for (T& v : p.tensor.values()) v = T(r.f32());
  }
  if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(std::move(bytes));
}

}  // namespace hgrn
