#pragma once

#include <fstream>
#include <iterator>

#include "hgrn/config.hpp"
#include "hgrn/model.hpp"

namespace hgrn {

struct TaskError : Error {
  using Error::Error;
};

inline constexpr std::int32_t kBlank = 0;
inline constexpr std::int32_t kDelim = 1;
inline constexpr std::int32_t kFirstSymbol = 2;

struct TaskSpec {
  TaskKind kind = TaskKind::selective_copy;
  std::size_t seq_len = 64;
  std::size_t payload_len = 8;
  std::size_t vocab_size = 10;
  std::uint64_t seed = 1;

  std::size_t symbols() const { return vocab_size - kFirstSymbol; }
};

inline TaskSpec task_spec(const RunConfig& cfg) {
  return {cfg.task.kind, cfg.train.seq_len, cfg.task.payload_len, cfg.task.vocab_size, cfg.data_seed()};
}

/// One training example: predict targets[t] after reading tokens[0..t].
/// mask[t] is 1 exactly where targets[t] is defined.
struct Sample {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline Rng sample_rng(const TaskSpec& spec, std::uint64_t index) {
  return Rng(splitmix64(splitmix64(spec.seed) ^ splitmix64(index + 0x51ED270B27ull)));
}

inline void check_synthetic(const TaskSpec& spec) {
  if (spec.vocab_size < kFirstSymbol + 2)
    throw TaskError("task vocab_size must leave at least 2 payload symbols besides BLANK and DELIM");
  if (spec.payload_len == 0) throw TaskError("task payload_len must be >= 1");
  if (spec.seq_len < 2 * spec.payload_len + 1)
    throw TaskError("task seq_len " + std::to_string(spec.seq_len) + " must be >= 2 * payload_len + 1 = " +
                    std::to_string(2 * spec.payload_len + 1));
}

// Answer span: DELIM at n - P, then the payload fed back one step late so
// positions n-P .. n-1 predict payload[0 .. P-1].
inline Sample with_answer(std::vector<std::int32_t> prefix, const std::vector<std::int32_t>& payload) {
  const std::size_t P = payload.size();
  Sample s;
  s.tokens = std::move(prefix);
  const std::size_t answer_start = s.tokens.size();
  s.tokens.push_back(kDelim);
  for (std::size_t j = 0; j + 1 < P; ++j) s.tokens.push_back(payload[j]);
  const std::size_t n = s.tokens.size();
  s.targets.assign(n, kBlank);
  s.mask.assign(n, 0);
  for (std::size_t j = 0; j < P; ++j) {
    s.targets[answer_start + j] = payload[j];
    s.mask[answer_start + j] = 1;
  }
  return s;
}

}  // namespace detail

/// Payload at the start, BLANK gap, DELIM, then the payload is the answer.
inline Sample gen_copy(const TaskSpec& spec, std::uint64_t index) {
  detail::check_synthetic(spec);
  Rng rng = detail::sample_rng(spec, index);
  const std::size_t P = spec.payload_len;
  std::vector<std::int32_t> payload(P);
  for (auto& p : payload) p = kFirstSymbol + std::int32_t(rng.below(spec.symbols()));
  std::vector<std::int32_t> prefix(spec.seq_len - P, kBlank);
  std::copy(payload.begin(), payload.end(), prefix.begin());
  return detail::with_answer(std::move(prefix), payload);
}

/// Payload symbols at `positions` (sorted, distinct, inside the prefix) among
/// BLANKs; the answer is the payload in index order.
inline Sample selective_copy_at(const TaskSpec& spec, const std::vector<std::size_t>& positions,
                                const std::vector<std::int32_t>& payload) {
  detail::check_synthetic(spec);
  const std::size_t prefix_len = spec.seq_len - spec.payload_len;
  if (positions.size() != spec.payload_len || payload.size() != spec.payload_len)
    throw TaskError("selective copy: payload/positions length must equal payload_len");
  std::vector<std::int32_t> prefix(prefix_len, kBlank);
  for (std::size_t j = 0; j < positions.size(); ++j) {
    if (positions[j] >= prefix_len || (j > 0 && positions[j] <= positions[j - 1]))
      throw TaskError("selective copy: positions must be increasing and inside the prefix");
    prefix[positions[j]] = payload[j];
  }
  return detail::with_answer(std::move(prefix), payload);
}

inline Sample gen_selective_copy(const TaskSpec& spec, std::uint64_t index) {
  detail::check_synthetic(spec);
  Rng rng = detail::sample_rng(spec, index);
  const std::size_t P = spec.payload_len, prefix_len = spec.seq_len - P;
  // partial Fisher-Yates for P distinct positions
  std::vector<std::size_t> slots(prefix_len);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  for (std::size_t j = 0; j < P; ++j) std::swap(slots[j], slots[j + rng.below(prefix_len - j)]);
  std::vector<std::size_t> positions(slots.begin(), slots.begin() + std::ptrdiff_t(P));
  std::sort(positions.begin(), positions.end());
  std::vector<std::int32_t> payload(P);
  for (auto& p : payload) p = kFirstSymbol + std::int32_t(rng.below(spec.symbols()));
  return selective_copy_at(spec, positions, payload);
}

/// Key/value alphabets for the associative-recall task: the first half of the
/// symbols are keys, the rest values.
inline std::pair<std::size_t, std::size_t> induction_alphabets(const TaskSpec& spec) {
  const std::size_t keys = spec.symbols() / 2;
  return {keys, spec.symbols() - keys};
}

/// payload_len distinct key/value pairs scattered over BLANKs; the final token
/// is one of the keys and its target is the paired value.
inline Sample gen_induction(const TaskSpec& spec, std::uint64_t index) {
  if (spec.vocab_size < kFirstSymbol + 2) throw TaskError("induction needs at least 2 symbols");
  const auto [num_keys, num_values] = induction_alphabets(spec);
  const std::size_t P = spec.payload_len, n = spec.seq_len;
  if (P == 0 || P > num_keys) throw TaskError("induction: payload_len must be in [1, number of keys]");
  if (n < 2 * P + 1) throw TaskError("induction: seq_len must be >= 2 * payload_len + 1");
  Rng rng = detail::sample_rng(spec, index);

  std::vector<std::int32_t> keys(num_keys);
  std::iota(keys.begin(), keys.end(), kFirstSymbol);
  for (std::size_t j = 0; j < P; ++j) std::swap(keys[j], keys[j + rng.below(num_keys - j)]);
  std::vector<std::int32_t> values(P);
  for (auto& v : values) v = kFirstSymbol + std::int32_t(num_keys + rng.below(num_values));

  // Pair slots are 2-token cells in the first n-1 tokens; choose P of them.
  const std::size_t cells = (n - 1) / 2;
  std::vector<std::size_t> slots(cells);
  std::iota(slots.begin(), slots.end(), std::size_t{0});
  for (std::size_t j = 0; j < P; ++j) std::swap(slots[j], slots[j + rng.below(cells - j)]);

  Sample s;
  s.tokens.assign(n, kBlank);
  for (std::size_t j = 0; j < P; ++j) {
    s.tokens[2 * slots[j]] = keys[j];
    s.tokens[2 * slots[j] + 1] = values[j];
  }
  const std::size_t q = rng.below(P);
  s.tokens[n - 1] = keys[q];
  s.targets.assign(n, kBlank);
  s.mask.assign(n, 0);
  s.targets[n - 1] = values[q];
  s.mask[n - 1] = 1;
  return s;
}

/// Byte stream split into contiguous train/validation parts.
struct ByteCorpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> val;
};

inline std::vector<std::int32_t> tokenize(std::string_view bytes) {
  std::vector<std::int32_t> out(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = std::int32_t(static_cast<unsigned char>(bytes[i]));
  return out;
}

inline std::string detokenize(std::span<const std::int32_t> tokens) {
  std::string out(tokens.size(), '\0');
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] > 255) throw TaskError("detokenize: token " + std::to_string(tokens[i]) + " is not a byte");
    out[i] = char(static_cast<unsigned char>(tokens[i]));
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TaskError("cannot open corpus " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// First floor(ratio * size) bytes train, the rest validate.
inline ByteCorpus split_corpus(std::vector<std::int32_t> tokens, double split_ratio) {
  if (tokens.empty()) throw TaskError("corpus is empty");
  if (!(split_ratio > 0 && split_ratio <= 1)) throw TaskError("split_ratio must be in (0, 1]");
  const auto cut = std::size_t(std::floor(split_ratio * double(tokens.size()) + 1e-9));
  ByteCorpus c;
  c.train.assign(tokens.begin(), tokens.begin() + std::ptrdiff_t(cut));
  c.val.assign(tokens.begin() + std::ptrdiff_t(cut), tokens.end());
  return c;
}

inline ByteCorpus load_byte_corpus(const std::string& path, double split_ratio) {
  const std::string bytes = read_file(path);
  if (bytes.empty()) throw TaskError("corpus is empty: " + path);
  return split_corpus(tokenize(bytes), split_ratio);
}

/// Window of a token stream as an LM sample: tokens[o..o+n), targets shifted by one.
inline Sample lm_window(std::span<const std::int32_t> stream, std::size_t offset, std::size_t n) {
  if (offset + n + 1 > stream.size()) throw TaskError("lm_window: window past end of stream");
  Sample s;
  s.tokens.assign(stream.begin() + std::ptrdiff_t(offset), stream.begin() + std::ptrdiff_t(offset + n));
  s.targets.assign(stream.begin() + std::ptrdiff_t(offset + 1), stream.begin() + std::ptrdiff_t(offset + n + 1));
  s.mask.assign(n, 1);
  return s;
}

/// Non-overlapping windows of length n covering the stream; the last one may
/// be shorter. Every token after the first is predicted exactly once.
inline std::vector<Sample> lm_windows(std::span<const std::int32_t> stream, std::size_t n) {
  if (stream.size() < 2) throw TaskError("stream too short to evaluate");
  if (n == 0) throw TaskError("window length must be >= 1");
  std::vector<Sample> out;
  for (std::size_t o = 0; o + 1 < stream.size(); o += n) out.push_back(lm_window(stream, o, std::min(n, stream.size() - 1 - o)));
  return out;
}

/// Training stream of windows from a shuffled, seeded list of window offsets.
/// Pass p uses its own shuffle, so there are no epoch boundaries to track.
class WindowStream {
 public:
  WindowStream(std::vector<std::int32_t> stream, std::size_t n, std::uint64_t seed)
      : stream_(std::move(stream)), n_(n), seed_(seed) {
    if (stream_.size() < n_ + 1)
      throw TaskError("corpus of " + std::to_string(stream_.size()) + " tokens is shorter than one window of " +
                      std::to_string(n_ + 1));
    for (std::size_t o = 0; o + n_ + 1 <= stream_.size(); o += n_) offsets_.push_back(o);
  }

  Sample at(std::uint64_t index) const {
    const std::uint64_t pass = index / offsets_.size(), j = index % offsets_.size();
    std::vector<std::size_t> order = offsets_;
    Rng rng(detail::splitmix64(seed_ ^ detail::splitmix64(pass)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return lm_window(stream_, order[j], n_);
  }
  std::size_t windows() const { return offsets_.size(); }

 private:
  std::vector<std::int32_t> stream_;
  std::size_t n_;
  std::uint64_t seed_;
  std::vector<std::size_t> offsets_;
};

inline Sample gen_sample(const TaskSpec& spec, std::uint64_t index) {
  switch (spec.kind) {
    case TaskKind::copy:
      return gen_copy(spec, index);
    case TaskKind::selective_copy:
      return gen_selective_copy(spec, index);
    case TaskKind::induction:
      return gen_induction(spec, index);
    case TaskKind::byte_lm:
      break;
  }
  throw TaskError("gen_sample: byte_lm samples come from a corpus");
}

// Batch file, little-endian:
//   magic "HGRNBAT1", u32 count, then per sample u32 length n,
//   i32 tokens[n], i32 targets[n], u8 mask[n].
inline void write_batch_file(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TaskError("cannot write " + path);
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xFF));
  };
  os.write("HGRNBAT1", 8);
  u32(std::uint32_t(samples.size()));
  for (const auto& s : samples) {
    u32(std::uint32_t(s.tokens.size()));
    for (auto t : s.tokens) u32(std::uint32_t(t));
    for (auto t : s.targets) u32(std::uint32_t(t));
    for (auto m : s.mask) os.put(char(m));
  }
}

inline std::vector<Sample> read_batch_file(const std::string& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size()) throw TaskError("batch file truncated: " + path);
  };
  auto u32 = [&] {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  };
  need(8);
  if (bytes.compare(0, 8, "HGRNBAT1") != 0) throw TaskError("not a batch file: " + path);
  pos = 8;
  std::vector<Sample> out(u32());
  for (auto& s : out) {
    const std::uint32_t n = u32();
    s.tokens.resize(n);
    s.targets.resize(n);
    for (auto& t : s.tokens) t = std::int32_t(u32());
    for (auto& t : s.targets) t = std::int32_t(u32());
    need(n);
    s.mask.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.begin() + std::ptrdiff_t(pos + n));
    pos += n;
  }
  return out;
}

}  // namespace hgrn
