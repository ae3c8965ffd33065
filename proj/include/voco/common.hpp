#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace voco {

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError/UsageError/DimensionError -> 2, TrainingError -> 3,
//   FormatError/StalenessError -> 4, ProtocolError -> 5.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct UsageError : Error { using Error::Error; };
struct CapacityError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ProtocolError : Error { using Error::Error; };
struct StalenessError : Error { using Error::Error; };

struct FormatError : Error {
  size_t byte_offset;
  FormatError(const std::string& msg, size_t offset)
      : Error(msg + " (at byte " + std::to_string(offset) + ")"), byte_offset(offset) {}
};

struct TrainingError : Error {
  int step;
  TrainingError(const std::string& msg, int at_step)
      : Error(msg + " (step " + std::to_string(at_step) + ")"), step(at_step) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 supplies the bits; the uniform/normal
// mappings are spelled out here because std::*_distribution output is
// implementation-defined and we want seed-reproducible runs.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t bits() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  // inclusive on both ends
  int uniform_int(int lo, int hi) {
    if (hi < lo) throw UsageError("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  // Box-Muller, two draws per call, no spare caching
  double normal() {
    double u1 = uniform();
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, used for all fingerprints (checkpoints, vision ids, caches).
// ---------------------------------------------------------------------------

class Fnv1a64 {
 public:
  void update(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    for (size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ull;
    }
  }
  uint64_t digest() const { return h_; }

 private:
  uint64_t h_ = 0xcbf29ce484222325ull;
};

inline uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  Fnv1a64 h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

// ---------------------------------------------------------------------------
// Explicit little-endian byte IO for the binary file formats.
// ---------------------------------------------------------------------------

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void f64(double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    u64(u);
  }
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  const std::vector<uint8_t>& bytes() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }
  size_t size() const { return buf_.size(); }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}

  uint8_t u8() {
    need(1, "u8");
    return data_[pos_++];
  }
  uint16_t u16() {
    need(2, "u16");
    uint16_t v = static_cast<uint16_t>(data_[pos_]) | static_cast<uint16_t>(data_[pos_ + 1]) << 8;
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4, "u32");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  uint64_t u64() {
    need(8, "u64");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() {
    uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  double f64() {
    uint64_t u = u64();
    double v;
    std::memcpy(&v, &u, 8);
    return v;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return data_.size() - pos_; }

  void expect_end(const char* what) {
    if (pos_ != data_.size())
      throw FormatError(std::string(what) + ": trailing bytes", pos_);
  }

 private:
  void need(size_t n, const char* what) {
    if (pos_ + n > data_.size())
      throw FormatError(std::string("truncated input while reading ") + what, pos_);
  }

  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Rectangular boolean grid, row-major. bit(i, j) true means (i, j) allowed.
// Shared between attention masks and the masked softmax kernel.
// ---------------------------------------------------------------------------

struct BoolGrid {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> bits;  // rows * cols

  BoolGrid() = default;
  BoolGrid(int r, int c, uint8_t fill = 0)
      : rows(r), cols(c), bits(static_cast<size_t>(r) * c, fill) {}

  bool at(int i, int j) const { return bits[static_cast<size_t>(i) * cols + j] != 0; }
  void set(int i, int j, bool v) { bits[static_cast<size_t>(i) * cols + j] = v ? 1 : 0; }

  BoolGrid row_slice(int r0, int r1) const {
    if (r0 < 0 || r1 < r0 || r1 > rows) throw UsageError("BoolGrid::row_slice: bad range");
    BoolGrid out(r1 - r0, cols);
    std::copy(bits.begin() + static_cast<size_t>(r0) * cols,
              bits.begin() + static_cast<size_t>(r1) * cols, out.bits.begin());
    return out;
  }

  bool operator==(const BoolGrid& o) const = default;
};

}  // namespace voco
