#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace feddpa {

// FNV-1a content hash over raw bytes; used for config manifests and the
// frozen-parameter / adapter integrity checks.
inline constexpr uint64_t kFnvOffset = 0xCBF29CE484222325ull;
uint64_t content_hash(std::span<const uint8_t> bytes, uint64_t h = kFnvOffset);
uint64_t content_hash(std::span<const double> values, uint64_t h = kFnvOffset);
std::string hash_hex(uint64_t h);

// Little-endian binary writer/reader for checkpoint and adapter payloads.
class ByteWriter {
 public:
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void f64_span(std::span<const double> v);
  void bytes(std::span<const uint8_t> v);
  const std::vector<uint8_t>& buffer() const { return buf_; }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

// Reads little-endian fields and reports the byte offset of any failure.
class ByteReader {
 public:
  explicit ByteReader(std::span<const uint8_t> buf) : buf_(buf) {}
  uint32_t u32(const char* what);
  uint64_t u64(const char* what);
  double f64(const char* what);
  void f64_span(std::span<double> out, const char* what);
  size_t offset() const { return pos_; }
  size_t remaining() const { return buf_.size() - pos_; }
  void expect_end(const char* what) const;

 private:
  void need(size_t n, const char* what);
  std::span<const uint8_t> buf_;
  size_t pos_ = 0;
};

// Malformed binary payloads. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& msg, size_t offset);
  size_t offset() const { return offset_; }

 private:
  size_t offset_;
};

// Runs fn(0..n-1), each index exactly once, on up to `workers` threads.
// Indices are independent by contract, so results are identical at any
// worker count. The first exception thrown is rethrown after join.
void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn);

// Shortest-round-trip float formatting; keeps emitted CSV/JSON byte-stable.
std::string format_double(double v);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::vector<uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, std::span<const uint8_t> bytes);

}  // namespace feddpa
