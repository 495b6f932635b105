#include "feddpa/util.hpp"

#include <atomic>
#include <charconv>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace feddpa {

uint64_t content_hash(std::span<const uint8_t> bytes, uint64_t h) {
  for (uint8_t c : bytes) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

uint64_t content_hash(std::span<const double> values, uint64_t h) {
  return content_hash(std::as_bytes(values).size() == 0
                          ? std::span<const uint8_t>{}
                          : std::span<const uint8_t>(
                                reinterpret_cast<const uint8_t*>(values.data()),
                                values.size() * sizeof(double)),
                      h);
}

std::string hash_hex(uint64_t h) {
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[h & 0xF];
    h >>= 4;
  }
  buf[16] = '\0';
  return std::string(buf);
}

void ByteWriter::u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::f64(double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  u64(bits);
}

void ByteWriter::f64_span(std::span<const double> v) {
  for (double x : v) f64(x);
}

void ByteWriter::bytes(std::span<const uint8_t> v) {
  buf_.insert(buf_.end(), v.begin(), v.end());
}

FormatError::FormatError(const std::string& msg, size_t offset)
    : std::runtime_error(msg + " (at byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

void ByteReader::need(size_t n, const char* what) {
  if (pos_ + n > buf_.size()) {
    throw FormatError(std::string("truncated payload while reading ") + what, pos_);
  }
}

uint32_t ByteReader::u32(const char* what) {
  need(4, what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::u64(const char* what) {
  need(8, what);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

double ByteReader::f64(const char* what) {
  const uint64_t bits = u64(what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

void ByteReader::f64_span(std::span<double> out, const char* what) {
  for (double& x : out) x = f64(what);
}

void ByteReader::expect_end(const char* what) const {
  if (pos_ != buf_.size()) {
    throw FormatError(std::string("trailing bytes after ") + what, pos_);
  }
}

void parallel_for(size_t n, int workers, const std::function<void(size_t)>& fn) {
  const size_t nthreads =
      std::min<size_t>(n, workers > 1 ? static_cast<size_t>(workers) : 1);
  if (nthreads <= 1) {
    for (size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  for (size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("failed to open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("failed to open " + path + " for writing");
  out << content;
  if (!out) throw std::runtime_error("failed to write " + path);
}

std::vector<uint8_t> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("failed to open " + path);
  in.seekg(0, std::ios::end);
  std::vector<uint8_t> buf(static_cast<size_t>(in.tellg()));
  in.seekg(0, std::ios::beg);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("failed to read " + path);
  return buf;
}

void write_binary_file(const std::string& path, std::span<const uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("failed to open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed to write " + path);
}

}  // namespace feddpa
