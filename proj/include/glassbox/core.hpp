#pragma once

// Shared plumbing: error type, Eigen aliases, hashing, small string helpers.

#include <openssl/evp.h>

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace glassbox {

// Every failure surfaced by the library carries a machine-readable code so the
// service layer can map it onto `{code, message}` error bodies.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

namespace errc {
inline constexpr const char* kInvalidArgument = "invalid_argument";
inline constexpr const char* kEmptyInput = "empty_input";
inline constexpr const char* kSequenceTooLong = "sequence_too_long";
inline constexpr const char* kOutOfRange = "out_of_range";
inline constexpr const char* kDivergence = "divergence";
inline constexpr const char* kIo = "io_error";
inline constexpr const char* kFormat = "format_error";
inline constexpr const char* kHashMismatch = "hash_mismatch";
inline constexpr const char* kDimensionMismatch = "dimension_mismatch";
inline constexpr const char* kNotFound = "not_found";
inline constexpr const char* kEmptyReport = "empty_report";
}  // namespace errc

inline void require(bool cond, const char* code, const std::string& message) {
  if (!cond) throw Error(code, message);
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using VecF = std::vector<float>;

// SHA-256 over arbitrary bytes, lowercase hex.
inline std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (ctx == nullptr) throw Error(errc::kIo, "EVP_MD_CTX_new failed");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest.data(), &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw Error(errc::kIo, "sha256 computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(errc::kIo, "cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(errc::kIo, "cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(errc::kIo, "short write to '" + path + "'");
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(errc::kIo, "cannot open '" + path + "' for reading");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::string join_lines(std::span<const std::string> lines) {
  std::string out;
  for (const auto& l : lines) {
    out += l;
    out += '\n';
  }
  return out;
}

inline std::string corpus_hash(std::span<const std::string> lines) {
  return sha256_hex(join_lines(lines));
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Fixed-decimal rendering used wherever a number is shown to a reader.
inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  std::string s(buf);
  if (s == "-0" || s.rfind("-0.", 0) == 0) {
    bool all_zero = true;
    for (char c : s)
      if (c >= '1' && c <= '9') all_zero = false;
    if (all_zero) s.erase(0, 1);
  }
  return s;
}

template <typename T>
inline double l2_norm(std::span<const T> v) {
  double acc = 0.0;
  for (T x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

}  // namespace glassbox
