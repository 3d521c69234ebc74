#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>
#include <string_view>

#include "curvedit/tensor.hpp"

namespace curvedit {

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= b[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      const unsigned char c = static_cast<unsigned char>(v >> (8 * i));
      bytes(&c, 1);
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) { bytes(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t hash_bytes(std::span<const std::uint8_t> data) {
  Fnv1a h;
  h.bytes(data.data(), data.size());
  return h.digest();
}

inline std::uint64_t hash_string(std::string_view s) {
  Fnv1a h;
  h.str(s);
  return h.digest();
}

/// Hash of shape and the little-endian bit patterns of the values.
inline std::uint64_t hash_tensor(const Tensor& t) {
  Fnv1a h;
  h.u64(t.rank());
  for (std::size_t d : t.shape()) h.u64(d);
  for (double v : t.data()) h.f64(v);
  return h.digest();
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace curvedit
