#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "curvedit/params.hpp"

namespace curvedit {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat parameter container: string metadata plus named float64 tensors.
///
/// Layout (all integers and floats little-endian):
///   "CVCK" | u32 version | u32 n_meta | {u32 len, key, u32 len, value}*
///   | u32 n_tensors | {u32 len, name, u32 rank, u64 dim*rank, f64 data*}*
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::map<std::string, std::string> meta;
  ParamStore params;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    put_bytes(out, "CVCK", 4);
    put_u32(out, version);
    put_u32(out, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      put_str(out, k);
      put_str(out, v);
    }
    put_u32(out, static_cast<std::uint32_t>(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      put_str(out, params.name(i));
      const Tensor& t = params.value(i);
      put_u32(out, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) put_u64(out, d);
      for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& in) {
    Reader r{in, 0};
    if (in.size() < 4 || std::memcmp(in.data(), "CVCK", 4) != 0)
      throw FormatError("not a checkpoint container (bad magic)");
    r.pos = 4;
    Checkpoint c;
    c.version = r.u32();
    if (c.version != kVersion)
      throw FormatError("unsupported checkpoint version " + std::to_string(c.version));
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
      std::string k = r.str();
      c.meta[k] = r.str();
    }
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      std::string name = r.str();
      const std::uint32_t rank = r.u32();
      Shape shape(rank);
      for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
      std::vector<double> data(shape_numel(shape));
      for (double& v : data) v = std::bit_cast<double>(r.u64());
      c.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    if (r.pos != in.size()) throw FormatError("trailing bytes after checkpoint payload");
    return c;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

  const std::string& require_meta(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint lacks metadata field '" + key + "'");
    return it->second;
  }

 private:
  struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos;

    void need(std::size_t n) const {
      if (pos + n > buf.size()) throw FormatError("truncated checkpoint");
    }
    std::uint32_t u32() {
      need(4);
      std::uint32_t v = 0;
      for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
      pos += 4;
      return v;
    }
    std::uint64_t u64() {
      need(8);
      std::uint64_t v = 0;
      for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + i]) << (8 * i);
      pos += 8;
      return v;
    }
    std::string str() {
      const std::uint32_t n = u32();
      need(n);
      std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
      pos += n;
      return s;
    }
  };

  static void put_bytes(std::vector<std::uint8_t>& out, const char* p, std::size_t n) {
    out.insert(out.end(), p, p + n);
  }
  static void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  static void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  static void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    put_bytes(out, s.data(), s.size());
  }
};

}  // namespace curvedit
