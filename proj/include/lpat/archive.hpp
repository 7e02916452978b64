#pragma once

// Binary weight archive.
//
//   "LPAT" | u16 version (=1) | u32 tensor count
//   per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims |
//               u8 dtype (0 = f32, 1 = f64) | raw payload
//
// All integers and payload values are little-endian. Payloads are kept as
// raw bytes so that read followed by write reproduces the input exactly.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "lpat/error.hpp"
#include "lpat/params.hpp"
#include "lpat/tensor.hpp"

namespace lpat {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

class WeightArchive {
 public:
  static constexpr std::array<char, 4> kMagic{'L', 'P', 'A', 'T'};
  static constexpr std::uint16_t kVersion = 1;

  struct Entry {
    std::string name;
    std::vector<std::uint32_t> dims;
    DType dtype = DType::f32;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const Entry&, const Entry&) = default;
  };

  template <typename T>
  static WeightArchive from_params(const ModelParams<T>& params) {
    WeightArchive ar;
    for (const auto& [name, value] : params) {
      Entry e;
      e.name = name;
      for (auto d : value.shape) {
        if (d > std::numeric_limits<std::uint32_t>::max()) throw FormatError("dimension too large for archive: " + name);
        e.dims.push_back(static_cast<std::uint32_t>(d));
      }
      e.dtype = dtype_of<T>();
      e.payload.reserve(value.size() * sizeof(T));
      for (T v : value.data) put_le(e.payload, v);
      ar.entries_.push_back(std::move(e));
    }
    return ar;
  }

  /// Converts every entry to precision T (f32 ↔ f64 as needed).
  template <typename T>
  ModelParams<T> to_params() const {
    ModelParams<T> params;
    for (const auto& e : entries_) {
      Shape shape(e.dims.begin(), e.dims.end());
      std::vector<T> data(numel(shape));
      const std::size_t width = dtype_size(e.dtype);
      for (std::size_t i = 0; i < data.size(); ++i) {
        const std::uint8_t* src = e.payload.data() + i * width;
        data[i] = e.dtype == DType::f32 ? static_cast<T>(get_le<float>(src)) : static_cast<T>(get_le<double>(src));
      }
      params.add(e.name, Array<T>(std::move(shape), std::move(data)));
    }
    return params;
  }

  void write(std::ostream& os) const {
    std::vector<std::uint8_t> buf(kMagic.begin(), kMagic.end());
    put_le(buf, kVersion);
    put_le(buf, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) throw FormatError("tensor name too long: " + e.name);
      if (e.dims.size() > std::numeric_limits<std::uint8_t>::max()) throw FormatError("tensor rank too large: " + e.name);
      put_le(buf, static_cast<std::uint16_t>(e.name.size()));
      buf.insert(buf.end(), e.name.begin(), e.name.end());
      buf.push_back(static_cast<std::uint8_t>(e.dims.size()));
      for (auto d : e.dims) put_le(buf, d);
      buf.push_back(static_cast<std::uint8_t>(e.dtype));
      buf.insert(buf.end(), e.payload.begin(), e.payload.end());
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw FormatError("failed to write weight archive");
  }

  static WeightArchive read(std::istream& is) {
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r{bytes};
    if (std::memcmp(r.take(4), kMagic.data(), 4) != 0) throw FormatError("bad weight archive magic");
    const auto version = get_le<std::uint16_t>(r.take(2));
    if (version != kVersion) throw FormatError("unsupported weight archive version " + std::to_string(version));
    const auto count = get_le<std::uint32_t>(r.take(4));
    WeightArchive ar;
    for (std::uint32_t t = 0; t < count; ++t) {
      Entry e;
      const auto name_len = get_le<std::uint16_t>(r.take(2));
      const auto* name = r.take(name_len);
      e.name.assign(reinterpret_cast<const char*>(name), name_len);
      const std::uint8_t rank = *r.take(1);
      if (rank == 0) throw FormatError("tensor " + e.name + " has rank 0");
      std::size_t count_values = 1;
      for (std::uint8_t d = 0; d < rank; ++d) {
        e.dims.push_back(get_le<std::uint32_t>(r.take(4)));
        if (e.dims.back() == 0) throw FormatError("tensor " + e.name + " has a zero dimension");
        count_values *= e.dims.back();
      }
      const std::uint8_t tag = *r.take(1);
      if (tag > 1) throw FormatError("tensor " + e.name + " has unknown dtype tag " + std::to_string(tag));
      e.dtype = static_cast<DType>(tag);
      const std::size_t nbytes = count_values * dtype_size(e.dtype);
      const auto* payload = r.take(nbytes);
      e.payload.assign(payload, payload + nbytes);
      ar.entries_.push_back(std::move(e));
    }
    if (r.pos != bytes.size()) throw FormatError("trailing bytes after weight archive");
    return ar;
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }

  friend bool operator==(const WeightArchive&, const WeightArchive&) = default;

 private:
  struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    const std::uint8_t* take(std::size_t n) {
      if (bytes.size() - pos < n) throw FormatError("truncated weight archive");
      const auto* p = bytes.data() + pos;
      pos += n;
      return p;
    }
  };

  template <typename V>
  static void put_le(std::vector<std::uint8_t>& out, V value) {
    using U = std::conditional_t<sizeof(V) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(V); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }

  template <typename V>
  static V get_le(const std::uint8_t* src) {
    using U = std::conditional_t<sizeof(V) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(V); ++i) bits |= static_cast<U>(static_cast<U>(src[i]) << (8 * i));
    return std::bit_cast<V>(bits);
  }

  std::vector<Entry> entries_;
};

template <typename T>
void save_weights(const std::string& path, const ModelParams<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  WeightArchive::from_params(params).write(os);
}

template <typename T>
ModelParams<T> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  return WeightArchive::read(is).to_params<T>();
}

}  // namespace lpat
