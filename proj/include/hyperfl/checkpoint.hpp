#pragma once

// Flat binary container for named float64 tensors. Layout (all integers
// little-endian, see docs/checkpoint_format.md):
//
//   magic      8 bytes  "HYFLCKP1"
//   meta_len   u32      length of the UTF-8 metadata blob
//   meta       bytes
//   count      u64      number of entries
//   entry*     u32 name_len, name bytes, u32 rank, rank x u64 dims,
//              prod(dims) x f64 payload
//
// Entries are written in ascending name order.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <type_traits>

#include "hyperfl/errors.hpp"
#include "hyperfl/params.hpp"

namespace hyperfl {

inline constexpr std::string_view kCheckpointMagic = "HYFLCKP1";

struct Checkpoint {
  std::string metadata;
  ParamSet tensors;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    std::array<unsigned char, sizeof(T)> bytes;
    need(sizeof(T));
    std::memcpy(bytes.data(), data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint truncated");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const ParamSet& tensors, std::string_view metadata = {}) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(metadata.size()));
  out.append(metadata);
  detail::put_le<std::uint64_t>(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put_le<double>(out, v);
  }
  return out;
}

inline Checkpoint deserialize(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw FormatError("not a checkpoint (bad magic)");
  }
  Checkpoint ck;
  ck.metadata = std::string(in.take(in.get<std::uint32_t>()));
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name(in.take(in.get<std::uint32_t>()));
    const auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    std::size_t count_values = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(in.get<std::uint64_t>());
      if (d != 0 && count_values > in.remaining() / d) throw FormatError("checkpoint truncated");
      count_values *= d;
    }
    if (count_values > in.remaining() / sizeof(double)) throw FormatError("checkpoint truncated");
    Tensor t(shape);
    for (double& v : t.values()) v = in.get<double>();
    if (!ck.tensors.emplace(std::move(name), std::move(t)).second) {
      throw FormatError("checkpoint has a duplicate entry");
    }
  }
  if (!in.done()) throw FormatError("checkpoint has trailing bytes");
  return ck;
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet& tensors,
                            std::string_view metadata = {}) {
  write_file(path, serialize(tensors, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize(read_file(path));
}

}  // namespace hyperfl
