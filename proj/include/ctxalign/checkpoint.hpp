#pragma once

// Flat binary checkpoint, all integers and reals little-endian:
//
//   magic     8 bytes  "CTXALIGN"
//   version   u32      (1)
//   digest    u64      model-config digest
//   count     u32      number of tensors
//   count × { name_len u32, name bytes, rank u32, extents u64 × rank,
//             values f64 × prod(extents) }

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ctxalign/error.hpp"
#include "ctxalign/io.hpp"
#include "ctxalign/numerics.hpp"

namespace ctxalign {

inline constexpr std::string_view kCheckpointMagic = "CTXALIGN";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(std::string_view in, std::size_t& at) {
  if (at + sizeof(T) > in.size()) throw ParseError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  }
  at += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, ckpt.config_digest);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape) detail::put_le<std::uint64_t>(out, e);
    for (double v : t.values) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view in) {
  if (in.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw ParseError("checkpoint: bad magic");
  }
  std::size_t at = kCheckpointMagic.size();
  const auto version = detail::get_le<std::uint32_t>(in, at);
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config_digest = detail::get_le<std::uint64_t>(in, at);
  const auto count = detail::get_le<std::uint32_t>(in, at);
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointTensor t;
    const auto len = detail::get_le<std::uint32_t>(in, at);
    if (at + len > in.size()) throw ParseError("checkpoint: truncated name");
    t.name = std::string(in.substr(at, len));
    at += len;
    const auto rank = detail::get_le<std::uint32_t>(in, at);
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(in, at)));
    }
    const auto n = shape_size(t.shape);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      t.values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(in, at));
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (at != in.size()) throw ParseError("checkpoint: trailing bytes");
  return ckpt;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  atomic_write(path, encode_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace ctxalign
