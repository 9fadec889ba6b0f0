#pragma once

// FPT1 tensor files: "FPT1", u32 rank, rank x u32 extents, float32 payload.
// Every integer and float is little-endian; payload is row-major.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fps/core/tensor.hpp"

namespace fps {

/// File-system or format failure (as opposed to a validation error).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw IoError("FPT1: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

}  // namespace detail

inline constexpr char kFpt1Magic[4] = {'F', 'P', 'T', '1'};

/// Serializes a shape and values (narrowed to float32) into FPT1 bytes.
template <class T>
std::string encode_fpt1(const Shape& shape, std::span<const T> values) {
  if (shape_numel(shape) != values.size()) throw ShapeError("encode_fpt1: shape and payload disagree");
  std::string out(kFpt1Magic, 4);
  detail::put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * values.size());
  for (T v : values) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

struct Fpt1Blob {
  Shape shape;
  std::vector<float> values;
};

/// Parses FPT1 bytes starting at `pos`; advances `pos` past the record.
inline Fpt1Blob decode_fpt1(const std::string& bytes, std::size_t& pos) {
  if (pos + 4 > bytes.size() || std::memcmp(bytes.data() + pos, kFpt1Magic, 4) != 0)
    throw IoError("FPT1: bad magic");
  pos += 4;
  Fpt1Blob blob;
  const std::uint32_t rank = detail::get_u32(bytes, pos);
  if (rank == 0 || rank > 8) throw IoError("FPT1: unsupported rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::get_u32(bytes, pos);
    if (d == 0 || d > (1u << 28)) throw IoError("FPT1: bad extent");
    blob.shape.push_back(static_cast<int>(d));
  }
  const std::size_t n = shape_numel(blob.shape);
  if (pos + 4 * n > bytes.size()) throw IoError("FPT1: truncated payload");
  blob.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) blob.values[i] = std::bit_cast<float>(detail::get_u32(bytes, pos));
  return blob;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode_fpt1<T>(t.shape(), t.data()));
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  Fpt1Blob blob = decode_fpt1(bytes, pos);
  if (pos != bytes.size()) throw IoError("FPT1: trailing bytes in " + path.string());
  return Tensor<T>::from(blob.shape, std::vector<T>(blob.values.begin(), blob.values.end()));
}

}  // namespace fps
