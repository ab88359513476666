#pragma once

// Binary checkpoint format, little-endian:
//   "CCAM" | u32 version (=1) | u32 tensor count |
//   per tensor: u32 name length | UTF-8 name | u32 rank | u32 dims[rank] | f32 data[numel]

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ccam/errors.hpp"
#include "ccam/tensor.hpp"

namespace ccam {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'C', 'C', 'A', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  void take(void* dst, std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size()) throw CheckpointError(std::string("checkpoint truncated reading ") + what);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32(const char* what) {
    std::uint32_t v;
    take(&v, 4, what);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), t.numel() * sizeof(float));
  }
  return out;
}

inline NamedTensors decode_checkpoint(std::string bytes) {
  detail::Reader r(std::move(bytes));
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw CheckpointError("bad checkpoint magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32("name length");
    if (len > (1u << 16)) throw CheckpointError("implausible tensor name length");
    std::string name(len, '\0');
    r.take(name.data(), len, "name");
    const std::uint32_t rank = r.u32("rank");
    if (rank > 8) throw CheckpointError("implausible rank for tensor " + name);
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint32_t d = r.u32("dims");
      if (d == 0 || d > (1u << 24)) throw CheckpointError("bad dimension for tensor " + name);
      shape.push_back(static_cast<int>(d));
    }
    std::vector<float> data(shape_numel(shape));
    r.take(data.data(), data.size() * sizeof(float), "tensor data");
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return out;
}

inline void write_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open checkpoint for writing: " + path);
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint: " + path);
}

inline NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace ccam
