// Binary parameter checkpoints.
//
// Layout (little-endian):
//   magic "MVATCKPT" (8 bytes) | u32 version | u64 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 data[prod(dims)]
#pragma once

#include "mvattn/autodiff.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace mvattn::ad {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'A', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedArrays = std::vector<std::pair<std::string, NDArray>>;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
T take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw CheckpointError("checkpoint truncated");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const NamedArrays& tensors) {
  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(buf, kCheckpointVersion);
  detail::put<std::uint64_t>(buf, tensors.size());
  for (const auto& [name, arr] : tensors) {
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(arr.shape.size()));
    for (auto d : arr.shape) detail::put<std::uint64_t>(buf, d);
    buf.append(reinterpret_cast<const char*>(arr.data.data()), arr.data.size() * sizeof(double));
  }
  return buf;
}

inline NamedArrays decode_checkpoint(const std::string& buf) {
  if (buf.size() < sizeof(kCheckpointMagic) || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError("not a checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kCheckpointMagic);
  const auto version = detail::take<std::uint32_t>(buf, pos);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::take<std::uint64_t>(buf, pos);
  NamedArrays out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::take<std::uint32_t>(buf, pos);
    if (pos + len > buf.size()) throw CheckpointError("checkpoint truncated");
    std::string name = buf.substr(pos, len);
    pos += len;
    const auto rank = detail::take<std::uint32_t>(buf, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::take<std::uint64_t>(buf, pos);
    const std::size_t n = numel(shape);
    if (pos + n * sizeof(double) > buf.size()) throw CheckpointError("checkpoint truncated");
    std::vector<double> data(n);
    std::memcpy(data.data(), buf.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    out.emplace_back(std::move(name), NDArray(std::move(shape), std::move(data)));
  }
  if (pos != buf.size()) throw CheckpointError("trailing bytes after checkpoint");
  return out;
}

inline void save_checkpoint(const std::string& path, const NamedArrays& tensors) {
  const std::string buf = encode_checkpoint(tensors);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw CheckpointError("cannot move checkpoint into " + path);
}

inline NamedArrays load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace mvattn::ad
