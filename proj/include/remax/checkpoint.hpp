#pragma once

// Versioned parameter checkpoint. Layout: magic "RMXCKPT1", then per
// parameter: u32 name length, name bytes, u32 rank, u64 dims, f64
// little-endian payload; a CRC32 over everything precedes EOF.

#include <string>
#include <vector>

#include "remax/io.hpp"
#include "remax/model.hpp"

namespace remax {

inline constexpr char kCheckpointMagic[] = "RMXCKPT1";

inline void save_checkpoint(const std::string& path, const ParamStore& params) {
  ByteWriter w;
  w.str(kCheckpointMagic);
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape) w.u64(d);
    for (double v : t.data) w.f64(v);
  }
  w.finish_with_crc(path);
}

// Loads into an existing store; every stored tensor must match a known
// parameter's name and shape, and every parameter must be present.
inline void load_checkpoint(const std::string& path, ParamStore& params) {
  ByteReader r = ByteReader::load_with_crc(path);
  if (r.str(sizeof(kCheckpointMagic) - 1) != kCheckpointMagic) {
    throw IoError("not a checkpoint (bad magic/version): " + path);
  }
  std::size_t loaded = 0;
  while (!r.at_end()) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (!params.contains(name)) throw IoError("checkpoint: unknown parameter " + name);
    Tensor& dst = params.get(name);
    if (dst.shape != shape) throw IoError("checkpoint: shape mismatch for " + name);
    for (auto& v : dst.data) v = r.f64();
    ++loaded;
  }
  if (loaded != params.size()) throw IoError("checkpoint: missing parameters");
}

}  // namespace remax
