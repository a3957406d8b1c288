#pragma once

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "sigrl/binary_io.hpp"
#include "sigrl/model.hpp"

namespace sigrl {

inline constexpr char kCheckpointMagic[4] = {'S', 'I', 'G', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// SIGP layout: magic | version u32 | block count u32 | blocks, each
/// name (u32 length + UTF-8) | rank u32 | dims u32... | f64 payload.
inline std::vector<std::uint8_t> encode_params(const ModelParams& params) {
  model_dims(params);
  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, const Tensor&) { ++count; });
  w.u32(count);
  params.visit([&](const std::string& name, const Tensor& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(t.data());
  });
  return w.bytes();
}

inline ModelParams decode_params(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(FormatErrc::bad_magic, 0, "expected \"SIGP\"");
  }
  r.skip(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError(FormatErrc::version_mismatch, 4, "checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32("block count");
  std::map<std::string, Tensor> blocks;
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::size_t at = r.offset();
    std::string name = r.str("block name");
    const std::uint32_t rank = r.u32("block rank");
    if (rank > 4) throw FormatError(FormatErrc::dimension_mismatch, at, "block " + name + " has rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t elems = 1;
    for (auto& d : shape) {
      d = r.u32("block dim");
      elems = d == 0 || elems <= r.remaining() / d ? elems * d : r.remaining() + 1;
    }
    if (elems > r.remaining() / 8) r.require(r.remaining() + 1, "block payload");
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t vat = r.offset();
      t[i] = r.f64("parameter value");
      if (!std::isfinite(t[i])) throw FormatError(FormatErrc::invalid_value, vat, "non-finite value in " + name);
    }
    if (!blocks.emplace(name, std::move(t)).second) {
      throw FormatError(FormatErrc::invalid_value, at, "duplicate block " + name);
    }
  }
  if (!r.at_end()) throw FormatError(FormatErrc::dimension_mismatch, r.offset(), "trailing bytes after last block");

  ModelParams params;
  if (auto it = blocks.find("label_embeddings"); it != blocks.end()) params.label_embeddings = it->second;
  params.visit([&](const std::string& name, Tensor& t) {
    auto it = blocks.find(name);
    if (it == blocks.end()) throw FormatError(FormatErrc::invalid_value, r.offset(), "missing block " + name);
    t = std::move(it->second);
    blocks.erase(it);
  });
  if (!blocks.empty()) {
    throw FormatError(FormatErrc::invalid_value, r.offset(), "unknown block " + blocks.begin()->first);
  }
  try {
    model_dims(params);
  } catch (const DimensionError& e) {
    throw FormatError(FormatErrc::dimension_mismatch, r.offset(), e.what());
  }
  return params;
}

inline void write_checkpoint(const ModelParams& params, const std::string& path) {
  io::write_file(path, encode_params(params));
}

inline ModelParams read_checkpoint(const std::string& path) { return decode_params(io::read_file(path)); }

}  // namespace sigrl
