// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "vlcdoc/binary_io.hpp"
#include "vlcdoc/config.hpp"
#include "vlcdoc/model.hpp"
#include "vlcdoc/optimizer.hpp"

namespace vlcdoc {

/// Model parameters, optimizer state and the config that produced them.
struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  Model model;
  AdamW optimizer;
};

// Checkpoint container, little-endian:
//   "XCKP" u16 version
//   str config echo (key = value text)
//   u64 completed steps
//   u32 parameter count, then per parameter: str name, tensor
//   u64 optimizer step, u32 moment count, then per entry: str name, tensor m, tensor v
// where str = u32 length + bytes and tensor = u32 rank, u32 dims[rank], f64 data.
inline constexpr char kCheckpointMagic[4] = {'X', 'C', 'K', 'P'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

inline void put_tensor(ByteWriter& w, const Tensor& t) {
  w.u32(static_cast<std::uint32_t>(t.shape().size()));
  for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.data()) w.f64(v);
}

inline Tensor get_tensor(ByteReader& r) {
  const std::size_t at = r.offset();
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw FormatError("bad tensor rank " + std::to_string(rank), at);
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.u32();
    if (d == 0) throw FormatError("zero tensor dimension", at);
  }
  std::vector<double> data(numel(shape));
  for (auto& v : data) v = r.f64();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  w.str(to_config_text(c.config));
  w.u64(c.step);
  const auto params = c.model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, p] : params) {
    w.str(name);
    detail::put_tensor(w, p->value);
  }
  w.u64(c.optimizer.step_count());
  w.u32(static_cast<std::uint32_t>(c.optimizer.moments().size()));
  for (const auto& [name, m] : c.optimizer.moments()) {
    w.str(name);
    detail::put_tensor(w, m.first);
    detail::put_tensor(w, m.second);
  }
  return w.buffer();
}

/// Rebuilds the model from the embedded config, then overwrites every
/// parameter by name. Missing, extra or mis-shaped tensors are format errors.
inline Checkpoint decode_checkpoint(std::string bytes) {
  ByteReader r(std::move(bytes));
  if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint (bad magic)", 0);
  const std::size_t version_at = r.offset();
  if (const auto v = r.u16(); v != kCheckpointVersion) throw UnsupportedVersionError(v, kCheckpointVersion, version_at);

  Checkpoint c;
  const std::size_t config_at = r.offset();
  try {
    c.config = parse_config(r.str());
    c.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config is invalid: ") + e.what(), config_at);
  }
  c.step = r.u64();
  c.model = Model::init(c.config.model_config(), c.config.seed);

  auto params = c.model.named_parameters();
  const std::size_t count_at = r.offset();
  if (r.u32() != params.size()) throw FormatError("parameter count does not match the embedded config", count_at);
  for (auto& [name, p] : params) {
    const std::size_t at = r.offset();
    if (const std::string got = r.str(); got != name) {
      throw FormatError("expected parameter '" + name + "', found '" + got + "'", at);
    }
    const std::size_t tensor_at = r.offset();
    Tensor t = detail::get_tensor(r);
    if (t.shape() != p->value.shape()) {
      throw FormatError("parameter '" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                            to_string(p->value.shape()),
                        tensor_at);
    }
    p->value = std::move(t);
    p->zero_grad();
  }

  const std::uint64_t opt_step = r.u64();
  const std::uint32_t n_moments = r.u32();
  std::map<std::string, AdamW::Moments> moments;
  for (std::uint32_t i = 0; i < n_moments; ++i) {
    std::string name = r.str();
    Tensor first = detail::get_tensor(r);
    Tensor second = detail::get_tensor(r);
    moments.emplace(std::move(name), AdamW::Moments{std::move(first), std::move(second)});
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  c.optimizer = AdamW(c.config.adamw);
  c.optimizer.restore(opt_step, std::move(moments));
  return c;
}

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace vlcdoc
