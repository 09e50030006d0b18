// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint byte format:
//   "PGCK" | u32 version (1) | u32 tensor count
//   per tensor: u16 name length | name | u8 dtype | u8 trainable | u8 rank |
//               rank x u64 dims | little-endian data
//   u32 CRC32 of every preceding byte
// dtype: 0 = f32, 1 = f64, 2 = u64. Optimizer moments are stored as frozen
// tensors "__optim.m/<name>" and "__optim.v/<name>"; the step counter and
// config hash as u64 tensors "__meta.step" and "__meta.config_hash".

#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "vidprompt/autograd.hpp"
#include "vidprompt/binary_io.hpp"
#include "vidprompt/objectives.hpp"

namespace vidprompt {

inline constexpr char kCheckpointMagic[4] = {'P', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u64 = 2 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else return DType::u64;
}

inline std::string dtype_name(DType d) {
  switch (d) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u64: return "u64";
  }
  return "?";
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One stored tensor with its payload left as raw bytes.
struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  bool trainable = false;
  Shape shape;
  std::vector<std::uint8_t> data;

  bool operator==(const TensorRecord&) const = default;
};

template <class T>
struct TrainingState {
  ParameterSet<T> params;
  std::map<std::string, AdamMoments<T>> moments;
  std::uint64_t step = 0;
  std::uint64_t config_hash = 0;
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

namespace checkpoint_detail {

template <class U>
TensorRecord record(const std::string& name, bool trainable, const Tensor<U>& t) {
  TensorRecord r{name, dtype_of<U>(), trainable, t.shape(), {}};
  r.data.reserve(t.size() * sizeof(U));
  for (U v : t.values()) binary::append_le<U>(r.data, v);
  return r;
}

template <class U>
Tensor<U> decode(const TensorRecord& r) {
  if (r.dtype != dtype_of<U>()) {
    throw CheckpointError("checkpoint: tensor '" + r.name + "' has dtype " + dtype_name(r.dtype) + ", expected " +
                          dtype_name(dtype_of<U>()));
  }
  Tensor<U> t(r.shape);
  binary::Reader rd(r.data);
  for (auto& v : t.values()) v = rd.read<U>();
  return t;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace checkpoint_detail

inline std::vector<std::uint8_t> encode_records(const std::vector<TensorRecord>& records) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  binary::append_le<std::uint32_t>(out, kCheckpointVersion);
  binary::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.size() > 0xFFFF) throw CheckpointError("checkpoint: tensor name too long");
    if (r.shape.size() > 0xFF) throw CheckpointError("checkpoint: rank too large");
    binary::append_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.name.size()));
    binary::append_bytes(out, r.name);
    out.push_back(static_cast<std::uint8_t>(r.dtype));
    out.push_back(r.trainable ? 1 : 0);
    out.push_back(static_cast<std::uint8_t>(r.shape.size()));
    for (std::size_t d : r.shape) binary::append_le<std::uint64_t>(out, d);
    out.insert(out.end(), r.data.begin(), r.data.end());
  }
  binary::append_le<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

inline std::vector<TensorRecord> decode_records(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw CheckpointError("checkpoint: CRC mismatch (file truncated)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  {
    std::vector<std::uint8_t> last(bytes.end() - 4, bytes.end());
    binary::Reader rd(last);
    stored = rd.read<std::uint32_t>();
  }
  if (crc32_of(bytes.data(), body) != stored) throw CheckpointError("checkpoint: CRC mismatch");
  binary::Reader rd(bytes, body);
  if (rd.read_string(4) != std::string(kCheckpointMagic, 4)) throw CheckpointError("checkpoint: bad magic");
  const auto version = rd.read<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = rd.read<std::uint32_t>();
  std::vector<TensorRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    r.name = rd.read_string(rd.read<std::uint16_t>());
    const auto dtype = rd.read<std::uint8_t>();
    if (dtype > 2) throw CheckpointError("checkpoint: unknown dtype " + std::to_string(dtype));
    r.dtype = static_cast<DType>(dtype);
    r.trainable = rd.read<std::uint8_t>() != 0;
    const auto rank = rd.read<std::uint8_t>();
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      r.shape.push_back(static_cast<std::size_t>(rd.read<std::uint64_t>()));
      n *= r.shape.back();
    }
    const std::string payload = rd.read_string(n * checkpoint_detail::dtype_size(r.dtype));
    r.data.assign(payload.begin(), payload.end());
    out.push_back(std::move(r));
  }
  if (!rd.at_end()) throw CheckpointError("checkpoint: trailing bytes before CRC");
  return out;
}

template <class T>
std::vector<TensorRecord> state_records(const ParameterSet<T>& params, const AdamW<T>* opt, std::uint64_t config_hash) {
  std::vector<TensorRecord> recs;
  for (const auto& p : params) recs.push_back(checkpoint_detail::record(p.name, p.trainable, p.value));
  if (opt) {
    for (const auto& [name, mv] : opt->moments()) {
      recs.push_back(checkpoint_detail::record("__optim.m/" + name, false, mv.m));
      recs.push_back(checkpoint_detail::record("__optim.v/" + name, false, mv.v));
    }
  }
  const std::uint64_t step = opt ? opt->step_count() : 0;
  recs.push_back(checkpoint_detail::record("__meta.step", false, Tensor<std::uint64_t>(Shape{1}, step)));
  recs.push_back(checkpoint_detail::record("__meta.config_hash", false, Tensor<std::uint64_t>(Shape{1}, config_hash)));
  return recs;
}

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ParameterSet<T>& params, const AdamW<T>* opt,
                                            std::uint64_t config_hash) {
  return encode_records(state_records(params, opt, config_hash));
}

template <class T>
void save_checkpoint(const std::string& path, const ParameterSet<T>& params, const AdamW<T>* opt,
                     std::uint64_t config_hash) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write '" + path + "'");
  binary::write_all(out, encode_checkpoint(params, opt, config_hash));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  return binary::read_all(in);
}

template <class T>
TrainingState<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  TrainingState<T> st;
  bool have_step = false, have_hash = false;
  for (const auto& r : decode_records(bytes)) {
    if (r.name == "__meta.step") {
      st.step = checkpoint_detail::decode<std::uint64_t>(r)[0];
      have_step = true;
    } else if (r.name == "__meta.config_hash") {
      st.config_hash = checkpoint_detail::decode<std::uint64_t>(r)[0];
      have_hash = true;
    } else if (r.name.rfind("__optim.m/", 0) == 0) {
      st.moments[r.name.substr(10)].m = checkpoint_detail::decode<T>(r);
    } else if (r.name.rfind("__optim.v/", 0) == 0) {
      st.moments[r.name.substr(10)].v = checkpoint_detail::decode<T>(r);
    } else {
      st.params.add(r.name, checkpoint_detail::decode<T>(r), r.trainable);
    }
  }
  if (!have_step || !have_hash) throw CheckpointError("checkpoint: missing metadata");
  return st;
}

template <class T>
TrainingState<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

// Restores parameters and optimizer state into a live model. The config
// hash must match the one the checkpoint was written with.
template <class T>
void restore_checkpoint(const TrainingState<T>& st, std::uint64_t expected_hash, ParameterSet<T>& params,
                        AdamW<T>* opt) {
  if (st.config_hash != expected_hash) {
    throw CheckpointError("checkpoint: config hash mismatch (checkpoint " + std::to_string(st.config_hash) +
                          ", config " + std::to_string(expected_hash) + ")");
  }
  for (auto& p : params) {
    if (!st.params.contains(p.name)) throw CheckpointError("checkpoint: missing tensor '" + p.name + "'");
    const auto& src = st.params.at(p.name);
    if (src.value.shape() != p.value.shape()) {
      throw CheckpointError("checkpoint: shape mismatch for '" + p.name + "'");
    }
    p.value = src.value;
  }
  if (opt) {
    opt->moments() = st.moments;
    opt->set_step_count(st.step);
  }
}

}  // namespace vidprompt
