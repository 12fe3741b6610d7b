#pragma once

// Checkpoint container. All integers little-endian:
//
//   magic        4 bytes  "P4CK"
//   version      u32      1
//   scalar_bytes u32      4 (float32 values) or 8 (float64 values)
//   digest       u64      FNV-1a 64 of the config text below
//   config_len   u32      followed by config_len bytes of UTF-8 JSON
//   count        u32      number of parameter records
//   count x record:
//     name_len u32, name bytes, rank u32, rank x u32 dims,
//     prod(dims) IEEE-754 values of scalar_bytes each
//
// Values are stored at the precision of the model that wrote them, so a
// save/load round trip is bit-exact for both float and double models.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pix4cap/core/errors.hpp"
#include "pix4cap/core/rng.hpp"
#include "pix4cap/nn/layers.hpp"

namespace pix4cap::nn {

inline constexpr char kCheckpointMagic[4] = {'P', '4', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened; exact for both storage precisions
};

struct CheckpointData {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t scalar_bytes = 4;
  std::uint64_t digest = 0;
  std::string config;
  std::vector<TensorRecord> records;
};

inline std::uint64_t config_digest(const std::string& config_text) { return fnv1a64(config_text); }

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}
  std::uint64_t read_le(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(read_le(4)); }
  std::uint64_t u64() { return read_le(8); }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint " + source_ + " is truncated");
  }
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::string encode_checkpoint(const ParameterStore<T>& store, const std::string& config_text) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, sizeof(T));
  detail::put_u64(out, config_digest(config_text));
  detail::put_u32(out, static_cast<std::uint32_t>(config_text.size()));
  out += config_text;
  detail::put_u32(out, static_cast<std::uint32_t>(store.count()));
  for (const auto& p : store.all()) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.tensor.shape().size()));
    for (int d : p.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : p.tensor.values()) {
      if constexpr (sizeof(T) == 4) {
        detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
      } else {
        detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

inline CheckpointData decode_checkpoint(const std::string& bytes, const std::string& source = "<memory>") {
  detail::ByteReader in(bytes, source);
  if (in.text(4) != std::string(kCheckpointMagic, 4)) throw DataError(source + " is not a checkpoint");
  CheckpointData data;
  data.version = in.u32();
  if (data.version != kCheckpointVersion)
    throw DataError(source + ": unsupported checkpoint version " + std::to_string(data.version));
  data.scalar_bytes = in.u32();
  if (data.scalar_bytes != 4 && data.scalar_bytes != 8)
    throw DataError(source + ": bad scalar width " + std::to_string(data.scalar_bytes));
  data.digest = in.u64();
  data.config = in.text(in.u32());
  if (config_digest(data.config) != data.digest)
    throw DataError(source + ": config digest mismatch (header does not match embedded config)");
  const std::uint32_t count = in.u32();
  for (std::uint32_t r = 0; r < count; ++r) {
    TensorRecord rec;
    rec.name = in.text(in.u32());
    const std::uint32_t rank = in.u32();
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(static_cast<int>(in.u32()));
    rec.values.resize(numel(rec.shape));
    for (auto& v : rec.values) {
      v = data.scalar_bytes == 4 ? static_cast<double>(std::bit_cast<float>(in.u32()))
                                 : std::bit_cast<double>(in.u64());
    }
    data.records.push_back(std::move(rec));
  }
  if (!in.done()) throw DataError(source + ": trailing bytes after last record");
  return data;
}

template <class T>
void save_checkpoint(const std::string& path, const ParameterStore<T>& store, const std::string& config_text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  const auto bytes = encode_checkpoint(store, config_text);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

// Copies record values into the matching parameters. Every parameter must be
// present with an identical shape.
template <class T>
void load_parameters(const CheckpointData& data, ParameterStore<T>& store) {
  if (data.records.size() != store.count()) {
    throw DataError("checkpoint has " + std::to_string(data.records.size()) + " parameters, model expects " +
                    std::to_string(store.count()));
  }
  for (const auto& rec : data.records) {
    const auto* param = store.find(rec.name);
    if (!param) throw DataError("checkpoint parameter '" + rec.name + "' is not part of the model");
    if (param->tensor.shape() != rec.shape) {
      throw DataError("checkpoint parameter '" + rec.name + "' has shape " + to_string(rec.shape) +
                      ", model expects " + to_string(param->tensor.shape()));
    }
    Tensor<T> t = param->tensor;
    auto dst = t.mutable_values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
  }
}

}  // namespace pix4cap::nn
