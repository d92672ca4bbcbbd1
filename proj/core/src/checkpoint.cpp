// SPDX-License-Identifier: Apache-2.0

#include "evla/checkpoint.hpp"

#include <map>

#include "evla/binary_io.hpp"
#include "evla/error.hpp"
#include "evla/seed.hpp"

namespace evla {
namespace {

constexpr std::string_view kMagic = "EVLACKPT";
constexpr std::uint8_t kDtypeF64 = 1;
constexpr const char* kCodecBlob = "codec.edges";

void write_blob(ByteWriter& w, const std::string& name, const Shape& shape,
                std::span<const double> data) {
  w.str(name);
  w.u8(kDtypeF64);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) w.u64(d);
  for (double v : data) w.f64(v);
}

struct Blob {
  Shape shape;
  std::vector<double> data;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.codec.fitted()) fail(ErrorKind::kState, "checkpoint: codec is not fitted");
  ByteWriter blobs;
  const auto named = ckpt.params.named();
  blobs.u32(static_cast<std::uint32_t>(named.size() + 1));
  for (const auto& [name, t] : named) write_blob(blobs, name, t->shape(), t->values());

  const std::size_t dims = ckpt.codec.dims();
  const std::size_t n_edges = ckpt.codec.bins() + 1;
  std::vector<double> edges;
  edges.reserve(dims * n_edges);
  for (std::size_t d = 0; d < dims; ++d) {
    const auto& e = ckpt.codec.edges(d);
    edges.insert(edges.end(), e.begin(), e.end());
  }
  write_blob(blobs, kCodecBlob, {dims, n_edges}, edges);

  ByteWriter out;
  out.raw(kMagic);
  out.u32(kCheckpointVersion);
  KeyValues config = ckpt.config;
  config.merge(ckpt.policy.to_kv());
  out.str(config.format());
  out.raw(blobs.bytes());
  out.u64(fnv1a64(blobs.bytes()));
  return out.take();
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  ByteReader in(bytes, origin);
  if (in.raw(kMagic.size()) != kMagic) {
    fail(ErrorKind::kFile, origin + ": not a checkpoint (bad magic)");
  }
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorKind::kFile, origin + ": unsupported checkpoint version " +
                               std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.config = KeyValues::parse(in.str(), origin + " config");
  ckpt.policy = PolicyConfig::from_kv(ckpt.config);
  ckpt.policy.validate();

  const std::size_t blob_begin = in.offset();
  std::map<std::string, Blob> blobs;
  const std::uint32_t count = in.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.str();
    if (in.u8() != kDtypeF64) fail(ErrorKind::kFile, origin + ": blob '" + name + "' has unknown dtype");
    Blob b;
    b.shape.resize(in.u32());
    std::size_t n = 1;
    for (auto& d : b.shape) {
      d = in.u64();
      n *= d;
    }
    if (n * 8 > in.remaining()) fail(ErrorKind::kFile, origin + ": blob '" + name + "' truncated");
    b.data.resize(n);
    for (double& v : b.data) v = in.f64();
    blobs.emplace(std::move(name), std::move(b));
  }
  const std::size_t blob_end = in.offset();
  const std::uint64_t stored = in.u64();
  if (!in.done()) fail(ErrorKind::kFile, origin + ": trailing bytes after checksum");
  const std::uint64_t actual =
      fnv1a64(std::string_view(bytes).substr(blob_begin, blob_end - blob_begin));
  if (stored != actual) fail(ErrorKind::kFile, origin + ": checksum mismatch");

  ckpt.params = init_params(ckpt.policy);
  for (auto& [name, t] : ckpt.params.named()) {
    const auto it = blobs.find(name);
    if (it == blobs.end()) fail(ErrorKind::kState, origin + ": missing parameter '" + name + "'");
    if (it->second.shape != t->shape()) {
      fail(ErrorKind::kState, origin + ": parameter '" + name + "' has shape " +
                                  shape_string(it->second.shape) + ", config expects " +
                                  shape_string(t->shape()));
    }
    std::copy(it->second.data.begin(), it->second.data.end(), t->data());
  }
  const auto codec_it = blobs.find(kCodecBlob);
  if (codec_it == blobs.end()) fail(ErrorKind::kState, origin + ": missing codec blob");
  const Blob& cb = codec_it->second;
  if (cb.shape.size() != 2 || cb.shape[0] != ckpt.policy.action_dims ||
      cb.shape[1] != ckpt.policy.action_bins + 1) {
    fail(ErrorKind::kState, origin + ": codec blob shape " + shape_string(cb.shape) +
                                " does not match the model config");
  }
  std::vector<std::vector<double>> edges(cb.shape[0]);
  for (std::size_t d = 0; d < cb.shape[0]; ++d) {
    edges[d].assign(cb.data.begin() + d * cb.shape[1], cb.data.begin() + (d + 1) * cb.shape[1]);
  }
  ckpt.codec = ActionCodec::from_edges(std::move(edges), ckpt.policy.text_vocab_size);
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path), path);
}

}  // namespace evla
