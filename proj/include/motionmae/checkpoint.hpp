#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/model.hpp"
#include "motionmae/optim.hpp"
#include "motionmae/video.hpp"

namespace mmae {

// Binary layout (little-endian):
//   "MMCK" | version u8 | config digest u64 | step u64 | record count u32
//   records: name_len u16 | name | rank u8 | dims u32 x rank | f32 payload
//   FNV-1a 64 checksum of every preceding byte
inline constexpr std::array<char, 4> kCheckpointMagic{'M', 'M', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Digest of everything that fixes the encoder's parameter shapes; a pretrained
// encoder can be loaded into any model with the same digest.
inline std::uint64_t config_digest(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "encoder:depth=" << cfg.encoder.depth << ";dim=" << cfg.encoder.embed_dim << ";heads=" << cfg.encoder.heads
     << ";mlp=" << cfg.encoder.mlp_ratio << ";token_dim=" << cfg.encoder.token_dim;
  return fnv1a64(os.str());
}

struct Checkpoint {
  std::uint64_t digest = 0;
  std::uint64_t step = 0;
  ModelState state;
  std::optional<OptimState> optim;
};

namespace detail {

inline void put_record(std::string& out, const std::string& name, const Tensor& t) {
  if (name.size() > 0xffff) throw ConfigError("checkpoint: tensor name too long");
  if (t.rank() > 0xff) throw ConfigError("checkpoint: tensor rank too large");
  le::put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(t.rank()));
  for (std::size_t d : t.shape()) le::put_u32(out, static_cast<std::uint32_t>(d));
  for (double v : t.data()) le::put_f32(out, static_cast<float>(v));
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  out.push_back(static_cast<char>(kCheckpointVersion));
  le::put_u64(out, ck.digest);
  le::put_u64(out, ck.step);
  const std::size_t n = ck.state.params.size();
  const bool with_optim = ck.optim.has_value();
  if (with_optim && (ck.optim->m.size() != n || ck.optim->v.size() != n))
    throw ConfigError("checkpoint: optimizer state does not match parameters");
  le::put_u32(out, static_cast<std::uint32_t>(with_optim ? 3 * n : n));
  for (std::size_t i = 0; i < n; ++i) detail::put_record(out, "param/" + ck.state.names[i], ck.state.params[i]);
  if (with_optim) {
    for (std::size_t i = 0; i < n; ++i) detail::put_record(out, "adam.m/" + ck.state.names[i], ck.optim->m[i]);
    for (std::size_t i = 0; i < n; ++i) detail::put_record(out, "adam.v/" + ck.state.names[i], ck.optim->v[i]);
  }
  le::put_u64(out, fnv1a64(out));
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kCheckpointMagic.data(), kCheckpointMagic.size()))
    throw BadMagicError("not a checkpoint file (bad magic)");
  const std::uint8_t version = r.u8("version");
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.digest = r.u64("config digest");
  ck.step = r.u64("step");
  const std::uint32_t count = r.u32("record count");

  struct Record {
    std::string name;
    Tensor tensor;
  };
  std::vector<Record> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = std::string(r.take(r.u16("name length"), "name"));
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u32("dims");
      if (d == 0) throw FormatError("checkpoint: zero dimension in '" + rec.name + "'");
      numel *= d;
    }
    if (numel * 4 > r.remaining()) throw TruncatedError("truncated checkpoint payload for '" + rec.name + "'");
    std::vector<double> data(static_cast<std::size_t>(numel));
    for (double& v : data) v = r.f32("payload");
    rec.tensor = Tensor(std::move(shape), std::move(data));
    records.push_back(std::move(rec));
  }
  const std::size_t body_len = r.position();
  const std::uint64_t stored = r.u64("checksum");
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint");
  if (fnv1a64(bytes.substr(0, body_len)) != stored) throw DigestError("checkpoint checksum digest mismatch (corrupted file)");

  OptimState opt;
  for (auto& rec : records) {
    if (rec.name.starts_with("param/")) {
      ck.state.names.push_back(rec.name.substr(6));
      ck.state.params.push_back(std::move(rec.tensor));
    } else if (rec.name.starts_with("adam.m/")) {
      opt.m.push_back(std::move(rec.tensor));
    } else if (rec.name.starts_with("adam.v/")) {
      opt.v.push_back(std::move(rec.tensor));
    } else {
      throw FormatError("checkpoint: unknown record '" + rec.name + "'");
    }
  }
  if (!opt.m.empty() || !opt.v.empty()) {
    if (opt.m.size() != ck.state.params.size() || opt.v.size() != ck.state.params.size())
      throw FormatError("checkpoint: optimizer moments do not match parameters");
    opt.t = ck.step;
    ck.optim = std::move(opt);
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

inline void require_digest(const Checkpoint& ck, const ModelConfig& cfg) {
  const std::uint64_t want = config_digest(cfg);
  if (ck.digest != want) {
    std::ostringstream os;
    os << "checkpoint config digest mismatch: file has " << std::hex << ck.digest << ", model expects " << want;
    throw DigestError(os.str());
  }
}

}  // namespace mmae
