#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/rng.hpp"

namespace mmae {

// T x H x W x C video volume, values in [0, 1], stored frame-major then row-major.
class Clip {
 public:
  Clip() = default;
  Clip(std::size_t t, std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
      : t_(t), h_(h), w_(w), c_(c), data_(t * h * w * c, fill) {
    if (t == 0 || h == 0 || w == 0 || c == 0) throw ConfigError("clip dimensions must be positive");
  }

  std::size_t frames() const noexcept { return t_; }
  std::size_t height() const noexcept { return h_; }
  std::size_t width() const noexcept { return w_; }
  std::size_t channels() const noexcept { return c_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t frame_size() const noexcept { return h_ * w_ * c_; }

  std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const noexcept {
    return ((t * h_ + y) * w_ + x) * c_ + c;
  }
  float& at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) { return data_[index(t, y, x, c)]; }
  float at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const { return data_[index(t, y, x, c)]; }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  friend bool operator==(const Clip&, const Clip&) = default;

 private:
  std::size_t t_ = 0, h_ = 0, w_ = 0, c_ = 0;
  std::vector<float> data_;
};

enum class Direction : int { right = 0, left = 1, up = 2, down = 3 };

inline std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::right: return "right";
    case Direction::left: return "left";
    case Direction::up: return "up";
    case Direction::down: return "down";
  }
  return "?";
}

inline Direction parse_direction(std::string_view s) {
  if (s == "right") return Direction::right;
  if (s == "left") return Direction::left;
  if (s == "up") return Direction::up;
  if (s == "down") return Direction::down;
  throw ConfigError("unknown direction label '" + std::string(s) + "'");
}

// One moving square on a constant background. Image rows grow downwards, so
// "up" means dy < 0.
struct SyntheticSpec {
  std::size_t object_size = 4;
  int dx = 1;
  int dy = 0;
  float background_level = 0.2f;
  float object_level = 0.8f;
  Direction label = Direction::right;
};

inline void validate(const SyntheticSpec& s) {
  if (s.object_size == 0) throw ConfigError("synthetic: object_size must be positive");
  if (s.object_level == s.background_level) throw ConfigError("synthetic: object and background levels coincide");
  for (float v : {s.background_level, s.object_level})
    if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("synthetic: levels must lie in [0, 1]");
  bool ok = s.dx == 0 && s.dy == 0;  // a static square carries no direction
  switch (s.label) {
    case Direction::right: ok = ok || (s.dx > 0 && s.dy == 0); break;
    case Direction::left: ok = ok || (s.dx < 0 && s.dy == 0); break;
    case Direction::up: ok = ok || (s.dy < 0 && s.dx == 0); break;
    case Direction::down: ok = ok || (s.dy > 0 && s.dx == 0); break;
  }
  if (!ok) throw ConfigError("synthetic: label does not match velocity sign");
}

// Frame t holds the square at p0 + t*(dx, dy) with toroidal wrap-around; p0 is drawn from seed.
inline std::pair<Clip, Direction> generate_moving_square(const SyntheticSpec& spec, std::size_t frames,
                                                         std::size_t height, std::size_t width,
                                                         std::uint64_t seed, std::size_t channels = 1) {
  validate(spec);
  if (spec.object_size > height || spec.object_size > width)
    throw ConfigError("synthetic: object larger than frame");
  Rng rng(seed);
  const auto h = static_cast<std::int64_t>(height);
  const auto w = static_cast<std::int64_t>(width);
  const std::int64_t y0 = uniform_int(rng, 0, h - 1);
  const std::int64_t x0 = uniform_int(rng, 0, w - 1);
  const auto size = static_cast<std::int64_t>(spec.object_size);

  Clip clip(frames, height, width, channels, spec.background_level);
  for (std::size_t t = 0; t < frames; ++t) {
    const std::int64_t py = y0 + static_cast<std::int64_t>(t) * spec.dy;
    const std::int64_t px = x0 + static_cast<std::int64_t>(t) * spec.dx;
    for (std::int64_t y = 0; y < h; ++y) {
      if ((((y - py) % h) + h) % h >= size) continue;
      for (std::int64_t x = 0; x < w; ++x) {
        if ((((x - px) % w) + w) % w >= size) continue;
        for (std::size_t c = 0; c < channels; ++c)
          clip.at(t, static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) = spec.object_level;
      }
    }
  }
  return {std::move(clip), spec.label};
}

// Ranges for drawing random synthetic specs (the motion-direction task).
struct SyntheticRanges {
  std::size_t min_object = 3;
  std::size_t max_object = 6;
  int min_speed = 1;
  int max_speed = 2;
  float min_contrast = 0.3f;
};

inline SyntheticSpec random_synthetic_spec(Rng& rng, const SyntheticRanges& r) {
  SyntheticSpec s;
  s.object_size = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(r.min_object),
                                                       static_cast<std::int64_t>(r.max_object)));
  const int speed = static_cast<int>(uniform_int(rng, r.min_speed, r.max_speed));
  s.label = static_cast<Direction>(uniform_int(rng, 0, 3));
  s.dx = s.label == Direction::right ? speed : (s.label == Direction::left ? -speed : 0);
  s.dy = s.label == Direction::down ? speed : (s.label == Direction::up ? -speed : 0);
  do {
    s.background_level = static_cast<float>(uniform01(rng));
    s.object_level = static_cast<float>(uniform01(rng));
  } while (std::abs(s.object_level - s.background_level) < r.min_contrast);
  return s;
}

// Frames start, start+stride, ..., start+(frames-1)*stride of a longer video.
inline Clip sample_clip(const Clip& video, std::size_t frames, std::size_t stride, std::size_t start) {
  if (frames == 0 || stride == 0) throw ConfigError("sample_clip: frames and stride must be positive");
  if (start + (frames - 1) * stride >= video.frames())
    throw ConfigError("sample_clip: requested frames exceed video length " + std::to_string(video.frames()));
  Clip out(frames, video.height(), video.width(), video.channels());
  const std::size_t fs = video.frame_size();
  for (std::size_t t = 0; t < frames; ++t) {
    const auto src = video.data().begin() + static_cast<std::ptrdiff_t>((start + t * stride) * fs);
    std::copy(src, src + static_cast<std::ptrdiff_t>(fs), out.data().begin() + static_cast<std::ptrdiff_t>(t * fs));
  }
  return out;
}

struct CropWindow {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

// Draws a crop whose area fraction lies in [scale_lo, scale_hi] and whose aspect
// ratio is log-uniform in [3/4, 4/3]; falls back to a frame-shaped crop.
inline CropWindow sample_crop_window(std::size_t height, std::size_t width, double scale_lo, double scale_hi,
                                     std::uint64_t seed) {
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0))
    throw ConfigError("random_resized_crop: scale range must satisfy 0 < lo <= hi <= 1");
  Rng rng(seed);
  const double area = static_cast<double>(height * width);
  auto in_range = [&](std::size_t h, std::size_t w) {
    const double frac = static_cast<double>(h * w) / area;
    return h >= 1 && w >= 1 && h <= height && w <= width && frac >= scale_lo && frac <= scale_hi;
  };
  auto place = [&](std::size_t h, std::size_t w) {
    CropWindow c{0, 0, h, w};
    c.top = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(height - h)));
    c.left = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(width - w)));
    return c;
  };
  const double log_lo = std::log(3.0 / 4.0), log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = uniform(rng, scale_lo, scale_hi) * area;
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (in_range(h, w)) return place(h, w);
  }
  // Frame-shaped fallback: scan heights downward for a width that fits the range.
  for (std::size_t h = height; h >= 1; --h) {
    const auto w_min = static_cast<std::size_t>(std::ceil(scale_lo * area / static_cast<double>(h)));
    if (w_min <= width && in_range(h, w_min)) return place(h, w_min);
  }
  throw ConfigError("random_resized_crop: no crop window satisfies the scale range");
}

// Bilinear resize of every frame (half-pixel centers, edge clamped).
inline Clip resize_bilinear(const Clip& clip, std::size_t out_h, std::size_t out_w) {
  Clip out(clip.frames(), out_h, out_w, clip.channels());
  const double sy = static_cast<double>(clip.height()) / static_cast<double>(out_h);
  const double sx = static_cast<double>(clip.width()) / static_cast<double>(out_w);
  auto coord = [](std::size_t dst, double s, std::size_t limit, std::size_t& i0, std::size_t& i1, double& f) {
    double src = (static_cast<double>(dst) + 0.5) * s - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(limit - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, limit - 1);
    f = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, sy, clip.height(), y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, sx, clip.width(), x0, x1, fx);
      for (std::size_t t = 0; t < clip.frames(); ++t)
        for (std::size_t c = 0; c < clip.channels(); ++c) {
          const double top = clip.at(t, y0, x0, c) * (1.0 - fx) + clip.at(t, y0, x1, c) * fx;
          const double bot = clip.at(t, y1, x0, c) * (1.0 - fx) + clip.at(t, y1, x1, c) * fx;
          out.at(t, y, x, c) = static_cast<float>(top * (1.0 - fy) + bot * fy);
        }
    }
  }
  return out;
}

inline Clip crop(const Clip& clip, const CropWindow& win) {
  if (win.top + win.height > clip.height() || win.left + win.width > clip.width() || win.height == 0 ||
      win.width == 0)
    throw ConfigError("crop window outside the frame");
  Clip out(clip.frames(), win.height, win.width, clip.channels());
  for (std::size_t t = 0; t < clip.frames(); ++t)
    for (std::size_t y = 0; y < win.height; ++y)
      for (std::size_t x = 0; x < win.width; ++x)
        for (std::size_t c = 0; c < clip.channels(); ++c)
          out.at(t, y, x, c) = clip.at(t, win.top + y, win.left + x, c);
  return out;
}

// One crop window shared by all frames, resized to (out_h, out_w).
inline Clip random_resized_crop(const Clip& clip, double scale_lo, double scale_hi, std::size_t out_h,
                                std::size_t out_w, std::uint64_t seed) {
  if (out_h == 0 || out_w == 0 || out_h > clip.height() || out_w > clip.width())
    throw ConfigError("random_resized_crop: output dimensions exceed the source frame");
  const CropWindow win = sample_crop_window(clip.height(), clip.width(), scale_lo, scale_hi, seed);
  Clip cropped = crop(clip, win);
  if (win.height == out_h && win.width == out_w) return cropped;
  return resize_bilinear(cropped, out_h, out_w);
}

inline Clip hflip(const Clip& clip) {
  Clip out(clip.frames(), clip.height(), clip.width(), clip.channels());
  const std::size_t w = clip.width();
  for (std::size_t t = 0; t < clip.frames(); ++t)
    for (std::size_t y = 0; y < clip.height(); ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t c = 0; c < clip.channels(); ++c) out.at(t, y, w - 1 - x, c) = clip.at(t, y, x, c);
  return out;
}

// ---- raw clip files -------------------------------------------------------

inline constexpr std::array<char, 4> kClipMagic{'M', 'M', 'A', 'E'};
inline constexpr std::uint8_t kClipVersion = 1;

namespace le {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

// Bounds-checked little-endian reader over a byte buffer.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

  std::string_view take(std::size_t n, const char* what) {
    if (remaining() < n) throw TruncatedError(std::string("truncated file while reading ") + what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(take(1, what)[0]); }
  std::uint16_t u16(const char* what) {
    auto s = take(2, what);
    return static_cast<std::uint16_t>(static_cast<std::uint8_t>(s[0]) | (static_cast<std::uint8_t>(s[1]) << 8));
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  std::uint64_t u64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(s[static_cast<std::size_t>(i)]);
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace le

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string encode_raw_clip(const Clip& clip) {
  std::string out(kClipMagic.begin(), kClipMagic.end());
  out.push_back(static_cast<char>(kClipVersion));
  for (std::size_t d : {clip.frames(), clip.height(), clip.width(), clip.channels()})
    le::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * clip.size());
  for (float v : clip.data()) le::put_f32(out, v);
  return out;
}

inline Clip decode_raw_clip(std::string_view bytes) {
  le::Reader r(bytes);
  if (r.take(4, "magic") != std::string_view(kClipMagic.data(), kClipMagic.size()))
    throw BadMagicError("not a raw clip file (bad magic)");
  const std::uint8_t version = r.u8("version");
  if (version != kClipVersion) throw VersionError("unsupported raw clip version " + std::to_string(version));
  std::array<std::uint32_t, 4> dims{};
  for (auto& d : dims) d = r.u32("dimensions");
  for (auto d : dims)
    if (d == 0) throw FormatError("raw clip has a zero dimension");
  const std::uint64_t count = std::uint64_t{dims[0]} * dims[1] * dims[2] * dims[3];
  if (r.remaining() < 4 * count) throw TruncatedError("truncated raw clip payload");
  if (r.remaining() > 4 * count) throw FormatError("trailing bytes after raw clip payload");
  Clip clip(dims[0], dims[1], dims[2], dims[3]);
  for (float& v : clip.data()) v = r.f32("payload");
  return clip;
}

inline void save_raw_clip(const Clip& clip, const std::filesystem::path& path) {
  write_file_bytes(path, encode_raw_clip(clip));
}

inline Clip load_raw_clip(const std::filesystem::path& path) { return decode_raw_clip(read_file_bytes(path)); }

// ---- dataset directories --------------------------------------------------

struct LabeledClip {
  std::string id;
  Clip clip;
  std::string label;
};

// Moving-square videos with uniformly drawn directions; sample i depends only on (seed, i).
inline std::vector<LabeledClip> synthesize_dataset(std::size_t count, std::size_t frames, std::size_t height,
                                                   std::size_t width, std::size_t channels,
                                                   const SyntheticRanges& ranges, std::uint64_t seed) {
  std::vector<LabeledClip> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {i}));
    const SyntheticSpec spec = random_synthetic_spec(rng, ranges);
    auto [clip, label] = generate_moving_square(spec, frames, height, width, rng(), channels);
    char id[32];
    std::snprintf(id, sizeof id, "clip_%06zu", i);
    out.push_back({id, std::move(clip), std::string(direction_name(label))});
  }
  return out;
}

// Writes clips/<id>.mmae and labels.tsv ("<id>\t<label>" per line).
inline void write_dataset(const std::filesystem::path& dir, const std::vector<LabeledClip>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "clips", ec);
  if (ec) throw IoError("cannot create dataset directory '" + dir.string() + "': " + ec.message());
  std::string labels;
  for (const auto& s : samples) {
    save_raw_clip(s.clip, dir / "clips" / (s.id + ".mmae"));
    labels += s.id + "\t" + s.label + "\n";
  }
  write_file_bytes(dir / "labels.tsv", labels);
}

inline std::vector<LabeledClip> read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
  std::istringstream in(read_file_bytes(dir / "labels.tsv"));
  std::vector<LabeledClip> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError("labels.tsv: missing tab in line '" + line + "'");
    LabeledClip s;
    s.id = line.substr(0, tab);
    s.label = line.substr(tab + 1);
    s.clip = load_raw_clip(dir / "clips" / (s.id + ".mmae"));
    out.push_back(std::move(s));
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers with a static
// contiguous partition; results must be written by index.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * chunk; i < std::min(n, (w + 1) * chunk); ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace mmae
