#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "motionmae/autodiff.hpp"
#include "motionmae/error.hpp"
#include "motionmae/model.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/video.hpp"

namespace mmae {

// 8-bit RGB raster.
struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  std::uint8_t* at(std::size_t y, std::size_t x) { return pixels.data() + 3 * (y * width + x); }
  const std::uint8_t* at(std::size_t y, std::size_t x) const { return pixels.data() + 3 * (y * width + x); }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::string encode_ppm(const RgbImage& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

inline RgbImage decode_ppm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw TruncatedError("ppm: truncated header");
    return std::string(bytes.substr(start, pos - start));
  };
  if (token() != "P6") throw BadMagicError("ppm: expected P6 magic");
  RgbImage img;
  img.width = std::stoul(token());
  img.height = std::stoul(token());
  if (token() != "255") throw FormatError("ppm: only maxval 255 is supported");
  ++pos;  // single whitespace byte after maxval
  const std::size_t n = 3 * img.width * img.height;
  if (bytes.size() < pos + n) throw TruncatedError("ppm: truncated pixel data");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline void write_ppm(const RgbImage& img, const std::filesystem::path& path) { write_file_bytes(path, encode_ppm(img)); }
inline RgbImage read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file_bytes(path)); }

// Scale applied to temporal-difference magnitudes before display.
inline constexpr double kMotionDisplayGain = 3.0;
inline constexpr float kMaskedGray = 0.5f;

// Four stacked rows (original, masked, reconstructed frames, reconstructed
// motion), one column per frame.
struct ReconGrid {
  Clip original;
  Clip masked;
  Clip frames;
  Clip motion;  // single channel, display-scaled
};

namespace detail {

// De-standardizes predicted patches with the original patch statistics.
inline void unnormalize_rows(Tensor& pred, const Tensor& tokens, const std::vector<std::size_t>& rows) {
  const std::size_t d = tokens.cols();
  for (std::size_t i : rows) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += tokens(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (tokens(i, j) - mean) * (tokens(i, j) - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(d)), 1e-6);
    for (std::size_t j = 0; j < d; ++j) pred(i, j) = pred(i, j) * sd + mean;
  }
}

}  // namespace detail

inline ReconGrid build_recon_grid(const Clip& clip, const Mask& mask, const std::optional<Tensor>& pred_space,
                                  const std::optional<Tensor>& pred_time, const TokenGrid& grid,
                                  bool space_normalized = false, std::size_t gap = 1) {
  const auto [tokens, g] = patchify(clip, grid.cube);
  if (mask.size() != g.count()) throw ConfigError("render: mask does not match the token grid");
  const auto [vis, msk] = mask_partition(mask);
  ReconGrid out;
  out.original = clip;

  Tensor masked_tokens = tokens;
  for (std::size_t i : msk)
    for (std::size_t j = 0; j < g.token_dim(); ++j) masked_tokens(i, j) = kMaskedGray;
  out.masked = unpatchify(masked_tokens, g);

  Tensor recon = tokens;
  if (pred_space) {
    if (pred_space->rows() != g.count() || pred_space->cols() != g.token_dim())
      throw ConfigError("render: space predictions do not match the token grid");
    Tensor pred = *pred_space;
    if (space_normalized) detail::unnormalize_rows(pred, tokens, msk);
    for (std::size_t i : msk)
      for (std::size_t j = 0; j < g.token_dim(); ++j) recon(i, j) = std::clamp(pred(i, j), 0.0, 1.0);
  } else {
    recon = masked_tokens;
  }
  out.frames = unpatchify(recon, g);

  // Motion row: prediction on masked tokens, true difference on visible ones.
  out.motion = Clip(clip.frames(), clip.height(), clip.width(), 1);
  const std::size_t p = g.cube.p, c = g.channels;
  std::optional<Tensor> truth;
  if (!vis.empty() && gap < clip.frames()) {
    Mask inverse = mask;
    inverse.bits.flip();
    truth = make_motion_target(clip, inverse, g, gap);
  }
  if (pred_time && (pred_time->rows() != g.count() || pred_time->cols() != g.motion_dim()))
    throw ConfigError("render: time predictions do not match the token grid");
  std::size_t vis_row = 0;
  for (std::size_t n = 0; n < g.count(); ++n) {
    const double* src = nullptr;
    if (!mask.bits[n]) {
      if (truth) src = truth->data().data() + (vis_row++) * g.motion_dim();
    } else if (pred_time) {
      src = pred_time->data().data() + n * g.motion_dim();
    }
    const std::size_t ti = n / g.spatial_cells(), hi = (n / g.w) % g.h, wi = n % g.w;
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx) {
        double v = 0.0;
        if (src) {
          for (std::size_t ch = 0; ch < c; ++ch) v += std::abs(src[(dy * p + dx) * c + ch]);
          v = std::clamp(kMotionDisplayGain * v / static_cast<double>(c), 0.0, 1.0);
        }
        for (std::size_t dt = 0; dt < g.cube.t; ++dt)
          out.motion.at(ti * g.cube.t + dt, hi * p + dy, wi * p + dx, 0) = static_cast<float>(v);
      }
  }
  return out;
}

// Rows stacked vertically, frames laid out left to right; grayscale is replicated to RGB.
inline RgbImage rasterize(const ReconGrid& rg) {
  const Clip* rows[4] = {&rg.original, &rg.masked, &rg.frames, &rg.motion};
  const std::size_t h = rg.original.height(), w = rg.original.width(), t = rg.original.frames();
  RgbImage img;
  img.height = 4 * h;
  img.width = t * w;
  img.pixels.assign(3 * img.height * img.width, 0);
  for (std::size_t r = 0; r < 4; ++r) {
    const Clip& clip = *rows[r];
    for (std::size_t f = 0; f < t; ++f)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          std::uint8_t* px = img.at(r * h + y, f * w + x);
          for (std::size_t k = 0; k < 3; ++k) px[k] = quantize(clip.at(f, y, x, clip.channels() == 3 ? k : 0));
        }
  }
  return img;
}

inline RgbImage render_reconstruction(const Clip& clip, const Mask& mask, const std::optional<Tensor>& pred_space,
                                      const std::optional<Tensor>& pred_time, const TokenGrid& grid,
                                      const std::filesystem::path& path, bool space_normalized = false,
                                      std::size_t gap = 1) {
  RgbImage img = rasterize(build_recon_grid(clip, mask, pred_space, pred_time, grid, space_normalized, gap));
  write_ppm(img, path);
  return img;
}

// ---- classification metrics ----------------------------------------------

// Fraction of samples whose label ranks among the k largest logits; ties go to the lower class index.
inline double topk_accuracy(const std::vector<std::vector<double>>& logits, const std::vector<std::size_t>& labels,
                            std::size_t k) {
  if (logits.size() != labels.size()) throw ConfigError("topk_accuracy: logits/labels length mismatch");
  if (logits.empty()) throw ConfigError("topk_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    const auto& l = logits[s];
    if (k == 0 || k > l.size()) throw ConfigError("topk_accuracy: k must lie in [1, num_classes]");
    const std::size_t y = labels[s];
    if (y >= l.size()) throw ConfigError("topk_accuracy: label out of range");
    std::size_t rank = 0;
    for (std::size_t j = 0; j < l.size(); ++j)
      if (l[j] > l[y] || (l[j] == l[y] && j < y)) ++rank;
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

struct AccuracyReport {
  double top1 = 0.0;
  double top5 = 0.0;
  std::size_t n = 0;
};

// top5 uses k = min(5, num_classes).
inline AccuracyReport accuracy_report(const std::vector<std::vector<double>>& logits,
                                      const std::vector<std::size_t>& labels) {
  AccuracyReport r;
  r.n = logits.size();
  r.top1 = topk_accuracy(logits, labels, 1);
  r.top5 = topk_accuracy(logits, labels, std::min<std::size_t>(5, logits.front().size()));
  return r;
}

inline nlohmann::json to_json(const AccuracyReport& r) { return {{"top1", r.top1}, {"top5", r.top5}, {"n", r.n}}; }

// ---- multi-view inference -------------------------------------------------

inline std::vector<double> classify_logits(const Model& model, const ModelState& state, const Clip& clip,
                                           CubeSize cube) {
  Tape tape(false);
  const auto p = model.bind(tape, state, false);
  const Tensor& l = tape.value(model.classify(tape, p, clip, cube));
  return {l.data().begin(), l.data().end()};
}

struct ViewSpec {
  std::size_t start = 0;  // first frame
  CropWindow window;
};

struct MultiviewConfig {
  std::size_t clips = 1;  // K temporal clips
  std::size_t crops = 3;  // spatial views per clip
  std::size_t frames = 16;
  std::size_t stride = 1;
  std::size_t out_h = 0, out_w = 0;  // model input size
};

// K evenly spaced temporal starts x `crops` square windows tiling the longer axis.
inline std::vector<ViewSpec> multiview_plan(const Clip& video, const MultiviewConfig& cfg) {
  if (cfg.clips == 0 || cfg.crops == 0 || cfg.frames == 0 || cfg.stride == 0)
    throw ConfigError("multiview: clip, crop, frame and stride counts must be positive");
  const std::size_t span = (cfg.frames - 1) * cfg.stride + 1;
  if (video.frames() < span || video.frames() - span + 1 < cfg.clips)
    throw ConfigError("multiview: video of " + std::to_string(video.frames()) + " frames is too short for " +
                      std::to_string(cfg.clips) + " clips spanning " + std::to_string(span) + " frames");
  const std::size_t slack = video.frames() - span;
  const std::size_t side = std::min(video.height(), video.width());
  const bool wide = video.width() >= video.height();
  const std::size_t extra = (wide ? video.width() : video.height()) - side;
  std::vector<ViewSpec> plan;
  for (std::size_t k = 0; k < cfg.clips; ++k) {
    const std::size_t start = cfg.clips == 1 ? slack / 2 : k * slack / (cfg.clips - 1);
    for (std::size_t v = 0; v < cfg.crops; ++v) {
      const std::size_t off = cfg.crops == 1 ? extra / 2 : v * extra / (cfg.crops - 1);
      ViewSpec s;
      s.start = start;
      s.window = wide ? CropWindow{0, off, side, side} : CropWindow{off, 0, side, side};
      plan.push_back(s);
    }
  }
  return plan;
}

inline Clip extract_view(const Clip& video, const ViewSpec& view, const MultiviewConfig& cfg) {
  Clip c = crop(sample_clip(video, cfg.frames, cfg.stride, view.start), view.window);
  const std::size_t oh = cfg.out_h ? cfg.out_h : c.height();
  const std::size_t ow = cfg.out_w ? cfg.out_w : c.width();
  if (oh != c.height() || ow != c.width()) c = resize_bilinear(c, oh, ow);
  return c;
}

// Running mean of the per-view logits. Identical views reuse one forward pass,
// and a running mean over identical values reproduces them exactly.
inline std::vector<double> multiview_logits(const Model& model, const ModelState& state, const Clip& video,
                                            const MultiviewConfig& cfg, CubeSize cube) {
  const auto plan = multiview_plan(video, cfg);
  std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>, std::vector<double>> cache;
  std::vector<double> mean;
  std::size_t count = 0;
  for (const auto& view : plan) {
    const auto key = std::make_tuple(view.start, view.window.top, view.window.left, view.window.height, view.window.width);
    auto it = cache.find(key);
    if (it == cache.end()) it = cache.emplace(key, classify_logits(model, state, extract_view(video, view, cfg), cube)).first;
    const auto& l = it->second;
    ++count;
    if (mean.empty()) {
      mean = l;
      continue;
    }
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += (l[j] - mean[j]) / static_cast<double>(count);
  }
  return mean;
}

}  // namespace mmae
