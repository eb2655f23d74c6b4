#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/tensor.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/video.hpp"

namespace mmae {

enum class TargetKind { frame, motion, both };

inline std::string_view target_kind_name(TargetKind k) {
  switch (k) {
    case TargetKind::frame: return "frame";
    case TargetKind::motion: return "motion";
    case TargetKind::both: return "both";
  }
  return "?";
}

inline TargetKind parse_target_kind(std::string_view s) {
  if (s == "frame") return TargetKind::frame;
  if (s == "motion") return TargetKind::motion;
  if (s == "both" || s == "frame+motion") return TargetKind::both;
  throw ConfigError("unknown target kind '" + std::string(s) + "' (expected frame, motion or both)");
}

inline bool wants_space(TargetKind k) { return k != TargetKind::motion; }
inline bool wants_time(TargetKind k) { return k != TargetKind::frame; }

struct TargetConfig {
  TargetKind kind = TargetKind::both;
  std::size_t gap = 1;
  bool normalize = false;     // per-patch standardization of space targets
  bool signed_diff = false;   // ablation only; the default target is |f[t+g] - f[t]|
};

struct PatchStats {
  double mean = 0.0;
  double std = 1.0;
};

struct TargetBundle {
  std::optional<Tensor> space;    // M x D
  std::optional<Tensor> time;     // M x Dm
  std::vector<PatchStats> norm_stats;
  std::size_t gap = 1;
};

namespace detail {

inline void check_mask(const Mask& mask, const TokenGrid& grid, const Clip& clip) {
  if (mask.size() != grid.count()) throw ConfigError("targets: mask size does not match the token grid");
  if (clip.frames() != grid.clip_frames() || clip.height() != grid.clip_height() ||
      clip.width() != grid.clip_width() || clip.channels() != grid.channels)
    throw ConfigError("targets: clip does not match the token grid");
}

inline std::vector<std::size_t> masked_indices(const Mask& mask) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.bits[i]) out.push_back(i);
  if (out.empty()) throw ConfigError("targets: mask hides no tokens, reconstruction target is empty");
  return out;
}

}  // namespace detail

// Rows of patchify(clip) at masked indices, optionally standardized per row.
inline Tensor make_space_target(const Clip& clip, const Mask& mask, const TokenGrid& grid, bool normalize_per_patch,
                                std::vector<PatchStats>* stats = nullptr) {
  detail::check_mask(mask, grid, clip);
  const auto masked = detail::masked_indices(mask);
  const std::size_t d = grid.token_dim();
  const Tensor tokens = patchify(clip, grid.cube).first;
  Tensor out({masked.size(), d});
  if (stats) stats->clear();
  for (std::size_t r = 0; r < masked.size(); ++r) {
    const double* src = tokens.data().data() + masked[r] * d;
    double* dst = out.data().data() + r * d;
    std::copy_n(src, d, dst);
    if (!normalize_per_patch) continue;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += dst[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (dst[j] - mean) * (dst[j] - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(d)), 1e-6);
    for (std::size_t j = 0; j < d; ++j) dst[j] = (dst[j] - mean) / sd;
    if (stats) stats->push_back({mean, sd});
  }
  return out;
}

// Difference map |f[min(t+g, T-1)] - f[t]| sampled at the first frame of each
// masked token's cube; one cp x cp x C patch per token in (row, col, channel) order.
inline Tensor make_motion_target(const Clip& clip, const Mask& mask, const TokenGrid& grid, std::size_t gap,
                                 bool signed_diff = false) {
  detail::check_mask(mask, grid, clip);
  const std::size_t frames = clip.frames();
  if (gap < 1 || gap >= frames)
    throw ConfigError("motion gap must satisfy 1 <= g < T (g=" + std::to_string(gap) + ", T=" +
                      std::to_string(frames) + ")");
  const auto masked = detail::masked_indices(mask);
  const std::size_t p = grid.cube.p, c = grid.channels;
  Tensor out({masked.size(), grid.motion_dim()});
  for (std::size_t r = 0; r < masked.size(); ++r) {
    const std::size_t n = masked[r];
    const std::size_t ti = n / grid.spatial_cells();
    const std::size_t hi = (n / grid.w) % grid.h;
    const std::size_t wi = n % grid.w;
    const std::size_t t0 = ti * grid.cube.t;
    const std::size_t t1 = std::min(t0 + gap, frames - 1);
    double* dst = out.data().data() + r * grid.motion_dim();
    std::size_t k = 0;
    for (std::size_t dy = 0; dy < p; ++dy)
      for (std::size_t dx = 0; dx < p; ++dx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double a = clip.at(t1, hi * p + dy, wi * p + dx, ch);
          const double b = clip.at(t0, hi * p + dy, wi * p + dx, ch);
          dst[k++] = signed_diff ? a - b : std::abs(a - b);
        }
  }
  return out;
}

inline TargetBundle make_targets(const Clip& clip, const Mask& mask, const TokenGrid& grid, const TargetConfig& cfg) {
  TargetBundle b;
  b.gap = cfg.gap;
  if (wants_space(cfg.kind))
    b.space = make_space_target(clip, mask, grid, cfg.normalize, cfg.normalize ? &b.norm_stats : nullptr);
  if (wants_time(cfg.kind)) b.time = make_motion_target(clip, mask, grid, cfg.gap, cfg.signed_diff);
  return b;
}

}  // namespace mmae
