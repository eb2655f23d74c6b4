#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "motionmae/error.hpp"
#include "motionmae/rng.hpp"
#include "motionmae/tensor.hpp"
#include "motionmae/video.hpp"

namespace mmae {

struct CubeSize {
  std::size_t t = 2;  // frames per cube
  std::size_t p = 16;  // spatial side

  friend bool operator==(const CubeSize&, const CubeSize&) = default;
};

// Cube partition of a T x H x W x C clip.
struct TokenGrid {
  std::size_t t = 0, h = 0, w = 0;  // grid extents
  CubeSize cube;
  std::size_t channels = 1;

  std::size_t count() const noexcept { return t * h * w; }
  std::size_t spatial_cells() const noexcept { return h * w; }
  std::size_t token_dim() const noexcept { return cube.t * cube.p * cube.p * channels; }
  std::size_t motion_dim() const noexcept { return cube.p * cube.p * channels; }
  std::size_t index(std::size_t ti, std::size_t hi, std::size_t wi) const noexcept { return (ti * h + hi) * w + wi; }

  std::size_t clip_frames() const noexcept { return t * cube.t; }
  std::size_t clip_height() const noexcept { return h * cube.p; }
  std::size_t clip_width() const noexcept { return w * cube.p; }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

inline TokenGrid make_grid(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                           CubeSize cube) {
  if (cube.t == 0 || cube.p == 0) throw ConfigError("cube dimensions must be positive");
  if (frames % cube.t || height % cube.p || width % cube.p)
    throw ConfigError("clip " + std::to_string(frames) + "x" + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by cube " + std::to_string(cube.t) + "x" + std::to_string(cube.p) + "x" +
                      std::to_string(cube.p));
  return TokenGrid{frames / cube.t, height / cube.p, width / cube.p, cube, channels};
}

// Token (t,h,w) is the flattened cube sub-volume in (frame, row, col, channel) order.
inline std::pair<Tensor, TokenGrid> patchify(const Clip& clip, CubeSize cube) {
  const TokenGrid g = make_grid(clip.frames(), clip.height(), clip.width(), clip.channels(), cube);
  Tensor tokens({g.count(), g.token_dim()});
  const std::size_t c = clip.channels();
  for (std::size_t ti = 0; ti < g.t; ++ti)
    for (std::size_t hi = 0; hi < g.h; ++hi)
      for (std::size_t wi = 0; wi < g.w; ++wi) {
        double* row = tokens.data().data() + g.index(ti, hi, wi) * g.token_dim();
        std::size_t k = 0;
        for (std::size_t dt = 0; dt < cube.t; ++dt)
          for (std::size_t dy = 0; dy < cube.p; ++dy)
            for (std::size_t dx = 0; dx < cube.p; ++dx)
              for (std::size_t ch = 0; ch < c; ++ch)
                row[k++] = clip.at(ti * cube.t + dt, hi * cube.p + dy, wi * cube.p + dx, ch);
      }
  return {std::move(tokens), g};
}

inline Clip unpatchify(const Tensor& tokens, const TokenGrid& g) {
  if (tokens.rank() != 2 || tokens.rows() != g.count() || tokens.cols() != g.token_dim())
    throw ConfigError("unpatchify: token matrix " + shape_str(tokens.shape()) + " does not match grid");
  Clip clip(g.clip_frames(), g.clip_height(), g.clip_width(), g.channels);
  for (std::size_t ti = 0; ti < g.t; ++ti)
    for (std::size_t hi = 0; hi < g.h; ++hi)
      for (std::size_t wi = 0; wi < g.w; ++wi) {
        const double* row = tokens.data().data() + g.index(ti, hi, wi) * g.token_dim();
        std::size_t k = 0;
        for (std::size_t dt = 0; dt < g.cube.t; ++dt)
          for (std::size_t dy = 0; dy < g.cube.p; ++dy)
            for (std::size_t dx = 0; dx < g.cube.p; ++dx)
              for (std::size_t ch = 0; ch < g.channels; ++ch)
                clip.at(ti * g.cube.t + dt, hi * g.cube.p + dy, wi * g.cube.p + dx, ch) =
                    static_cast<float>(row[k++]);
      }
  return clip;
}

// Fixed 3-axis sin-cos encoding. Each axis gets 2*floor(E/6) channels laid out
// as interleaved (sin, cos) pairs at frequencies 10000^(-i/(d/2)); the
// remainder of E is zero padding.
inline Tensor sincos_posenc(const TokenGrid& g, std::size_t embed_dim) {
  if (embed_dim < 6) throw ConfigError("sincos_posenc: embedding dimension must be at least 6");
  const std::size_t per_axis = 2 * (embed_dim / 6);
  const std::size_t pairs = per_axis / 2;
  std::vector<double> omega(pairs);
  for (std::size_t i = 0; i < pairs; ++i)
    omega[i] = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(pairs));
  Tensor pe({g.count(), embed_dim});
  for (std::size_t ti = 0; ti < g.t; ++ti)
    for (std::size_t hi = 0; hi < g.h; ++hi)
      for (std::size_t wi = 0; wi < g.w; ++wi) {
        double* row = pe.data().data() + g.index(ti, hi, wi) * embed_dim;
        const std::size_t pos[3] = {ti, hi, wi};
        for (std::size_t axis = 0; axis < 3; ++axis)
          for (std::size_t i = 0; i < pairs; ++i) {
            const double a = static_cast<double>(pos[axis]) * omega[i];
            row[axis * per_axis + 2 * i] = std::sin(a);
            row[axis * per_axis + 2 * i + 1] = std::cos(a);
          }
      }
  return pe;
}

enum class MaskStrategy { random, tube, time_only };

inline std::string_view strategy_name(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::random: return "random";
    case MaskStrategy::tube: return "tube";
    case MaskStrategy::time_only: return "time_only";
  }
  return "?";
}

inline MaskStrategy parse_strategy(std::string_view s) {
  if (s == "random") return MaskStrategy::random;
  if (s == "tube") return MaskStrategy::tube;
  if (s == "time_only") return MaskStrategy::time_only;
  throw ConfigError("unknown mask strategy '" + std::string(s) + "' (expected random, tube or time_only)");
}

// Per-token visibility; bits[i] == true means token i is hidden from the encoder.
struct Mask {
  std::vector<bool> bits;
  double ratio = 0.0;
  MaskStrategy strategy = MaskStrategy::random;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return bits.size(); }
  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), true)); }
};

// floor(ratio * n), robust to representation error in products such as 0.7 * 10.
inline std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

// Draws k distinct units out of n uniformly (partial Fisher-Yates).
inline std::vector<std::size_t> choose_units(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(i), static_cast<std::int64_t>(n - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

// random: floor(r*N) tokens; tube: floor(r*H'W') spatial cells across all
// time slots; time_only: floor(r*T') whole temporal slots.
inline Mask sample_mask(const TokenGrid& g, double ratio, MaskStrategy strategy, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  Mask m;
  m.bits.assign(g.count(), false);
  m.ratio = ratio;
  m.strategy = strategy;
  m.seed = seed;
  Rng rng(seed);
  switch (strategy) {
    case MaskStrategy::random:
      for (std::size_t i : choose_units(g.count(), floor_count(ratio, g.count()), rng)) m.bits[i] = true;
      break;
    case MaskStrategy::tube:
      for (std::size_t cell : choose_units(g.spatial_cells(), floor_count(ratio, g.spatial_cells()), rng))
        for (std::size_t ti = 0; ti < g.t; ++ti) m.bits[ti * g.spatial_cells() + cell] = true;
      break;
    case MaskStrategy::time_only:
      // floor(r*T') < T' for r < 1, so at least one slot stays visible.
      for (std::size_t slot : choose_units(g.t, floor_count(ratio, g.t), rng))
        for (std::size_t cell = 0; cell < g.spatial_cells(); ++cell) m.bits[slot * g.spatial_cells() + cell] = true;
      break;
  }
  return m;
}

// Mask from an explicit list of masked token indices.
inline Mask mask_from_indices(std::size_t n, const std::vector<std::size_t>& masked) {
  Mask m;
  m.bits.assign(n, false);
  for (std::size_t i : masked) m.bits.at(i) = true;
  m.ratio = static_cast<double>(m.masked_count()) / static_cast<double>(n);
  return m;
}

struct VisibleSplit {
  Tensor visible;                    // Nv x D, in grid order
  std::vector<std::size_t> visible_index;
  std::vector<std::size_t> masked_index;
};

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> mask_partition(const Mask& mask) {
  std::vector<std::size_t> vis, msk;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask.bits[i] ? msk : vis).push_back(i);
  return {std::move(vis), std::move(msk)};
}

inline VisibleSplit split_visible(const Tensor& tokens, const Mask& mask) {
  if (tokens.rank() != 2 || tokens.rows() != mask.size())
    throw ConfigError("split_visible: " + std::to_string(mask.size()) + " mask bits for token matrix " +
                      shape_str(tokens.shape()));
  VisibleSplit s;
  std::tie(s.visible_index, s.masked_index) = mask_partition(mask);
  if (s.visible_index.empty()) return s;
  const std::size_t d = tokens.cols();
  Tensor vis({s.visible_index.size(), d});
  for (std::size_t r = 0; r < s.visible_index.size(); ++r)
    std::copy_n(tokens.data().data() + s.visible_index[r] * d, d, vis.data().data() + r * d);
  s.visible = std::move(vis);
  return s;
}

}  // namespace mmae
