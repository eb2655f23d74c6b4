#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "motionmae/autodiff.hpp"
#include "motionmae/error.hpp"
#include "motionmae/rng.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tensor.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/video.hpp"

namespace mmae {

struct EncoderConfig {
  std::size_t depth = 4;
  std::size_t embed_dim = 192;
  std::size_t heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t token_dim = 0;  // D = ct*cp*cp*C
};

enum class DecoderArch { parallel, shared };

inline std::string_view decoder_arch_name(DecoderArch a) { return a == DecoderArch::parallel ? "parallel" : "shared"; }

inline DecoderArch parse_decoder_arch(std::string_view s) {
  if (s == "parallel") return DecoderArch::parallel;
  if (s == "shared") return DecoderArch::shared;
  throw ConfigError("unknown decoder arch '" + std::string(s) + "' (expected parallel or shared)");
}

struct DecoderConfig {
  std::size_t depth = 2;  // 0 is accepted as a test stub (embed, mask token, norm, projection only)
  std::size_t embed_dim = 96;
  std::size_t heads = 3;
  std::size_t mlp_ratio = 4;
  std::size_t space_dim = 0;  // D
  std::size_t time_dim = 0;   // Dm = cp*cp*C
  DecoderArch arch = DecoderArch::parallel;
  bool space_head = true;
  bool time_head = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  std::size_t num_classes = 0;  // 0 disables the classifier head
  double ln_eps = 1e-6;
};

enum class Head { space, time };

inline std::string_view head_name(Head h) { return h == Head::space ? "space" : "time"; }

// Named parameter tensors. Names are stable path strings.
struct ModelState {
  std::vector<std::string> names;
  std::vector<Tensor> params;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("unknown parameter '" + std::string(name) + "'");
  }
  const Tensor& get(std::string_view name) const { return params[index_of(name)]; }
  Tensor& get(std::string_view name) { return params[index_of(name)]; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.numel();
    return n;
  }
};

struct ParamSpec {
  std::string name;
  Shape shape;
  enum class Init { weight, zeros, ones, token } init = Init::weight;
  bool decay = true;
};

// Per-layer views into the flat parameter list.
namespace layout {

struct Linear {
  std::size_t w = 0, b = 0;
};
struct Norm {
  std::size_t gamma = 0, beta = 0;
};
// q and v projections carry biases; k has none (a key bias cancels in softmax).
struct Attention {
  std::size_t q_w = 0, q_b = 0, k_w = 0, v_w = 0, v_b = 0;
  Linear proj;
};
struct Block {
  Norm norm1;
  Attention attn;
  Norm norm2;
  Linear fc1, fc2;
};
struct Stack {
  std::vector<Block> blocks;
  Norm norm;
};
struct DecoderBody {
  Linear embed;
  std::size_t mask_token = 0;
  Stack stack;
};

}  // namespace layout

class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) { build(); }

  const ModelConfig& config() const noexcept { return cfg_; }
  const std::vector<ParamSpec>& specs() const noexcept { return specs_; }

  bool has_head(Head h) const { return h == Head::space ? cfg_.decoder.space_head : cfg_.decoder.time_head; }

  // Truncated-normal weights, zero biases, unit LayerNorm gains, normal mask tokens.
  ModelState init(std::uint64_t seed, double stddev = 0.02) const {
    Rng rng(seed);
    ModelState s;
    for (const auto& spec : specs_) {
      Tensor t(spec.shape);
      switch (spec.init) {
        case ParamSpec::Init::weight:
        case ParamSpec::Init::token:
          for (double& v : t.data()) v = truncated_normal(rng, stddev);
          break;
        case ParamSpec::Init::ones:
          for (double& v : t.data()) v = 1.0;
          break;
        case ParamSpec::Init::zeros: break;
      }
      s.names.push_back(spec.name);
      s.params.push_back(std::move(t));
    }
    return s;
  }

  void check_state(const ModelState& s) const {
    if (s.params.size() != specs_.size()) throw ConfigError("model state has the wrong number of parameters");
    for (std::size_t i = 0; i < specs_.size(); ++i)
      if (s.names[i] != specs_[i].name || s.params[i].shape() != specs_[i].shape)
        throw ConfigError("model state parameter '" + s.names[i] + "' does not match layout entry '" +
                          specs_[i].name + "' " + shape_str(specs_[i].shape));
  }

  std::vector<bool> decay_mask() const {
    std::vector<bool> m;
    for (const auto& s : specs_) m.push_back(s.decay);
    return m;
  }

  // Puts every parameter on the tape; `track` selects leaves (gradients) or constants.
  std::vector<Var> bind(Tape& tape, const ModelState& s, bool track = true) const {
    check_state(s);
    std::vector<Var> out;
    out.reserve(s.params.size());
    for (const auto& p : s.params) out.push_back(track ? tape.leaf(p) : tape.constant(p));
    return out;
  }

  std::size_t encoder_param_count() const { return count_prefix("encoder."); }
  std::size_t decoder_param_count() const { return count_prefix("decoder."); }

  // Latents (Nv x E) for the visible tokens only.
  Var encode(Tape& tape, std::span<const Var> p, const Tensor& visible_tokens,
             const std::vector<std::size_t>& visible_index, const TokenGrid& grid,
             std::vector<Tensor>* attention = nullptr) const {
    if (visible_index.empty() || visible_tokens.empty()) throw ConfigError("encode: no visible tokens");
    if (visible_tokens.rows() != visible_index.size() || visible_tokens.cols() != cfg_.encoder.token_dim)
      throw ConfigError("encode: visible token matrix " + shape_str(visible_tokens.shape()) + " does not match config");
    const Tensor pos = gather(posenc(grid, cfg_.encoder.embed_dim), visible_index);
    Var x = linear(p, tape.constant(visible_tokens), enc_patch_);
    x = ad::add(x, tape.constant(pos));
    return run_stack(p, x, enc_stack_, cfg_.encoder.heads, attention);
  }

  // Predictions for all N grid positions from the given head.
  Var decode(Tape& tape, std::span<const Var> p, Var latents, const Mask& mask, const TokenGrid& grid, Head head,
             std::vector<Tensor>* attention = nullptr) const {
    if (!has_head(head)) throw ConfigError("decode: the " + std::string(head_name(head)) + " head is disabled");
    Var y = decoder_trunk(tape, p, latents, mask, grid, dec_body(head), attention);
    return linear(p, y, head == Head::space ? space_pred_ : time_pred_);
  }

  struct PretrainOutput {
    std::optional<Var> space;
    std::optional<Var> time;
    Var latents;
  };

  PretrainOutput forward_pretrain(Tape& tape, std::span<const Var> p, const Clip& clip, const Mask& mask,
                                  CubeSize cube, std::vector<Tensor>* attention = nullptr) const {
    const auto [tokens, grid] = patchify(clip, cube);
    if (mask.size() != grid.count()) throw ConfigError("forward_pretrain: mask does not match the token grid");
    VisibleSplit split = split_visible(tokens, mask);
    PretrainOutput out;
    out.latents = encode(tape, p, split.visible, split.visible_index, grid, attention);
    if (cfg_.decoder.arch == DecoderArch::shared) {
      // One decoder stack feeding both projections.
      Var y = decoder_trunk(tape, p, out.latents, mask, grid, shared_body_, attention);
      if (cfg_.decoder.space_head) out.space = linear(p, y, space_pred_);
      if (cfg_.decoder.time_head) out.time = linear(p, y, time_pred_);
      return out;
    }
    if (cfg_.decoder.space_head) out.space = decode(tape, p, out.latents, mask, grid, Head::space, attention);
    if (cfg_.decoder.time_head) out.time = decode(tape, p, out.latents, mask, grid, Head::time, attention);
    return out;
  }

  // Logits (1 x num_classes): all tokens visible, mean-pooled encoder output.
  Var classify(Tape& tape, std::span<const Var> p, const Clip& clip, CubeSize cube,
               std::vector<Tensor>* attention = nullptr) const {
    if (cfg_.num_classes == 0) throw ConfigError("classify: model has no classifier head");
    const auto [tokens, grid] = patchify(clip, cube);
    std::vector<std::size_t> all(grid.count());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    Var z = encode(tape, p, tokens, all, grid, attention);
    return linear(p, ad::mean_rows(z), classifier_);
  }

  // Positional encodings can be zeroed for symmetry tests.
  void set_posenc_enabled(bool on) { posenc_enabled_ = on; }

 private:
  void build() {
    const auto& e = cfg_.encoder;
    const auto& d = cfg_.decoder;
    if (e.depth < 1) throw ConfigError("encoder depth must be >= 1");
    if (e.heads == 0 || e.embed_dim % e.heads) throw ConfigError("encoder embed_dim must be divisible by heads");
    if (e.token_dim == 0) throw ConfigError("encoder token_dim must be positive");
    if (d.heads == 0 || d.embed_dim % d.heads) throw ConfigError("decoder embed_dim must be divisible by heads");
    if (!d.space_head && !d.time_head && cfg_.num_classes == 0)
      throw ConfigError("model needs a decoder head or a classifier");
    if ((d.space_head && d.space_dim == 0) || (d.time_head && d.time_dim == 0))
      throw ConfigError("decoder output dimensions must be positive");
    if (e.embed_dim < 6 || d.embed_dim < 6) throw ConfigError("embedding dimensions must be at least 6");

    enc_patch_ = add_linear("encoder.patch_embed", e.token_dim, e.embed_dim);
    enc_stack_ = add_stack("encoder", e.depth, e.embed_dim, e.mlp_ratio);

    auto add_body = [&](const std::string& prefix) {
      layout::DecoderBody b;
      b.embed = add_linear(prefix + ".embed", e.embed_dim, d.embed_dim);
      b.mask_token = add(prefix + ".mask_token", {d.embed_dim}, ParamSpec::Init::token, false);
      b.stack = add_stack(prefix, d.depth, d.embed_dim, d.mlp_ratio);
      return b;
    };
    if (d.arch == DecoderArch::parallel) {
      if (d.space_head) space_body_ = add_body("decoder.space");
      if (d.space_head) space_pred_ = add_linear("decoder.space.pred", d.embed_dim, d.space_dim);
      if (d.time_head) time_body_ = add_body("decoder.time");
      if (d.time_head) time_pred_ = add_linear("decoder.time.pred", d.embed_dim, d.time_dim);
    } else if (d.space_head || d.time_head) {
      shared_body_ = add_body("decoder.shared");
      if (d.space_head) space_pred_ = add_linear("decoder.space.pred", d.embed_dim, d.space_dim);
      if (d.time_head) time_pred_ = add_linear("decoder.time.pred", d.embed_dim, d.time_dim);
    }
    if (cfg_.num_classes > 0) classifier_ = add_linear("classifier", e.embed_dim, cfg_.num_classes);
  }

  std::size_t add(std::string name, Shape shape, ParamSpec::Init init, bool decay) {
    specs_.push_back(ParamSpec{std::move(name), std::move(shape), init, decay});
    return specs_.size() - 1;
  }

  layout::Linear add_linear(const std::string& prefix, std::size_t in, std::size_t out, bool bias = true) {
    layout::Linear l;
    l.w = add(prefix + ".weight", {in, out}, ParamSpec::Init::weight, true);
    if (bias) l.b = add(prefix + ".bias", {out}, ParamSpec::Init::zeros, false);
    return l;
  }

  layout::Norm add_norm(const std::string& prefix, std::size_t dim) {
    layout::Norm n;
    n.gamma = add(prefix + ".weight", {dim}, ParamSpec::Init::ones, false);
    n.beta = add(prefix + ".bias", {dim}, ParamSpec::Init::zeros, false);
    return n;
  }

  layout::Stack add_stack(const std::string& prefix, std::size_t depth, std::size_t dim, std::size_t mlp_ratio) {
    layout::Stack s;
    for (std::size_t i = 0; i < depth; ++i) {
      const std::string b = prefix + ".blocks." + std::to_string(i);
      layout::Block blk;
      blk.norm1 = add_norm(b + ".norm1", dim);
      blk.attn.q_w = add(b + ".attn.q.weight", {dim, dim}, ParamSpec::Init::weight, true);
      blk.attn.q_b = add(b + ".attn.q.bias", {dim}, ParamSpec::Init::zeros, false);
      blk.attn.k_w = add(b + ".attn.k.weight", {dim, dim}, ParamSpec::Init::weight, true);
      blk.attn.v_w = add(b + ".attn.v.weight", {dim, dim}, ParamSpec::Init::weight, true);
      blk.attn.v_b = add(b + ".attn.v.bias", {dim}, ParamSpec::Init::zeros, false);
      blk.attn.proj = add_linear(b + ".attn.proj", dim, dim);
      blk.norm2 = add_norm(b + ".norm2", dim);
      blk.fc1 = add_linear(b + ".mlp.fc1", dim, dim * mlp_ratio);
      blk.fc2 = add_linear(b + ".mlp.fc2", dim * mlp_ratio, dim);
      s.blocks.push_back(blk);
    }
    s.norm = add_norm(prefix + ".norm", dim);
    return s;
  }

  std::size_t count_prefix(std::string_view prefix) const {
    std::size_t n = 0;
    for (const auto& s : specs_)
      if (s.name.starts_with(prefix)) n += shape_numel(s.shape);
    return n;
  }

  const layout::DecoderBody& dec_body(Head h) const {
    if (cfg_.decoder.arch == DecoderArch::shared) return shared_body_;
    return h == Head::space ? space_body_ : time_body_;
  }

  Tensor posenc(const TokenGrid& grid, std::size_t dim) const {
    Tensor pe = sincos_posenc(grid, dim);
    if (!posenc_enabled_) pe = Tensor(pe.shape());
    return pe;
  }

  static Tensor gather(const Tensor& t, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), t.cols()});
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < t.cols(); ++j) out(r, j) = t(rows[r], j);
    return out;
  }

  static Var linear(std::span<const Var> p, Var x, const layout::Linear& l) {
    return ad::add_bias(ad::matmul(x, p[l.w]), p[l.b]);
  }

  Var norm(std::span<const Var> p, Var x, const layout::Norm& n) const {
    return ad::layer_norm(x, p[n.gamma], p[n.beta], cfg_.ln_eps);
  }

  // Joint attention over every row of x.
  static Var attention(std::span<const Var> p, Var x, const layout::Attention& a, std::size_t heads,
                       std::vector<Tensor>* probe) {
    const std::size_t dim = ad::val(x).cols();
    const std::size_t hd = dim / heads;
    Var q = ad::add_bias(ad::matmul(x, p[a.q_w]), p[a.q_b]);
    Var k = ad::matmul(x, p[a.k_w]);
    Var v = ad::add_bias(ad::matmul(x, p[a.v_w]), p[a.v_b]);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Var qh = heads == 1 ? q : ad::slice_cols(q, h * hd, hd);
      Var kh = heads == 1 ? k : ad::slice_cols(k, h * hd, hd);
      Var vh = heads == 1 ? v : ad::slice_cols(v, h * hd, hd);
      Var attn = ad::softmax(ad::scale(ad::matmul_nt(qh, kh), scale), 1);
      if (probe) probe->push_back(ad::val(attn));
      outs.push_back(ad::matmul(attn, vh));
    }
    Var merged = heads == 1 ? outs.front() : ad::concat_cols(outs);
    return linear(p, merged, a.proj);
  }

  // Pre-norm transformer blocks followed by the final norm.
  Var run_stack(std::span<const Var> p, Var x, const layout::Stack& s, std::size_t heads,
                std::vector<Tensor>* probe) const {
    for (const auto& b : s.blocks) {
      x = ad::add(x, attention(p, norm(p, x, b.norm1), b.attn, heads, probe));
      Var h = ad::gelu(linear(p, norm(p, x, b.norm2), b.fc1));
      x = ad::add(x, linear(p, h, b.fc2));
    }
    return norm(p, x, s.norm);
  }

  Var decoder_trunk(Tape& tape, std::span<const Var> p, Var latents, const Mask& mask, const TokenGrid& grid,
                    const layout::DecoderBody& body, std::vector<Tensor>* probe) const {
    const auto [vis, msk] = mask_partition(mask);
    if (ad::val(latents).rows() != vis.size()) throw ConfigError("decode: latents do not match the mask");
    Var y = linear(p, latents, body.embed);
    if (!msk.empty()) y = ad::merge_rows(y, vis, p[body.mask_token], msk, grid.count());
    y = ad::add(y, tape.constant(posenc(grid, cfg_.decoder.embed_dim)));
    return run_stack(p, y, body.stack, cfg_.decoder.heads, probe);
  }

  ModelConfig cfg_;
  std::vector<ParamSpec> specs_;
  layout::Linear enc_patch_;
  layout::Stack enc_stack_;
  layout::DecoderBody space_body_, time_body_, shared_body_;
  layout::Linear space_pred_, time_pred_, classifier_;
  bool posenc_enabled_ = true;
};

// Encoder and decoder configs sized for a given token grid.
inline ModelConfig make_model_config(const TokenGrid& grid, EncoderConfig enc, DecoderConfig dec, TargetKind kind,
                                     std::size_t num_classes) {
  enc.token_dim = grid.token_dim();
  dec.space_dim = grid.token_dim();
  dec.time_dim = grid.motion_dim();
  dec.space_head = wants_space(kind);
  dec.time_head = wants_time(kind);
  return ModelConfig{enc, dec, num_classes};
}

// Encoder plus classifier, no decoder: the finetuning model.
inline ModelConfig make_classifier_config(const TokenGrid& grid, EncoderConfig enc, DecoderConfig dec,
                                          std::size_t num_classes) {
  ModelConfig cfg = make_model_config(grid, enc, dec, TargetKind::both, num_classes);
  cfg.decoder.space_head = cfg.decoder.time_head = false;
  return cfg;
}

}  // namespace mmae
