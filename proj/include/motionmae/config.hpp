#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "motionmae/error.hpp"
#include "motionmae/model.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/training.hpp"
#include "motionmae/video.hpp"

namespace mmae {

using nlohmann::json;

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "dir"
  std::string dir;
  std::size_t count = 64;
  std::size_t video_frames = 8;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 1;
  SyntheticRanges synthetic;
  SamplingConfig sampling{8};  // cube is taken from the model section
};

struct ModelSection {
  std::string preset = "tiny";
  CubeSize cube{2, 4};
  EncoderConfig encoder;
  DecoderConfig decoder;
  double init_std = 0.02;  // truncated-normal std of weights and mask tokens
};

struct DecoderShape {
  std::size_t depth = 1;
  std::size_t dim = 16;

  std::string name() const { return "d" + std::to_string(depth) + "w" + std::to_string(dim); }
};

struct AblateConfig {
  std::vector<std::string> target_kind{"frame", "motion", "both"};
  std::vector<std::size_t> gap{1, 2, 4};
  std::vector<std::string> loss_kind{"mse", "l1", "smooth_l1"};
  std::vector<double> ratio{0.5, 0.75, 0.9};
  std::vector<DecoderShape> decoder{{1, 8}, {1, 16}, {2, 16}};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";
  DataConfig data;
  ModelSection model;
  TrainConfig train;
  FinetuneConfig finetune;
  AblateConfig ablate;

  TokenGrid grid() const {
    return make_grid(data.sampling.frames, clip_height(), clip_width(), data.channels, model.cube);
  }
  std::size_t clip_height() const { return data.sampling.out_h ? data.sampling.out_h : data.height; }
  std::size_t clip_width() const { return data.sampling.out_w ? data.sampling.out_w : data.width; }
  ModelConfig pretrain_model() const {
    return make_model_config(grid(), model.encoder, model.decoder, train.target.kind, 0);
  }
  ModelConfig finetune_model(std::size_t classes) const {
    return make_classifier_config(grid(), model.encoder, model.decoder, classes);
  }
};

// Applies a named architecture preset; explicit model fields override it afterwards.
inline void apply_preset(ModelSection& m, std::string_view name) {
  if (name == "tiny") {
    m.cube = {2, 4};
    m.encoder = {2, 32, 2, 2, 0};
    m.decoder.depth = 1, m.decoder.embed_dim = 16, m.decoder.heads = 2, m.decoder.mlp_ratio = 2;
  } else if (name == "desk") {
    m.cube = {2, 16};
    m.encoder = {4, 192, 3, 4, 0};
    m.decoder.depth = 2, m.decoder.embed_dim = 96, m.decoder.heads = 3, m.decoder.mlp_ratio = 4;
  } else if (name == "base") {
    m.cube = {2, 16};
    m.encoder = {12, 768, 12, 4, 0};
    m.decoder.depth = 4, m.decoder.embed_dim = 384, m.decoder.heads = 6, m.decoder.mlp_ratio = 4;
  } else {
    throw ConfigError("model.preset: unknown preset '" + std::string(name) + "' (expected tiny, desk or base)");
  }
  m.preset = std::string(name);
}

namespace detail {

// Reads one JSON object; every key must be consumed before finish().
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where("") + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": wrong value type");
    }
  }

  void read_size(const char* key, std::size_t& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
      throw ConfigError(where(key) + ": expected a non-negative integer");
    out = v->get<std::size_t>();
  }

  template <typename Parse, typename T>
  void read_enum(const char* key, T& out, Parse parse) {
    std::string s;
    if (!has(key)) return;
    read(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  std::optional<Section> sub(const char* key) {
    const json* v = find(key);
    if (!v) return std::nullopt;
    return Section(*v, where(key));
  }

  const json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(std::string_view key) const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw ConfigError(where(k) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void wrap(const std::string& field, auto&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(field, 0) == 0) throw;
    throw ConfigError(field + ": " + msg);
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const json& root) {
  RunConfig rc;
  detail::Section top(root, "");
  top.read("seed", rc.seed);
  top.read("out_dir", rc.out_dir);

  if (auto d = top.sub("data")) {
    auto& D = rc.data;
    d->read("source", D.source);
    if (D.source != "synthetic" && D.source != "dir")
      throw ConfigError("data.source: expected 'synthetic' or 'dir'");
    d->read("dir", D.dir);
    d->read_size("count", D.count);
    d->read_size("video_frames", D.video_frames);
    d->read_size("height", D.height);
    d->read_size("width", D.width);
    d->read_size("channels", D.channels);
    d->read_size("frames", D.sampling.frames);
    d->read_size("stride", D.sampling.stride);
    d->read("flip", D.sampling.flip);
    d->read("crop", D.sampling.crop);
    if (d->has("crop_scale")) {
      std::vector<double> sc;
      d->read("crop_scale", sc);
      if (sc.size() != 2 || !(sc[0] > 0.0 && sc[0] <= sc[1] && sc[1] <= 1.0))
        throw ConfigError("data.crop_scale: expected [lo, hi] with 0 < lo <= hi <= 1");
      D.sampling.crop_lo = sc[0];
      D.sampling.crop_hi = sc[1];
    }
    d->read_size("out_height", D.sampling.out_h);
    d->read_size("out_width", D.sampling.out_w);
    if (auto s = d->sub("synthetic")) {
      auto& R = D.synthetic;
      s->read_size("min_object", R.min_object);
      s->read_size("max_object", R.max_object);
      s->read("min_speed", R.min_speed);
      s->read("max_speed", R.max_speed);
      s->read("min_contrast", R.min_contrast);
      if (R.min_object < 1 || R.min_object > R.max_object)
        throw ConfigError("data.synthetic: need 1 <= min_object <= max_object");
      if (R.min_speed < 1 || R.min_speed > R.max_speed)
        throw ConfigError("data.synthetic: need 1 <= min_speed <= max_speed");
      if (!(R.min_contrast > 0.0f && R.min_contrast < 1.0f))
        throw ConfigError("data.synthetic.min_contrast: must lie in (0, 1)");
      s->finish();
    }
    if (D.sampling.frames < 1 || D.sampling.stride < 1) throw ConfigError("data.frames and data.stride must be >= 1");
    if (D.source == "dir" && D.dir.empty()) throw ConfigError("data.dir: required when data.source is 'dir'");
    d->finish();
  }

  if (auto m = top.sub("mask")) {
    m->read("ratio", rc.train.mask_ratio);
    m->read_enum("strategy", rc.train.mask_strategy, parse_strategy);
    if (m->has("seed")) {
      std::uint64_t s = 0;
      m->read("seed", s);
      rc.train.mask_seed_override = s;
    }
    if (!(rc.train.mask_ratio >= 0.0 && rc.train.mask_ratio < 1.0)) throw ConfigError("mask.ratio: must lie in [0, 1)");
    m->finish();
  }

  if (auto t = top.sub("targets")) {
    t->read_enum("kind", rc.train.target.kind, parse_target_kind);
    t->read_size("gap", rc.train.target.gap);
    t->read("normalize", rc.train.target.normalize);
    t->read("signed", rc.train.target.signed_diff);
    t->read("lambda", rc.train.lambda);
    if (rc.train.target.gap < 1) throw ConfigError("targets.gap: must be >= 1");
    if (!(rc.train.lambda >= 0.0)) throw ConfigError("targets.lambda: must be >= 0");
    t->finish();
  }

  if (auto m = top.sub("model")) {
    std::string preset = "tiny";
    m->read("preset", preset);
    detail::wrap("model.preset", [&] { apply_preset(rc.model, preset); });
    m->read_size("cube_t", rc.model.cube.t);
    m->read_size("cube_p", rc.model.cube.p);
    if (auto e = m->sub("encoder")) {
      e->read_size("depth", rc.model.encoder.depth);
      e->read_size("dim", rc.model.encoder.embed_dim);
      e->read_size("heads", rc.model.encoder.heads);
      e->read_size("mlp_ratio", rc.model.encoder.mlp_ratio);
      e->finish();
    }
    if (auto d = m->sub("decoder")) {
      d->read_size("depth", rc.model.decoder.depth);
      d->read_size("dim", rc.model.decoder.embed_dim);
      d->read_size("heads", rc.model.decoder.heads);
      d->read_size("mlp_ratio", rc.model.decoder.mlp_ratio);
      d->read_enum("arch", rc.model.decoder.arch, parse_decoder_arch);
      d->finish();
    }
    m->read("init_std", rc.model.init_std);
    if (!(rc.model.init_std > 0.0)) throw ConfigError("model.init_std: must be > 0");
    m->finish();
  } else {
    apply_preset(rc.model, "tiny");
  }
  rc.data.sampling.cube = rc.model.cube;

  bool warmup_given = false;
  if (auto t = top.sub("train")) {
    auto& T = rc.train;
    t->read("lr", T.optim.lr);
    if (t->has("betas")) {
      std::vector<double> b;
      t->read("betas", b);
      if (b.size() != 2) throw ConfigError("train.betas: expected [beta1, beta2]");
      T.optim.beta1 = b[0];
      T.optim.beta2 = b[1];
    }
    t->read("eps", T.optim.eps);
    t->read("weight_decay", T.optim.weight_decay);
    warmup_given = t->has("warmup_steps");
    t->read_size("warmup_steps", T.warmup_steps);
    t->read_size("total_steps", T.total_steps);
    t->read_size("batch_size", T.batch_size);
    t->read_enum("loss", T.loss, parse_loss_kind);
    t->read_enum("precision", T.precision, parse_precision);
    t->read_size("log_interval", T.log_interval);
    t->read_size("checkpoint_interval", T.checkpoint_interval);
    t->finish();
  }
  if (!warmup_given) rc.train.warmup_steps = rc.train.total_steps / 20;
  rc.train.seed = rc.seed;
  rc.train.init_std = rc.model.init_std;
  detail::wrap("train", [&] { validate(rc.train); });

  bool ft_warmup_given = false;
  if (auto f = top.sub("finetune")) {
    auto& F = rc.finetune;
    f->read("lr", F.optim.lr);
    f->read("weight_decay", F.optim.weight_decay);
    ft_warmup_given = f->has("warmup_steps");
    f->read_size("warmup_steps", F.warmup_steps);
    f->read_size("total_steps", F.total_steps);
    f->read_size("batch_size", F.batch_size);
    f->read("val_fraction", F.val_fraction);
    f->read_size("eval_clips", F.eval_clips);
    f->finish();
  }
  if (!ft_warmup_given) rc.finetune.warmup_steps = rc.finetune.total_steps / 20;
  rc.finetune.seed = rc.seed;
  rc.finetune.init_std = rc.model.init_std;
  rc.finetune.precision = rc.train.precision;
  if (rc.finetune.warmup_steps > rc.finetune.total_steps)
    throw ConfigError("finetune.warmup_steps: must not exceed total_steps");
  if (rc.finetune.batch_size < 1) throw ConfigError("finetune.batch_size: must be >= 1");
  if (!(rc.finetune.val_fraction > 0.0 && rc.finetune.val_fraction < 1.0))
    throw ConfigError("finetune.val_fraction: must lie in (0, 1)");
  if (rc.finetune.eval_clips < 1) throw ConfigError("finetune.eval_clips: must be >= 1");

  if (auto a = top.sub("ablate")) {
    auto& A = rc.ablate;
    a->read("target_kind", A.target_kind);
    for (const auto& k : A.target_kind) detail::wrap("ablate.target_kind", [&] { parse_target_kind(k); });
    a->read("gap", A.gap);
    a->read("loss_kind", A.loss_kind);
    for (const auto& k : A.loss_kind) detail::wrap("ablate.loss_kind", [&] { parse_loss_kind(k); });
    a->read("ratio", A.ratio);
    if (const json* dec = a->find("decoder")) {
      if (!dec->is_array()) throw ConfigError("ablate.decoder: expected an array of {depth, dim}");
      A.decoder.clear();
      for (const auto& item : *dec) {
        detail::Section s(item, "ablate.decoder[]");
        DecoderShape shape;
        s.read_size("depth", shape.depth);
        s.read_size("dim", shape.dim);
        s.finish();
        A.decoder.push_back(shape);
      }
    }
    a->finish();
  }

  top.finish();
  detail::wrap("model", [&] { Model probe(rc.pretrain_model()); });
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

// Key reference with defaults, shown by --help.
inline std::string config_reference() {
  return R"(Run configuration (JSON; unknown keys are rejected):
  seed                      0              single source of randomness (data=seed+1, mask=seed+2, init=seed+3)
  out_dir                   "runs/default"
  data.source               "synthetic"    "synthetic" (moving squares) or "dir" (clips/*.mmae + labels.tsv)
  data.dir                  ""             dataset directory when source is "dir"
  data.count                64             synthetic videos
  data.video_frames         8              frames per synthetic video
  data.height/width         16 / 16        synthetic frame size
  data.channels             1
  data.frames               8              frames per sampled clip
  data.stride               1              temporal stride between sampled frames
  data.flip                 false          random horizontal flip (keep off for direction labels)
  data.crop                 false          random resized crop
  data.crop_scale           [0.5, 1.0]     crop area fraction range
  data.out_height/out_width 0 / 0          clip size after crop or resize (0 keeps the source size)
  data.synthetic            {min_object 3, max_object 6, min_speed 1, max_speed 2, min_contrast 0.3}
  mask.ratio                0.9            fraction of tokens hidden, in [0, 1)
  mask.strategy             "random"       random | tube | time_only
  mask.seed                 seed+2         base seed of the mask stream
  targets.kind              "both"         frame | motion | both
  targets.gap               1              frame gap g of the difference target
  targets.normalize         false          per-patch standardization of frame targets
  targets.signed            false          signed difference instead of absolute
  targets.lambda            1.0            weight of the motion loss
  model.preset              "tiny"         tiny (cube 2x4, E32 d2, dec 16 d1) | desk (2x16, E192 d4, dec 96 d2) | base (2x16, E768 d12, dec 384 d4)
  model.cube_t/cube_p       preset         cube size (frames, pixels)
  model.encoder             preset         {depth, dim, heads, mlp_ratio}
  model.decoder             preset         {depth, dim, heads, mlp_ratio, arch: parallel|shared}
  model.init_std            0.02           truncated-normal std of weights and mask tokens
  train.lr                  1.5e-4
  train.betas               [0.9, 0.95]
  train.eps                 1e-8
  train.weight_decay        0.05
  train.warmup_steps        total_steps/20
  train.total_steps         100
  train.batch_size          8
  train.loss                "mse"          mse | l1 | smooth_l1
  train.precision           "single"       single | double
  train.log_interval        1
  train.checkpoint_interval 0              0 writes only the final checkpoint
  finetune.lr               1e-3
  finetune.weight_decay     0.05
  finetune.warmup_steps     total_steps/20
  finetune.total_steps      200
  finetune.batch_size       8
  finetune.val_fraction     0.2            trailing fraction of the dataset held out
  finetune.eval_clips       1              temporal clips per video at evaluation (x3 crops)
  ablate.target_kind        ["frame", "motion", "both"]
  ablate.gap                [1, 2, 4]
  ablate.loss_kind          ["mse", "l1", "smooth_l1"]
  ablate.ratio              [0.5, 0.75, 0.9]
  ablate.decoder            [{depth 1, dim 8}, {depth 1, dim 16}, {depth 2, dim 16}]
)";
}

}  // namespace mmae
