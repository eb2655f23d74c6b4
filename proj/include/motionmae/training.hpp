#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "motionmae/autodiff.hpp"
#include "motionmae/checkpoint.hpp"
#include "motionmae/error.hpp"
#include "motionmae/evalviz.hpp"
#include "motionmae/model.hpp"
#include "motionmae/optim.hpp"
#include "motionmae/rng.hpp"
#include "motionmae/targets.hpp"
#include "motionmae/tokenizer.hpp"
#include "motionmae/video.hpp"

namespace mmae {

using ad::LossKind;

inline std::string_view loss_kind_name(LossKind k) {
  switch (k) {
    case LossKind::mse: return "mse";
    case LossKind::l1: return "l1";
    case LossKind::smooth_l1: return "smooth_l1";
  }
  return "?";
}

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "mse" || s == "MSE") return LossKind::mse;
  if (s == "l1" || s == "L1") return LossKind::l1;
  if (s == "smooth_l1" || s == "SmoothL1") return LossKind::smooth_l1;
  throw ConfigError("unknown loss kind '" + std::string(s) + "' (expected mse, l1 or smooth_l1)");
}

// single: parameters and optimizer moments are kept at f32 precision (compute stays f64).
enum class Precision { single, double_ };

inline Precision parse_precision(std::string_view s) {
  if (s == "single" || s == "f32") return Precision::single;
  if (s == "double" || s == "f64") return Precision::double_;
  throw ConfigError("unknown precision '" + std::string(s) + "' (expected single or double)");
}

struct TrainConfig {
  AdamWHyper optim{1.5e-4, 0.9, 0.95, 1e-8, 0.05};
  std::size_t warmup_steps = 5;
  std::size_t total_steps = 100;
  std::size_t batch_size = 8;
  TargetConfig target;
  double lambda = 1.0;  // weight of the time-head loss
  LossKind loss = LossKind::mse;
  double mask_ratio = 0.9;
  MaskStrategy mask_strategy = MaskStrategy::random;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> mask_seed_override;  // replaces seed + 2 as the mask stream base
  Precision precision = Precision::single;
  std::size_t log_interval = 1;
  std::size_t checkpoint_interval = 0;  // 0: final checkpoint only
  double init_std = 0.02;
};

inline void validate(const TrainConfig& c) {
  if (c.warmup_steps > c.total_steps) throw ConfigError("train: warmup_steps must not exceed total_steps");
  if (c.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(c.lambda >= 0.0)) throw ConfigError("train: lambda must be >= 0");
  if (!(c.mask_ratio >= 0.0 && c.mask_ratio < 1.0)) throw ConfigError("train: mask ratio must lie in [0, 1)");
  if (c.log_interval < 1) throw ConfigError("train: log_interval must be >= 1");
  if (c.target.gap < 1) throw ConfigError("train: motion gap must be >= 1");
  if (!(c.init_std > 0.0)) throw ConfigError("train: init_std must be > 0");
}

// Seed fan-out from the single run seed.
inline std::uint64_t data_seed(std::uint64_t seed) { return seed + 1; }
inline std::uint64_t mask_seed(std::uint64_t seed) { return seed + 2; }
inline std::uint64_t init_seed(std::uint64_t seed) { return seed + 3; }

// ---- losses ---------------------------------------------------------------

// Mean elementwise loss over the masked rows of pred (N x K) against target (M x K).
inline Var masked_loss(Var pred, const Tensor& target, const Mask& mask, LossKind kind) {
  const auto [vis, msk] = mask_partition(mask);
  if (msk.empty()) throw ConfigError("masked_loss: no masked tokens, loss is undefined");
  const Tensor& P = ad::val(pred);
  if (P.rank() != 2 || P.rows() != mask.size())
    throw ConfigError("masked_loss: prediction rows do not match the mask");
  if (target.rank() != 2 || target.rows() != msk.size() || target.cols() != P.cols())
    throw ConfigError("masked_loss: target " + shape_str(target.shape()) + " does not match " +
                      std::to_string(msk.size()) + " masked rows of width " + std::to_string(P.cols()));
  return ad::reconstruction_loss(ad::gather_rows(pred, msk), target, kind);
}

inline double masked_loss(const Tensor& pred, const Tensor& target, const Mask& mask, LossKind kind) {
  Tape tape(false);
  return tape.value(masked_loss(tape.constant(pred), target, mask, kind)).item();
}

// L = L_space + lambda * L_time, absent terms dropped.
inline Var total_loss(std::optional<Var> space, std::optional<Var> time, double lambda) {
  if (!space && !time) throw ConfigError("total_loss: both loss terms are absent");
  if (!time) return *space;
  Var weighted = lambda == 1.0 ? *time : ad::scale(*time, lambda);
  if (!space) return weighted;
  return ad::add(*space, weighted);
}

// Linear warmup to cfg lr, then cosine decay to zero at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw ConfigError("lr_at: step beyond total_steps");
  const double lr = cfg.optim.lr;
  if (step < cfg.warmup_steps) return lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (cfg.total_steps == cfg.warmup_steps) return lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- state ----------------------------------------------------------------

struct TrainState {
  ModelState model;
  OptimState optim;

  std::uint64_t step() const noexcept { return optim.t; }
};

inline void round_to_single(std::span<Tensor> ts) {
  for (auto& t : ts)
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

inline TrainState init_train_state(const Model& model, std::uint64_t seed, Precision precision, double init_std = 0.02) {
  TrainState s;
  s.model = model.init(init_seed(seed), init_std);
  if (precision == Precision::single) round_to_single(s.model.params);
  s.optim = OptimState::zeros_like(s.model.params);
  return s;
}

inline Checkpoint make_checkpoint(const Model& model, const TrainState& s) {
  return Checkpoint{config_digest(model.config()), s.step(), s.model, s.optim};
}

inline TrainState restore_train_state(const Model& model, const Checkpoint& ck) {
  require_digest(ck, model.config());
  model.check_state(ck.state);
  TrainState s;
  s.model = ck.state;
  s.optim = ck.optim ? *ck.optim : OptimState::zeros_like(s.model.params);
  s.optim.t = ck.step;
  return s;
}

// ---- data -----------------------------------------------------------------

struct SamplingConfig {
  std::size_t frames = 16;
  std::size_t stride = 1;
  bool flip = false;
  bool crop = false;
  double crop_lo = 0.5;
  double crop_hi = 1.0;
  std::size_t out_h = 0, out_w = 0;  // 0 keeps the source size
  CubeSize cube{2, 4};
};

// Random start, temporal stride, optional random resized crop and horizontal flip.
inline Clip sample_training_clip(const Clip& video, const SamplingConfig& s, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t span = (s.frames - 1) * s.stride + 1;
  if (video.frames() < span)
    throw ConfigError("video of " + std::to_string(video.frames()) + " frames is shorter than the clip span " +
                      std::to_string(span));
  const auto start = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(video.frames() - span)));
  Clip clip = sample_clip(video, s.frames, s.stride, start);
  const std::size_t oh = s.out_h ? s.out_h : clip.height();
  const std::size_t ow = s.out_w ? s.out_w : clip.width();
  if (s.crop) {
    clip = random_resized_crop(clip, s.crop_lo, s.crop_hi, oh, ow, rng());
  } else if (oh != clip.height() || ow != clip.width()) {
    clip = resize_bilinear(clip, oh, ow);
  }
  if (s.flip && uniform01(rng) < 0.5) clip = hflip(clip);
  return clip;
}

// Dataset index for batch slot i of a step: epochs visit every sample once in
// a seed-dependent order, so any step can be reconstructed independently.
inline std::size_t sample_index(std::size_t n, std::size_t step, std::size_t batch, std::size_t slot,
                                std::uint64_t seed) {
  const std::size_t q = step * batch + slot;
  const std::size_t epoch = q / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0x5eed, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)))]);
  return perm[q % n];
}

inline std::vector<Clip> pretrain_batch(const std::vector<Clip>& videos, std::size_t step, const TrainConfig& cfg,
                                        const SamplingConfig& s) {
  if (videos.empty()) throw ConfigError("pretraining dataset is empty");
  std::vector<Clip> out;
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const std::size_t idx = sample_index(videos.size(), step, cfg.batch_size, i, data_seed(cfg.seed));
    out.push_back(sample_training_clip(videos[idx], s, derive_seed(data_seed(cfg.seed), {step, i})));
  }
  return out;
}

inline std::vector<Mask> pretrain_masks(const TokenGrid& grid, std::size_t step, std::size_t count,
                                        const TrainConfig& cfg) {
  std::vector<Mask> masks;
  for (std::size_t i = 0; i < count; ++i)
    masks.push_back(sample_mask(grid, cfg.mask_ratio, cfg.mask_strategy, derive_seed(cfg.mask_seed_override.value_or(mask_seed(cfg.seed)), {step, i})));
  return masks;
}

// ---- pretraining ----------------------------------------------------------

struct StepLosses {
  double total = 0.0;
  std::optional<double> space;
  std::optional<double> time;
};

struct LossGrad {
  StepLosses losses;
  std::vector<Tensor> grads;
};

// Batch-mean objective and its gradient for explicit clips and masks.
inline LossGrad pretrain_gradients(const Model& model, const ModelState& state, const std::vector<Clip>& clips,
                                   const std::vector<Mask>& masks, const TrainConfig& cfg, CubeSize cube) {
  if (clips.empty() || clips.size() != masks.size()) throw ConfigError("pretrain: clips and masks must pair up");
  Tape tape;
  const auto p = model.bind(tape, state);
  std::vector<Var> per_clip;
  double sum_space = 0.0, sum_time = 0.0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const TokenGrid grid = make_grid(clips[i].frames(), clips[i].height(), clips[i].width(), clips[i].channels(), cube);
    TargetConfig tc = cfg.target;
    const TargetBundle targets = make_targets(clips[i], masks[i], grid, tc);
    const auto out = model.forward_pretrain(tape, p, clips[i], masks[i], cube);
    std::optional<Var> ls, lt;
    if (targets.space) {
      ls = masked_loss(*out.space, *targets.space, masks[i], cfg.loss);
      sum_space += tape.value(*ls).item();
    }
    if (targets.time) {
      lt = masked_loss(*out.time, *targets.time, masks[i], cfg.loss);
      sum_time += tape.value(*lt).item();
    }
    per_clip.push_back(total_loss(ls, lt, cfg.lambda));
  }
  Var total = per_clip.front();
  for (std::size_t i = 1; i < per_clip.size(); ++i) total = ad::add(total, per_clip[i]);
  total = ad::scale(total, 1.0 / static_cast<double>(per_clip.size()));
  tape.backward(total);

  LossGrad out;
  const double n = static_cast<double>(clips.size());
  out.losses.total = tape.value(total).item();
  if (wants_space(cfg.target.kind)) out.losses.space = sum_space / n;
  if (wants_time(cfg.target.kind)) out.losses.time = sum_time / n;
  if (!std::isfinite(out.losses.total)) throw NumericalError("pretrain: non-finite loss");
  for (Var v : p) out.grads.push_back(tape.grad(v));
  return out;
}

inline void apply_update(const Model& model, TrainState& state, std::span<const Tensor> grads, double lr,
                         const AdamWHyper& hyper, Precision precision) {
  AdamWHyper h = hyper;
  h.lr = lr;
  const auto decay_vec = model.decay_mask();
  std::unique_ptr<bool[]> decay(new bool[decay_vec.size()]);
  for (std::size_t i = 0; i < decay_vec.size(); ++i) decay[i] = decay_vec[i];
  adamw_step(state.model.params, grads, state.optim, h, std::span<const bool>(decay.get(), decay_vec.size()));
  if (precision == Precision::single) {
    round_to_single(state.model.params);
    round_to_single(state.optim.m);
    round_to_single(state.optim.v);
  }
}

// One optimizer step on a batch: masks, targets, forward, losses, AdamW at lr_at(step).
inline StepLosses pretrain_step(const Model& model, TrainState& state, const std::vector<Clip>& clips,
                                const TrainConfig& cfg, CubeSize cube) {
  const std::size_t step = state.step();
  const Clip& c0 = clips.at(0);
  const TokenGrid grid = make_grid(c0.frames(), c0.height(), c0.width(), c0.channels(), cube);
  const auto masks = pretrain_masks(grid, step, clips.size(), cfg);
  LossGrad lg = pretrain_gradients(model, state.model, clips, masks, cfg, cube);
  apply_update(model, state, lg.grads, lr_at(step, cfg), cfg.optim, cfg.precision);
  return lg.losses;
}

struct LogRow {
  std::size_t step = 0;
  StepLosses losses;
};

inline std::string csv_row(const LogRow& r) {
  std::ostringstream os;
  os << std::setprecision(9) << r.step << ',' << r.losses.total << ',';
  if (r.losses.space) os << *r.losses.space;
  os << ',';
  if (r.losses.time) os << *r.losses.time;
  return os.str();
}

inline constexpr std::string_view kLossCsvHeader = "step,loss,loss_space,loss_time";

struct PretrainReport {
  std::vector<LogRow> history;  // every executed step
  TrainState state;
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
};

// Loops pretrain_step from the state's step to total_steps. Writes
// ckpt_<step>.mmck every checkpoint_interval steps, checkpoint.mmck at the
// end, and loss.csv with a row every log_interval steps.
inline PretrainReport run_pretrain(const Model& model, const std::vector<Clip>& videos, const TrainConfig& cfg,
                                   const SamplingConfig& sampling, const std::filesystem::path& out_dir,
                                   std::optional<TrainState> resume = std::nullopt, std::ostream* progress = nullptr) {
  validate(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir.string() + "': " + ec.message());

  PretrainReport rep;
  rep.state = resume ? std::move(*resume) : init_train_state(model, cfg.seed, cfg.precision, cfg.init_std);
  model.check_state(rep.state.model);
  const std::size_t first = rep.state.step();
  if (first > cfg.total_steps) throw ConfigError("resume step is beyond total_steps");

  rep.loss_csv = out_dir / "loss.csv";
  std::vector<std::string> lines;
  if (first > 0 && std::filesystem::exists(rep.loss_csv)) {
    std::istringstream in(read_file_bytes(rep.loss_csv));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) < first) lines.push_back(line);
  }

  for (std::size_t step = first; step < cfg.total_steps; ++step) {
    const auto clips = pretrain_batch(videos, step, cfg, sampling);
    LogRow row{step, pretrain_step(model, rep.state, clips, cfg, sampling.cube)};
    rep.history.push_back(row);
    if (step % cfg.log_interval == 0) {
      lines.push_back(csv_row(row));
      if (progress) *progress << "step " << step << " loss " << row.losses.total << '\n';
    }
    if (cfg.checkpoint_interval && (step + 1) % cfg.checkpoint_interval == 0)
      save_checkpoint(make_checkpoint(model, rep.state), out_dir / ("ckpt_" + std::to_string(step + 1) + ".mmck"));
  }

  std::string csv(kLossCsvHeader);
  csv += '\n';
  for (const auto& l : lines) csv += l + '\n';
  write_file_bytes(rep.loss_csv, csv);
  rep.checkpoint = out_dir / "checkpoint.mmck";
  save_checkpoint(make_checkpoint(model, rep.state), rep.checkpoint);
  return rep;
}

// ---- finetuning -----------------------------------------------------------

struct FinetuneConfig {
  AdamWHyper optim{1e-3, 0.9, 0.999, 1e-8, 0.05};
  std::size_t warmup_steps = 10;
  std::size_t total_steps = 200;
  std::size_t batch_size = 8;
  double val_fraction = 0.2;
  std::size_t eval_clips = 1;  // K temporal clips at inference (x3 spatial crops)
  std::uint64_t seed = 0;
  Precision precision = Precision::single;
  double init_std = 0.02;
};

struct FinetuneReport {
  double train_top1 = 0.0;
  AccuracyReport val;
  std::size_t n_train = 0;
  double final_loss = 0.0;
  std::vector<std::string> classes;
};

inline nlohmann::json to_json(const FinetuneReport& r) {
  return {{"top1", r.val.top1}, {"top5", r.val.top5}, {"n", r.val.n},
          {"train_top1", r.train_top1}, {"n_train", r.n_train}, {"final_loss", r.final_loss},
          {"classes", r.classes}};
}

// Copies encoder.* tensors from a pretrained checkpoint; decoder weights are dropped.
inline void load_encoder(const Model& model, ModelState& target, const Checkpoint& ck) {
  require_digest(ck, model.config());
  std::size_t loaded = 0;
  for (std::size_t i = 0; i < ck.state.names.size(); ++i) {
    const std::string& name = ck.state.names[i];
    if (!name.starts_with("encoder.")) continue;
    Tensor& dst = target.get(name);
    if (dst.shape() != ck.state.params[i].shape())
      throw ConfigError("checkpoint tensor '" + name + "' has an incompatible shape");
    dst = ck.state.params[i];
    ++loaded;
  }
  if (loaded == 0) throw ConfigError("checkpoint has no encoder weights");
}

inline std::vector<std::string> class_list(const std::vector<LabeledClip>& data) {
  std::set<std::string> s;
  for (const auto& d : data) s.insert(d.label);
  return {s.begin(), s.end()};
}

inline std::size_t class_index(const std::vector<std::string>& classes, const std::string& label) {
  const auto it = std::lower_bound(classes.begin(), classes.end(), label);
  if (it == classes.end() || *it != label) throw ConfigError("unknown label '" + label + "'");
  return static_cast<std::size_t>(it - classes.begin());
}

inline std::vector<std::vector<double>> evaluate_logits(const Model& model, const ModelState& state,
                                                        const std::vector<LabeledClip>& data, std::size_t begin,
                                                        std::size_t end, const MultiviewConfig& mv, CubeSize cube,
                                                        std::size_t threads = 1) {
  std::vector<std::vector<double>> out(end - begin);
  parallel_for(end - begin, threads, [&](std::size_t i) {
    out[i] = multiview_logits(model, state, data[begin + i].clip, mv, cube);
  });
  return out;
}

// Encoder (optionally initialized from `pretrained`) plus classifier trained with
// cross-entropy on the first (1 - val_fraction) of the samples; top-1 reported on both splits.
inline FinetuneReport run_finetune(const Model& model, const std::vector<LabeledClip>& data,
                                   const std::optional<Checkpoint>& pretrained, const FinetuneConfig& cfg,
                                   const SamplingConfig& sampling, std::size_t threads = 1,
                                   std::ostream* progress = nullptr, ModelState* final_state = nullptr) {
  FinetuneReport rep;
  rep.classes = class_list(data);
  if (rep.classes.size() < 2) throw ConfigError("finetune: need at least two label classes");
  if (model.config().num_classes != rep.classes.size())
    throw ConfigError("finetune: model has " + std::to_string(model.config().num_classes) + " classes, dataset has " +
                      std::to_string(rep.classes.size()));
  if (cfg.warmup_steps > cfg.total_steps || cfg.batch_size == 0)
    throw ConfigError("finetune: invalid step configuration");
  if (!(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0)) throw ConfigError("finetune: val_fraction must lie in (0, 1)");
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.val_fraction * static_cast<double>(data.size()))));
  if (n_val >= data.size()) throw ConfigError("finetune: dataset too small for a train/val split");
  rep.n_train = data.size() - n_val;

  if (!(cfg.init_std > 0.0)) throw ConfigError("finetune: init_std must be > 0");
  TrainState state = init_train_state(model, cfg.seed, cfg.precision, cfg.init_std);
  if (pretrained) load_encoder(model, state.model, *pretrained);

  TrainConfig sched;
  sched.optim = cfg.optim;
  sched.warmup_steps = cfg.warmup_steps;
  sched.total_steps = cfg.total_steps;

  std::vector<std::size_t> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = class_index(rep.classes, data[i].label);

  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    Tape tape;
    const auto p = model.bind(tape, state.model);
    std::optional<Var> total;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const std::size_t idx = sample_index(rep.n_train, step, cfg.batch_size, i, data_seed(cfg.seed));
      const Clip clip = sample_training_clip(data[idx].clip, sampling, derive_seed(data_seed(cfg.seed), {0xf1, step, i}));
      Var ce = ad::cross_entropy(model.classify(tape, p, clip, sampling.cube), labels[idx]);
      total = total ? ad::add(*total, ce) : ce;
    }
    Var loss = ad::scale(*total, 1.0 / static_cast<double>(cfg.batch_size));
    tape.backward(loss);
    rep.final_loss = tape.value(loss).item();
    std::vector<Tensor> grads;
    for (Var v : p) grads.push_back(tape.grad(v));
    apply_update(model, state, grads, lr_at(step, sched), cfg.optim, cfg.precision);
    if (progress && step % 50 == 0) *progress << "finetune step " << step << " loss " << rep.final_loss << '\n';
  }

  MultiviewConfig mv;
  mv.clips = cfg.eval_clips;
  mv.frames = sampling.frames;
  mv.stride = sampling.stride;
  mv.out_h = sampling.out_h;
  mv.out_w = sampling.out_w;
  const auto train_logits = evaluate_logits(model, state.model, data, 0, rep.n_train, mv, sampling.cube, threads);
  rep.train_top1 = topk_accuracy(train_logits, {labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(rep.n_train)}, 1);
  const auto val_logits = evaluate_logits(model, state.model, data, rep.n_train, data.size(), mv, sampling.cube, threads);
  rep.val = accuracy_report(val_logits, {labels.begin() + static_cast<std::ptrdiff_t>(rep.n_train), labels.end()});
  if (final_state) *final_state = state.model;
  return rep;
}

}  // namespace mmae
