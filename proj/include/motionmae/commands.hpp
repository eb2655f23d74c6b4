#pragma once

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "motionmae/checkpoint.hpp"
#include "motionmae/config.hpp"
#include "motionmae/diagnostics.hpp"
#include "motionmae/error.hpp"
#include "motionmae/evalviz.hpp"
#include "motionmae/model.hpp"
#include "motionmae/training.hpp"
#include "motionmae/video.hpp"

namespace mmae {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3, kNumericalError = 4 };

struct CommandContext {
  std::ostream& out;
  std::ostream& err;
  std::size_t threads = 1;
};

// Maps library exceptions onto the stable exit codes. A checkpoint digest
// mismatch is a configuration problem, not an I/O one.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const DigestError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kCheckFailed;
  }
}

inline std::vector<LabeledClip> load_samples(const RunConfig& rc) {
  if (rc.data.source == "dir") return read_dataset(rc.data.dir);
  return synthesize_dataset(rc.data.count, rc.data.video_frames, rc.data.height, rc.data.width, rc.data.channels,
                            rc.data.synthetic, data_seed(rc.seed));
}

inline std::vector<Clip> clips_of(const std::vector<LabeledClip>& samples) {
  std::vector<Clip> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.clip);
  return out;
}

inline int cmd_gen_data(const RunConfig& rc, std::optional<std::size_t> count, const std::filesystem::path& out_dir,
                        CommandContext& ctx) {
  if (rc.data.source != "synthetic") throw ConfigError("data.source: gen-data requires 'synthetic'");
  RunConfig local = rc;
  if (count) local.data.count = *count;
  if (local.data.count == 0) throw ConfigError("count: must be positive");
  const auto samples = load_samples(local);
  write_dataset(out_dir, samples);
  ctx.out << "wrote " << samples.size() << " clips to " << out_dir.string() << '\n';
  return kOk;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

inline int cmd_pretrain(const RunConfig& rc, const std::optional<std::filesystem::path>& resume, CommandContext& ctx) {
  const Model model(rc.pretrain_model());
  const auto videos = clips_of(load_samples(rc));
  std::optional<TrainState> start;
  if (resume) start = restore_train_state(model, load_checkpoint(*resume));
  if (start && start->step() >= rc.train.total_steps)
    throw ConfigError("resume: checkpoint step " + std::to_string(start->step()) + " is already at train.total_steps");
  const auto rep = run_pretrain(model, videos, rc.train, rc.data.sampling, rc.out_dir, std::move(start), &ctx.err);
  ctx.out << "checkpoint=" << rep.checkpoint.string() << '\n';
  ctx.out << "loss_csv=" << rep.loss_csv.string() << '\n';
  ctx.out << "final_loss=" << format_number(rep.history.back().losses.total) << '\n';
  return kOk;
}

inline std::optional<Checkpoint> load_init(const std::string& init) {
  if (init == "none") return std::nullopt;
  return load_checkpoint(init);
}

inline FinetuneReport finetune_run(const RunConfig& rc, const std::vector<LabeledClip>& samples,
                                   const std::optional<Checkpoint>& init, std::size_t threads, std::ostream* progress) {
  const Model model(rc.finetune_model(class_list(samples).size()));
  return run_finetune(model, samples, init, rc.finetune, rc.data.sampling, threads, progress);
}

inline int cmd_finetune(const RunConfig& rc, const std::string& init, CommandContext& ctx) {
  const auto pretrained = load_init(init);
  const auto rep = finetune_run(rc, load_samples(rc), pretrained, ctx.threads, &ctx.err);
  const std::string text = to_json(rep).dump();
  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + rc.out_dir + "': " + ec.message());
  write_file_bytes(std::filesystem::path(rc.out_dir) / "finetune.json", text + "\n");
  ctx.out << text << '\n';
  return kOk;
}

inline std::vector<double> parse_ratio_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double r = 0.0;
    try {
      r = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("--ratio: '" + item + "' is not a number");
    }
    if (used != item.size()) throw ConfigError("--ratio: '" + item + "' is not a number");
    if (!(r >= 0.0 && r < 1.0)) throw ConfigError("--ratio: " + item + " must lie in [0, 1)");
    out.push_back(r);
  }
  if (out.empty()) throw ConfigError("--ratio: no ratios given");
  return out;
}

inline std::string ratio_tag(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", r);
  return buf;
}

// Deterministic evaluation clip: the first video, frames from 0.
inline Clip reconstruction_clip(const RunConfig& rc, const Clip& video) {
  Clip clip = sample_clip(video, rc.data.sampling.frames, rc.data.sampling.stride, 0);
  if (clip.height() != rc.clip_height() || clip.width() != rc.clip_width())
    clip = resize_bilinear(clip, rc.clip_height(), rc.clip_width());
  return clip;
}

inline std::vector<std::filesystem::path> reconstruct_files(const RunConfig& rc, const ModelState& state,
                                                            const Clip& clip, const std::vector<double>& ratios) {
  const Model model(rc.pretrain_model());
  model.check_state(state);
  const TokenGrid grid = rc.grid();
  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + rc.out_dir + "': " + ec.message());
  std::vector<std::filesystem::path> paths;
  const std::uint64_t base = rc.train.mask_seed_override.value_or(mask_seed(rc.seed));
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    const Mask mask = sample_mask(grid, ratios[i], rc.train.mask_strategy, derive_seed(base, {0x7ec, i}));
    Tape tape(false);
    const auto p = model.bind(tape, state, false);
    const auto out = model.forward_pretrain(tape, p, clip, mask, rc.model.cube);
    std::optional<Tensor> space, time;
    if (out.space) space = tape.value(*out.space);
    if (out.time) time = tape.value(*out.time);
    const auto path = std::filesystem::path(rc.out_dir) / ("recon_" + ratio_tag(ratios[i]) + ".ppm");
    render_reconstruction(clip, mask, space, time, grid, path, rc.train.target.normalize, rc.train.target.gap);
    paths.push_back(path);
  }
  return paths;
}

inline int cmd_reconstruct(const RunConfig& rc, const std::string& init, const std::vector<double>& ratios,
                           CommandContext& ctx) {
  const Model model(rc.pretrain_model());
  const auto ck = load_init(init);
  const ModelState state =
      ck ? restore_train_state(model, *ck).model : init_train_state(model, rc.seed, rc.train.precision, rc.train.init_std).model;
  const auto samples = load_samples(rc);
  if (samples.empty()) throw ConfigError("data: dataset is empty");
  for (const auto& path : reconstruct_files(rc, state, reconstruction_clip(rc, samples.front().clip), ratios))
    ctx.out << path.string() << '\n';
  return kOk;
}

inline int cmd_gradcheck(CommandContext& ctx) {
  bool ok = true;
  ctx.out << std::left << std::setw(32) << "op" << "max_rel_error" << '\n';
  for (const auto& line : run_gradcheck_suite()) {
    ctx.out << std::setw(32) << line.name << std::scientific << std::setprecision(3) << line.result.max_rel_error
            << std::defaultfloat << (line.passed ? "  ok" : "  FAIL") << '\n';
    if (!line.passed) {
      ok = false;
      ctx.err << "gradcheck failed: " << line.name << " (param " << line.result.worst_param << ", index "
              << line.result.worst_index << ", analytic " << line.result.analytic << ", numeric "
              << line.result.numeric << ")\n";
    }
  }
  return ok ? kOk : kCheckFailed;
}

struct AblationSetting {
  std::string name;
  RunConfig config;
};

inline std::vector<AblationSetting> ablation_settings(const RunConfig& rc, const std::string& axis) {
  std::vector<AblationSetting> out;
  auto add = [&](std::string name, auto&& edit) {
    RunConfig c = rc;
    edit(c);
    c.out_dir = (std::filesystem::path(rc.out_dir) / ("ablate_" + axis) / name).string();
    out.push_back({std::move(name), std::move(c)});
  };
  if (axis == "target_kind") {
    for (const auto& k : rc.ablate.target_kind)
      add(k, [&](RunConfig& c) { c.train.target.kind = parse_target_kind(k); });
  } else if (axis == "gap") {
    auto gaps = rc.ablate.gap;
    std::sort(gaps.begin(), gaps.end());
    for (std::size_t g : gaps) add("gap" + std::to_string(g), [&](RunConfig& c) { c.train.target.gap = g; });
  } else if (axis == "loss_kind") {
    for (const auto& k : rc.ablate.loss_kind) add(k, [&](RunConfig& c) { c.train.loss = parse_loss_kind(k); });
  } else if (axis == "ratio") {
    for (double r : rc.ablate.ratio) add("ratio" + ratio_tag(r), [&](RunConfig& c) { c.train.mask_ratio = r; });
  } else if (axis == "decoder") {
    for (const auto& d : rc.ablate.decoder)
      add(d.name(), [&](RunConfig& c) {
        c.model.decoder.depth = d.depth;
        c.model.decoder.embed_dim = d.dim;
      });
  } else {
    throw ConfigError("--axis: unknown axis '" + axis + "' (expected target_kind, gap, loss_kind, ratio or decoder)");
  }
  if (out.empty()) throw ConfigError("ablate." + axis + ": no values to sweep");
  for (auto& s : out) {
    validate(s.config.train);
    Model probe(s.config.pretrain_model());
  }
  return out;
}

// Pretrain then finetune per setting, sequentially; writes ablate_<axis>.csv.
inline int cmd_ablate(const RunConfig& rc, const std::string& axis, CommandContext& ctx) {
  const auto settings = ablation_settings(rc, axis);
  const auto samples = load_samples(rc);
  const auto videos = clips_of(samples);
  std::string csv = "setting,top1\n";
  for (const auto& s : settings) {
    const Model model(s.config.pretrain_model());
    const auto pre = run_pretrain(model, videos, s.config.train, s.config.data.sampling, s.config.out_dir, {}, nullptr);
    const auto ft = finetune_run(s.config, samples, load_checkpoint(pre.checkpoint), ctx.threads, nullptr);
    const std::string row = s.name + "," + format_number(ft.val.top1);
    ctx.err << "ablate " << axis << ' ' << row << '\n';
    csv += row + '\n';
  }
  std::error_code ec;
  std::filesystem::create_directories(rc.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + rc.out_dir + "': " + ec.message());
  write_file_bytes(std::filesystem::path(rc.out_dir) / ("ablate_" + axis + ".csv"), csv);
  ctx.out << csv;
  return kOk;
}

}  // namespace mmae
