#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "motionmae/checkpoint.hpp"
#include "motionmae/training.hpp"

using namespace mmae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("motionmae_test_training_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

const TokenGrid kGrid = make_grid(4, 8, 8, 1, {2, 4});

ModelConfig tiny_config(TargetKind kind = TargetKind::both) {
  return make_model_config(kGrid, {1, 8, 2, 2, 0}, {1, 8, 2, 2}, kind, 0);
}

TrainConfig tiny_train(std::size_t total = 10) {
  TrainConfig c;
  c.optim.lr = 1e-3;
  c.warmup_steps = 2;
  c.total_steps = total;
  c.batch_size = 2;
  c.mask_ratio = 0.75;
  c.seed = 4;
  return c;
}

SamplingConfig tiny_sampling() {
  SamplingConfig s;
  s.frames = 4;
  s.cube = {2, 4};
  return s;
}

std::vector<Clip> tiny_videos(std::size_t n = 6) {
  std::vector<Clip> out;
  for (auto& s : synthesize_dataset(n, 6, 8, 8, 1, {}, 21)) out.push_back(s.clip);
  return out;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::istringstream in(read_file_bytes(p));
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(MaskedLoss, WorkedExampleAndLocality) {
  Tensor pred({4, 2}, 1e3);  // visible rows carry values that must not matter
  for (std::size_t j = 0; j < 2; ++j) pred(1, j) = pred(3, j) = 0.3;
  const Mask mask = mask_from_indices(4, {1, 3});
  EXPECT_NEAR(masked_loss(pred, Tensor({2, 2}), mask, LossKind::mse), 0.09, 1e-15);
  EXPECT_NEAR(masked_loss(pred, Tensor({2, 2}), mask, LossKind::l1), 0.3, 1e-15);
  pred(0, 0) = -7.0;
  EXPECT_NEAR(masked_loss(pred, Tensor({2, 2}), mask, LossKind::mse), 0.09, 1e-15);
  EXPECT_THROW(masked_loss(pred, Tensor({2, 2}), mask_from_indices(4, {}), LossKind::mse), ConfigError);
  EXPECT_THROW(masked_loss(pred, Tensor({3, 2}), mask, LossKind::mse), ConfigError);
}

TEST(MaskedLoss, MatchesLoopOracle) {
  Rng rng(3);
  Tensor pred({8, 5}), target({3, 5});
  for (double& v : pred.data()) v = uniform(rng, -1, 1);
  for (double& v : target.data()) v = uniform(rng, -1, 1);
  const std::vector<std::size_t> rows{0, 4, 6};
  double mse = 0.0, l1 = 0.0, sl1 = 0.0;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 5; ++j) {
      const double d = pred(rows[r], j) - target(r, j);
      mse += d * d / 15.0;
      l1 += std::abs(d) / 15.0;
      sl1 += (std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5) / 15.0;
    }
  const Mask mask = mask_from_indices(8, rows);
  EXPECT_NEAR(masked_loss(pred, target, mask, LossKind::mse), mse, 1e-14);
  EXPECT_NEAR(masked_loss(pred, target, mask, LossKind::l1), l1, 1e-14);
  EXPECT_NEAR(masked_loss(pred, target, mask, LossKind::smooth_l1), sl1, 1e-14);
}

TEST(TotalLoss, WeightingAndAbsentTerms) {
  Tape tape;
  const Var s = tape.leaf(Tensor::scalar(0.5));
  const Var t = tape.leaf(Tensor::scalar(2.0));
  EXPECT_DOUBLE_EQ(ad::val(total_loss(s, t, 1.0)).item(), 2.5);
  EXPECT_DOUBLE_EQ(ad::val(total_loss(s, t, 0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(ad::val(total_loss(s, t, 0.25)).item(), 1.0);
  EXPECT_DOUBLE_EQ(ad::val(total_loss(s, std::nullopt, 3.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(ad::val(total_loss(std::nullopt, t, 3.0)).item(), 6.0);
  EXPECT_THROW(total_loss(std::nullopt, std::nullopt, 1.0), ConfigError);
}

TEST(Schedule, WarmupThenCosine) {
  TrainConfig c;
  c.optim.lr = 1.0;
  c.warmup_steps = 5;
  c.total_steps = 105;
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(1, c), 0.2);
  EXPECT_DOUBLE_EQ(lr_at(5, c), 1.0);
  EXPECT_NEAR(lr_at(55, c), 0.5, 1e-15);
  EXPECT_NEAR(lr_at(105, c), 0.0, 1e-15);
  for (std::size_t s = 5; s < 105; ++s) EXPECT_GE(lr_at(s, c), lr_at(s + 1, c));
  EXPECT_THROW(lr_at(106, c), ConfigError);
}

TEST(Pretrain, TenStepsAreDeterministic) {
  const Model model(tiny_config());
  const TrainConfig cfg = tiny_train();
  const auto videos = tiny_videos();
  auto run = [&] {
    TrainState s = init_train_state(model, cfg.seed, cfg.precision);
    std::vector<double> losses;
    for (std::size_t step = 0; step < 10; ++step)
      losses.push_back(pretrain_step(model, s, pretrain_batch(videos, step, cfg, tiny_sampling()), cfg, {2, 4}).total);
    return std::make_pair(s.model.params, losses);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Pretrain, BatchGradientIsMeanOfPerClipGradients) {
  const Model model(tiny_config());
  const TrainConfig cfg = tiny_train();
  const ModelState s = model.init(8, 0.2);
  const auto videos = tiny_videos(2);
  const std::vector<Clip> clips{sample_clip(videos[0], 4, 1, 0), sample_clip(videos[1], 4, 1, 2)};
  const auto masks = pretrain_masks(kGrid, 0, 2, cfg);
  const LossGrad both = pretrain_gradients(model, s, clips, masks, cfg, {2, 4});
  const LossGrad g0 = pretrain_gradients(model, s, {clips[0]}, {masks[0]}, cfg, {2, 4});
  const LossGrad g1 = pretrain_gradients(model, s, {clips[1]}, {masks[1]}, cfg, {2, 4});
  EXPECT_NEAR(both.losses.total, 0.5 * (g0.losses.total + g1.losses.total), 1e-14);
  EXPECT_NEAR(*both.losses.time, 0.5 * (*g0.losses.time + *g1.losses.time), 1e-14);
  for (std::size_t i = 0; i < both.grads.size(); ++i)
    for (std::size_t j = 0; j < both.grads[i].numel(); ++j)
      ASSERT_NEAR(both.grads[i][j], 0.5 * (g0.grads[i][j] + g1.grads[i][j]), 1e-13);
}

TEST(Pretrain, MaskSeedOverrideChangesOnlyMasks) {
  TrainConfig a = tiny_train();
  TrainConfig b = a;
  b.mask_seed_override = 999;
  const auto ma = pretrain_masks(kGrid, 3, 2, a), mb = pretrain_masks(kGrid, 3, 2, b);
  EXPECT_NE(ma[0].bits, mb[0].bits);
  const auto videos = tiny_videos();
  EXPECT_EQ(pretrain_batch(videos, 3, a, tiny_sampling()), pretrain_batch(videos, 3, b, tiny_sampling()));
}

TEST(Pretrain, EpochVisitsEverySampleOnce) {
  for (std::size_t epoch = 0; epoch < 3; ++epoch) {
    std::vector<int> seen(10, 0);
    for (std::size_t q = 0; q < 10; ++q) ++seen[sample_index(10, epoch * 5 + q / 2, 2, q % 2, 17)];
    for (int s : seen) EXPECT_EQ(s, 1);
  }
}

TEST(Pretrain, CsvRowsAndFrameOnlyColumns) {
  const Model model(tiny_config(TargetKind::frame));
  TrainConfig cfg = tiny_train(7);
  cfg.target.kind = TargetKind::frame;
  cfg.log_interval = 3;
  const fs::path dir = temp_dir("csv");
  const auto rep = run_pretrain(model, tiny_videos(), cfg, tiny_sampling(), dir);
  const auto lines = lines_of(rep.loss_csv);
  ASSERT_EQ(lines.size(), 1u + 3u);  // ceil(7 / 3) rows
  EXPECT_EQ(lines[0], "step,loss,loss_space,loss_time");
  for (std::size_t i = 1; i < lines.size(); ++i) {
    EXPECT_EQ(lines[i].back(), ',') << lines[i];
    EXPECT_EQ(lines[i].substr(0, lines[i].find(',')), std::to_string((i - 1) * 3));
  }
  EXPECT_EQ(rep.history.size(), 7u);
  EXPECT_TRUE(fs::exists(rep.checkpoint));
}

TEST(Pretrain, ResumeIsBitExact) {
  const Model model(tiny_config());
  TrainConfig cfg = tiny_train(6);
  cfg.checkpoint_interval = 3;
  const auto videos = tiny_videos();
  const fs::path full = temp_dir("full"), part = temp_dir("part");
  const auto a = run_pretrain(model, videos, cfg, tiny_sampling(), full);

  fs::copy_file(full / "ckpt_3.mmck", part / "ckpt_3.mmck");
  const auto ck = load_checkpoint(part / "ckpt_3.mmck");
  EXPECT_EQ(ck.step, 3u);
  const auto b = run_pretrain(model, videos, cfg, tiny_sampling(), part, restore_train_state(model, ck));
  EXPECT_EQ(b.history.size(), 3u);
  EXPECT_EQ(a.state.model.params, b.state.model.params);
  EXPECT_EQ(a.state.optim.m, b.state.optim.m);
  EXPECT_EQ(a.state.optim.v, b.state.optim.v);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.history[3 + i].losses.total, b.history[i].losses.total);
  EXPECT_EQ(read_file_bytes(a.checkpoint), read_file_bytes(b.checkpoint));
}

TEST(Checkpoint, RoundTripAndCorruption) {
  const Model model(tiny_config());
  TrainState s = init_train_state(model, 2, Precision::single);
  s.optim.t = 5;
  const std::string bytes = encode_checkpoint(make_checkpoint(model, s));
  const Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.step, 5u);
  EXPECT_EQ(back.state.names, s.model.names);
  EXPECT_EQ(back.state.params, s.model.params);
  ASSERT_TRUE(back.optim.has_value());
  EXPECT_EQ(back.optim->m, s.optim.m);

  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(flipped), DigestError);
  std::string ver = bytes;
  ver[4] = 7;
  EXPECT_THROW(decode_checkpoint(ver), VersionError);
  std::string magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), BadMagicError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), TruncatedError);

  const Model other(make_model_config(kGrid, {2, 8, 2, 2, 0}, {1, 8, 2, 2}, TargetKind::both, 0));
  EXPECT_THROW(restore_train_state(other, back), DigestError);
}

TEST(Checkpoint, DoublePrecisionStateIsRoundedOnSave) {
  const Model model(tiny_config());
  TrainState s = init_train_state(model, 2, Precision::double_);
  const Checkpoint back = decode_checkpoint(encode_checkpoint(make_checkpoint(model, s)));
  for (std::size_t i = 0; i < s.model.params.size(); ++i)
    for (std::size_t j = 0; j < s.model.params[i].numel(); ++j)
      EXPECT_EQ(back.state.params[i][j], static_cast<double>(static_cast<float>(s.model.params[i][j])));
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  for (std::size_t c : {2, 4, 7}) {
    Tape tape;
    const Var logits = tape.leaf(Tensor({1, c}, 0.25));
    EXPECT_NEAR(ad::val(ad::cross_entropy(logits, c - 1)).item(), std::log(static_cast<double>(c)), 1e-15);
  }
}

TEST(Finetune, EncoderLoadsExactlyAndAccuracyIsBounded) {
  const Model pre(tiny_config());
  TrainState ps = init_train_state(pre, 6, Precision::single);
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(make_checkpoint(pre, ps)));

  const auto data = synthesize_dataset(12, 6, 8, 8, 1, {}, 5);
  const auto classes = class_list(data);
  const Model clf(make_classifier_config(kGrid, {1, 8, 2, 2, 0}, {1, 8, 2, 2}, classes.size()));
  ModelState target = init_train_state(clf, 99, Precision::single).model;
  const Tensor head_before = target.get("classifier.weight");
  load_encoder(clf, target, ck);
  for (std::size_t i = 0; i < target.names.size(); ++i)
    if (target.names[i].starts_with("encoder.")) {
      EXPECT_EQ(target.params[i], ps.model.get(target.names[i])) << target.names[i];
    }
  EXPECT_EQ(target.get("classifier.weight"), head_before);

  FinetuneConfig fc;
  fc.total_steps = 3;
  fc.warmup_steps = 1;
  fc.batch_size = 2;
  fc.val_fraction = 0.25;
  const FinetuneReport rep = run_finetune(clf, data, ck, fc, tiny_sampling());
  EXPECT_EQ(rep.n_train, 9u);
  EXPECT_EQ(rep.val.n, 3u);
  EXPECT_GE(rep.val.top1, 0.0);
  EXPECT_LE(rep.val.top1, 1.0);
  EXPECT_GE(rep.train_top1, 0.0);
  EXPECT_LE(rep.train_top1, 1.0);
  EXPECT_LE(rep.val.top1, rep.val.top5);
  EXPECT_TRUE(std::isfinite(rep.final_loss));

  const Model wide(make_model_config(kGrid, {1, 16, 2, 2, 0}, {1, 8, 2, 2}, TargetKind::both, 0));
  const Checkpoint bad = make_checkpoint(wide, init_train_state(wide, 1, Precision::single));
  EXPECT_THROW(run_finetune(clf, data, bad, fc, tiny_sampling()), DigestError);
}
