#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("motionmae_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  Result run(const std::string& args) const {
    const char* bin = std::getenv("MOTIONMAE_BIN");
    if (!bin) bin = MOTIONMAE_BIN;
    const fs::path out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = std::string("'") + bin + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  // Small synthetic run that finishes in well under a second per command.
  json base_config() const {
    return json{{"seed", 3},
                {"out_dir", (dir_ / "run").string()},
                {"data", {{"source", "synthetic"}, {"count", 12}, {"video_frames", 8}, {"height", 8}, {"width", 8}, {"frames", 4}}},
                {"mask", {{"ratio", 0.75}}},
                {"model", {{"preset", "tiny"}, {"encoder", {{"depth", 1}, {"dim", 8}}}, {"decoder", {{"dim", 8}}}}},
                {"train", {{"total_steps", 4}, {"warmup_steps", 1}, {"batch_size", 2}, {"lr", 1e-3}}},
                {"finetune", {{"total_steps", 3}, {"warmup_steps", 1}, {"batch_size", 2}, {"val_fraction", 0.25}}}};
  }

  fs::path write_config(const json& j, const std::string& name = "config.json") const {
    const fs::path p = dir_ / name;
    std::ofstream(p) << j.dump(2);
    return p;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, GenDataWritesCountFilesDeterministically) {
  const fs::path cfg = write_config(base_config());
  ASSERT_EQ(run("gen-data --config " + cfg.string() + " --count 8 --out " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run("gen-data --config " + cfg.string() + " --count 8 --out " + (dir_ / "b").string()).code, 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir_ / "a" / "clips")) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(dir_ / "b" / "clips" / e.path().filename()));
  }
  EXPECT_EQ(files, 8u);
  EXPECT_EQ(lines(slurp(dir_ / "a" / "labels.tsv")).size(), 8u);
  EXPECT_EQ(slurp(dir_ / "a" / "labels.tsv"), slurp(dir_ / "b" / "labels.tsv"));
}

TEST_F(Cli, ConfigErrorsExitTwoAndNameTheField) {
  json j = base_config();
  j["mask"]["strategy"] = "diagonal";
  Result r = run("pretrain --config " + write_config(j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("mask.strategy"), std::string::npos) << r.err;

  j = base_config();
  j["train"]["bogus"] = 1;
  r = run("pretrain --config " + write_config(j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("train.bogus"), std::string::npos) << r.err;

  j = base_config();
  j["model"]["init_std"] = -0.1;
  r = run("pretrain --config " + write_config(j).string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("model.init_std"), std::string::npos) << r.err;

  EXPECT_EQ(run("pretrain --config " + write_config(base_config()).string() + " --no-such-flag").code, 2);
  EXPECT_EQ(run("pretrain --config " + (dir_ / "missing.json").string()).code, 3);
}

TEST_F(Cli, PretrainPrintsFinalLossMatchingCsv) {
  const Result r = run("pretrain --config " + write_config(base_config()).string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto pos = r.out.find("final_loss=");
  ASSERT_NE(pos, std::string::npos);
  const double final_loss = std::stod(r.out.substr(pos + 11));
  EXPECT_TRUE(std::isfinite(final_loss));
  const auto csv = lines(slurp(dir_ / "run" / "loss.csv"));
  ASSERT_EQ(csv.size(), 5u);
  const std::string last = csv.back();
  EXPECT_EQ(last.substr(0, 2), "3,");
  EXPECT_DOUBLE_EQ(std::stod(last.substr(2)), final_loss);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "checkpoint.mmck"));
}

TEST_F(Cli, FrameOnlyCsvLeavesMotionColumnEmpty) {
  json j = base_config();
  j["targets"]["kind"] = "frame";
  ASSERT_EQ(run("pretrain --config " + write_config(j).string()).code, 0);
  for (const auto& l : lines(slurp(dir_ / "run" / "loss.csv"))) EXPECT_EQ(l.back(), l[0] == 's' ? 'e' : ',') << l;
}

TEST_F(Cli, ResumeReproducesUninterruptedRun) {
  json j = base_config();
  j["train"]["checkpoint_interval"] = 2;
  j["out_dir"] = (dir_ / "full").string();
  const Result full = run("pretrain --config " + write_config(j, "full.json").string());
  ASSERT_EQ(full.code, 0) << full.err;
  j["out_dir"] = (dir_ / "part").string();
  const fs::path part_cfg = write_config(j, "part.json");
  const Result part = run("pretrain --config " + part_cfg.string() + " --resume " + (dir_ / "full" / "ckpt_2.mmck").string());
  ASSERT_EQ(part.code, 0) << part.err;
  EXPECT_EQ(full.out.substr(full.out.find("final_loss=")), part.out.substr(part.out.find("final_loss=")));
  EXPECT_EQ(slurp(dir_ / "full" / "checkpoint.mmck"), slurp(dir_ / "part" / "checkpoint.mmck"));
}

TEST_F(Cli, MissingDatasetDirectoryExitsThree) {
  json j = base_config();
  j["data"]["source"] = "dir";
  j["data"]["dir"] = (dir_ / "nowhere").string();
  EXPECT_EQ(run("pretrain --config " + write_config(j).string()).code, 3);
}

TEST_F(Cli, DatasetDirectoryIsUsable) {
  const fs::path cfg = write_config(base_config());
  ASSERT_EQ(run("gen-data --config " + cfg.string() + " --out " + (dir_ / "ds").string()).code, 0);
  json j = base_config();
  j["data"]["source"] = "dir";
  j["data"]["dir"] = (dir_ / "ds").string();
  const Result r = run("pretrain --config " + write_config(j, "dir.json").string());
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST_F(Cli, FinetuneEmitsAccuracyJson) {
  const Result r = run("finetune --config " + write_config(base_config()).string() + " --init none");
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = json::parse(lines(r.out).back());
  ASSERT_TRUE(j.contains("top1"));
  EXPECT_GE(j["top1"].get<double>(), 0.0);
  EXPECT_LE(j["top1"].get<double>(), 1.0);
  EXPECT_EQ(j["n"], 3);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "finetune.json"));
}

TEST_F(Cli, FinetuneFromPretrainedAndIncompatibleCheckpoint) {
  const fs::path cfg = write_config(base_config());
  ASSERT_EQ(run("pretrain --config " + cfg.string()).code, 0);
  const std::string ck = (dir_ / "run" / "checkpoint.mmck").string();
  EXPECT_EQ(run("finetune --config " + cfg.string() + " --init " + ck).code, 0);

  json wide = base_config();
  wide["model"]["encoder"]["dim"] = 16;
  const Result r = run("finetune --config " + write_config(wide, "wide.json").string() + " --init " + ck);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("digest"), std::string::npos) << r.err;
}

TEST_F(Cli, ReconstructWritesOnePpmPerRatio) {
  const fs::path cfg = write_config(base_config());
  const Result r = run("reconstruct --config " + cfg.string() + " --ratio 0.9,0.95");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* name : {"recon_0.90.ppm", "recon_0.95.ppm"}) {
    const std::string bytes = slurp(dir_ / "run" / name);
    // 4 rows of 8x8 frames, 4 frames wide.
    ASSERT_GE(bytes.size(), 13u) << name;
    EXPECT_EQ(bytes.substr(0, 13), "P6\n32 32\n255\n");
    EXPECT_EQ(bytes.size(), std::string("P6\n32 32\n255\n").size() + 3u * 32 * 32);
  }
  EXPECT_EQ(lines(r.out).size(), 2u);
  EXPECT_EQ(run("reconstruct --config " + cfg.string() + " --ratio 1.0").code, 2);
  EXPECT_EQ(run("reconstruct --config " + cfg.string() + " --ratio 0.5,abc").code, 2);
}

TEST_F(Cli, GradcheckPasses) {
  const Result r = run("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("end_to_end"), std::string::npos);
}

TEST_F(Cli, AblateAxesAndErrors) {
  json j = base_config();
  EXPECT_EQ(run("ablate --config " + write_config(j).string() + " --axis colour").code, 2);
  j["ablate"]["gap"] = {2, 1};
  const Result r = run("ablate --config " + write_config(j).string() + " --axis gap");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines(r.out);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "setting,top1");
  EXPECT_EQ(rows[1].substr(0, 5), "gap1,");
  EXPECT_EQ(rows[2].substr(0, 5), "gap2,");
  EXPECT_EQ(slurp(dir_ / "run" / "ablate_gap.csv"), r.out);
}
