#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "motionmae/commands.hpp"

namespace {

std::size_t thread_cap() {
  const char* env = std::getenv("MOTIONMAE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(env, &end, 10);
  if (*end != '\0' || n == 0) throw mmae::ConfigError("MOTIONMAE_THREADS must be a positive integer");
  return n;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked video autoencoder with frame and motion reconstruction heads"};
  app.footer("\nExit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error, 4 numerical error.\n"
             "MOTIONMAE_THREADS caps evaluation worker threads (default 1).\n\n" +
             mmae::config_reference());
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::size_t> count;
  std::string out_dir;
  std::string resume;
  std::string init = "none";
  std::string ratios = "0.9,0.95";
  std::string axis;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic moving-square dataset");
  gen->add_option("--config", config_path, "run configuration (JSON)")->required();
  gen->add_option("--count", count, "number of clips (default: data.count)");
  gen->add_option("--out", out_dir, "output dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "masked pretraining; prints final_loss=<value>");
  pre->add_option("--config", config_path, "run configuration (JSON)")->required();
  pre->add_option("--resume", resume, "checkpoint to resume from");

  auto* ft = app.add_subcommand("finetune", "supervised finetuning; prints an accuracy JSON");
  ft->add_option("--config", config_path, "run configuration (JSON)")->required();
  ft->add_option("--init", init, "pretrained checkpoint or 'none'")->capture_default_str();

  auto* rec = app.add_subcommand("reconstruct", "render reconstructions of the first clip as PPM files");
  rec->add_option("--config", config_path, "run configuration (JSON)")->required();
  rec->add_option("--init", init, "checkpoint or 'none'")->capture_default_str();
  rec->add_option("--ratio", ratios, "comma-separated masking ratios")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive and a tiny model");
  gc->add_option("--config", config_path, "accepted for uniformity; unused");

  auto* abl = app.add_subcommand("ablate", "pretrain + finetune per value of one axis; prints setting,top1");
  abl->add_option("--config", config_path, "run configuration (JSON)")->required();
  abl->add_option("--axis", axis, "target_kind | gap | loss_kind | ratio | decoder")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? mmae::kOk : mmae::kConfigError;
  }

  return mmae::guarded(std::cerr, [&]() -> int {
    mmae::CommandContext ctx{std::cout, std::cerr, thread_cap()};
    if (gc->parsed()) return mmae::cmd_gradcheck(ctx);
    const mmae::RunConfig rc = mmae::load_run_config(config_path);
    if (gen->parsed()) return mmae::cmd_gen_data(rc, count, out_dir, ctx);
    if (pre->parsed()) return mmae::cmd_pretrain(rc, resume.empty() ? std::nullopt : std::optional<std::filesystem::path>(resume), ctx);
    if (ft->parsed()) return mmae::cmd_finetune(rc, init, ctx);
    if (rec->parsed()) return mmae::cmd_reconstruct(rc, init, mmae::parse_ratio_list(ratios), ctx);
    return mmae::cmd_ablate(rc, axis, ctx);
  });
}
