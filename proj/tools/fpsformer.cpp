#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "commands.hpp"

namespace {

using namespace fps;
namespace fs = std::filesystem;

void progress(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

void print_metrics(const char* label, const ImageMetrics& m) {
  std::printf("%s: nmse %.6g  psnr %.3f dB  ssim %.4f\n", label, m.nmse, m.psnr_db, m.ssim);
}

int fail(int code, const std::string& msg) {
  std::fprintf(stderr, "error: %s\n", msg.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"FPS-Former MRI reconstruction toolkit"};
  cli.require_subcommand(1);
  cli.set_version_flag("--version", app::kToolVersion);

  app::GenDataOptions gen;
  std::string mask_name = "cartesian";
  auto* gen_cmd = cli.add_subcommand("gen-data", "Generate a synthetic phantom dataset (train/val/test)");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.count, "Training images")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side, a power of two")->capture_default_str();
  gen_cmd->add_option("--mask", mask_name, "Sampling pattern")
      ->check(CLI::IsMember({"cartesian", "radial", "random"}))
      ->capture_default_str();
  gen_cmd->add_option("--af", gen.af, "Acceleration factor")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--val-count", gen.val_count, "Validation images (default count/10)");
  gen_cmd->add_option("--test-count", gen.test_count, "Test images (default count/4)");

  app::TrainOptions tr;
  auto* train_cmd = cli.add_subcommand("train", "Train a model");
  train_cmd->add_option("--data", tr.data, "Dataset root from gen-data")->required();
  train_cmd->add_option("--out", tr.out, "Run directory")->required();
  train_cmd->add_option("--config", tr.config, "key = value config file (defaults when omitted)");
  train_cmd->add_option("--ablate", tr.ablate, "Remove a module: fmam, spam, sdfn, hefr (repeatable)")
      ->check(CLI::IsMember({"fmam", "spam", "sdfn", "hefr"}));

  app::EvalOptions ev;
  auto* eval_cmd = cli.add_subcommand("eval", "Score a checkpoint on the test split");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset root or split directory")->required();
  eval_cmd->add_option("--out", ev.out, "Metrics CSV")->required();
  eval_cmd->add_option("--zero-filled-out", ev.zero_filled_out, "Also write metrics of the zero-filled inputs");

  app::ReconstructOptions rc;
  auto* rec_cmd = cli.add_subcommand("reconstruct", "Reconstruct one image and render PNGs");
  rec_cmd->add_option("--ckpt", rc.ckpt, "Checkpoint")->required();
  rec_cmd->add_option("--input", rc.input, "Fully sampled [1,2,S,S] FPT1 image")->required();
  rec_cmd->add_option("--mask", rc.mask, "[1,1,S,S] FPT1 sampling mask")->required();
  rec_cmd->add_option("--out", rc.out, "Output prefix")->required();
  rec_cmd->add_option("--cutoff", rc.cutoff, "High-pass cutoff radius (default S/8)");

  app::AnalyzeOptions an;
  auto* freq_cmd = cli.add_subcommand("analyze-freq", "Radial spectra of two models' last encoder features");
  freq_cmd->add_option("--ckpt-a", an.ckpt_a, "First checkpoint")->required();
  freq_cmd->add_option("--ckpt-b", an.ckpt_b, "Second checkpoint")->required();
  freq_cmd->add_option("--data", an.data, "Dataset root or split directory")->required();
  freq_cmd->add_option("--out", an.out, "Spectra CSV")->required();
  freq_cmd->add_option("--probes", an.probes, "Test images to average over")->capture_default_str();

  app::AblateOptions ab;
  auto* abl_cmd = cli.add_subcommand("ablate", "Module-removal study over several seeds");
  abl_cmd->add_option("--data", ab.data, "Dataset root")->required();
  abl_cmd->add_option("--out", ab.out, "Output directory")->required();
  abl_cmd->add_option("--seeds", ab.seeds, "Seeds per variant")->capture_default_str();
  abl_cmd->add_option("--config", ab.config, "Base config file");

  auto* self_cmd = cli.add_subcommand("selftest", "Run the invariant and oracle suite");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_cmd) {
      gen.kind = parse_mask_kind(mask_name);
      app::gen_data(gen);
    } else if (*train_cmd) {
      const TrainLog log = app::train_cmd(tr, progress);
      std::printf("%s: best val psnr %.3f dB at step %d\n", log.variant.c_str(), log.best_psnr, log.best_step);
    } else if (*eval_cmd) {
      const EvalResult r = app::eval_cmd(ev);
      print_metrics("recon", r.recon.mean);
      print_metrics("zero-filled", r.zero_filled.mean);
    } else if (*rec_cmd) {
      print_metrics("recon", app::reconstruct_cmd(rc));
    } else if (*freq_cmd) {
      app::analyze_freq_cmd(an);
    } else if (*abl_cmd) {
      std::fputs(app::ablation_csv(app::ablate_cmd(ab, progress)).c_str(), stdout);
    } else if (*self_cmd) {
      return app::selftest_cmd(stdout) ? 0 : 1;
    }
  } catch (const IoError& e) {
    return fail(2, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(2, e.what());
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError
    return fail(1, e.what());
  } catch (const TrainingError& e) {
    return fail(1, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return 0;
}
