// Acceptance runner: one PASS/FAIL line per criterion, exit 0 only if all pass.
//
//   fps_acceptance --work DIR [--only 1,2,...]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>

#include "commands.hpp"

namespace {

using namespace fps;
namespace fs = std::filesystem;

struct Outcome {
  bool passed = false;
  std::string detail;
};

void note(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome from_checks(const std::vector<CheckResult>& rs) {
  Outcome o{all_passed(rs), ""};
  int failed = 0;
  for (const auto& r : rs) {
    note(std::string(r.passed ? "ok   " : "FAIL ") + r.name + ": " + r.detail);
    if (!r.passed) {
      o.detail += (failed++ ? "; " : "") + r.name + " (" + r.detail + ")";
    }
  }
  if (o.passed) o.detail = std::to_string(rs.size()) + " checks passed";
  return o;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

// 200 train / 50 test phantoms at 32x32, Cartesian AF 4, default config.
Outcome reconstruction_regression(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path data = work / "data", run = work / "run";
  app::gen_data({data, 200, 32, MaskKind::cartesian, 4.0, 1, 20, 50});
  const TrainLog log = app::train_cmd({data, run, {}, {}}, note);
  const EvalResult r = app::eval_cmd({run / "model.ckpt", data, run / "metrics.csv", run / "zero_filled_metrics.csv"});
  const double secs = seconds_since(t0);
  const double dp = r.recon.mean.psnr_db - r.zero_filled.mean.psnr_db;
  const double ds = r.recon.mean.ssim - r.zero_filled.mean.ssim;
  const double first = log.mean_loss(0, 100), last = log.mean_loss(log.steps.size() - 100, 100);
  return {dp >= 3.0 && ds >= 0.03,
          fmt("test PSNR %.3f vs zero-filled %.3f dB (gain %+.3f, need >= 3)", r.recon.mean.psnr_db,
              r.zero_filled.mean.psnr_db, dp) +
              fmt(", SSIM %.4f vs %.4f (gain %+.4f, need >= 0.03)", r.recon.mean.ssim, r.zero_filled.mean.ssim, ds) +
              fmt(", smoothed loss %.4f -> %.4f, %.0f s on this machine", first, last, secs)};
}

// Reduced-scale ablation; the full model must not trail any removal by more than 0.1 dB.
constexpr const char* kAblationConfig =
    "iterations = 300\n"
    "batch = 4\n"
    "eval_every = 100\n"
    "log_every = 100\n"
    "seed = 1\n";

Outcome ablation_gate(const fs::path& work) {
  const fs::path data = work / "data", out = work / "ablation";
  app::gen_data({data, 64, 32, MaskKind::cartesian, 4.0, 2, 16, 24});
  write_file(work / "ablation.cfg", kAblationConfig);
  const auto rows = app::ablate_cmd({data, out, work / "ablation.cfg", 3}, note);
  const std::string table = app::ablation_csv(rows);
  std::istringstream in(table);
  for (std::string line; std::getline(in, line);) note(line);
  const double full = rows.back().mean.psnr_db;
  bool ok = rows.size() == 5;
  std::string detail = fmt("full %.3f dB;", full);
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    const double v = rows[i].mean.psnr_db;
    ok = ok && full >= v - 0.1;
    detail += " " + rows[i].name + fmt(" %.3f (%+.3f)", v, v - full);
  }
  return {ok, detail + " [3 seeds, 300 steps, 64 train / 24 test]"};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + FPS_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

// Two full gen-data -> train -> eval pipelines through the CLI binary.
Outcome determinism(const fs::path& work) {
  fs::create_directories(work);
  write_file(work / "tiny.cfg",
             "iterations = 12\nbatch = 2\neval_every = 6\nlog_every = 6\nseed = 5\nbase_channels = 8\n");
  std::vector<std::string> csv, ckpt;
  for (const char* tag : {"a", "b"}) {
    const fs::path dir = work / tag;
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string d = "\"" + (dir / "data").string() + "\"", r = "\"" + (dir / "run").string() + "\"";
    int rc = run_cli("gen-data --out " + d + " --count 8 --size 16 --val-count 2 --test-count 4 --seed 3", dir / "gen.log");
    if (rc == 0) rc = run_cli("train --data " + d + " --out " + r + " --config \"" + (work / "tiny.cfg").string() + "\"", dir / "train.log");
    if (rc == 0)
      rc = run_cli("eval --ckpt " + r + "/model.ckpt --data " + d + " --out " + r + "/metrics.csv", dir / "eval.log");
    if (rc != 0) return {false, std::string("pipeline ") + tag + " exited with status " + std::to_string(rc)};
    csv.push_back(read_file(dir / "run" / "metrics.csv"));
    ckpt.push_back(read_file(dir / "run" / "model.ckpt"));
  }
  const bool same = csv[0] == csv[1];
  return {same && !csv[0].empty(), std::string("metrics CSVs ") + (same ? "byte-identical" : "DIFFER") + " (" +
                                       std::to_string(csv[0].size()) + " bytes); checkpoints " +
                                       (ckpt[0] == ckpt[1] ? "identical" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Acceptance criteria runner"};
  fs::path work = "acceptance_work";
  std::vector<int> only;
  cli.add_option("--work", work, "Scratch directory");
  cli.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(cli, argc, argv);
  const std::set<int> selected(only.begin(), only.end());

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", [] { return from_checks(gradient_suite()); }},
      {2, "equivalence oracles", [] { return from_checks(equivalence_oracles()); }},
      {3, "structural identities", [] { return from_checks(structural_identities()); }},
      {4, "mask statistics", [] { return from_checks(mask_statistics(100, {32, 64})); }},
      {5, "desk-scale reconstruction regression", [&] { return reconstruction_regression(work / "c5"); }},
      {6, "ablation harness", [&] { return ablation_gate(work / "c6"); }},
      {7, "complexity bookkeeping", [] { return from_checks(complexity_bookkeeping()); }},
      {8, "determinism", [&] { return determinism(work / "c8"); }},
  };

  bool all = true;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    std::fprintf(stderr, "criterion %d: %s\n", c.id, c.name);
    std::fflush(stderr);
    Outcome o;
    try {
      fs::create_directories(work);
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("criterion %d %s %s: %s\n", c.id, o.passed ? "PASS" : "FAIL", c.name, o.detail.c_str());
    std::fflush(stdout);
    all = all && o.passed;
  }
  return all ? 0 : 1;
}
