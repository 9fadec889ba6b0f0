#pragma once

// Subcommand bodies shared by the fpsformer CLI and the acceptance runner.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fps/analysis.hpp"
#include "fps/checks.hpp"
#include "fps/io/png.hpp"
#include "fps/metrics.hpp"
#include "fps/model.hpp"
#include "fps/mrisim.hpp"
#include "fps/trainer.hpp"

namespace fps::app {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "1.0.0";

using Log = std::function<void(const std::string&)>;

inline std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string content_hash(const std::string& bytes) { return hex64(detail::fnv1a(bytes)); }

// ------------------------------------------------------------- run.txt

using RunEntries = std::vector<std::pair<std::string, std::string>>;

/// run.txt holds one `[command]` section per subcommand that wrote to the
/// directory; rerunning a command replaces its own section only.
inline void write_run_record(const fs::path& dir, const std::string& command, RunEntries entries) {
  entries.insert(entries.begin(), {{"tool_version", kToolVersion},
                                   {"format.tensor", "FPT1"},
                                   {"format.checkpoint", std::string(kCheckpointMagic.substr(0, 8))},
                                   {"format.dataset_manifest", "1"},
                                   {"format.run_record", "1"}});
  std::vector<std::pair<std::string, std::string>> sections;
  const fs::path path = dir / "run.txt";
  if (fs::exists(path)) {
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) {
      if (line.size() > 2 && line.front() == '[' && line.back() == ']')
        sections.push_back({line.substr(1, line.size() - 2), ""});
      else if (!sections.empty() && !line.empty())
        sections.back().second += line + "\n";
    }
  }
  std::string body;
  for (const auto& [k, v] : entries) body += k + " = " + v + "\n";
  bool replaced = false;
  for (auto& s : sections)
    if (s.first == command) {
      s.second = body;
      replaced = true;
    }
  if (!replaced) sections.push_back({command, body});
  std::string out;
  for (const auto& [name, text] : sections) out += (out.empty() ? "" : "\n") + ("[" + name + "]\n") + text;
  write_file(path, out);
}

inline fs::path parent_or_dot(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

// ------------------------------------------------------------- gen-data

struct GenDataOptions {
  fs::path out;
  int count = 200;
  int size = 32;
  MaskKind kind = MaskKind::cartesian;
  double af = 4.0;
  std::uint64_t seed = 1;
  int val_count = -1;   // default max(1, count / 10)
  int test_count = -1;  // default max(1, count / 4)
};

inline void gen_data(const GenDataOptions& o) {
  if (o.count < 1) throw ConfigError("--count must be at least 1");
  (void)make_mask(o.kind, o.size, o.af, o.seed);  // rejects unreachable size / af combinations early
  const int val = o.val_count >= 0 ? o.val_count : std::max(1, o.count / 10);
  const int test = o.test_count >= 0 ? o.test_count : std::max(1, o.count / 4);
  for (auto [split, n] : {std::pair{Split::train, o.count}, {Split::val, val}, {Split::test, test}})
    write_split(o.out / split_name(split), {o.seed, o.size, o.kind, o.af, n, split});
  write_run_record(o.out, "gen-data",
                   {{"seed", std::to_string(o.seed)},
                    {"size", std::to_string(o.size)},
                    {"mask", mask_kind_name(o.kind)},
                    {"af", format_double(o.af)},
                    {"count.train", std::to_string(o.count)},
                    {"count.val", std::to_string(val)},
                    {"count.test", std::to_string(test)}});
}

// ---------------------------------------------------------------- train

inline void apply_ablation(ModelConfig& m, const std::string& module) {
  if (module == "fmam") m.fmam_on = false;
  else if (module == "spam") m.spam_on = false;
  else if (module == "sdfn") m.sdfn_on = false;
  else if (module == "hefr") m.hefr_on = false;
  else throw ConfigError("--ablate: unknown module '" + module + "' (expected fmam, spam, sdfn or hefr)");
}

inline TrainConfig load_train_config(const fs::path& path) {
  if (path.empty()) return {};
  return parse_train_config(read_file(path));
}

struct TrainOptions {
  fs::path data, out, config;
  std::vector<std::string> ablate;
};

inline TrainLog train_cmd(const TrainOptions& o, const Log& log = {}) {
  TrainConfig cfg = load_train_config(o.config);
  for (const auto& a : o.ablate) apply_ablation(cfg.model, a);
  cfg.validate();
  const auto train_dir = resolve_split(o.data, Split::train);
  if (train_dir == o.data) throw IoError(o.data.string() + " is a single split; train needs a dataset root with train/ and val/");
  const auto train_set = load_split<float>(train_dir);
  const auto val_set = load_split<float>(resolve_split(o.data, Split::val));
  cfg.model.check_resolution(train_set.info.size, train_set.info.size);
  fs::create_directories(o.out);
  const std::string cfg_text = train_config_text(cfg);
  write_file(o.out / "config.txt", cfg_text);
  TrainResult<float> r = train<float>(cfg, train_set, val_set, {o.out, log});
  write_run_record(o.out, "train",
                   {{"config_hash", content_hash(cfg_text)},
                    {"variant", r.log.variant},
                    {"seed", std::to_string(cfg.seed)},
                    {"data.seed", std::to_string(train_set.info.seed)},
                    {"data.train_hash", content_hash(manifest_text(train_set.info))},
                    {"iterations", std::to_string(cfg.iterations)},
                    {"best_step", std::to_string(r.log.best_step)},
                    {"best_val_psnr_db", format_double(r.log.best_psnr)},
                    {"checkpoint_hash", content_hash(read_file(o.out / "model.ckpt"))}});
  return r.log;
}

// ----------------------------------------------------------------- eval

struct EvalOptions {
  fs::path ckpt, data, out;
  fs::path zero_filled_out;  // optional CSV for the zero-filled inputs
};

inline EvalResult eval_cmd(const EvalOptions& o) {
  const Model<float> m = load_checkpoint<float>(o.ckpt);
  const auto split = load_split<float>(resolve_split(o.data, Split::test));
  m.cfg.check_resolution(split.info.size, split.info.size);
  EvalResult r = evaluate(m, split);
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  write_file(o.out, metrics_csv(r.recon));
  RunEntries e{{"checkpoint_hash", content_hash(read_file(o.ckpt))},
               {"config_hash", content_hash(train_config_text(TrainConfig{.model = m.cfg}))},
               {"data.seed", std::to_string(split.info.seed)},
               {"data.split", split_name(split.info.split)},
               {"images", std::to_string(split.records.size())},
               {"metrics", o.out.filename().string()}};
  if (!o.zero_filled_out.empty()) {
    write_file(o.zero_filled_out, metrics_csv(r.zero_filled));
    e.push_back({"zero_filled_metrics", o.zero_filled_out.filename().string()});
  }
  write_run_record(parent_or_dot(o.out), "eval", e);
  return r;
}

// ---------------------------------------------------------- reconstruct

struct ReconstructOptions {
  fs::path ckpt, input, mask, out;  // out is a file prefix
  double cutoff = -1.0;             // high-pass radius; default size / 8
};

inline ImageMetrics reconstruct_cmd(const ReconstructOptions& o) {
  NoGradGuard guard;
  const Model<float> m = load_checkpoint<float>(o.ckpt);
  const Tensor<float> gt = load_tensor<float>(o.input);
  const Tensor<float> mask = load_tensor<float>(o.mask);
  if (gt.rank() != 4 || gt.dim(0) != 1 || gt.dim(1) != 2 || gt.dim(2) != gt.dim(3))
    throw ShapeError("--input must hold one square [1, 2, S, S] image, got " + shape_str(gt.shape()));
  const int s = gt.dim(2);
  if (mask.shape() != Shape{1, 1, s, s})
    throw ShapeError("--mask must be [1, 1, " + std::to_string(s) + ", " + std::to_string(s) + "], got " + shape_str(mask.shape()));
  m.cfg.check_resolution(s, s);
  const Tensor<float> y = mul(fft2(gt), expand_mask(mask));
  const Tensor<float> zf = ifft2(y);
  const Tensor<float> recon = forward(m, zf, y, mask);

  const auto g = magnitude(gt), z = magnitude(zf), r = magnitude(recon);
  std::vector<double> err(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) err[i] = std::abs(r[i] - g[i]);
  const double cutoff = o.cutoff >= 0 ? o.cutoff : s / 8.0;
  const auto hp = highpass_residual(recon, cutoff);

  const std::string prefix = o.out.string();
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  const std::string stem = o.out.filename().string();
  RunEntries e{{"checkpoint_hash", content_hash(read_file(o.ckpt))},
               {"input_hash", content_hash(read_file(o.input))},
               {"mask_hash", content_hash(read_file(o.mask))},
               {"highpass_cutoff", format_double(cutoff)}};
  auto png = [&](const char* what, const std::vector<double>& v) {
    const PngRange pr = write_png(prefix + "_" + what + ".png", v, s, s);
    e.push_back({stem + "_" + what + ".png.range", format_double(pr.lo) + " " + format_double(pr.hi)});
  };
  png("gt", g);
  png("zf", z);
  png("recon", r);
  png("error", err);
  png("highpass", hp);
  save_tensor(prefix + "_gt.fpt1", gt);
  save_tensor(prefix + "_zf.fpt1", zf);
  save_tensor(prefix + "_recon.fpt1", recon);
  write_run_record(parent_or_dot(o.out), "reconstruct", e);
  return image_metrics(stem, r, g, s, s);
}

// --------------------------------------------------------- analyze-freq

struct AnalyzeOptions {
  fs::path ckpt_a, ckpt_b, data, out;
  int probes = 8;
};

inline SpectrumComparison analyze_freq_cmd(const AnalyzeOptions& o) {
  if (o.probes < 1) throw ConfigError("--probes must be at least 1");
  const Model<float> a = load_checkpoint<float>(o.ckpt_a), b = load_checkpoint<float>(o.ckpt_b);
  const auto split = load_split<float>(resolve_split(o.data, Split::test));
  std::vector<Tensor<float>> zf, y, mask;
  for (int i = 0; i < std::min<int>(o.probes, split.records.size()); ++i) {
    zf.push_back(split.records[i].zero_filled);
    y.push_back(split.records[i].y);
    mask.push_back(split.records[i].mask);
  }
  const SpectrumComparison cmp = compare_variants(a, b, zf, y, mask);
  if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
  write_file(o.out, cmp.csv());
  write_run_record(parent_or_dot(o.out), "analyze-freq",
                   {{"checkpoint_a_hash", content_hash(read_file(o.ckpt_a))},
                    {"checkpoint_b_hash", content_hash(read_file(o.ckpt_b))},
                    {"variant_a", a.cfg.variant()},
                    {"variant_b", b.cfg.variant()},
                    {"data.seed", std::to_string(split.info.seed)},
                    {"probes", std::to_string(zf.size())},
                    {"spectra", o.out.filename().string()}});
  return cmp;
}

// --------------------------------------------------------------- ablate

struct AblationVariant {
  std::string label, removed;  // removed: module name, empty for the full model
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> v{
      {"(a)", "fmam"}, {"(b)", "spam"}, {"(c)", "sdfn"}, {"(d)", "hefr"}, {"ours", ""}};
  return v;
}

struct AblationRow {
  AblationVariant variant;
  std::string name;                   // variant() of the config
  std::vector<ImageMetrics> per_seed;  // mean test metrics of each seed's run
  ImageMetrics mean, stddev;
};

struct AblateOptions {
  fs::path data, out, config;
  int seeds = 3;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  const AblationRow& full = rows.back();
  std::string out = "model,variant,fmam,spam,sdfn,hefr,nmse,ssim,psnr_db,psnr_std,delta_psnr_db,delta_ssim\n";
  char buf[256];
  for (const auto& r : rows) {
    auto on = [&](const char* m) { return r.variant.removed == m ? 0 : 1; };
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%d,%d,%d,%.9g,%.6f,%.4f,%.4f,%+.4f,%+.6f\n", r.variant.label.c_str(),
                  r.name.c_str(), on("fmam"), on("spam"), on("sdfn"), on("hefr"), r.mean.nmse, r.mean.ssim,
                  r.mean.psnr_db, r.stddev.psnr_db, r.mean.psnr_db - full.mean.psnr_db, r.mean.ssim - full.mean.ssim);
    out += buf;
  }
  return out;
}

inline std::string ablation_runs_csv(const std::vector<AblationRow>& rows, std::uint64_t base_seed) {
  std::string out = "variant,seed,nmse,ssim,psnr_db\n";
  char buf[192];
  for (const auto& r : rows)
    for (std::size_t s = 0; s < r.per_seed.size(); ++s) {
      std::snprintf(buf, sizeof buf, "%s,%llu,%.9g,%.6f,%.4f\n", r.name.c_str(),
                    static_cast<unsigned long long>(base_seed + s), r.per_seed[s].nmse, r.per_seed[s].ssim,
                    r.per_seed[s].psnr_db);
      out += buf;
    }
  return out;
}

/// Trains every variant once per seed (config seed, +1, ...) and scores the
/// best checkpoint on the test split. Runs land in out/runs/<variant>_seed<k>.
inline std::vector<AblationRow> ablate_cmd(const AblateOptions& o, const Log& log = {}) {
  if (o.seeds < 1) throw ConfigError("--seeds must be at least 1");
  const TrainConfig base = load_train_config(o.config);
  const auto train_set = load_split<float>(resolve_split(o.data, Split::train));
  const auto val_set = load_split<float>(resolve_split(o.data, Split::val));
  const auto test_set = load_split<float>(resolve_split(o.data, Split::test));
  base.model.check_resolution(train_set.info.size, train_set.info.size);
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    TrainConfig cfg = base;
    if (!v.removed.empty()) apply_ablation(cfg.model, v.removed);
    AblationRow row{v, cfg.model.variant(), {}, {}, {}};
    MetricsReport seeds;
    for (int k = 0; k < o.seeds; ++k) {
      cfg.seed = base.seed + static_cast<std::uint64_t>(k);
      const fs::path dir = o.out / "runs" / (row.name + "_seed" + std::to_string(cfg.seed));
      fs::create_directories(dir);
      write_file(dir / "config.txt", train_config_text(cfg));
      if (log) log(row.name + " seed " + std::to_string(cfg.seed));
      const TrainResult<float> r = train<float>(cfg, train_set, val_set, {dir, log});
      EvalResult ev = evaluate(r.best, test_set, cfg.batch);
      write_file(dir / "test_metrics.csv", metrics_csv(ev.recon));
      ev.recon.mean.id = std::to_string(cfg.seed);
      row.per_seed.push_back(ev.recon.mean);
      seeds.add(ev.recon.mean);
    }
    seeds.finalize();
    row.mean = seeds.mean;
    row.stddev = seeds.stddev;
    rows.push_back(std::move(row));
  }
  fs::create_directories(o.out);
  const std::string table = ablation_csv(rows);
  write_file(o.out / "ablation.csv", table);
  write_file(o.out / "ablation_runs.csv", ablation_runs_csv(rows, base.seed));
  write_run_record(o.out, "ablate",
                   {{"config_hash", content_hash(train_config_text(base))},
                    {"seed.first", std::to_string(base.seed)},
                    {"seeds", std::to_string(o.seeds)},
                    {"data.seed", std::to_string(train_set.info.seed)},
                    {"iterations", std::to_string(base.iterations)},
                    {"table", "ablation.csv"}});
  return rows;
}

// ------------------------------------------------------------- selftest

inline bool selftest_cmd(std::FILE* out) {
  bool ok = true;
  for (const auto& suite : full_selftest([&](const std::string& s) {
         std::fprintf(out, "== %s\n", s.c_str());
         std::fflush(out);
       })) {
    for (const auto& c : suite.checks) {
      std::fprintf(out, "%s  %s/%s  %s\n", c.passed ? "ok  " : "FAIL", suite.name.c_str(), c.name.c_str(), c.detail.c_str());
      ok = ok && c.passed;
    }
    std::fflush(out);
  }
  std::fprintf(out, "%s\n", ok ? "selftest passed" : "selftest FAILED");
  return ok;
}

}  // namespace fps::app
