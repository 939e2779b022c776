// Acceptance driver: one PASS/FAIL line per primary criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "emoanti/dataio.hpp"
#include "emoanti/metrics.hpp"
#include "emoanti/trainer.hpp"
#include "metrics_oracle.hpp"
#include "temp_dir.hpp"

using namespace emoanti;
namespace oracle = emoanti::testing::oracle;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt_g(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

/// Runs a shell command with output captured in `log`; true on exit status 0.
bool run(const std::string& cmd, const fs::path& log) {
  const int rc = std::system((cmd + " >" + quote(log.string()) + " 2>&1").c_str());
  if (rc != 0) {
    std::cerr << "command failed (" << rc << "): " << cmd << "\n";
    const Bytes b = read_file(log);
    std::cerr << std::string(b.begin(), b.end()) << "\n";
  }
  return rc == 0;
}

struct Cli {
  std::string exe;
  fs::path work;
  int n = 0;

  bool operator()(const std::string& args) { return run(quote(exe) + " " + args, work / ("cmd" + std::to_string(n++) + ".log")); }
  bool eval(const std::string& args, double& eer, double& tdcf) {
    const fs::path log = work / ("eval" + std::to_string(n++) + ".log");
    if (!run(quote(exe) + " eval " + args, log)) return false;
    const Bytes b = read_file(log);
    const std::string out(b.begin(), b.end());
    const std::size_t at = out.rfind("EER=");
    return at != std::string::npos && std::sscanf(out.c_str() + at, "EER=%lf MIN_TDCF=%lf", &eer, &tdcf) == 2;
  }
};

// ---- suites backed by the unit-test binaries -------------------------------

void doctest_suite(const std::string& name, const std::vector<std::pair<std::string, std::string>>& runs,
                   double budget_seconds, const fs::path& work) {
  const auto t0 = Clock::now();
  bool ok = true;
  int i = 0;
  int cases = 0;
  for (const auto& [exe, filter] : runs) {
    const fs::path log = work / (name + std::to_string(i++) + ".log");
    ok = run(quote(exe) + " --no-colors --test-case=" + quote(filter), log) && ok;
    const Bytes b = read_file(log);
    const std::string out(b.begin(), b.end());
    const std::size_t at = out.rfind("test cases:");
    int n = 0;
    if (at == std::string::npos || std::sscanf(out.c_str() + at, "test cases: %d", &n) != 1 || n == 0) ok = false;
    cases += n;
  }
  const double secs = seconds_since(t0);
  std::string detail = std::to_string(cases) + " test cases " + (ok ? "passed" : "had failures") + " in " +
                       fmt(secs, 1) + " s";
  if (budget_seconds > 0) detail += " (budget " + fmt(budget_seconds, 0) + " s)";
  report(ok && (budget_seconds <= 0 || secs < budget_seconds), name, detail);
}

// ---- metrics oracle --------------------------------------------------------

void metrics_oracle_suite() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> size(2, 160);
  const TdcfCoefficients legacy = TdcfParams::asvspoof2019_la().coefficients(TdcfMode::legacy);
  const TdcfCoefficients revised{0.02, 0.9, 0.6};
  double worst_eer = 0.0;
  std::size_t tdcf_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto recs = oracle::random_scores(rng, size(rng), trial % 3 == 0);
    worst_eer = std::max(worst_eer, std::abs(compute_eer(recs).eer - oracle::eer(recs)));
    for (const TdcfCoefficients& c : {legacy, revised}) {
      if (compute_min_tdcf(recs, c).min_tdcf != oracle::min_tdcf(recs, c)) ++tdcf_mismatch;
    }
  }

  std::uniform_real_distribution<double> coef(0.05, 3.0);
  std::size_t monotone_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto recs = oracle::random_scores(rng, 120, false);
    const double a = coef(rng), b = coef(rng), c = coef(rng), d = coef(rng) * 0.3, shift = coef(rng) - 1.5;
    auto mapped = recs;
    for (auto& r : mapped) r.score = a * r.score + b * r.score * r.score * r.score + c * std::exp(d * r.score) + shift;
    if (compute_eer(mapped).eer != compute_eer(recs).eer) ++monotone_mismatch;
    if (compute_min_tdcf(mapped, legacy).min_tdcf != compute_min_tdcf(recs, legacy).min_tdcf) ++monotone_mismatch;
  }
  report(worst_eer <= 1e-12 && tdcf_mismatch == 0 && monotone_mismatch == 0, "metrics oracle suite",
         "1000 sets: max |EER - oracle| = " + fmt_g(worst_eer) + ", t-DCF mismatches " +
             std::to_string(tdcf_mismatch) + "; 100 monotone maps: mismatches " + std::to_string(monotone_mismatch));
}

// ---- end-to-end runs -------------------------------------------------------

struct RunResult {
  bool ok = false;
  double eer = NAN;
  double tdcf = NAN;
  double seconds = 0.0;
};

RunResult pipeline(Cli& cli, const fs::path& data, const fs::path& run_dir, const std::string& extra_train,
                   const std::string& params) {
  RunResult r;
  const auto t0 = Clock::now();
  r.ok = cli("train --train " + quote((data / "train.tsv").string()) + " --val " + quote((data / "val.tsv").string()) +
             " --out " + quote(run_dir.string()) + " --seed 43 --epochs 6 --lr 1e-4 " + extra_train) &&
         cli("score --checkpoint " + quote((run_dir / "best.emoc").string()) + " --manifest " +
             quote((data / "val.tsv").string()) + " --out " + quote((run_dir / "val.scores").string())) &&
         cli.eval("--scores " + quote((run_dir / "val.scores").string()) + " --key " + quote((data / "val.key").string()) +
                      " --tdcf-params " + quote(params) + " --tdcf-mode legacy",
                  r.eer, r.tdcf);
  r.seconds = seconds_since(t0);
  return r;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.raw(), b.raw(), a.size() * sizeof(double)) == 0;
}

}  // namespace

int main() {
  testing::TempDir tmp("emoanti-acceptance");
  const fs::path work = tmp.path();
  Cli cli{EMOANTI_CLI, work};
  const std::string params = std::string(EMOANTI_SOURCE_DIR) + "/data/tdcf_asvspoof2019_la.params";

  doctest_suite("gradient suite",
                {{EMOANTI_TEST_TENSOR_CORE, "primitive gradients*"}, {EMOANTI_TEST_MODEL, "end-to-end gradient*"}}, 30.0,
                work);
  doctest_suite("structural suite",
                {{EMOANTI_TEST_MODEL,
                  "residual block*,crfe_forward*,temporal attention*,fuse*,classifier head*,model structure,batched "
                  "forward*,padded batches*"},
                 {EMOANTI_TEST_TENSOR_CORE, "softmax_over_time*,conv1d matches*"}},
                0.0, work);
  metrics_oracle_suite();

  // High-separation run, timed from data generation to the final metric.
  const fs::path high = work / "high";
  const auto t0 = Clock::now();
  const bool synth_ok = cli("synth --seed 43 --preset high --n-train 200 --n-val 100 --out " + quote(high.string()));
  const RunResult full = synth_ok ? pipeline(cli, high, work / "full", "", params) : RunResult{};
  const double e2e_seconds = seconds_since(t0);

  const fs::path zero = work / "zero";
  RunResult control;
  if (cli("synth --seed 43 --preset zero --n-train 200 --n-val 100 --out " + quote(zero.string()))) {
    control = pipeline(cli, zero, work / "control", "", params);
  }
  report(full.ok && control.ok && full.eer <= 0.05 && full.tdcf <= 0.15 && e2e_seconds < 300.0 &&
             std::abs(control.eer - 0.5) <= 0.1,
         "end-to-end synthetic run",
         "EER " + fmt(full.eer) + " (<= 0.05), legacy min t-DCF " + fmt(full.tdcf) + " (<= 0.15), " +
             fmt(e2e_seconds, 1) + " s (< 300); separation-zero control EER " + fmt(control.eer) + " (0.5 +/- 0.1)");

  const RunResult ablated = synth_ok ? pipeline(cli, high, work / "no_crfe", "--ablation no_crfe", params) : RunResult{};
  report(full.ok && ablated.ok && full.eer <= ablated.eer + 0.02, "ablation parity",
         "full EER " + fmt(full.eer) + " vs no_crfe EER " + fmt(ablated.eer) + " (+0.02 allowed)");

  // Same seed retrained from scratch, then scored with a different worker count.
  bool same_scores = false;
  bool same_logits = false;
  std::string det_detail;
  if (full.ok) {
    const RunResult again = pipeline(cli, high, work / "again", "", params);
    const bool threaded = cli("score --threads 3 --checkpoint " + quote((work / "again/best.emoc").string()) +
                              " --manifest " + quote((high / "val.tsv").string()) + " --out " +
                              quote((work / "again/val3.scores").string()));
    const Bytes a = read_file(work / "full/val.scores");
    same_scores = again.ok && threaded && a == read_file(work / "again/val.scores") &&
                  a == read_file(work / "again/val3.scores");

    LoadedCheckpoint original = load_checkpoint(work / "full/best.emoc");
    save_checkpoint(work / "roundtrip.emoc", original.model, original.meta);
    LoadedCheckpoint reloaded = load_checkpoint(work / "roundtrip.emoc");
    const Dataset val = load_dataset(Manifest::load(high / "val.tsv"));
    const std::vector<Score> file_scores = read_scores(work / "full/val.scores");
    same_logits = file_scores.size() == val.size();
    for (std::size_t i = 0; same_logits && i < val.size(); ++i) {
      const Prediction p = forward(val[i].features, original.model, Mode::eval);
      const Prediction q = forward(val[i].features, reloaded.model, Mode::eval);
      same_logits = bitwise_equal(p.logits, q.logits) && p.score == file_scores[i].score &&
                    file_scores[i].utt_id == val[i].features.utt_id;
    }
    det_detail = std::string("score files ") + (same_scores ? "byte-identical" : "differ") +
                 " across retrain and worker counts; checkpoint round-trip logits " +
                 (same_logits ? "bitwise identical" : "differ") + " on " + std::to_string(val.size()) + " utterances";
  } else {
    det_detail = "reference run failed";
  }
  report(same_scores && same_logits, "determinism and persistence", det_detail);

  std::cout << (failures == 0 ? "ALL PRIMARY CRITERIA PASS" : std::to_string(failures) + " CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
