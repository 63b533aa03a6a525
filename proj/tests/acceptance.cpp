// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "fsic/fsic.hpp"

using namespace fsic;
namespace fs = std::filesystem;

namespace {

struct Line {
  int id;
  CheckResult result;
};

std::vector<Line> lines;

void record(int id, CheckResult r) {
  std::printf("%s criterion %d (%s): %s [%.1fs]\n", r.passed ? "PASS" : "FAIL", id, r.name.c_str(), r.detail.c_str(),
              r.seconds);
  std::fflush(stdout);
  lines.push_back({id, std::move(r)});
}

CheckResult combine(std::string name, const std::vector<CheckResult>& parts) {
  CheckResult out{std::move(name), true, "", 0};
  for (const auto& p : parts) {
    out.passed = out.passed && p.passed;
    out.seconds += p.seconds;
    out.detail += (out.detail.empty() ? "" : "; ") + p.name + ": " + p.detail;
  }
  return out;
}

fs::path workdir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("fsic_acceptance_" + name);
  fs::remove_all(p);
  return p;
}

// Synthetic separable setup shared by the learnability and regime checks:
// 15 intents x 40 utterances, 7/3/5 intent split, one fold, 5-way 1-shot test.
ExperimentConfig synthetic_setup(std::uint64_t seed, Regime regime) {
  ExperimentConfig c;
  c.seed = seed;
  c.folds = 1;
  c.model.architecture = Architecture::cross;
  c.model.scoring = ScoringKind::parameterized;
  c.train.regime = regime;
  c.train.learning_rate = 1e-3;
  c.train.max_episodes = 2000;
  c.train.batch_size = 15;  // NE batch = utterances in one 5-way training episode
  c.train_episodes = 2000;
  c.train_query_per_intent = 2;
  c.valid_episodes = 100;
  c.test_episodes = 600;
  return c;
}

// Outcomes vary with the seed by several points, so both statistical checks
// look at three independent seeds rather than one.
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

double run_mean(const ExperimentConfig& c, double* seconds = nullptr) {
  const auto start = std::chrono::steady_clock::now();
  const auto dir = workdir("run");
  const auto r = run_experiment(c, dir);
  fs::remove_all(dir);
  if (seconds) *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r.mean;
}

std::string pct(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << 100 * v;
  return os.str();
}

double average(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string listing(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "/" : "") + pct(v[i]);
  return out;
}

CheckResult learnability(std::vector<double>& ep) {
  std::vector<double> frozen, random;
  double total = 0, slowest = 0;
  bool ok = true;
  for (auto seed : kSeeds) {
    double secs = 0;
    const auto c = synthetic_setup(seed, Regime::ep);
    ep.push_back(run_mean(c, &secs));
    slowest = std::max(slowest, secs);
    total += secs;
    auto f = c;
    f.method = Method::frozen_be_np;
    frozen.push_back(run_mean(f));
    auto r = c;
    r.method = Method::random;
    random.push_back(run_mean(r));
    ok = ok && ep.back() >= 0.90 && frozen.back() <= 0.30;
  }
  ok = ok && slowest < 900;
  return {"learnability", ok,
          "seeds 1/2/3: CE+PA EP " + listing(ep) + " (each >= 90), BE(fixed)+NP " + listing(frozen) +
              " (each <= 30), Random " + listing(random) + "; slowest training run " +
              std::to_string(static_cast<int>(slowest)) + " s (< 900)",
          total};
}

CheckResult regime_ordering(const std::vector<double>& ep) {
  std::vector<double> epsq, ne;
  double total = 0;
  for (auto seed : kSeeds) {
    double a = 0, b = 0;
    epsq.push_back(run_mean(synthetic_setup(seed, Regime::epsq), &a));
    ne.push_back(run_mean(synthetic_setup(seed, Regime::ne), &b));
    total += a + b;
  }
  const double m_ep = average(ep), m_sq = average(epsq), m_ne = average(ne);
  const bool close = std::abs(m_ep - m_sq) < 0.05;
  const bool above = m_ep > m_ne && m_sq > m_ne;
  return {"regime ordering", close && above,
          "seeds 1/2/3 at 2000 updates: EP " + listing(ep) + " (mean " + pct(m_ep) + "), EPSQ " + listing(epsq) +
              " (mean " + pct(m_sq) + "), NE " + listing(ne) + " (mean " + pct(m_ne) + "); |EP-EPSQ| < 5: " +
              (close ? "yes" : "no") + "; both > NE: " + (above ? "yes" : "no"),
          total};
}

std::string checkpoint_bytes(const Model& m, const CheckpointMeta& meta) {
  std::ostringstream os;
  write_checkpoint(os, m, meta);
  return os.str();
}

CheckResult determinism() {
  const auto start = std::chrono::steady_clock::now();
  ExperimentConfig c;
  c.seed = 3;
  c.folds = 2;
  c.model.architecture = Architecture::bi;
  c.model.scoring = ScoringKind::parameterized;
  c.model.backbone.dim = 32;
  c.train.learning_rate = 1e-3;
  c.train.max_episodes = 300;
  c.train_episodes = 300;
  c.train_query_per_intent = 2;
  c.valid_episodes = 30;
  c.test_episodes = 100;
  const auto a_dir = workdir("det_a"), b_dir = workdir("det_b");
  const auto a = run_experiment(c, a_dir);
  const auto b = run_experiment(c, b_dir);
  const bool same_body = a.body() == b.body() && read_text(a_dir / "report.json") != "" &&
                         load_report(a_dir / "report.json").body() == load_report(b_dir / "report.json").body();

  bool bit_exact = true, reproduced = true;
  for (int k = 0; k < c.fold_count(); ++k) {
    const auto path = a_dir / fold_dir_name(k) / "checkpoint.bin";
    const auto stored = read_text(path);
    const auto ck = load_checkpoint(path.string());
    const auto model = restore_model<float>(ck);
    bit_exact = bit_exact && checkpoint_bytes(model, ck.meta) == stored &&
                read_text(b_dir / fold_dir_name(k) / "checkpoint.bin") == stored;
    const auto fold = load_fold(a_dir / fold_dir_name(k));
    const double acc = mean_episode_accuracy(nn_predictor(model), fold.valid);
    reproduced = reproduced && acc == ck.meta.best_validation_accuracy;
  }
  fs::remove_all(a_dir);
  fs::remove_all(b_dir);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {"determinism and persistence", same_body && bit_exact && reproduced,
          std::string("identical report bodies: ") + (same_body ? "yes" : "no") +
              "; checkpoint bytes round-trip: " + (bit_exact ? "yes" : "no") +
              "; restored model reproduces best validation accuracy: " + (reproduced ? "yes" : "no"),
          secs};
}

}  // namespace

int main() {
  try {
    record(1, check_loss_oracle(1000));
    record(2, check_regime_oracle(20));
    record(3, check_gradients(100));
    record(4, check_random_baseline(600));
    std::vector<double> ep;
    record(5, learnability(ep));
    record(6, regime_ordering(ep));
    record(7, combine("episode invariants", {check_episode_invariants(10000), check_imbalanced_presets(2000)}));
    record(8, check_protonet_nn_equivalence(500));
    record(9, determinism());
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance aborted: %s\n", e.what());
    return 2;
  }
  int failed = 0;
  for (const auto& l : lines) failed += !l.result.passed;
  std::printf("%d of %zu criteria passed\n", static_cast<int>(lines.size()) - failed, lines.size());
  return failed ? 1 : 0;
}
