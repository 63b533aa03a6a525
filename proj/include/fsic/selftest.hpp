#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsic/harness.hpp"

namespace fsic {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

namespace oracle {

/// Plain two-branch BCE with the score clamped to [eps, 1 - eps].
inline double bce(double y, double s, double eps = kScoreClamp) {
  double c = s;
  if (c < eps) c = eps;
  if (c > 1 - eps) c = 1 - eps;
  if (y == 1.0) return -std::log(c);
  if (y == 0.0) return -std::log(1 - c);
  return -(y * std::log(c) + (1 - y) * std::log(1 - c));
}

/// Training-mode score of one (query, candidate) pair, computed in isolation.
template <class Scalar>
double pair_score(const SimilarityModel<Scalar>& model, const Utterance& q, const Utterance& c) {
  const Utterance* one[] = {&c};
  return static_cast<double>(model.score_all(q, std::span<const Utterance* const>(one), ScoreMode::train).at(0));
}

/// Double loop over every ordered pair (i, j), i != j, of the pool.
template <class Scalar>
double pool_loss(const SimilarityModel<Scalar>& model, const std::vector<Utterance>& pool) {
  double total = 0;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    double row = 0;
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (i == j) continue;
      row += bce(pool[i].label == pool[j].label ? 1.0 : 0.0, pair_score(model, pool[i], pool[j]));
    }
    total += row / static_cast<double>(pool.size() - 1);
  }
  return total / static_cast<double>(pool.size());
}

/// Every query against every support utterance.
template <class Scalar>
double support_query_loss(const SimilarityModel<Scalar>& model, const Episode& e) {
  double total = 0;
  for (const auto& q : e.query) {
    double row = 0;
    for (const auto& c : e.support) row += bce(q.label == c.label ? 1.0 : 0.0, pair_score(model, q, c));
    total += row / static_cast<double>(e.support.size());
  }
  return total / static_cast<double>(e.query.size());
}

}  // namespace oracle

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

inline ModelConfig small_model(Architecture a, ScoringKind s, std::uint64_t seed) {
  ModelConfig m;
  m.architecture = a;
  m.scoring = s;
  m.backbone.dim = 8;
  m.backbone.hash_size = 64;
  m.backbone.train_embeddings = true;
  m.backbone.seed = seed;
  m.head_seed = seed + 1;
  return m;
}

inline const std::vector<std::pair<Architecture, ScoringKind>>& valid_designs() {
  static const std::vector<std::pair<Architecture, ScoringKind>> d = {
      {Architecture::cross, ScoringKind::parameterized},
      {Architecture::bi, ScoringKind::parameterized},
      {Architecture::bi, ScoringKind::non_parameterized}};
  return d;
}

}  // namespace detail

/// query_loss against the oracle on random (labels, scores) cases,
/// including exact 0 and 1 scores and values inside the clamp band.
inline CheckResult check_loss_oracle(int cases = 1000, std::uint64_t seed = 11) {
  detail::Stopwatch sw;
  Rng rng(seed);
  double worst = 0;
  for (int i = 0; i < cases; ++i) {
    const auto n = static_cast<std::size_t>(1 + rng.uniform_int(8));
    std::vector<double> y(n), s(n);
    double expected = 0;
    for (std::size_t t = 0; t < n; ++t) {
      y[t] = static_cast<double>(rng.uniform_int(2));
      switch (rng.uniform_int(6)) {
        case 0: s[t] = 0.0; break;
        case 1: s[t] = 1.0; break;
        case 2: s[t] = rng.uniform_real(0, 2e-7); break;
        case 3: s[t] = 1.0 - rng.uniform_real(0, 2e-7); break;
        default: s[t] = rng.uniform_real(); break;
      }
      expected += oracle::bce(y[t], s[t]);
    }
    expected /= static_cast<double>(n);
    worst = std::max(worst, std::abs(query_loss<double>(y, s) - expected));
  }
  const double secs = sw.seconds();
  return {"loss oracle", worst < 1e-9 && secs < 5,
          std::to_string(cases) + " cases, max |diff| " + detail::fmt(worst) + ", " + detail::fmt(secs, 3) + " s",
          secs};
}

/// ep_step and epsq_step losses against the brute-force pair loops, for all
/// three designs, on episodes of at most 8 utterances.
inline CheckResult check_regime_oracle(int episodes_per_design = 20, std::uint64_t seed = 12) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(6, 12, {}, seed);
  Rng rng(seed);
  double worst_ep = 0, worst_epsq = 0;
  for (const auto& [arch, scoring] : detail::valid_designs()) {
    const SimilarityModel<double> base(detail::small_model(arch, scoring, seed));
    for (int i = 0; i < episodes_per_design; ++i) {
      const int n_way = 2 + static_cast<int>(rng.uniform_int(2));
      const int k = 1 + static_cast<int>(rng.uniform_int(2));
      const int q = n_way == 3 ? 1 : 1 + static_cast<int>(rng.uniform_int(2));
      const auto e = sample_balanced_episode(corpus, corpus.intents(), {n_way, k, q}, rng, i);
      auto model = base;
      AdamW<double> opt(1e-3, {});
      worst_ep = std::max(worst_ep, std::abs(ep_step(model, opt, e, 7) - oracle::pool_loss(base, e.pool())));
      model = base;
      AdamW<double> opt2(1e-3, {});
      worst_epsq =
          std::max(worst_epsq, std::abs(epsq_step(model, opt2, e, 5) - oracle::support_query_loss(base, e)));
    }
  }
  const double secs = sw.seconds();
  return {"regime oracle", worst_ep < 1e-7 && worst_epsq < 1e-7,
          "EP max |diff| " + detail::fmt(worst_ep) + ", EPSQ max |diff| " + detail::fmt(worst_epsq), secs};
}

/// Central finite differences against backprop, 64-bit, `coords` random
/// coordinates per design. Embedding coordinates are drawn from rows the
/// episode actually uses.
inline CheckResult check_gradients(int coords = 100, std::uint64_t seed = 13, double h = 1e-5) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(6, 10, {}, seed);
  Rng rng(seed);
  const auto e = sample_balanced_episode(corpus, corpus.intents(), {3, 1, 1}, rng);
  double worst = 0;
  int checked = 0, failed = 0;
  std::ostringstream detail_text;
  for (const auto& [arch, scoring] : detail::valid_designs()) {
    SimilarityModel<double> model(detail::small_model(arch, scoring, seed));
    std::vector<int> used_rows = {kClsId, kSepId};
    for (const auto& u : e.pool()) {
      const auto ids = model.backbone().single_sequence(u.text).token_ids;
      used_rows.insert(used_rows.end(), ids.begin(), ids.end());
    }
    std::vector<Tensor<double>*> tensors;
    for (auto* set : model.parameter_sets()) {
      for (auto& t : *set) {
        if (t.trainable) tensors.push_back(&t);
      }
    }
    model.zero_grad();
    ep_loss(model, e, true);
    double worst_here = 0;
    for (int c = 0; c < coords; ++c) {
      auto& t = *tensors[rng.uniform_int(tensors.size())];
      Eigen::Index idx = 0;
      if (t.name == "backbone.embedding") {
        const auto row = used_rows[rng.uniform_int(used_rows.size())];
        idx = row * t.value.cols() + static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(t.value.cols())));
      } else {
        idx = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(t.value.size())));
      }
      double& w = t.value.data()[idx];
      const double orig = w;
      w = orig + h;
      const double lp = ep_loss(model, e);
      w = orig - h;
      const double lm = ep_loss(model, e);
      w = orig;
      const double fd = (lp - lm) / (2 * h);
      const double an = t.grad.data()[idx];
      const double diff = std::abs(fd - an);
      const double rel = diff / std::max(std::abs(fd) + std::abs(an), 1e-12);
      ++checked;
      if (std::abs(fd) + std::abs(an) < 1e-9) continue;  // both vanish
      worst_here = std::max(worst_here, rel);
      if (rel >= 1e-4) ++failed;
    }
    worst = std::max(worst, worst_here);
    detail_text << detail::small_model(arch, scoring, 0).name() << " " << detail::fmt(worst_here, 3) << "; ";
  }
  const double secs = sw.seconds();
  detail_text << checked << " coordinates, worst relative error " << detail::fmt(worst, 3) << ", "
              << detail::fmt(secs, 3) << " s";
  return {"gradient check", failed == 0 && secs < 60, detail_text.str(), secs};
}

/// Mean accuracy of the uniform-guess baseline on 5-way episodes.
inline CheckResult check_random_baseline(int episodes = 600, std::uint64_t seed = 14) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(15, 40, {}, seed);
  Rng rng(seed);
  const auto eps = sample_balanced_episodes(corpus, corpus.intents(), {5, 1, 5}, static_cast<std::size_t>(episodes), rng);
  const double acc = mean_episode_accuracy(random_predictor(seed + 1), eps);
  return {"random baseline", acc >= 0.17 && acc <= 0.23,
          std::to_string(episodes) + " episodes, mean accuracy " + detail::fmt(acc), sw.seconds()};
}

/// Exact counts, support/query disjointness and no leakage on random
/// balanced specs drawn from a restricted intent set.
inline CheckResult check_episode_invariants(int episodes = 10000, std::uint64_t seed = 15) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(15, 40, {}, seed);
  const auto split = split_intents(corpus, {7, 3, 5}, seed, 0);
  const std::set<IntentLabel> allowed(split.train_intents.begin(), split.train_intents.end());
  Rng rng(seed);
  int bad = 0;
  std::string first_problem;
  for (int i = 0; i < episodes; ++i) {
    const EpisodeSpec spec{2 + static_cast<int>(rng.uniform_int(6)), 1 + static_cast<int>(rng.uniform_int(5)),
                           1 + static_cast<int>(rng.uniform_int(10))};
    const auto e = sample_balanced_episode(corpus, split.train_intents, spec, rng, i);
    std::string problem;
    std::map<IntentLabel, int> s_count, q_count;
    std::set<std::string> ids;
    for (const auto& u : e.support) ++s_count[u.label];
    for (const auto& u : e.query) ++q_count[u.label];
    for (const auto& u : e.pool()) {
      if (!ids.insert(u.id).second) problem = "repeated utterance " + u.id;
      if (!allowed.count(u.label)) problem = "leaked intent " + u.label.name;
    }
    if (static_cast<int>(e.intents.size()) != spec.n_way) problem = "wrong intent count";
    if (e.support.size() != static_cast<std::size_t>(spec.n_way * spec.k_shot)) problem = "wrong support size";
    if (e.query.size() != static_cast<std::size_t>(spec.n_way * spec.query_per_intent)) problem = "wrong query size";
    for (const auto& label : e.intents) {
      if (s_count[label] != spec.k_shot || q_count[label] != spec.query_per_intent) problem = "uneven intent counts";
    }
    if (!problem.empty()) {
      if (!bad++) first_problem = "episode " + std::to_string(i) + ": " + problem;
    }
  }
  return {"episode invariants", bad == 0,
          std::to_string(episodes) + " episodes, " + std::to_string(bad) + " violations" +
              (first_problem.empty() ? "" : " (" + first_problem + ")"),
          sw.seconds()};
}

/// Both imbalanced presets: average sizes within tolerance of their targets
/// and every episode inside the configured size ranges.
inline CheckResult check_imbalanced_presets(int episodes = 2000, std::uint64_t seed = 16) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(15, 40, {}, seed);
  std::ostringstream text;
  bool ok = true;
  for (const auto& [name, cfg] : {std::pair{"atis-train", atis_train_style()}, std::pair{"snips-test", snips_test_style()}}) {
    Rng rng(seed);
    const auto eps = build_imbalanced_episodes(corpus, corpus.intents(), cfg, static_cast<std::size_t>(episodes), rng);
    const auto st = compute_stats(eps);
    const auto problems = verify_stats(st, cfg);
    const bool in_range = static_cast<int>(st.min_support_size) >= cfg.support.min &&
                          static_cast<int>(st.max_support_size) <= cfg.support.max &&
                          static_cast<int>(st.min_query_size) >= cfg.query.min &&
                          static_cast<int>(st.max_query_size) <= cfg.query.max;
    const bool near = std::abs(st.avg_support_size - cfg.target_avg_support) <= cfg.tolerance;
    ok = ok && problems.empty() && in_range && near;
    text << name << ": support avg " << detail::fmt(st.avg_support_size) << " in [" << st.min_support_size << ", "
         << st.max_support_size << "], query avg " << detail::fmt(st.avg_query_size) << "; ";
  }
  return {"imbalanced presets", ok, text.str(), sw.seconds()};
}

/// With one support utterance per intent, ProtoNet and 1-NN under
/// -||h_q - h_c||^2 must pick the same label for every query.
inline CheckResult check_protonet_nn_equivalence(int episodes = 500, std::uint64_t seed = 17) {
  detail::Stopwatch sw;
  const auto corpus = make_synthetic_corpus(15, 40, {}, seed);
  Rng rng(seed);
  std::vector<ToyBackbone<float>> backbones;
  for (std::uint64_t b = 0; b < 10; ++b) backbones.emplace_back(ToyBackboneConfig{.seed = seed + b});
  std::size_t queries = 0, disagreements = 0;
  for (int i = 0; i < episodes; ++i) {
    const auto& bb = backbones[static_cast<std::size_t>(i) % backbones.size()];
    const int n_way = 2 + static_cast<int>(rng.uniform_int(9));
    const auto e = sample_balanced_episode(corpus, corpus.intents(), {n_way, 1, 3}, rng, i);
    EncodingCache<float> cache;
    for (const auto& q : e.query) {
      const auto proto = protonet_predict(bb, q, e.intents, e.support, &cache);
      const auto nn = euclidean_nn_predict(bb, q, e.support, &cache);
      ++queries;
      disagreements += !(proto.predicted == nn.predicted);
    }
  }
  return {"protonet/nn equivalence", disagreements == 0,
          std::to_string(episodes) + " episodes, " + std::to_string(queries) + " queries, " +
              std::to_string(disagreements) + " disagreements",
          sw.seconds()};
}

/// The oracle and invariant suites run by `fsic selftest`.
inline std::vector<CheckResult> run_selftest() {
  return {check_loss_oracle(),        check_regime_oracle(),      check_gradients(),
          check_random_baseline(),    check_episode_invariants(), check_imbalanced_presets(),
          check_protonet_nn_equivalence()};
}

}  // namespace fsic
