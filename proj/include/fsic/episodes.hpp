#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <limits>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "fsic/datamodel.hpp"
#include "fsic/rng.hpp"

namespace fsic {

/// An N-way few-shot task. Intents keep their sampling order.
struct Episode {
  std::int64_t episode_id = 0;
  std::vector<IntentLabel> intents;
  std::vector<Utterance> support;
  std::vector<Utterance> query;

  std::size_t size() const { return support.size() + query.size(); }

  /// support followed by query, the undivided pool used by episodic training.
  std::vector<Utterance> pool() const {
    std::vector<Utterance> all = support;
    all.insert(all.end(), query.begin(), query.end());
    return all;
  }

  bool operator==(const Episode&) const = default;
};

/// Throws ValidationError if the episode breaks a structural invariant.
inline void validate_episode(const Episode& e) {
  const std::string tag = "episode " + std::to_string(e.episode_id) + ": ";
  if (e.intents.empty()) throw ValidationError(tag + "no intents");
  std::set<IntentLabel> intents(e.intents.begin(), e.intents.end());
  if (intents.size() != e.intents.size()) throw ValidationError(tag + "duplicate intent");
  if (e.support.empty()) throw ValidationError(tag + "empty support set");
  std::set<IntentLabel> covered;
  std::unordered_set<std::string> support_ids;
  for (const auto& u : e.support) {
    if (!intents.count(u.label)) throw ValidationError(tag + "support label '" + u.label.name + "' not in intents");
    if (!support_ids.insert(u.id).second) throw ValidationError(tag + "duplicate support id '" + u.id + "'");
    covered.insert(u.label);
  }
  if (covered.size() != intents.size()) throw ValidationError(tag + "intent without support utterance");
  std::unordered_set<std::string> query_ids;
  for (const auto& u : e.query) {
    if (!intents.count(u.label)) throw ValidationError(tag + "query label '" + u.label.name + "' not in intents");
    if (support_ids.count(u.id)) throw ValidationError(tag + "utterance '" + u.id + "' in both support and query");
    if (!query_ids.insert(u.id).second) throw ValidationError(tag + "duplicate query id '" + u.id + "'");
  }
}

enum class EpisodeMode { balanced, imbalanced };

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  int query_per_intent = 5;
  EpisodeMode mode = EpisodeMode::balanced;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_way < 2) throw ValidationError("n_way must be >= 2");
    if (k_shot < 1) throw ValidationError("k_shot must be >= 1");
    if (query_per_intent < 1) throw ValidationError("query_per_intent must be >= 1");
  }
};

inline constexpr int kDefaultSamplingRetries = 100;

/// Samples N intents, then k support and query_per_intent query utterances
/// for each, all without replacement. Draws whose intents are too small are
/// rejected and redrawn, up to `retries` times.
inline Episode sample_balanced_episode(const LabeledCorpus& corpus, const std::vector<IntentLabel>& allowed,
                                       const EpisodeSpec& spec, Rng& rng, std::int64_t episode_id = 0,
                                       int retries = kDefaultSamplingRetries) {
  spec.validate();
  const auto n = static_cast<std::size_t>(spec.n_way);
  if (allowed.size() < n) {
    throw ValidationError("need " + std::to_string(n) + " intents, only " + std::to_string(allowed.size()) +
                          " allowed");
  }
  const auto need = static_cast<std::size_t>(spec.k_shot + spec.query_per_intent);
  std::string short_intent;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    const auto picks = rng.sample_indices(allowed.size(), n);
    bool ok = true;
    for (auto p : picks) {
      if (corpus.members(allowed[p]).size() < need) {
        short_intent = allowed[p].name;
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    Episode e;
    e.episode_id = episode_id;
    for (auto p : picks) {
      const auto& label = allowed[p];
      const auto& members = corpus.members(label);
      const auto chosen = rng.sample_indices(members.size(), need);
      e.intents.push_back(label);
      for (std::size_t i = 0; i < need; ++i) {
        const auto& u = corpus.utterances()[members[chosen[i]]];
        (i < static_cast<std::size_t>(spec.k_shot) ? e.support : e.query).push_back(u);
      }
    }
    return e;
  }
  throw ValidationError("intent '" + short_intent + "' has fewer than " + std::to_string(need) +
                        " utterances (gave up after " + std::to_string(retries) + " retries)");
}

inline std::vector<Episode> sample_balanced_episodes(const LabeledCorpus& corpus,
                                                     const std::vector<IntentLabel>& allowed,
                                                     const EpisodeSpec& spec, std::size_t count, Rng& rng) {
  std::vector<Episode> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(sample_balanced_episode(corpus, allowed, spec, rng, static_cast<std::int64_t>(i)));
  }
  return out;
}

// --- statistics ----------------------------------------------------------------

struct EpisodeStats {
  std::size_t episode_count = 0;
  double avg_intents_per_episode = 0;
  double avg_support_size = 0;
  std::size_t min_support_size = 0;
  std::size_t max_support_size = 0;
  double avg_query_size = 0;
  std::size_t min_query_size = 0;
  std::size_t max_query_size = 0;
};

inline EpisodeStats compute_stats(const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ValidationError("compute_stats: empty episode list");
  EpisodeStats s;
  s.episode_count = episodes.size();
  s.min_support_size = s.min_query_size = std::numeric_limits<std::size_t>::max();
  double intents = 0, support = 0, query = 0;
  for (const auto& e : episodes) {
    intents += static_cast<double>(e.intents.size());
    support += static_cast<double>(e.support.size());
    query += static_cast<double>(e.query.size());
    s.min_support_size = std::min(s.min_support_size, e.support.size());
    s.max_support_size = std::max(s.max_support_size, e.support.size());
    s.min_query_size = std::min(s.min_query_size, e.query.size());
    s.max_query_size = std::max(s.max_query_size, e.query.size());
  }
  const auto n = static_cast<double>(episodes.size());
  s.avg_intents_per_episode = intents / n;
  s.avg_support_size = support / n;
  s.avg_query_size = query / n;
  return s;
}

// --- imbalanced episodes ----------------------------------------------------------

struct SizeRange {
  int min = 0;
  int max = 0;

  bool contains(double v) const { return v >= min && v <= max; }
};

/// Per-episode sampling ranges plus the batch-level targets they should hit.
///
/// Per episode: draw the intent count from `intents`, a shot count per intent
/// from `shots`, and one query count (shared by all intents) from
/// `query_per_intent`. Draws whose totals fall outside `support` / `query`,
/// or that ask more of an intent than it holds, are rejected.
struct ImbalancedConfig {
  SizeRange intents{3, 5};
  SizeRange shots{1, 6};
  SizeRange query_per_intent{2, 6};
  SizeRange support{8, 19};
  SizeRange query{9, 30};
  double target_avg_intents = 0;  ///< 0 disables the check
  double target_avg_support = 0;
  double target_avg_query = 0;
  double tolerance = 1.0;
  int retries = kDefaultSamplingRetries;

  void validate() const {
    for (const auto* r : {&intents, &shots, &query_per_intent, &support, &query}) {
      if (r->min < 1 || r->max < r->min) throw ValidationError("imbalanced config: bad range");
    }
    if (intents.min * shots.min > support.max) {
      throw ValidationError("imbalanced config: min intents x min shots exceeds support max");
    }
    if (intents.max * shots.max < support.min) {
      throw ValidationError("imbalanced config: max intents x max shots below support min");
    }
    if (intents.min * query_per_intent.min > query.max || intents.max * query_per_intent.max < query.min) {
      throw ValidationError("imbalanced config: query range unreachable");
    }
  }
};

/// ATIS-train shaped batches: four intents, support in [8, 19] averaging
/// about 15.5, query in [9, 30].
inline ImbalancedConfig atis_train_style() {
  ImbalancedConfig c;
  c.intents = {4, 4};
  c.shots = {2, 6};
  c.query_per_intent = {3, 4};
  c.support = {8, 19};
  c.query = {9, 30};
  c.target_avg_intents = 4;
  c.target_avg_support = 15.54;
  c.target_avg_query = 14.52;
  return c;
}

/// SNIPS-test shaped batches: three intents, support in [16, 17], exactly
/// 30 queries.
inline ImbalancedConfig snips_test_style() {
  ImbalancedConfig c;
  c.intents = {3, 3};
  c.shots = {5, 6};
  c.query_per_intent = {10, 10};
  c.support = {16, 17};
  c.query = {30, 30};
  c.target_avg_intents = 3;
  c.target_avg_support = 16.56;
  c.target_avg_query = 30;
  return c;
}

/// Batch constraints violated by `stats`; empty when the batch conforms.
inline std::vector<std::string> verify_stats(const EpisodeStats& stats, const ImbalancedConfig& cfg) {
  std::vector<std::string> bad;
  auto range = [&](const char* what, std::size_t lo, std::size_t hi, const SizeRange& r) {
    if (static_cast<int>(lo) < r.min || static_cast<int>(hi) > r.max) {
      bad.push_back(std::string(what) + " sizes [" + std::to_string(lo) + ", " + std::to_string(hi) +
                    "] outside [" + std::to_string(r.min) + ", " + std::to_string(r.max) + "]");
    }
  };
  range("support", stats.min_support_size, stats.max_support_size, cfg.support);
  range("query", stats.min_query_size, stats.max_query_size, cfg.query);
  auto target = [&](const char* what, double got, double want) {
    if (want > 0 && std::abs(got - want) > cfg.tolerance) {
      bad.push_back(std::string(what) + " average " + std::to_string(got) + " not within " +
                    std::to_string(cfg.tolerance) + " of " + std::to_string(want));
    }
  };
  target("intents", stats.avg_intents_per_episode, cfg.target_avg_intents);
  target("support", stats.avg_support_size, cfg.target_avg_support);
  target("query", stats.avg_query_size, cfg.target_avg_query);
  return bad;
}

inline std::vector<Episode> build_imbalanced_episodes(const LabeledCorpus& corpus,
                                                      const std::vector<IntentLabel>& allowed,
                                                      const ImbalancedConfig& cfg, std::size_t episode_count,
                                                      Rng& rng) {
  std::vector<Episode> out;
  if (episode_count == 0) return out;
  cfg.validate();
  if (allowed.size() < static_cast<std::size_t>(cfg.intents.min)) {
    throw ValidationError("imbalanced episodes need " + std::to_string(cfg.intents.min) + " intents, only " +
                          std::to_string(allowed.size()) + " available");
  }
  const int max_intents = std::min<int>(cfg.intents.max, static_cast<int>(allowed.size()));
  out.reserve(episode_count);
  for (std::size_t idx = 0; idx < episode_count; ++idx) {
    std::string last_violation = "none";
    bool done = false;
    for (int attempt = 0; attempt <= cfg.retries && !done; ++attempt) {
      const auto n = static_cast<std::size_t>(rng.uniform_range(cfg.intents.min, max_intents));
      const auto picks = rng.sample_indices(allowed.size(), n);
      std::vector<int> shots(n);
      int support_total = 0;
      for (auto& s : shots) {
        s = static_cast<int>(rng.uniform_range(cfg.shots.min, cfg.shots.max));
        support_total += s;
      }
      const int q = static_cast<int>(rng.uniform_range(cfg.query_per_intent.min, cfg.query_per_intent.max));
      const int query_total = q * static_cast<int>(n);
      if (!cfg.support.contains(support_total)) {
        last_violation = "support size " + std::to_string(support_total) + " outside range";
        continue;
      }
      if (!cfg.query.contains(query_total)) {
        last_violation = "query size " + std::to_string(query_total) + " outside range";
        continue;
      }
      bool enough = true;
      for (std::size_t i = 0; i < n; ++i) {
        if (corpus.members(allowed[picks[i]]).size() < static_cast<std::size_t>(shots[i] + q)) {
          last_violation = "intent '" + allowed[picks[i]].name + "' has too few utterances";
          enough = false;
          break;
        }
      }
      if (!enough) continue;
      Episode e;
      e.episode_id = static_cast<std::int64_t>(idx);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& label = allowed[picks[i]];
        const auto& members = corpus.members(label);
        const auto need = static_cast<std::size_t>(shots[i] + q);
        const auto chosen = rng.sample_indices(members.size(), need);
        e.intents.push_back(label);
        for (std::size_t j = 0; j < need; ++j) {
          const auto& u = corpus.utterances()[members[chosen[j]]];
          (j < static_cast<std::size_t>(shots[i]) ? e.support : e.query).push_back(u);
        }
      }
      out.push_back(std::move(e));
      done = true;
    }
    if (!done) {
      throw ValidationError("imbalanced episode " + std::to_string(idx) + ": no valid draw after " +
                            std::to_string(cfg.retries) + " retries (last violation: " + last_violation + ")");
    }
  }
  return out;
}

// --- persistence -------------------------------------------------------------

inline nlohmann::json to_json(const Utterance& u) {
  return {{"id", u.id}, {"text", u.text}, {"label", u.label.name}};
}

inline nlohmann::json to_json(const Episode& e) {
  nlohmann::json j;
  j["episode_id"] = e.episode_id;
  auto& intents = j["intents"] = nlohmann::json::array();
  for (const auto& i : e.intents) intents.push_back(i.name);
  auto& support = j["support"] = nlohmann::json::array();
  for (const auto& u : e.support) support.push_back(to_json(u));
  auto& query = j["query"] = nlohmann::json::array();
  for (const auto& u : e.query) query.push_back(to_json(u));
  return j;
}

inline Episode episode_from_json(const nlohmann::json& j) {
  Episode e;
  e.episode_id = j.at("episode_id").get<std::int64_t>();
  for (const auto& i : j.at("intents")) e.intents.emplace_back(i.get<std::string>());
  auto utterances = [](const nlohmann::json& arr) {
    std::vector<Utterance> out;
    for (const auto& u : arr) {
      out.push_back({u.at("id").get<std::string>(), u.at("text").get<std::string>(),
                     IntentLabel{u.at("label").get<std::string>()}});
    }
    return out;
  };
  e.support = utterances(j.at("support"));
  e.query = utterances(j.at("query"));
  return e;
}

inline void write_episodes(std::ostream& out, const std::vector<Episode>& episodes) {
  for (const auto& e : episodes) out << to_json(e).dump() << '\n';
}

/// Reads one episode per line; errors name the offending line.
inline std::vector<Episode> read_episodes(std::istream& in) {
  std::vector<Episode> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto e = episode_from_json(nlohmann::json::parse(line));
      validate_episode(e);
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + ex.what());
    } catch (const ValidationError& ex) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  return out;
}

inline void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_episodes(out, episodes);
}

inline std::vector<Episode> load_episodes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open episode file '" + path + "'");
  return read_episodes(in);
}

/// Throws if any episode uses an intent outside `allowed`.
inline void check_no_leakage(const std::vector<Episode>& episodes, const std::vector<IntentLabel>& allowed,
                             const std::string& what) {
  std::set<IntentLabel> ok(allowed.begin(), allowed.end());
  for (const auto& e : episodes) {
    for (const auto& i : e.intents) {
      if (!ok.count(i)) {
        throw ValidationError(what + " episode " + std::to_string(e.episode_id) + " uses intent '" + i.name +
                              "' outside its split");
      }
    }
  }
}

}  // namespace fsic
