#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fsic/checkpoint.hpp"
#include "fsic/datamodel.hpp"
#include "fsic/episodes.hpp"
#include "fsic/inference.hpp"
#include "fsic/synthetic.hpp"
#include "fsic/training.hpp"

namespace fsic {

namespace fs = std::filesystem;

// --- seeds --------------------------------------------------------------------------

/// Seed for one pipeline component of one fold, derived from the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view component, int fold) {
  std::string key = std::to_string(master) + "/" + std::string(component) + "/" + std::to_string(fold);
  return fnv1a(key);
}

// --- configuration ------------------------------------------------------------------

enum class Method { similarity, protonet, random, frozen_be_np };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::similarity: return "similarity";
    case Method::protonet: return "protonet";
    case Method::random: return "random";
    case Method::frozen_be_np: return "frozen-be-np";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  for (auto m : {Method::similarity, Method::protonet, Method::random, Method::frozen_be_np}) {
    if (s == to_string(m)) return m;
  }
  throw ValidationError("unknown method '" + s + "' (expected similarity, protonet, random or frozen-be-np)");
}

struct SyntheticCorpusConfig {
  int intents = 15;
  int utterances_per_intent = 40;
  VocabularyDesign design;
};

/// Everything one experiment needs. Text form: one `key = value` per line,
/// `#` starts a comment. The README lists every key.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string dataset_name = "synthetic";
  std::string corpus_path;  ///< empty: generate a synthetic corpus
  SyntheticCorpusConfig synthetic;
  SplitCounts split{7, 3, 5};
  int folds = 0;  ///< 0: 5 for balanced episodes, 1 for imbalanced
  Method method = Method::similarity;
  std::string backbone = "toy";
  ModelConfig model;
  EpisodeMode mode = EpisodeMode::balanced;
  int n_way = 5;
  int k_shot = 1;
  int query_per_intent = 5;
  int train_query_per_intent = 5;
  int valid_n_way = 0;  ///< 0: min(n_way, validation intents)
  int train_episodes = 10000;
  int valid_episodes = 100;
  int test_episodes = 600;
  ImbalancedConfig imbalanced = atis_train_style();
  TrainConfig train;

  /// Rejects invalid combinations before any work is done.
  void validate() const {
    if (method == Method::similarity) model.validate();
    if (backbone != "toy") {
      throw ValidationError("backbone '" + backbone + "' is not available; only the toy backbone is built in");
    }
    if (folds < 0) throw ValidationError("folds must be non-negative");
    if (split.train < 1 || split.valid < 1 || split.test < 1) throw ValidationError("every split needs an intent");
    if (valid_episodes < 1 || test_episodes < 1) throw ValidationError("episode counts must be positive");
    if (train_episodes < 0) throw ValidationError("train_episodes must be non-negative");
    if (corpus_path.empty() && (synthetic.intents < 1 || synthetic.utterances_per_intent < 1)) {
      throw ValidationError("synthetic corpus counts must be positive");
    }
    synthetic.design.validate();
    if (mode == EpisodeMode::balanced) {
      EpisodeSpec{n_way, k_shot, query_per_intent, mode, 0}.validate();
      EpisodeSpec{n_way, k_shot, train_query_per_intent, mode, 0}.validate();
      if (valid_n_way < 0) throw ValidationError("episodes.valid_n_way must be non-negative");
      if (valid_n_way > 0) EpisodeSpec{valid_n_way, k_shot, query_per_intent, mode, 0}.validate();
    } else {
      imbalanced.validate();
    }
    train.validate();
  }

  int fold_count() const {
    if (folds > 0) return folds;
    return mode == EpisodeMode::balanced ? 5 : 1;
  }

  /// Row label used in tables.
  std::string label() const {
    switch (method) {
      case Method::similarity: return model.name() + " " + to_string(train.regime);
      case Method::protonet: return "ProtoNet";
      case Method::random: return "Random";
      case Method::frozen_be_np: return "BE(fixed)+NP";
    }
    return "?";
  }
};

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream is(value);
  T out{};
  is >> out;
  if (!is || !(is >> std::ws).eof()) throw ValidationError("key '" + key + "': cannot parse '" + value + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ValidationError("key '" + key + "': expected true or false, got '" + value + "'");
}

/// Binds every config key to a field, for parsing and printing alike.
struct ConfigBinding {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

inline std::map<std::string, ConfigBinding> config_bindings(ExperimentConfig& c) {
  std::map<std::string, ConfigBinding> b;
  auto integer = [&b](const std::string& key, auto& field) {
    using T = std::remove_reference_t<decltype(field)>;
    b[key] = {[&field, key](const std::string& v) { field = parse_number<T>(key, v); },
              [&field] { return std::to_string(field); }};
  };
  auto real = [&b](const std::string& key, double& field) {
    b[key] = {[&field, key](const std::string& v) { field = parse_number<double>(key, v); },
              [&field] { return format_double(field); }};
  };
  auto text = [&b](const std::string& key, std::string& field) {
    b[key] = {[&field](const std::string& v) { field = v; }, [&field] { return field; }};
  };
  auto flag = [&b](const std::string& key, bool& field) {
    b[key] = {[&field, key](const std::string& v) { field = parse_bool(key, v); },
              [&field] { return std::string(field ? "true" : "false"); }};
  };
  auto range = [&](const std::string& key, SizeRange& r) {
    integer(key + ".min", r.min);
    integer(key + ".max", r.max);
  };

  integer("seed", c.seed);
  text("data.name", c.dataset_name);
  text("data.corpus", c.corpus_path);
  integer("data.synthetic.intents", c.synthetic.intents);
  integer("data.synthetic.utterances_per_intent", c.synthetic.utterances_per_intent);
  integer("data.synthetic.keywords_per_intent", c.synthetic.design.keywords_per_intent);
  integer("data.synthetic.keywords_per_utterance", c.synthetic.design.keywords_per_utterance);
  integer("data.synthetic.filler_pool", c.synthetic.design.filler_pool);
  integer("data.synthetic.fillers_min", c.synthetic.design.fillers_min);
  integer("data.synthetic.fillers_max", c.synthetic.design.fillers_max);
  integer("split.train", c.split.train);
  integer("split.valid", c.split.valid);
  integer("split.test", c.split.test);
  integer("folds", c.folds);
  b["method"] = {[&c](const std::string& v) { c.method = parse_method(v); },
                 [&c] { return std::string(to_string(c.method)); }};
  text("model.backbone", c.backbone);
  b["model.architecture"] = {[&c](const std::string& v) { c.model.architecture = parse_architecture(v); },
                             [&c] { return std::string(to_string(c.model.architecture)); }};
  b["model.scoring"] = {[&c](const std::string& v) { c.model.scoring = parse_scoring(v); },
                        [&c] { return std::string(to_string(c.model.scoring)); }};
  integer("model.dim", c.model.backbone.dim);
  integer("model.hash_size", c.model.backbone.hash_size);
  flag("model.train_embeddings", c.model.backbone.train_embeddings);
  flag("model.head_dropout", c.model.head_dropout);
  b["episodes.mode"] = {[&c](const std::string& v) {
                          if (v == "balanced") c.mode = EpisodeMode::balanced;
                          else if (v == "imbalanced") c.mode = EpisodeMode::imbalanced;
                          else throw ValidationError("episodes.mode: expected balanced or imbalanced, got '" + v + "'");
                        },
                        [&c] { return std::string(c.mode == EpisodeMode::balanced ? "balanced" : "imbalanced"); }};
  integer("episodes.n_way", c.n_way);
  integer("episodes.k_shot", c.k_shot);
  integer("episodes.query_per_intent", c.query_per_intent);
  integer("episodes.train_query_per_intent", c.train_query_per_intent);
  integer("episodes.valid_n_way", c.valid_n_way);
  integer("episodes.train_count", c.train_episodes);
  integer("episodes.valid_count", c.valid_episodes);
  integer("episodes.test_count", c.test_episodes);
  range("imbalanced.intents", c.imbalanced.intents);
  range("imbalanced.shots", c.imbalanced.shots);
  range("imbalanced.query_per_intent", c.imbalanced.query_per_intent);
  range("imbalanced.support", c.imbalanced.support);
  range("imbalanced.query", c.imbalanced.query);
  real("imbalanced.target_avg_intents", c.imbalanced.target_avg_intents);
  real("imbalanced.target_avg_support", c.imbalanced.target_avg_support);
  real("imbalanced.target_avg_query", c.imbalanced.target_avg_query);
  real("imbalanced.tolerance", c.imbalanced.tolerance);
  b["train.regime"] = {[&c](const std::string& v) { c.train.regime = parse_regime(v); },
                       [&c] { return std::string(to_string(c.train.regime)); }};
  real("train.learning_rate", c.train.learning_rate);
  integer("train.batch_size", c.train.batch_size);
  integer("train.max_sequence_length", c.train.max_sequence_length);
  integer("train.max_episodes", c.train.max_episodes);
  integer("train.eval_every_updates", c.train.eval_every_updates);
  integer("train.patience_evals", c.train.patience_evals);
  real("train.weight_decay", c.train.optimizer.weight_decay);
  real("train.beta1", c.train.optimizer.beta1);
  real("train.beta2", c.train.optimizer.beta2);
  real("train.epsilon", c.train.optimizer.epsilon);
  return b;
}

}  // namespace detail

/// Applies `key = value` lines on top of the defaults. `imbalanced.preset`
/// (atis-train or snips-test) is applied before any other imbalanced key.
inline ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig c;
  auto bindings = detail::config_bindings(c);
  std::vector<std::tuple<std::size_t, std::string, std::string>> entries;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key(trim(body.substr(0, eq)));
    std::string value(trim(body.substr(eq + 1)));
    if (key.empty()) throw ValidationError("config line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) {
      throw ValidationError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    if (key != "imbalanced.preset" && !bindings.count(key)) {
      throw ValidationError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    entries.emplace_back(line_no, std::move(key), std::move(value));
  }
  for (const auto& [no, key, value] : entries) {
    if (key != "imbalanced.preset") continue;
    if (value == "atis-train") c.imbalanced = atis_train_style();
    else if (value == "snips-test") c.imbalanced = snips_test_style();
    else throw ValidationError("config line " + std::to_string(no) + ": unknown imbalanced preset '" + value + "'");
  }
  for (const auto& [no, key, value] : entries) {
    if (key == "imbalanced.preset") continue;
    try {
      bindings.at(key).set(value);
    } catch (const ValidationError& e) {
      throw ValidationError("config line " + std::to_string(no) + ": " + e.what());
    }
  }
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path + "'");
  return parse_config(in);
}

/// Every key with its current value, sorted by key; parse_config(to_text(c))
/// reproduces c.
inline std::string to_text(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  std::ostringstream os;
  for (const auto& [key, binding] : detail::config_bindings(c)) os << key << " = " << binding.get() << "\n";
  return os.str();
}

/// FSIC_SEED, when set, replaces the master seed.
inline void apply_seed_override(ExperimentConfig& c) {
  const char* v = std::getenv("FSIC_SEED");
  if (!v || !*v) return;
  c.seed = detail::parse_number<std::uint64_t>("FSIC_SEED", v);
}

// --- per-fold data ---------------------------------------------------------------------

inline LabeledCorpus experiment_corpus(const ExperimentConfig& c) {
  if (!c.corpus_path.empty()) return load_corpus(c.corpus_path);
  return make_synthetic_corpus(c.synthetic.intents, c.synthetic.utterances_per_intent, c.synthetic.design,
                               derive_seed(c.seed, "corpus", 0));
}

struct FoldData {
  FoldSplit split;
  std::vector<Episode> train;
  std::vector<Episode> valid;
  std::vector<Episode> test;
};

inline nlohmann::json to_json(const FoldSplit& s) {
  auto names = [](const std::vector<IntentLabel>& v) {
    std::vector<std::string> out;
    for (const auto& l : v) out.push_back(l.name);
    return out;
  };
  return {{"fold", s.fold_index},
          {"seed", s.seed},
          {"train", names(s.train_intents)},
          {"valid", names(s.valid_intents)},
          {"test", names(s.test_intents)}};
}

inline FoldSplit fold_split_from_json(const nlohmann::json& j) {
  auto labels = [](const nlohmann::json& arr) {
    std::vector<IntentLabel> out;
    for (const auto& s : arr) out.push_back(IntentLabel{s.get<std::string>()});
    return out;
  };
  FoldSplit s;
  s.fold_index = j.at("fold").get<int>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train_intents = labels(j.at("train"));
  s.valid_intents = labels(j.at("valid"));
  s.test_intents = labels(j.at("test"));
  return s;
}

/// Throws unless the three splits are pairwise disjoint and every episode
/// stays inside its own split.
inline void check_fold(const FoldData& f) {
  std::set<IntentLabel> train(f.split.train_intents.begin(), f.split.train_intents.end());
  std::set<IntentLabel> valid(f.split.valid_intents.begin(), f.split.valid_intents.end());
  for (const auto& i : f.split.test_intents) {
    if (train.count(i) || valid.count(i)) throw ValidationError("test intent '" + i.name + "' leaks into training");
  }
  for (const auto& i : f.split.valid_intents) {
    if (train.count(i)) throw ValidationError("validation intent '" + i.name + "' leaks into training");
  }
  check_no_leakage(f.train, f.split.train_intents, "training");
  check_no_leakage(f.valid, f.split.valid_intents, "validation");
  check_no_leakage(f.test, f.split.test_intents, "test");
}

inline FoldData build_fold(const LabeledCorpus& corpus, const ExperimentConfig& c, int fold) {
  FoldData f;
  f.split = split_intents(corpus, c.split, derive_seed(c.seed, "split", fold), fold);
  auto balanced = [&](const std::vector<IntentLabel>& intents, int n_way, int qpi, int count, const char* what) {
    Rng rng(derive_seed(c.seed, what, fold));
    EpisodeSpec spec{n_way, c.k_shot, qpi, EpisodeMode::balanced, 0};
    return sample_balanced_episodes(corpus, intents, spec, static_cast<std::size_t>(count), rng);
  };
  auto imbalanced = [&](const std::vector<IntentLabel>& intents, int count, const char* what) {
    Rng rng(derive_seed(c.seed, what, fold));
    return build_imbalanced_episodes(corpus, intents, c.imbalanced, static_cast<std::size_t>(count), rng);
  };
  const bool needs_train = c.method == Method::similarity || c.method == Method::protonet;
  const int train_count = needs_train && !(c.method == Method::similarity && c.train.regime == Regime::ne)
                              ? c.train_episodes
                              : 0;
  if (c.mode == EpisodeMode::balanced) {
    f.train = balanced(f.split.train_intents, c.n_way, c.train_query_per_intent, train_count, "train-episodes");
    const int valid_way = c.valid_n_way > 0 ? c.valid_n_way
                                            : std::min(c.n_way, static_cast<int>(f.split.valid_intents.size()));
    f.valid = balanced(f.split.valid_intents, valid_way, c.query_per_intent, c.valid_episodes, "valid-episodes");
    f.test = balanced(f.split.test_intents, c.n_way, c.query_per_intent, c.test_episodes, "test-episodes");
  } else {
    f.train = imbalanced(f.split.train_intents, train_count, "train-episodes");
    f.valid = imbalanced(f.split.valid_intents, c.valid_episodes, "valid-episodes");
    f.test = imbalanced(f.split.test_intents, c.test_episodes, "test-episodes");
  }
  check_fold(f);
  return f;
}

inline std::string fold_dir_name(int fold) { return "fold_" + std::to_string(fold); }

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void save_fold(const fs::path& dir, const FoldData& f) {
  fs::create_directories(dir);
  write_text(dir / "split.json", to_json(f.split).dump(2) + "\n");
  save_episodes((dir / "train.jsonl").string(), f.train);
  save_episodes((dir / "valid.jsonl").string(), f.valid);
  save_episodes((dir / "test.jsonl").string(), f.test);
}

inline FoldData load_fold(const fs::path& dir) {
  FoldData f;
  try {
    f.split = fold_split_from_json(nlohmann::json::parse(read_text(dir / "split.json")));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError((dir / "split.json").string() + ": " + e.what());
  }
  f.train = load_episodes((dir / "train.jsonl").string());
  f.valid = load_episodes((dir / "valid.jsonl").string());
  f.test = load_episodes((dir / "test.jsonl").string());
  check_fold(f);
  return f;
}

/// Writes corpus, config echo and per-fold episode files under `dir`.
inline std::vector<FoldData> prepare_episodes(const ExperimentConfig& c, const LabeledCorpus& corpus,
                                              const fs::path& dir) {
  c.validate();
  fs::create_directories(dir);
  write_text(dir / "config.txt", to_text(c));
  save_corpus(corpus, (dir / "corpus.jsonl").string());
  std::vector<FoldData> folds;
  for (int k = 0; k < c.fold_count(); ++k) {
    try {
      folds.push_back(build_fold(corpus, c, k));
    } catch (const ValidationError& e) {
      throw ValidationError("fold " + std::to_string(k) + " (seed " + std::to_string(c.seed) + "): " + e.what());
    }
    save_fold(dir / fold_dir_name(k), folds.back());
  }
  return folds;
}

inline int count_folds(const fs::path& dir) {
  int n = 0;
  while (fs::exists(dir / fold_dir_name(n))) ++n;
  return n;
}

// --- training --------------------------------------------------------------------------

using Model = SimilarityModel<float>;

inline ModelConfig model_config_for(const ExperimentConfig& c, int fold) {
  ModelConfig m = c.model;
  if (c.method != Method::similarity) {
    m.architecture = Architecture::bi;
    m.scoring = ScoringKind::non_parameterized;
  }
  m.backbone.max_sequence_length = c.train.max_sequence_length;
  m.backbone.seed = derive_seed(c.seed, "backbone", fold);
  m.head_seed = derive_seed(c.seed, "head", fold);
  return m;
}

struct TrainedFold {
  Model model;
  TrainState state;
};

/// Trains (or, for untrained baselines, just initializes) the model of one fold.
inline TrainedFold train_fold(const ExperimentConfig& c, const LabeledCorpus& corpus, const FoldData& f, int fold,
                              const TrainLogger& log = {}) {
  c.validate();
  TrainedFold out{Model(model_config_for(c, fold)), {}};
  TrainConfig tc = c.train;
  tc.seed = derive_seed(c.seed, "train", fold);
  if (c.method == Method::random || c.method == Method::frozen_be_np) {
    out.state.rng_state = Rng(tc.seed).state();
    return out;
  }
  if (f.valid.empty()) throw ValidationError("fold " + std::to_string(fold) + " has no validation episodes");
  if (c.method == Method::protonet) {
    out.state = train_protonet(out.model.backbone(), cycle_episodes(f.train), tc, f.valid, log);
    return out;
  }
  TrainData data;
  if (tc.regime == Regime::ne) {
    std::set<IntentLabel> allowed(f.split.train_intents.begin(), f.split.train_intents.end());
    for (const auto& u : corpus.utterances()) {
      if (allowed.count(u.label)) data.utterances.push_back(u);
    }
  } else {
    data.episodes = cycle_episodes(f.train);
  }
  out.state = train(out.model, data, tc, f.valid, log);
  return out;
}

inline std::vector<std::string> intent_names(const std::vector<IntentLabel>& v) {
  std::vector<std::string> out;
  for (const auto& l : v) out.push_back(l.name);
  return out;
}

inline CheckpointMeta checkpoint_meta(const ExperimentConfig& c, const FoldData& f, const TrainedFold& t, int fold) {
  CheckpointMeta m;
  m.train_config = {{"experiment", to_text(c)},
                    {"train", to_json(c.train)},
                    {"fold", fold},
                    {"train_intents", intent_names(f.split.train_intents)},
                    {"history", t.state.history},
                    {"initial_validation_accuracy", t.state.initial_validation_accuracy},
                    {"stopped_early", t.state.stopped_early}};
  m.update_count = t.state.update_count;
  m.best_update = t.state.best_update;
  m.best_validation_accuracy = t.state.best_validation_accuracy;
  m.rng_state = t.state.rng_state;
  return m;
}

// --- evaluation ------------------------------------------------------------------------

inline std::string fnv1a_hex(std::string_view s) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(s);
  return os.str();
}

/// Stable hash of an episode list (ids, intents and utterance ids in order).
inline std::string episode_fingerprint(const std::vector<Episode>& episodes) {
  std::string key;
  for (const auto& e : episodes) {
    key += std::to_string(e.episode_id) + "|i";
    for (const auto& i : e.intents) key += "," + i.name;
    key += "|s";
    for (const auto& u : e.support) key += "," + u.id;
    key += "|q";
    for (const auto& u : e.query) key += "," + u.id;
    key += "\n";
  }
  return fnv1a_hex(key);
}

struct FoldResult {
  int fold = 0;
  std::vector<double> accuracies;
  double mean = 0;
  double std = 0;
  std::string episode_fingerprint;
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) throw ValidationError("mean of an empty list");
  double sum = 0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  double sq = 0;
  for (double x : v) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(v.size()))};
}

struct EvaluationReport {
  std::string label;
  std::string dataset;
  std::string config;  ///< config echo
  std::vector<FoldResult> folds;
  std::vector<double> accuracies;  ///< every episode of every fold, fold order
  double mean = 0;
  double std = 0;
  std::string episode_fingerprint;
  double wall_clock_seconds = 0;

  std::vector<double> fold_means() const {
    std::vector<double> out;
    for (const auto& f : folds) out.push_back(f.mean);
    return out;
  }

  /// Everything except timing; identical for identical runs.
  nlohmann::json body() const {
    nlohmann::json folds_json = nlohmann::json::array();
    for (const auto& f : folds) {
      folds_json.push_back({{"fold", f.fold},
                            {"episode_accuracies", f.accuracies},
                            {"mean", f.mean},
                            {"std", f.std},
                            {"episode_fingerprint", f.episode_fingerprint}});
    }
    return {{"label", label},
            {"dataset", dataset},
            {"config", config},
            {"folds", folds_json},
            {"fold_means", fold_means()},
            {"episode_accuracies", accuracies},
            {"mean", mean},
            {"std", std},
            {"episode_fingerprint", episode_fingerprint}};
  }

  nlohmann::json to_json() const { return {{"body", body()}, {"wall_clock_seconds", wall_clock_seconds}}; }
};

/// Recomputes the aggregate fields from the per-fold accuracy lists.
inline void finalize(EvaluationReport& r) {
  if (r.folds.empty()) throw ValidationError("report without folds");
  r.accuracies.clear();
  std::string fp;
  for (auto& f : r.folds) {
    std::tie(f.mean, f.std) = mean_std(f.accuracies);
    r.accuracies.insert(r.accuracies.end(), f.accuracies.begin(), f.accuracies.end());
    fp += f.episode_fingerprint;
  }
  std::tie(r.mean, r.std) = mean_std(r.accuracies);
  r.episode_fingerprint = fnv1a_hex(fp);
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  try {
    const auto& b = j.at("body");
    EvaluationReport r;
    r.label = b.at("label").get<std::string>();
    r.dataset = b.at("dataset").get<std::string>();
    r.config = b.at("config").get<std::string>();
    for (const auto& f : b.at("folds")) {
      FoldResult fr;
      fr.fold = f.at("fold").get<int>();
      fr.accuracies = f.at("episode_accuracies").get<std::vector<double>>();
      fr.episode_fingerprint = f.at("episode_fingerprint").get<std::string>();
      r.folds.push_back(std::move(fr));
    }
    finalize(r);
    const double stored = b.at("mean").get<double>();
    if (std::abs(stored - r.mean) > 1e-12) throw ValidationError("report mean does not match its episode list");
    r.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

inline EvaluationReport load_report(const fs::path& path) {
  try {
    return report_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

struct EpisodeEvaluation {
  std::vector<double> accuracies;
  std::vector<std::pair<std::int64_t, Prediction>> predictions;
};

/// Runs `predict` over every episode; per-episode accuracy is correct / |Q|.
inline EpisodeEvaluation evaluate(const Predictor& predict, const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ValidationError("evaluation needs at least one episode");
  EpisodeEvaluation out;
  for (const auto& e : episodes) {
    if (e.query.empty()) throw ValidationError("episode " + std::to_string(e.episode_id) + " has no queries");
    const auto preds = predict(e);
    if (preds.size() != e.query.size()) throw ValidationError("predictor returned the wrong number of predictions");
    std::set<IntentLabel> intents(e.intents.begin(), e.intents.end());
    for (const auto& p : preds) {
      if (!intents.count(p.predicted)) throw ValidationError("prediction outside the episode intents");
      out.predictions.emplace_back(e.episode_id, p);
    }
    out.accuracies.push_back(episode_accuracy(preds));
  }
  return out;
}

inline void write_predictions(const fs::path& path, const std::vector<std::pair<std::int64_t, Prediction>>& preds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (const auto& [episode_id, p] : preds) {
    nlohmann::json j = {{"episode_id", episode_id},
                        {"query_id", p.query_id},
                        {"gold", p.gold.name},
                        {"predicted", p.predicted.name},
                        {"score", p.score}};
    out << j.dump() << "\n";
  }
}

/// Predictor matching the configured method. `model` must outlive it.
inline Predictor make_predictor(const ExperimentConfig& c, const Model& model, int fold) {
  switch (c.method) {
    case Method::similarity: return nn_predictor(model);
    case Method::protonet: return protonet_predictor(model.backbone());
    case Method::random: return random_predictor(derive_seed(c.seed, "random-baseline", fold));
    case Method::frozen_be_np: return frozen_be_np_predictor(model.backbone());
  }
  throw std::logic_error("unhandled method");
}

/// Leakage guard: no test intent may be among the intents the model trained on.
inline void check_test_intents(const std::vector<Episode>& test, const std::vector<std::string>& trained_on) {
  std::set<std::string> seen(trained_on.begin(), trained_on.end());
  for (const auto& e : test) {
    for (const auto& i : e.intents) {
      if (seen.count(i.name)) {
        throw ValidationError("test episode " + std::to_string(e.episode_id) + " uses training intent '" + i.name +
                              "'");
      }
    }
  }
}

/// Evaluates a restored checkpoint on test episodes.
inline FoldResult evaluate_checkpoint(const Checkpoint& ck, const std::vector<Episode>& test,
                                      const fs::path& predictions_path) {
  const auto c = parse_config(ck.meta.train_config.at("experiment").get<std::string>());
  const int fold = ck.meta.train_config.at("fold").get<int>();
  check_test_intents(test, ck.meta.train_config.at("train_intents").get<std::vector<std::string>>());
  const Model model = restore_model<float>(ck);
  auto ev = evaluate(make_predictor(c, model, fold), test);
  if (!predictions_path.empty()) write_predictions(predictions_path, ev.predictions);
  FoldResult r;
  r.fold = fold;
  r.accuracies = std::move(ev.accuracies);
  r.episode_fingerprint = episode_fingerprint(test);
  return r;
}

inline EvaluationReport make_report(const ExperimentConfig& c, std::vector<FoldResult> folds, double seconds) {
  EvaluationReport r;
  r.label = c.label();
  r.dataset = c.dataset_name;
  r.config = to_text(c);
  r.folds = std::move(folds);
  r.wall_clock_seconds = seconds;
  finalize(r);
  return r;
}

inline std::string render_report(const EvaluationReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "# " << r.label << " on " << r.dataset << "\n\n";
  os << "| fold | episodes | mean | std |\n|---|---|---|---|\n";
  for (const auto& f : r.folds) {
    os << "| " << f.fold << " | " << f.accuracies.size() << " | " << f.mean << " | " << f.std << " |\n";
  }
  os << "| all | " << r.accuracies.size() << " | " << r.mean << " | " << r.std << " |\n\n";
  os << "episode fingerprint: " << r.episode_fingerprint << "\n";
  return os.str();
}

inline void write_report(const fs::path& dir, const EvaluationReport& r) {
  fs::create_directories(dir);
  write_text(dir / "report.json", r.to_json().dump(2) + "\n");
  write_text(dir / "report.md", render_report(r));
}

/// Full pipeline: corpus, folds, training, evaluation; artifacts under `out`.
inline EvaluationReport run_experiment(const ExperimentConfig& c, const fs::path& out, const TrainLogger& log = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto corpus = experiment_corpus(c);
  const auto folds = prepare_episodes(c, corpus, out);
  std::vector<FoldResult> results;
  for (int k = 0; k < c.fold_count(); ++k) {
    const auto dir = out / fold_dir_name(k);
    try {
      auto trained = train_fold(c, corpus, folds[k], k, log);
      save_checkpoint((dir / "checkpoint.bin").string(), trained.model, checkpoint_meta(c, folds[k], trained, k));
      results.push_back(evaluate_checkpoint(load_checkpoint((dir / "checkpoint.bin").string()), folds[k].test,
                                            dir / "predictions.jsonl"));
    } catch (const ValidationError& e) {
      throw ValidationError("fold " + std::to_string(k) + " (seed " + std::to_string(c.seed) + "): " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("fold " + std::to_string(k) + " (seed " + std::to_string(c.seed) + "): " + e.what());
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  auto report = make_report(c, std::move(results), secs);
  write_report(out, report);
  return report;
}

// --- comparison table ------------------------------------------------------------------

/// Markdown table: one row per configuration, one column per dataset plus
/// Avg (unweighted mean over datasets). The best value of each column is
/// bold. Reports on the same dataset must share their test episodes.
inline std::string make_table(const std::vector<EvaluationReport>& reports, bool with_std = true) {
  if (reports.empty()) throw ValidationError("make_table needs at least one report");
  std::vector<std::string> datasets, rows;
  std::map<std::string, std::string> fingerprint;
  std::map<std::pair<std::string, std::string>, const EvaluationReport*> cell;
  for (const auto& r : reports) {
    if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
    if (std::find(rows.begin(), rows.end(), r.label) == rows.end()) rows.push_back(r.label);
    auto [it, fresh] = fingerprint.emplace(r.dataset, r.episode_fingerprint);
    if (!fresh && it->second != r.episode_fingerprint) {
      throw ValidationError("reports on '" + r.dataset + "' were evaluated on different episode sets");
    }
    if (!cell.emplace(std::make_pair(r.label, r.dataset), &r).second) {
      throw ValidationError("two reports for '" + r.label + "' on '" + r.dataset + "'");
    }
  }
  for (const auto& row : rows) {
    for (const auto& d : datasets) {
      if (!cell.count({row, d})) throw ValidationError("no report for '" + row + "' on '" + d + "'");
    }
  }
  const std::size_t ncol = datasets.size() + 1;
  std::vector<std::vector<double>> value(rows.size(), std::vector<double>(ncol));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < datasets.size(); ++j) {
      value[i][j] = cell.at({rows[i], datasets[j]})->mean;
      sum += value[i][j];
    }
    value[i][datasets.size()] = sum / static_cast<double>(datasets.size());
  }
  std::vector<std::size_t> best(ncol, 0);
  for (std::size_t j = 0; j < ncol; ++j) {
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (value[i][j] > value[best[j]][j]) best[j] = i;
    }
  }
  std::ostringstream os;
  os << "| Method |";
  for (const auto& d : datasets) os << " " << d << " |";
  os << " Avg |\n|---|";
  for (std::size_t j = 0; j < ncol; ++j) os << "---|";
  os << "\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    os << "| " << rows[i] << " |";
    for (std::size_t j = 0; j < ncol; ++j) {
      std::ostringstream v;
      v << std::fixed << std::setprecision(2) << 100.0 * value[i][j];
      if (with_std && j < datasets.size()) {
        v << " ± " << std::fixed << std::setprecision(2) << 100.0 * cell.at({rows[i], datasets[j]})->std;
      }
      os << " " << (best[j] == i ? "**" + v.str() + "**" : v.str()) << " |";
    }
    os << "\n";
  }
  if (with_std) os << "\n± is the standard deviation of per-episode accuracy.\n";
  return os.str();
}

}  // namespace fsic
