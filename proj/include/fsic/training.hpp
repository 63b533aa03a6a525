#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsic/autodiff.hpp"
#include "fsic/episodes.hpp"
#include "fsic/inference.hpp"
#include "fsic/scoring.hpp"

namespace fsic {

/// Scores are clamped to [kScoreClamp, 1 - kScoreClamp] before taking logs.
inline constexpr double kScoreClamp = 1e-7;

enum class Regime { ne, ep, epsq };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::ne: return "NE";
    case Regime::ep: return "EP";
    case Regime::epsq: return "EPSQ";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "NE" || s == "ne") return Regime::ne;
  if (s == "EP" || s == "ep") return Regime::ep;
  if (s == "EPSQ" || s == "epsq") return Regime::epsq;
  throw ValidationError("unknown regime '" + s + "' (expected NE, EP or EPSQ)");
}

/// Binary cross-entropy of one query against its neighbours, averaged over
/// the neighbours.
template <class Scalar>
Scalar query_loss(std::span<const Scalar> labels, std::span<const Scalar> scores,
                  Scalar clamp = static_cast<Scalar>(kScoreClamp)) {
  if (labels.size() != scores.size()) throw DimensionError("query_loss", labels.size(), scores.size());
  if (labels.empty()) throw ValidationError("query_loss: no neighbours");
  Scalar total = 0;
  for (std::size_t t = 0; t < labels.size(); ++t) {
    const Scalar s = scores[t];
    if (!(s >= 0 && s <= 1)) throw ValidationError("query_loss: score " + std::to_string(s) + " outside [0, 1]");
    const Scalar c = std::clamp(s, clamp, Scalar(1) - clamp);
    const Scalar y = labels[t];
    total -= y * std::log(c) + (Scalar(1) - y) * std::log(Scalar(1) - c);
  }
  return total / static_cast<Scalar>(labels.size());
}

/// One query scored against a list of neighbours.
struct QueryTask {
  const Utterance* query = nullptr;
  std::vector<const Utterance*> neighbours;
};

/// y_t = 1 iff neighbour t shares the query's intent.
template <class Scalar>
std::vector<Scalar> label_vector(const QueryTask& task) {
  std::vector<Scalar> y;
  y.reserve(task.neighbours.size());
  for (const auto* c : task.neighbours) y.push_back(c->label == task.query->label ? Scalar(1) : Scalar(0));
  return y;
}

/// Every utterance of the pool against all the others (NE batches, EP episodes).
inline std::vector<QueryTask> leave_one_out_tasks(const std::vector<Utterance>& pool) {
  if (pool.size() < 2) throw ValidationError("need at least 2 utterances, got " + std::to_string(pool.size()));
  std::vector<QueryTask> tasks(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    tasks[i].query = &pool[i];
    for (std::size_t j = 0; j < pool.size(); ++j) {
      if (j != i) tasks[i].neighbours.push_back(&pool[j]);
    }
  }
  return tasks;
}

/// Every query-set utterance against the support set only (EPSQ).
inline std::vector<QueryTask> support_query_tasks(const Episode& e) {
  if (e.query.empty()) throw ValidationError("episode " + std::to_string(e.episode_id) + " has an empty query set");
  if (e.support.empty()) throw ValidationError("episode " + std::to_string(e.episode_id) + " has an empty support set");
  std::vector<QueryTask> tasks(e.query.size());
  for (std::size_t i = 0; i < e.query.size(); ++i) {
    tasks[i].query = &e.query[i];
    for (const auto& s : e.support) tasks[i].neighbours.push_back(&s);
  }
  return tasks;
}

/// Mean query loss over `tasks`. With `backward`, gradients of that mean are
/// accumulated into the model. Cross-encoder pairs are processed in chunks of
/// at most `chunk_pairs` pairs (whole queries per chunk); each chunk's
/// backward pass is scaled so the accumulated gradient equals the full mean.
template <class Scalar>
Scalar tasks_loss(const SimilarityModel<Scalar>& model, const std::vector<QueryTask>& tasks, bool backward,
                  std::size_t chunk_pairs = std::numeric_limits<std::size_t>::max()) {
  if (tasks.empty()) throw ValidationError("no query tasks");
  const bool chunked = model.config().architecture == Architecture::cross;
  const auto inv_n = Scalar(1) / static_cast<Scalar>(tasks.size());
  const auto eps = static_cast<Scalar>(kScoreClamp);
  Scalar total = 0;
  std::size_t i = 0;
  while (i < tasks.size()) {
    std::size_t end = i;
    std::size_t pairs = 0;
    do {
      pairs += tasks[end].neighbours.size();
      ++end;
    } while (end < tasks.size() && (!chunked || pairs + tasks[end].neighbours.size() <= chunk_pairs));
    Tape<Scalar> tape(backward);
    typename SimilarityModel<Scalar>::TapeCache cache;
    std::vector<typename Tape<Scalar>::Var> losses;
    for (std::size_t t = i; t < end; ++t) {
      auto s = model.score_on(tape, *tasks[t].query, tasks[t].neighbours, ScoreMode::train, cache);
      losses.push_back(tape.bce_mean(s, label_vector<Scalar>(tasks[t]), eps));
    }
    auto chunk = tape.sum(tape.concat_rows(losses));
    const Scalar value = tape.scalar(chunk);
    if (!std::isfinite(static_cast<double>(value))) throw NumericError("non-finite training loss");
    total += value;
    if (backward) tape.backward(chunk, inv_n);
    i = end;
  }
  return total * inv_n;
}

// --- optimizer -----------------------------------------------------------------------

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Skips frozen tensors.
template <class Scalar>
class AdamW {
 public:
  AdamW(double learning_rate, AdamWConfig cfg = {}) : lr_(learning_rate), cfg_(cfg) {
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
  }

  double learning_rate() const { return lr_; }
  std::int64_t steps() const { return t_; }

  void step(const std::vector<ParameterSet<Scalar>*>& sets) {
    ++t_;
    if (moments_.size() < sets.size()) moments_.resize(sets.size());
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < sets.size(); ++s) {
      auto& set = *sets[s];
      auto& mom = moments_[s];
      if (mom.size() < set.size()) mom.resize(set.size());
      for (std::size_t i = 0; i < set.size(); ++i) {
        auto& p = set[i];
        if (!p.trainable) continue;
        auto& [m, v] = mom[i];
        if (m.size() == 0) {
          m = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
          v = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
        }
        const auto b1 = static_cast<Scalar>(cfg_.beta1), b2 = static_cast<Scalar>(cfg_.beta2);
        m = b1 * m + (Scalar(1) - b1) * p.grad;
        v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseProduct(p.grad);
        const auto lr = static_cast<Scalar>(lr_);
        p.value *= Scalar(1) - lr * static_cast<Scalar>(cfg_.weight_decay);
        const Matrix<Scalar> mhat = m / static_cast<Scalar>(bc1);
        const Matrix<Scalar> vhat = v / static_cast<Scalar>(bc2);
        p.value.array() -= lr * mhat.array() / (vhat.array().sqrt() + static_cast<Scalar>(cfg_.epsilon));
      }
    }
  }

 private:
  double lr_;
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<std::pair<Matrix<Scalar>, Matrix<Scalar>>>> moments_;
};

// --- regime steps ---------------------------------------------------------------------

/// Losses without an update; used by the steps below and by evaluation code.
template <class Scalar>
Scalar ne_loss(const SimilarityModel<Scalar>& model, const std::vector<Utterance>& batch, bool backward = false,
               std::size_t chunk_pairs = std::numeric_limits<std::size_t>::max()) {
  return tasks_loss(model, leave_one_out_tasks(batch), backward, chunk_pairs);
}

template <class Scalar>
Scalar ep_loss(const SimilarityModel<Scalar>& model, const Episode& e, bool backward = false,
               std::size_t chunk_pairs = std::numeric_limits<std::size_t>::max()) {
  const auto pool = e.pool();
  return tasks_loss(model, leave_one_out_tasks(pool), backward, chunk_pairs);
}

template <class Scalar>
Scalar epsq_loss(const SimilarityModel<Scalar>& model, const Episode& e, bool backward = false,
                 std::size_t chunk_pairs = std::numeric_limits<std::size_t>::max()) {
  return tasks_loss(model, support_query_tasks(e), backward, chunk_pairs);
}

/// Each batch member is a query against the other B - 1; one update.
template <class Scalar>
Scalar ne_step(SimilarityModel<Scalar>& model, AdamW<Scalar>& opt, const std::vector<Utterance>& batch,
               std::size_t chunk_pairs) {
  if (batch.size() < 2) throw ValidationError("NE batch needs at least 2 utterances");
  model.zero_grad();
  const Scalar loss = ne_loss(model, batch, true, chunk_pairs);
  opt.step(model.parameter_sets());
  return loss;
}

/// Support and query merged into one pool; every member is a query against
/// the rest; one update.
template <class Scalar>
Scalar ep_step(SimilarityModel<Scalar>& model, AdamW<Scalar>& opt, const Episode& e, std::size_t chunk_pairs) {
  if (e.size() < 2) throw ValidationError("EP episode needs at least 2 utterances");
  model.zero_grad();
  const Scalar loss = ep_loss(model, e, true, chunk_pairs);
  opt.step(model.parameter_sets());
  return loss;
}

/// Query-set members against the support set only; one update.
template <class Scalar>
Scalar epsq_step(SimilarityModel<Scalar>& model, AdamW<Scalar>& opt, const Episode& e, std::size_t chunk_pairs) {
  model.zero_grad();
  const Scalar loss = epsq_loss(model, e, true, chunk_pairs);
  opt.step(model.parameter_sets());
  return loss;
}

// --- ProtoNet baseline training ------------------------------------------------------

/// Mean over queries of -log softmax(-||h_q - prototype||^2)[gold].
template <class Scalar>
Scalar protonet_loss(const ToyBackbone<Scalar>& backbone, const Episode& e, bool backward) {
  if (e.query.empty()) throw ValidationError("ProtoNet episode needs queries");
  const auto groups = group_support(e.intents, e.support);
  Tape<Scalar> tape(backward);
  std::vector<typename Tape<Scalar>::Var> protos;
  for (const auto& g : groups) {
    std::vector<typename Tape<Scalar>::Var> members;
    for (const auto* u : g) members.push_back(backbone.forward(tape, backbone.single_sequence(u->text)));
    protos.push_back(tape.scale(tape.sum_rows(tape.concat_rows(members)), Scalar(1) / static_cast<Scalar>(g.size())));
  }
  auto p = tape.concat_rows(protos);
  std::vector<typename Tape<Scalar>::Var> losses;
  for (const auto& q : e.query) {
    std::size_t gold = 0;
    while (!(e.intents[gold] == q.label)) ++gold;
    auto hq = backbone.forward(tape, backbone.single_sequence(q.text));
    losses.push_back(tape.nll_softmax(tape.scale(tape.sq_distances(hq, p), Scalar(-1)), static_cast<Eigen::Index>(gold)));
  }
  auto total = tape.sum(tape.concat_rows(losses));
  const auto inv = Scalar(1) / static_cast<Scalar>(e.query.size());
  if (backward) tape.backward(total, inv);
  return tape.scalar(total) * inv;
}

template <class Scalar>
Scalar protonet_step(ToyBackbone<Scalar>& backbone, AdamW<Scalar>& opt, const Episode& e) {
  backbone.parameters().zero_grad();
  const Scalar loss = protonet_loss(backbone, e, true);
  if (!std::isfinite(static_cast<double>(loss))) throw NumericError("non-finite ProtoNet loss");
  opt.step({&backbone.parameters()});
  return loss;
}

// --- training loop --------------------------------------------------------------------

struct TrainConfig {
  Regime regime = Regime::ep;
  double learning_rate = 2e-5;
  int batch_size = 64;
  int max_sequence_length = 64;
  int max_episodes = 10000;
  int eval_every_updates = 100;
  int patience_evals = 5;
  std::uint64_t seed = 0;
  AdamWConfig optimizer;

  void validate() const {
    if (!(learning_rate > 0)) throw ValidationError("learning_rate must be positive");
    if (batch_size < 1 || max_sequence_length < 1 || max_episodes < 1 || eval_every_updates < 1 ||
        patience_evals < 1) {
      throw ValidationError("training counts must be positive");
    }
  }
};

/// Stops after `patience` consecutive evaluations without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Returns true when `score` is a new best.
  bool observe(double score) {
    if (score > best_) {
      best_ = score;
      since_ = 0;
      return true;
    }
    ++since_;
    return false;
  }

  bool should_stop() const { return since_ >= patience_; }
  double best() const { return best_; }
  int evals_since_improvement() const { return since_; }

 private:
  int patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  int since_ = 0;
};

struct TrainState {
  std::int64_t update_count = 0;
  std::int64_t best_update = 0;
  double initial_validation_accuracy = 0;
  double best_validation_accuracy = 0;
  int evals_since_improvement = 0;
  bool stopped_early = false;
  std::string rng_state;
  std::vector<std::pair<std::int64_t, double>> history;  ///< (update, validation accuracy)
  std::vector<double> losses;
};

/// Source of training episodes; called with consecutive indices.
using EpisodeStream = std::function<Episode(std::size_t)>;

inline EpisodeStream cycle_episodes(const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ValidationError("no training episodes");
  return [&episodes](std::size_t i) { return episodes[i % episodes.size()]; };
}

struct TrainData {
  /// NE: utterances of the training intents.
  std::vector<Utterance> utterances;
  /// EP / EPSQ: episodes from the training intents.
  EpisodeStream episodes;
};

using TrainLogger = std::function<void(const std::string&)>;

/// Update / evaluate / early-stop driver shared by every trainer. `step`
/// performs update number `i` and returns its loss, `evaluate` returns the
/// current validation accuracy, `snapshot` and `restore` save and reinstate
/// the best parameters. Validation runs before the first update and every
/// cfg.eval_every_updates updates; the best-scoring state (the initial one
/// included) is restored at the end.
inline TrainState run_training_loop(const TrainConfig& cfg, const std::function<double(std::size_t)>& step,
                                    const std::function<double()>& evaluate, const std::function<void()>& snapshot,
                                    const std::function<void()>& restore, const TrainLogger& log = {}) {
  cfg.validate();
  TrainState state;
  EarlyStopping stopper(cfg.patience_evals);
  auto evaluate_now = [&] {
    const double acc = evaluate();
    state.history.emplace_back(state.update_count, acc);
    if (stopper.observe(acc)) {
      state.best_update = state.update_count;
      snapshot();
    }
    state.best_validation_accuracy = stopper.best();
    state.evals_since_improvement = stopper.evals_since_improvement();
    if (log) log("update " + std::to_string(state.update_count) + " validation accuracy " + std::to_string(acc));
  };
  evaluate_now();
  state.initial_validation_accuracy = state.history.front().second;
  while (state.update_count < cfg.max_episodes) {
    const double loss = step(static_cast<std::size_t>(state.update_count));
    if (!std::isfinite(loss)) throw NumericError("non-finite loss at update " + std::to_string(state.update_count));
    state.losses.push_back(loss);
    ++state.update_count;
    if (state.update_count % cfg.eval_every_updates == 0) {
      evaluate_now();
      if (stopper.should_stop()) {
        state.stopped_early = true;
        break;
      }
    }
  }
  if (!state.stopped_early && state.update_count % cfg.eval_every_updates != 0) evaluate_now();
  restore();
  return state;
}

/// Runs the chosen regime for at most cfg.max_episodes updates with
/// nearest-neighbour validation accuracy driving early stopping. The model is
/// left at the best checkpoint.
template <class Scalar>
TrainState train(SimilarityModel<Scalar>& model, const TrainData& data, const TrainConfig& cfg,
                 const std::vector<Episode>& validation, const TrainLogger& log = {}) {
  cfg.validate();
  if (validation.empty()) throw ValidationError("training needs validation episodes");
  if (cfg.regime == Regime::ne && data.utterances.size() < 2) throw ValidationError("NE needs training utterances");
  if (cfg.regime != Regime::ne && !data.episodes) throw ValidationError("episodic training needs an episode stream");

  AdamW<Scalar> opt(cfg.learning_rate, cfg.optimizer);
  Rng rng(cfg.seed);
  const auto chunk = static_cast<std::size_t>(cfg.batch_size);

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  auto next_batch = [&] {
    if (order.size() - cursor < 2) {
      order.resize(data.utterances.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);
      cursor = 0;
    }
    const auto n = std::min(order.size() - cursor, static_cast<std::size_t>(cfg.batch_size));
    std::vector<Utterance> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(data.utterances[order[cursor++]]);
    return batch;
  };
  auto step = [&](std::size_t i) -> double {
    switch (cfg.regime) {
      case Regime::ne: return static_cast<double>(ne_step(model, opt, next_batch(), chunk));
      case Regime::ep: return static_cast<double>(ep_step(model, opt, data.episodes(i), chunk));
      case Regime::epsq: return static_cast<double>(epsq_step(model, opt, data.episodes(i), chunk));
    }
    return 0;
  };
  std::vector<ParameterSet<Scalar>> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto* p : std::as_const(model).parameter_sets()) best.push_back(*p);
  };
  auto restore = [&] {
    auto sets = model.parameter_sets();
    for (std::size_t i = 0; i < sets.size(); ++i) sets[i]->assign_values(best[i]);
  };
  auto evaluate = [&] { return mean_episode_accuracy(nn_predictor(model), validation); };
  auto state = run_training_loop(cfg, step, evaluate, snapshot, restore, log);
  state.rng_state = rng.state();
  return state;
}

/// Episodic ProtoNet training of a bare backbone; validation uses
/// prototype classification.
template <class Scalar>
TrainState train_protonet(ToyBackbone<Scalar>& backbone, const EpisodeStream& episodes, const TrainConfig& cfg,
                          const std::vector<Episode>& validation, const TrainLogger& log = {}) {
  cfg.validate();
  if (validation.empty()) throw ValidationError("training needs validation episodes");
  if (!episodes) throw ValidationError("ProtoNet training needs an episode stream");
  AdamW<Scalar> opt(cfg.learning_rate, cfg.optimizer);
  ParameterSet<Scalar> best;
  auto step = [&](std::size_t i) { return static_cast<double>(protonet_step(backbone, opt, episodes(i))); };
  auto evaluate = [&] { return mean_episode_accuracy(protonet_predictor(std::as_const(backbone)), validation); };
  auto snapshot = [&] { best = backbone.parameters(); };
  auto restore = [&] { backbone.parameters().assign_values(best); };
  auto state = run_training_loop(cfg, step, evaluate, snapshot, restore, log);
  state.rng_state = Rng(cfg.seed).state();
  return state;
}

}  // namespace fsic
