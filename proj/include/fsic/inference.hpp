#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "fsic/episodes.hpp"
#include "fsic/rng.hpp"
#include "fsic/scoring.hpp"

namespace fsic {

struct Prediction {
  std::string query_id;
  IntentLabel gold;
  IntentLabel predicted;
  double score = 0;
  std::vector<double> scores;  ///< per neighbour (NN) or per class (ProtoNet)
};

/// Index of the largest value; ties go to the lowest index.
template <class Scalar>
std::size_t argmax_first(std::span<const Scalar> values) {
  if (values.empty()) throw ValidationError("argmax of an empty score list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// 1-NN rule: the label of the highest-scoring neighbour.
template <class Scalar>
Prediction predict_from_scores(const Utterance& query, std::span<const Scalar> scores,
                               std::span<const Utterance* const> support) {
  if (support.empty()) throw ValidationError("nearest-neighbour prediction needs a non-empty support set");
  if (scores.size() != support.size()) throw DimensionError("predict_from_scores", support.size(), scores.size());
  const auto best = argmax_first(scores);
  Prediction p;
  p.query_id = query.id;
  p.gold = query.label;
  p.predicted = support[best]->label;
  p.score = static_cast<double>(scores[best]);
  p.scores.assign(scores.begin(), scores.end());
  return p;
}

template <class Scalar>
Prediction nn_predict(const SimilarityModel<Scalar>& model, const Utterance& query,
                      const std::vector<Utterance>& support) {
  if (support.empty()) throw ValidationError("nearest-neighbour prediction needs a non-empty support set");
  const auto ptrs = SimilarityModel<Scalar>::pointers(support);
  const auto scores = model.score_all(query, ptrs, ScoreMode::infer);
  return predict_from_scores<Scalar>(query, scores, ptrs);
}

/// nn_predict over every query of an episode. BE models encode each
/// utterance once for the whole episode.
template <class Scalar>
std::vector<Prediction> nn_predict_episode(const SimilarityModel<Scalar>& model, const Episode& e) {
  std::vector<Prediction> out;
  out.reserve(e.query.size());
  const auto ptrs = SimilarityModel<Scalar>::pointers(e.support);
  if (model.config().architecture == Architecture::cross) {
    for (const auto& q : e.query) out.push_back(nn_predict(model, q, e.support));
    return out;
  }
  EncodingCache<Scalar> cache;
  for (const auto& q : e.query) {
    const auto& hq = cache.get(model.backbone(), q);
    std::vector<Scalar> scores;
    scores.reserve(e.support.size());
    for (const auto& c : e.support) {
      const auto& hc = cache.get(model.backbone(), c);
      if (model.config().scoring == ScoringKind::non_parameterized) {
        scores.push_back(np_infer_score<Scalar>(hq, hc));
      } else {
        scores.push_back(pa_score<Scalar>(model.head().weight(), model.head().bias(), bi_pair_features<Scalar>(hq, hc)));
      }
    }
    out.push_back(predict_from_scores<Scalar>(q, scores, ptrs));
  }
  return out;
}

// --- ProtoNet --------------------------------------------------------------------

/// Support utterances grouped per intent, in the episode's intent order.
inline std::vector<std::vector<const Utterance*>> group_support(const std::vector<IntentLabel>& intents,
                                                                const std::vector<Utterance>& support) {
  std::vector<std::vector<const Utterance*>> groups(intents.size());
  for (const auto& u : support) {
    std::size_t i = 0;
    while (i < intents.size() && !(intents[i] == u.label)) ++i;
    if (i == intents.size()) throw ValidationError("support label '" + u.label.name + "' not in intents");
    groups[i].push_back(&u);
  }
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i].empty()) throw ValidationError("intent '" + intents[i].name + "' has no support utterances");
  }
  return groups;
}

/// Prediction from per-class squared distances: probabilities are
/// softmax(-distance), the label is the nearest prototype (lowest index on ties).
inline Prediction protonet_from_distances(const Utterance& query, const std::vector<IntentLabel>& intents,
                                          const std::vector<double>& distances) {
  std::vector<double> neg(distances.size());
  for (std::size_t i = 0; i < distances.size(); ++i) neg[i] = -distances[i];
  const auto best = argmax_first<double>(neg);
  const double mx = neg[best];
  double z = 0;
  std::vector<double> probs(neg.size());
  for (std::size_t i = 0; i < neg.size(); ++i) z += probs[i] = std::exp(neg[i] - mx);
  for (auto& p : probs) p /= z;
  Prediction p;
  p.query_id = query.id;
  p.gold = query.label;
  p.predicted = intents[best];
  p.score = probs[best];
  p.scores = std::move(probs);
  return p;
}

template <class Scalar>
std::vector<RowVector<Scalar>> prototypes(const ToyBackbone<Scalar>& backbone,
                                          const std::vector<std::vector<const Utterance*>>& groups,
                                          EncodingCache<Scalar>& cache) {
  std::vector<RowVector<Scalar>> protos;
  for (const auto& g : groups) {
    if (g.empty()) throw ValidationError("empty class group");
    RowVector<Scalar> mean = RowVector<Scalar>::Zero(static_cast<Eigen::Index>(backbone.dim()));
    for (const auto* u : g) mean += cache.get(backbone, *u);
    protos.push_back(mean / static_cast<Scalar>(g.size()));
  }
  return protos;
}

template <class Scalar>
Prediction protonet_predict(const ToyBackbone<Scalar>& backbone, const Utterance& query,
                            const std::vector<IntentLabel>& intents, const std::vector<Utterance>& support,
                            EncodingCache<Scalar>* shared_cache = nullptr) {
  EncodingCache<Scalar> local;
  auto& cache = shared_cache ? *shared_cache : local;
  const auto protos = prototypes(backbone, group_support(intents, support), cache);
  const auto& hq = cache.get(backbone, query);
  std::vector<double> dist;
  for (const auto& p : protos) dist.push_back(static_cast<double>((hq - p).squaredNorm()));
  return protonet_from_distances(query, intents, dist);
}

/// 1-NN with score -||h_q - h_c||^2 over backbone encodings.
template <class Scalar>
Prediction euclidean_nn_predict(const ToyBackbone<Scalar>& backbone, const Utterance& query,
                                const std::vector<Utterance>& support, EncodingCache<Scalar>* shared_cache = nullptr) {
  if (support.empty()) throw ValidationError("nearest-neighbour prediction needs a non-empty support set");
  EncodingCache<Scalar> local;
  auto& cache = shared_cache ? *shared_cache : local;
  const auto& hq = cache.get(backbone, query);
  std::vector<double> scores;
  for (const auto& c : support) scores.push_back(-static_cast<double>((hq - cache.get(backbone, c)).squaredNorm()));
  return predict_from_scores<double>(query, scores, SimilarityModel<Scalar>::pointers(support));
}

template <class Scalar>
std::vector<Prediction> protonet_predict_episode(const ToyBackbone<Scalar>& backbone, const Episode& e) {
  EncodingCache<Scalar> cache;
  std::vector<Prediction> out;
  for (const auto& q : e.query) out.push_back(protonet_predict(backbone, q, e.intents, e.support, &cache));
  return out;
}

// --- baselines ---------------------------------------------------------------------

/// Uniform draw over the episode intents.
inline Prediction random_predict(const Utterance& query, const std::vector<IntentLabel>& intents, Rng& rng) {
  if (intents.empty()) throw ValidationError("random prediction needs at least one intent");
  const auto i = static_cast<std::size_t>(rng.uniform_int(intents.size()));
  Prediction p;
  p.query_id = query.id;
  p.gold = query.label;
  p.predicted = intents[i];
  p.score = 1.0 / static_cast<double>(intents.size());
  p.scores.assign(intents.size(), p.score);
  return p;
}

/// BE(fixed)+NP: cosine 1-NN over encodings from any backbone, no training.
inline Prediction frozen_be_np_predict(const Backbone& backbone, const Utterance& query,
                                       const std::vector<Utterance>& support) {
  if (support.empty()) throw ValidationError("nearest-neighbour prediction needs a non-empty support set");
  auto as_row = [](const std::vector<float>& v) {
    RowVector<double> r(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) r(static_cast<Eigen::Index>(i)) = v[i];
    return r;
  };
  const auto hq = as_row(backbone.encode(query.text));
  std::vector<double> scores;
  for (const auto& c : support) scores.push_back(np_infer_score<double>(hq, as_row(backbone.encode(c.text))));
  return predict_from_scores<double>(query, scores, SimilarityModel<double>::pointers(support));
}

/// Same rule evaluated natively on a toy backbone, in its own precision.
template <class Scalar>
Prediction frozen_be_np_predict(const ToyBackbone<Scalar>& backbone, const Utterance& query,
                                const std::vector<Utterance>& support, EncodingCache<Scalar>* shared_cache = nullptr) {
  if (support.empty()) throw ValidationError("nearest-neighbour prediction needs a non-empty support set");
  EncodingCache<Scalar> local;
  auto& cache = shared_cache ? *shared_cache : local;
  const auto& hq = cache.get(backbone, query);
  std::vector<Scalar> scores;
  for (const auto& c : support) scores.push_back(np_infer_score<Scalar>(hq, cache.get(backbone, c)));
  return predict_from_scores<Scalar>(query, scores, SimilarityModel<Scalar>::pointers(support));
}

/// Produces predictions for every query of an episode.
using Predictor = std::function<std::vector<Prediction>(const Episode&)>;

template <class Scalar>
Predictor nn_predictor(const SimilarityModel<Scalar>& model) {
  return [&model](const Episode& e) { return nn_predict_episode(model, e); };
}

template <class Scalar>
Predictor protonet_predictor(const ToyBackbone<Scalar>& backbone) {
  return [&backbone](const Episode& e) { return protonet_predict_episode(backbone, e); };
}

/// correct / |queries| for one episode's predictions.
inline double episode_accuracy(const std::vector<Prediction>& predictions) {
  if (predictions.empty()) throw ValidationError("accuracy of an episode without queries");
  std::size_t correct = 0;
  for (const auto& p : predictions) correct += p.predicted == p.gold;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

/// Unweighted mean of per-episode accuracies.
inline double mean_episode_accuracy(const Predictor& predict, const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw ValidationError("accuracy over an empty episode list");
  double sum = 0;
  for (const auto& e : episodes) sum += episode_accuracy(predict(e));
  return sum / static_cast<double>(episodes.size());
}

inline Predictor random_predictor(std::uint64_t seed) {
  return [rng = Rng(seed)](const Episode& e) mutable {
    std::vector<Prediction> out;
    for (const auto& q : e.query) out.push_back(random_predict(q, e.intents, rng));
    return out;
  };
}

template <class Scalar>
Predictor frozen_be_np_predictor(const ToyBackbone<Scalar>& backbone) {
  return [&backbone](const Episode& e) {
    EncodingCache<Scalar> cache;
    std::vector<Prediction> out;
    for (const auto& q : e.query) out.push_back(frozen_be_np_predict(backbone, q, e.support, &cache));
    return out;
  };
}

inline Predictor frozen_be_np_predictor(const Backbone& backbone) {
  return [&backbone](const Episode& e) {
    std::vector<Prediction> out;
    for (const auto& q : e.query) out.push_back(frozen_be_np_predict(backbone, q, e.support));
    return out;
  };
}

}  // namespace fsic
