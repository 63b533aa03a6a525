#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "fsic/inference.hpp"
#include "fsic/synthetic.hpp"

using namespace fsic;

namespace {

Utterance utt(std::string id, std::string text, std::string label) {
  return Utterance{std::move(id), std::move(text), IntentLabel(std::move(label))};
}

ModelConfig design(Architecture a, ScoringKind s, std::uint64_t seed = 3) {
  ModelConfig m;
  m.architecture = a;
  m.scoring = s;
  m.backbone.dim = 16;
  m.backbone.hash_size = 256;
  m.backbone.seed = seed;
  m.head_seed = seed + 1;
  return m;
}

const LabeledCorpus& corpus() {
  static const auto c = make_synthetic_corpus(8, 15, {}, 51);
  return c;
}

std::vector<Episode> episodes(int n, std::uint64_t seed, int k = 1) {
  Rng rng(seed);
  return sample_balanced_episodes(corpus(), corpus().intents(), {5, k, 3}, n, rng);
}

std::vector<const Utterance*> ptrs(const std::vector<Utterance>& v) {
  std::vector<const Utterance*> out;
  for (const auto& u : v) out.push_back(&u);
  return out;
}

}  // namespace

TEST(Argmax, PicksHighestAndFirstOnTie) {
  EXPECT_EQ(argmax_first<double>(std::vector<double>{0.2, 0.9, 0.1}), 1u);
  EXPECT_EQ(argmax_first<double>(std::vector<double>{0.7, 0.7}), 0u);
  EXPECT_THROW(argmax_first<double>(std::vector<double>{}), ValidationError);
}

TEST(NearestNeighbour, FollowsScores) {
  const auto q = utt("q", "x", "A");
  const std::vector<Utterance> s = {utt("a", "a", "A"), utt("b", "b", "B"), utt("c", "c", "C")};
  const auto p = predict_from_scores<double>(q, std::vector<double>{0.2, 0.9, 0.1}, ptrs(s));
  EXPECT_EQ(p.predicted.name, "B");
  EXPECT_DOUBLE_EQ(p.score, 0.9);
  const std::vector<Utterance> one = {utt("a", "a", "Z")};
  EXPECT_EQ(predict_from_scores<double>(q, std::vector<double>{0.01}, ptrs(one)).predicted.name, "Z");
  const std::vector<Utterance> tie = {utt("a", "a", "A"), utt("b", "b", "B")};
  EXPECT_EQ(predict_from_scores<double>(q, std::vector<double>{0.5, 0.5}, ptrs(tie)).predicted.name, "A");
  EXPECT_THROW(predict_from_scores<double>(q, std::vector<double>{0.5}, ptrs(tie)), DimensionError);
  EXPECT_THROW(predict_from_scores<double>(q, std::vector<double>{}, {}), ValidationError);
}

TEST(NearestNeighbour, EpisodePathMatchesPerQueryPath) {
  for (auto [a, s] : {std::pair{Architecture::cross, ScoringKind::parameterized},
                      std::pair{Architecture::bi, ScoringKind::parameterized},
                      std::pair{Architecture::bi, ScoringKind::non_parameterized}}) {
    SimilarityModel<double> m(design(a, s));
    for (const auto& e : episodes(5, 1)) {
      const auto batch = nn_predict_episode(m, e);
      for (std::size_t i = 0; i < e.query.size(); ++i) {
        const auto single = nn_predict(m, e.query[i], e.support);
        EXPECT_EQ(batch[i].predicted, single.predicted);
        for (std::size_t j = 0; j < single.scores.size(); ++j) EXPECT_NEAR(batch[i].scores[j], single.scores[j], 1e-12);
      }
    }
  }
}

TEST(NearestNeighbour, InvariantToMonotoneTransformOfScores) {
  Rng rng(2);
  const auto q = utt("q", "x", "A");
  std::vector<Utterance> s;
  for (int i = 0; i < 6; ++i) s.push_back(utt("s" + std::to_string(i), "t", std::string(1, char('A' + i))));
  for (int t = 0; t < 500; ++t) {
    std::vector<double> scores, transformed;
    for (int i = 0; i < 6; ++i) {
      scores.push_back(rng.uniform_real());
      transformed.push_back(std::exp(3 * scores.back()) - 2);
    }
    ASSERT_EQ(predict_from_scores<double>(q, scores, ptrs(s)).predicted,
              predict_from_scores<double>(q, transformed, ptrs(s)).predicted);
  }
}

TEST(NearestNeighbour, CosineRuleIgnoresEncodingScale) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    RowVector<double> q(4), c(4);
    for (int i = 0; i < 4; ++i) q(i) = rng.uniform_real() - 0.5, c(i) = rng.uniform_real() - 0.5;
    ASSERT_NEAR(np_infer_score<double>(q, c), np_infer_score<double>(q * 7.5, c * 0.01), 1e-12);
  }
}

TEST(NearestNeighbour, Deterministic) {
  SimilarityModel<double> m(design(Architecture::cross, ScoringKind::parameterized));
  const auto eps = episodes(5, 4);
  EXPECT_EQ(mean_episode_accuracy(nn_predictor(m), eps), mean_episode_accuracy(nn_predictor(m), eps));
}

TEST(ProtoNet, FromDistances) {
  const auto q = utt("q", "x", "B");
  const std::vector<IntentLabel> intents = {IntentLabel("A"), IntentLabel("B"), IntentLabel("C")};
  const auto p = protonet_from_distances(q, intents, {4.0, 0.0, 1.0});
  EXPECT_EQ(p.predicted.name, "B");
  EXPECT_NEAR(std::accumulate(p.scores.begin(), p.scores.end(), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(p.scores[1] / p.scores[2], std::exp(1.0), 1e-12);
  EXPECT_EQ(protonet_from_distances(q, intents, {1.0, 1.0, 2.0}).predicted.name, "A");
}

TEST(ProtoNet, QueryEqualToSupportIsPredicted) {
  ToyBackboneConfig bc;
  bc.dim = 16;
  bc.hash_size = 256;
  ToyBackbone<double> bb(bc);
  for (const auto& e : episodes(20, 5)) {
    const auto p = protonet_predict(bb, e.support[2], e.intents, e.support);
    EXPECT_EQ(p.predicted, e.support[2].label);
  }
}

TEST(ProtoNet, ProbabilitiesSumToOneAndPermutationEquivariant) {
  ToyBackboneConfig bc;
  bc.dim = 16;
  bc.hash_size = 256;
  ToyBackbone<double> bb(bc);
  Rng rng(6);
  for (auto e : episodes(30, 7, 2)) {
    const auto before = protonet_predict_episode(bb, e);
    for (const auto& p : before) EXPECT_NEAR(std::accumulate(p.scores.begin(), p.scores.end(), 0.0), 1.0, 1e-12);
    rng.shuffle(e.support);
    rng.shuffle(e.intents);
    const auto after = protonet_predict_episode(bb, e);
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].predicted, after[i].predicted);
  }
}

TEST(ProtoNet, OneShotEqualsEuclideanNearestNeighbour) {
  ToyBackboneConfig bc;
  bc.dim = 16;
  bc.hash_size = 256;
  ToyBackbone<double> bb(bc);
  for (const auto& e : episodes(50, 8)) {
    for (const auto& q : e.query) {
      EXPECT_EQ(protonet_predict(bb, q, e.intents, e.support).predicted,
                euclidean_nn_predict(bb, q, e.support).predicted);
    }
  }
}

TEST(ProtoNet, SupportLabelOutsideIntentsErrors) {
  const std::vector<IntentLabel> intents = {IntentLabel("A")};
  EXPECT_THROW(group_support(intents, {utt("s", "t", "B")}), ValidationError);
  EXPECT_THROW(group_support({IntentLabel("A"), IntentLabel("B")}, {utt("s", "t", "A")}), ValidationError);
}

TEST(Random, SingletonAlwaysCorrect) {
  Rng rng(1);
  const std::vector<IntentLabel> one = {IntentLabel("A")};
  for (int i = 0; i < 50; ++i) EXPECT_EQ(random_predict(utt("q", "x", "A"), one, rng).predicted.name, "A");
  EXPECT_THROW(random_predict(utt("q", "x", "A"), {}, rng), ValidationError);
}

TEST(Random, DeterministicAndNearChance) {
  const auto eps = episodes(600, 9);
  const double a = mean_episode_accuracy(random_predictor(10), eps);
  EXPECT_EQ(a, mean_episode_accuracy(random_predictor(10), eps));
  EXPECT_NEAR(a, 0.2, 0.03);
}

TEST(FrozenBiEncoder, MatchesUntrainedBiEncoderNonParameterized) {
  const auto cfg = design(Architecture::bi, ScoringKind::non_parameterized);
  SimilarityModel<double> m(cfg);
  ToyBackbone<double> bb(cfg.backbone);
  const ToyBackbone<float> bbf(cfg.backbone);
  for (const auto& e : episodes(20, 11)) {
    for (const auto& q : e.query) {
      const auto ref = nn_predict(m, q, e.support);
      EXPECT_EQ(frozen_be_np_predict(bb, q, e.support).predicted, ref.predicted);
      const auto via_interface = frozen_be_np_predict(static_cast<const Backbone&>(bbf), q, e.support);
      EXPECT_EQ(via_interface.scores.size(), e.support.size());
    }
  }
}

TEST(Accuracy, EpisodeMeans) {
  std::vector<Prediction> p(4);
  for (auto& x : p) x.gold = x.predicted = IntentLabel("A");
  p[3].predicted = IntentLabel("B");
  EXPECT_DOUBLE_EQ(episode_accuracy(p), 0.75);
  EXPECT_THROW(episode_accuracy({}), ValidationError);
  EXPECT_THROW(mean_episode_accuracy(random_predictor(1), {}), ValidationError);
}
