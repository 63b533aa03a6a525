#include <gtest/gtest.h>

#include "fsic/scoring.hpp"
#include "fsic/synthetic.hpp"

using namespace fsic;
using RV = RowVector<double>;

namespace {

RV rv(std::initializer_list<double> v) {
  RV r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

ModelConfig design(Architecture a, ScoringKind s, int dim = 8) {
  ModelConfig m;
  m.architecture = a;
  m.scoring = s;
  m.backbone.dim = dim;
  m.backbone.hash_size = 128;
  m.backbone.seed = 2;
  m.head_seed = 3;
  return m;
}

std::vector<Utterance> utterances(std::initializer_list<const char*> texts) {
  std::vector<Utterance> out;
  int i = 0;
  for (const char* t : texts) out.push_back({"u" + std::to_string(i++), t, IntentLabel{"x"}});
  return out;
}

}  // namespace

TEST(PaScore, ZeroWeightsGiveHalf) { EXPECT_DOUBLE_EQ(pa_score<double>(rv({0, 0, 0}), 0.0, rv({3, -2, 9})), 0.5); }

TEST(PaScore, HandComputedSigmoid) {
  EXPECT_NEAR(pa_score<double>(rv({1, 0}), 0.0, rv({2, 5})), 0.8807970779778823, 1e-12);
  EXPECT_NEAR(pa_score<double>(rv({1, 0}), 0.0, rv({2, 5})), 0.8808, 1e-4);
}

TEST(PaScore, DimensionMismatchNamesBothSizes) {
  try {
    pa_score<double>(rv({1, 2, 3}), 0.0, rv({1, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("2"), std::string::npos);
  }
}

TEST(ScoringHead, BiHeadWidthIsFourD) {
  ScoringHead<double> bi(HeadKind::pa_bi, 4, 1);
  EXPECT_EQ(bi.input_dim(), 16);
  ScoringHead<double> ce(HeadKind::pa_cross, 4, 1);
  EXPECT_EQ(ce.input_dim(), 4);
  ScoringHead<double> np(HeadKind::np, 4, 1);
  EXPECT_EQ(np.parameters().scalar_count(), 0u);
  EXPECT_DOUBLE_EQ(bi.bias(), 0.0);
  EXPECT_LE(bi.weight().cwiseAbs().maxCoeff(), 1.0 / std::sqrt(16.0));
}

TEST(BiPairFeatures, HandComputedBlocks) {
  EXPECT_EQ(bi_pair_features<double>(rv({1, 2}), rv({3, -1})), rv({1, 2, 3, -1, 2, 3, 3, -2}));
}

TEST(BiPairFeatures, IdenticalInputsZeroDifference) {
  const auto v = rv({0.5, -2, 3});
  EXPECT_EQ(bi_pair_features<double>(v, v), rv({0.5, -2, 3, 0.5, -2, 3, 0, 0, 0, 0.25, 4, 9}));
  EXPECT_EQ(bi_pair_features<double>(rv({1, 1}), rv({2, 2})).size(), 8);
  EXPECT_THROW(bi_pair_features<double>(rv({1}), rv({1, 2})), DimensionError);
}

TEST(BiPairFeatures, PropertyBlockwiseReconstruction) {
  Rng rng(4);
  for (int t = 0; t < 200; ++t) {
    const auto d = static_cast<Eigen::Index>(1 + rng.uniform_int(10));
    RV q(d), c(d);
    for (Eigen::Index i = 0; i < d; ++i) q(i) = rng.uniform_real(-3, 3), c(i) = rng.uniform_real(-3, 3);
    const auto f = bi_pair_features<double>(q, c);
    for (Eigen::Index i = 0; i < d; ++i) {
      ASSERT_EQ(f(i), q(i));
      ASSERT_EQ(f(d + i), c(i));
      ASSERT_EQ(f(2 * d + i), std::abs(q(i) - c(i)));
      ASSERT_EQ(f(3 * d + i), q(i) * c(i));
    }
  }
}

TEST(NpTrainScore, HandComputed) {
  EXPECT_DOUBLE_EQ(np_train_score<double>(rv({1, 0}), rv({0, 7})), 0.5);
  EXPECT_NEAR(np_train_score<double>(rv({1, 1}), rv({1, 1})), 0.8808, 1e-4);
  EXPECT_NEAR(np_train_score<double>(rv({1, 0}), rv({-3, 0})), 0.0474, 1e-4);
  EXPECT_THROW(np_train_score<double>(rv({1}), rv({1, 2})), DimensionError);
}

TEST(NpInferScore, Cosine) {
  EXPECT_NEAR(np_infer_score<double>(rv({2, 3}), rv({2, 3})), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(np_infer_score<double>(rv({1, 0}), rv({0, 1})), 0.0);
  EXPECT_NEAR(np_infer_score<double>(rv({1, 1}), rv({-1, -1})), -1.0, 1e-15);
  EXPECT_THROW(np_infer_score<double>(rv({0, 0}), rv({1, 1})), NumericError);
}

TEST(NpInferScore, PropertyScaleInvariance) {
  Rng rng(5);
  for (int t = 0; t < 500; ++t) {
    RV q(6), c(6);
    for (Eigen::Index i = 0; i < 6; ++i) q(i) = rng.uniform_real(-1, 1), c(i) = rng.uniform_real(-1, 1);
    const double a = rng.uniform_real(0.01, 100), b = rng.uniform_real(0.01, 100);
    ASSERT_NEAR(np_infer_score<double>(q * a, c * b), np_infer_score<double>(q, c), 1e-6);
  }
}

TEST(ModelConfig, CrossWithNonParameterizedRejected) {
  EXPECT_THROW(SimilarityModel<float>(design(Architecture::cross, ScoringKind::non_parameterized)), ValidationError);
  EXPECT_NO_THROW(SimilarityModel<float>(design(Architecture::bi, ScoringKind::non_parameterized)));
  EXPECT_THROW(parse_architecture("XE"), ValidationError);
  EXPECT_THROW(parse_scoring("QQ"), ValidationError);
  EXPECT_EQ(design(Architecture::cross, ScoringKind::parameterized).name(), "CE+PA");
}

TEST(ScoreAll, ShapesAndModes) {
  const auto n = utterances({"book a flight", "play music", "set an alarm", "weather today"});
  const auto q = n[0];
  const std::vector<Utterance> one(n.begin() + 1, n.begin() + 2), three(n.begin() + 1, n.end());
  for (auto [a, s] : {std::pair{Architecture::cross, ScoringKind::parameterized},
                      std::pair{Architecture::bi, ScoringKind::parameterized},
                      std::pair{Architecture::bi, ScoringKind::non_parameterized}}) {
    SimilarityModel<double> m(design(a, s));
    EXPECT_EQ(m.score_all(q, one).size(), 1u);
    const auto train = m.score_all(q, three, ScoreMode::train);
    ASSERT_EQ(train.size(), 3u);
    for (double x : train) {
      EXPECT_GT(x, 0.0);
      EXPECT_LT(x, 1.0);
    }
    EXPECT_THROW(m.score_all(q, std::vector<Utterance>{}), ValidationError);
  }
}

TEST(ScoreAll, BiNonParameterizedInferIsCosine) {
  const auto n = utterances({"book a flight", "play music", "set an alarm", "weather today"});
  SimilarityModel<double> m(design(Architecture::bi, ScoringKind::non_parameterized));
  const std::vector<Utterance> three(n.begin() + 1, n.end());
  const auto scores = m.score_all(n[0], three, ScoreMode::infer);
  const auto hq = encode_single(m.backbone(), n[0]);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto hc = encode_single(m.backbone(), three[i]);
    EXPECT_NEAR(scores[i], hq.dot(hc) / (hq.norm() * hc.norm()), 1e-12);
  }
  const auto train = m.score_all(n[0], three, ScoreMode::train);
  EXPECT_NEAR(train[1], 1 / (1 + std::exp(-hq.dot(encode_single(m.backbone(), three[1])))), 1e-12);
}

TEST(ScoreAll, MatchesPlainVectorFormulas) {
  const auto n = utterances({"where is my order", "cancel my order", "track a parcel"});
  SimilarityModel<double> ce(design(Architecture::cross, ScoringKind::parameterized));
  const auto s = ce.score_all(n[0], std::vector<Utterance>{n[1]}, ScoreMode::train);
  EXPECT_NEAR(s[0], pa_score<double>(ce.head().weight(), ce.head().bias(), encode_pair_cross(ce.backbone(), n[0], n[1])),
              1e-12);
  SimilarityModel<double> be(design(Architecture::bi, ScoringKind::parameterized));
  const auto t = be.score_all(n[0], std::vector<Utterance>{n[2]}, ScoreMode::infer);
  const auto f = bi_pair_features<double>(encode_single(be.backbone(), n[0]), encode_single(be.backbone(), n[2]));
  EXPECT_NEAR(t[0], pa_score<double>(be.head().weight(), be.head().bias(), f), 1e-12);
}

TEST(ScoreAll, BiEncodesEachNeighbourOnce) {
  const auto n = utterances({"a b c", "d e f", "g h i", "j k l"});
  SimilarityModel<float> m(design(Architecture::bi, ScoringKind::parameterized));
  m.backbone().reset_forward_passes();
  const std::vector<const Utterance*> dup = {&n[1], &n[2], &n[1], &n[3]};
  m.score_all(n[0], dup);
  EXPECT_EQ(m.backbone().forward_passes(), 4u);
}

TEST(PaHead, GradientsMatchFiniteDifferences) {
  for (auto kind : {HeadKind::pa_cross, HeadKind::pa_bi}) {
    ScoringHead<double> head(kind, 3, 7);
    Rng rng(8);
    Matrix<double> feats(2, head.input_dim());
    for (Eigen::Index i = 0; i < feats.size(); ++i) feats.data()[i] = rng.uniform_real(-2, 2);
    auto eval = [&](bool backward) {
      Tape<double> tape(backward);
      auto s = tape.sum(head.score(tape, tape.constant(feats)));
      if (backward) tape.backward(s);
      return tape.scalar(s);
    };
    head.parameters().zero_grad();
    eval(true);
    for (auto& t : head.parameters()) {
      for (Eigen::Index i = 0; i < t.value.size(); ++i) {
        const double orig = t.value.data()[i], h = 1e-6;
        t.value.data()[i] = orig + h;
        const double lp = eval(false);
        t.value.data()[i] = orig - h;
        const double lm = eval(false);
        t.value.data()[i] = orig;
        const double fd = (lp - lm) / (2 * h), an = t.grad.data()[i];
        EXPECT_LT(std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-12), 1e-4) << t.name;
      }
    }
  }
}

TEST(PaHead, WrongFeatureWidthRejected) {
  ScoringHead<double> head(HeadKind::pa_bi, 3, 7);
  Tape<double> tape(false);
  EXPECT_THROW(head.score(tape, tape.constant(Matrix<double>::Zero(1, 3))), DimensionError);
}
