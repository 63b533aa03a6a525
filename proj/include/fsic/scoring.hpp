#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fsic/autodiff.hpp"
#include "fsic/datamodel.hpp"
#include "fsic/encoder.hpp"

namespace fsic {

class DimensionError : public ValidationError {
 public:
  DimensionError(const std::string& what, long expected, long actual)
      : ValidationError(what + ": expected dimension " + std::to_string(expected) + ", got " +
                        std::to_string(actual)) {}
};

enum class Architecture { cross, bi };
enum class ScoringKind { parameterized, non_parameterized };
enum class ScoreMode { train, infer };

inline const char* to_string(Architecture a) { return a == Architecture::cross ? "CE" : "BE"; }
inline const char* to_string(ScoringKind s) { return s == ScoringKind::parameterized ? "PA" : "NP"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "CE" || s == "ce" || s == "cross") return Architecture::cross;
  if (s == "BE" || s == "be" || s == "bi") return Architecture::bi;
  throw ValidationError("unknown architecture '" + s + "' (expected CE or BE)");
}

inline ScoringKind parse_scoring(const std::string& s) {
  if (s == "PA" || s == "pa") return ScoringKind::parameterized;
  if (s == "NP" || s == "np") return ScoringKind::non_parameterized;
  throw ValidationError("unknown scoring '" + s + "' (expected PA or NP)");
}

// --- score functions on plain vectors -----------------------------------------------------

/// sigmoid(W . features + b)
template <class Scalar>
Scalar pa_score(const RowVector<Scalar>& weight, Scalar bias, const RowVector<Scalar>& features) {
  if (weight.size() != features.size()) throw DimensionError("pa_score", weight.size(), features.size());
  return sigmoid<Scalar>(weight.dot(features) + bias);
}

/// h_q ++ h_c ++ |h_q - h_c| ++ (h_q * h_c)
template <class Scalar>
RowVector<Scalar> bi_pair_features(const RowVector<Scalar>& hq, const RowVector<Scalar>& hc) {
  if (hq.size() != hc.size()) throw DimensionError("bi_pair_features", hq.size(), hc.size());
  const auto d = hq.size();
  RowVector<Scalar> out(4 * d);
  out << hq, hc, (hq - hc).cwiseAbs(), hq.cwiseProduct(hc);
  return out;
}

/// sigmoid(h_q . h_c), the training-time score of BE+NP.
template <class Scalar>
Scalar np_train_score(const RowVector<Scalar>& hq, const RowVector<Scalar>& hc) {
  if (hq.size() != hc.size()) throw DimensionError("np_train_score", hq.size(), hc.size());
  return sigmoid<Scalar>(hq.dot(hc));
}

inline constexpr double kMinCosineNorm = 1e-12;

/// Cosine similarity, the inference-time score of BE+NP.
template <class Scalar>
Scalar np_infer_score(const RowVector<Scalar>& hq, const RowVector<Scalar>& hc) {
  if (hq.size() != hc.size()) throw DimensionError("np_infer_score", hq.size(), hc.size());
  const Scalar nq = hq.norm();
  const Scalar nc = hc.norm();
  if (nq < kMinCosineNorm || nc < kMinCosineNorm) throw NumericError("cosine of a zero-norm vector");
  return hq.dot(hc) / (nq * nc);
}

// --- trainable head ------------------------------------------------------------------

enum class HeadKind { pa_cross, pa_bi, np };

/// Feed-forward scoring head (1 x d or 1 x 4d weight plus bias), or the
/// parameterless NP head.
template <class Scalar>
class ScoringHead {
 public:
  using Var = typename Tape<Scalar>::Var;

  ScoringHead() = default;

  ScoringHead(HeadKind kind, int backbone_dim, std::uint64_t seed) : kind_(kind) {
    if (kind == HeadKind::np) return;
    const int fan_in = kind == HeadKind::pa_cross ? backbone_dim : 4 * backbone_dim;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Rng rng(seed);
    Matrix<Scalar> w(1, fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(rng.uniform_real(-bound, bound));
    weight_ = params_.add("head.weight", std::move(w));
    bias_ = params_.add("head.bias", Matrix<Scalar>::Zero(1, 1));
  }

  HeadKind kind() const { return kind_; }
  bool parameterized() const { return kind_ != HeadKind::np; }
  long input_dim() const { return parameterized() ? static_cast<long>(params_[weight_].value.cols()) : 0; }

  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  RowVector<Scalar> weight() const { return params_[weight_].value.row(0); }
  Scalar bias() const { return params_[bias_].value(0, 0); }

  /// n x m features -> n x 1 scores in (0, 1).
  Var score(Tape<Scalar>& tape, Var features) const {
    if (!parameterized()) throw std::logic_error("NP head has no feed-forward layer");
    if (tape.value(features).cols() != input_dim()) {
      throw DimensionError("scoring head", input_dim(), static_cast<long>(tape.value(features).cols()));
    }
    auto& p = const_cast<ParameterSet<Scalar>&>(params_);
    Var logits = tape.add_row(tape.matmul_nt(features, tape.param(p[weight_])), tape.param(p[bias_]));
    return tape.sigmoid(logits);
  }

 private:
  HeadKind kind_ = HeadKind::np;
  ParameterSet<Scalar> params_;
  std::size_t weight_ = 0, bias_ = 0;
};

struct ModelConfig {
  Architecture architecture = Architecture::cross;
  ScoringKind scoring = ScoringKind::parameterized;
  ToyBackboneConfig backbone;
  std::uint64_t head_seed = 1;
  bool head_dropout = false;  ///< reserved; dropout is not applied

  void validate() const {
    if (architecture == Architecture::cross && scoring == ScoringKind::non_parameterized) {
      throw ValidationError("configuration CE+NP is invalid: a joint pair encoding has no per-utterance "
                            "vectors for a non-parameterized score");
    }
    if (head_dropout) throw ValidationError("head dropout is not supported");
  }

  std::string name() const { return std::string(to_string(architecture)) + "+" + to_string(scoring); }
};

/// Backbone + architecture + scoring head: one of CE+PA, BE+PA, BE+NP.
template <class Scalar>
class SimilarityModel {
 public:
  using Var = typename Tape<Scalar>::Var;

  explicit SimilarityModel(ModelConfig cfg) : cfg_((cfg.validate(), cfg)), backbone_(cfg.backbone) {
    HeadKind kind = HeadKind::np;
    if (cfg.scoring == ScoringKind::parameterized) {
      kind = cfg.architecture == Architecture::cross ? HeadKind::pa_cross : HeadKind::pa_bi;
    }
    head_ = ScoringHead<Scalar>(kind, cfg.backbone.dim, cfg.head_seed);
  }

  const ModelConfig& config() const { return cfg_; }
  ToyBackbone<Scalar>& backbone() { return backbone_; }
  const ToyBackbone<Scalar>& backbone() const { return backbone_; }
  ScoringHead<Scalar>& head() { return head_; }
  const ScoringHead<Scalar>& head() const { return head_; }

  std::vector<ParameterSet<Scalar>*> parameter_sets() { return {&backbone_.parameters(), &head_.parameters()}; }
  std::vector<const ParameterSet<Scalar>*> parameter_sets() const {
    return {&backbone_.parameters(), &head_.parameters()};
  }

  void zero_grad() {
    for (auto* p : parameter_sets()) p->zero_grad();
  }

  /// Per-tape memo of single-utterance encodings (BE).
  using TapeCache = std::unordered_map<std::string, Var>;

  Var encode_on(Tape<Scalar>& tape, const Utterance& u, TapeCache& cache) const {
    auto it = cache.find(u.id);
    if (it != cache.end()) return it->second;
    Var v = backbone_.forward(tape, backbone_.single_sequence(u.text));
    cache.emplace(u.id, v);
    return v;
  }

  /// Differentiable scores of `query` against each neighbour, as n x 1.
  /// Train mode always yields values in (0, 1); infer mode switches BE+NP to
  /// cosine.
  Var score_on(Tape<Scalar>& tape, const Utterance& query, std::span<const Utterance* const> neighbours,
               ScoreMode mode, TapeCache& cache) const {
    if (neighbours.empty()) throw ValidationError("score_all: empty neighbour list");
    if (cfg_.architecture == Architecture::cross) {
      std::vector<Var> reps;
      reps.reserve(neighbours.size());
      for (const auto* c : neighbours) {
        reps.push_back(backbone_.forward(tape, backbone_.pair_sequence(query.text, c->text)));
      }
      return head_.score(tape, tape.concat_rows(reps));
    }
    Var hq = encode_on(tape, query, cache);
    std::vector<Var> qs(neighbours.size(), hq), cs;
    cs.reserve(neighbours.size());
    for (const auto* c : neighbours) cs.push_back(encode_on(tape, *c, cache));
    Var q = tape.concat_rows(qs);
    Var c = tape.concat_rows(cs);
    if (cfg_.scoring == ScoringKind::parameterized) {
      Var feats = tape.concat_cols({q, c, tape.abs(tape.sub(q, c)), tape.mul(q, c)});
      return head_.score(tape, feats);
    }
    if (mode == ScoreMode::train) return tape.sigmoid(tape.dot_rows(q, c));
    Matrix<Scalar> cos(static_cast<Eigen::Index>(neighbours.size()), 1);
    const RowVector<Scalar> hqv = tape.value(hq).row(0);
    for (std::size_t i = 0; i < neighbours.size(); ++i) {
      cos(static_cast<Eigen::Index>(i), 0) = np_infer_score<Scalar>(hqv, tape.value(cs[i]).row(0));
    }
    return tape.constant(std::move(cos));
  }

  /// Evaluation-mode scores, one per neighbour, order preserved.
  std::vector<Scalar> score_all(const Utterance& query, std::span<const Utterance* const> neighbours,
                                ScoreMode mode = ScoreMode::infer) const {
    Tape<Scalar> tape(false);
    TapeCache cache;
    Var s = score_on(tape, query, neighbours, mode, cache);
    const auto& m = tape.value(s);
    return std::vector<Scalar>(m.data(), m.data() + m.size());
  }

  std::vector<Scalar> score_all(const Utterance& query, const std::vector<Utterance>& neighbours,
                                ScoreMode mode = ScoreMode::infer) const {
    return score_all(query, pointers(neighbours), mode);
  }

  static std::vector<const Utterance*> pointers(const std::vector<Utterance>& v) {
    std::vector<const Utterance*> out;
    out.reserve(v.size());
    for (const auto& u : v) out.push_back(&u);
    return out;
  }

 private:
  ModelConfig cfg_;
  ToyBackbone<Scalar> backbone_;
  ScoringHead<Scalar> head_;
};

}  // namespace fsic
