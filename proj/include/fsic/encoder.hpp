#pragma once

#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fsic/autodiff.hpp"
#include "fsic/datamodel.hpp"
#include "fsic/rng.hpp"

namespace fsic {

// --- tokenization ----------------------------------------------------------------

inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kFirstWordId = 3;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Lowercases ASCII, splits on whitespace and ASCII punctuation, and hashes
/// each word into [kFirstWordId, hash_size). Bytes >= 0x80 stay inside words.
class HashTokenizer {
 public:
  explicit HashTokenizer(int hash_size = 4096) : hash_size_(hash_size) {
    if (hash_size <= kFirstWordId) throw std::invalid_argument("hash_size too small");
  }

  int hash_size() const { return hash_size_; }

  static std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (c < 0x80 && (std::isspace(c) || std::ispunct(c))) {
        if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
      } else {
        cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  int word_id(std::string_view word) const {
    return kFirstWordId + static_cast<int>(fnv1a(word) % static_cast<std::uint64_t>(hash_size_ - kFirstWordId));
  }

  std::vector<int> tokenize(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : words(text)) ids.push_back(word_id(w));
    return ids;
  }

 private:
  int hash_size_;
};

/// Token ids with their segment (0 = first utterance, 1 = second).
struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<int> segments;

  std::size_t size() const { return token_ids.size(); }
};

/// "[CLS] x", truncated to max_len.
inline TokenSequence make_single_sequence(const std::vector<int>& words, std::size_t max_len) {
  if (words.empty()) throw ValidationError("utterance has no tokens");
  if (max_len < 2) throw ValidationError("max_sequence_length must be >= 2");
  TokenSequence s;
  s.token_ids.push_back(kClsId);
  for (std::size_t i = 0; i < words.size() && s.token_ids.size() < max_len; ++i) s.token_ids.push_back(words[i]);
  s.segments.assign(s.token_ids.size(), 0);
  return s;
}

/// "[CLS] a [SEP] b". While too long, drops the last token of the longer side
/// (the first side on ties), so both prefixes survive.
inline TokenSequence make_pair_sequence(std::vector<int> a, std::vector<int> b, std::size_t max_len) {
  if (a.empty() || b.empty()) throw ValidationError("utterance has no tokens");
  if (max_len < 4) throw ValidationError("max_sequence_length must be >= 4 for pairs");
  while (a.size() + b.size() + 2 > max_len) {
    if (a.size() >= b.size()) {
      a.pop_back();
    } else {
      b.pop_back();
    }
  }
  TokenSequence s;
  s.token_ids.push_back(kClsId);
  s.token_ids.insert(s.token_ids.end(), a.begin(), a.end());
  s.token_ids.push_back(kSepId);
  s.token_ids.insert(s.token_ids.end(), b.begin(), b.end());
  s.segments.assign(a.size() + 1, 0);
  s.segments.resize(s.token_ids.size(), 1);
  return s;
}

/// Forward-pass counter; copies start from zero.
struct PassCounter {
  mutable std::atomic<std::uint64_t> count{0};

  PassCounter() = default;
  PassCounter(const PassCounter&) {}
  PassCounter& operator=(const PassCounter&) { return *this; }
};

// --- backbone contract -------------------------------------------------------------

/// Adapter contract for any encoder: text (or a text pair) in, a length-dim()
/// vector of finite floats out, taken at the CLS position.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t max_sequence_length() const = 0;
  virtual std::vector<float> encode(std::string_view text) const = 0;
  virtual std::vector<float> encode_pair(std::string_view first, std::string_view second) const = 0;
};

struct ToyBackboneConfig {
  int dim = 64;
  int hash_size = 4096;
  int max_sequence_length = 64;
  std::uint64_t seed = 0;
  bool train_embeddings = false;
};

/// Two-stage attention encoder.
///
///   X   = E[token] + S[segment]
///   A   = softmax(X Wq (X Wk)^T / sqrt(d)), diagonal masked
///   G   = (X Wg) * (A X Wv)                     (elementwise)
///   c   = softmax(G[0] Wq2 (G Wk2)^T / sqrt(d)) G Wv2
///   out = tanh(c Wo + bo)
///
/// Wk starts as a copy of Wq and Wg as a copy of Wv, so at initialization a
/// token whose context is dominated by another occurrence of itself gets a
/// large positive G row. Segment embeddings are drawn at a tenth of the
/// token scale; at full scale they swamp token identity in the attention.
/// All weights are drawn from Rng(seed).
template <class Scalar>
class ToyBackbone : public Backbone {
 public:
  using Var = typename Tape<Scalar>::Var;

  explicit ToyBackbone(ToyBackboneConfig cfg = {}) : cfg_(cfg), tokenizer_(cfg.hash_size) {
    if (cfg.dim < 1) throw ValidationError("backbone dim must be positive");
    if (cfg.max_sequence_length < 3) throw ValidationError("max_sequence_length must be at least 3");
    Rng rng(cfg.seed);
    const auto d = static_cast<Eigen::Index>(cfg.dim);
    auto uniform = [&](Eigen::Index r, Eigen::Index c, double bound) {
      Matrix<Scalar> m(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.uniform_real(-bound, bound));
      return m;
    };
    const double unit = std::sqrt(3.0);  // unit variance entries
    const double proj = std::sqrt(3.0 / cfg.dim);
    embed_ = params_.add("backbone.embedding", uniform(cfg.hash_size, d, unit), cfg.train_embeddings);
    segment_ = params_.add("backbone.segment", uniform(2, d, 0.1 * unit));
    auto wq = uniform(d, d, proj);
    wq_ = params_.add("backbone.attn1.query", wq);
    wk_ = params_.add("backbone.attn1.key", wq);
    auto wv = uniform(d, d, proj);
    wv_ = params_.add("backbone.attn1.value", wv);
    wg_ = params_.add("backbone.attn1.gate", wv);
    wq2_ = params_.add("backbone.attn2.query", uniform(d, d, proj));
    wk2_ = params_.add("backbone.attn2.key", uniform(d, d, proj));
    wv2_ = params_.add("backbone.attn2.value", uniform(d, d, proj));
    wo_ = params_.add("backbone.out.weight", uniform(d, d, proj));
    bo_ = params_.add("backbone.out.bias", Matrix<Scalar>::Zero(1, d));
  }

  const ToyBackboneConfig& config() const { return cfg_; }
  const HashTokenizer& tokenizer() const { return tokenizer_; }
  ParameterSet<Scalar>& parameters() { return params_; }
  const ParameterSet<Scalar>& parameters() const { return params_; }

  std::size_t dim() const override { return static_cast<std::size_t>(cfg_.dim); }
  std::size_t max_sequence_length() const override { return static_cast<std::size_t>(cfg_.max_sequence_length); }

  TokenSequence single_sequence(std::string_view text) const {
    return make_single_sequence(tokenizer_.tokenize(text), max_sequence_length());
  }
  TokenSequence pair_sequence(std::string_view first, std::string_view second) const {
    return make_pair_sequence(tokenizer_.tokenize(first), tokenizer_.tokenize(second), max_sequence_length());
  }

  /// Differentiable forward pass; returns the 1 x dim CLS vector.
  Var forward(Tape<Scalar>& tape, const TokenSequence& seq) const {
    if (seq.token_ids.empty() || seq.token_ids.front() != kClsId) {
      throw ValidationError("token sequence must start with CLS");
    }
    if (seq.segments.size() != seq.token_ids.size()) throw ValidationError("segment ids do not match token ids");
    ++forward_passes_.count;
    auto& p = const_cast<ParameterSet<Scalar>&>(params_);
    const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(cfg_.dim));
    const auto n = static_cast<Eigen::Index>(seq.token_ids.size());
    Var x = tape.add(tape.gather_rows(p[embed_], seq.token_ids), tape.gather_rows(p[segment_], seq.segments));
    Var q = tape.matmul(x, tape.param(p[wq_]));
    Var k = tape.matmul(x, tape.param(p[wk_]));
    Var v = tape.matmul(x, tape.param(p[wv_]));
    Matrix<Scalar> mask = Matrix<Scalar>::Zero(n, n);
    if (n > 1) mask.diagonal().setConstant(Scalar(-1e4));
    Var attn = tape.softmax_rows(tape.add(tape.scale(tape.matmul_nt(q, k), inv_sqrt_d), tape.constant(std::move(mask))));
    Var g = tape.mul(tape.matmul(x, tape.param(p[wg_])), tape.matmul(attn, v));
    Var q2 = tape.matmul(tape.row(g, 0), tape.param(p[wq2_]));
    Var k2 = tape.matmul(g, tape.param(p[wk2_]));
    Var v2 = tape.matmul(g, tape.param(p[wv2_]));
    Var attn2 = tape.softmax_rows(tape.scale(tape.matmul_nt(q2, k2), inv_sqrt_d));
    Var c = tape.matmul(attn2, v2);
    return tape.tanh(tape.add_row(tape.matmul(c, tape.param(p[wo_])), tape.param(p[bo_])));
  }

  RowVector<Scalar> eval(const TokenSequence& seq) const {
    Tape<Scalar> tape(false);
    return tape.value(forward(tape, seq)).row(0);
  }

  std::vector<float> encode(std::string_view text) const override { return to_float(eval(single_sequence(text))); }

  std::vector<float> encode_pair(std::string_view first, std::string_view second) const override {
    return to_float(eval(pair_sequence(first, second)));
  }

  /// Number of forward passes run so far (all modes).
  std::uint64_t forward_passes() const { return forward_passes_.count.load(); }
  void reset_forward_passes() { forward_passes_.count = 0; }

 private:
  static std::vector<float> to_float(const RowVector<Scalar>& v) {
    std::vector<float> out(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
    return out;
  }

  ToyBackboneConfig cfg_;
  HashTokenizer tokenizer_;
  ParameterSet<Scalar> params_;
  std::size_t embed_ = 0, segment_ = 0, wq_ = 0, wk_ = 0, wv_ = 0, wg_ = 0, wq2_ = 0, wk2_ = 0, wv2_ = 0, wo_ = 0,
      bo_ = 0;
  PassCounter forward_passes_;

};

// --- encoding operations ---------------------------------------------------------------

template <class Scalar>
RowVector<Scalar> encode_single(const ToyBackbone<Scalar>& backbone, const Utterance& u) {
  return backbone.eval(backbone.single_sequence(u.text));
}

template <class Scalar>
RowVector<Scalar> encode_pair_cross(const ToyBackbone<Scalar>& backbone, const Utterance& query,
                                    const Utterance& neighbour) {
  return backbone.eval(backbone.pair_sequence(query.text, neighbour.text));
}

/// Memoizes single-utterance encodings by utterance id. Valid only while
/// the backbone parameters stay fixed.
template <class Scalar>
class EncodingCache {
 public:
  const RowVector<Scalar>& get(const ToyBackbone<Scalar>& backbone, const Utterance& u) {
    auto it = cache_.find(u.id);
    if (it == cache_.end()) it = cache_.emplace(u.id, encode_single(backbone, u)).first;
    return it->second;
  }
  void clear() { cache_.clear(); }
  std::size_t size() const { return cache_.size(); }

 private:
  std::unordered_map<std::string, RowVector<Scalar>> cache_;
};

template <class Scalar>
struct BiEncoding {
  RowVector<Scalar> query;
  RowVector<Scalar> neighbour;
};

template <class Scalar>
BiEncoding<Scalar> encode_pair_bi(const ToyBackbone<Scalar>& backbone, const Utterance& query,
                                  const Utterance& neighbour, EncodingCache<Scalar>* cache = nullptr) {
  if (cache) return {cache->get(backbone, query), cache->get(backbone, neighbour)};
  return {encode_single(backbone, query), encode_single(backbone, neighbour)};
}

}  // namespace fsic
