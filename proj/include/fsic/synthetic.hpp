#pragma once

#include <cstdint>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsic/datamodel.hpp"
#include "fsic/rng.hpp"

namespace fsic {

/// Shape of a synthetic corpus. Each intent owns a private family of
/// keywords; every utterance mixes `keywords_per_utterance` distinct family
/// keywords with filler words drawn (with replacement) from a pool shared by
/// all intents. With 3 keywords per family and 2 per utterance, any two
/// utterances of one intent share a keyword, yet no single keyword occurs in
/// all of them.
struct VocabularyDesign {
  int keywords_per_intent = 3;
  int keywords_per_utterance = 2;
  int filler_pool = 16;
  int fillers_min = 6;
  int fillers_max = 10;

  void validate() const {
    if (keywords_per_intent < 1 || keywords_per_utterance < 1 || keywords_per_utterance > keywords_per_intent) {
      throw ValidationError("vocabulary design: bad keyword counts");
    }
    if (filler_pool < 1 || fillers_min < 0 || fillers_max < fillers_min) {
      throw ValidationError("vocabulary design: bad filler counts");
    }
  }
};

/// Pronounceable pseudo-word of `syllables` consonant-vowel pairs.
inline std::string pseudo_word(Rng& rng, int syllables) {
  static constexpr std::string_view consonants = "bdfgklmnprstvz";
  static constexpr std::string_view vowels = "aeiou";
  std::string w;
  for (int i = 0; i < syllables; ++i) {
    w.push_back(consonants[rng.uniform_int(consonants.size())]);
    w.push_back(vowels[rng.uniform_int(vowels.size())]);
  }
  return w;
}

inline LabeledCorpus make_synthetic_corpus(int n_intents, int utterances_per_intent,
                                           const VocabularyDesign& design, std::uint64_t seed) {
  if (n_intents < 1 || utterances_per_intent < 1) throw ValidationError("synthetic corpus: counts must be positive");
  design.validate();
  Rng rng(seed);
  std::set<std::string> used;
  auto fresh_word = [&](int syllables) {
    for (;;) {
      auto w = pseudo_word(rng, syllables);
      if (used.insert(w).second) return w;
    }
  };
  std::vector<std::string> fillers;
  for (int i = 0; i < design.filler_pool; ++i) fillers.push_back(fresh_word(2));
  std::vector<RawRecord> records;
  records.reserve(static_cast<std::size_t>(n_intents * utterances_per_intent));
  for (int i = 0; i < n_intents; ++i) {
    std::ostringstream label;
    label << "intent_" << std::setw(2) << std::setfill('0') << i;
    std::vector<std::string> family;
    for (int k = 0; k < design.keywords_per_intent; ++k) family.push_back(fresh_word(3));
    for (int u = 0; u < utterances_per_intent; ++u) {
      std::vector<std::string> words;
      for (auto idx : rng.sample_indices(family.size(), static_cast<std::size_t>(design.keywords_per_utterance))) {
        words.push_back(family[idx]);
      }
      const auto n_fill = rng.uniform_range(design.fillers_min, design.fillers_max);
      for (std::int64_t f = 0; f < n_fill; ++f) words.push_back(fillers[rng.uniform_int(fillers.size())]);
      rng.shuffle(words);
      std::string text;
      for (const auto& w : words) text += (text.empty() ? "" : " ") + w;
      std::ostringstream id;
      id << "syn-" << std::setw(5) << std::setfill('0') << records.size();
      records.push_back({id.str(), text, label.str()});
    }
  }
  return validate_corpus(records);
}

}  // namespace fsic
