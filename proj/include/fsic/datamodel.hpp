#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fsic/rng.hpp"

namespace fsic {

/// Bad input: malformed files, invariant violations, impossible requests.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Numeric failure at run time (non-finite loss, degenerate vectors).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

struct IntentLabel {
  std::string name;

  IntentLabel() = default;
  explicit IntentLabel(std::string n) : name(std::move(n)) {}

  auto operator<=>(const IntentLabel&) const = default;
};

struct Utterance {
  std::string id;
  std::string text;
  IntentLabel label;

  bool operator==(const Utterance&) const = default;
};

struct RawRecord {
  std::string id;
  std::string text;
  std::string label;
};

/// Validated, immutable corpus. Intents are kept in sorted order.
class LabeledCorpus {
 public:
  LabeledCorpus() = default;

  const std::vector<Utterance>& utterances() const { return utterances_; }
  const std::vector<IntentLabel>& intents() const { return intents_; }
  std::size_t size() const { return utterances_.size(); }

  /// Indices into utterances() carrying the given label, in corpus order.
  const std::vector<std::size_t>& members(const IntentLabel& label) const {
    auto it = by_label_.find(label);
    if (it == by_label_.end()) throw ValidationError("unknown intent '" + label.name + "'");
    return it->second;
  }

  bool has_intent(const IntentLabel& label) const { return by_label_.count(label) != 0; }

  friend LabeledCorpus validate_corpus(const std::vector<RawRecord>& records);

 private:
  std::vector<Utterance> utterances_;
  std::vector<IntentLabel> intents_;
  std::map<IntentLabel, std::vector<std::size_t>> by_label_;
};

/// Checks ids, texts and labels; trims whitespace; preserves record order.
inline LabeledCorpus validate_corpus(const std::vector<RawRecord>& records) {
  if (records.empty()) throw ValidationError("corpus is empty");
  LabeledCorpus corpus;
  std::unordered_set<std::string> seen;
  corpus.utterances_.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.id.empty()) throw ValidationError("record " + std::to_string(i) + ": empty id");
    if (!seen.insert(r.id).second) throw ValidationError("duplicate utterance id '" + r.id + "'");
    const auto text = trim(r.text);
    if (text.empty()) throw ValidationError("utterance '" + r.id + "': empty text");
    const auto label = trim(r.label);
    if (label.empty()) throw ValidationError("utterance '" + r.id + "': empty label");
    IntentLabel lab{std::string(label)};
    corpus.by_label_[lab].push_back(corpus.utterances_.size());
    corpus.utterances_.push_back(Utterance{r.id, std::string(text), std::move(lab)});
  }
  for (const auto& [label, _] : corpus.by_label_) corpus.intents_.push_back(label);
  return corpus;
}

struct SplitCounts {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
};

struct FoldSplit {
  std::vector<IntentLabel> train_intents;
  std::vector<IntentLabel> valid_intents;
  std::vector<IntentLabel> test_intents;
  int fold_index = 0;
  std::uint64_t seed = 0;

  bool operator==(const FoldSplit&) const = default;
};

/// Shuffles the sorted intent list with Rng(seed) and cuts it into
/// train/valid/test blocks of the requested sizes. Each block is re-sorted.
inline FoldSplit split_intents(const LabeledCorpus& corpus, SplitCounts counts, std::uint64_t seed,
                               int fold_index = 0) {
  const auto total = counts.train + counts.valid + counts.test;
  if (total > corpus.intents().size()) {
    throw ValidationError("split needs " + std::to_string(total) + " intents, corpus has " +
                          std::to_string(corpus.intents().size()));
  }
  std::vector<IntentLabel> order = corpus.intents();
  Rng rng(seed);
  rng.shuffle(order);
  FoldSplit split;
  split.fold_index = fold_index;
  split.seed = seed;
  auto take = [&](std::size_t from, std::size_t n) {
    std::vector<IntentLabel> part(order.begin() + static_cast<std::ptrdiff_t>(from),
                                  order.begin() + static_cast<std::ptrdiff_t>(from + n));
    std::sort(part.begin(), part.end());
    return part;
  };
  split.train_intents = take(0, counts.train);
  split.valid_intents = take(counts.train, counts.valid);
  split.test_intents = take(counts.train + counts.valid, counts.test);
  return split;
}

// --- ingestion --------------------------------------------------------------

inline std::string row_id(std::size_t row) {
  std::ostringstream os;
  os << std::setw(6) << std::setfill('0') << row;
  return os.str();
}

/// Parses either newline-delimited JSON objects ({id, text, label}) or
/// `text<TAB>label` rows. The form is picked from the first non-blank line.
inline std::vector<RawRecord> parse_corpus(std::istream& in) {
  std::vector<RawRecord> out;
  std::string line;
  std::size_t line_no = 0;
  int json_mode = -1;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty()) continue;
    if (json_mode < 0) json_mode = t.front() == '{' ? 1 : 0;
    if (json_mode == 1) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(t);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
      }
      for (const char* key : {"id", "text", "label"}) {
        if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
          throw ValidationError("line " + std::to_string(line_no) + ": missing string field '" + key + "'");
        }
      }
      out.push_back({j["id"].get<std::string>(), j["text"].get<std::string>(), j["label"].get<std::string>()});
    } else {
      const auto tab = t.rfind('\t');
      if (tab == std::string_view::npos) {
        throw ValidationError("line " + std::to_string(line_no) + ": expected text<TAB>label");
      }
      out.push_back({row_id(row++), std::string(t.substr(0, tab)), std::string(t.substr(tab + 1))});
    }
  }
  return out;
}

inline LabeledCorpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus '" + path + "'");
  return validate_corpus(parse_corpus(in));
}

inline void save_corpus(const LabeledCorpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  for (const auto& u : corpus.utterances()) {
    out << nlohmann::json{{"id", u.id}, {"text", u.text}, {"label", u.label.name}}.dump() << '\n';
  }
}

}  // namespace fsic
