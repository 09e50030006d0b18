// SPDX-License-Identifier: Apache-2.0
//
// Tokenisation, prompt injection and classifier / query generation through
// the frozen text encoder.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vidprompt/autograd.hpp"
#include "vidprompt/nn.hpp"
#include "vidprompt/rng.hpp"

namespace vidprompt {

inline constexpr std::size_t kDefaultTokenBudget = 77;

namespace lexicon {

inline const std::vector<std::string>& modifiers() {
  static const std::vector<std::string> words = {
      "slow",  "fast",   "high",  "low",   "left",  "right", "soft",   "hard",
      "quick", "steady", "wide",  "narrow", "gentle", "rough", "smooth", "sharp",
      "light", "heavy",  "early", "late",  "small", "large", "bright", "dark"};
  return words;
}

// Consecutive pairs are opposite dynamic events (push / pull, open / close).
inline const std::vector<std::string>& actions() {
  static const std::vector<std::string> words = {
      "push", "pull",  "open",  "close", "lift",  "drop",  "rise", "fall",
      "jump", "spin",  "kick",  "throw", "swim",  "climb", "run",  "walk",
      "roll", "twist", "catch", "dance", "wave",  "clap",  "sit",  "stand"};
  return words;
}

inline const std::vector<std::string>& sentence_words() {
  static const std::vector<std::string> words = {
      "a",      "the",  "person", "someone", "clip",   "video",    "shows", "of",    "is",    "doing",
      "while",  "and",  "in",     "with",    "on",     "at",       "to",    "then",  "outdoors", "indoors",
      "quickly", "slowly", "near", "far",    "fry",    "onion",    "pan",   "archery", "cook", "play",
      "ride",   "read", "write",  "group",   "people", "together", "again", "there", "here",  "this"};
  return words;
}

}  // namespace lexicon

// Closed toy vocabulary: dense ids, four special entries, whitespace
// splitting with greedy longest-prefix subword fallback.
class Vocabulary {
 public:
  static constexpr const char* kStart = "<start>";
  static constexpr const char* kEnd = "<end>";
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kUnk = "<unk>";

  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) { reindex(); }

  // Specials, then modifiers, actions, sentence words, then consonant-vowel
  // syllables until `size` entries exist.
  static Vocabulary make_default(std::size_t size = 256) {
    std::vector<std::string> all = {kStart, kEnd, kPad, kUnk};
    for (const auto* list : {&lexicon::modifiers(), &lexicon::actions(), &lexicon::sentence_words()}) {
      all.insert(all.end(), list->begin(), list->end());
    }
    std::set<std::string> seen(all.begin(), all.end());
    auto add_syllable = [&](std::string s) {
      if (seen.insert(s).second) all.push_back(std::move(s));
    };
    static const std::string consonants = "bdfgklmnprstvz";
    static const std::string vowels = "aeiou";
    for (char c : consonants)
      for (char v : vowels) add_syllable(std::string{c, v});
    for (char c : consonants)
      for (char v : vowels)
        for (char e : std::string("nrs")) add_syllable(std::string{c, v, e});
    if (size < 5) throw std::invalid_argument("Vocabulary: size must be at least 5");
    if (size > all.size()) throw std::invalid_argument("Vocabulary: size exceeds the built-in lexicon");
    all.resize(size);
    return Vocabulary(std::move(all));
  }

  static Vocabulary read(std::istream& in) {
    std::vector<std::string> tokens;
    std::string line;
    std::size_t expected = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) throw std::runtime_error("Vocabulary: malformed line '" + line + "'");
      const std::size_t id = std::stoul(line.substr(0, tab));
      if (id != expected) throw std::runtime_error("Vocabulary: ids must be dense and ordered");
      tokens.push_back(line.substr(tab + 1));
      ++expected;
    }
    return Vocabulary(std::move(tokens));
  }

  void write(std::ostream& out) const {
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << i << '\t' << tokens_[i] << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  std::optional<std::size_t> find(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t start_id() const { return start_; }
  std::size_t end_id() const { return end_; }
  std::size_t pad_id() const { return pad_; }
  std::size_t unk_id() const { return unk_; }
  bool is_special(std::size_t id) const { return id == start_ || id == end_ || id == pad_ || id == unk_; }

  std::string embedding_name() const { return "text.token_embedding"; }

  // Frozen |V| x D embedding table.
  template <class T>
  void init_embeddings(ParameterSet<T>& params, std::size_t width, Rng& rng, double stddev = 0.02) const {
    params.add(embedding_name(), normal_tensor<T>(Shape{size(), width}, stddev, rng), false);
  }

 private:
  void reindex() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], i).second) throw std::invalid_argument("Vocabulary: duplicate token " + tokens_[i]);
    }
    auto need = [&](const char* t) {
      auto it = ids_.find(t);
      if (it == ids_.end()) throw std::invalid_argument(std::string("Vocabulary: missing special token ") + t);
      return it->second;
    };
    start_ = need(kStart);
    end_ = need(kEnd);
    pad_ = need(kPad);
    unk_ = need(kUnk);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::size_t start_ = 0, end_ = 0, pad_ = 0, unk_ = 0;
};

struct TokenSequence {
  std::vector<std::size_t> ids;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// Start/end markers are not added here; injection adds them.
inline TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSequence seq;
  std::istringstream words{std::string(text)};
  std::string word;
  while (words >> word) {
    std::transform(word.begin(), word.end(), word.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (auto id = vocab.find(word); id && !vocab.is_special(*id)) {
      seq.ids.push_back(*id);
      continue;
    }
    std::vector<std::size_t> pieces;
    std::size_t pos = 0;
    while (pos < word.size()) {
      std::size_t best_len = 0, best_id = 0;
      for (std::size_t len = word.size() - pos; len > 0; --len) {
        if (auto id = vocab.find(std::string_view(word).substr(pos, len)); id && !vocab.is_special(*id)) {
          best_len = len;
          best_id = *id;
          break;
        }
      }
      if (best_len == 0) break;
      pieces.push_back(best_id);
      pos += best_len;
    }
    if (pos == word.size()) {
      seq.ids.insert(seq.ids.end(), pieces.begin(), pieces.end());
    } else {
      seq.ids.push_back(vocab.unk_id());
    }
  }
  if (seq.ids.empty()) throw std::invalid_argument("tokenize: empty text");
  return seq;
}

// Keeps the first (budget - 2k - 2) content tokens.
inline TokenSequence truncate_to_budget(const TokenSequence& tokens, std::size_t k, std::size_t budget) {
  if (budget < 2 * k + 3) {
    throw std::invalid_argument("truncate_to_budget: budget " + std::to_string(budget) + " cannot hold " +
                                std::to_string(k) + "+X+" + std::to_string(k) + " (needs at least " +
                                std::to_string(2 * k + 3) + ")");
  }
  const std::size_t room = budget - 2 * k - 2;
  if (tokens.size() <= room) return tokens;
  return TokenSequence{std::vector<std::size_t>(tokens.ids.begin(), tokens.ids.begin() + room)};
}

// Prefix vectors a_1..a_k and suffix vectors a_{k+1}..a_{2k}, stored as one
// trainable 2k x D tensor shared by every category of a task.
class PromptBank {
 public:
  explicit PromptBank(std::size_t k, std::string name = "prompt.bank") : k_(k), name_(std::move(name)) {}

  std::size_t k() const { return k_; }
  const std::string& name() const { return name_; }
  std::string pattern() const { return std::to_string(k_) + "+X+" + std::to_string(k_); }

  template <class T>
  void init(ParameterSet<T>& params, std::size_t width, Rng& rng, double stddev = 0.01) const {
    if (k_ > 0) params.add(name_, normal_tensor<T>(Shape{2 * k_, width}, stddev, rng), true);
  }

 private:
  std::size_t k_;
  std::string name_;
};

// Layout: [start, a_1..a_k, tokens, a_{k+1}..a_{2k}, end]. Content is
// truncated to the budget first; prompt slots and markers are never dropped.
template <class T>
Var<T> inject_prompts(Tape<T>& tape, const ParameterSet<T>& params, const TokenSequence& tokens,
                      const PromptBank& bank, const Vocabulary& vocab, std::size_t budget = kDefaultTokenBudget) {
  const TokenSequence kept = truncate_to_budget(tokens, bank.k(), budget);
  Var<T> table = tape.parameter(params, vocab.embedding_name());
  std::vector<std::size_t> ids;
  ids.reserve(kept.size() + 2);
  ids.push_back(vocab.start_id());
  ids.insert(ids.end(), kept.ids.begin(), kept.ids.end());
  ids.push_back(vocab.end_id());
  Var<T> embedded = gather_rows(table, ids);
  if (bank.k() == 0) return embedded;
  const std::size_t k = bank.k(), n = kept.size();
  Var<T> prompts = tape.parameter(params, bank.name());
  return concat_rows<T>({slice_rows(embedded, 0, 1), slice_rows(prompts, 0, k), slice_rows(embedded, 1, n + 1),
                         slice_rows(prompts, k, 2 * k), slice_rows(embedded, n + 1, n + 2)});
}

// Frozen text encoder: positional table, pre-norm transformer, final layer
// norm and a projection applied to the end-token output.
template <class T>
class TextEncoder {
 public:
  TextEncoder(TransformerConfig config, std::string prefix = "text")
      : prefix_(std::move(prefix)), config_(config), transformer_(prefix_ + ".encoder", config) {}

  const TransformerConfig& config() const { return config_; }
  std::size_t budget() const { return config_.max_sequence_length; }

  void init(ParameterSet<T>& params, Rng& rng) const {
    const std::size_t d = config_.width;
    const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
    params.add(positional_name(), normal_tensor<T>(Shape{config_.max_sequence_length, d}, 0.01, rng), false);
    transformer_.init(params, rng, wstd, false);
    params.add(prefix_ + ".ln_final.gamma", Tensor<T>(Shape{1, d}, T(1)), false);
    params.add(prefix_ + ".ln_final.beta", Tensor<T>(Shape{1, d}), false);
    params.add(prefix_ + ".projection", normal_tensor<T>(Shape{d, d}, wstd, rng), false);
  }

  // Embedded sequence (n x D) -> 1 x D embedding read at the end token.
  Var<T> encode(Tape<T>& tape, const ParameterSet<T>& params, Var<T> embedded) const {
    return encode_batch(tape, params, std::vector<Var<T>>{embedded});
  }

  // One embedding row per sequence; sequences never attend to each other.
  Var<T> encode_batch(Tape<T>& tape, const ParameterSet<T>& params, const std::vector<Var<T>>& sequences) const {
    if (sequences.empty()) throw std::invalid_argument("encode_text: no sequences");
    Var<T> pos = tape.parameter(params, positional_name());
    std::vector<Var<T>> rows;
    std::vector<Segment> segments;
    std::vector<std::size_t> end_rows;
    std::size_t offset = 0;
    for (const Var<T>& seq : sequences) {
      const std::size_t n = seq.rows();
      if (n > config_.max_sequence_length) {
        throw std::invalid_argument("encode_text: sequence length " + std::to_string(n) + " exceeds " +
                                    std::to_string(config_.max_sequence_length));
      }
      rows.push_back(add(seq, slice_rows(pos, 0, n)));
      segments.push_back(Segment{offset, n});
      offset += n;
      end_rows.push_back(offset - 1);
    }
    Var<T> x = rows.size() == 1 ? rows.front() : concat_rows(rows);
    Var<T> y = transformer_.forward(tape, params, x, segments);
    Var<T> ends = gather_rows(y, end_rows);
    Var<T> normed = layer_norm(ends, tape.parameter(params, prefix_ + ".ln_final.gamma"),
                               tape.parameter(params, prefix_ + ".ln_final.beta"));
    return matmul(normed, tape.parameter(params, prefix_ + ".projection"));
  }

 private:
  std::string positional_name() const { return prefix_ + ".positional"; }

  std::string prefix_;
  TransformerConfig config_;
  TransformerEncoder<T> transformer_;
};

template <class T>
Var<T> encode_text(Tape<T>& tape, const ParameterSet<T>& params, Var<T> embedded, const TextEncoder<T>& encoder) {
  return encoder.encode(tape, params, embedded);
}

// Row c = encode_text(inject_prompts(tokenize(name_c))), one bank for all rows.
template <class T>
Var<T> generate_classifiers(Tape<T>& tape, const ParameterSet<T>& params, const std::vector<std::string>& names,
                            const PromptBank& bank, const Vocabulary& vocab, const TextEncoder<T>& encoder) {
  if (names.empty()) throw std::invalid_argument("generate_classifiers: no category names");
  std::set<std::string> seen;
  std::vector<Var<T>> sequences;
  for (const auto& name : names) {
    if (!seen.insert(name).second) throw std::invalid_argument("generate_classifiers: duplicate name '" + name + "'");
    sequences.push_back(inject_prompts(tape, params, tokenize(name, vocab), bank, vocab, encoder.budget()));
  }
  return encoder.encode_batch(tape, params, sequences);
}

struct SubwordMatch {
  std::size_t slot = 0;
  std::size_t token_id = 0;
  std::string subword;
  std::optional<double> distance;  // absent for a zero prompt vector
};

// Nearest vocabulary entry (cosine distance) for every prompt slot; special
// tokens are not candidates; ties go to the lowest id.
template <class T>
std::vector<SubwordMatch> nearest_subwords(const Tensor<T>& bank, const Tensor<T>& embeddings,
                                           const Vocabulary& vocab) {
  if (bank.cols() != embeddings.cols()) throw std::invalid_argument("nearest_subwords: width mismatch");
  auto norm = [](std::span<const T> v) {
    double s = 0.0;
    for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(s);
  };
  std::vector<double> vocab_norms(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    vocab_norms[i] = norm(embeddings.row(i));
    if (!vocab.is_special(i) && vocab_norms[i] == 0.0) {
      throw std::invalid_argument("nearest_subwords: zero embedding for '" + vocab.token(i) + "'");
    }
  }
  std::vector<SubwordMatch> out;
  for (std::size_t s = 0; s < bank.rows(); ++s) {
    SubwordMatch m;
    m.slot = s;
    const double pn = norm(bank.row(s));
    if (pn == 0.0) {
      m.token_id = vocab.unk_id();
      m.subword = vocab.token(m.token_id);
      out.push_back(m);
      continue;
    }
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < embeddings.rows(); ++i) {
      if (vocab.is_special(i)) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < bank.cols(); ++c) {
        dot += static_cast<double>(bank(s, c)) * static_cast<double>(embeddings(i, c));
      }
      const double dist = 1.0 - dot / (pn * vocab_norms[i]);
      if (dist < best) {
        best = dist;
        m.token_id = i;
      }
    }
    m.subword = vocab.token(m.token_id);
    m.distance = best;
    out.push_back(m);
  }
  return out;
}

}  // namespace vidprompt
