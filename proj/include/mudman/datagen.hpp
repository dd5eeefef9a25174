#pragma once

// Synthetic forget/retain corpora over a shared vocabulary.
//
// The vocabulary is split into three bands:
//   [0, forget_end)            structural tokens only the code-like grammar uses
//   [shared_begin, forget_end) shared "word" tokens (identifiers in code, words in prose)
//   [forget_end, vocab)        prose-only words and punctuation
// Every sequence is a pure function of (grammar parameters, stream seed, index).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mudman/common.hpp"
#include "mudman/tokens.hpp"

namespace mudman {

enum class GrammarId { forget_grammar, retain_grammar };

inline const char* to_string(GrammarId g) {
  return g == GrammarId::forget_grammar ? "forget_grammar" : "retain_grammar";
}

struct GrammarSpec {
  GrammarId id = GrammarId::forget_grammar;
  std::size_t vocab_size = 64;
  double overlap_fraction = 0.25;
  std::size_t max_depth = 3;
  std::uint64_t structure_seed = 1;  // fixes Zipf ranks and successor tables

  bool operator==(const GrammarSpec&) const = default;
};

/// Token bands derived from vocab size and overlap fraction.
struct VocabBands {
  std::size_t shared_begin;  // first shared token
  std::size_t forget_end;    // one past the last token the forget grammar may emit
  std::size_t vocab;

  static VocabBands of(const GrammarSpec& g) {
    MUDMAN_REQUIRE(g.vocab_size >= 32, "grammar needs vocab_size >= 32");
    MUDMAN_REQUIRE(g.overlap_fraction > 0.0 && g.overlap_fraction < 0.5, "overlap_fraction must be in (0, 0.5)");
    const auto shared = static_cast<std::size_t>(std::lround(g.overlap_fraction * static_cast<double>(g.vocab_size)));
    const std::size_t exclusive = (g.vocab_size - shared) / 2;
    return {exclusive, exclusive + shared, g.vocab_size};
  }
};

namespace detail {

/// Zipf(1) weights over n items in a seed-determined rank order.
inline std::vector<double> zipf_weights(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) rank[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(rank[i - 1], rank[rng.below(i)]);
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / static_cast<double>(rank[i] + 1);
  return w;
}

inline std::size_t draw(Rng& rng, const std::vector<double>& w) {
  double total = 0.0;
  for (double x : w) total += x;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < w.size(); ++i) {
    u -= w[i];
    if (u < 0.0) return i;
  }
  return w.size() - 1;
}

// Code-like grammar. Structural tokens occupy the forget-only band in a fixed
// order; identifiers come from the shared band.
class CodeGrammar {
 public:
  explicit CodeGrammar(const GrammarSpec& g) : spec_(g), bands_(VocabBands::of(g)) {
    MUDMAN_REQUIRE(bands_.shared_begin >= kStructural, "vocab too small for code grammar");
    n_ident_ = bands_.forget_end - bands_.shared_begin;
    ident_w_ = zipf_weights(n_ident_, mix_seed(g.structure_seed, 11));
    // Spare forget-only tokens act as additional operators/keywords.
    for (std::size_t t = kStructural; t < bands_.shared_begin; ++t) extra_ops_.push_back(static_cast<TokenId>(t));
  }

  void emit(Rng& rng, std::size_t len, std::vector<TokenId>& out) const {
    // A sequence reuses a small pool of local identifiers.
    std::vector<TokenId> locals;
    const std::size_t n_locals = 3 + rng.below(3);
    for (std::size_t i = 0; i < n_locals; ++i)
      locals.push_back(static_cast<TokenId>(bands_.shared_begin + draw(rng, ident_w_)));
    std::vector<TokenId> buf;
    while (buf.size() < len) {
      buf.push_back(kDef);
      buf.push_back(ident(rng, locals));
      buf.push_back(kLParen);
      args(rng, locals, buf);
      buf.push_back(kRParen);
      buf.push_back(kColon);
      body(rng, locals, 1, buf);
    }
    out.insert(out.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(len));
  }

 private:
  // Fixed structural ids.
  static constexpr TokenId kLParen = 0, kRParen = 1, kLBrace = 2, kRBrace = 3, kLBracket = 4, kRBracket = 5,
                           kNewline = 6, kIndent = 7, kDef = 8, kIf = 9, kFor = 10, kIn = 11, kReturn = 12,
                           kAssign = 13, kColon = 14, kComma = 15;
  static constexpr std::size_t kStructural = 16;

  TokenId ident(Rng& rng, const std::vector<TokenId>& locals) const {
    if (rng.uniform() < 0.8) return locals[rng.below(locals.size())];
    return static_cast<TokenId>(bands_.shared_begin + draw(rng, ident_w_));
  }

  TokenId op(Rng& rng) const {
    if (extra_ops_.empty()) return kAssign;
    return extra_ops_[rng.below(extra_ops_.size())];
  }

  void args(Rng& rng, const std::vector<TokenId>& locals, std::vector<TokenId>& buf) const {
    buf.push_back(ident(rng, locals));
    if (rng.uniform() < 0.5) {
      buf.push_back(kComma);
      buf.push_back(ident(rng, locals));
    }
  }

  void newline(std::size_t depth, std::vector<TokenId>& buf) const {
    buf.push_back(kNewline);
    for (std::size_t i = 0; i < depth; ++i) buf.push_back(kIndent);
  }

  void expr(Rng& rng, const std::vector<TokenId>& locals, std::size_t depth, std::vector<TokenId>& buf) const {
    const double u = rng.uniform();
    if (u < 0.35 || depth >= spec_.max_depth + 1) {
      buf.push_back(ident(rng, locals));
    } else if (u < 0.65) {
      buf.push_back(ident(rng, locals));
      buf.push_back(op(rng));
      buf.push_back(ident(rng, locals));
    } else if (u < 0.85) {
      buf.push_back(kLParen);
      expr(rng, locals, depth + 1, buf);
      buf.push_back(kRParen);
    } else {
      buf.push_back(ident(rng, locals));
      buf.push_back(kLBracket);
      expr(rng, locals, depth + 1, buf);
      buf.push_back(kRBracket);
    }
  }

  void stmt(Rng& rng, const std::vector<TokenId>& locals, std::size_t depth, std::vector<TokenId>& buf) const {
    const double u = rng.uniform();
    const bool can_nest = depth < spec_.max_depth;
    if (can_nest && u < 0.2) {
      buf.push_back(kIf);
      expr(rng, locals, depth, buf);
      buf.push_back(kColon);
      body(rng, locals, depth + 1, buf);
    } else if (can_nest && u < 0.35) {
      buf.push_back(kFor);
      buf.push_back(ident(rng, locals));
      buf.push_back(kIn);
      buf.push_back(ident(rng, locals));
      buf.push_back(kColon);
      body(rng, locals, depth + 1, buf);
    } else if (u < 0.5) {
      buf.push_back(kReturn);
      expr(rng, locals, depth, buf);
    } else if (u < 0.7) {
      buf.push_back(ident(rng, locals));
      buf.push_back(kLParen);
      args(rng, locals, buf);
      buf.push_back(kRParen);
    } else {
      buf.push_back(ident(rng, locals));
      buf.push_back(kAssign);
      expr(rng, locals, depth, buf);
    }
  }

  void body(Rng& rng, const std::vector<TokenId>& locals, std::size_t depth, std::vector<TokenId>& buf) const {
    buf.push_back(kLBrace);
    const std::size_t n = 1 + rng.below(3);
    for (std::size_t i = 0; i < n; ++i) {
      newline(depth, buf);
      stmt(rng, locals, depth, buf);
    }
    newline(depth - 1, buf);
    buf.push_back(kRBrace);
  }

  GrammarSpec spec_;
  VocabBands bands_;
  std::size_t n_ident_ = 0;
  std::vector<double> ident_w_;
  std::vector<TokenId> extra_ops_;
};

// Prose-like grammar: flat sentences over shared + prose-only words, Zipf
// unigram with a sparse preferred-successor table, ',' and '.' punctuation.
class ProseGrammar {
 public:
  explicit ProseGrammar(const GrammarSpec& g) : bands_(VocabBands::of(g)) {
    period_ = static_cast<TokenId>(bands_.vocab - 1);
    comma_ = static_cast<TokenId>(bands_.vocab - 2);
    n_words_ = bands_.vocab - 2 - bands_.shared_begin;
    word_w_ = zipf_weights(n_words_, mix_seed(g.structure_seed, 23));
    Rng rng(mix_seed(g.structure_seed, 29));
    successors_.resize(n_words_);
    for (auto& s : successors_)
      for (int k = 0; k < 3; ++k) s.push_back(rng.below(n_words_));
  }

  void emit(Rng& rng, std::size_t len, std::vector<TokenId>& out) const {
    std::vector<TokenId> buf;
    while (buf.size() < len) {
      const std::size_t words = 4 + rng.below(9);
      std::size_t w = draw(rng, word_w_);
      for (std::size_t i = 0; i < words; ++i) {
        buf.push_back(static_cast<TokenId>(bands_.shared_begin + w));
        if (i + 1 < words && rng.uniform() < 0.1) buf.push_back(comma_);
        w = rng.uniform() < 0.6 ? successors_[w][rng.below(3)] : draw(rng, word_w_);
      }
      buf.push_back(period_);
    }
    out.insert(out.end(), buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(len));
  }

 private:
  VocabBands bands_;
  TokenId period_, comma_;
  std::size_t n_words_;
  std::vector<double> word_w_;
  std::vector<std::vector<std::size_t>> successors_;
};

}  // namespace detail

/// Reserved start of the held-out evaluation band (in sequence indices).
inline constexpr std::uint64_t kEvalBandStart = std::uint64_t{1} << 48;

/// Deterministic sequence source; `cursor` counts emitted sequences.
class CorpusStream {
 public:
  CorpusStream(GrammarSpec grammar, std::uint64_t seed, std::uint64_t cursor = 0)
      : grammar_(grammar), seed_(seed), cursor_(cursor) {
    if (grammar_.id == GrammarId::forget_grammar)
      code_.emplace_back(grammar_);
    else
      prose_.emplace_back(grammar_);
  }

  const GrammarSpec& grammar() const { return grammar_; }
  std::uint64_t seed() const { return seed_; }
  std::uint64_t cursor() const { return cursor_; }

  /// One sequence at an absolute index; does not move the cursor.
  std::vector<TokenId> sequence_at(std::uint64_t index, std::size_t seq) const {
    Rng rng(mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(grammar_.id) + 0x51), index));
    std::vector<TokenId> out;
    out.reserve(seq);
    if (!code_.empty())
      code_.front().emit(rng, seq, out);
    else
      prose_.front().emit(rng, seq, out);
    return out;
  }

  TokenBatch batch_at(std::uint64_t first_index, std::size_t batch, std::size_t seq) const {
    MUDMAN_REQUIRE(batch > 0 && seq > 0, "batch and seq must be positive");
    TokenBatch tb{batch, seq, {}};
    tb.ids.reserve(batch * seq);
    for (std::size_t b = 0; b < batch; ++b) {
      auto s = sequence_at(first_index + b, seq);
      tb.ids.insert(tb.ids.end(), s.begin(), s.end());
    }
    return tb;
  }

  /// Next training batch; advances the cursor by `batch` sequences.
  TokenBatch sample_batch(std::size_t batch, std::size_t seq, std::size_t context_len) {
    MUDMAN_REQUIRE(seq <= context_len, "seq exceeds context_len");
    MUDMAN_REQUIRE(cursor_ + batch <= kEvalBandStart, "training cursor reached the evaluation band");
    TokenBatch tb = batch_at(cursor_, batch, seq);
    cursor_ += batch;
    return tb;
  }

 private:
  GrammarSpec grammar_;
  std::uint64_t seed_;
  std::uint64_t cursor_;
  // At most one is populated; vectors keep the stream copyable without optional<>.
  std::vector<detail::CodeGrammar> code_;
  std::vector<detail::ProseGrammar> prose_;
};

/// Fixed held-out batches from the reserved band. Stable across calls and
/// independent of the stream's cursor.
inline std::vector<TokenBatch> held_out_eval_set(const CorpusStream& stream, std::size_t n, std::size_t batch,
                                                 std::size_t seq) {
  MUDMAN_REQUIRE(n > 0, "eval set needs n > 0");
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(stream.batch_at(kEvalBandStart + i * batch, batch, seq));
  return out;
}

/// Pretraining mixture: rows [0, n_retain) from retain, rest from forget.
inline TokenBatch mixture_batch(CorpusStream& retain, CorpusStream& forget, std::size_t batch, std::size_t seq,
                                std::size_t context_len, double retain_fraction) {
  const auto n_retain = static_cast<std::size_t>(std::lround(retain_fraction * static_cast<double>(batch)));
  TokenBatch out{batch, seq, {}};
  if (n_retain > 0) {
    auto r = retain.sample_batch(n_retain, seq, context_len);
    out.ids.insert(out.ids.end(), r.ids.begin(), r.ids.end());
  }
  if (batch > n_retain) {
    auto f = forget.sample_batch(batch - n_retain, seq, context_len);
    out.ids.insert(out.ids.end(), f.ids.begin(), f.ids.end());
  }
  return out;
}

/// Line-delimited export: one sequence per line, ids separated by spaces.
inline std::string export_sequences(const CorpusStream& stream, std::uint64_t first, std::size_t count,
                                    std::size_t seq) {
  std::string out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto s = stream.sequence_at(first + i, seq);
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j) out += ' ';
      out += std::to_string(s[j]);
    }
    out += '\n';
  }
  return out;
}

}  // namespace mudman
