#pragma once

// Pre-training segment pairs, identifier masking and model-ready encodings.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/rng.hpp"

namespace cuglm {

struct PipelineConfig {
  std::size_t max_seq = 128;
  std::size_t stride = 64;
  /// Upper bound on the fraction of sequence positions that may be masked.
  /// Unset means every typed identifier is masked.
  std::optional<double> mask_rate_cap;
};

struct SegmentPair {
  std::vector<TypedToken> a_tokens;
  std::vector<TypedToken> b_tokens;
  int ncp_label = 0;  // 1: b follows a in the same file
  std::string source_path;
  std::string b_path;
  std::size_t a_last_line = 0;
  std::size_t b_first_line = 0;
};

/// The random decisions behind one segment pair; exposed so tests can force
/// either branch.
struct SegmentChoice {
  std::size_t first_lines = 1;  // N: S1 is the first N (non-blank) lines
  bool consecutive = true;
  std::size_t other_file = 0;   // index into the corpus, random branch only
  std::size_t other_start = 0;  // first non-blank line of the random span
  std::size_t other_lines = 1;  // length of the random span in lines
};

namespace detail {

/// Distinct source lines carrying at least one token, in order.
inline std::vector<std::size_t> nonblank_lines(const TokenFile& f) {
  std::vector<std::size_t> lines;
  for (const auto& t : f.tokens)
    if (lines.empty() || lines.back() != t.line) lines.push_back(t.line);
  return lines;
}

inline std::vector<TypedToken> lines_slice(const TokenFile& f, const std::vector<std::size_t>& lines,
                                           std::size_t first, std::size_t count) {
  const auto [b, e] = f.token_span(lines[first], lines[first + count - 1] + 1);
  return {f.tokens.begin() + static_cast<std::ptrdiff_t>(b),
          f.tokens.begin() + static_cast<std::ptrdiff_t>(e)};
}

}  // namespace detail

/// Assembles a pair from explicit choices. Lines are counted over non-blank
/// lines so that neither segment can come out empty.
inline SegmentPair build_segment_pair(std::span<const TokenFile> corpus, std::size_t file_index,
                                      const SegmentChoice& choice, std::size_t max_seq = 128) {
  const TokenFile& file = corpus[file_index];
  const auto lines = detail::nonblank_lines(file);
  if (lines.size() < 2)
    throw FileTooShort(file.path + ": segment pairs need at least 2 non-blank lines");
  if (choice.first_lines < 1 || choice.first_lines >= lines.size())
    throw RangeError("segment length N out of range");
  if (max_seq < 5) throw LengthError("max_seq too small for a segment pair");

  SegmentPair pair;
  pair.source_path = file.path;
  pair.a_tokens = detail::lines_slice(file, lines, 0, choice.first_lines);
  pair.a_last_line = lines[choice.first_lines - 1];
  if (choice.consecutive) {
    pair.ncp_label = 1;
    pair.b_path = file.path;
    pair.b_tokens =
        detail::lines_slice(file, lines, choice.first_lines, lines.size() - choice.first_lines);
    pair.b_first_line = lines[choice.first_lines];
  } else {
    if (choice.other_file == file_index || choice.other_file >= corpus.size())
      throw RangeError("random segment must come from a different corpus file");
    const TokenFile& other = corpus[choice.other_file];
    const auto other_lines = detail::nonblank_lines(other);
    if (choice.other_start >= other_lines.size() || choice.other_lines < 1 ||
        choice.other_start + choice.other_lines > other_lines.size())
      throw RangeError("random segment span out of range");
    pair.ncp_label = 0;
    pair.b_path = other.path;
    pair.b_tokens = detail::lines_slice(other, other_lines, choice.other_start, choice.other_lines);
    pair.b_first_line = other_lines[choice.other_start];
  }

  // Fit [CLS] a [SEP] b into max_seq with one slot of headroom. b loses its
  // tail first; a then loses its head so the a/b boundary is preserved.
  const std::size_t budget = max_seq - 3;
  if (pair.a_tokens.size() + pair.b_tokens.size() > budget) {
    const std::size_t keep_b =
        std::max<std::size_t>(1, budget > pair.a_tokens.size() ? budget - pair.a_tokens.size() : 0);
    if (pair.b_tokens.size() > keep_b) pair.b_tokens.resize(keep_b);
    if (pair.a_tokens.size() + pair.b_tokens.size() > budget) {
      const std::size_t drop = pair.a_tokens.size() + pair.b_tokens.size() - budget;
      pair.a_tokens.erase(pair.a_tokens.begin(),
                          pair.a_tokens.begin() + static_cast<std::ptrdiff_t>(drop));
    }
  }
  return pair;
}

/// Draws the random decisions for a pair rooted at corpus[file_index].
inline SegmentChoice draw_segment_choice(std::span<const TokenFile> corpus, std::size_t file_index,
                                         Rng& rng) {
  const auto n_lines = detail::nonblank_lines(corpus[file_index]).size();
  if (n_lines < 2)
    throw FileTooShort(corpus[file_index].path + ": segment pairs need at least 2 non-blank lines");
  if (corpus.size() < 2) throw EmptyCorpus("segment pairs need at least 2 corpus files");

  SegmentChoice c;
  c.first_lines = static_cast<std::size_t>(rng.between(1, static_cast<std::int64_t>(n_lines) - 1));
  c.consecutive = rng.coin();
  if (!c.consecutive) {
    // Uniform over the other files that have any tokens.
    for (;;) {
      std::size_t j = static_cast<std::size_t>(rng.below(corpus.size() - 1));
      if (j >= file_index) ++j;
      const auto other_n = detail::nonblank_lines(corpus[j]).size();
      if (other_n == 0) continue;
      c.other_file = j;
      c.other_start = static_cast<std::size_t>(rng.below(other_n));
      c.other_lines = static_cast<std::size_t>(
          rng.between(1, static_cast<std::int64_t>(other_n - c.other_start)));
      break;
    }
  }
  return c;
}

inline SegmentPair sample_segment_pair(std::span<const TokenFile> corpus, std::size_t file_index,
                                       Rng& rng, std::size_t max_seq = 128) {
  return build_segment_pair(corpus, file_index, draw_segment_choice(corpus, file_index, rng),
                            max_seq);
}

// ---------------------------------------------------------------------------
// Masking and encoding
// ---------------------------------------------------------------------------

struct MaskedSequence {
  std::vector<TokenId> ids;
  std::vector<std::int32_t> mask_positions;
  std::vector<TokenId> token_targets;
  std::vector<TokenId> type_targets;
};

/// Replaces every typed identifier with [MASK]; nothing else changes.
inline MaskedSequence mask_identifiers(std::span<const TypedToken> tokens, const Vocabs& vocabs,
                                       std::optional<double> mask_rate_cap = std::nullopt) {
  MaskedSequence m;
  m.ids.reserve(tokens.size());
  std::size_t limit = tokens.size();
  if (mask_rate_cap)
    limit = static_cast<std::size_t>(std::floor(*mask_rate_cap * static_cast<double>(tokens.size())));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = vocabs.token.encode(tokens[i].text);
    if (tokens[i].declared_type && m.mask_positions.size() < limit) {
      m.ids.push_back(Vocab::kMask);
      m.mask_positions.push_back(static_cast<std::int32_t>(i));
      m.token_targets.push_back(id);
      m.type_targets.push_back(vocabs.type.encode(*tokens[i].declared_type));
    } else {
      m.ids.push_back(id);
    }
  }
  return m;
}

struct EncodedExample {
  std::vector<TokenId> input_ids;
  std::vector<std::int32_t> segment_ids;
  std::vector<std::int32_t> positions;
  std::vector<std::int32_t> mask_positions;
  std::vector<TokenId> mask_token_targets;
  std::vector<TokenId> mask_type_targets;
  std::optional<int> ncp_label;
  /// Next-token ids of the unmasked view; the last entry is [PAD].
  std::vector<TokenId> ulm_targets;

  std::string source_path;
  std::size_t source_offset = 0;

  std::size_t size() const noexcept { return input_ids.size(); }

  /// The view with every masked position restored to its original id.
  std::vector<TokenId> unmasked_ids() const {
    auto ids = input_ids;
    for (std::size_t k = 0; k < mask_positions.size(); ++k)
      ids[static_cast<std::size_t>(mask_positions[k])] = mask_token_targets[k];
    return ids;
  }

  bool operator==(const EncodedExample&) const = default;
};

namespace detail {

inline std::vector<TokenId> shift_targets(const std::vector<TokenId>& ids) {
  std::vector<TokenId> t(ids.size(), Vocab::kPad);
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) t[i] = ids[i + 1];
  return t;
}

}  // namespace detail

/// [CLS] a [SEP] b, segment 0 for [CLS]+a+[SEP] and 1 for b.
inline EncodedExample encode_pretrain(const SegmentPair& pair, const Vocabs& vocabs,
                                      const PipelineConfig& cfg = {}) {
  if (pair.b_tokens.empty()) throw LengthError("segment pair has an empty second segment");
  const std::size_t n = pair.a_tokens.size() + pair.b_tokens.size() + 2;
  if (n > cfg.max_seq)
    throw LengthError("pair layout of " + std::to_string(n) + " positions exceeds max_seq " +
                      std::to_string(cfg.max_seq));

  std::vector<TypedToken> layout;
  layout.reserve(n);
  layout.push_back({"[CLS]", Category::other, std::nullopt, 0});
  layout.insert(layout.end(), pair.a_tokens.begin(), pair.a_tokens.end());
  layout.push_back({"[SEP]", Category::other, std::nullopt, 0});
  layout.insert(layout.end(), pair.b_tokens.begin(), pair.b_tokens.end());

  auto masked = mask_identifiers(layout, vocabs, cfg.mask_rate_cap);
  EncodedExample ex;
  ex.input_ids = std::move(masked.ids);
  ex.mask_positions = std::move(masked.mask_positions);
  ex.mask_token_targets = std::move(masked.token_targets);
  ex.mask_type_targets = std::move(masked.type_targets);
  ex.segment_ids.assign(n, 0);
  std::fill(ex.segment_ids.begin() + static_cast<std::ptrdiff_t>(pair.a_tokens.size() + 2),
            ex.segment_ids.end(), 1);
  ex.positions.resize(n);
  for (std::size_t i = 0; i < n; ++i) ex.positions[i] = static_cast<std::int32_t>(i);
  ex.ncp_label = pair.ncp_label;
  ex.ulm_targets = detail::shift_targets(ex.unmasked_ids());
  ex.source_path = pair.source_path;
  return ex;
}

/// Sliding windows of up to max_seq tokens advancing by `stride`. Each
/// window carries the masked view; the unmasked view is `unmasked_ids()`.
inline std::vector<EncodedExample> encode_finetune(const TokenFile& file, const Vocabs& vocabs,
                                                   const PipelineConfig& cfg = {}) {
  if (cfg.stride < 1) throw ConfigError("stride must be at least 1");
  if (cfg.max_seq < 1) throw ConfigError("max_seq must be at least 1");
  std::vector<EncodedExample> out;
  const std::size_t n = file.tokens.size();
  for (std::size_t start = 0; start < n; start += cfg.stride) {
    const std::size_t len = std::min(cfg.max_seq, n - start);
    const std::span<const TypedToken> window(file.tokens.data() + start, len);
    auto masked = mask_identifiers(window, vocabs, cfg.mask_rate_cap);
    EncodedExample ex;
    ex.input_ids = std::move(masked.ids);
    ex.mask_positions = std::move(masked.mask_positions);
    ex.mask_token_targets = std::move(masked.token_targets);
    ex.mask_type_targets = std::move(masked.type_targets);
    ex.segment_ids.assign(len, 0);
    ex.positions.resize(len);
    for (std::size_t i = 0; i < len; ++i) ex.positions[i] = static_cast<std::int32_t>(i);
    ex.ulm_targets = detail::shift_targets(ex.unmasked_ids());
    ex.source_path = file.path;
    ex.source_offset = start;
    out.push_back(std::move(ex));
    if (start + len >= n) break;
  }
  return out;
}

inline void hash_example(Fnv1a& h, const EncodedExample& ex) {
  auto put = [&h](const auto& v) {
    h.update_u64(v.size());
    for (auto x : v) h.update_u64(static_cast<std::uint64_t>(static_cast<std::int64_t>(x)));
  };
  put(ex.input_ids);
  put(ex.segment_ids);
  put(ex.mask_positions);
  put(ex.mask_token_targets);
  put(ex.mask_type_targets);
  put(ex.ulm_targets);
  h.update_u64(ex.ncp_label ? static_cast<std::uint64_t>(*ex.ncp_label) : 2u);
}

// ---------------------------------------------------------------------------
// Text dump of encoded examples
// ---------------------------------------------------------------------------

namespace detail {

template <class Seq>
void write_int_list(std::ostream& out, const char* key, const Seq& v) {
  out << key << ':';
  for (auto x : v) out << ' ' << x;
  out << '\n';
}

inline std::vector<std::int32_t> parse_int_list(const std::string& rest) {
  std::vector<std::int32_t> v;
  std::istringstream ss(rest);
  for (std::int32_t x; ss >> x;) v.push_back(x);
  if (!ss.eof()) throw FormatError("bad integer list '" + rest + "'");
  return v;
}

}  // namespace detail

inline void write_example(std::ostream& out, const EncodedExample& ex) {
  out << "example\n";
  detail::write_int_list(out, "input_ids", ex.input_ids);
  detail::write_int_list(out, "segment_ids", ex.segment_ids);
  detail::write_int_list(out, "positions", ex.positions);
  detail::write_int_list(out, "mask_positions", ex.mask_positions);
  detail::write_int_list(out, "mask_token_targets", ex.mask_token_targets);
  detail::write_int_list(out, "mask_type_targets", ex.mask_type_targets);
  out << "ncp_label: " << (ex.ncp_label ? std::to_string(*ex.ncp_label) : "none") << '\n';
  detail::write_int_list(out, "ulm_targets", ex.ulm_targets);
  out << "end\n";
}

inline std::vector<EncodedExample> read_examples(std::istream& in) {
  std::vector<EncodedExample> out;
  std::optional<EncodedExample> cur;
  for (std::string line; std::getline(in, line);) {
    if (line.empty() || line.front() == '#') continue;
    if (line == "example") {
      if (cur) throw FormatError("nested example record");
      cur.emplace();
      continue;
    }
    if (!cur) throw FormatError("field outside an example record: '" + line + "'");
    if (line == "end") {
      out.push_back(std::move(*cur));
      cur.reset();
      continue;
    }
    const auto colon = line.find(':');
    if (colon == std::string::npos) throw FormatError("bad example field '" + line + "'");
    const std::string key = line.substr(0, colon);
    const std::string rest = line.substr(colon + 1);
    if (key == "ncp_label") {
      const auto v = detail::parse_int_list(rest == " none" ? "" : rest);
      if (v.size() == 1) cur->ncp_label = v[0];
      continue;
    }
    auto v = detail::parse_int_list(rest);
    if (key == "input_ids") cur->input_ids = v;
    else if (key == "segment_ids") cur->segment_ids = v;
    else if (key == "positions") cur->positions = v;
    else if (key == "mask_positions") cur->mask_positions = v;
    else if (key == "mask_token_targets") cur->mask_token_targets = v;
    else if (key == "mask_type_targets") cur->mask_type_targets = v;
    else if (key == "ulm_targets") cur->ulm_targets = v;
    else throw FormatError("unknown example field '" + key + "'");
  }
  if (cur) throw FormatError("unterminated example record");
  return out;
}

}  // namespace cuglm
