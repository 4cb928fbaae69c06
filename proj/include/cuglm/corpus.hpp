#pragma once

// Typed token streams and closed vocabularies.
//
// Two front-ends produce the same TokenFile shape: a lexer for the bundled
// toy language (MiniTyped, `.mt` files) and a reader for tab-separated token
// records (`.tok` files) that carry types extracted by an external analyzer.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cuglm/error.hpp"
#include "cuglm/rng.hpp"

namespace cuglm {

enum class Category : std::uint8_t {
  identifier,
  keyword,
  punctuation,
  numeral,
  operator_,
  string_literal,
  other,
};

inline constexpr std::array<Category, 7> kAllCategories = {
    Category::identifier, Category::keyword,        Category::punctuation, Category::numeral,
    Category::operator_,  Category::string_literal, Category::other,
};

constexpr std::string_view category_name(Category c) noexcept {
  switch (c) {
    case Category::identifier: return "identifier";
    case Category::keyword: return "keyword";
    case Category::punctuation: return "punctuation";
    case Category::numeral: return "numeral";
    case Category::operator_: return "operator";
    case Category::string_literal: return "string_literal";
    case Category::other: return "other";
  }
  return "other";
}

/// Short code used in token-record files.
constexpr std::string_view category_code(Category c) noexcept {
  switch (c) {
    case Category::identifier: return "id";
    case Category::keyword: return "kw";
    case Category::punctuation: return "punct";
    case Category::numeral: return "num";
    case Category::operator_: return "op";
    case Category::string_literal: return "str";
    case Category::other: return "other";
  }
  return "other";
}

inline std::optional<Category> category_from_code(std::string_view code) noexcept {
  for (Category c : kAllCategories)
    if (category_code(c) == code) return c;
  return std::nullopt;
}

inline std::optional<Category> category_from_name(std::string_view name) noexcept {
  for (Category c : kAllCategories)
    if (category_name(c) == name) return c;
  return std::nullopt;
}

struct TypedToken {
  std::string text;
  Category category = Category::other;
  std::optional<std::string> declared_type;  // identifiers only
  std::size_t line = 0;

  bool typed() const noexcept { return declared_type.has_value(); }
  bool operator==(const TypedToken&) const = default;
};

struct TokenFile {
  std::string path;
  std::vector<TypedToken> tokens;
  std::size_t line_count = 1;

  /// Index range [first, last) of tokens on lines [line_begin, line_end).
  std::pair<std::size_t, std::size_t> token_span(std::size_t line_begin,
                                                 std::size_t line_end) const {
    auto by_line = [](const TypedToken& t, std::size_t l) { return t.line < l; };
    auto first = std::lower_bound(tokens.begin(), tokens.end(), line_begin, by_line);
    auto last = std::lower_bound(first, tokens.end(), line_end, by_line);
    return {static_cast<std::size_t>(first - tokens.begin()),
            static_cast<std::size_t>(last - tokens.begin())};
  }
};

// ---------------------------------------------------------------------------
// MiniTyped lexer
// ---------------------------------------------------------------------------

namespace minityped {

inline constexpr std::array<std::string_view, 13> kKeywords = {
    "let", "function", "class", "return", "if",  "else",   "while",
    "new", "public",   "void",  "int",    "string", "bool",
};
inline constexpr std::array<std::string_view, 4> kBuiltinTypes = {"int", "string", "bool", "void"};

inline bool is_keyword(std::string_view s) noexcept {
  return std::find(kKeywords.begin(), kKeywords.end(), s) != kKeywords.end();
}
inline bool is_builtin_type(std::string_view s) noexcept {
  return std::find(kBuiltinTypes.begin(), kBuiltinTypes.end(), s) != kBuiltinTypes.end();
}
inline bool ident_start(char c) noexcept {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || c == '_';
}
inline bool ident_char(char c) noexcept { return ident_start(c) || (c >= '0' && c <= '9'); }
inline bool digit(char c) noexcept { return c >= '0' && c <= '9'; }

}  // namespace minityped

/// Lexes MiniTyped source. `name : Type` declarations attach Type to every
/// occurrence of `name` in the same text (flow-insensitive, last declaration
/// wins). Type-annotation tokens stay in the stream.
inline std::vector<TypedToken> tokenize(std::string_view src) {
  using namespace minityped;
  std::vector<TypedToken> out;
  std::size_t line = 0;
  std::size_t col = 0;
  std::size_t i = 0;

  auto fail = [&](std::string_view why) {
    throw LexError("line " + std::to_string(line + 1) + ", column " + std::to_string(col + 1) +
                   ": " + std::string(why));
  };
  auto push = [&](std::size_t len, Category cat) {
    out.push_back(TypedToken{std::string(src.substr(i, len)), cat, std::nullopt, line});
    i += len;
    col += len;
  };

  while (i < src.size()) {
    const char c = src[i];
    if (c == '\n') {
      ++line;
      col = 0;
      ++i;
    } else if (c == ' ' || c == '\t' || c == '\r') {
      ++i;
      ++col;
    } else if (ident_start(c)) {
      std::size_t len = 1;
      while (i + len < src.size() && ident_char(src[i + len])) ++len;
      push(len, is_keyword(src.substr(i, len)) ? Category::keyword : Category::identifier);
    } else if (digit(c)) {
      std::size_t len = 1;
      while (i + len < src.size() && digit(src[i + len])) ++len;
      push(len, Category::numeral);
    } else if (c == '"') {
      std::size_t len = 1;
      for (;;) {
        if (i + len >= src.size() || src[i + len] == '\n') fail("unterminated string literal");
        const char s = src[i + len];
        if (s == '\t') fail("tab inside string literal");
        if (s == '\\') {
          if (i + len + 1 >= src.size() || src[i + len + 1] == '\n')
            fail("unterminated string literal");
          len += 2;
          continue;
        }
        ++len;
        if (s == '"') break;
      }
      push(len, Category::string_literal);
    } else if ((c == '=' || c == '!') && i + 1 < src.size() && src[i + 1] == '=') {
      push(2, Category::operator_);
    } else if (std::string_view("=+-*/<>.").find(c) != std::string_view::npos) {
      push(1, Category::operator_);
    } else if (std::string_view("(){};:,").find(c) != std::string_view::npos) {
      push(1, Category::punctuation);
    } else {
      fail("character outside the MiniTyped alphabet");
    }
  }

  std::unordered_map<std::string, std::string> declared;
  for (std::size_t k = 0; k + 2 < out.size(); ++k) {
    const auto& name = out[k];
    const auto& colon = out[k + 1];
    const auto& type = out[k + 2];
    if (name.category == Category::identifier && colon.text == ":" &&
        (type.category == Category::identifier || is_builtin_type(type.text)))
      declared[name.text] = type.text;
  }
  for (auto& t : out) {
    if (t.category != Category::identifier) continue;
    if (auto it = declared.find(t.text); it != declared.end()) t.declared_type = it->second;
  }
  return out;
}

inline TokenFile tokenize_file(std::string path, std::string_view src) {
  TokenFile f;
  f.path = std::move(path);
  f.tokens = tokenize(src);
  std::size_t lines = static_cast<std::size_t>(std::count(src.begin(), src.end(), '\n'));
  if (src.empty() || src.back() != '\n') ++lines;
  if (!f.tokens.empty()) lines = std::max(lines, f.tokens.back().line + 1);
  f.line_count = std::max<std::size_t>(lines, 1);
  return f;
}

// ---------------------------------------------------------------------------
// Token-record files
// ---------------------------------------------------------------------------

inline bool is_reserved_text(std::string_view s) noexcept {
  return s == "[CLS]" || s == "[SEP]" || s == "[MASK]" || s == "[PAD]" || s == "[UNK]";
}

inline TokenFile parse_token_records(std::string path, std::istream& in) {
  TokenFile f;
  f.path = std::move(path);
  std::string raw;
  std::size_t lineno = 0;
  std::size_t record = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    if (raw.empty() || raw.front() == '#') continue;
    ++record;
    auto bad = [&](const std::string& why) {
      throw FormatError(f.path + ": record " + std::to_string(record) + " (line " +
                        std::to_string(lineno) + "): " + why);
    };
    std::array<std::string_view, 4> fields;
    std::string_view rest(raw);
    for (std::size_t k = 0; k < 4; ++k) {
      const auto tab = rest.find('\t');
      if (k < 3) {
        if (tab == std::string_view::npos) bad("expected 4 tab-separated fields");
        fields[k] = rest.substr(0, tab);
        rest.remove_prefix(tab + 1);
      } else {
        if (tab != std::string_view::npos) bad("expected 4 tab-separated fields");
        fields[k] = rest;
      }
    }
    const auto cat = category_from_code(fields[0]);
    if (!cat) bad("unknown category code '" + std::string(fields[0]) + "'");
    if (fields[1].empty()) bad("empty token text");
    if (is_reserved_text(fields[1])) bad("reserved token text '" + std::string(fields[1]) + "'");
    std::size_t line_idx = 0;
    const auto* end = fields[3].data() + fields[3].size();
    auto [ptr, ec] = std::from_chars(fields[3].data(), end, line_idx);
    if (fields[3].empty() || ec != std::errc{} || ptr != end) bad("bad line index");
    if (!f.tokens.empty() && line_idx < f.tokens.back().line) bad("line indices must not decrease");
    TypedToken t{std::string(fields[1]), *cat, std::nullopt, line_idx};
    if (!fields[2].empty()) {
      if (*cat != Category::identifier)
        throw TypeOnNonIdentifier(f.path + ": record " + std::to_string(record) +
                                  ": type on category '" + std::string(fields[0]) + "'");
      t.declared_type = std::string(fields[2]);
    }
    f.tokens.push_back(std::move(t));
  }
  f.line_count = f.tokens.empty() ? 1 : f.tokens.back().line + 1;
  return f;
}

inline TokenFile read_token_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_token_records(path, in);
}

inline void write_token_records(std::ostream& out, const TokenFile& f) {
  out << "# category\ttext\ttype\tline\n";
  for (const auto& t : f.tokens)
    out << category_code(t.category) << '\t' << t.text << '\t' << t.declared_type.value_or("")
        << '\t' << t.line << '\n';
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Loads `.tok` record files directly and lexes anything else as MiniTyped.
inline TokenFile load_token_file(const std::string& path) {
  if (std::filesystem::path(path).extension() == ".tok") return read_token_records(path);
  return tokenize_file(path, read_text_file(path));
}

/// Every regular `.mt` / `.tok` file under `dir`, sorted by path.
inline std::vector<std::string> list_corpus_files(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext == ".mt" || ext == ".tok") out.push_back(e.path().generic_string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Vocabularies
// ---------------------------------------------------------------------------

using TokenId = std::int32_t;

enum class VocabKind : std::uint8_t { token, type };

class Vocab {
 public:
  // Token vocabularies reserve ids 0..4; type vocabularies reserve id 0.
  static constexpr TokenId kCls = 0;
  static constexpr TokenId kSep = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kPad = 3;
  static constexpr TokenId kTokenUnk = 4;
  static constexpr TokenId kTypeUnk = 0;

  Vocab() = default;

  /// Builds a vocabulary from its non-special entries, in id order.
  static Vocab from_entries(VocabKind kind, const std::vector<std::string>& words) {
    Vocab v;
    v.kind_ = kind;
    if (kind == VocabKind::token)
      v.entries_ = {"[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"};
    else
      v.entries_ = {"[UNK]"};
    v.entries_.insert(v.entries_.end(), words.begin(), words.end());
    for (std::size_t i = 0; i < v.entries_.size(); ++i) {
      if (!v.index_.emplace(v.entries_[i], static_cast<TokenId>(i)).second)
        throw FormatError("duplicate vocabulary entry '" + v.entries_[i] + "'");
    }
    return v;
  }

  VocabKind kind() const noexcept { return kind_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t special_count() const noexcept { return kind_ == VocabKind::token ? 5 : 1; }
  const std::vector<std::string>& entries() const noexcept { return entries_; }
  TokenId unk_id() const noexcept { return kind_ == VocabKind::token ? kTokenUnk : kTypeUnk; }

  std::map<std::string, TokenId> special_ids() const {
    if (kind_ != VocabKind::token) return {};
    return {{"[CLS]", kCls}, {"[SEP]", kSep}, {"[MASK]", kMask}, {"[PAD]", kPad}};
  }

  TokenId encode(std::string_view text) const {
    auto it = index_.find(std::string(text));
    return it == index_.end() ? unk_id() : it->second;
  }

  bool contains(std::string_view text) const { return index_.count(std::string(text)) != 0; }

  const std::string& decode(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size())
      throw RangeError("vocabulary id " + std::to_string(id) + " out of range [0, " +
                       std::to_string(entries_.size()) + ")");
    return entries_[static_cast<std::size_t>(id)];
  }

  std::uint64_t fingerprint() const {
    Fnv1a h;
    h.update(kind_ == VocabKind::token ? "token" : "type");
    for (const auto& e : entries_) {
      h.update(e);
      h.update(std::string_view("\n", 1));
    }
    return h.digest();
  }

  void save(std::ostream& out) const {
    out << "#cuglm-vocab " << (kind_ == VocabKind::token ? "token" : "type") << '\n';
    for (std::size_t i = special_count(); i < entries_.size(); ++i) out << entries_[i] << '\n';
  }

  static Vocab load(std::istream& in) {
    std::string header;
    if (!std::getline(in, header)) throw FormatError("empty vocabulary file");
    VocabKind kind;
    if (header == "#cuglm-vocab token")
      kind = VocabKind::token;
    else if (header == "#cuglm-vocab type")
      kind = VocabKind::type;
    else
      throw FormatError("bad vocabulary header '" + header + "'");
    std::vector<std::string> words;
    for (std::string w; std::getline(in, w);) words.push_back(w);
    return from_entries(kind, words);
  }

  void save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    save(out);
  }
  static Vocab load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return load(in);
  }

 private:
  VocabKind kind_ = VocabKind::token;
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> index_;
};

/// The K most frequent strings (token texts, or declared types for a type
/// vocabulary); ties broken lexicographically.
inline Vocab build_vocab(const std::vector<TokenFile>& files, VocabKind kind, std::size_t k) {
  if (k == 0) throw ConfigError("vocabulary size K must be at least 1");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& f : files) {
    for (const auto& t : f.tokens) {
      if (kind == VocabKind::token)
        ++counts[t.text];
      else if (t.declared_type)
        ++counts[*t.declared_type];
    }
  }
  if (counts.empty()) throw EmptyCorpus("no countable strings for vocabulary");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > k) ranked.resize(k);
  std::vector<std::string> words;
  words.reserve(ranked.size());
  for (auto& [w, n] : ranked) words.push_back(std::move(w));
  return Vocab::from_entries(kind, words);
}

struct Vocabs {
  Vocab token;
  Vocab type;
};

}  // namespace cuglm
