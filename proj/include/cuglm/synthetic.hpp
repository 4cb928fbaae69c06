#pragma once

// Generators for small MiniTyped corpora: a general toy corpus, a corpus
// whose identifier names are a function of their declared types, and a
// corpus whose files each draw from one themed vocabulary.

#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/rng.hpp"

namespace cuglm::synthetic {

struct SourceFile {
  std::string name;  // file name, e.g. "toy_007.mt"
  std::string text;
};

namespace detail {

template <std::size_t N>
std::string_view pick(Rng& rng, const std::array<std::string_view, N>& pool) {
  return pool[rng.below(N)];
}

inline std::string numbered(std::string_view stem, std::size_t i, std::size_t width = 3) {
  std::string digits = std::to_string(i);
  while (digits.size() < width) digits.insert(digits.begin(), '0');
  return std::string(stem) + "_" + digits + ".mt";
}

inline std::string lower_first(std::string_view s) {
  std::string out(s);
  if (!out.empty()) out[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(out[0])));
  return out;
}

inline constexpr std::array<std::string_view, 20> kClasses = {
    "Counter", "Buffer", "Timer",  "Parser", "Window", "Socket", "Logger", "Matrix", "Queue",   "Stack",
    "Cache",   "Player", "Engine", "Router", "Widget", "Reader", "Writer", "Sensor", "Account", "Ticket"};
inline constexpr std::array<std::string_view, 12> kFields = {"count", "size",  "name",  "total", "limit", "label",
                                                             "index", "speed", "value", "owner", "level", "state"};
inline constexpr std::array<std::string_view, 13> kMethods = {"run",  "reset", "update", "draw", "send", "read", "write",
                                                              "push", "pop",   "open",   "close", "tick", "log"};
inline constexpr std::array<std::string_view, 6> kParams = {"step", "delta", "text", "item", "amount", "flag"};
inline constexpr std::array<std::string_view, 8> kLocals = {"next", "result", "tmp", "acc", "current", "prev", "out", "mark"};
inline constexpr std::array<std::string_view, 3> kBuiltins = {"int", "string", "bool"};
inline constexpr std::array<std::string_view, 8> kWords = {"\"ok\"",   "\"done\"", "\"start\"", "\"error\"",
                                                           "\"ready\"", "\"idle\"", "\"name\"",  "\"value\""};

inline std::string number(Rng& rng) { return std::to_string(rng.below(10) == 0 ? 100 : rng.below(10)); }

}  // namespace detail

/// One small class-shaped program; fewer than `max_tokens` tokens. An empty
/// `class_name` draws one from the pool.
inline std::string toy_program(Rng& rng, std::size_t max_tokens = 120, std::string_view class_name = {}) {
  using namespace detail;
  for (;;) {
    const std::string cls = class_name.empty() ? std::string(pick(rng, kClasses)) : std::string(class_name);
    std::string f1(pick(rng, kFields)), f2(pick(rng, kFields));
    while (f2 == f1) f2 = pick(rng, kFields);
    const std::string t1(pick(rng, kBuiltins)), t2(pick(rng, kBuiltins));
    std::string text = "class " + cls + " {\n";
    text += "  " + f1 + " : " + t1 + " ;\n";
    text += "  " + f2 + " : " + t2 + " ;\n";

    const std::size_t functions = 1 + rng.below(2);
    for (std::size_t fn = 0; fn < functions; ++fn) {
      const std::string m(pick(rng, kMethods));
      const std::string param(pick(rng, kParams));
      const std::string pt(pick(rng, kBuiltins));
      const std::string rt = rng.coin() ? std::string(pick(rng, kBuiltins)) : "void";
      text += std::string("  ") + (rng.coin() ? "public " : "") + "function " + m + " ( " + param + " : " + pt +
              " ) : " + rt + " {\n";
      const std::string local(pick(rng, kLocals));
      const std::string lt(pick(rng, kBuiltins));
      switch (rng.below(4)) {
        case 0: text += "    let " + local + " : " + lt + " = " + f1 + " + " + param + " ;\n"; break;
        case 1: text += "    let " + local + " : " + lt + " = " + number(rng) + " ;\n"; break;
        case 2: text += "    let " + local + " : " + lt + " = " + std::string(pick(rng, kWords)) + " ;\n"; break;
        default:
          text += "    let " + local + " : " + std::string(pick(rng, kClasses)) + " = new " +
                  std::string(pick(rng, kClasses)) + " ( ) ;\n";
      }
      switch (rng.below(4)) {
        case 0:
          text += "    if ( " + local + " < " + number(rng) + " ) { " + f2 + " = " + local + " ; }\n";
          break;
        case 1:
          text += "    while ( " + f1 + " != 0 ) { " + f1 + " = " + f1 + " - 1 ; }\n";
          break;
        case 2:
          text += "    " + local + " . " + std::string(pick(rng, kMethods)) + " ( " + param + " ) ;\n";
          break;
        default: text += "    " + f2 + " = " + f2 + " * " + number(rng) + " ;\n";
      }
      if (rt == "void")
        text += "    return ;\n";
      else
        text += "    return " + (rng.coin() ? local : f1) + " ;\n";
      text += "  }\n";
    }
    text += "}\n";
    if (tokenize(text).size() < max_tokens) return text;
  }
}

/// `count` distinct toy programs. With `distinct_classes` every file gets
/// its own class name, so each file is identified by its second token.
inline std::vector<SourceFile> toy_corpus(std::size_t count, std::uint64_t seed, bool distinct_classes = false) {
  Rng rng(mix_key({seed, 0x746f79u}));
  std::vector<SourceFile> out;
  std::vector<std::string> seen;
  while (out.size() < count) {
    const std::string cls =
        distinct_classes ? std::string(detail::kClasses[out.size() % detail::kClasses.size()]) +
                               std::to_string(out.size()) : std::string();
    std::string text = toy_program(rng, 120, cls);
    bool dup = false;
    for (const auto& s : seen) dup = dup || s == text;
    if (dup) continue;
    seen.push_back(text);
    out.push_back({detail::numbered("toy", out.size()), std::move(text)});
  }
  return out;
}

inline constexpr std::array<std::string_view, 16> kUserTypes = {
    "Timer",  "Buffer", "Socket", "Parser", "Logger", "Cursor", "Packet", "Router",
    "Engine", "Sensor", "Widget", "Player", "Ticket", "Folder", "Stream", "Canvas"};

/// Name of every variable declared with `type` in the typed corpus.
inline std::string name_for_type(std::string_view type) {
  if (type == "int") return "count";
  if (type == "string") return "label";
  if (type == "bool") return "flag";
  return detail::lower_first(type) + "Ref";
}

/// Files made of declare-then-use blocks. Each variable's name is fixed by
/// its declared type, so the type of the latest declaration determines the
/// next identifier.
inline std::vector<SourceFile> typed_corpus(std::size_t count, std::uint64_t seed) {
  Rng rng(mix_key({seed, 0x747970u}));
  static constexpr std::array<std::string_view, 6> verbs = {"start", "stop", "check", "flush", "reset", "close"};
  std::vector<SourceFile> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::string text;
    const std::size_t blocks = 4 + rng.below(3);
    for (std::size_t b = 0; b < blocks; ++b) {
      if (rng.below(4) == 0) {
        const std::string_view bt = detail::kBuiltins[rng.below(3)];
        const std::string name = name_for_type(bt);
        const std::string init = bt == "int" ? detail::number(rng) : bt == "string" ? "\"x\"" : "1 == 1";
        text += "let " + name + " : " + std::string(bt) + " = " + init + " ;\n";
        text += "print ( " + name + " ) ;\n";
      } else {
        const std::string_view type = kUserTypes[rng.below(kUserTypes.size())];
        const std::string name = name_for_type(type);
        text += "let " + name + " : " + std::string(type) + " = new " + std::string(type) + " ( ) ;\n";
        text += name + " . " + std::string(verbs[rng.below(verbs.size())]) + " ( ) ;\n";
      }
    }
    out.push_back({detail::numbered("typed", i), std::move(text)});
  }
  return out;
}

/// Files that each use the identifiers of one theme; `themes` themes are
/// shared across the corpus. Theme words are never declared, so masking
/// leaves them visible.
inline std::vector<SourceFile> themed_corpus(std::size_t count, std::size_t themes, std::uint64_t seed,
                                             std::string_view stem = "themed", std::size_t words_per_theme = 6) {
  if (themes == 0) throw ConfigError("themed corpus needs at least one theme");
  if (words_per_theme == 0 || words_per_theme > 6) throw ConfigError("words_per_theme must be in [1, 6]");
  Rng rng(mix_key({seed, 0x74686du}));
  static constexpr std::array<std::string_view, 6> roots = {"node", "edge", "item", "cell", "slot", "key"};
  static constexpr std::array<std::string_view, 26> letters = {"a", "b", "c", "d", "e", "f", "g", "h", "i",
                                                               "j", "k", "l", "m", "n", "o", "p", "q", "r",
                                                               "s", "t", "u", "v", "w", "x", "y", "z"};
  auto theme_word = [&](std::size_t theme, std::size_t r) {
    std::string suffix;
    for (std::size_t t = theme + 1; t > 0; t = (t - 1) / 26) suffix.insert(0, letters[(t - 1) % 26]);
    return std::string(roots[r]) + "_" + suffix;
  };
  std::vector<SourceFile> out;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t theme = rng.below(themes);
    auto w = [&] { return theme_word(theme, rng.below(words_per_theme)); };
    std::string text;
    const std::size_t lines = 5 + rng.below(4);
    for (std::size_t l = 0; l < lines; ++l) {
      switch (rng.below(4)) {
        case 0: text += "let tmp : int = " + w() + " + " + w() + " ;\n"; break;
        case 1: text += w() + " . push ( " + w() + " ) ;\n"; break;
        case 2: text += "if ( " + w() + " < " + w() + " ) { " + w() + " = " + w() + " ; }\n"; break;
        default: text += w() + " = " + w() + " + " + w() + " ;\n";
      }
    }
    out.push_back({detail::numbered(stem, i), std::move(text)});
  }
  return out;
}

inline std::vector<TokenFile> to_token_files(const std::vector<SourceFile>& sources) {
  std::vector<TokenFile> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(tokenize_file(s.name, s.text));
  return out;
}

inline void write_sources(const std::string& dir, const std::vector<SourceFile>& sources) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const auto& s : sources) {
    const auto path = (fs::path(dir) / s.name).string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << s.text;
  }
}

}  // namespace cuglm::synthetic
