#pragma once

// Helpers shared by the unit tests and the acceptance runner.

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/corpus.hpp"
#include "cuglm/model.hpp"

#ifndef CUGLM_SOURCE_DIR
#define CUGLM_SOURCE_DIR "."
#endif

namespace cuglm::testing {

inline std::string source_path(const std::string& rel) {
  return (std::filesystem::path(CUGLM_SOURCE_DIR) / rel).string();
}

/// Fresh, empty scratch directory under the system temp directory.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cuglm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::vector<TokenFile> load_dir(const std::string& dir) {
  std::vector<TokenFile> out;
  for (const auto& p : list_corpus_files(dir)) {
    TokenFile f = load_token_file(p);
    f.path = std::filesystem::path(p).filename().string();
    out.push_back(std::move(f));
  }
  return out;
}

inline Vocabs vocabs_for(const std::vector<TokenFile>& files, std::size_t token_k = 50000,
                         std::size_t type_k = 50000) {
  return {build_vocab(files, VocabKind::token, token_k), build_vocab(files, VocabKind::type, type_k)};
}

inline ModelConfig tiny_model(const Vocabs& v, std::size_t max_seq = 128) {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 32;
  c.heads = 2;
  c.ff = 128;
  c.type_hidden = 16;
  c.token_hidden = 32;
  c.vocab_token = v.token.size();
  c.vocab_type = v.type.size();
  c.max_seq = max_seq;
  c.dropout = 0.1;
  return c;
}

}  // namespace cuglm::testing
