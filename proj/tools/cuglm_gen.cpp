// Writes one of the synthetic MiniTyped corpora to a directory.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cuglm/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic corpus generator"};
  std::string kind = "toy", out;
  std::size_t files = 100, themes = 32;
  std::uint64_t seed = 1;
  app.add_option("kind", kind, "toy | typed | themed")->check(CLI::IsMember({"toy", "typed", "themed"}));
  app.add_option("-o,--out", out, "output directory")->required();
  app.add_option("-n,--files", files, "number of files");
  app.add_option("--themes", themes, "theme count for the themed corpus");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);

  namespace syn = cuglm::synthetic;
  try {
    const auto sources = kind == "toy"     ? syn::toy_corpus(files, seed)
                         : kind == "typed" ? syn::typed_corpus(files, seed)
                                           : syn::themed_corpus(files, themes, seed);
    syn::write_sources(out, sources);
    std::cout << "wrote " << sources.size() << " files to " << out << '\n';
  } catch (const cuglm::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
