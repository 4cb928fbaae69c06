#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cuglm/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Code completion with a multi-task pre-trained transformer"};
  app.require_subcommand(1, 1);

  cuglm::cli::Command cmd;
  std::uint64_t seed = 0;
  const std::vector<std::pair<std::string, std::string>> verbs = {
      {"prepare", "split the corpus and build vocabularies"},
      {"pretrain", "pre-train on the pre-training split"},
      {"finetune", "fine-tune on the training split"},
      {"eval", "evaluate a checkpoint and dump predictions"},
      {"ablate", "train and evaluate the ablation grid"},
      {"complete", "interactive completion on standard input"}};
  for (const auto& [name, help] : verbs) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", cmd.config_path, "configuration file (key = value lines)");
    sub->add_option("-s,--set", cmd.overrides, "override a configuration key: key=value")->take_all();
    sub->add_option("--seed", seed, "seed for splits, initialization and data order");
    sub->callback([&cmd, name = name] { cmd.verb = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: UsageError: " << e.what() << '\n';
    return 2;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->count("--seed")) cmd.seed = seed;
  return cuglm::cli::run(cmd, std::cin, std::cout, std::cerr);
}
