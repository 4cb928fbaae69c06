#pragma once

// Command verbs: prepare, pretrain, finetune, eval, ablate, complete.
// Every artifact path derives from `out_dir`; the corpus directory is only
// ever read.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/checkpoint.hpp"
#include "cuglm/config.hpp"
#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/eval.hpp"
#include "cuglm/inference.hpp"
#include "cuglm/model.hpp"
#include "cuglm/pipeline.hpp"
#include "cuglm/rng.hpp"
#include "cuglm/training.hpp"

namespace cuglm::cli {

namespace fs = std::filesystem;

struct Command {
  std::string verb;
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
};

inline constexpr std::array<std::string_view, 6> kVerbs = {"prepare", "pretrain", "finetune",
                                                           "eval",    "ablate",   "complete"};

struct Settings {
  std::string corpus_dir = "data/toy";
  std::string out_dir = "out";
  std::uint64_t seed = 1;
  double pretrain_fraction = 0.6;
  std::size_t split_train = 8, split_valid = 1, split_test = 1;
  std::size_t token_vocab_size = 50000;
  std::size_t type_vocab_size = 50000;
  PipelineConfig pipeline;
  ModelConfig model;  // vocabulary sizes are filled in from the vocab files
  TrainConfig pretrain;
  TrainConfig finetune;
  std::size_t checkpoint_every = 0;
  std::string finetune_init = "pretrain";  // "pretrain" or "none"
  std::string resume;                      // checkpoint to continue from
  std::string eval_split = "test";
  std::string eval_checkpoint;
  std::string complete_checkpoint;
  bool ablate_skip_pretrain = false;
  std::size_t progress_every = 100;

  fs::path out(const std::string& name) const { return fs::path(out_dir) / name; }
  std::string manifest(const std::string& split) const { return out("manifests/" + split + ".txt").string(); }
  std::string token_vocab_path() const { return out("vocab.token").string(); }
  std::string type_vocab_path() const { return out("vocab.type").string(); }
  std::string pretrain_checkpoint() const { return out("pretrain.ckpt").string(); }
  std::string finetune_checkpoint() const { return out("finetune.ckpt").string(); }
};

namespace detail {

inline std::set<Objective> objectives_from(const std::vector<std::string>& names) {
  std::set<Objective> out;
  for (const auto& n : names) out.insert(parse_objective(n));
  return out;
}

inline std::vector<std::string> objective_names(const std::set<Objective>& objectives) {
  std::vector<std::string> out;
  for (Objective o : objectives) out.emplace_back(objective_name(o));
  return out;
}

inline void read_train(const Config& c, const std::string& prefix, TrainConfig& t) {
  t.total_steps = c.get_size(prefix + "_steps", t.total_steps);
  t.warmup_steps = c.get_size(prefix + "_warmup", t.warmup_steps);
  t.lr_peak = c.get_double(prefix + "_lr", t.lr_peak);
  t.batch_size = c.get_size(prefix + "_batch", t.batch_size);
  t.objectives = objectives_from(c.get_list(prefix + "_objectives", objective_names(t.objectives)));
  t.alternate_objectives = c.get_bool(prefix + "_alternate", t.alternate_objectives);
  t.adam_beta1 = c.get_double("adam_beta1", t.adam_beta1);
  t.adam_beta2 = c.get_double("adam_beta2", t.adam_beta2);
  t.adam_eps = c.get_double("adam_eps", t.adam_eps);
  t.weight_decay = c.get_double("weight_decay", t.weight_decay);
  t.grad_clip = c.get_double("grad_clip", t.grad_clip);
  for (Objective o : {Objective::mlm, Objective::ncp, Objective::ulm, Objective::umlm}) {
    std::string key = "weight_" + std::string(objective_name(o));
    for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (c.has(key)) t.loss_weights[o] = c.get_double(key, 1.0);
  }
}

}  // namespace detail

inline Settings settings_from(const Config& c, std::optional<std::uint64_t> seed_override = std::nullopt) {
  Settings s;
  s.corpus_dir = c.get_string("corpus_dir", s.corpus_dir);
  s.out_dir = c.get_string("out_dir", s.out_dir);
  s.seed = c.get_uint("seed", s.seed);
  if (seed_override) s.seed = *seed_override;
  s.pretrain_fraction = c.get_double("pretrain_fraction", s.pretrain_fraction);
  s.split_train = c.get_size("split_train", s.split_train);
  s.split_valid = c.get_size("split_valid", s.split_valid);
  s.split_test = c.get_size("split_test", s.split_test);
  s.token_vocab_size = c.get_size("token_vocab_size", s.token_vocab_size);
  s.type_vocab_size = c.get_size("type_vocab_size", s.type_vocab_size);

  s.pipeline.max_seq = c.get_size("max_seq", s.pipeline.max_seq);
  s.pipeline.stride = c.get_size("stride", s.pipeline.stride);
  if (c.has("mask_rate_cap")) s.pipeline.mask_rate_cap = c.get_double("mask_rate_cap", 1.0);

  ModelConfig& m = s.model;
  m.layers = c.get_size("layers", m.layers);
  m.hidden = c.get_size("hidden", m.hidden);
  m.heads = c.get_size("heads", m.heads);
  m.ff = c.get_size("ff", m.ff);
  m.type_hidden = c.get_size("type_hidden", m.type_hidden);
  m.token_hidden = c.get_size("token_hidden", m.token_hidden);
  m.dropout = c.get_double("dropout", m.dropout);
  m.tie_embeddings = c.get_bool("tie_embeddings", m.tie_embeddings);
  m.max_seq = s.pipeline.max_seq;

  s.pretrain.phase = Phase::pretrain;
  s.finetune.phase = Phase::finetune;
  s.finetune.objectives = {Objective::umlm, Objective::ulm};
  detail::read_train(c, "pretrain", s.pretrain);
  detail::read_train(c, "finetune", s.finetune);
  s.finetune.use_type_prediction = c.get_bool("use_type_prediction", true);
  s.pretrain.seed = s.seed;
  s.finetune.seed = s.seed;

  s.checkpoint_every = c.get_size("checkpoint_every", s.checkpoint_every);
  s.finetune_init = c.get_string("finetune_init", s.finetune_init);
  if (s.finetune_init != "pretrain" && s.finetune_init != "none")
    throw ConfigError("finetune_init must be 'pretrain' or 'none'");
  s.resume = c.get_string("resume", "");
  s.eval_split = c.get_string("eval_split", s.eval_split);
  s.eval_checkpoint = c.get_string("eval_checkpoint", s.finetune_checkpoint());
  s.complete_checkpoint = c.get_string("complete_checkpoint", s.finetune_checkpoint());
  s.ablate_skip_pretrain = c.get_bool("ablate_skip_pretrain", s.ablate_skip_pretrain);
  s.progress_every = c.get_size("progress_every", s.progress_every);
  if (s.progress_every == 0) s.progress_every = 1;
  if (const auto unused = c.unused_keys(); !unused.empty()) throw ConfigError("unknown config key '" + unused.front() + "'");
  return s;
}

// ---------------------------------------------------------------------------
// Manifests and shared loading
// ---------------------------------------------------------------------------

inline void write_manifest(const std::string& path, const std::vector<std::string>& files) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& f : files) out << f << '\n';
}

inline std::vector<std::string> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path + " (run prepare first)");
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

/// Loads manifest entries (paths relative to the corpus directory); each
/// TokenFile keeps the relative path.
inline std::vector<TokenFile> load_split(const Settings& s, const std::string& split) {
  std::vector<TokenFile> out;
  for (const auto& rel : read_manifest(s.manifest(split))) {
    TokenFile f = load_token_file((fs::path(s.corpus_dir) / rel).string());
    f.path = rel;
    out.push_back(std::move(f));
  }
  return out;
}

inline Vocabs load_vocabs(const Settings& s) {
  return {Vocab::load_file(s.token_vocab_path()), Vocab::load_file(s.type_vocab_path())};
}

inline ModelConfig model_for(const Settings& s, const Vocabs& v) {
  ModelConfig m = s.model;
  m.vocab_token = v.token.size();
  m.vocab_type = v.type.size();
  m.validate();
  return m;
}

struct Split {
  std::vector<std::string> pretrain, train, valid, test;
};

/// Seeded shuffle, pretrain_fraction of the files for pre-training, and the
/// remainder divided train:valid:test.
inline Split split_files(std::vector<std::string> files, const Settings& s) {
  if (s.pretrain_fraction < 0 || s.pretrain_fraction > 1) throw ConfigError("pretrain_fraction must be in [0,1]");
  const std::size_t parts = s.split_train + s.split_valid + s.split_test;
  if (parts == 0) throw ConfigError("split proportions are all zero");
  Rng rng(mix_key({s.seed, 0x73706c74u}));
  for (std::size_t i = files.size(); i > 1; --i) std::swap(files[i - 1], files[rng.below(i)]);

  Split out;
  const auto n_pre = static_cast<std::size_t>(std::llround(s.pretrain_fraction * static_cast<double>(files.size())));
  out.pretrain.assign(files.begin(), files.begin() + static_cast<std::ptrdiff_t>(n_pre));
  const std::vector<std::string> rest(files.begin() + static_cast<std::ptrdiff_t>(n_pre), files.end());
  const double m = static_cast<double>(rest.size());
  auto n_train = static_cast<std::size_t>(std::llround(m * static_cast<double>(s.split_train) / static_cast<double>(parts)));
  auto n_valid = static_cast<std::size_t>(std::llround(m * static_cast<double>(s.split_valid) / static_cast<double>(parts)));
  n_train = std::min(n_train, rest.size());
  n_valid = std::min(n_valid, rest.size() - n_train);
  out.train.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.valid.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_train),
                   rest.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid));
  out.test.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_train + n_valid), rest.end());
  for (auto* v : {&out.pretrain, &out.train, &out.valid, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

inline void prepare(const Settings& s, std::ostream& log) {
  std::vector<std::string> rel;
  for (const auto& f : list_corpus_files(s.corpus_dir))
    rel.push_back(fs::path(f).lexically_relative(s.corpus_dir).generic_string());
  if (rel.empty()) throw EmptyCorpus("no .mt or .tok files under " + s.corpus_dir);
  const Split split = split_files(rel, s);
  write_manifest(s.manifest("pretrain"), split.pretrain);
  write_manifest(s.manifest("train"), split.train);
  write_manifest(s.manifest("valid"), split.valid);
  write_manifest(s.manifest("test"), split.test);

  std::vector<TokenFile> counted = load_split(s, "pretrain");
  for (auto& f : load_split(s, "train")) counted.push_back(std::move(f));
  const Vocabs v{build_vocab(counted, VocabKind::token, s.token_vocab_size),
                 build_vocab(counted, VocabKind::type, s.type_vocab_size)};
  v.token.save_file(s.token_vocab_path());
  v.type.save_file(s.type_vocab_path());
  log << "prepare: " << split.pretrain.size() << " pretrain, " << split.train.size() << " train, "
      << split.valid.size() << " valid, " << split.test.size() << " test files; token vocab "
      << v.token.size() << ", type vocab " << v.type.size() << '\n';
}

namespace detail {

inline std::size_t checkpoint_step(const Checkpoint& ck) {
  auto it = ck.meta.find("step");
  if (it == ck.meta.end()) throw CheckpointError("checkpoint has no step");
  return static_cast<std::size_t>(std::stoull(it->second));
}

inline void run_training(const Settings& s, const TrainConfig& cfg, ParameterSet<float>& params,
                         const Vocabs& v, const std::vector<TokenFile>& files, const std::string& ckpt,
                         const std::string& metrics, std::ostream& log) {
  AdamW<float> opt(params);
  std::size_t start = 0;
  if (!s.resume.empty()) {
    const Checkpoint ck = load_checkpoint(s.resume);
    check_vocabs(ck, v);
    load_parameters(ck, params);
    opt.load_from(ck, params);
    start = checkpoint_step(ck);
    log << "resuming from step " << start << '\n';
  }
  TrainOutputs io;
  io.checkpoint_path = ckpt;
  io.metrics_path = metrics;
  io.checkpoint_every = s.checkpoint_every;
  io.progress = &log;
  io.progress_every = s.progress_every;
  const auto result = train(params, opt, v, files, cfg, s.pipeline, io, start);
  log << "data fingerprint " << cuglm::detail::hex64(result.data_fingerprint) << '\n';
}

}  // namespace detail

inline void pretrain(const Settings& s, std::ostream& log) {
  const Vocabs v = load_vocabs(s);
  const auto files = load_split(s, "pretrain");
  ParameterSet<float> params(model_for(s, v));
  params.initialize(s.seed);
  detail::run_training(s, s.pretrain, params, v, files, s.pretrain_checkpoint(),
                       s.out("pretrain_metrics.tsv").string(), log);
}

inline void finetune(const Settings& s, std::ostream& log) {
  const Vocabs v = load_vocabs(s);
  const auto files = load_split(s, "train");
  ParameterSet<float> params(model_for(s, v));
  params.initialize(s.seed);
  if (s.finetune_init == "pretrain" && s.resume.empty()) {
    const Checkpoint ck = load_checkpoint(s.pretrain_checkpoint());
    check_vocabs(ck, v);
    load_parameters(ck, params);
  }
  detail::run_training(s, s.finetune, params, v, files, s.finetune_checkpoint(),
                       s.out("finetune_metrics.tsv").string(), log);
}

/// Completion mode implied by how a checkpoint was fine-tuned.
inline CompletionMode mode_for(const Checkpoint& ck) {
  CompletionMode mode;
  auto obj = ck.meta.find("objectives");
  if (obj != ck.meta.end() && ck.meta.count("phase") && ck.meta.at("phase") == "finetune")
    mode.two_step = obj->second.find("UMLM") != std::string::npos;
  auto typed = ck.meta.find("use_type_prediction");
  if (typed != ck.meta.end()) mode.use_type_prediction = typed->second == "1";
  return mode;
}

inline EvalReport eval(const Settings& s, std::ostream& log) {
  const Vocabs v = load_vocabs(s);
  const Checkpoint ck = load_checkpoint(s.eval_checkpoint);
  check_vocabs(ck, v);
  const auto files = load_split(s, s.eval_split);
  const auto result = evaluate_full(ck, files, v, EvalConfig{s.pipeline.max_seq, mode_for(ck)});
  write_predictions_file(s.out("predictions.tsv").string(), result.records);
  const std::string table = format_report_table(result.report);
  for (const auto& [name, text] : {std::pair{"eval_report.txt", table},
                                   std::pair{"eval_report.kv", format_report_kv(result.report)}}) {
    std::ofstream out(s.out(name), std::ios::binary);
    if (!out) throw IoError("cannot write " + s.out(name).string());
    out << text;
  }
  log << table;
  return result.report;
}

inline std::vector<AblationResult> ablate(const Settings& s, std::ostream& log) {
  const Vocabs v = load_vocabs(s);
  const auto pre = load_split(s, "pretrain");
  const auto train_files = load_split(s, "train");
  const auto test = load_split(s, s.eval_split);
  AblationInputs in;
  in.model = model_for(s, v);
  in.init_seed = s.seed;
  in.vocabs = &v;
  in.pretrain_files = &pre;
  in.finetune_files = &train_files;
  in.test_files = &test;
  in.pipeline = s.pipeline;
  in.skip_pretrain = s.ablate_skip_pretrain;
  in.out_dir = s.out("ablation").string();
  in.progress = &log;
  const auto results = ablation_suite(in, ablation_rows(s.pretrain, s.finetune));
  const std::string table = format_ablation_table(results);
  std::ofstream out(s.out("ablation_report.txt"), std::ios::binary);
  if (!out) throw IoError("cannot write " + s.out("ablation_report.txt").string());
  out << table;
  log << table;
  return results;
}

// ---------------------------------------------------------------------------
// Interactive completion
// ---------------------------------------------------------------------------

/// Line-oriented completion session. Each code line extends the prefix and
/// prints the top-5 next tokens; `?id` prints the two-step identifier
/// prediction at the next position; `:reset` clears the prefix.
inline void complete_repl(const Checkpoint& ck, const Vocabs& v, std::istream& in, std::ostream& out) {
  check_vocabs(ck, v);
  const auto p = parameters_from<float>(ck);
  const std::size_t max_seq = p.config().max_seq;
  std::vector<TokenId> prefix;

  auto print_candidates = [&](const Vector<float>& dist) {
    std::size_t rank = 1;
    for (const auto& [id, prob] : top_k(dist, 5)) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f", static_cast<double>(prob));
      out << "  " << rank++ << ". " << v.token.decode(id) << "  " << buf << '\n';
    }
  };
  auto context = [&](std::size_t room) {
    std::vector<TokenId> ids;
    if (prefix.empty()) ids.push_back(Vocab::kCls);
    std::size_t from = 0;
    if (prefix.size() > room) {
      from = prefix.size() - room;
      out << "notice: prefix truncated from the left to the last " << room << " tokens\n";
    }
    ids.insert(ids.end(), prefix.begin() + static_cast<std::ptrdiff_t>(from), prefix.end());
    return ids;
  };

  for (std::string line; std::getline(in, line);) {
    if (line == ":reset") {
      prefix.clear();
      out << "prefix cleared\n";
      continue;
    }
    if (line == "?id") {
      auto ids = context(max_seq - 1);
      ids.push_back(Vocab::kMask);
      const Vector<float> h = last_hidden(p, ids);
      const auto type = predict_type<float>(h, p);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f", static_cast<double>(type.distribution(type.type_id)));
      out << "type: " << v.type.decode(type.type_id) << "  " << buf << '\n';
      print_candidates(predict_token_given_type<float>(h, type.type_id, p));
      continue;
    }
    try {
      for (const auto& tok : tokenize(line)) prefix.push_back(v.token.encode(tok.text));
    } catch (const Error& e) {
      out << "error: " << e.kind() << ": " << e.what() << '\n';
      continue;
    }
    const auto ids = context(max_seq);
    print_candidates(head_ulm<float>(last_hidden(p, ids), p));
  }
}

inline void complete(const Settings& s, std::istream& in, std::ostream& out) {
  complete_repl(load_checkpoint(s.complete_checkpoint), load_vocabs(s), in, out);
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Runs one command; returns the process exit status. Failures print a
/// single `error: <Kind>: <message>` line on `err`.
inline int run(const Command& cmd, std::istream& in, std::ostream& out, std::ostream& err) {
  try {
    if (std::find(kVerbs.begin(), kVerbs.end(), cmd.verb) == kVerbs.end())
      throw ConfigError("unknown verb '" + cmd.verb + "'");
    Config c = cmd.config_path.empty() ? Config{} : Config::load(cmd.config_path);
    for (const auto& o : cmd.overrides) c.set(o);
    const Settings s = settings_from(c, cmd.seed);
    fs::create_directories(s.out_dir);
    if (cmd.verb == "prepare") prepare(s, out);
    else if (cmd.verb == "pretrain") pretrain(s, out);
    else if (cmd.verb == "finetune") finetune(s, out);
    else if (cmd.verb == "eval") eval(s, out);
    else if (cmd.verb == "ablate") ablate(s, out);
    else complete(s, in, out);
    return 0;
  } catch (const Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '\n') ch = ' ';
    err << "error: " << e.kind() << ": " << msg << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: IoError: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: InternalError: " << e.what() << '\n';
    return 2;
  }
}

}  // namespace cuglm::cli
