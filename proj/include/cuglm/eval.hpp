#pragma once

// Top-1 completion accuracy, prediction dumps, and the ablation grid.

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/checkpoint.hpp"
#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/inference.hpp"
#include "cuglm/pipeline.hpp"
#include "cuglm/training.hpp"

namespace cuglm {

struct EvalConfig {
  std::size_t max_seq = 128;  // windows are disjoint: stride == max_seq
  CompletionMode mode{};
};

struct CategoryStats {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy() const { return count ? static_cast<double>(correct) / static_cast<double>(count) : 0.0; }
  bool operator==(const CategoryStats&) const = default;
};

struct EvalReport {
  std::size_t n_positions = 0;
  std::size_t n_correct = 0;
  std::map<Category, CategoryStats> per_category;
  CategoryStats typed_identifiers;
  CategoryStats type_prediction;  // over typed-identifier positions
  std::size_t unk_targets = 0;

  bool empty() const noexcept { return n_positions == 0; }
  double acc_all() const {
    return n_positions ? static_cast<double>(n_correct) / static_cast<double>(n_positions) : 0.0;
  }
  double acc_identifiers() const {
    auto it = per_category.find(Category::identifier);
    return it == per_category.end() ? 0.0 : it->second.accuracy();
  }
  double acc_typed_identifiers() const { return typed_identifiers.accuracy(); }
  double acc_type_prediction() const { return type_prediction.accuracy(); }
  double unk_target_rate() const {
    return n_positions ? static_cast<double>(unk_targets) / static_cast<double>(n_positions) : 0.0;
  }
  bool operator==(const EvalReport&) const = default;
};

/// One scored position.
struct PredictionRecord {
  std::string file;
  std::size_t index = 0;  // token index within the file
  Category category = Category::other;
  std::string target;
  std::string predicted;
  bool correct = false;
  bool typed = false;
  std::string true_type;       // typed positions only
  std::string predicted_type;  // typed positions predicted through the type head
  bool type_correct = false;
};

inline void add_record(EvalReport& r, const PredictionRecord& rec, bool target_is_unk) {
  ++r.n_positions;
  auto& cat = r.per_category[rec.category];
  ++cat.count;
  if (target_is_unk) ++r.unk_targets;
  if (rec.correct) {
    ++r.n_correct;
    ++cat.correct;
  }
  if (rec.typed) {
    ++r.typed_identifiers.count;
    ++r.type_prediction.count;
    if (rec.correct) ++r.typed_identifiers.correct;
    if (rec.type_correct) ++r.type_prediction.correct;
  }
}

struct EvalResult {
  EvalReport report;
  std::vector<PredictionRecord> records;
};

/// Scores every window position j >= 1 of each file; see predict_window for
/// which head produces each prediction.
template <class T>
EvalResult evaluate_parameters(const ParameterSet<T>& p, const std::vector<TokenFile>& files,
                               const Vocabs& vocabs, const EvalConfig& cfg) {
  if (cfg.max_seq > p.config().max_seq) throw ConfigError("eval max_seq exceeds the model max_seq");
  EvalResult out;
  const PipelineConfig pcfg{cfg.max_seq, cfg.max_seq, std::nullopt};
  for (const auto& file : files) {
    for (const auto& ex : encode_finetune(file, vocabs, pcfg)) {
      const auto preds = predict_window(ex, p, cfg.mode);
      const auto ids = ex.unmasked_ids();
      for (std::size_t j = 1; j < ids.size(); ++j) {
        const TypedToken& tok = file.tokens[ex.source_offset + j];
        const bool unk = ids[j] == Vocab::kTokenUnk;
        PredictionRecord rec;
        rec.file = file.path;
        rec.index = ex.source_offset + j;
        rec.category = tok.category;
        rec.target = tok.text;
        rec.predicted = vocabs.token.decode(preds[j].token);
        rec.correct = !unk && preds[j].token == ids[j];
        rec.typed = tok.typed();
        if (rec.typed) {
          rec.true_type = *tok.declared_type;
          if (preds[j].type >= 0) {
            rec.predicted_type = vocabs.type.decode(preds[j].type);
            const TokenId truth = vocabs.type.encode(*tok.declared_type);
            rec.type_correct = truth != Vocab::kTypeUnk && preds[j].type == truth;
          }
        }
        add_record(out.report, rec, unk);
        out.records.push_back(std::move(rec));
      }
    }
  }
  return out;
}

inline EvalResult evaluate_full(const Checkpoint& ck, const std::vector<TokenFile>& files,
                                const Vocabs& vocabs, const EvalConfig& cfg) {
  check_vocabs(ck, vocabs);
  const auto p = parameters_from<float>(ck);
  return evaluate_parameters(p, files, vocabs, cfg);
}

inline EvalReport evaluate(const Checkpoint& ck, const std::vector<TokenFile>& files, const Vocabs& vocabs,
                           const EvalConfig& cfg) {
  return evaluate_full(ck, files, vocabs, cfg).report;
}

// ---------------------------------------------------------------------------
// Prediction dump
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDumpHeader =
    "file\tindex\tcategory\ttarget\tpredicted\tcorrect\ttyped\ttrue_type\tpredicted_type\ttype_correct";

/// Tab-separated, one record per scored position. Untyped positions leave
/// both type columns as "-"; so does a typed position scored without the
/// type head.
inline void write_predictions(std::ostream& out, const std::vector<PredictionRecord>& records) {
  out << kDumpHeader << '\n';
  auto or_dash = [](const std::string& s) { return s.empty() ? std::string("-") : s; };
  for (const auto& r : records)
    out << r.file << '\t' << r.index << '\t' << category_code(r.category) << '\t' << r.target << '\t'
        << r.predicted << '\t' << (r.correct ? 1 : 0) << '\t' << (r.typed ? 1 : 0) << '\t'
        << or_dash(r.true_type) << '\t' << or_dash(r.predicted_type) << '\t' << (r.type_correct ? 1 : 0)
        << '\n';
}

inline void write_predictions_file(const std::string& path, const std::vector<PredictionRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_predictions(out, records);
  if (!out) throw IoError("write failed for " + path);
}

inline EvalReport dump_predictions(const Checkpoint& ck, const std::vector<TokenFile>& files,
                                   const Vocabs& vocabs, const EvalConfig& cfg, const std::string& path) {
  auto result = evaluate_full(ck, files, vocabs, cfg);
  write_predictions_file(path, result.records);
  return result.report;
}

// ---------------------------------------------------------------------------
// Report text
// ---------------------------------------------------------------------------

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * v);
  return buf;
}

inline std::string format_report_table(const EvalReport& r) {
  std::ostringstream out;
  char line[128];
  if (r.empty()) out << "(no positions evaluated)\n";
  std::snprintf(line, sizeof line, "%-18s %10s %10s\n", "Category", "Count", "Accuracy");
  out << line;
  for (Category c : kAllCategories) {
    auto it = r.per_category.find(c);
    const CategoryStats s = it == r.per_category.end() ? CategoryStats{} : it->second;
    std::snprintf(line, sizeof line, "%-18s %10zu %10s\n", std::string(category_name(c)).c_str(), s.count,
                  percent(s.accuracy()).c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, "%-18s %10zu %10s\n", "all tokens", r.n_positions, percent(r.acc_all()).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-18s %10zu %10s\n", "typed identifiers", r.typed_identifiers.count,
                percent(r.acc_typed_identifiers()).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-18s %10zu %10s\n", "type prediction", r.type_prediction.count,
                percent(r.acc_type_prediction()).c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-18s %10zu %10s\n", "unk targets", r.unk_targets,
                percent(r.unk_target_rate()).c_str());
  out << line;
  return out.str();
}

inline std::string format_fraction(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// key=value lines; accuracies printed with round-trip precision.
inline std::string format_report_kv(const EvalReport& r) {
  std::ostringstream out;
  out << "empty=" << (r.empty() ? 1 : 0) << '\n';
  out << "n_positions=" << r.n_positions << '\n';
  out << "n_correct=" << r.n_correct << '\n';
  out << "acc_all=" << format_fraction(r.acc_all()) << '\n';
  out << "acc_identifiers=" << format_fraction(r.acc_identifiers()) << '\n';
  out << "typed_count=" << r.typed_identifiers.count << '\n';
  out << "typed_correct=" << r.typed_identifiers.correct << '\n';
  out << "acc_typed_identifiers=" << format_fraction(r.acc_typed_identifiers()) << '\n';
  out << "type_correct=" << r.type_prediction.correct << '\n';
  out << "acc_type_prediction=" << format_fraction(r.acc_type_prediction()) << '\n';
  out << "unk_targets=" << r.unk_targets << '\n';
  out << "unk_target_rate=" << format_fraction(r.unk_target_rate()) << '\n';
  for (Category c : kAllCategories) {
    auto it = r.per_category.find(c);
    const CategoryStats s = it == r.per_category.end() ? CategoryStats{} : it->second;
    const std::string key = "category." + std::string(category_code(c));
    out << key << ".count=" << s.count << '\n';
    out << key << ".correct=" << s.correct << '\n';
    out << key << ".accuracy=" << format_fraction(s.accuracy()) << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string name;
  std::string slug;
  TrainConfig pretrain;
  TrainConfig finetune;
  CompletionMode mode;
  bool all_tokens_reported = true;
};

/// The full configuration plus the six single removals.
inline std::vector<AblationRow> ablation_rows(const TrainConfig& base_pretrain, const TrainConfig& base_finetune) {
  TrainConfig pre = base_pretrain, fine = base_finetune;
  pre.phase = Phase::pretrain;
  pre.objectives = {Objective::mlm, Objective::ncp, Objective::ulm};
  fine.phase = Phase::finetune;
  fine.objectives = {Objective::umlm, Objective::ulm};
  fine.use_type_prediction = true;

  auto without = [](TrainConfig c, Objective o) {
    c.objectives.erase(o);
    return c;
  };
  std::vector<AblationRow> rows;
  rows.push_back({"Full Model", "full", pre, fine, {true, true}, true});
  rows.push_back({"- ULM (pre-train)", "no_ulm_pre", without(pre, Objective::ulm), fine, {true, true}, true});
  rows.push_back({"- MLM", "no_mlm", without(pre, Objective::mlm), fine, {true, true}, true});
  rows.push_back({"- NCP", "no_ncp", without(pre, Objective::ncp), fine, {true, true}, true});
  rows.push_back({"- UMLM", "no_umlm", pre, without(fine, Objective::umlm), {false, true}, true});
  rows.push_back({"- ULM (fine-tune)", "no_ulm_ft", pre, without(fine, Objective::ulm), {true, true}, false});
  TrainConfig no_type = fine;
  no_type.use_type_prediction = false;
  rows.push_back({"- Type Prediction", "no_type", pre, no_type, {true, false}, true});
  return rows;
}

struct AblationInputs {
  ModelConfig model;
  std::uint64_t init_seed = 0;
  const Vocabs* vocabs = nullptr;
  const std::vector<TokenFile>* pretrain_files = nullptr;
  const std::vector<TokenFile>* finetune_files = nullptr;
  const std::vector<TokenFile>* test_files = nullptr;
  PipelineConfig pipeline;
  bool skip_pretrain = false;
  std::string out_dir;  // per-row metrics logs; empty writes nothing
  std::ostream* progress = nullptr;
};

struct AblationResult {
  std::string name;
  bool all_tokens_reported = true;
  std::optional<EvalReport> report;
  std::string error;  // "<Kind>: message" when the row failed
  std::uint64_t pretrain_fingerprint = 0;
  std::uint64_t finetune_fingerprint = 0;
  std::vector<StepReport> log;
};

namespace detail {

inline std::string pretrain_key(const TrainConfig& c) {
  std::string k;
  for (Objective o : c.objectives) k += std::string(objective_name(o)) + ",";
  return k;
}

}  // namespace detail

/// Trains and evaluates each row. Pre-training runs are shared between rows
/// with the same pre-training objectives. A failing row records its error
/// and the remaining rows still run.
inline std::vector<AblationResult> ablation_suite(const AblationInputs& in, const std::vector<AblationRow>& rows) {
  namespace fs = std::filesystem;
  if (!in.vocabs || !in.finetune_files || !in.test_files || (!in.skip_pretrain && !in.pretrain_files))
    throw ConfigError("ablation inputs are incomplete");
  if (!in.out_dir.empty()) fs::create_directories(in.out_dir);
  auto log_path = [&](const std::string& name) {
    return in.out_dir.empty() ? std::string() : (fs::path(in.out_dir) / name).string();
  };

  struct Pretrained {
    ParameterSet<float> params;
    std::uint64_t fingerprint;
    std::vector<StepReport> log;
  };
  std::map<std::string, std::optional<Pretrained>> cache;
  std::map<std::string, std::pair<std::string, std::string>> cache_errors;

  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    AblationResult res;
    res.name = row.name;
    res.all_tokens_reported = row.all_tokens_reported;
    try {
      ParameterSet<float> params(in.model);
      params.initialize(in.init_seed);
      if (!in.skip_pretrain) {
        const std::string key = detail::pretrain_key(row.pretrain);
        if (auto err = cache_errors.find(key); err != cache_errors.end())
          throw Error(err->second.first, err->second.second);
        if (!cache.count(key)) {
          try {
            ParameterSet<float> pre(in.model);
            pre.initialize(in.init_seed);
            AdamW<float> opt(pre);
            TrainOutputs io;
            io.metrics_path = log_path("pretrain_" + row.slug + ".tsv");
            io.progress = in.progress;
            io.progress_every = 500;
            auto tr = train(pre, opt, *in.vocabs, *in.pretrain_files, row.pretrain, in.pipeline, io);
            cache[key] = Pretrained{std::move(pre), tr.data_fingerprint, std::move(tr.log)};
          } catch (const Error& e) {
            cache_errors[key] = {e.kind(), e.what()};
            throw;
          }
        }
        const auto& pt = *cache[key];
        params = pt.params;
        res.pretrain_fingerprint = pt.fingerprint;
        res.log = pt.log;
      }
      AdamW<float> opt(params);
      TrainOutputs io;
      io.metrics_path = log_path("finetune_" + row.slug + ".tsv");
      io.progress = in.progress;
      io.progress_every = 500;
      auto tr = train(params, opt, *in.vocabs, *in.finetune_files, row.finetune, in.pipeline, io);
      res.finetune_fingerprint = tr.data_fingerprint;
      res.log.insert(res.log.end(), tr.log.begin(), tr.log.end());
      res.report = evaluate_parameters(params, *in.test_files, *in.vocabs,
                                       EvalConfig{in.pipeline.max_seq, row.mode})
                       .report;
    } catch (const Error& e) {
      res.error = e.kind() + ": " + e.what();
    }
    if (in.progress) *in.progress << "ablation row '" << row.name << "' "
                                   << (res.error.empty() ? "done" : "failed: " + res.error) << '\n';
    results.push_back(std::move(res));
  }
  return results;
}

inline std::string format_ablation_table(const std::vector<AblationResult>& results) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-20s %11s %12s  %-16s %-16s\n", "Model", "All Tokens", "Identifiers",
                "pretrain_data", "finetune_data");
  out << line;
  for (const auto& r : results) {
    if (!r.report) {
      std::snprintf(line, sizeof line, "%-20s %11s %12s  error: %s\n", r.name.c_str(), "-", "-", r.error.c_str());
    } else {
      std::snprintf(line, sizeof line, "%-20s %11s %12s  %-16s %-16s\n", r.name.c_str(),
                    r.all_tokens_reported ? percent(r.report->acc_all()).c_str() : "-",
                    percent(r.report->acc_identifiers()).c_str(), detail::hex64(r.pretrain_fingerprint).c_str(),
                    detail::hex64(r.finetune_fingerprint).c_str());
    }
    out << line;
  }
  return out.str();
}

}  // namespace cuglm
