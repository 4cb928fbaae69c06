// Acceptance runner. Prints one PASS/FAIL line per criterion; exit status is
// nonzero if any selected criterion fails.
//
//   acceptance            run every criterion
//   acceptance 3 7        run only criteria 3 and 7

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cuglm/cli.hpp"
#include "cuglm/eval.hpp"
#include "cuglm/synthetic.hpp"
#include "cuglm/training.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace cuglm;
using cuglm::testing::scratch_dir;
using cuglm::testing::slurp;
using cuglm::testing::source_path;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-3;  // five-point stencil, truncation O(h^4)
constexpr double kGradFloor = 1e-6;  // denominator floor for near-zero gradients
constexpr double kNcpBalanceTol = 0.02;
constexpr double kOverfitTarget = 0.95;
constexpr double kOverfitMetricTol = 0.005;
constexpr double kNcpTarget = 0.90;
constexpr double kRecountTol = 1e-12;
constexpr double kAdditivityTol = 1e-6;

// ---------------------------------------------------------------------------
// 1. Gradient oracle
// ---------------------------------------------------------------------------

double loss_value(const std::vector<EncodedExample>& batch, const ParameterSet<double>& p,
                  const TrainConfig& cfg) {
  Graph<double> g(false);
  auto losses = build_loss(g, batch, p, cfg, 1, true);
  return g.value(losses.total)(0, 0);
}

/// Max element-wise relative error between analytic and central-difference
/// gradients over every entry of every tensor; also names the worst tensor.
std::pair<double, std::string> gradient_error(const std::vector<EncodedExample>& batch, ParameterSet<double>& p,
                                              const TrainConfig& cfg) {
  compute_gradients(batch, p, cfg, 1, true);
  std::vector<Matrix<double>> analytic;
  p.for_each([&](const Parameter<double>& q) { analytic.push_back(q.grad); });
  double worst = 0;
  std::string worst_name;
  std::size_t t = 0;
  p.for_each([&](Parameter<double>& q) {
    const Matrix<double>& a = analytic[t++];
    for (Eigen::Index i = 0; i < q.value.size(); ++i) {
      double& x = q.value.data()[i];
      const double saved = x;
      auto at = [&](double offset) {
        x = saved + offset;
        return loss_value(batch, p, cfg);
      };
      const double h = kGradStep;
      const double numeric = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h);
      x = saved;
      const double ai = a.data()[i];
      const double rel = std::abs(ai - numeric) / std::max({std::abs(ai), std::abs(numeric), kGradFloor});
      if (rel > worst) {
        worst = rel;
        worst_name = q.name;
      }
    }
  });
  return {worst, worst_name};
}

Outcome criterion_gradients() {
  const auto files = synthetic::to_token_files(synthetic::toy_corpus(12, 3));
  Vocabs v{build_vocab(files, VocabKind::token, 45), build_vocab(files, VocabKind::type, 9)};
  if (v.token.size() != 50 || v.type.size() != 10)
    return {false, "fixture vocabularies are not 50/10 but " + std::to_string(v.token.size()) + "/" +
                       std::to_string(v.type.size())};
  ModelConfig mc;
  mc.layers = 2;
  mc.hidden = 16;
  mc.heads = 2;
  mc.ff = 32;
  mc.type_hidden = 8;
  mc.token_hidden = 16;
  mc.vocab_token = 50;
  mc.vocab_type = 10;
  mc.max_seq = 16;
  mc.dropout = 0.1;
  ParameterSet<double> p(mc);
  p.initialize(11, 0.3);

  const PipelineConfig pcfg{16, 8, std::nullopt};
  TrainConfig pre;
  pre.phase = Phase::pretrain;
  pre.seed = 5;
  TrainConfig fine = pre;
  fine.phase = Phase::finetune;
  fine.objectives = {Objective::umlm, Objective::ulm};

  PretrainStream ps(files, v, pcfg, 21);
  auto pre_batch = ps.batch(1, 2);
  FinetuneStream fs_(files, v, pcfg, 21);
  std::vector<EncodedExample> fine_batch;
  for (const auto& w : fs_.windows())
    if (!w.mask_positions.empty() && fine_batch.size() < 2) fine_batch.push_back(w);
  bool masks = false;
  for (const auto& ex : pre_batch) masks = masks || !ex.mask_positions.empty();
  if (!masks) return {false, "fixture batch has no masked positions"};

  const auto [pre_err, pre_at] = gradient_error(pre_batch, p, pre);
  const auto [fine_err, fine_at] = gradient_error(fine_batch, p, fine);
  const double worst = std::max(pre_err, fine_err);
  return {worst < kGradRelTol, "max rel err pre-training " + fmt("%.3g", pre_err) + " (" + pre_at +
                                   "), fine-tuning " + fmt("%.3g", fine_err) + " (" + fine_at + "); " +
                                   std::to_string(p.parameter_count()) + " entries, tol " +
                                   fmt("%.0e", kGradRelTol)};
}

// ---------------------------------------------------------------------------
// 2. Mask semantics
// ---------------------------------------------------------------------------

std::vector<Matrix<float>> layer_values(const ParameterSet<float>& p, const std::vector<std::int32_t>& ids,
                                        MaskMode mode, std::vector<std::vector<Matrix<float>>>* attention = nullptr) {
  std::vector<std::int32_t> seg(ids.size(), 0), pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
  Graph<float> g(false);
  ForwardOptions opt;
  opt.record_attention = attention != nullptr;
  auto hs = encode_sequence(g, p, ids, seg, pos, mode, opt);
  std::vector<Matrix<float>> out;
  for (Var l : hs.layers) out.push_back(g.value(l));
  if (attention) *attention = hs.attention;
  return out;
}

Outcome criterion_masks() {
  ModelConfig mc;
  mc.vocab_token = 40;
  mc.vocab_type = 5;
  mc.max_seq = 128;
  ParameterSet<float> p(mc);
  p.initialize(3, 0.2);
  Rng rng(99);
  std::string failures;
  for (std::size_t n : {1, 2, 7, 128}) {
    std::vector<std::int32_t> ids(n);
    for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(40));

    // Causality: any suffix perturbation leaves the prefix bit-identical.
    std::vector<std::vector<Matrix<float>>> attn;
    const auto base = layer_values(p, ids, MaskMode::unidirectional, &attn);
    for (std::size_t k = 1; k < n; k = k * 2 + 1) {
      auto changed = ids;
      for (std::size_t i = k; i < n; ++i) changed[i] = static_cast<std::int32_t>((ids[i] + 1 + rng.below(39)) % 40);
      const auto other = layer_values(p, changed, MaskMode::unidirectional);
      for (std::size_t l = 0; l < base.size(); ++l)
        for (std::size_t r = 0; r < k; ++r)
          if (std::memcmp(base[l].row(static_cast<Eigen::Index>(r)).data(),
                          other[l].row(static_cast<Eigen::Index>(r)).data(),
                          sizeof(float) * static_cast<std::size_t>(base[l].cols())) != 0)
            failures += " causal(n=" + std::to_string(n) + ",k=" + std::to_string(k) + ")";
    }
    for (const auto& layer : attn)
      for (const auto& head : layer)
        for (Eigen::Index i = 0; i < head.rows(); ++i)
          for (Eigen::Index j = 0; j < head.cols(); ++j)
            if ((j > i && head(i, j) != 0.0f) || (j <= i && !(head(i, j) > 0.0f)))
              failures += " uni-attn(n=" + std::to_string(n) + ")";

    // Bidirectional: every position sees every other.
    std::vector<std::vector<Matrix<float>>> battn;
    const auto bi = layer_values(p, ids, MaskMode::bidirectional, &battn);
    for (const auto& layer : battn)
      for (const auto& head : layer)
        if (!(head.array() > 0.0f).all()) failures += " bi-attn(n=" + std::to_string(n) + ")";
    if (n >= 2) {
      auto changed = ids;
      changed.back() = (changed.back() + 7) % 40;
      const auto other = layer_values(p, changed, MaskMode::bidirectional);
      if ((bi.back().row(0) - other.back().row(0)).cwiseAbs().maxCoeff() == 0.0f)
        failures += " bi-visibility(n=" + std::to_string(n) + ")";
    }
    const auto mask = attention_mask<float>(MaskMode::bidirectional, n);
    if (!(mask.matrix.array() == 0.0f).all()) failures += " bi-mask(n=" + std::to_string(n) + ")";
  }
  return {failures.empty(), failures.empty() ? "causality bit-exact and bidirectional visibility at n = 1, 2, 7, 128"
                                             : "violations:" + failures.substr(0, 300)};
}

// ---------------------------------------------------------------------------
// 3. Pipeline soundness on the bundled corpus
// ---------------------------------------------------------------------------

std::string check_example(const EncodedExample& ex, const std::vector<TypedToken>& original, const Vocabs& v,
                          std::size_t max_seq) {
  const std::size_t n = ex.input_ids.size();
  if (n > max_seq) return "length " + std::to_string(n);
  if (ex.segment_ids.size() != n || ex.positions.size() != n || ex.ulm_targets.size() != n) return "field lengths";
  std::vector<std::int32_t> found;
  for (std::size_t i = 0; i < n; ++i)
    if (ex.input_ids[i] == Vocab::kMask) found.push_back(static_cast<std::int32_t>(i));
  if (found != ex.mask_positions) return "mask positions differ from [MASK] ids";
  // `original` is aligned with the layout; specials are represented by
  // tokens with empty text.
  auto restored = ex.input_ids;
  for (std::size_t k = 0; k < ex.mask_positions.size(); ++k) {
    const auto i = static_cast<std::size_t>(ex.mask_positions[k]);
    if (!original[i].typed()) return "masked an untyped position";
    if (ex.mask_type_targets[k] != v.type.encode(*original[i].declared_type)) return "type target";
    restored[i] = ex.mask_token_targets[k];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (original[i].text.empty()) continue;
    if (restored[i] != v.token.encode(original[i].text)) return "reconstruction";
    if (original[i].typed() && ex.input_ids[i] != Vocab::kMask) return "typed identifier left unmasked";
  }
  return {};
}

Outcome criterion_pipeline() {
  const auto files = cuglm::testing::load_dir(source_path("data/toy"));
  const Vocabs v = cuglm::testing::vocabs_for(files);
  const std::size_t max_seq = 128;
  std::size_t positives = 0;
  const std::size_t samples = 10000;
  Rng rng(2024);
  std::string failure;
  for (std::size_t s = 0; s < samples && failure.empty(); ++s) {
    const std::size_t root = rng.below(files.size());
    const SegmentPair pair = sample_segment_pair(files, root, rng, max_seq);
    positives += static_cast<std::size_t>(pair.ncp_label);
    if (pair.a_tokens.size() + pair.b_tokens.size() > max_seq - 3) failure = "segment budget";
    if (pair.ncp_label == 1) {
      const auto lines = detail::nonblank_lines(files[root]);
      const auto after = std::find(lines.begin(), lines.end(), pair.a_last_line) + 1;
      if (pair.b_path != pair.source_path || after == lines.end() || *after != pair.b_first_line ||
          pair.b_tokens.front().line != pair.b_first_line || pair.a_tokens.back().line != pair.a_last_line)
        failure = "consecutive pair is not adjacent";
    } else if (pair.b_path == pair.source_path) {
      failure = "random segment from the same file";
    }
    const auto ex = encode_pretrain(pair, v, PipelineConfig{max_seq, 64, std::nullopt});
    std::vector<TypedToken> layout{TypedToken{}};
    layout.insert(layout.end(), pair.a_tokens.begin(), pair.a_tokens.end());
    layout.push_back(TypedToken{});
    layout.insert(layout.end(), pair.b_tokens.begin(), pair.b_tokens.end());
    if (failure.empty()) failure = check_example(ex, layout, v, max_seq);
    if (failure.empty() && (ex.input_ids.front() != Vocab::kCls ||
                            ex.input_ids[pair.a_tokens.size() + 1] != Vocab::kSep))
      failure = "layout specials";
  }
  for (const auto& f : files) {
    for (const auto& ex : encode_finetune(f, v, PipelineConfig{max_seq, 64, std::nullopt})) {
      const std::vector<TypedToken> window(f.tokens.begin() + static_cast<std::ptrdiff_t>(ex.source_offset),
                                           f.tokens.begin() + static_cast<std::ptrdiff_t>(ex.source_offset + ex.size()));
      if (failure.empty()) failure = check_example(ex, window, v, max_seq);
    }
  }
  // Same seed, same stream.
  Fnv1a h1, h2;
  PretrainStream a(files, v, PipelineConfig{}, 8), b(files, v, PipelineConfig{}, 8);
  for (std::size_t step = 1; step <= 20; ++step) {
    for (const auto& ex : a.batch(step, 4)) hash_example(h1, ex);
    for (const auto& ex : b.batch(step, 4)) hash_example(h2, ex);
  }
  if (failure.empty() && h1.digest() != h2.digest()) failure = "stream not deterministic";

  const double rate = static_cast<double>(positives) / static_cast<double>(samples);
  const bool balanced = std::abs(rate - 0.5) <= kNcpBalanceTol;
  return {failure.empty() && balanced, (failure.empty() ? std::string("invariants hold") : "violation: " + failure) +
                                           "; NCP label-1 rate " + fmt("%.4f", rate) + " over 10000 samples on " +
                                           std::to_string(files.size()) + " files"};
}

// ---------------------------------------------------------------------------
// 4. Overfit sanity
// ---------------------------------------------------------------------------

Outcome criterion_overfit() {
  const auto files = synthetic::to_token_files(synthetic::toy_corpus(30, 41, true));
  const Vocabs v = cuglm::testing::vocabs_for(files);
  ModelConfig mc = cuglm::testing::tiny_model(v);
  mc.hidden = 64;
  mc.ff = 256;
  mc.token_hidden = 64;
  mc.dropout = 0.0;
  ParameterSet<float> p(mc);
  p.initialize(1);
  AdamW<float> opt(p);
  TrainConfig cfg;
  cfg.phase = Phase::finetune;
  cfg.objectives = {Objective::umlm, Objective::ulm};
  cfg.total_steps = 2000;
  cfg.warmup_steps = 100;
  cfg.lr_peak = 2e-3;
  cfg.batch_size = 8;
  cfg.weight_decay = 0.0;
  cfg.seed = 1;
  const PipelineConfig pcfg{128, 128, std::nullopt};
  train(p, opt, v, files, cfg, pcfg);

  FinetuneStream windows(files, v, pcfg, 0);
  const double train_acc = window_accuracy(windows.windows(), p, true, true).rate();
  const double eval_acc = evaluate_parameters(p, files, v, EvalConfig{128, {true, true}}).report.acc_all();
  const bool pass = train_acc > kOverfitTarget && std::abs(train_acc - eval_acc) <= kOverfitMetricTol;
  return {pass, "training-window accuracy " + fmt("%.4f", train_acc) + ", eval module " + fmt("%.4f", eval_acc) +
                    " after 2000 steps (need > " + fmt("%.2f", kOverfitTarget) + ", |diff| <= " +
                    fmt("%.3f", kOverfitMetricTol) + ")"};
}

// ---------------------------------------------------------------------------
// 5. Type-conditioning direction
// ---------------------------------------------------------------------------

Outcome criterion_type_conditioning() {
  const auto corpus = synthetic::to_token_files(synthetic::typed_corpus(260, 77));
  const std::vector<TokenFile> pre(corpus.begin(), corpus.begin() + 100);
  const std::vector<TokenFile> fine(corpus.begin() + 100, corpus.begin() + 220);
  const std::vector<TokenFile> test(corpus.begin() + 220, corpus.end());
  std::vector<TokenFile> counted = pre;
  counted.insert(counted.end(), fine.begin(), fine.end());
  const Vocabs v = cuglm::testing::vocabs_for(counted);

  TrainConfig pcfg;
  pcfg.phase = Phase::pretrain;
  pcfg.total_steps = 600;
  pcfg.warmup_steps = 30;
  pcfg.lr_peak = 2e-3;
  pcfg.batch_size = 8;
  TrainConfig fcfg = pcfg;
  fcfg.phase = Phase::finetune;
  fcfg.objectives = {Objective::umlm, Objective::ulm};
  fcfg.total_steps = 1500;
  fcfg.warmup_steps = 75;

  std::vector<double> full, no_type;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    pcfg.seed = fcfg.seed = seed;
    const auto rows = ablation_rows(pcfg, fcfg);
    std::vector<AblationRow> pair;
    for (const auto& r : rows)
      if (r.slug == "full" || r.slug == "no_type") pair.push_back(r);
    AblationInputs in;
    in.model = cuglm::testing::tiny_model(v);
    in.model.type_hidden = in.model.token_hidden;
    in.init_seed = seed;
    in.vocabs = &v;
    in.pretrain_files = &pre;
    in.finetune_files = &fine;
    in.test_files = &test;
    in.pipeline = PipelineConfig{128, 64, std::nullopt};
    const auto results = ablation_suite(in, pair);
    for (const auto& r : results)
      if (!r.report) return {false, "row failed: " + r.error};
    full.push_back(results[0].report->acc_identifiers());
    no_type.push_back(results[1].report->acc_identifiers());
    per_seed += " seed " + std::to_string(seed) + ": " + fmt("%.4f", full.back()) + " vs " + fmt("%.4f", no_type.back()) + ";";
  }
  std::sort(full.begin(), full.end());
  std::sort(no_type.begin(), no_type.end());
  return {full[1] > no_type[1], "median identifier accuracy Full " + fmt("%.4f", full[1]) + " vs -Type Prediction " +
                                    fmt("%.4f", no_type[1]) + " (" + per_seed.substr(1) + ")"};
}

// ---------------------------------------------------------------------------
// 6. NCP learnability
// ---------------------------------------------------------------------------

Outcome criterion_ncp() {
  const std::size_t themes = 8;
  const std::size_t steps = 2000;
  const auto train_files = synthetic::to_token_files(synthetic::themed_corpus(3000, themes, 5, "train"));
  const auto held_out = synthetic::to_token_files(synthetic::themed_corpus(100, themes, 6, "held"));
  const Vocabs v = cuglm::testing::vocabs_for(train_files);
  ModelConfig mc = cuglm::testing::tiny_model(v, 64);
  ParameterSet<float> p(mc);
  p.initialize(2);
  AdamW<float> opt(p);
  TrainConfig cfg;
  cfg.phase = Phase::pretrain;
  cfg.total_steps = steps;
  cfg.warmup_steps = steps / 20;
  cfg.lr_peak = 3e-3;
  cfg.batch_size = 64;
  cfg.seed = 3;
  const PipelineConfig pcfg{64, 32, std::nullopt};
  train(p, opt, v, train_files, cfg, pcfg);

  PretrainStream pairs(held_out, v, pcfg, 1234);
  std::size_t correct = 0, total = 0;
  for (std::size_t step = 1; step <= 125; ++step) {
    for (const auto& ex : pairs.batch(step, 8)) {
      Graph<float> g(false);
      auto hs = encode_sequence(g, p, ex.input_ids, ex.segment_ids, ex.positions, MaskMode::bidirectional);
      const Matrix<float>& h = g.value(hs.final());
      const Vector<float> dist = head_ncp<float>(h.row(0).transpose(), p);
      correct += static_cast<std::size_t>(argmax<float>(dist) == *ex.ncp_label);
      ++total;
    }
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(total);
  return {acc > kNcpTarget, "held-out NCP accuracy " + fmt("%.4f", acc) + " on " + std::to_string(total) +
                                " pairs after " +
                                std::to_string(steps) + " steps (need > " + fmt("%.2f", kNcpTarget) + ")"};
}

// ---------------------------------------------------------------------------
// 7. Metric oracle
// ---------------------------------------------------------------------------

/// Independent recount of a prediction dump. Correctness is recomputed from
/// the texts: a prediction is right iff it equals the target, which can never
/// hold for an out-of-vocabulary target.
struct Recount {
  std::size_t n = 0, correct = 0, unk = 0, typed = 0, typed_correct = 0, type_correct = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> by_category;
  std::string problem;
};

Recount recount(const std::string& dump_path, const std::set<std::string>& token_words) {
  Recount r;
  std::ifstream in(dump_path);
  std::string line;
  std::getline(in, line);
  if (line != kDumpHeader) r.problem = "header";
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
      f.push_back(line.substr(start, tab - start));
    f.push_back(line.substr(start));
    if (f.size() != 10) {
      r.problem = "field count";
      continue;
    }
    const bool ok = f[3] == f[4];
    if ((ok ? "1" : "0") != f[5]) r.problem = "correct flag disagrees at " + f[0] + ":" + f[1];
    ++r.n;
    r.correct += ok;
    r.unk += token_words.count(f[3]) == 0;
    auto& cat = r.by_category[f[2]];
    ++cat.first;
    cat.second += ok;
    if (f[6] == "1") {
      ++r.typed;
      r.typed_correct += ok;
      r.type_correct += f[8] != "-" && f[7] == f[8];
    }
  }
  return r;
}

std::set<std::string> vocab_words(const std::string& path) {
  std::set<std::string> words;
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) words.insert(line);
  return words;
}

Outcome criterion_recount() {
  const auto files = cuglm::testing::load_dir(source_path("data/toy"));
  const std::vector<TokenFile> train_files(files.begin(), files.begin() + 70);
  const std::vector<TokenFile> test_files(files.begin() + 70, files.end());
  // A small vocabulary so that the runs include out-of-vocabulary targets.
  const Vocabs v = cuglm::testing::vocabs_for(train_files, 60, 12);
  const std::string dir = scratch_dir("recount");
  v.token.save_file(dir + "/vocab.token");
  const auto words = vocab_words(dir + "/vocab.token");

  struct Run {
    std::uint64_t seed;
    CompletionMode mode;
    bool use_type;
  };
  std::string failures;
  std::size_t runs = 0;
  for (const Run& run : {Run{1, {true, true}, true}, Run{2, {false, true}, true}, Run{3, {true, false}, false}}) {
    ParameterSet<float> p(cuglm::testing::tiny_model(v));
    p.initialize(run.seed);
    AdamW<float> opt(p);
    TrainConfig cfg;
    cfg.phase = Phase::finetune;
    cfg.objectives = {Objective::umlm, Objective::ulm};
    cfg.use_type_prediction = run.use_type;
    cfg.total_steps = 60;
    cfg.warmup_steps = 6;
    cfg.lr_peak = 2e-3;
    cfg.batch_size = 4;
    cfg.seed = run.seed;
    train(p, opt, v, train_files, cfg, PipelineConfig{});
    const Checkpoint ck = make_checkpoint(p, v);
    const std::string path = dir + "/predictions_" + std::to_string(run.seed) + ".tsv";
    const EvalReport rep = dump_predictions(ck, test_files, v, EvalConfig{128, run.mode}, path);
    const Recount rc = recount(path, words);
    auto frac = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    std::string bad = rc.problem;
    if (rc.n != rep.n_positions || rc.correct != rep.n_correct || rc.unk != rep.unk_targets ||
        rc.typed != rep.typed_identifiers.count || rc.typed_correct != rep.typed_identifiers.correct ||
        rc.type_correct != rep.type_prediction.correct)
      bad += " counts";
    if (std::abs(frac(rc.correct, rc.n) - rep.acc_all()) > kRecountTol ||
        std::abs(frac(rc.unk, rc.n) - rep.unk_target_rate()) > kRecountTol ||
        std::abs(frac(rc.type_correct, rc.typed) - rep.acc_type_prediction()) > kRecountTol)
      bad += " accuracies";
    for (Category c : kAllCategories) {
      const auto it = rep.per_category.find(c);
      const CategoryStats s = it == rep.per_category.end() ? CategoryStats{} : it->second;
      const auto rit = rc.by_category.find(std::string(category_code(c)));
      const auto counted = rit == rc.by_category.end() ? std::pair<std::size_t, std::size_t>{0, 0} : rit->second;
      if (counted.first != s.count || counted.second != s.correct ||
          std::abs(frac(counted.second, counted.first) - s.accuracy()) > kRecountTol)
        bad += " category " + std::string(category_code(c));
    }
    if (rc.unk == 0) bad += " (fixture has no UNK targets)";
    if (!bad.empty()) failures += " run " + std::to_string(run.seed) + ":" + bad;
    ++runs;
  }
  return {failures.empty(), failures.empty() ? std::to_string(runs) + " dumps recounted exactly (tol " +
                                                   fmt("%.0e", kRecountTol) + ")"
                                             : "mismatch:" + failures};
}

// ---------------------------------------------------------------------------
// 8. Ablation harness
// ---------------------------------------------------------------------------

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> f;
  std::istringstream in(line);
  for (std::string s; std::getline(in, s, '\t');) f.push_back(s);
  return f;
}

Outcome criterion_ablation() {
  const std::string out = scratch_dir("ablate");
  cli::Command prep{"prepare", source_path("data/smoke.cfg"), {"out_dir=" + out, "corpus_dir=" + source_path("data/toy")}, 4};
  std::ostringstream log, err;
  std::istringstream none;
  if (cli::run(prep, none, log, err) != 0) return {false, "prepare failed: " + err.str()};
  cli::Command ab = prep;
  ab.verb = "ablate";
  ab.overrides.insert(ab.overrides.end(), {"pretrain_steps=40", "pretrain_warmup=4", "finetune_steps=40", "finetune_warmup=4"});
  if (cli::run(ab, none, log, err) != 0) return {false, "ablate failed: " + err.str()};

  std::ifstream report(out + "/ablation_report.txt");
  std::vector<std::string> lines;
  for (std::string l; std::getline(report, l);)
    if (!l.empty()) lines.push_back(l);
  std::string problems;
  if (lines.size() != 8) problems += " expected header + 7 rows, got " + std::to_string(lines.size()) + " lines";
  std::set<std::string> fingerprints;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream in(lines[i]);
    std::vector<std::string> tokens;
    for (std::string t; in >> t;) tokens.push_back(t);
    if (tokens.size() < 4 || lines[i].find("error:") != std::string::npos) {
      problems += " bad row '" + lines[i] + "'";
      continue;
    }
    fingerprints.insert(tokens[tokens.size() - 2] + "/" + tokens.back());
  }
  if (fingerprints.size() != 1) problems += " data fingerprints differ across rows";

  std::size_t checked = 0;
  double worst = 0;
  for (const auto& entry : fs::directory_iterator(out + "/ablation")) {
    std::ifstream in(entry.path());
    std::string header;
    std::getline(in, header);
    const auto cols = split_tabs(header);
    for (std::string line; std::getline(in, line);) {
      const auto f = split_tabs(line);
      if (f.size() != cols.size()) {
        problems += " ragged log " + entry.path().filename().string();
        break;
      }
      double sum = 0, total = 0;
      for (std::size_t c = 2; c < cols.size(); ++c) {
        if (cols[c] == "grad_norm") continue;
        if (cols[c] == "total") total = std::stod(f[c]);
        else if (f[c] != "-") sum += std::stod(f[c]);
      }
      worst = std::max(worst, std::abs(sum - total));
      ++checked;
    }
  }
  if (worst > kAdditivityTol) problems += " loss additivity off by " + fmt("%.3g", worst);
  if (checked == 0) problems += " no logged steps";
  return {problems.empty(), problems.empty() ? "7 rows, one shared data fingerprint, additivity within " +
                                                   fmt("%.0e", kAdditivityTol) + " over " + std::to_string(checked) +
                                                   " logged steps (worst " + fmt("%.2g", worst) + ")"
                                             : "problems:" + problems};
}

// ---------------------------------------------------------------------------
// 9. Determinism of the smoke pipeline
// ---------------------------------------------------------------------------

Outcome criterion_determinism() {
  std::vector<std::string> dirs;
  double slowest = 0;
  for (const char* name : {"smoke_a", "smoke_b"}) {
    const std::string out = scratch_dir(name);
    dirs.push_back(out);
    const auto t0 = std::chrono::steady_clock::now();
    for (const char* verb : {"prepare", "pretrain", "finetune", "eval"}) {
      cli::Command cmd{verb, source_path("data/smoke.cfg"), {"out_dir=" + out, "corpus_dir=" + source_path("data/toy")}, std::nullopt};
      std::ostringstream log, err;
      std::istringstream none;
      if (cli::run(cmd, none, log, err) != 0) return {false, std::string(verb) + " failed: " + err.str()};
    }
    slowest = std::max(slowest, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  std::vector<std::string> differing;
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(dirs[0])) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), dirs[0]);
    ++compared;
    if (slurp(entry.path().string()) != slurp((fs::path(dirs[1]) / rel).string())) differing.push_back(rel.string());
  }
  const bool pass = differing.empty() && compared >= 10 && slowest < 600;
  std::string detail = std::to_string(compared) + " artifacts compared";
  for (const auto& d : differing) detail += ", differs: " + d;
  return {pass, detail + "; slowest pipeline " + fmt("%.1f", slowest) + " s (limit 600 s)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient oracle", criterion_gradients},
      {"mask semantics", criterion_masks},
      {"pipeline soundness", criterion_pipeline},
      {"overfit sanity", criterion_overfit},
      {"type-conditioning direction", criterion_type_conditioning},
      {"NCP learnability", criterion_ncp},
      {"metric oracle", criterion_recount},
      {"ablation harness", criterion_ablation},
      {"determinism", criterion_determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const Error& e) {
      o = {false, std::string("error: ") + e.kind() + ": " + e.what()};
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s criterion %zu (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
