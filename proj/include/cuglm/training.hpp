#pragma once

// Joint-objective optimization for pre-training (MLM + NCP + ULM) and
// fine-tuning (UMLM + ULM), with the warmup/linear-decay Adam schedule.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "cuglm/autograd.hpp"
#include "cuglm/checkpoint.hpp"
#include "cuglm/corpus.hpp"
#include "cuglm/error.hpp"
#include "cuglm/inference.hpp"
#include "cuglm/model.hpp"
#include "cuglm/pipeline.hpp"
#include "cuglm/rng.hpp"

namespace cuglm {

enum class Phase : std::uint8_t { pretrain, finetune };
enum class Objective : std::uint8_t { mlm, ncp, ulm, umlm };

constexpr std::string_view objective_name(Objective o) noexcept {
  switch (o) {
    case Objective::mlm: return "MLM";
    case Objective::ncp: return "NCP";
    case Objective::ulm: return "ULM";
    case Objective::umlm: return "UMLM";
  }
  return "?";
}

inline Objective parse_objective(std::string_view s) {
  for (Objective o : {Objective::mlm, Objective::ncp, Objective::ulm, Objective::umlm})
    if (objective_name(o) == s) return o;
  throw ConfigError("unknown objective '" + std::string(s) + "'");
}

struct TrainConfig {
  Phase phase = Phase::pretrain;
  std::set<Objective> objectives = {Objective::mlm, Objective::ncp, Objective::ulm};
  bool use_type_prediction = true;
  double lr_peak = 5e-5;
  std::size_t warmup_steps = 1000;
  std::size_t total_steps = 600000;
  std::size_t batch_size = 16;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 5.0;  // global-norm clip; 0 disables
  std::uint64_t seed = 0;
  std::map<Objective, double> loss_weights;  // absent means 1.0
  /// Alternate objective groups across steps instead of summing them.
  bool alternate_objectives = false;

  double weight(Objective o) const {
    auto it = loss_weights.find(o);
    return it == loss_weights.end() ? 1.0 : it->second;
  }
  bool has(Objective o) const { return objectives.count(o) != 0; }

  void validate() const {
    if (objectives.empty()) throw ConfigError("at least one objective must be enabled");
    for (Objective o : objectives) {
      const bool pre = o == Objective::mlm || o == Objective::ncp || o == Objective::ulm;
      const bool fine = o == Objective::umlm || o == Objective::ulm;
      if ((phase == Phase::pretrain && !pre) || (phase == Phase::finetune && !fine))
        throw ConfigError("objective " + std::string(objective_name(o)) +
                          " is not available in this phase");
    }
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (total_steps == 0 || batch_size == 0) throw ConfigError("total_steps and batch_size must be positive");
    if (!(lr_peak > 0) || !(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1) ||
        !(adam_eps > 0) || weight_decay < 0 || grad_clip < 0)
      throw ConfigError("learning-rate and optimizer settings must be positive");
  }
};

/// Linear warmup from 0 to lr_peak, then linear decay to 0 at total_steps.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) throw RangeError("step beyond total_steps");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double span = static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  if (span == 0) return cfg.lr_peak;
  return cfg.lr_peak * static_cast<double>(cfg.total_steps - step) / span;
}

struct StepReport {
  std::size_t step = 0;
  std::map<std::string, double> losses;
  double total_loss = 0;
  double lr = 0;
  double grad_norm = 0;
  std::vector<std::string> warnings;
};

/// Loss columns of the metrics log for a configuration, in log order.
inline std::vector<std::string> loss_keys(const TrainConfig& cfg) {
  std::vector<std::string> keys;
  if (cfg.phase == Phase::pretrain) {
    if (cfg.has(Objective::mlm)) keys.push_back("mlm");
    if (cfg.has(Objective::ncp)) keys.push_back("ncp");
    if (cfg.has(Objective::ulm)) keys.push_back("ulm");
  } else {
    if (cfg.has(Objective::umlm)) {
      if (cfg.use_type_prediction) keys.push_back("umlm_type");
      keys.push_back("umlm_token");
    }
    if (cfg.has(Objective::ulm)) keys.push_back("ulm");
  }
  return keys;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay (biases and normalization gains are not
/// decayed).
template <class T>
class AdamW {
 public:
  explicit AdamW(const ParameterSet<T>& p) {
    p.for_each([&](const Parameter<T>& q) {
      m_.push_back(Matrix<T>::Zero(q.value.rows(), q.value.cols()));
      v_.push_back(Matrix<T>::Zero(q.value.rows(), q.value.cols()));
    });
  }

  std::size_t steps_taken() const noexcept { return t_; }

  void step(ParameterSet<T>& p, double lr, const TrainConfig& cfg) {
    ++t_;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    std::size_t i = 0;
    p.for_each([&](Parameter<T>& q) {
      Matrix<T>& m = m_[i];
      Matrix<T>& v = v_[i];
      ++i;
      m = static_cast<T>(b1) * m + static_cast<T>(1 - b1) * q.grad;
      v = static_cast<T>(b2) * v + static_cast<T>(1 - b2) * q.grad.cwiseProduct(q.grad);
      const bool decay = !(q.name.ends_with(".bias") || q.name.ends_with(".gain"));
      const T step_size = static_cast<T>(lr / c1);
      const T inv_c2 = static_cast<T>(1.0 / c2);
      const T eps = static_cast<T>(cfg.adam_eps);
      if (decay && cfg.weight_decay > 0) q.value *= static_cast<T>(1.0 - lr * cfg.weight_decay);
      q.value.array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + eps);
      if (!q.value.allFinite()) throw NonFinite("non-finite parameter after update: " + q.name);
    });
  }

  void save_into(Checkpoint& ck, const ParameterSet<T>& p) const {
    std::size_t i = 0;
    p.for_each([&](const Parameter<T>& q) {
      ck.tensors.push_back(to_named_tensor("optimizer.m." + q.name, m_[i]));
      ck.tensors.push_back(to_named_tensor("optimizer.v." + q.name, v_[i]));
      ++i;
    });
    ck.meta["optimizer.t"] = std::to_string(t_);
  }

  void load_from(const Checkpoint& ck, const ParameterSet<T>& p) {
    std::size_t i = 0;
    p.for_each([&](const Parameter<T>& q) {
      const auto* m = ck.find("optimizer.m." + q.name);
      const auto* v = ck.find("optimizer.v." + q.name);
      if (!m || !v) throw CheckpointError("checkpoint lacks optimizer state for " + q.name);
      from_named_tensor(*m, m_[i]);
      from_named_tensor(*v, v_[i]);
      ++i;
    });
    auto it = ck.meta.find("optimizer.t");
    if (it == ck.meta.end()) throw CheckpointError("checkpoint lacks optimizer.t");
    t_ = static_cast<std::size_t>(std::stoull(it->second));
  }

 private:
  std::vector<Matrix<T>> m_, v_;
  std::size_t t_ = 0;
};

template <class T>
double gradient_norm(const ParameterSet<T>& p) {
  double s = 0;
  p.for_each([&](const Parameter<T>& q) { s += static_cast<double>(q.grad.squaredNorm()); });
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Loss construction
// ---------------------------------------------------------------------------

template <class T>
struct ObjectiveLosses {
  std::map<std::string, Var> terms;
  Var total;
  std::vector<std::string> warnings;
};

namespace detail {

struct TermAccumulator {
  std::vector<Var> sums;
  std::size_t count = 0;
};

template <class T>
Var sum_all(Graph<T>& g, const std::vector<Var>& vs) {
  Var acc = vs.front();
  for (std::size_t i = 1; i < vs.size(); ++i) acc = g.add(acc, vs[i]);
  return acc;
}

template <class T>
ObjectiveLosses<T> finish_losses(Graph<T>& g, std::map<std::string, TermAccumulator>& acc,
                                 const std::map<std::string, double>& weights) {
  ObjectiveLosses<T> out;
  std::vector<Var> parts;
  for (auto& [key, a] : acc) {
    if (a.count == 0) {
      out.warnings.push_back(key + ": no valid targets in batch; contributes 0");
      out.terms[key] = g.constant(Matrix<T>::Zero(1, 1));
    } else {
      const double w = weights.at(key) / static_cast<double>(a.count);
      out.terms[key] = g.scale(sum_all(g, a.sums), static_cast<T>(w));
    }
    parts.push_back(out.terms[key]);
  }
  out.total = parts.empty() ? g.constant(Matrix<T>::Zero(1, 1)) : sum_all(g, parts);
  return out;
}

/// Objective subset active at `step` (everything unless alternating).
inline std::set<Objective> active_objectives(const TrainConfig& cfg, std::size_t step) {
  if (!cfg.alternate_objectives) return cfg.objectives;
  std::set<Objective> group;
  const bool even = step % 2 == 0;
  for (Objective o : cfg.objectives) {
    const bool bidirectional_group =
        cfg.phase == Phase::pretrain ? (o == Objective::mlm || o == Objective::ncp) : o == Objective::umlm;
    if (bidirectional_group == even) group.insert(o);
  }
  return group.empty() ? cfg.objectives : group;
}

inline std::vector<std::int32_t> ulm_rows(const EncodedExample& ex, std::vector<std::int32_t>& targets) {
  std::vector<std::int32_t> rows;
  targets.clear();
  for (std::size_t i = 0; i < ex.ulm_targets.size(); ++i) {
    if (ex.ulm_targets[i] == Vocab::kPad) continue;
    rows.push_back(static_cast<std::int32_t>(i));
    targets.push_back(ex.ulm_targets[i]);
  }
  return rows;
}

}  // namespace detail

/// Builds the pre-training loss for a batch: a bidirectional pass over the
/// masked layout feeds MLM and NCP; a unidirectional pass over the unmasked
/// layout feeds ULM. Each term is the mean over its valid targets.
template <class T>
ObjectiveLosses<T> build_pretrain_loss(Graph<T>& g, const std::vector<EncodedExample>& batch,
                                       const ParameterSet<T>& p, const TrainConfig& cfg,
                                       std::size_t step, bool training = true) {
  const auto active = detail::active_objectives(cfg, step);
  const bool mlm = active.count(Objective::mlm) != 0;
  const bool ncp = active.count(Objective::ncp) != 0;
  const bool ulm = active.count(Objective::ulm) != 0;
  std::map<std::string, double> weights;
  if (mlm) weights["mlm"] = cfg.weight(Objective::mlm);
  if (ncp) weights["ncp"] = cfg.weight(Objective::ncp);
  if (ulm) weights["ulm"] = cfg.weight(Objective::ulm);
  std::map<std::string, detail::TermAccumulator> acc;
  for (const auto& kv : weights) acc[kv.first];

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EncodedExample& ex = batch[b];
    if (mlm || ncp) {
      ForwardOptions opt{training, mix_key({cfg.seed, step, b, 1}), false};
      auto hs = encode_sequence(g, p, ex.input_ids, ex.segment_ids, ex.positions,
                                MaskMode::bidirectional, opt);
      if (mlm && !ex.mask_positions.empty()) {
        Var h = g.gather_rows(hs.final(), ex.mask_positions);
        acc["mlm"].sums.push_back(g.cross_entropy_sum(mlm_logits(g, p, h), ex.mask_token_targets));
        acc["mlm"].count += ex.mask_positions.size();
      }
      if (ncp) {
        if (!ex.ncp_label) throw FormatError("pre-training example lacks an NCP label");
        const std::int32_t cls_row[1] = {0};
        const std::int32_t label[1] = {*ex.ncp_label};
        Var h = g.gather_rows(hs.final(), cls_row);
        acc["ncp"].sums.push_back(g.cross_entropy_sum(ncp_logits(g, p, h), label));
        acc["ncp"].count += 1;
      }
    }
    if (ulm) {
      std::vector<std::int32_t> targets;
      const auto rows = detail::ulm_rows(ex, targets);
      if (!rows.empty()) {
        const auto ids = ex.unmasked_ids();
        ForwardOptions opt{training, mix_key({cfg.seed, step, b, 2}), false};
        auto hs = encode_sequence(g, p, ids, ex.segment_ids, ex.positions,
                                  MaskMode::unidirectional, opt);
        Var h = g.gather_rows(hs.final(), rows);
        acc["ulm"].sums.push_back(g.cross_entropy_sum(ulm_logits(g, p, h), targets));
        acc["ulm"].count += rows.size();
      }
    }
  }
  return detail::finish_losses(g, acc, weights);
}

/// Builds the fine-tuning loss: a unidirectional pass over the masked view
/// feeds the two-step type/token heads at every masked identifier (the token
/// head is teacher-forced with the true type); a unidirectional pass over the
/// unmasked view feeds ULM.
template <class T>
ObjectiveLosses<T> build_finetune_loss(Graph<T>& g, const std::vector<EncodedExample>& batch,
                                       const ParameterSet<T>& p, const TrainConfig& cfg,
                                       std::size_t step, bool training = true) {
  const auto active = detail::active_objectives(cfg, step);
  const bool umlm = active.count(Objective::umlm) != 0;
  const bool ulm = active.count(Objective::ulm) != 0;
  const bool typed = cfg.use_type_prediction;
  std::map<std::string, double> weights;
  if (umlm) {
    if (typed) weights["umlm_type"] = cfg.weight(Objective::umlm);
    weights["umlm_token"] = cfg.weight(Objective::umlm);
  }
  if (ulm) weights["ulm"] = cfg.weight(Objective::ulm);
  std::map<std::string, detail::TermAccumulator> acc;
  for (const auto& kv : weights) acc[kv.first];

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const EncodedExample& ex = batch[b];
    if (umlm && !ex.mask_positions.empty()) {
      ForwardOptions opt{training, mix_key({cfg.seed, step, b, 3}), false};
      auto hs = encode_sequence(g, p, ex.input_ids, ex.segment_ids, ex.positions,
                                MaskMode::unidirectional, opt);
      Var h = g.gather_rows(hs.final(), ex.mask_positions);
      Var e;
      if (typed) {
        acc["umlm_type"].sums.push_back(g.cross_entropy_sum(type_logits(g, p, h), ex.mask_type_targets));
        acc["umlm_type"].count += ex.mask_positions.size();
        e = type_embedding(g, p, ex.mask_type_targets);
      } else {
        e = zero_type_embedding(g, p, ex.mask_positions.size());
      }
      acc["umlm_token"].sums.push_back(g.cross_entropy_sum(token_logits(g, p, h, e), ex.mask_token_targets));
      acc["umlm_token"].count += ex.mask_positions.size();
    }
    if (ulm) {
      std::vector<std::int32_t> targets;
      const auto rows = detail::ulm_rows(ex, targets);
      if (!rows.empty()) {
        const auto ids = ex.unmasked_ids();
        ForwardOptions opt{training, mix_key({cfg.seed, step, b, 4}), false};
        auto hs = encode_sequence(g, p, ids, ex.segment_ids, ex.positions,
                                  MaskMode::unidirectional, opt);
        Var h = g.gather_rows(hs.final(), rows);
        acc["ulm"].sums.push_back(g.cross_entropy_sum(ulm_logits(g, p, h), targets));
        acc["ulm"].count += rows.size();
      }
    }
  }
  return detail::finish_losses(g, acc, weights);
}

template <class T>
ObjectiveLosses<T> build_loss(Graph<T>& g, const std::vector<EncodedExample>& batch,
                              const ParameterSet<T>& p, const TrainConfig& cfg, std::size_t step,
                              bool training = true) {
  return cfg.phase == Phase::pretrain ? build_pretrain_loss(g, batch, p, cfg, step, training)
                                      : build_finetune_loss(g, batch, p, cfg, step, training);
}

/// Gradients of the batch loss left in `p.grad`; returns the loss graph's
/// report without updating parameters.
template <class T>
StepReport compute_gradients(const std::vector<EncodedExample>& batch, ParameterSet<T>& p,
                             const TrainConfig& cfg, std::size_t step, bool training = true) {
  Graph<T> g;
  auto losses = build_loss(g, batch, p, cfg, step, training);
  StepReport r;
  r.step = step;
  r.warnings = losses.warnings;
  for (const auto& [k, v] : losses.terms) {
    r.losses[k] = static_cast<double>(g.value(v)(0, 0));
    r.total_loss += r.losses[k];
  }
  if (!std::isfinite(r.total_loss) || !std::isfinite(static_cast<double>(g.value(losses.total)(0, 0)))) throw NonFinite("non-finite loss at step " + std::to_string(step));
  if (g.requires_grad(losses.total)) {
    g.backward(losses.total);
    p.collect_gradients(g);
  } else {
    p.zero_grad();
  }
  r.grad_norm = gradient_norm(p);
  return r;
}

namespace detail {

template <class T>
StepReport optimizer_step(const std::vector<EncodedExample>& batch, ParameterSet<T>& p,
                          AdamW<T>& opt, const TrainConfig& cfg, std::size_t step) {
  StepReport r = compute_gradients(batch, p, cfg, step, true);
  if (cfg.grad_clip > 0 && r.grad_norm > cfg.grad_clip) {
    const T s = static_cast<T>(cfg.grad_clip / r.grad_norm);
    p.for_each([&](Parameter<T>& q) { q.grad *= s; });
  }
  r.lr = lr_schedule(step, cfg);
  opt.step(p, r.lr, cfg);
  return r;
}

}  // namespace detail

template <class T>
StepReport pretrain_step(const std::vector<EncodedExample>& batch, ParameterSet<T>& p,
                         AdamW<T>& opt, const TrainConfig& cfg, std::size_t step) {
  if (cfg.phase != Phase::pretrain) throw ConfigError("pretrain_step needs phase = pretrain");
  return detail::optimizer_step(batch, p, opt, cfg, step);
}

template <class T>
StepReport finetune_step(const std::vector<EncodedExample>& batch, ParameterSet<T>& p,
                         AdamW<T>& opt, const TrainConfig& cfg, std::size_t step) {
  if (cfg.phase != Phase::finetune) throw ConfigError("finetune_step needs phase = finetune");
  return detail::optimizer_step(batch, p, opt, cfg, step);
}

// ---------------------------------------------------------------------------
// Data streams
// ---------------------------------------------------------------------------

/// Seeded stream of pre-training pairs; batch contents depend only on
/// (corpus, seed, step).
class PretrainStream {
 public:
  PretrainStream(const std::vector<TokenFile>& files, const Vocabs& vocabs, PipelineConfig pcfg,
                 std::uint64_t seed)
      : files_(files), vocabs_(vocabs), pcfg_(pcfg), seed_(seed) {
    if (files_.size() < 2) throw EmptyCorpus("pre-training needs at least 2 files");
    for (std::size_t i = 0; i < files_.size(); ++i)
      if (detail::nonblank_lines(files_[i]).size() >= 2) roots_.push_back(i);
    if (roots_.empty()) throw EmptyCorpus("no pre-training file has 2 or more lines");
  }

  std::vector<EncodedExample> batch(std::size_t step, std::size_t size) const {
    std::vector<EncodedExample> out;
    out.reserve(size);
    for (std::size_t b = 0; b < size; ++b) {
      Rng rng(mix_key({seed_, step, b, 0x5052u}));
      const std::size_t root = roots_[rng.below(roots_.size())];
      out.push_back(encode_pretrain(sample_segment_pair(files_, root, rng, pcfg_.max_seq), vocabs_, pcfg_));
    }
    return out;
  }

 private:
  const std::vector<TokenFile>& files_;
  const Vocabs& vocabs_;
  PipelineConfig pcfg_;
  std::uint64_t seed_;
  std::vector<std::size_t> roots_;
};

/// Seeded uniform draws over the fine-tuning windows of a file set.
class FinetuneStream {
 public:
  FinetuneStream(const std::vector<TokenFile>& files, const Vocabs& vocabs, PipelineConfig pcfg,
                 std::uint64_t seed)
      : seed_(seed) {
    for (const auto& f : files)
      for (auto& w : encode_finetune(f, vocabs, pcfg))
        if (w.size() >= 2) windows_.push_back(std::move(w));
    if (windows_.empty()) throw EmptyCorpus("no fine-tuning windows");
  }

  const std::vector<EncodedExample>& windows() const noexcept { return windows_; }

  std::vector<EncodedExample> batch(std::size_t step, std::size_t size) const {
    std::vector<EncodedExample> out;
    out.reserve(size);
    for (std::size_t b = 0; b < size; ++b) {
      Rng rng(mix_key({seed_, step, b, 0x4654u}));
      out.push_back(windows_[rng.below(windows_.size())]);
    }
    return out;
  }

 private:
  std::uint64_t seed_;
  std::vector<EncodedExample> windows_;
};

// ---------------------------------------------------------------------------
// Accuracy on fine-tuning windows
// ---------------------------------------------------------------------------

struct AccuracyCount {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Top-1 accuracy over window positions 1..n-1: masked identifiers through
/// the two-step heads on the masked view (predicted type feeds the token
/// head), everything else through ULM on the unmasked view. [UNK] targets
/// never count as correct.
template <class T>
AccuracyCount window_accuracy(const std::vector<EncodedExample>& windows, const ParameterSet<T>& p,
                              bool two_step, bool use_type_prediction) {
  AccuracyCount acc;
  for (const auto& ex : windows) {
    const auto preds = predict_window(ex, p, CompletionMode{two_step, use_type_prediction});
    const auto ids = ex.unmasked_ids();
    for (std::size_t j = 1; j < ids.size(); ++j) {
      ++acc.total;
      if (preds[j].token == ids[j] && ids[j] != Vocab::kTokenUnk) ++acc.correct;
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOutputs {
  std::string checkpoint_path;  // final checkpoint; empty skips writing
  std::string metrics_path;     // metrics log; empty skips writing
  std::size_t checkpoint_every = 0;
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

struct TrainResult {
  std::vector<StepReport> log;
  std::uint64_t data_fingerprint = 0;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string metrics_header(const TrainConfig& cfg) {
  std::string h = "step\tlr";
  for (const auto& k : loss_keys(cfg)) h += "\t" + k;
  return h + "\ttotal\tgrad_norm";
}

inline std::string metrics_line(const StepReport& r, const TrainConfig& cfg) {
  std::string line = std::to_string(r.step) + "\t" + format_double(r.lr);
  for (const auto& k : loss_keys(cfg)) {
    auto it = r.losses.find(k);
    line += "\t" + (it == r.losses.end() ? std::string("-") : format_double(it->second));
  }
  return line + "\t" + format_double(r.total_loss) + "\t" + format_double(r.grad_norm);
}

inline std::map<std::string, std::string> train_meta(const TrainConfig& cfg, std::size_t step) {
  std::string objectives;
  for (Objective o : cfg.objectives) {
    if (!objectives.empty()) objectives += ",";
    objectives += objective_name(o);
  }
  return {{"phase", cfg.phase == Phase::pretrain ? "pretrain" : "finetune"},
          {"objectives", objectives},
          {"use_type_prediction", cfg.use_type_prediction ? "1" : "0"},
          {"step", std::to_string(step)},
          {"seed", std::to_string(cfg.seed)}};
}

template <class T>
Checkpoint training_checkpoint(const ParameterSet<T>& p, const AdamW<T>& opt, const Vocabs& vocabs,
                               const TrainConfig& cfg, std::size_t step) {
  Checkpoint ck = make_checkpoint(p, vocabs, train_meta(cfg, step));
  opt.save_into(ck, p);
  return ck;
}

/// Runs steps start_step+1 .. cfg.total_steps. Passing the parameters and
/// optimizer restored from a step-k checkpoint with start_step = k continues
/// the exact trajectory of an uninterrupted run.
template <class T>
TrainResult train(ParameterSet<T>& p, AdamW<T>& opt, const Vocabs& vocabs,
                  const std::vector<TokenFile>& files, const TrainConfig& cfg,
                  const PipelineConfig& pcfg, const TrainOutputs& io = {},
                  std::size_t start_step = 0) {
  cfg.validate();
  if (p.config().max_seq < pcfg.max_seq) throw ConfigError("model max_seq is below the pipeline max_seq");
  std::optional<PretrainStream> pre;
  std::optional<FinetuneStream> fine;
  if (cfg.phase == Phase::pretrain)
    pre.emplace(files, vocabs, pcfg, cfg.seed);
  else
    fine.emplace(files, vocabs, pcfg, cfg.seed);

  std::ofstream metrics;
  if (!io.metrics_path.empty()) {
    metrics.open(io.metrics_path, start_step == 0 ? std::ios::binary | std::ios::trunc
                                                  : std::ios::binary | std::ios::app);
    if (!metrics) throw IoError("cannot write " + io.metrics_path);
    if (start_step == 0) metrics << metrics_header(cfg) << '\n';
  }

  TrainResult result;
  Fnv1a fp;
  for (std::size_t step = start_step + 1; step <= cfg.total_steps; ++step) {
    const auto batch = pre ? pre->batch(step, cfg.batch_size) : fine->batch(step, cfg.batch_size);
    for (const auto& ex : batch) hash_example(fp, ex);
    StepReport r;
    try {
      r = detail::optimizer_step(batch, p, opt, cfg, step);
    } catch (const Error& e) {
      throw Error(e.kind(), "step " + std::to_string(step) + ": " + e.what());
    }
    if (metrics.is_open()) metrics << metrics_line(r, cfg) << '\n';
    if (io.progress && (step % io.progress_every == 0 || step == cfg.total_steps)) {
      *io.progress << (cfg.phase == Phase::pretrain ? "pretrain" : "finetune") << " step " << step
                   << " loss " << format_double(r.total_loss) << '\n';
      for (const auto& w : r.warnings) *io.progress << "warning: step " << step << ": " << w << '\n';
    }
    if (io.checkpoint_every && step % io.checkpoint_every == 0 && step != cfg.total_steps &&
        !io.checkpoint_path.empty())
      save_checkpoint(io.checkpoint_path + ".step" + std::to_string(step),
                      training_checkpoint(p, opt, vocabs, cfg, step));
    result.log.push_back(std::move(r));
  }
  result.data_fingerprint = fp.digest();
  if (!io.checkpoint_path.empty())
    save_checkpoint(io.checkpoint_path, training_checkpoint(p, opt, vocabs, cfg, cfg.total_steps));
  return result;
}

}  // namespace cuglm
