#pragma once

// Line-delimited JSON trial records and the per-method summary CSV.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mudman/attack.hpp"
#include "mudman/config.hpp"
#include "mudman/search.hpp"
#include "mudman/unlearn.hpp"

namespace mudman {

using Json = nlohmann::json;

/// Everything needed to rerun one trial against its base checkpoint.
struct TrialRecord {
  std::string method;        // method name or variant key
  std::uint64_t base_seed = 0;
  std::size_t trial_index = 0;
  std::uint64_t checkpoint_hash = 0;
  std::string checkpoint_path;
  std::vector<double> point;  // sampled coordinates, in space order
  DataConfig data;
  UnlearnConfig config;
  AttackConfig attack;
  GuardPolicy guard;
  TrialResult result;
};

namespace detail {

inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }
inline double num(const Json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

inline Json traj_json(const Trajectory& t) {
  Json a = Json::array();
  for (const auto& [p, l] : t) a.push_back(Json::array({p, num(l)}));
  return a;
}
inline Trajectory traj_from(const Json& a) {
  Trajectory t;
  for (const auto& e : a) t.emplace_back(e.at(0).get<std::size_t>(), num(e.at(1)));
  return t;
}

inline Json grammar_json(const GrammarSpec& g) {
  return {{"vocab_size", g.vocab_size},
          {"overlap_fraction", g.overlap_fraction},
          {"max_depth", g.max_depth},
          {"structure_seed", g.structure_seed}};
}
inline GrammarSpec grammar_from(const Json& j, GrammarId id) {
  GrammarSpec g;
  g.id = id;
  g.vocab_size = j.at("vocab_size").get<std::size_t>();
  g.overlap_fraction = j.at("overlap_fraction").get<double>();
  g.max_depth = j.at("max_depth").get<std::size_t>();
  g.structure_seed = j.at("structure_seed").get<std::uint64_t>();
  return g;
}

}  // namespace detail

inline Json to_json(const UnlearnConfig& u) {
  return {{"alpha_unlearning", u.alpha_unlearning},
          {"alpha_retaining", u.alpha_retaining},
          {"alpha_adv", u.alpha_adv},
          {"mu", u.mu},
          {"fork_every_n_loops", u.fork_every_n_loops},
          {"unlearning_loss", enum_name(u.unlearning_loss)},
          {"selective_logit_normalization", enum_name(u.selective_logit_normalization)},
          {"normalization", enum_name(u.normalization)},
          {"masking", u.masking},
          {"meta_learning", u.meta_learning},
          {"intervention", u.intervention.names()},
          {"pass_budget_unlearn", u.pass_budget_unlearn},
          {"batch", u.batch},
          {"seq", u.seq},
          {"retain_eval_every_loops", u.retain_eval_every_loops},
          {"seed", u.seed}};
}

inline UnlearnConfig unlearn_config_from_json(const Json& j) {
  UnlearnConfig u;
  u.alpha_unlearning = j.at("alpha_unlearning").get<double>();
  u.alpha_retaining = j.at("alpha_retaining").get<double>();
  u.alpha_adv = j.at("alpha_adv").get<double>();
  u.mu = j.at("mu").get<double>();
  u.fork_every_n_loops = j.at("fork_every_n_loops").get<std::size_t>();
  u.unlearning_loss = enum_from_name<LossKind>(j.at("unlearning_loss").get<std::string>());
  u.selective_logit_normalization =
      enum_from_name<LogitNormalization>(j.at("selective_logit_normalization").get<std::string>());
  u.normalization = enum_from_name<Normalization>(j.at("normalization").get<std::string>());
  u.masking = j.at("masking").get<bool>();
  u.meta_learning = j.at("meta_learning").get<bool>();
  u.intervention = InterventionSet(j.at("intervention").get<std::vector<std::string>>());
  u.pass_budget_unlearn = j.at("pass_budget_unlearn").get<std::size_t>();
  u.batch = j.at("batch").get<std::size_t>();
  u.seq = j.at("seq").get<std::size_t>();
  u.retain_eval_every_loops = j.at("retain_eval_every_loops").get<std::size_t>();
  u.seed = j.at("seed").get<std::uint64_t>();
  return u;
}

inline Json to_json(const AttackConfig& a) {
  return {{"relearn_lr", a.relearn_lr},
          {"pass_budget_relearn", a.pass_budget_relearn},
          {"batch", a.batch},
          {"seq", a.seq},
          {"eval_every", a.eval_every}};
}

inline AttackConfig attack_config_from_json(const Json& j) {
  AttackConfig a;
  a.relearn_lr = j.at("relearn_lr").get<double>();
  a.pass_budget_relearn = j.at("pass_budget_relearn").get<std::size_t>();
  a.batch = j.at("batch").get<std::size_t>();
  a.seq = j.at("seq").get<std::size_t>();
  a.eval_every = j.at("eval_every").get<std::size_t>();
  return a;
}

inline Json to_json(const GuardPolicy& g) {
  return {{"soft_threshold_offset", g.soft_threshold_offset},
          {"hard_threshold_offset", g.hard_threshold_offset},
          {"mode", enum_name(g.mode)}};
}

inline GuardPolicy guard_from_json(const Json& j) {
  GuardPolicy g;
  g.soft_threshold_offset = j.at("soft_threshold_offset").get<double>();
  g.hard_threshold_offset = j.at("hard_threshold_offset").get<double>();
  g.mode = enum_from_name<GuardMode>(j.at("mode").get<std::string>());
  return g;
}

inline Json to_json(const DataConfig& d) {
  return {{"forget_grammar", detail::grammar_json(d.forget_grammar)},
          {"retain_grammar", detail::grammar_json(d.retain_grammar)},
          {"eval_batches", d.eval.batches},
          {"eval_batch", d.eval.batch},
          {"eval_seq", d.eval.seq},
          {"data_seed", d.data_seed}};
}

inline DataConfig data_config_from_json(const Json& j) {
  DataConfig d;
  d.forget_grammar = detail::grammar_from(j.at("forget_grammar"), GrammarId::forget_grammar);
  d.retain_grammar = detail::grammar_from(j.at("retain_grammar"), GrammarId::retain_grammar);
  d.eval.batches = j.at("eval_batches").get<std::size_t>();
  d.eval.batch = j.at("eval_batch").get<std::size_t>();
  d.eval.seq = j.at("eval_seq").get<std::size_t>();
  d.data_seed = j.at("data_seed").get<std::uint64_t>();
  return d;
}

inline Json to_json(const TrialResult& r) {
  return {{"status", to_string(r.status)},
          {"forget_loss_after_relearn", detail::num(r.forget_loss_after_relearn)},
          {"initial_retain_loss", detail::num(r.initial_retain_loss)},
          {"forget_loss_after_unlearn", detail::num(r.forget_loss_after_unlearn)},
          {"retain_loss_trajectory", detail::traj_json(r.retain_loss_trajectory)},
          {"forget_loss_trajectory", detail::traj_json(r.forget_loss_trajectory)},
          {"unlearn_passes", r.unlearn_passes},
          {"relearn_passes", r.relearn_passes},
          {"loops", r.loops},
          {"mask_violations", r.mask_violations},
          {"paused_loops", r.paused_loops},
          {"resumed_after_pause", r.resumed_after_pause},
          {"aux_matrix_count", r.aux_matrix_count},
          {"aux_bytes", r.aux_bytes},
          {"seed", r.seed},
          {"message", r.message}};
}

inline TrialResult trial_result_from_json(const Json& j) {
  TrialResult r;
  r.status = trial_status_from_string(j.at("status").get<std::string>());
  r.forget_loss_after_relearn = detail::num(j.at("forget_loss_after_relearn"));
  r.initial_retain_loss = detail::num(j.at("initial_retain_loss"));
  r.forget_loss_after_unlearn = detail::num(j.at("forget_loss_after_unlearn"));
  r.retain_loss_trajectory = detail::traj_from(j.at("retain_loss_trajectory"));
  r.forget_loss_trajectory = detail::traj_from(j.at("forget_loss_trajectory"));
  r.unlearn_passes = j.at("unlearn_passes").get<std::size_t>();
  r.relearn_passes = j.at("relearn_passes").get<std::size_t>();
  r.loops = j.at("loops").get<std::size_t>();
  r.mask_violations = j.at("mask_violations").get<std::size_t>();
  r.paused_loops = j.at("paused_loops").get<std::size_t>();
  r.resumed_after_pause = j.at("resumed_after_pause").get<std::size_t>();
  r.aux_matrix_count = j.at("aux_matrix_count").get<std::size_t>();
  r.aux_bytes = j.at("aux_bytes").get<std::int64_t>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.message = j.at("message").get<std::string>();
  return r;
}

inline Json to_json(const TrialRecord& t) {
  return {{"method", t.method},
          {"base_seed", t.base_seed},
          {"trial_index", t.trial_index},
          {"checkpoint_hash", t.checkpoint_hash},
          {"checkpoint_path", t.checkpoint_path},
          {"point", t.point},
          {"data", to_json(t.data)},
          {"config", to_json(t.config)},
          {"attack", to_json(t.attack)},
          {"guard", to_json(t.guard)},
          {"result", to_json(t.result)}};
}

inline TrialRecord trial_record_from_json(const Json& j) {
  TrialRecord t;
  t.method = j.at("method").get<std::string>();
  t.base_seed = j.at("base_seed").get<std::uint64_t>();
  t.trial_index = j.at("trial_index").get<std::size_t>();
  t.checkpoint_hash = j.at("checkpoint_hash").get<std::uint64_t>();
  t.checkpoint_path = j.at("checkpoint_path").get<std::string>();
  t.point = j.at("point").get<std::vector<double>>();
  t.data = data_config_from_json(j.at("data"));
  t.config = unlearn_config_from_json(j.at("config"));
  t.attack = attack_config_from_json(j.at("attack"));
  t.guard = guard_from_json(j.at("guard"));
  t.result = trial_result_from_json(j.at("result"));
  return t;
}

inline Json to_json(const StepReport& s) {
  return {{"loop", s.loop},
          {"passes", s.passes},
          {"retain_loss", detail::num(s.retain_loss)},
          {"forget_loss", detail::num(s.forget_loss)},
          {"unlearn_grad_norm", detail::num(s.unlearn_grad_norm)},
          {"normalized_norm", detail::num(s.normalized_norm)},
          {"applied_norm", detail::num(s.applied_norm)},
          {"mask_kept_fraction", detail::num(s.mask_kept_fraction)},
          {"mask_violations", s.mask_violations},
          {"forked", s.forked},
          {"skipped", s.skipped},
          {"paused", s.paused}};
}

/// Two results are the same when their serialized forms match; doubles are
/// written with round-trip precision, so this is a bitwise comparison.
inline bool same_result(const TrialResult& a, const TrialResult& b) { return to_json(a).dump() == to_json(b).dump(); }

inline void append_jsonl(std::ostream& out, const Json& j) { out << j.dump() << "\n"; }

inline std::vector<TrialRecord> read_trial_records(std::istream& in) {
  std::vector<TrialRecord> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(trial_record_from_json(Json::parse(line)));
    } catch (const std::exception& e) {
      throw Error("bad trial record on line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<TrialRecord> read_trial_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open records file: " + path);
  return read_trial_records(in);
}

// ----------------------------------------------------------------------------
// Summary table
// ----------------------------------------------------------------------------

struct SummaryRow {
  std::uint64_t base_seed = 0;
  std::string method;
  Aggregate aggregate;
  std::size_t n_trials = 0;
  std::vector<SaturationFlag> saturation;
  bool failed = false;
};

inline const char* summary_csv_header() {
  return "base_seed,method,mean,standard_error,n_valid,n_window,n_trials,failed,saturation";
}

inline std::string summary_csv_line(const SummaryRow& r) {
  std::ostringstream o;
  o << r.base_seed << "," << r.method << "," << detail::fmt_double(r.aggregate.mean) << ","
    << detail::fmt_double(r.aggregate.standard_error) << "," << r.aggregate.n_valid << "," << r.aggregate.n_window
    << "," << r.n_trials << "," << (r.failed ? "true" : "false") << ",";
  for (std::size_t i = 0; i < r.saturation.size(); ++i)
    o << (i ? ";" : "") << r.saturation[i].param << ":" << r.saturation[i].boundary;
  return o.str();
}

/// Rebuilds a summary row from persisted records of one (base seed, method).
inline SummaryRow summarize(const std::vector<TrialRecord>& records, const SearchSpace& space, std::size_t window) {
  MUDMAN_REQUIRE(!records.empty(), "cannot summarize zero records");
  SummaryRow row;
  row.base_seed = records.front().base_seed;
  row.method = records.front().method;
  std::vector<Observation> obs;
  std::vector<double> valid;
  for (const auto& r : records) {
    const bool ok = r.result.has_objective();
    obs.push_back({r.point, ok, ok ? r.result.forget_loss_after_relearn : 0.0});
    if (ok) valid.push_back(r.result.forget_loss_after_relearn);
  }
  row.n_trials = records.size();
  row.aggregate = aggregate_last(valid, window);
  row.failed = valid.empty();
  row.saturation = saturation_audit(obs, space);
  return row;
}

}  // namespace mudman
