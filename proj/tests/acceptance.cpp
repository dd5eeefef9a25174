// Acceptance run: one PASS/FAIL line per criterion. The experiment criteria
// (A4-A7, A9, A10) are computed from records persisted to --out and read back.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "mudman/experiment.hpp"
#include "mudman/stats.hpp"
#include "support.hpp"

using namespace mudman;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Report {
  int failures = 0;
  void line(const std::string& id, bool ok, const std::string& detail) {
    std::printf("%s %s  %s\n", id.c_str(), ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

// ---------------------------------------------------------------------------

void check_gradients(Report& rep) {
  const auto t0 = Clock::now();
  ArchSpec a;  // the experiment architecture: 2 blocks
  double worst = 0.0;
  std::size_t min_entries = SIZE_MAX, checks = 0;
  for (MlpKind kind : {MlpKind::gated, MlpKind::plain}) {
    a.mlp_kind = kind;
    const auto model = init_model<double>(a, 17);
    const auto x = testing::random_batch(2, 8, a.vocab_size, 3);
    for (LossKind lk : {LossKind::lm_cross_entropy, LossKind::neg_cross_entropy, LossKind::neg_entropy,
                        LossKind::selective_logit}) {
      LossSpec spec{lk, LogitNormalization::sum};
      for (const auto& c : testing::finite_difference_check(model, x, spec, 10, 5)) {
        worst = std::max(worst, c.max_rel_error);
        min_entries = std::min(min_entries, c.entries);
        ++checks;
      }
    }
  }
  const double t = seconds_since(t0);
  rep.line("A1", worst < 1e-4 && min_entries >= 10 && t < 60.0,
           fmt("max rel error %.3g over %zu matrix checks (>= %zu entries each), %.1f s", worst, checks, min_entries, t));
}

void check_mask_and_norm(Report& rep, const BaseModel& base, const ExperimentConfig& cfg) {
  ModelState<Scalar> model = base.model;
  UnlearnConfig c = configure_method(cfg.unlearn, Method::mudman);
  c.pass_budget_unlearn = 300;
  c.alpha_unlearning = 0.5;
  c.alpha_retaining = 0.05;
  c.seed = 99;
  const auto reval = retain_eval_set(cfg.data);
  UnlearnData data{trial_streams(cfg.data.retain_grammar, cfg.data.forget_grammar, c.seed), &reval, cfg.guard,
                   eval_loss(base.model, reval), false};
  const RunReport r = run_unlearning(model, c, data);
  std::size_t nonzero_kept_checks = 0;
  for (const auto& s : r.steps) nonzero_kept_checks += s.mask_kept_fraction > 0.0;
  rep.line("A2", r.loops >= 60 && r.mask_violations == 0 && r.status == RunStatus::completed,
           fmt("%zu loops, %zu sign violations among applied elements, %zu loops with a nonempty mask", r.loops,
               r.mask_violations, nonzero_kept_checks));

  double worst = 0.0;
  std::size_t counted = 0;
  for (const auto& s : r.steps) {
    if (s.skipped) continue;
    worst = std::max(worst, std::abs(s.normalized_norm - 1.0));
    ++counted;
  }
  // Independent Gaussian gradient and accumulator: the mask keeps about half.
  Rng rng(2024);
  GradientSet<double> g;
  RetainAccumulator<double> acc;
  Matrix<double> gm(1000, 1000), am(1000, 1000);
  for (std::size_t i = 0; i < gm.size(); ++i) {
    gm[i] = rng.normal();
    am[i] = rng.normal();
  }
  g.add("w", std::move(gm));
  acc.acc.add("w", std::move(am));
  const double kept = disruption_mask(g, acc).kept_fraction();
  rep.line("A3", counted == r.loops && worst <= 1e-6 && std::abs(kept - 0.5) <= 0.01,
           fmt("max |norm - 1| %.3g over %zu non-skipped loops; Monte-Carlo kept fraction %.5f over 1e6", worst,
               counted, kept));
}

// ---------------------------------------------------------------------------

struct Pool {
  std::map<std::uint64_t, double> mean;  // per base seed
  std::vector<double> last_window;       // pooled last-K valid objectives
};

std::map<std::string, Pool> pools(const std::vector<TrialRecord>& recs, const ExperimentConfig& cfg) {
  std::map<std::pair<std::string, std::uint64_t>, std::vector<TrialRecord>> groups;
  for (const auto& r : recs) groups[{r.method, r.base_seed}].push_back(r);
  std::map<std::string, Pool> out;
  for (auto& [key, g] : groups) {
    std::stable_sort(g.begin(), g.end(), [](const auto& a, const auto& b) { return a.trial_index < b.trial_index; });
    const SummaryRow row = summarize(g, cfg.space_for(key.first), cfg.search.window);
    out[key.first].mean[key.second] = row.aggregate.mean;
    std::vector<double> valid;
    for (const auto& r : g)
      if (r.result.has_objective()) valid.push_back(r.result.forget_loss_after_relearn);
    const auto n = std::min(valid.size(), cfg.search.window);
    out[key.first].last_window.insert(out[key.first].last_window.end(), valid.end() - static_cast<std::ptrdiff_t>(n),
                                      valid.end());
  }
  return out;
}

double grand_mean(const Pool& p) { return p.last_window.empty() ? std::nan("") : mean_of(p.last_window); }

void check_ablation(Report& rep, const std::vector<TrialRecord>& recs, const ExperimentConfig& cfg, double seconds) {
  auto P = pools(recs, cfg);
  const auto& mud = P["mudman"];
  const auto& ctl = P["no_unlearning"];
  const auto& nom = P["no_masking"];
  const auto& tar = P["tar_adapted"];
  std::size_t beat_control = 0, beat_tar = 0, seeds = mud.mean.size();
  for (const auto& [s, m] : mud.mean) {
    beat_control += ctl.mean.count(s) && m > ctl.mean.at(s);
    beat_tar += tar.mean.count(s) && m >= tar.mean.at(s);
  }
  const bool sized = cfg.n_base_seeds >= 10 && cfg.search.n_trials >= 150 && cfg.search.window == 30 &&
                     cfg.methods.size() == 6;
  const auto mw = mann_whitney_greater(mud.last_window, nom.last_window);
  const bool i_ok = seeds == cfg.n_base_seeds && beat_control == seeds;
  const bool ii_ok = mw.p_greater < 0.05;
  const bool iii_ok = static_cast<double>(beat_tar) >= 0.8 * static_cast<double>(seeds);
  std::printf("    pooled means: ");
  for (const auto& [m, p] : P)
    if (m.rfind("variant.", 0) != 0) std::printf("%s %.4f  ", m.c_str(), grand_mean(p));
  std::printf("\n");
  rep.line("A4", sized && i_ok && ii_ok && iii_ok && seconds <= 4 * 3600.0,
           fmt("(i) mudman > control in %zu/%zu seeds; (ii) mudman > no_masking one-sided Mann-Whitney p = %.3g "
               "(n = %zu, %zu); (iii) mudman >= tar_adapted in %zu/%zu seeds; %zu seeds x %zu trials, K = %zu; "
               "%.0f s",
               beat_control, seeds, mw.p_greater, mud.last_window.size(), nom.last_window.size(), beat_tar, seeds,
               static_cast<std::size_t>(cfg.n_base_seeds), static_cast<std::size_t>(cfg.search.n_trials),
               static_cast<std::size_t>(cfg.search.window), seconds));

  const auto& pre = P["variant.global_pre_mask"];
  const auto& per = P["variant.per_parameter"];
  const auto& none = P["variant.none"];
  const double m_pre = grand_mean(pre), m_per = grand_mean(per), m_none = grand_mean(none);
  const auto pre_vs_none = mann_whitney_greater(pre.last_window, none.last_window);
  const auto per_vs_none = mann_whitney_greater(per.last_window, none.last_window);
  const auto pre_vs_per = mann_whitney_greater(pre.last_window, per.last_window);
  std::size_t pre_ge_per = 0;
  for (const auto& [s, m] : pre.mean) pre_ge_per += per.mean.count(s) && m >= per.mean.at(s);
  rep.line("A5", m_pre >= m_per && m_per > m_none && pre_vs_none.p_greater < 0.05 && per_vs_none.p_greater < 0.05,
           fmt("pooled means global_pre_mask %.4f, per_parameter %.4f, none %.4f; p(pre > none) = %.3g, "
               "p(per > none) = %.3g, p(pre > per) = %.3g; pre >= per in %zu/%zu seeds",
               m_pre, m_per, m_none, pre_vs_none.p_greater, per_vs_none.p_greater, pre_vs_per.p_greater, pre_ge_per,
               pre.mean.size()));
}

void check_guards(Report& rep, const std::vector<TrialRecord>& recs) {
  std::size_t valid = 0, offending = 0, reject_only = 0;
  for (const auto& r : recs) {
    if (r.result.status != TrialStatus::valid) continue;
    ++valid;
    reject_only += r.guard.mode == GuardMode::reject_only;
    for (const auto& [p, l] : r.result.retain_loss_trajectory)
      if (l > r.result.initial_retain_loss + 0.05) {
        ++offending;
        break;
      }
  }
  const auto s = testing::pause_resume_scenario(init_model<float>(ArchSpec{}, 31));
  const bool resumed = s.guarded.paused_loops > 0 && s.guarded.resumed_after_pause >= 1 &&
                       s.guarded.paused_loops < s.guarded.loops;
  rep.line("A6", offending == 0 && reject_only == valid && resumed && valid > 0,
           fmt("%zu of %zu valid records exceed initial + 0.05; pause scenario: %zu paused of %zu loops, %zu resumes, "
               "status %s",
               offending, valid, s.guarded.paused_loops, s.guarded.loops, s.guarded.resumed_after_pause,
               to_string(s.guarded.status)));
}

void check_parity(Report& rep, const std::vector<TrialRecord>& recs, const BaseModel& base, const ExperimentConfig& cfg) {
  std::set<std::size_t> unlearn, relearn;
  std::size_t completed = 0, bad_loops = 0, mudman_records = 0;
  for (const auto& r : recs) {
    if (r.result.status != TrialStatus::valid) continue;
    ++completed;
    unlearn.insert(r.result.unlearn_passes);
    relearn.insert(r.result.relearn_passes);
    if (r.config.meta_learning) {
      ++mudman_records;
      bad_loops += r.result.loops * 5 != r.result.unlearn_passes;
    }
  }
  // Direct check on single loops.
  ModelState<Scalar> model = base.model;
  UnlearnConfig c = configure_method(cfg.unlearn, Method::mudman);
  auto st = make_unlearning_state(model, c);
  auto streams = trial_streams(cfg.data.retain_grammar, cfg.data.forget_grammar, 1);
  std::set<std::size_t> per_loop;
  for (int i = 0; i < 12; ++i) per_loop.insert(mudman_step(model, st, streams, c).passes);
  rep.line("A7", unlearn.size() == 1 && relearn.size() == 1 && bad_loops == 0 && per_loop == std::set<std::size_t>{5},
           fmt("%zu valid trials: %zu distinct unlearn pass counts (%zu), %zu distinct relearn (%zu); "
               "%zu meta-learning trials with passes != 5 x loops out of %zu; direct loop passes %zu",
               completed, unlearn.size(), unlearn.empty() ? 0 : *unlearn.begin(), relearn.size(),
               relearn.empty() ? 0 : *relearn.begin(), bad_loops, mudman_records,
               per_loop.size() == 1 ? *per_loop.begin() : 0));
}

void check_memory(Report& rep, const std::vector<TrialRecord>& recs, const BaseModel& base, const ExperimentConfig& cfg) {
  const InterventionSet is = cfg.unlearn.resolved_intervention(base.model.arch);
  std::size_t elems = 0;
  for (const auto& n : is.names()) elems += base.model.params.at(n).size();
  const std::size_t expect_count = 3 * is.size();
  const auto expect_bytes = static_cast<std::int64_t>(3 * elems * sizeof(Scalar));
  std::size_t audited = 0, wrong = 0;
  for (const auto& r : recs) {
    if (!r.config.meta_learning || r.result.status != TrialStatus::valid) continue;
    ++audited;
    wrong += r.result.aux_matrix_count != expect_count || r.result.aux_bytes != expect_bytes;
  }
  rep.line("A8", audited > 0 && wrong == 0,
           fmt("|IS| = %zu, expected %zu matrices / %lld bytes; %zu of %zu meta-learning trials disagree", is.size(),
               expect_count, static_cast<long long>(expect_bytes), wrong, audited));
}

void check_replay(Report& rep, const std::vector<TrialRecord>& recs) {
  std::map<std::uint64_t, BaseModel> bases;
  std::map<std::pair<std::string, std::uint64_t>, std::vector<const TrialRecord*>> groups;
  for (const auto& r : recs) groups[{r.method, r.base_seed}].push_back(&r);
  std::size_t replayed = 0, identical = 0, hash_ok = 0;
  std::set<std::string> statuses;
  for (const auto& [key, g] : groups)
    for (std::size_t k : {std::size_t{0}, g.size() / 2, g.size() - 1}) {
      const TrialRecord& r = *g[k];
      if (!bases.count(r.base_seed)) bases.emplace(r.base_seed, load_base(r.checkpoint_path));
      const BaseModel& b = bases.at(r.base_seed);
      hash_ok += b.hash == r.checkpoint_hash;
      ++replayed;
      identical += same_result(replay_trial(r, b.model), r.result);
      statuses.insert(to_string(r.result.status));
    }
  std::string st;
  for (const auto& s : statuses) st += (st.empty() ? "" : ", ") + s;
  rep.line("A9", replayed > 0 && identical == replayed && hash_ok == replayed,
           fmt("%zu of %zu records replayed bitwise from disk (statuses: %s)", identical, replayed, st.c_str()));
}

void check_attack(Report& rep, const std::vector<TrialRecord>& recs, const std::map<std::uint64_t, double>& plateau) {
  double worst = 0.0;
  std::size_t n = 0;
  std::set<std::uint64_t> seeds;
  for (const auto& r : recs) {
    if (r.method != "no_unlearning" || !r.result.has_objective()) continue;
    worst = std::max(worst, std::abs(r.result.forget_loss_after_relearn - plateau.at(r.base_seed)));
    seeds.insert(r.base_seed);
    ++n;
  }
  // Diagnostic only: how much of the unlearning effect the attack undoes.
  double restored = 0.0;
  std::size_t m = 0;
  for (const auto& r : recs)
    if (r.method == "mudman" && r.result.has_objective()) {
      const double lift = r.result.forget_loss_after_unlearn - plateau.at(r.base_seed);
      if (lift > 0.5) {
        restored += (r.result.forget_loss_after_unlearn - r.result.forget_loss_after_relearn) / lift;
        ++m;
      }
    }
  rep.line("A10", n > 0 && seeds.size() == plateau.size() && worst <= 0.05,
           fmt("control |after relearn - plateau| max %.4f over %zu trials in %zu seeds; attack undoes %.0f%% of "
               "the unlearning lift on average (%zu mudman trials with lift > 0.5)",
               worst, n, seeds.size(), m ? 100.0 * restored / static_cast<double>(m) : 0.0, m));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string config_path, out = "acceptance_out";
  bool reuse = false;
  app.add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "directory for checkpoints and records");
  app.add_flag("--reuse", reuse, "reuse records in --out written from the same resolved config");
  CLI11_PARSE(app, argc, argv);

  try {
    const ExperimentConfig cfg = load_experiment_config(config_path);
    fs::create_directories(out);
    Report rep;
    check_gradients(rep);

    const std::string resolved = to_text(cfg);
    const std::string stamp = out + "/config.resolved.ini";
    bool have = false;
    if (reuse && fs::exists(stamp) && fs::exists(out + "/ablation_trials.jsonl") &&
        fs::exists(out + "/variants_trials.jsonl")) {
      std::ifstream f(stamp);
      std::stringstream ss;
      ss << f.rdbuf();
      have = ss.str() == resolved;
    }

    Experiment e(cfg);
    std::map<std::uint64_t, double> plateau;
    double seconds = 0.0;
    const auto t0 = Clock::now();
    for (auto s : e.base_seeds()) {
      const std::string path = out + "/base_" + std::to_string(s) + ".ckpt";
      BaseModel b;
      if (have && fs::exists(path)) {
        b = load_base(path);
      } else {
        std::fprintf(stderr, "pretraining base seed %llu\n", static_cast<unsigned long long>(s));
        b = pretrain_base(cfg, s);
        save_checkpoint(path, b.model, base_metadata(b));
        b.path = path;
      }
      plateau[s] = b.plateau.forget_plateau;
      e.add_base(std::move(b));
    }
    check_mask_and_norm(rep, e.base(cfg.first_base_seed), cfg);

    if (!have) {
      std::ofstream(stamp) << resolved;
      fs::remove(out + "/ablation_trials.jsonl");
      std::vector<SearchOutcome> abl, var;
      for (const auto& j : e.ablation_jobs()) {
        abl.push_back(e.run(j));
        std::fprintf(stderr, "[%6.0f s] seed %llu %-24s mean %.4f  valid %zu\n", seconds_since(t0),
                     static_cast<unsigned long long>(j.base_seed), j.key.c_str(), abl.back().row.aggregate.mean,
                     abl.back().row.aggregate.n_valid);
      }
      for (const auto& j : e.variant_jobs()) {
        var.push_back(e.run(j));
        std::fprintf(stderr, "[%6.0f s] seed %llu %-24s mean %.4f  valid %zu\n", seconds_since(t0),
                     static_cast<unsigned long long>(j.base_seed), j.key.c_str(), var.back().row.aggregate.mean,
                     var.back().row.aggregate.n_valid);
      }
      write_outcomes(out, abl, "ablation");
      write_outcomes(out, var, "variants");
      seconds = seconds_since(t0);
      std::ofstream(out + "/elapsed_seconds.txt") << seconds << "\n";
    } else {
      std::ifstream(out + "/elapsed_seconds.txt") >> seconds;
    }

    const auto abl = read_trial_records(out + "/ablation_trials.jsonl");
    const auto var = read_trial_records(out + "/variants_trials.jsonl");
    std::vector<TrialRecord> all = abl;
    all.insert(all.end(), var.begin(), var.end());

    check_ablation(rep, all, cfg, seconds);
    check_guards(rep, all);
    check_parity(rep, all, e.base(cfg.first_base_seed), cfg);
    check_memory(rep, all, e.base(cfg.first_base_seed), cfg);
    check_replay(rep, all);
    check_attack(rep, all, plateau);
    std::printf("%d of 10 criteria failed\n", rep.failures);
    return rep.failures == 0 ? 0 : 1;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 2;
  }
}
