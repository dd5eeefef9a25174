#pragma once

// Experiment orchestration: one pretrained base model per base seed, one
// search per (base seed, method) or (base seed, normalization variant), trial
// records and summary rows.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "mudman/attack.hpp"
#include "mudman/checkpoint.hpp"
#include "mudman/config.hpp"
#include "mudman/pretrain.hpp"
#include "mudman/records.hpp"
#include "mudman/search.hpp"

namespace mudman {

using Scalar = float;

struct BaseModel {
  std::uint64_t base_seed = 0;
  ModelState<Scalar> model;
  PretrainResult plateau;
  std::uint64_t hash = 0;
  std::string path;  // empty when not saved
};

inline Checkpoint base_metadata(const BaseModel& b) {
  Checkpoint c;
  c.metadata["base_seed"] = static_cast<double>(b.base_seed);
  c.metadata["retain_plateau"] = b.plateau.retain_plateau;
  c.metadata["forget_plateau"] = b.plateau.forget_plateau;
  return c;
}

/// Fixed held-out eval sets for an experiment.
inline std::vector<TokenBatch> retain_eval_set(const DataConfig& d) {
  return held_out_eval_set(CorpusStream(d.retain_grammar, d.data_seed), d.eval.batches, d.eval.batch, d.eval.seq);
}
inline std::vector<TokenBatch> forget_eval_set(const DataConfig& d) {
  return held_out_eval_set(CorpusStream(d.forget_grammar, d.data_seed), d.eval.batches, d.eval.batch, d.eval.seq);
}

inline BaseModel pretrain_base(const ExperimentConfig& cfg, std::uint64_t base_seed) {
  BaseModel b;
  b.base_seed = base_seed;
  b.model = init_model<Scalar>(cfg.arch, base_seed);
  b.plateau = pretrain(b.model, CorpusStream(cfg.data.retain_grammar, mix_seed(base_seed, 0xB1)),
                       CorpusStream(cfg.data.forget_grammar, mix_seed(base_seed, 0xB2)), cfg.pretrain,
                       retain_eval_set(cfg.data), forget_eval_set(cfg.data));
  b.hash = checkpoint_hash(b.model, base_metadata(b));
  return b;
}

inline BaseModel load_base(const std::string& path) {
  Checkpoint meta;
  BaseModel b;
  b.model = load_checkpoint<Scalar>(path, &meta);
  b.path = path;
  b.base_seed = static_cast<std::uint64_t>(meta.metadata.count("base_seed") ? meta.metadata.at("base_seed") : 0.0);
  if (meta.metadata.count("retain_plateau")) b.plateau.retain_plateau = meta.metadata.at("retain_plateau");
  if (meta.metadata.count("forget_plateau")) b.plateau.forget_plateau = meta.metadata.at("forget_plateau");
  b.hash = checkpoint_hash(b.model, meta);
  return b;
}

/// Seed shared by every trial of a base seed, so methods see the same streams.
inline std::uint64_t trial_seed_for(std::uint64_t base_seed) { return mix_seed(base_seed, 0x7E); }
inline std::uint64_t sampler_seed_for(std::uint64_t base_seed) { return mix_seed(base_seed, 0x5A); }

/// The config a trial actually runs. Coordinates that cannot influence the
/// result are pinned, so equivalent samples share one memo entry.
inline UnlearnConfig effective_config(UnlearnConfig c) {
  if (c.alpha_unlearning == 0.0 && c.alpha_retaining == 0.0) {
    c.alpha_adv = 0.0;
    c.mu = 0.0;
    c.fork_every_n_loops = 1;
  }
  return c;
}

struct SearchJob {
  std::uint64_t base_seed = 0;
  std::string key;  // method name or "variant.<normalization>"
  UnlearnConfig fixed;
  SearchSpace space;
  std::optional<Method> method;  // switches re-applied over every sampled point
};

struct SearchOutcome {
  SearchJob job;
  SearchResult result;
  std::vector<TrialRecord> records;
  SummaryRow row;
};

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const ExperimentConfig& config() const { return cfg_; }

  std::vector<std::uint64_t> base_seeds() const {
    std::vector<std::uint64_t> s;
    for (std::size_t i = 0; i < cfg_.n_base_seeds; ++i) s.push_back(cfg_.first_base_seed + i);
    return s;
  }

  /// Registers an externally prepared base model (e.g. loaded from disk).
  void add_base(BaseModel b) {
    std::lock_guard lk(mu_);
    auto slot = std::make_unique<Slot>();
    slot->base = std::move(b);
    slot->env = make_trial_env(slot->base.model, cfg_.data.forget_grammar, cfg_.data.retain_grammar,
                               cfg_.data.data_seed, cfg_.data.eval);
    const auto seed = slot->base.base_seed;
    slots_[seed] = std::move(slot);
  }

  /// Pretrains (once) and returns the base model for a seed.
  const BaseModel& base(std::uint64_t seed) {
    {
      std::lock_guard lk(mu_);
      if (auto it = slots_.find(seed); it != slots_.end()) return it->second->base;
    }
    add_base(pretrain_base(cfg_, seed));
    std::lock_guard lk(mu_);
    return slots_.at(seed)->base;
  }

  const TrialEnv<Scalar>& env(std::uint64_t seed) {
    base(seed);
    std::lock_guard lk(mu_);
    return slots_.at(seed)->env;
  }

  UnlearnConfig method_config(Method m, std::uint64_t base_seed) const {
    UnlearnConfig c = configure_method(cfg_.unlearn, m);
    c.seed = trial_seed_for(base_seed);
    return c;
  }

  UnlearnConfig variant_config(Normalization n, std::uint64_t base_seed) const {
    UnlearnConfig c = method_config(Method::mudman, base_seed);
    c.normalization = n;
    return c;
  }

  static std::string variant_key(Normalization n) { return "variant." + enum_name(n); }

  std::vector<SearchJob> ablation_jobs() const {
    std::vector<SearchJob> jobs;
    for (auto s : base_seeds())
      for (Method m : cfg_.methods)
        jobs.push_back({s, to_string(m), method_config(m, s), cfg_.space_for(to_string(m)), m});
    return jobs;
  }

  std::vector<SearchJob> variant_jobs() const {
    std::vector<SearchJob> jobs;
    for (auto s : base_seeds())
      for (Normalization n : cfg_.normalization_variants)
        jobs.push_back({s, variant_key(n), variant_config(n, s), cfg_.space_for(variant_key(n)), std::nullopt});
    return jobs;
  }

  /// One trial at an effective config, memoized per base seed.
  TrialResult trial(std::uint64_t base_seed, const UnlearnConfig& config) {
    const TrialEnv<Scalar>& e = env(base_seed);
    const std::string key = to_json(config).dump();
    Slot* slot;
    {
      std::lock_guard lk(mu_);
      slot = slots_.at(base_seed).get();
      if (auto it = slot->memo.find(key); it != slot->memo.end()) {
        ++memo_hits_;
        return it->second;
      }
    }
    TrialResult r = run_trial(e, config, cfg_.attack, cfg_.guard);
    std::lock_guard lk(mu_);
    slot->memo.emplace(key, r);
    return r;
  }

  /// `jobs` runs trials of one sampler round concurrently; rounds come from
  /// the search settings, so results do not depend on it.
  SearchOutcome run(const SearchJob& job, std::size_t jobs = 1) {
    const BaseModel& b = base(job.base_seed);
    SearchOutcome out;
    out.job = job;
    std::vector<UnlearnConfig> effective(cfg_.search.n_trials);
    out.result = run_search_with(job.space, cfg_.search, sampler_seed_for(job.base_seed),
                                 [&](const std::vector<double>& point, std::size_t index) {
                                   UnlearnConfig c = apply_point(job.fixed, job.space, point);
                                   if (job.method) c = configure_method(c, *job.method);
                                   effective[index] = effective_config(c);
                                   return trial(job.base_seed, effective[index]);
                                 },
                                 jobs);
    for (const auto& t : out.result.trials) {
      TrialRecord r;
      r.method = job.key;
      r.base_seed = job.base_seed;
      r.trial_index = t.index;
      r.checkpoint_hash = b.hash;
      r.checkpoint_path = b.path;
      r.point = t.point;
      r.data = cfg_.data;
      r.config = effective[t.index];
      r.attack = cfg_.attack;
      r.guard = cfg_.guard;
      r.result = t.result;
      out.records.push_back(std::move(r));
    }
    out.row.base_seed = job.base_seed;
    out.row.method = job.key;
    out.row.aggregate = out.result.aggregate;
    out.row.n_trials = out.result.trials.size();
    out.row.saturation = out.result.saturation;
    out.row.failed = out.result.failed;
    return out;
  }

  /// Runs independent searches on up to `jobs` threads; output order follows
  /// the input order regardless of scheduling.
  std::vector<SearchOutcome> run_all(const std::vector<SearchJob>& list, std::size_t jobs = 1) {
    for (const auto& j : list) base(j.base_seed);
    std::vector<SearchOutcome> out(list.size());
    std::size_t next = 0;
    std::mutex next_mu;
    auto worker = [&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard lk(next_mu);
          if (next >= list.size()) return;
          i = next++;
        }
        out[i] = run(list[i]);
      }
    };
    const std::size_t n = std::min(std::max<std::size_t>(jobs, 1), list.size());
    if (n <= 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
      for (auto& th : pool) th.join();
    }
    return out;
  }

  std::size_t memo_hits() const {
    std::lock_guard lk(mu_);
    return memo_hits_;
  }

 private:
  struct Slot {
    BaseModel base;
    TrialEnv<Scalar> env;
    std::map<std::string, TrialResult> memo;
  };

  ExperimentConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, std::unique_ptr<Slot>> slots_;
  std::size_t memo_hits_ = 0;
};

/// Reruns a persisted trial against its base model.
inline TrialResult replay_trial(const TrialRecord& rec, const ModelState<Scalar>& base) {
  const TrialEnv<Scalar> env =
      make_trial_env(base, rec.data.forget_grammar, rec.data.retain_grammar, rec.data.data_seed, rec.data.eval);
  return run_trial(env, rec.config, rec.attack, rec.guard);
}

inline void write_outcomes(const std::string& dir, const std::vector<SearchOutcome>& outcomes,
                           const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::ofstream rec(dir + "/" + stem + "_trials.jsonl");
  std::ofstream csv(dir + "/" + stem + "_summary.csv");
  if (!rec || !csv) throw Error("cannot write results under " + dir);
  csv << summary_csv_header() << "\n";
  for (const auto& o : outcomes) {
    for (const auto& r : o.records) append_jsonl(rec, to_json(r));
    csv << summary_csv_line(o.row) << "\n";
  }
}

}  // namespace mudman
