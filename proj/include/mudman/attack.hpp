#pragma once

// Relearning attack and the trial protocol: guarded unlearning, then a fixed
// SGD fine-tuning stage on the forget grammar, then the held-out forget loss.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mudman/datagen.hpp"
#include "mudman/eval.hpp"
#include "mudman/model.hpp"
#include "mudman/unlearn.hpp"

namespace mudman {

struct AttackConfig {
  double relearn_lr = 1e-3;
  std::size_t pass_budget_relearn = 300;  // forward + backward passes; two per SGD step
  std::size_t batch = 8;
  std::size_t seq = 16;
  std::size_t eval_every = 25;  // SGD steps between forget evaluations

  void validate() const {
    MUDMAN_REQUIRE(relearn_lr > 0.0 && std::isfinite(relearn_lr), "relearn_lr must be > 0");
    MUDMAN_REQUIRE(pass_budget_relearn % 2 == 0, "pass_budget_relearn must be even (forward + backward per step)");
    MUDMAN_REQUIRE(batch > 0 && seq >= 2, "attack batch must be positive and seq >= 2");
    MUDMAN_REQUIRE(eval_every > 0, "eval_every must be positive");
  }
};

using Trajectory = std::vector<std::pair<std::size_t, double>>;

/// Plain SGD on next-token cross-entropy over forget batches, every parameter
/// trainable. Returns (pass index, held-out forget loss) points, starting with
/// pass 0 and ending with the final pass.
template <typename T>
Trajectory relearn_attack(ModelState<T>& model, CorpusStream& forget_stream, const AttackConfig& attack,
                          const std::vector<TokenBatch>& forget_eval) {
  attack.validate();
  Trajectory traj;
  traj.emplace_back(0, eval_loss(model, forget_eval));
  const std::size_t steps = attack.pass_budget_relearn / 2;
  const T lr = static_cast<T>(attack.relearn_lr);
  GradientSet<T> grads;
  for (std::size_t s = 0; s < steps; ++s) {
    const TokenBatch x = forget_stream.sample_batch(attack.batch, attack.seq, model.arch.context_len);
    const auto cache = forward(model, x);
    const double loss = backward(model, cache, LossSpec{}, nullptr, grads);
    if (!std::isfinite(loss)) throw DivergenceError("relearning diverged");
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      auto& w = model.params.mutable_at(i);
      const auto& g = grads.entry(i).value;
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
    }
    if ((s + 1) % attack.eval_every == 0 || s + 1 == steps) {
      const double f = eval_loss(model, forget_eval);
      if (!std::isfinite(f)) throw DivergenceError("relearning diverged");
      traj.emplace_back(2 * (s + 1), f);
    }
  }
  return traj;
}

enum class TrialStatus { valid, rejected, pruned, diverged };

inline const char* to_string(TrialStatus s) {
  switch (s) {
    case TrialStatus::valid: return "valid";
    case TrialStatus::rejected: return "rejected";
    case TrialStatus::pruned: return "pruned";
    case TrialStatus::diverged: return "diverged";
  }
  return "?";
}

inline TrialStatus trial_status_from_string(const std::string& s) {
  for (TrialStatus t : {TrialStatus::valid, TrialStatus::rejected, TrialStatus::pruned, TrialStatus::diverged})
    if (s == to_string(t)) return t;
  throw InvalidArgument("unknown trial status: " + s);
}

struct TrialResult {
  TrialStatus status = TrialStatus::valid;
  double forget_loss_after_relearn = std::nan("");  // the objective; NaN unless valid
  double initial_retain_loss = 0.0;
  double forget_loss_after_unlearn = std::nan("");
  Trajectory retain_loss_trajectory;   // unlearning stage, (unlearn pass, loss)
  Trajectory forget_loss_trajectory;   // relearning stage, (relearn pass, loss)
  std::size_t unlearn_passes = 0;
  std::size_t relearn_passes = 0;
  std::size_t loops = 0;
  std::size_t mask_violations = 0;
  std::size_t paused_loops = 0;
  std::size_t resumed_after_pause = 0;
  std::size_t aux_matrix_count = 0;
  std::int64_t aux_bytes = -1;
  std::uint64_t seed = 0;
  std::string message;

  bool has_objective() const { return status == TrialStatus::valid; }
};

/// Grammars and fixed evaluation sets shared by every trial of an experiment.
template <typename T>
struct TrialEnv {
  const ModelState<T>* pretrained = nullptr;
  GrammarSpec forget_grammar;
  GrammarSpec retain_grammar;
  std::vector<TokenBatch> retain_eval;
  std::vector<TokenBatch> forget_eval;
  double initial_retain_loss = 0.0;  // retain eval of the pretrained model
};

struct EvalSetConfig {
  std::size_t batches = 4;
  std::size_t batch = 16;
  std::size_t seq = 16;
};

template <typename T>
TrialEnv<T> make_trial_env(const ModelState<T>& pretrained, const GrammarSpec& forget_g,
                           const GrammarSpec& retain_g, std::uint64_t data_seed, const EvalSetConfig& eval) {
  TrialEnv<T> env;
  env.pretrained = &pretrained;
  env.forget_grammar = forget_g;
  env.retain_grammar = retain_g;
  env.retain_eval = held_out_eval_set(CorpusStream(retain_g, data_seed), eval.batches, eval.batch, eval.seq);
  env.forget_eval = held_out_eval_set(CorpusStream(forget_g, data_seed), eval.batches, eval.batch, eval.seq);
  env.initial_retain_loss = eval_loss(pretrained, env.retain_eval);
  return env;
}

/// Training-stream seeds derived from the trial seed.
inline TrainStreams trial_streams(const GrammarSpec& retain_g, const GrammarSpec& forget_g, std::uint64_t seed) {
  return {CorpusStream(retain_g, mix_seed(seed, 0xA1)), CorpusStream(forget_g, mix_seed(seed, 0xA2))};
}
inline CorpusStream attack_stream(const GrammarSpec& forget_g, std::uint64_t seed) {
  return CorpusStream(forget_g, mix_seed(seed, 0xA3));
}

/// One trial: guarded unlearning, then the relearning attack on a copy of the
/// unlearned model, then the held-out forget loss as the objective.
template <typename T>
TrialResult run_trial(const TrialEnv<T>& env, const UnlearnConfig& config, const AttackConfig& attack,
                      const GuardPolicy& guard) {
  MUDMAN_REQUIRE(env.pretrained != nullptr, "trial needs a pretrained model");
  config.validate();
  attack.validate();
  TrialResult tr;
  tr.seed = config.seed;
  tr.initial_retain_loss = env.initial_retain_loss;
  ModelState<T> model = *env.pretrained;

  UnlearnData data{trial_streams(env.retain_grammar, env.forget_grammar, config.seed), &env.retain_eval, guard,
                   env.initial_retain_loss, true};
  const RunReport rr = run_unlearning(model, config, data);
  tr.retain_loss_trajectory = rr.retain_trajectory;
  tr.unlearn_passes = rr.passes;
  tr.loops = rr.loops;
  tr.mask_violations = rr.mask_violations;
  tr.paused_loops = rr.paused_loops;
  tr.resumed_after_pause = rr.resumed_after_pause;
  tr.aux_matrix_count = rr.aux_matrix_count;
  tr.aux_bytes = rr.aux_bytes_measured;
  tr.message = rr.message;
  switch (rr.status) {
    case RunStatus::completed: break;
    case RunStatus::rejected: tr.status = TrialStatus::rejected; return tr;
    case RunStatus::pruned: tr.status = TrialStatus::pruned; return tr;
    case RunStatus::diverged: tr.status = TrialStatus::diverged; return tr;
  }
  try {
    tr.forget_loss_after_unlearn = eval_loss(model, env.forget_eval);
    CorpusStream relearn = attack_stream(env.forget_grammar, config.seed);
    tr.forget_loss_trajectory = relearn_attack(model, relearn, attack, env.forget_eval);
    tr.relearn_passes = attack.pass_budget_relearn;
    tr.forget_loss_after_relearn = tr.forget_loss_trajectory.back().second;
  } catch (const DivergenceError& e) {
    tr.status = TrialStatus::diverged;
    tr.message = e.what();
    tr.forget_loss_after_relearn = std::nan("");
  }
  return tr;
}

}  // namespace mudman
