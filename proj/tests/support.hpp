#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mudman/datagen.hpp"
#include "mudman/model.hpp"

namespace mudman::testing {

inline ArchSpec tiny_arch(MlpKind kind = MlpKind::gated) {
  ArchSpec a;
  a.vocab_size = 16;
  a.d_model = 8;
  a.n_blocks = 2;
  a.n_heads = 2;
  a.d_mlp = 12;
  a.context_len = 8;
  a.mlp_kind = kind;
  return a;
}

inline TokenBatch random_batch(std::size_t batch, std::size_t seq, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{batch, seq, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) b.ids.push_back(static_cast<TokenId>(rng.below(vocab)));
  return b;
}

struct FdCheck {
  std::string param;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
};

/// Central differences on sampled entries of every parameter matrix.
inline std::vector<FdCheck> finite_difference_check(ModelState<double> model, const TokenBatch& x,
                                                    const LossSpec& loss, std::size_t per_param,
                                                    std::uint64_t seed, double eps = 1e-5) {
  const auto cache = forward(model, x);
  GradientSet<double> g;
  backward(model, cache, loss, nullptr, g);
  auto eval = [&](const ModelState<double>& m) {
    const auto c = forward(m, x);
    return loss_and_dlogits<double>(c, loss, nullptr);
  };
  Rng rng(seed);
  std::vector<FdCheck> out;
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    FdCheck chk;
    chk.param = model.params.name(p);
    const std::size_t n = model.params.at(p).size();
    for (std::size_t s = 0; s < per_param; ++s) {
      const std::size_t i = rng.below(n);
      const double orig = model.params.at(p)[i];
      model.params.mutable_at(p)[i] = orig + eps;
      const double up = eval(model);
      model.params.mutable_at(p)[i] = orig - eps;
      const double dn = eval(model);
      model.params.mutable_at(p)[i] = orig;
      const double num = (up - dn) / (2 * eps);
      const double ana = g.entry(p).value[i];
      const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
      chk.max_rel_error = std::max(chk.max_rel_error, rel);
      ++chk.entries;
    }
    out.push_back(chk);
  }
  return out;
}

}  // namespace mudman::testing

#include "mudman/attack.hpp"
#include "mudman/pretrain.hpp"

namespace mudman::testing {

inline const GrammarSpec& forget_g() {
  static const GrammarSpec g{GrammarId::forget_grammar};
  return g;
}
inline const GrammarSpec& retain_g() {
  static const GrammarSpec g{GrammarId::retain_grammar};
  return g;
}

/// Default-size model after a short pretraining run; not at its plateau, so
/// retain descent is still visible.
inline ModelState<float> short_pretrained(std::uint64_t seed, std::size_t steps = 400) {
  auto model = init_model<float>(ArchSpec{}, seed);
  PretrainConfig pc;
  pc.steps = steps;
  pretrain(model, CorpusStream(retain_g(), mix_seed(seed, 1)), CorpusStream(forget_g(), mix_seed(seed, 2)), pc,
           held_out_eval_set(CorpusStream(retain_g(), 1), 1, 8, 16),
           held_out_eval_set(CorpusStream(forget_g(), 1), 1, 8, 16));
  return model;
}

struct PauseScenario {
  TrialResult probe;    // retain-only run, no guard effects
  TrialResult guarded;  // pause_then_reject with the constructed baseline
  double initial = 0.0;
  GuardPolicy guard;
};

/// Expects a model with retain headroom (freshly initialized works). Places the
/// soft threshold between the first and last retain evaluations of a
/// retain-only probe, so the guarded run starts above it (paused) and the
/// continuing retain updates bring it back under (resumed).
inline PauseScenario pause_resume_scenario(const ModelState<float>& model) {
  TrialEnv<float> env = make_trial_env(model, forget_g(), retain_g(), 3, EvalSetConfig{2, 16, 16});
  UnlearnConfig c;
  c.alpha_retaining = 1.0;
  c.mu = 0.5;
  c.pass_budget_unlearn = 250;
  c.seed = 4;
  AttackConfig a;
  a.pass_budget_relearn = 20;
  PauseScenario s;
  UnlearnConfig probe = c;
  probe.alpha_unlearning = 0.0;
  env.initial_retain_loss = 1e9;
  s.probe = run_trial(env, probe, a, GuardPolicy{});
  const auto& t = s.probe.retain_loss_trajectory;
  const double first = t.front().second, last = t.back().second;
  s.guard = GuardPolicy{0.05, 0.05 + (first - last) + 1.0, GuardMode::pause_then_reject};
  s.initial = 0.5 * (first + last) - s.guard.soft_threshold_offset;
  env.initial_retain_loss = s.initial;
  c.alpha_unlearning = 1e-3;
  s.guarded = run_trial(env, c, a, s.guard);
  return s;
}

}  // namespace mudman::testing
