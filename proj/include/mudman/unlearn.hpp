#pragma once

// Meta-unlearning with disruption masking and gradient normalization, plus
// the ablations and the adapted-TAR baseline that share its loop.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mudman/datagen.hpp"
#include "mudman/eval.hpp"
#include "mudman/model.hpp"

namespace mudman {

enum class Normalization { none, per_parameter, global_pre_mask, global_post_mask };

struct UnlearnConfig {
  double alpha_unlearning = 0.1;
  double alpha_retaining = 0.01;
  double alpha_adv = 0.01;
  double mu = 0.9;
  std::size_t fork_every_n_loops = 10;
  LossKind unlearning_loss = LossKind::neg_cross_entropy;
  LogitNormalization selective_logit_normalization = LogitNormalization::sum;
  Normalization normalization = Normalization::global_pre_mask;
  bool masking = true;
  bool meta_learning = true;
  InterventionSet intervention;  // empty: first MLP matrix of every block
  std::size_t pass_budget_unlearn = 300;
  std::size_t batch = 8;
  std::size_t seq = 16;
  std::size_t retain_eval_every_loops = 5;
  std::uint64_t seed = 0;

  std::size_t passes_per_loop() const { return meta_learning ? 5 : 4; }

  void validate() const {
    MUDMAN_REQUIRE(alpha_unlearning >= 0.0 && std::isfinite(alpha_unlearning), "alpha_unlearning must be >= 0");
    MUDMAN_REQUIRE(alpha_retaining >= 0.0 && std::isfinite(alpha_retaining), "alpha_retaining must be >= 0");
    MUDMAN_REQUIRE(alpha_adv >= 0.0 && std::isfinite(alpha_adv), "alpha_adv must be >= 0");
    MUDMAN_REQUIRE(mu >= 0.0 && mu <= 1.0, "mu must be in [0, 1]");
    MUDMAN_REQUIRE(fork_every_n_loops > 0, "fork_every_n_loops must be positive");
    MUDMAN_REQUIRE(unlearning_loss != LossKind::lm_cross_entropy, "unlearning loss cannot be lm_cross_entropy");
    MUDMAN_REQUIRE(pass_budget_unlearn > 0, "pass_budget_unlearn must be positive");
    MUDMAN_REQUIRE(pass_budget_unlearn % passes_per_loop() == 0,
                   "pass_budget_unlearn must be a multiple of the passes per loop (" +
                       std::to_string(passes_per_loop()) + ")");
    MUDMAN_REQUIRE(batch > 0 && seq >= 2, "batch must be positive and seq >= 2");
    MUDMAN_REQUIRE(retain_eval_every_loops > 0, "retain_eval_every_loops must be positive");
  }

  InterventionSet resolved_intervention(const ArchSpec& arch) const {
    return intervention.empty() ? default_intervention(arch) : intervention;
  }
};

// ----------------------------------------------------------------------------
// Retain accumulator
// ----------------------------------------------------------------------------

template <typename T>
struct RetainAccumulator {
  GradientSet<T> acc;
  double mu = 0.9;
};

template <typename T>
RetainAccumulator<T> make_retain_accumulator(const ModelState<T>& model, const InterventionSet& is, double mu) {
  MUDMAN_REQUIRE(!is.empty(), "intervention set must be nonempty");
  RetainAccumulator<T> r;
  r.mu = mu;
  for (const auto& n : is.names()) {
    const auto& m = model.params.at(n);
    r.acc.add(n, Matrix<T>(m.rows(), m.cols()));
  }
  return r;
}

/// acc = mu * acc + (1 - mu) * retain_grad, elementwise.
template <typename T>
void update_retain_accumulator(RetainAccumulator<T>& r, const GradientSet<T>& retain_grad) {
  MUDMAN_REQUIRE(r.acc.same_keys(retain_grad), "retain accumulator / gradient key mismatch");
  const T mu = static_cast<T>(r.mu), one_minus = static_cast<T>(1.0 - r.mu);
  for (std::size_t k = 0; k < r.acc.size(); ++k) {
    auto& a = r.acc.entry(k).value;
    const auto& g = retain_grad.entry(k).value;
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = mu * a[i] + one_minus * g[i];
  }
}

/// model -= alpha_retaining * acc on the accumulator's keys only.
template <typename T>
void retain_step(ModelState<T>& model, const RetainAccumulator<T>& r, double alpha_retaining) {
  if (alpha_retaining == 0.0) return;
  const T a = static_cast<T>(alpha_retaining);
  for (const auto& e : r.acc) {
    auto& w = model.params.mutable_at(e.name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= a * e.value[i];
  }
}

// ----------------------------------------------------------------------------
// Disruption masking
// ----------------------------------------------------------------------------

template <typename T>
constexpr int sign_of(T x) {
  return (x > T(0)) - (x < T(0));
}

struct MaskStats {
  std::size_t kept = 0;   // elements whose sign matched the accumulator
  std::size_t total = 0;
  double kept_fraction() const { return total ? static_cast<double>(kept) / static_cast<double>(total) : 0.0; }
};

/// Zeroes every element whose sign differs from the accumulator's, in place.
/// sign(0) = 0, so a zero accumulator entry blocks any nonzero gradient.
template <typename T>
MaskStats disruption_mask(GradientSet<T>& g, const RetainAccumulator<T>& r) {
  MUDMAN_REQUIRE(g.same_keys(r.acc), "unlearning gradient / accumulator key mismatch");
  MaskStats s;
  for (std::size_t k = 0; k < g.size(); ++k) {
    auto& m = g.entry(k).value;
    const auto& a = r.acc.entry(k).value;
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (sign_of(m[i]) == sign_of(a[i]))
        ++s.kept;
      else
        m[i] = T(0);
    }
    s.total += m.size();
  }
  return s;
}

template <typename T>
GradientSet<T> disruption_masked(GradientSet<T> g, const RetainAccumulator<T>& r) {
  disruption_mask(g, r);
  return g;
}

/// Count of nonzero elements whose sign disagrees with the accumulator.
template <typename T>
std::size_t mask_violations(const GradientSet<T>& g, const RetainAccumulator<T>& r) {
  std::size_t bad = 0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const auto& m = g.entry(k).value;
    const auto& a = r.acc.entry(k).value;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i] != T(0) && sign_of(m[i]) != sign_of(a[i])) ++bad;
  }
  return bad;
}

// ----------------------------------------------------------------------------
// Normalization
// ----------------------------------------------------------------------------

inline constexpr double kZeroNormGuard = 1e-12;

struct NormalizeOutcome {
  double norm_before = 0.0;  // global L2 before scaling
  double norm_after = 0.0;   // global L2 after scaling
  bool skipped = false;      // zero gradient: left unchanged and the update is skipped
};

/// Scales g in place: global variants divide by the global L2 norm over all
/// keys; per_parameter divides each key by its own norm.
template <typename T>
NormalizeOutcome normalize(GradientSet<T>& g, Normalization variant) {
  MUDMAN_REQUIRE(variant != Normalization::none, "normalize() needs a normalization variant");
  NormalizeOutcome out;
  out.norm_before = std::sqrt(g.squared_norm());
  if (out.norm_before < kZeroNormGuard) {
    out.skipped = true;
    out.norm_after = out.norm_before;
    return out;
  }
  if (variant == Normalization::per_parameter) {
    for (auto& e : g) {
      const double n = std::sqrt(squared_norm(e.value));
      if (n < kZeroNormGuard) continue;
      const T inv = static_cast<T>(1.0 / n);
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] *= inv;
    }
  } else {
    const T inv = static_cast<T>(1.0 / out.norm_before);
    for (auto& e : g)
      for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] *= inv;
  }
  out.norm_after = std::sqrt(g.squared_norm());
  return out;
}

// ----------------------------------------------------------------------------
// Adversary
// ----------------------------------------------------------------------------

/// Adversary weights for intervened parameters only; every other parameter is
/// read from the base model.
template <typename T>
struct AdversaryState {
  WeightOverlay<T> overlay;
  std::size_t fork_epoch = 0;
};

template <typename T>
AdversaryState<T> fork_adversary(const ModelState<T>& model, const InterventionSet& is, std::size_t epoch = 0) {
  MUDMAN_REQUIRE(!is.empty(), "intervention set must be nonempty");
  AdversaryState<T> adv;
  for (const auto& n : is.names()) adv.overlay.add(n, model.params.at(n));
  adv.fork_epoch = epoch;
  return adv;
}

/// Re-forks into existing storage (no allocation).
template <typename T>
void refork_adversary(AdversaryState<T>& adv, const ModelState<T>& model, std::size_t epoch) {
  for (std::size_t j = 0; j < adv.overlay.size(); ++j) {
    const auto& src = model.params.at(adv.overlay.name(j));
    auto& dst = adv.overlay.mutable_at(j);
    std::copy(src.data(), src.data() + src.size(), dst.data());
  }
  adv.fork_epoch = epoch;
}

template <typename T>
ForwardCache<T> adversary_forward(const AdversaryState<T>& adv, const ModelState<T>& model, const TokenBatch& x) {
  return forward(model, x, &adv.overlay);
}

/// One SGD step of the adversary on the forget batch, reusing `cache` (which
/// must come from adversary_forward at the current adversary weights).
/// `buffer` is scratch for the gradient. Returns the adversary's LM loss.
template <typename T>
double adversary_step(AdversaryState<T>& adv, const ModelState<T>& model, const ForwardCache<T>& cache,
                      double alpha_adv, const InterventionSet& is, GradientSet<T>& buffer) {
  const double loss = backward(model, cache, LossSpec{}, &is, buffer, &adv.overlay);
  if (alpha_adv == 0.0) return loss;
  const T a = static_cast<T>(alpha_adv);
  for (std::size_t j = 0; j < adv.overlay.size(); ++j) {
    auto& w = adv.overlay.mutable_at(j);
    const auto& gm = buffer.at(adv.overlay.name(j));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= a * gm[i];
  }
  return loss;
}

/// Forward + step in one call. Returns the cache of the pre-step forward.
template <typename T>
std::pair<double, ForwardCache<T>> adversary_step(AdversaryState<T>& adv, const ModelState<T>& model,
                                                  const TokenBatch& x_forget, double alpha_adv,
                                                  const InterventionSet& is) {
  auto cache = adversary_forward(adv, model, x_forget);
  GradientSet<T> buffer;
  const double loss = adversary_step(adv, model, cache, alpha_adv, is, buffer);
  return {loss, std::move(cache)};
}

inline LossSpec unlearning_loss_spec(const UnlearnConfig& c) {
  return LossSpec{c.unlearning_loss, c.selective_logit_normalization};
}

/// Gradient of the unlearning loss w.r.t. intervened parameters at the
/// weights the cache was computed with (adversary overlay when given).
template <typename T>
double unlearning_gradient(const AdversaryState<T>* adv, const ModelState<T>& model, const ForwardCache<T>& cache,
                           const LossSpec& loss, const InterventionSet& is, GradientSet<T>& out) {
  MUDMAN_REQUIRE(loss.kind != LossKind::lm_cross_entropy, "unlearning loss cannot be lm_cross_entropy");
  return backward(model, cache, loss, &is, out, adv ? &adv->overlay : nullptr);
}

// ----------------------------------------------------------------------------
// The loop
// ----------------------------------------------------------------------------

/// Optional overlay when meta-learning is on, accumulator and one gradient
/// buffer: all the auxiliary matrices the loop keeps between steps.
template <typename T>
struct UnlearningState {
  InterventionSet intervention;
  AdversaryState<T> adversary;
  RetainAccumulator<T> accumulator;
  GradientSet<T> buffer;
  std::size_t loop = 0;

  std::size_t aux_matrix_count() const {
    return adversary.overlay.size() + accumulator.acc.size() + buffer.size();
  }
  std::size_t aux_element_count() const {
    return adversary.overlay.element_count() + accumulator.acc.element_count() + buffer.element_count();
  }
};

template <typename T>
UnlearningState<T> make_unlearning_state(const ModelState<T>& model, const UnlearnConfig& config) {
  UnlearningState<T> s;
  s.intervention = config.resolved_intervention(model.arch);
  for (const auto& n : s.intervention.names())
    MUDMAN_REQUIRE(model.params.contains(n), "intervention parameter not in model: " + n);
  s.accumulator = make_retain_accumulator(model, s.intervention, config.mu);
  for (const auto& n : s.intervention.names()) {
    const auto& m = model.params.at(n);
    s.buffer.add(n, Matrix<T>(m.rows(), m.cols()));
  }
  if (config.meta_learning) s.adversary = fork_adversary(model, s.intervention, 0);
  return s;
}

struct StepReport {
  std::size_t loop = 0;
  std::size_t passes = 0;
  double retain_loss = 0.0;         // train retain batch, base model
  double forget_loss = 0.0;         // forget batch at the weights the unlearning gradient used
  double unlearn_grad_norm = 0.0;   // global L2 before normalization
  double normalized_norm = 0.0;     // global L2 right after normalization (pre-mask for global_pre_mask)
  double applied_norm = 0.0;        // global L2 of the applied (masked) gradient before alpha scaling
  double mask_kept_fraction = 1.0;  // 1 when masking is off
  std::size_t mask_violations = 0;
  bool forked = false;
  bool skipped = false;             // zero-norm guard
  bool paused = false;              // guard pause: unlearning update withheld
};

struct TrainStreams {
  CorpusStream retain;
  CorpusStream forget;
};

/// One loop of the schedule. Passes: retain forward + backward, forget forward
/// (adversary or base), unlearning backward, and with meta-learning the
/// adversary backward that reuses the same forward.
///
/// The unlearning gradient is evaluated at the weights of the forget forward
/// (the adversary before its update); computing it before the adversary
/// update lets one gradient buffer serve both backward passes.
template <typename T>
StepReport mudman_step(ModelState<T>& model, UnlearningState<T>& st, TrainStreams& streams,
                       const UnlearnConfig& cfg, bool pause_unlearning = false) {
  StepReport rep;
  rep.loop = st.loop;
  rep.paused = pause_unlearning;
  const auto& is = st.intervention;
  const std::size_t ctx = model.arch.context_len;

  if (cfg.meta_learning && st.loop % cfg.fork_every_n_loops == 0) {
    refork_adversary(st.adversary, model, st.loop);
    rep.forked = true;
  }
  const TokenBatch x_retain = streams.retain.sample_batch(cfg.batch, cfg.seq, ctx);
  const TokenBatch x_forget = streams.forget.sample_batch(cfg.batch, cfg.seq, ctx);

  {
    const auto cache = forward(model, x_retain);
    rep.retain_loss = backward(model, cache, LossSpec{}, &is, st.buffer);
    rep.passes += 2;
  }
  update_retain_accumulator(st.accumulator, st.buffer);
  retain_step(model, st.accumulator, cfg.alpha_retaining);

  const AdversaryState<T>* adv = cfg.meta_learning ? &st.adversary : nullptr;
  const auto fcache = adv ? adversary_forward(*adv, model, x_forget) : forward(model, x_forget);
  rep.passes += 1;
  rep.forget_loss = loss_and_dlogits<T>(fcache, LossSpec{}, nullptr);
  unlearning_gradient(adv, model, fcache, unlearning_loss_spec(cfg), is, st.buffer);
  rep.passes += 1;

  GradientSet<T>& g = st.buffer;
  rep.unlearn_grad_norm = std::sqrt(g.squared_norm());
  rep.normalized_norm = rep.unlearn_grad_norm;
  const bool pre = cfg.normalization == Normalization::global_pre_mask ||
                   cfg.normalization == Normalization::per_parameter;
  if (pre) {
    const auto n = normalize(g, cfg.normalization);
    rep.skipped = n.skipped;
    rep.normalized_norm = n.norm_after;
  }
  if (cfg.masking) {
    rep.mask_kept_fraction = disruption_mask(g, st.accumulator).kept_fraction();
  }
  if (cfg.normalization == Normalization::global_post_mask) {
    const auto n = normalize(g, cfg.normalization);
    rep.skipped = n.skipped;
    rep.normalized_norm = n.norm_after;
  }
  if (cfg.normalization == Normalization::none && rep.unlearn_grad_norm < kZeroNormGuard) rep.skipped = true;
  rep.applied_norm = std::sqrt(g.squared_norm());
  if (cfg.masking) rep.mask_violations = mask_violations(g, st.accumulator);

  if (!rep.skipped && !pause_unlearning && cfg.alpha_unlearning != 0.0) {
    const T a = static_cast<T>(cfg.alpha_unlearning);
    for (const auto& e : g) {
      auto& w = model.params.mutable_at(e.name);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= a * e.value[i];
    }
  }

  if (adv) {
    // Base intervened weights changed above, but the forget forward read those
    // entries from the overlay, so the cache is still valid here.
    adversary_step(st.adversary, model, fcache, cfg.alpha_adv, is, st.buffer);
    rep.passes += 1;
  }
  ++st.loop;
  return rep;
}

enum class RunStatus { completed, rejected, pruned, diverged };

inline const char* to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::rejected: return "rejected";
    case RunStatus::pruned: return "pruned";
    case RunStatus::diverged: return "diverged";
  }
  return "?";
}

struct RunReport {
  RunStatus status = RunStatus::completed;
  std::vector<StepReport> steps;
  std::vector<std::pair<std::size_t, double>> retain_trajectory;  // (unlearn pass index, retain eval loss)
  std::size_t passes = 0;
  std::size_t loops = 0;
  std::size_t paused_loops = 0;
  std::size_t resumed_after_pause = 0;  // pause -> unpause transitions
  std::size_t mask_violations = 0;
  std::size_t aux_matrix_count = 0;
  std::int64_t aux_bytes_measured = -1;  // tracked Matrix bytes held across loops, -1 if inconsistent
  std::string message;
};

/// Everything a run reads besides the model and config.
struct UnlearnData {
  TrainStreams streams;
  const std::vector<TokenBatch>* retain_eval = nullptr;
  GuardPolicy guard;
  double initial_retain_loss = 0.0;
  bool use_guard = true;
};

/// Outer loop: runs until the pass budget is spent, evaluating retain loss
/// every `retain_eval_every_loops` loops and after the last loop.
template <typename T>
RunReport run_unlearning(ModelState<T>& model, const UnlearnConfig& cfg, UnlearnData& data) {
  cfg.validate();
  data.guard.validate();
  RunReport rep;
  const std::int64_t baseline_bytes = tracked_matrix_bytes();
  UnlearningState<T> st = make_unlearning_state(model, cfg);
  rep.aux_matrix_count = st.aux_matrix_count();
  const std::int64_t expected_aux = static_cast<std::int64_t>(st.aux_element_count() * sizeof(T));
  bool aux_consistent = tracked_matrix_bytes() - baseline_bytes == expected_aux;

  const std::size_t loops = cfg.pass_budget_unlearn / cfg.passes_per_loop();
  const bool guarded = data.use_guard && data.retain_eval != nullptr;
  bool paused = false;
  auto check = [&](std::size_t loop_done) -> bool {
    const double r = eval_loss(model, *data.retain_eval);
    if (!std::isfinite(r)) throw DivergenceError("non-finite retain eval loss");
    rep.retain_trajectory.emplace_back(rep.passes, r);
    const bool last = loop_done == loops;
    switch (judge(data.guard, data.initial_retain_loss, r)) {
      case GuardVerdict::ok:
        if (paused) ++rep.resumed_after_pause;
        paused = false;
        return true;
      case GuardVerdict::pause:
        if (last) {
          rep.status = RunStatus::rejected;
          rep.message = "retain loss above soft threshold at end of unlearning";
          return false;
        }
        paused = true;
        return true;
      case GuardVerdict::reject:
        rep.status = RunStatus::rejected;
        rep.message = "retain loss above threshold";
        return false;
      case GuardVerdict::prune:
        rep.status = RunStatus::pruned;
        rep.message = "retain loss above hard threshold";
        return false;
    }
    return true;
  };

  try {
    for (std::size_t l = 0; l < loops; ++l) {
      StepReport s = mudman_step(model, st, data.streams, cfg, paused);
      if (!std::isfinite(s.retain_loss) || !std::isfinite(s.forget_loss))
        throw DivergenceError("non-finite training loss");
      rep.passes += s.passes;
      rep.mask_violations += s.mask_violations;
      if (s.paused) ++rep.paused_loops;
      rep.steps.push_back(s);
      ++rep.loops;
      aux_consistent = aux_consistent && tracked_matrix_bytes() - baseline_bytes == expected_aux;
      const bool last = l + 1 == loops;
      if (guarded && ((l + 1) % cfg.retain_eval_every_loops == 0 || last))
        if (!check(l + 1)) break;
    }
  } catch (const DivergenceError& e) {
    rep.status = RunStatus::diverged;
    rep.message = e.what();
  }
  if (rep.status == RunStatus::completed && !model.params.all_finite()) {
    rep.status = RunStatus::diverged;
    rep.message = "non-finite weights";
  }
  rep.aux_bytes_measured = aux_consistent ? expected_aux : -1;
  return rep;
}

// ----------------------------------------------------------------------------
// Methods
// ----------------------------------------------------------------------------

enum class Method { mudman, no_masking, no_normalization, no_meta_learning, tar_adapted, no_unlearning };

inline const char* to_string(Method m) {
  switch (m) {
    case Method::mudman: return "mudman";
    case Method::no_masking: return "no_masking";
    case Method::no_normalization: return "no_normalization";
    case Method::no_meta_learning: return "no_meta_learning";
    case Method::tar_adapted: return "tar_adapted";
    case Method::no_unlearning: return "no_unlearning";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::mudman, Method::no_masking, Method::no_normalization, Method::no_meta_learning,
                   Method::tar_adapted, Method::no_unlearning})
    if (s == to_string(m)) return m;
  throw InvalidArgument("unknown method: " + s);
}

/// Applies a method's switches on top of `base`.
inline UnlearnConfig configure_method(UnlearnConfig c, Method m) {
  c.masking = true;
  c.meta_learning = true;
  c.normalization = Normalization::global_pre_mask;
  switch (m) {
    case Method::mudman: break;
    case Method::no_masking: c.masking = false; break;
    case Method::no_normalization: c.normalization = Normalization::none; break;
    case Method::no_meta_learning: c.meta_learning = false; break;
    case Method::tar_adapted:
      c.masking = false;
      c.normalization = Normalization::none;
      c.unlearning_loss = LossKind::neg_entropy;
      break;
    case Method::no_unlearning:
      c.alpha_unlearning = 0.0;
      c.alpha_retaining = 0.0;
      break;
  }
  return c;
}

/// Adapted TAR: the same single loop with masking and normalization off and
/// negative entropy as the unlearning loss.
template <typename T>
RunReport baseline_tar_adapted(ModelState<T>& model, const UnlearnConfig& cfg, UnlearnData& data) {
  return run_unlearning(model, configure_method(cfg, Method::tar_adapted), data);
}

}  // namespace mudman
