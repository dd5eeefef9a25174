#pragma once

#include <string>
#include <vector>

#include "mudman/model.hpp"

namespace mudman {

/// Mean next-token cross-entropy over fixed held-out batches.
template <typename T>
double eval_loss(const ModelState<T>& model, const std::vector<TokenBatch>& eval_set,
                 const WeightOverlay<T>* overlay = nullptr) {
  MUDMAN_REQUIRE(!eval_set.empty(), "eval set must be nonempty");
  double total = 0.0;
  for (const auto& b : eval_set) total += lm_loss(model, b, overlay);
  return total / static_cast<double>(eval_set.size());
}

enum class GuardMode { reject_only, pause_then_reject };

/// Retain-loss thresholds relative to the trial's initial retain loss.
struct GuardPolicy {
  double soft_threshold_offset = 0.05;
  double hard_threshold_offset = 0.10;
  GuardMode mode = GuardMode::reject_only;

  void validate() const {
    MUDMAN_REQUIRE(soft_threshold_offset >= 0.0, "soft threshold offset must be >= 0");
    MUDMAN_REQUIRE(hard_threshold_offset >= soft_threshold_offset, "hard threshold must be >= soft threshold");
  }

  /// Largest retain eval value a valid trial may contain.
  double valid_ceiling(double initial) const {
    return initial + (mode == GuardMode::reject_only ? soft_threshold_offset : hard_threshold_offset);
  }
};

enum class GuardVerdict { ok, pause, reject, prune };

/// Verdict for one retain evaluation.
inline GuardVerdict judge(const GuardPolicy& g, double initial, double retain_loss) {
  if (g.mode == GuardMode::reject_only)
    return retain_loss > initial + g.soft_threshold_offset ? GuardVerdict::reject : GuardVerdict::ok;
  if (retain_loss > initial + g.hard_threshold_offset) return GuardVerdict::prune;
  if (retain_loss > initial + g.soft_threshold_offset) return GuardVerdict::pause;
  return GuardVerdict::ok;
}

}  // namespace mudman
