#pragma once

// Sequential hyperparameter search with a two-phase estimation-of-distribution
// sampler: uniform exploration first, then Gaussian kernels around the top
// quartile of valid trials seen so far.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mudman/attack.hpp"
#include "mudman/common.hpp"
#include "mudman/unlearn.hpp"

namespace mudman {

enum class RangeKind { log_uniform, uniform, integer };

inline const char* to_string(RangeKind k) {
  switch (k) {
    case RangeKind::log_uniform: return "log";
    case RangeKind::uniform: return "uniform";
    case RangeKind::integer: return "int";
  }
  return "?";
}

struct ParamRange {
  std::string name;
  RangeKind kind = RangeKind::uniform;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const {
    MUDMAN_REQUIRE(lo < hi, "range for " + name + " must have lo < hi");
    if (kind == RangeKind::log_uniform) MUDMAN_REQUIRE(lo > 0.0, "log range for " + name + " needs lo > 0");
    if (kind == RangeKind::integer)
      MUDMAN_REQUIRE(std::floor(lo) == lo && std::floor(hi) == hi, "integer range for " + name + " needs integers");
  }

  /// Maps a natural value into [0, 1].
  double to_unit(double v) const {
    switch (kind) {
      case RangeKind::log_uniform: return (std::log(v) - std::log(lo)) / (std::log(hi) - std::log(lo));
      case RangeKind::uniform: return (v - lo) / (hi - lo);
      case RangeKind::integer: return (v - lo + 0.5) / (hi - lo + 1.0);
    }
    return 0.0;
  }

  double from_unit(double u) const {
    u = std::clamp(u, 0.0, 1.0);
    switch (kind) {
      case RangeKind::log_uniform: return std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
      case RangeKind::uniform: return lo + u * (hi - lo);
      case RangeKind::integer: return std::min(hi, lo + std::floor(u * (hi - lo + 1.0)));
    }
    return lo;
  }

  bool operator==(const ParamRange&) const = default;
};

struct SearchSpace {
  std::vector<ParamRange> params;

  void validate() const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i].validate();
      for (std::size_t j = 0; j < i; ++j)
        MUDMAN_REQUIRE(params[i].name != params[j].name, "duplicate search parameter: " + params[i].name);
    }
  }
  bool operator==(const SearchSpace&) const = default;
};

struct SearchSettings {
  std::size_t n_trials = 150;
  std::size_t window = 30;               // K: aggregate over the last K valid trials
  double explore_fraction = 0.3;
  double top_fraction = 0.25;
  double uniform_mix = 0.1;              // chance of a uniform draw in the exploit phase
  std::size_t round_size = 1;            // trials proposed per frozen-history round

  void validate() const {
    MUDMAN_REQUIRE(window > 0, "search window must be positive");
    MUDMAN_REQUIRE(n_trials >= 2 * window, "n_trials must be >= 2 * window");
    MUDMAN_REQUIRE(explore_fraction >= 0.0 && explore_fraction <= 1.0, "explore_fraction must be in [0, 1]");
    MUDMAN_REQUIRE(top_fraction > 0.0 && top_fraction <= 1.0, "top_fraction must be in (0, 1]");
    MUDMAN_REQUIRE(round_size > 0, "round_size must be positive");
  }
};

/// What the sampler needs to know about an evaluated point.
struct Observation {
  std::vector<double> point;  // natural units, one per space parameter
  bool valid = false;
  double objective = 0.0;
};

class EdaSampler {
 public:
  EdaSampler(SearchSpace space, SearchSettings settings, std::uint64_t seed)
      : space_(std::move(space)), settings_(settings), seed_(seed) {
    space_.validate();
  }

  /// Proposal for trial `index` given the history; a pure function of both.
  std::vector<double> propose(const std::vector<Observation>& history, std::size_t index) const {
    Rng rng(mix_seed(seed_, index));
    const std::size_t d = space_.params.size();
    std::vector<double> unit(d);
    const auto explore_until =
        static_cast<std::size_t>(std::ceil(settings_.explore_fraction * static_cast<double>(settings_.n_trials)));

    std::vector<const Observation*> valid;
    for (const auto& o : history)
      if (o.valid) valid.push_back(&o);
    const bool exploit = index >= explore_until && valid.size() >= 2 && rng.uniform() >= settings_.uniform_mix;
    if (!exploit) {
      for (auto& u : unit) u = rng.uniform();
      return to_natural(unit);
    }
    // Top fraction by objective; ties broken by earlier trial.
    std::stable_sort(valid.begin(), valid.end(),
                     [](const Observation* a, const Observation* b) { return a->objective > b->objective; });
    const std::size_t n_top = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::ceil(settings_.top_fraction * static_cast<double>(valid.size()))));
    valid.resize(std::min(n_top, valid.size()));

    std::vector<std::vector<double>> top_unit;
    for (const auto* o : valid) top_unit.push_back(to_unit(o->point));
    const double shrink = std::pow(static_cast<double>(top_unit.size()), -1.0 / (static_cast<double>(d) + 4.0));
    const auto& parent = top_unit[rng.below(top_unit.size())];
    for (std::size_t j = 0; j < d; ++j) {
      double mean = 0.0;
      for (const auto& t : top_unit) mean += t[j];
      mean /= static_cast<double>(top_unit.size());
      double var = 0.0;
      for (const auto& t : top_unit) var += (t[j] - mean) * (t[j] - mean);
      var /= static_cast<double>(top_unit.size() - 1);
      const double bw = std::max(std::sqrt(var) * shrink, 0.02);
      double u = parent[j] + bw * rng.normal();
      // Reflect into [0, 1].
      while (u < 0.0 || u > 1.0) u = u < 0.0 ? -u : 2.0 - u;
      unit[j] = u;
    }
    return to_natural(unit);
  }

  const SearchSpace& space() const { return space_; }

 private:
  std::vector<double> to_unit(const std::vector<double>& p) const {
    std::vector<double> u(p.size());
    for (std::size_t j = 0; j < p.size(); ++j) u[j] = space_.params[j].to_unit(p[j]);
    return u;
  }
  std::vector<double> to_natural(const std::vector<double>& u) const {
    std::vector<double> p(u.size());
    for (std::size_t j = 0; j < u.size(); ++j) p[j] = space_.params[j].from_unit(u[j]);
    return p;
  }

  SearchSpace space_;
  SearchSettings settings_;
  std::uint64_t seed_;
};

// ----------------------------------------------------------------------------
// Aggregation and audit
// ----------------------------------------------------------------------------

struct Aggregate {
  double mean = std::nan("");
  double standard_error = std::nan("");
  std::size_t n_valid = 0;   // valid trials in the whole search
  std::size_t n_window = 0;  // trials actually aggregated (min(K, n_valid))
};

/// Mean and standard error of the last `window` values.
inline Aggregate aggregate_last(const std::vector<double>& valid_objectives, std::size_t window) {
  Aggregate a;
  a.n_valid = valid_objectives.size();
  a.n_window = std::min(window, valid_objectives.size());
  if (a.n_window == 0) return a;
  const auto first = valid_objectives.end() - static_cast<std::ptrdiff_t>(a.n_window);
  double s = 0.0;
  for (auto it = first; it != valid_objectives.end(); ++it) s += *it;
  a.mean = s / static_cast<double>(a.n_window);
  if (a.n_window > 1) {
    double v = 0.0;
    for (auto it = first; it != valid_objectives.end(); ++it) v += (*it - a.mean) * (*it - a.mean);
    v /= static_cast<double>(a.n_window - 1);
    a.standard_error = std::sqrt(v / static_cast<double>(a.n_window));
  } else {
    a.standard_error = 0.0;
  }
  return a;
}

struct SaturationFlag {
  std::string param;
  std::string boundary;  // "lower" or "upper"
  double fraction = 0.0; // share of top-decile trials within the boundary band
  bool operator==(const SaturationFlag&) const = default;
};

/// Flags parameters whose top-decile valid trials mostly (> half) sit within
/// 5% of one end of the range (measured in the range's sampling coordinates).
/// Never flags when every valid objective is the same.
inline std::vector<SaturationFlag> saturation_audit(const std::vector<Observation>& history,
                                                    const SearchSpace& space, double band = 0.05) {
  std::vector<const Observation*> valid;
  for (const auto& o : history)
    if (o.valid) valid.push_back(&o);
  std::vector<SaturationFlag> flags;
  if (valid.empty()) return flags;
  // A constant objective has no optimum to sit at a bound.
  if (std::all_of(valid.begin(), valid.end(), [&](const Observation* o) { return o->objective == valid[0]->objective; }))
    return flags;
  std::stable_sort(valid.begin(), valid.end(),
                   [](const Observation* a, const Observation* b) { return a->objective > b->objective; });
  const auto n_top = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(valid.size()))));
  valid.resize(n_top);
  for (std::size_t j = 0; j < space.params.size(); ++j) {
    const auto& r = space.params[j];
    std::size_t low = 0, high = 0;
    for (const auto* o : valid) {
      const double u = r.to_unit(o->point[j]);
      if (u <= band) ++low;
      if (u >= 1.0 - band) ++high;
    }
    const double fl = static_cast<double>(low) / static_cast<double>(n_top);
    const double fh = static_cast<double>(high) / static_cast<double>(n_top);
    if (fl > 0.5) flags.push_back({r.name, "lower", fl});
    if (fh > 0.5) flags.push_back({r.name, "upper", fh});
  }
  return flags;
}

// ----------------------------------------------------------------------------
// Running a search
// ----------------------------------------------------------------------------

struct SearchTrial {
  std::size_t index = 0;
  std::vector<double> point;
  TrialResult result;
};

struct SearchResult {
  std::vector<SearchTrial> trials;
  Aggregate aggregate;
  std::vector<SaturationFlag> saturation;
  bool failed = false;  // no valid trial

  std::vector<Observation> observations() const {
    std::vector<Observation> obs;
    for (const auto& t : trials)
      obs.push_back({t.point, t.result.has_objective(), t.result.has_objective() ? t.result.forget_loss_after_relearn : 0.0});
    return obs;
  }
  std::vector<double> valid_objectives() const {
    std::vector<double> v;
    for (const auto& t : trials)
      if (t.result.has_objective()) v.push_back(t.result.forget_loss_after_relearn);
    return v;
  }
};

/// Writes a sampled point into a config.
inline UnlearnConfig apply_point(UnlearnConfig c, const SearchSpace& space, const std::vector<double>& point) {
  MUDMAN_REQUIRE(point.size() == space.params.size(), "point dimension mismatch");
  for (std::size_t j = 0; j < point.size(); ++j) {
    const std::string& n = space.params[j].name;
    const double v = point[j];
    if (n == "alpha_unlearning") c.alpha_unlearning = v;
    else if (n == "alpha_retaining") c.alpha_retaining = v;
    else if (n == "alpha_adv") c.alpha_adv = v;
    else if (n == "mu") c.mu = v;
    else if (n == "fork_every_n_loops") c.fork_every_n_loops = static_cast<std::size_t>(std::llround(v));
    else throw InvalidArgument("unknown search parameter: " + n);
  }
  return c;
}

/// Runs `evaluate(point, index)` for every trial. Proposals within a round
/// see the history frozen at the round's start; rounds of size 1 are fully
/// sequential. Up to `jobs` trials of a round run on separate threads.
template <typename Evaluate>
SearchResult run_search_with(const SearchSpace& space, const SearchSettings& settings, std::uint64_t seed,
                             Evaluate&& evaluate, std::size_t jobs = 1) {
  space.validate();
  settings.validate();
  EdaSampler sampler(space, settings, seed);
  SearchResult res;
  std::vector<Observation> history;
  for (std::size_t start = 0; start < settings.n_trials; start += settings.round_size) {
    const std::size_t end = std::min(settings.n_trials, start + settings.round_size);
    std::vector<SearchTrial> round(end - start);
    for (std::size_t i = start; i < end; ++i) {
      round[i - start].index = i;
      round[i - start].point = sampler.propose(history, i);
    }
    auto work = [&](std::size_t lo, std::size_t step) {
      for (std::size_t k = lo; k < round.size(); k += step)
        round[k].result = evaluate(round[k].point, round[k].index);
    };
    const std::size_t n_threads = std::min(std::max<std::size_t>(jobs, 1), round.size());
    if (n_threads <= 1) {
      work(0, 1);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work, t, n_threads);
      for (auto& th : pool) th.join();
    }
    for (auto& t : round) {
      history.push_back({t.point, t.result.has_objective(),
                         t.result.has_objective() ? t.result.forget_loss_after_relearn : 0.0});
      res.trials.push_back(std::move(t));
    }
  }
  const auto valid = res.valid_objectives();
  res.failed = valid.empty();
  res.aggregate = aggregate_last(valid, settings.window);
  res.saturation = saturation_audit(history, space);
  return res;
}

/// Search over unlearning hyperparameters with fixed budgets: every trial
/// differs from `fixed` only in the sampled coordinates.
template <typename T>
SearchResult run_search(const SearchSpace& space, const SearchSettings& settings, std::uint64_t base_seed,
                        const UnlearnConfig& fixed, const AttackConfig& attack, const GuardPolicy& guard,
                        const TrialEnv<T>& env, std::size_t jobs = 1) {
  return run_search_with(
      space, settings, base_seed,
      [&](const std::vector<double>& point, std::size_t) {
        return run_trial(env, apply_point(fixed, space, point), attack, guard);
      },
      jobs);
}

}  // namespace mudman
