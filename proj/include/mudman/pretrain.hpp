#pragma once

// Base-model pretraining on a retain/forget mixture with Adam.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mudman/datagen.hpp"
#include "mudman/eval.hpp"
#include "mudman/model.hpp"

namespace mudman {

struct PretrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 16;
  std::size_t seq = 16;
  double lr = 3e-3;
  double final_lr_fraction = 0.1;  // cosine decay floor
  double retain_fraction = 0.7;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void validate() const {
    MUDMAN_REQUIRE(batch > 0 && seq >= 2, "pretrain batch must be positive and seq >= 2");
    MUDMAN_REQUIRE(lr > 0.0, "pretrain lr must be > 0");
    MUDMAN_REQUIRE(retain_fraction >= 0.0 && retain_fraction <= 1.0, "retain_fraction must be in [0, 1]");
  }
};

struct PretrainResult {
  double retain_plateau = 0.0;  // held-out retain loss at the end
  double forget_plateau = 0.0;  // held-out forget loss at the end
  std::size_t passes = 0;
};

template <typename T>
class Adam {
 public:
  explicit Adam(const ModelState<T>& model) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& m = model.params.at(i);
      m_.emplace_back(m.size(), 0.0);
      v_.emplace_back(m.size(), 0.0);
    }
  }

  void step(ModelState<T>& model, const GradientSet<T>& g, double lr, const PretrainConfig& c) {
    ++t_;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      auto& w = model.params.mutable_at(i);
      const auto& gi = g.entry(i).value;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = gi[j];
        m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
        v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
        w[j] -= static_cast<T>(lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps));
      }
    }
  }

 private:
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Trains `model` in place. `mixture` streams: rows drawn retain/forget by
/// `retain_fraction`. With retain_fraction == 1 the forget grammar is withheld.
template <typename T>
PretrainResult pretrain(ModelState<T>& model, CorpusStream retain, CorpusStream forget, const PretrainConfig& cfg,
                        const std::vector<TokenBatch>& retain_eval, const std::vector<TokenBatch>& forget_eval) {
  cfg.validate();
  Adam<T> opt(model);
  GradientSet<T> grads;
  PretrainResult res;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const TokenBatch x = mixture_batch(retain, forget, cfg.batch, cfg.seq, model.arch.context_len, cfg.retain_fraction);
    const auto cache = forward(model, x);
    backward(model, cache, LossSpec{}, nullptr, grads);
    res.passes += 2;
    const double progress = cfg.steps > 1 ? static_cast<double>(s) / static_cast<double>(cfg.steps - 1) : 1.0;
    const double lr = cfg.lr * (cfg.final_lr_fraction +
                                (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    opt.step(model, grads, lr, cfg);
  }
  if (!model.params.all_finite()) throw DivergenceError("pretraining diverged");
  res.retain_plateau = eval_loss(model, retain_eval);
  res.forget_plateau = eval_loss(model, forget_eval);
  return res;
}

}  // namespace mudman
