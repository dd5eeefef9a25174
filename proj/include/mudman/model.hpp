#pragma once

// Tiny decoder-only language model with exact forward and backward passes.
//
// Layout per block (pre-norm residual):
//   x += attn.o( causal_attention( ln1(x) ) )
//   x += mlp( ln2(x) )
// gated MLP:  down( silu(gate(h)) * up(h) )
// plain MLP:  down( gelu(up(h)) )
// Weight matrices are stored [in, out] so that y = x W.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mudman/matrix.hpp"
#include "mudman/registry.hpp"
#include "mudman/tokens.hpp"

namespace mudman {

enum class MlpKind { gated, plain };

struct ArchSpec {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 2;
  std::size_t d_mlp = 64;
  std::size_t context_len = 32;
  MlpKind mlp_kind = MlpKind::gated;

  void validate() const {
    MUDMAN_REQUIRE(vocab_size > 0 && d_model > 0 && n_blocks > 0 && n_heads > 0 && d_mlp > 0,
                   "arch dimensions must be positive");
    MUDMAN_REQUIRE(d_model % n_heads == 0, "d_model must be divisible by n_heads");
    MUDMAN_REQUIRE(d_mlp >= d_model, "d_mlp must be >= d_model");
    MUDMAN_REQUIRE(context_len >= 2, "context_len must be >= 2");
  }
  bool operator==(const ArchSpec&) const = default;
};

inline constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

/// Registry indices of one block's parameters.
struct BlockLayout {
  std::size_t ln1_gain, ln1_bias, q, k, v, o, ln2_gain, ln2_bias;
  std::size_t gate = kNone;  // gated only
  std::size_t up, down;
};

struct ModelLayout {
  std::size_t embed, pos_embed;
  std::vector<BlockLayout> blocks;
  std::size_t lnf_gain, lnf_bias, unembed;
};

inline std::string block_param(std::size_t block, const char* leaf) {
  return "block." + std::to_string(block) + "." + leaf;
}

template <typename T>
struct ModelState {
  ArchSpec arch;
  ParamRegistry<T> params;
  ModelLayout layout;
};

namespace detail {

inline ModelLayout build_layout(const ArchSpec& arch, const std::vector<std::string>& names) {
  auto idx = [&](const std::string& n) -> std::size_t {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == n) return i;
    throw InvalidArgument("model registry missing parameter: " + n);
  };
  ModelLayout L;
  L.embed = idx("embed");
  L.pos_embed = idx("pos_embed");
  for (std::size_t b = 0; b < arch.n_blocks; ++b) {
    BlockLayout bl{};
    bl.ln1_gain = idx(block_param(b, "ln1.gain"));
    bl.ln1_bias = idx(block_param(b, "ln1.bias"));
    bl.q = idx(block_param(b, "attn.q"));
    bl.k = idx(block_param(b, "attn.k"));
    bl.v = idx(block_param(b, "attn.v"));
    bl.o = idx(block_param(b, "attn.o"));
    bl.ln2_gain = idx(block_param(b, "ln2.gain"));
    bl.ln2_bias = idx(block_param(b, "ln2.bias"));
    if (arch.mlp_kind == MlpKind::gated) bl.gate = idx(block_param(b, "mlp.gate"));
    bl.up = idx(block_param(b, "mlp.up"));
    bl.down = idx(block_param(b, "mlp.down"));
    L.blocks.push_back(bl);
  }
  L.lnf_gain = idx("ln_f.gain");
  L.lnf_bias = idx("ln_f.bias");
  L.unembed = idx("unembed");
  return L;
}

/// (name, rows, cols) in registry order. Registry order is forward order.
inline std::vector<std::tuple<std::string, std::size_t, std::size_t>> param_shapes(const ArchSpec& a) {
  std::vector<std::tuple<std::string, std::size_t, std::size_t>> s;
  const std::size_t D = a.d_model, M = a.d_mlp;
  s.emplace_back("embed", a.vocab_size, D);
  s.emplace_back("pos_embed", a.context_len, D);
  for (std::size_t b = 0; b < a.n_blocks; ++b) {
    s.emplace_back(block_param(b, "ln1.gain"), 1, D);
    s.emplace_back(block_param(b, "ln1.bias"), 1, D);
    for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.o"}) s.emplace_back(block_param(b, w), D, D);
    s.emplace_back(block_param(b, "ln2.gain"), 1, D);
    s.emplace_back(block_param(b, "ln2.bias"), 1, D);
    if (a.mlp_kind == MlpKind::gated) s.emplace_back(block_param(b, "mlp.gate"), D, M);
    s.emplace_back(block_param(b, "mlp.up"), D, M);
    s.emplace_back(block_param(b, "mlp.down"), M, D);
  }
  s.emplace_back("ln_f.gain", 1, D);
  s.emplace_back("ln_f.bias", 1, D);
  s.emplace_back("unembed", D, a.vocab_size);
  return s;
}

}  // namespace detail

/// Builds a model from a registry, checking names and shapes against arch.
template <typename T>
ModelState<T> assemble_model(const ArchSpec& arch, ParamRegistry<T> params) {
  arch.validate();
  const auto shapes = detail::param_shapes(arch);
  MUDMAN_REQUIRE(shapes.size() == params.size(), "registry size does not match arch");
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const auto& [name, r, c] = shapes[i];
    MUDMAN_REQUIRE(params.name(i) == name, "registry order mismatch at " + name);
    MUDMAN_REQUIRE(params.at(i).rows() == r && params.at(i).cols() == c, "shape mismatch for " + name);
  }
  MUDMAN_REQUIRE(params.all_finite(), "model weights must be finite");
  ModelState<T> m{arch, std::move(params), {}};
  m.layout = detail::build_layout(arch, m.params.names());
  return m;
}

/// Deterministic scaled-normal initialization; unembedding is untied.
template <typename T>
ModelState<T> init_model(const ArchSpec& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(mix_seed(seed, 0x1417));
  ParamRegistry<T> reg;
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(arch.n_blocks));
  for (const auto& [name, r, c] : detail::param_shapes(arch)) {
    Matrix<T> m(r, c);
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias");
    if (is_gain) {
      m.fill(T(1));
    } else if (!is_bias) {
      double stdev = 1.0 / std::sqrt(static_cast<double>(r));
      if (name == "embed" || name == "pos_embed") stdev = 0.5;
      if (name.ends_with("attn.o") || name.ends_with("mlp.down")) stdev *= resid_scale;
      for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<T>(stdev * rng.normal());
    }
    reg.add(name, std::move(m));
  }
  return assemble_model(arch, std::move(reg));
}

/// Same weights at a different precision.
template <typename U, typename T>
ModelState<U> cast_model(const ModelState<T>& src) {
  ParamRegistry<U> reg;
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    const auto& m = src.params.at(i);
    Matrix<U> out(m.rows(), m.cols());
    for (std::size_t j = 0; j < m.size(); ++j) out[j] = static_cast<U>(m[j]);
    reg.add(src.params.name(i), std::move(out));
  }
  return assemble_model(src.arch, std::move(reg));
}

// ----------------------------------------------------------------------------
// Losses
// ----------------------------------------------------------------------------

enum class LossKind { lm_cross_entropy, neg_cross_entropy, neg_entropy, selective_logit };
enum class LogitNormalization { sum, mean };

struct LossSpec {
  LossKind kind = LossKind::lm_cross_entropy;
  LogitNormalization selective_logit_normalization = LogitNormalization::sum;
};

// ----------------------------------------------------------------------------
// Forward
// ----------------------------------------------------------------------------

template <typename T>
struct BlockCache {
  Matrix<T> ln1_hat, h1, q, k, v, y;
  std::vector<T> ln1_rstd;
  std::vector<T> att;  // [B, H, T, T], zero above the diagonal
  Matrix<T> ln2_hat, h2, gate_pre, up_pre, act;
  std::vector<T> ln2_rstd;
};

template <typename T>
struct ForwardCache {
  TokenBatch tokens;
  std::vector<std::uint64_t> stamps;  // per registry index, from the source actually read
  std::vector<BlockCache<T>> blocks;
  Matrix<T> lnf_hat, hf, logits;  // logits [B*T, V]
  std::vector<T> lnf_rstd;

  std::size_t batch() const { return tokens.batch; }
  std::size_t seq() const { return tokens.seq; }
};

namespace detail {

template <typename T>
struct ResolvedWeights {
  std::vector<const Matrix<T>*> w;
  std::vector<std::uint64_t> stamps;
};

template <typename T>
ResolvedWeights<T> resolve(const ModelState<T>& model, const WeightOverlay<T>* overlay) {
  ResolvedWeights<T> r;
  r.w.resize(model.params.size());
  r.stamps.resize(model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    r.w[i] = &model.params.at(i);
    r.stamps[i] = model.params.stamp(i);
  }
  if (overlay) {
    for (std::size_t j = 0; j < overlay->size(); ++j) {
      const std::size_t i = model.params.index_of(overlay->name(j));
      MUDMAN_REQUIRE(overlay->at(j).same_shape(model.params.at(i)), "overlay shape mismatch: " + overlay->name(j));
      r.w[i] = &overlay->at(j);
      // Tag overlay stamps so a base entry and an overlay entry never collide.
      r.stamps[i] = overlay->stamp(j) | (std::uint64_t{1} << 63);
    }
  }
  return r;
}

constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& hat,
                std::vector<T>& rstd, Matrix<T>& out) {
  const std::size_t n = x.rows(), d = x.cols();
  hat = Matrix<T>(n, d);
  out = Matrix<T>(n, d);
  rstd.assign(n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = x.row(i);
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[i] = rs;
    T* hr = hat.row(i);
    T* orow = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mean) * rs;
      orow[j] = hr[j] * gain[j] + bias[j];
    }
  }
}

/// Accumulates dx += LN backward; optionally writes gain/bias grads.
template <typename T>
void layer_norm_backward(const Matrix<T>& dout, const Matrix<T>& hat, const std::vector<T>& rstd,
                         const Matrix<T>& gain, Matrix<T>* dgain, Matrix<T>* dbias, Matrix<T>* dx) {
  const std::size_t n = dout.rows(), d = dout.cols();
  std::vector<T> dhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    const T* dr = dout.row(i);
    const T* hr = hat.row(i);
    if (dgain)
      for (std::size_t j = 0; j < d; ++j) (*dgain)[j] += dr[j] * hr[j];
    if (dbias)
      for (std::size_t j = 0; j < d; ++j) (*dbias)[j] += dr[j];
    if (!dx) continue;
    T mean_dhat = 0, mean_dhat_hat = 0;
    for (std::size_t j = 0; j < d; ++j) {
      dhat[j] = dr[j] * gain[j];
      mean_dhat += dhat[j];
      mean_dhat_hat += dhat[j] * hr[j];
    }
    mean_dhat /= static_cast<T>(d);
    mean_dhat_hat /= static_cast<T>(d);
    T* xr = dx->row(i);
    for (std::size_t j = 0; j < d; ++j) xr[j] += rstd[i] * (dhat[j] - mean_dhat - hr[j] * mean_dhat_hat);
  }
}

template <typename T>
T silu(T x) {
  return x / (T(1) + std::exp(-x));
}
template <typename T>
T silu_grad(T x) {
  const T s = T(1) / (T(1) + std::exp(-x));
  return s * (T(1) + x * (T(1) - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

template <typename T>
T gelu(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}
template <typename T>
T gelu_grad(T x) {
  const T u = static_cast<T>(kGeluC) * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = static_cast<T>(kGeluC) * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace detail

/// Runs the model on a batch. Weights named in `overlay` replace base values.
template <typename T>
ForwardCache<T> forward(const ModelState<T>& model, const TokenBatch& batch,
                        const WeightOverlay<T>* overlay = nullptr) {
  const ArchSpec& a = model.arch;
  const std::size_t B = batch.batch, S = batch.seq, D = a.d_model, H = a.n_heads, dh = D / H;
  MUDMAN_REQUIRE(B > 0 && S > 0 && batch.ids.size() == B * S, "malformed token batch");
  MUDMAN_REQUIRE(S <= a.context_len, "sequence longer than context_len");
  for (TokenId id : batch.ids)
    MUDMAN_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < a.vocab_size, "token id out of range");

  const auto rw = detail::resolve(model, overlay);
  const auto& W = rw.w;
  const ModelLayout& L = model.layout;
  const std::size_t N = B * S;

  ForwardCache<T> c;
  c.tokens = batch;
  c.stamps = rw.stamps;
  c.blocks.resize(a.n_blocks);

  Matrix<T> x(N, D);
  const Matrix<T>& emb = *W[L.embed];
  const Matrix<T>& pos = *W[L.pos_embed];
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < S; ++t) {
      T* xr = x.row(b * S + t);
      const T* er = emb.row(static_cast<std::size_t>(batch.at(b, t)));
      const T* pr = pos.row(t);
      for (std::size_t j = 0; j < D; ++j) xr[j] = er[j] + pr[j];
    }

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  Matrix<T> tmp;
  std::vector<T> scores(S);
  for (std::size_t l = 0; l < a.n_blocks; ++l) {
    const BlockLayout& bl = L.blocks[l];
    BlockCache<T>& bc = c.blocks[l];
    detail::layer_norm(x, *W[bl.ln1_gain], *W[bl.ln1_bias], bc.ln1_hat, bc.ln1_rstd, bc.h1);
    matmul(bc.h1, *W[bl.q], bc.q);
    matmul(bc.h1, *W[bl.k], bc.k);
    matmul(bc.h1, *W[bl.v], bc.v);
    bc.att.assign(B * H * S * S, T(0));
    bc.y = Matrix<T>(N, D);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        T* att = bc.att.data() + ((b * H + h) * S) * S;
        for (std::size_t t = 0; t < S; ++t) {
          const T* qr = bc.q.row(b * S + t) + h * dh;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t s = 0; s <= t; ++s) {
            const T* kr = bc.k.row(b * S + s) + h * dh;
            T dot = 0;
            for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
            scores[s] = dot * scale;
            mx = std::max(mx, scores[s]);
          }
          T z = 0;
          for (std::size_t s = 0; s <= t; ++s) {
            scores[s] = std::exp(scores[s] - mx);
            z += scores[s];
          }
          T* yr = bc.y.row(b * S + t) + h * dh;
          for (std::size_t s = 0; s <= t; ++s) {
            const T p = scores[s] / z;
            att[t * S + s] = p;
            const T* vr = bc.v.row(b * S + s) + h * dh;
            for (std::size_t j = 0; j < dh; ++j) yr[j] += p * vr[j];
          }
        }
      }
    matmul(bc.y, *W[bl.o], tmp);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];

    detail::layer_norm(x, *W[bl.ln2_gain], *W[bl.ln2_bias], bc.ln2_hat, bc.ln2_rstd, bc.h2);
    matmul(bc.h2, *W[bl.up], bc.up_pre);
    bc.act = Matrix<T>(N, a.d_mlp);
    if (a.mlp_kind == MlpKind::gated) {
      matmul(bc.h2, *W[bl.gate], bc.gate_pre);
      for (std::size_t i = 0; i < bc.act.size(); ++i) bc.act[i] = detail::silu(bc.gate_pre[i]) * bc.up_pre[i];
    } else {
      for (std::size_t i = 0; i < bc.act.size(); ++i) bc.act[i] = detail::gelu(bc.up_pre[i]);
    }
    matmul(bc.act, *W[bl.down], tmp);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += tmp[i];
  }
  detail::layer_norm(x, *W[L.lnf_gain], *W[L.lnf_bias], c.lnf_hat, c.lnf_rstd, c.hf);
  matmul(c.hf, *W[L.unembed], c.logits);
  return c;
}

// ----------------------------------------------------------------------------
// Loss heads
// ----------------------------------------------------------------------------

/// Evaluates `loss` on the cached logits and fills dlogits [B*T, V]. Next-token
/// positions are t = 0..T-2 (target is the token at t+1); the last position
/// carries no loss. Returns the mean loss over predicting positions.
template <typename T>
double loss_and_dlogits(const ForwardCache<T>& c, const LossSpec& loss, Matrix<T>* dlogits) {
  const std::size_t B = c.batch(), S = c.seq(), V = c.logits.cols();
  MUDMAN_REQUIRE(S >= 2, "loss needs at least two positions");
  const double count = static_cast<double>(B * (S - 1));
  if (dlogits) *dlogits = Matrix<T>(B * S, V);
  std::vector<double> p(V);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t + 1 < S; ++t) {
      const std::size_t r = b * S + t;
      const T* z = c.logits.row(r);
      const std::size_t target = static_cast<std::size_t>(c.tokens.at(b, t + 1));
      T* dz = dlogits ? dlogits->row(r) : nullptr;
      switch (loss.kind) {
        case LossKind::lm_cross_entropy:
        case LossKind::neg_cross_entropy:
        case LossKind::neg_entropy: {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(z[j]));
          double sum = 0.0;
          for (std::size_t j = 0; j < V; ++j) {
            p[j] = std::exp(static_cast<double>(z[j]) - mx);
            sum += p[j];
          }
          const double lse = mx + std::log(sum);
          for (std::size_t j = 0; j < V; ++j) p[j] /= sum;
          if (loss.kind == LossKind::neg_entropy) {
            // sum_j p_j log p_j; d/dz_j = p_j (log p_j - sum_i p_i log p_i)
            double plogp = 0.0;
            for (std::size_t j = 0; j < V; ++j) plogp += p[j] * (static_cast<double>(z[j]) - lse);
            total += plogp;
            if (dz)
              for (std::size_t j = 0; j < V; ++j)
                dz[j] = static_cast<T>(p[j] * ((static_cast<double>(z[j]) - lse) - plogp) / count);
          } else {
            const double sign = loss.kind == LossKind::lm_cross_entropy ? 1.0 : -1.0;
            total += sign * (lse - static_cast<double>(z[target]));
            if (dz)
              for (std::size_t j = 0; j < V; ++j)
                dz[j] = static_cast<T>(sign * (p[j] - (j == target ? 1.0 : 0.0)) / count);
          }
          break;
        }
        case LossKind::selective_logit: {
          // logits[correct] - sum(logits)  (or - mean(logits))
          const bool mean = loss.selective_logit_normalization == LogitNormalization::mean;
          double s = 0.0;
          for (std::size_t j = 0; j < V; ++j) s += z[j];
          const double shift = mean ? s / static_cast<double>(V) : s;
          total += static_cast<double>(z[target]) - shift;
          const double w = mean ? 1.0 / static_cast<double>(V) : 1.0;
          if (dz)
            for (std::size_t j = 0; j < V; ++j)
              dz[j] = static_cast<T>(((j == target ? 1.0 : 0.0) - w) / count);
          break;
        }
      }
    }
  const double value = total / count;
  if (!std::isfinite(value)) throw DivergenceError("non-finite loss");
  return value;
}

// ----------------------------------------------------------------------------
// Backward
// ----------------------------------------------------------------------------

/// Parameters to differentiate: nullptr means every registry entry.
using ParamSubset = const InterventionSet*;

/// Backpropagates `loss` through the cached forward. `grads` receives exactly
/// the subset's keys (reused in place when already shaped). The same cache may
/// be used for any number of backward calls while the weights it read are
/// unchanged; otherwise StaleCacheError.
template <typename T>
double backward(const ModelState<T>& model, const ForwardCache<T>& c, const LossSpec& loss,
                ParamSubset subset, GradientSet<T>& grads, const WeightOverlay<T>* overlay = nullptr) {
  const ArchSpec& a = model.arch;
  const auto rw = detail::resolve(model, overlay);
  if (rw.stamps != c.stamps) throw StaleCacheError("forward cache does not match current weights");
  const auto& W = rw.w;
  const ModelLayout& L = model.layout;
  const std::size_t P = model.params.size();

  // Which registry entries need gradients, and the lowest one (forward order).
  std::vector<char> want(P, 0);
  std::size_t lowest = kNone;
  if (subset == nullptr) {
    std::fill(want.begin(), want.end(), 1);
    lowest = 0;
  } else {
    for (const auto& n : subset->names()) {
      const std::size_t i = model.params.index_of(n);
      want[i] = 1;
      lowest = std::min(lowest, i);
    }
  }
  // Reshape output if needed.
  {
    bool reuse = grads.size() == (subset ? subset->size() : P);
    if (reuse)
      for (std::size_t j = 0; j < grads.size() && reuse; ++j) {
        const std::string& n = subset ? subset->names()[j] : model.params.name(j);
        reuse = grads.entry(j).name == n && grads.entry(j).value.same_shape(model.params.at(n));
      }
    if (reuse) {
      grads.fill(T(0));
    } else {
      grads = GradientSet<T>();
      for (std::size_t i = 0; i < P; ++i)
        if (want[i]) {
          const auto& m = model.params.at(i);
          grads.add(model.params.name(i), Matrix<T>(m.rows(), m.cols()));
        }
      if (subset) {
        // Follow the subset's order rather than registry order.
        GradientSet<T> ordered;
        for (const auto& n : subset->names()) ordered.add(n, std::move(grads.at(n)));
        grads = std::move(ordered);
      }
    }
  }
  auto g = [&](std::size_t i) -> Matrix<T>* {
    return want[i] ? &grads.at(model.params.name(i)) : nullptr;
  };
  // True when some wanted parameter sits strictly before registry index i.
  auto below = [&](std::size_t i) { return lowest != kNone && lowest < i; };

  Matrix<T> dlogits;
  const double value = loss_and_dlogits(c, loss, lowest == kNone ? nullptr : &dlogits);
  if (lowest == kNone) return value;

  const std::size_t B = c.batch(), S = c.seq(), N = B * S, D = a.d_model, H = a.n_heads, dh = D / H;

  if (auto* gw = g(L.unembed)) matmul_at_acc(c.hf, dlogits, *gw);
  if (!below(L.unembed)) return value;
  Matrix<T> dhf;
  matmul_bt(dlogits, *W[L.unembed], dhf, false);

  Matrix<T> dx(N, D);
  detail::layer_norm_backward(dhf, c.lnf_hat, c.lnf_rstd, *W[L.lnf_gain], g(L.lnf_gain), g(L.lnf_bias),
                              below(L.lnf_gain) ? &dx : nullptr);
  if (!below(L.lnf_gain)) return value;

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (std::size_t li = a.n_blocks; li-- > 0;) {
    const BlockLayout& bl = L.blocks[li];
    const BlockCache<T>& bc = c.blocks[li];

    // MLP: dx is the gradient w.r.t. the residual after the block.
    if (auto* gw = g(bl.down)) matmul_at_acc(bc.act, dx, *gw);
    const std::size_t mlp_first = bl.gate != kNone ? bl.gate : bl.up;
    if (!below(bl.down)) return value;
    Matrix<T> dact;
    matmul_bt(dx, *W[bl.down], dact, false);
    Matrix<T> dup(N, a.d_mlp), dgate;
    if (a.mlp_kind == MlpKind::gated) {
      dgate = Matrix<T>(N, a.d_mlp);
      for (std::size_t i = 0; i < dact.size(); ++i) {
        const T gp = bc.gate_pre[i];
        dup[i] = dact[i] * detail::silu(gp);
        dgate[i] = dact[i] * bc.up_pre[i] * detail::silu_grad(gp);
      }
      if (auto* gw = g(bl.gate)) matmul_at_acc(bc.h2, dgate, *gw);
    } else {
      for (std::size_t i = 0; i < dact.size(); ++i) dup[i] = dact[i] * detail::gelu_grad(bc.up_pre[i]);
    }
    if (auto* gw = g(bl.up)) matmul_at_acc(bc.h2, dup, *gw);
    if (!below(mlp_first)) return value;
    Matrix<T> dh2;
    matmul_bt(dup, *W[bl.up], dh2, false);
    if (a.mlp_kind == MlpKind::gated) matmul_bt(dgate, *W[bl.gate], dh2, true);
    detail::layer_norm_backward(dh2, bc.ln2_hat, bc.ln2_rstd, *W[bl.ln2_gain], g(bl.ln2_gain), g(bl.ln2_bias),
                                below(bl.ln2_gain) ? &dx : nullptr);
    if (!below(bl.ln2_gain)) return value;

    // Attention.
    if (auto* gw = g(bl.o)) matmul_at_acc(bc.y, dx, *gw);
    if (!below(bl.o)) return value;
    Matrix<T> dy;
    matmul_bt(dx, *W[bl.o], dy, false);
    Matrix<T> dq(N, D), dk(N, D), dv(N, D);
    std::vector<T> datt(S);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const T* att = bc.att.data() + ((b * H + h) * S) * S;
        for (std::size_t t = 0; t < S; ++t) {
          const T* dyr = dy.row(b * S + t) + h * dh;
          T dot_sum = 0;
          for (std::size_t s = 0; s <= t; ++s) {
            const T* vr = bc.v.row(b * S + s) + h * dh;
            T* dvr = dv.row(b * S + s) + h * dh;
            const T p = att[t * S + s];
            T d = 0;
            for (std::size_t j = 0; j < dh; ++j) {
              d += dyr[j] * vr[j];
              dvr[j] += p * dyr[j];
            }
            datt[s] = d;
            dot_sum += p * d;
          }
          const T* qr = bc.q.row(b * S + t) + h * dh;
          T* dqr = dq.row(b * S + t) + h * dh;
          for (std::size_t s = 0; s <= t; ++s) {
            const T ds = att[t * S + s] * (datt[s] - dot_sum) * scale;
            if (ds == T(0)) continue;
            const T* kr = bc.k.row(b * S + s) + h * dh;
            T* dkr = dk.row(b * S + s) + h * dh;
            for (std::size_t j = 0; j < dh; ++j) {
              dqr[j] += ds * kr[j];
              dkr[j] += ds * qr[j];
            }
          }
        }
      }
    if (auto* gw = g(bl.q)) matmul_at_acc(bc.h1, dq, *gw);
    if (auto* gw = g(bl.k)) matmul_at_acc(bc.h1, dk, *gw);
    if (auto* gw = g(bl.v)) matmul_at_acc(bc.h1, dv, *gw);
    if (!below(bl.q)) return value;
    Matrix<T> dh1;
    matmul_bt(dq, *W[bl.q], dh1, false);
    matmul_bt(dk, *W[bl.k], dh1, true);
    matmul_bt(dv, *W[bl.v], dh1, true);
    detail::layer_norm_backward(dh1, bc.ln1_hat, bc.ln1_rstd, *W[bl.ln1_gain], g(bl.ln1_gain), g(bl.ln1_bias),
                                below(bl.ln1_gain) ? &dx : nullptr);
    if (!below(bl.ln1_gain)) return value;
  }

  if (auto* ge = g(L.embed))
    for (std::size_t r = 0; r < N; ++r) {
      T* er = ge->row(static_cast<std::size_t>(c.tokens.ids[r]));
      const T* dr = dx.row(r);
      for (std::size_t j = 0; j < D; ++j) er[j] += dr[j];
    }
  if (auto* gp = g(L.pos_embed))
    for (std::size_t r = 0; r < N; ++r) {
      T* pr = gp->row(r % S);
      const T* dr = dx.row(r);
      for (std::size_t j = 0; j < D; ++j) pr[j] += dr[j];
    }
  return value;
}

/// Convenience form returning a fresh GradientSet.
template <typename T>
std::pair<double, GradientSet<T>> backward(const ModelState<T>& model, const ForwardCache<T>& c,
                                           const LossSpec& loss, ParamSubset subset,
                                           const WeightOverlay<T>* overlay = nullptr) {
  GradientSet<T> grads;
  const double v = backward(model, c, loss, subset, grads, overlay);
  return {v, std::move(grads)};
}

/// Mean next-token cross-entropy without any gradient work.
template <typename T>
double lm_loss(const ModelState<T>& model, const TokenBatch& batch, const WeightOverlay<T>* overlay = nullptr) {
  const auto c = forward(model, batch, overlay);
  return loss_and_dlogits<T>(c, LossSpec{}, nullptr);
}

/// Parameter names of one role across all blocks, e.g. "mlp.gate".
inline std::vector<std::string> block_params_named(const ArchSpec& arch, const std::string& leaf) {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < arch.n_blocks; ++b) out.push_back(block_param(b, leaf.c_str()));
  return out;
}

/// The first MLP matrix of every block: gate (gated) or up (plain).
inline InterventionSet default_intervention(const ArchSpec& arch) {
  return InterventionSet(block_params_named(arch, arch.mlp_kind == MlpKind::gated ? "mlp.gate" : "mlp.up"));
}

}  // namespace mudman
