#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hawkes/autodiff.hpp"
#include "hawkes/eventseq.hpp"
#include "hawkes/rng.hpp"
#include "hawkes/trainer.hpp"

namespace hawkes {

// Attention-parameterized additive Hawkes model. Every event embeds through
// two small MLPs; masked self-attention over strictly earlier events drives
// per-pair kernel weights alpha_{i,j}, decay rates gamma_{i,j}, and an
// instance-specific background, keeping the intensity additive over history:
//
//   lambda(x_i, t) = mu(x_i) + sum_{j: t_j < t_i} alpha_ij gamma_ij e^{-gamma_ij (t - t_j)}
//
// Within the interval (t_{i-1}, t_i] the candidate embedding is a function of
// the interval's dt and the target type only, so all head outputs are
// constants in t and the compensator integrates in closed form.

struct IsahpConfig {
  enum class CompensatorMode { AllTypes, ObservedType };

  int K = 1;
  int embed_dim = 10;   // M
  int value_dim = 10;   // M_V
  int heads = 2;        // H
  int hidden = 10;      // width of both embedding MLPs
  double omega1 = 0.025;  // L1 strength on type-pair mean alpha
  double omega2 = 0.25;   // variance regularization strength
  CompensatorMode compensator_mode = CompensatorMode::AllTypes;
  double gamma_floor = 1e-4;

  void validate() const {
    if (K < 1 || embed_dim < 1 || value_dim < 1 || heads < 1 || hidden < 1)
      throw ValidationError("IsahpConfig: all dimensions must be >= 1");
    if (omega1 < 0.0 || omega2 < 0.0)
      throw ValidationError("IsahpConfig: omega1/omega2 must be >= 0");
    if (!(gamma_floor > 0.0)) throw ValidationError("IsahpConfig: gamma_floor must be > 0");
  }
};

struct IsahpParams {
  IsahpConfig cfg;
  ad::ParamStore store;
  double dt_scale = 1.0;  // mean inter-event time of the training data

  static IsahpParams init(const IsahpConfig& cfg, std::uint64_t seed,
                          const std::vector<double>& type_rates = {},
                          double dt_scale = 1.0) {
    cfg.validate();
    IsahpParams p;
    p.cfg = cfg;
    p.dt_scale = dt_scale > 0.0 ? dt_scale : 1.0;
    Rng rng(seed ^ 0x15a42bd5u);

    const auto K = static_cast<std::size_t>(cfg.K);
    const auto M = static_cast<std::size_t>(cfg.embed_dim);
    const auto MV = static_cast<std::size_t>(cfg.value_dim);
    const auto H = static_cast<std::size_t>(cfg.hidden);

    auto uniform_block = [&rng](std::size_t n, double scale) {
      std::vector<double> v(n);
      for (auto& x : v) x = rng.uniform(-scale, scale);
      return v;
    };
    auto fan_scale = [](std::size_t fan_in) {
      return 1.0 / std::sqrt(static_cast<double>(fan_in));
    };

    auto& s = p.store;
    s.add("type_w1", {H, K}, uniform_block(H * K, fan_scale(K)));
    s.add("type_b1", {H}, 0.0);
    s.add("type_w2", {H, H}, uniform_block(H * H, fan_scale(H)));
    s.add("type_b2", {H}, 0.0);
    s.add("emb_w1", {H, H + 1}, uniform_block(H * (H + 1), fan_scale(H + 1)));
    s.add("emb_b1", {H}, 0.0);
    s.add("emb_w2", {M, H}, uniform_block(M * H, fan_scale(H)));
    s.add("emb_b2", {M}, 0.0);
    s.add("value_w", {MV, M}, uniform_block(MV * M, fan_scale(M)));

    const double attn_scale = fan_scale(M);
    for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h)
      s.add("attn_k_" + std::to_string(h), {M, M}, uniform_block(M * M, attn_scale));

    s.add("head_mu_w", {K, MV}, uniform_block(K * MV, attn_scale));
    s.add("head_alpha_w", {K, MV}, uniform_block(K * MV, attn_scale));
    s.add("head_gamma_w", {K, MV}, uniform_block(K * MV, attn_scale));
    s.add("head_gamma_b", {K}, softplus_inv(1.0));

    std::vector<double> mu0(K, softplus_inv(0.1));
    for (std::size_t k = 0; k < K && k < type_rates.size(); ++k)
      mu0[k] = softplus_inv(std::max(type_rates[k], 1e-4));
    s.add("base_mu_raw", {K}, mu0);
    return p;
  }

  double base_mu(int k) const {
    return softplus(store.at("base_mu_raw").values[static_cast<std::size_t>(k)]);
  }
};

// Mean inter-event gap (first events measured from 0) over a set of
// sequences; used to standardize the embedding's dt input.
inline double mean_interevent_time(const Dataset& ds,
                                   std::span<const std::size_t> subset = {}) {
  double total = 0.0;
  std::size_t n = 0;
  auto accumulate = [&](const EventSequence& s) {
    double prev = 0.0;
    for (const auto& e : s.events()) {
      total += e.t - prev;
      prev = e.t;
      ++n;
    }
  };
  if (subset.empty())
    for (const auto& s : ds.sequences()) accumulate(s);
  else
    for (std::size_t i : subset) accumulate(ds[i]);
  return n > 0 ? total / static_cast<double>(n) : 1.0;
}

// ---------------------------------------------------------------------------
// Plain (non-tape) evaluation path. Used for attribution, prediction, and as
// the reference the tape path is tested against.

namespace detail {

inline void affine_gelu(const std::vector<double>& w, const std::vector<double>& b,
                        std::span<const double> in, std::vector<double>& out) {
  const std::size_t rows = b.size();
  const std::size_t cols = in.size();
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = b[r];
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * in[c];
    out[r] = gelu(s);
  }
}

inline void affine(const std::vector<double>& w, const std::vector<double>& b,
                   std::span<const double> in, std::vector<double>& out) {
  const std::size_t rows = b.size();
  const std::size_t cols = in.size();
  out.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = b[r];
    const double* wr = w.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) s += wr[c] * in[c];
    out[r] = s;
  }
}

}  // namespace detail

// Embedding g(dt, k): one-hot type through the type MLP, concatenated with
// the standardized time gap, through the outer MLP.
inline std::vector<double> isahp_type_embedding(const IsahpParams& P, int k) {
  const auto& s = P.store;
  const auto K = static_cast<std::size_t>(P.cfg.K);
  std::vector<double> onehot(K, 0.0);
  onehot[static_cast<std::size_t>(k)] = 1.0;
  std::vector<double> hidden, out;
  detail::affine_gelu(s.at("type_w1").values, s.at("type_b1").values, onehot, hidden);
  detail::affine(s.at("type_w2").values, s.at("type_b2").values, hidden, out);
  return out;
}

inline std::vector<double> isahp_embed_dt(const IsahpParams& P, double dt,
                                          const std::vector<double>& type_emb) {
  const auto& s = P.store;
  std::vector<double> cat(type_emb.size() + 1);
  cat[0] = dt / P.dt_scale;
  for (std::size_t i = 0; i < type_emb.size(); ++i) cat[i + 1] = type_emb[i];
  std::vector<double> hidden, out;
  detail::affine_gelu(s.at("emb_w1").values, s.at("emb_b1").values, cat, hidden);
  detail::affine(s.at("emb_w2").values, s.at("emb_b2").values, hidden, out);
  return out;
}

inline double event_dt(const EventSequence& seq, std::size_t i) {
  return i == 0 ? seq[0].t : seq[i].t - seq[i - 1].t;
}

inline std::vector<double> embed(const IsahpParams& P, const EventSequence& seq,
                                 std::size_t i, std::optional<int> k_override = {}) {
  if (i >= seq.size()) throw ValidationError("embed: event index out of range");
  const int k = k_override.value_or(seq[i].k);
  if (k < 0 || k >= P.cfg.K) throw ValidationError("embed: type out of range");
  return isahp_embed_dt(P, event_dt(seq, i), isahp_type_embedding(P, k));
}

// Per-head L x L attention over the given embeddings: row i holds weights
// over strictly earlier events, log-sum-exp stabilized; rows with no earlier
// event are all zero.
inline std::vector<Matrix> attention(const IsahpParams& P,
                                     const std::vector<std::vector<double>>& embeds,
                                     const std::vector<double>& timestamps) {
  if (embeds.size() != timestamps.size())
    throw ValidationError("attention: embeddings/timestamps misaligned");
  const std::size_t L = embeds.size();
  const auto M = static_cast<std::size_t>(P.cfg.embed_dim);
  std::vector<Matrix> out;
  for (int h = 0; h < P.cfg.heads; ++h) {
    const auto& K_h = P.store.at("attn_k_" + std::to_string(h)).values;
    Matrix A(L, L, 0.0);
    std::vector<double> y(M);
    for (std::size_t i = 0; i < L; ++i) {
      // y = K_h^T x_i
      for (std::size_t c = 0; c < M; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < M; ++r) s += K_h[r * M + c] * embeds[i][r];
        y[c] = s;
      }
      double max_logit = -std::numeric_limits<double>::infinity();
      std::vector<double> logits(L, 0.0);
      for (std::size_t j = 0; j < L; ++j) {
        if (!(timestamps[j] < timestamps[i])) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < M; ++c) s += y[c] * embeds[j][c];
        logits[j] = s;
        max_logit = std::max(max_logit, s);
      }
      if (!std::isfinite(max_logit)) continue;  // empty history
      double z = 0.0;
      for (std::size_t j = 0; j < L; ++j)
        if (timestamps[j] < timestamps[i]) z += std::exp(logits[j] - max_logit);
      for (std::size_t j = 0; j < L; ++j)
        if (timestamps[j] < timestamps[i])
          A(i, j) = std::exp(logits[j] - max_logit) / z;
    }
    out.push_back(std::move(A));
  }
  return out;
}

// All per-event, per-candidate-type quantities for one sequence. Indexing is
// flat: slot(i, k) = i * K + k.
struct SequenceForward {
  const EventSequence* seq = nullptr;
  std::size_t L = 0;
  int K = 0;
  std::vector<double> timestamps;
  std::vector<std::vector<double>> type_emb;   // K type-MLP outputs
  std::vector<std::vector<double>> x_cand;     // (i,k) -> M-vector; x_i = x_cand(i, k_i)
  std::vector<std::vector<double>> values;     // L value vectors
  std::vector<Matrix> attn_heads;              // per head, L x L, observed embeddings
  std::vector<std::vector<double>> attn_cand;  // (i,k) -> head-averaged weights over j
  std::vector<std::vector<double>> alpha_cand; // (i,k) -> alpha_{i,j} per j < i
  std::vector<std::vector<double>> gamma_cand; // (i,k) -> gamma_{i,j} per j < i
  std::vector<double> mu_cand;                 // (i,k) -> background intensity

  std::size_t slot(std::size_t i, int k) const {
    return i * static_cast<std::size_t>(K) + static_cast<std::size_t>(k);
  }
};

inline SequenceForward isahp_forward(const IsahpParams& P, const EventSequence& seq) {
  P.cfg.validate();
  SequenceForward f;
  f.seq = &seq;
  f.L = seq.size();
  f.K = P.cfg.K;
  const auto K = static_cast<std::size_t>(P.cfg.K);
  const auto H = static_cast<std::size_t>(P.cfg.heads);
  const auto M = static_cast<std::size_t>(P.cfg.embed_dim);
  const auto MV = static_cast<std::size_t>(P.cfg.value_dim);

  f.timestamps.resize(f.L);
  for (std::size_t i = 0; i < f.L; ++i) f.timestamps[i] = seq[i].t;

  for (std::size_t k = 0; k < K; ++k)
    f.type_emb.push_back(isahp_type_embedding(P, static_cast<int>(k)));

  f.x_cand.resize(f.L * K);
  for (std::size_t i = 0; i < f.L; ++i) {
    const double dt = event_dt(seq, i);
    for (std::size_t k = 0; k < K; ++k)
      f.x_cand[f.slot(i, static_cast<int>(k))] = isahp_embed_dt(P, dt, f.type_emb[k]);
  }

  const auto& value_w = P.store.at("value_w").values;
  f.values.resize(f.L);
  for (std::size_t j = 0; j < f.L; ++j) {
    const auto& xj = f.x_cand[f.slot(j, seq[j].k)];
    f.values[j].assign(MV, 0.0);
    for (std::size_t r = 0; r < MV; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < M; ++c) s += value_w[r * M + c] * xj[c];
      f.values[j][r] = s;
    }
  }

  // Observed-embedding attention (the spec-level L x L view).
  {
    std::vector<std::vector<double>> obs;
    for (std::size_t i = 0; i < f.L; ++i) obs.push_back(f.x_cand[f.slot(i, seq[i].k)]);
    f.attn_heads = attention(P, obs, f.timestamps);
  }

  // Candidate attention rows, head-averaged.
  const auto& mu_w = P.store.at("head_mu_w").values;
  const auto& al_w = P.store.at("head_alpha_w").values;
  const auto& ga_w = P.store.at("head_gamma_w").values;
  const auto& ga_b = P.store.at("head_gamma_b").values;
  const auto& mu_raw = P.store.at("base_mu_raw").values;

  // dot(head row k, v_j) reused across target events
  std::vector<double> d_alpha(f.L * K, 0.0), d_gamma(f.L * K, 0.0);
  for (std::size_t j = 0; j < f.L; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      double sa = 0.0, sg = 0.0;
      for (std::size_t c = 0; c < MV; ++c) {
        sa += al_w[k * MV + c] * f.values[j][c];
        sg += ga_w[k * MV + c] * f.values[j][c];
      }
      d_alpha[j * K + k] = sa;
      d_gamma[j * K + k] = sg;
    }

  f.attn_cand.resize(f.L * K);
  f.alpha_cand.resize(f.L * K);
  f.gamma_cand.resize(f.L * K);
  f.mu_cand.resize(f.L * K, 0.0);

  std::vector<double> y(M), logits;
  for (std::size_t i = 0; i < f.L; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t sl = f.slot(i, static_cast<int>(k));
      const auto& xc = f.x_cand[sl];
      std::vector<double> avg(i, 0.0);
      bool any_valid = false;
      for (std::size_t h = 0; h < H; ++h) {
        const auto& K_h = P.store.at("attn_k_" + std::to_string(h)).values;
        for (std::size_t c = 0; c < M; ++c) {
          double s = 0.0;
          for (std::size_t r = 0; r < M; ++r) s += K_h[r * M + c] * xc[r];
          y[c] = s;
        }
        logits.assign(i, 0.0);
        double max_logit = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < i; ++j) {
          if (!(f.timestamps[j] < f.timestamps[i])) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < M; ++c) s += y[c] * f.x_cand[f.slot(j, seq[j].k)][c];
          logits[j] = s;
          max_logit = std::max(max_logit, s);
        }
        if (!std::isfinite(max_logit)) continue;
        any_valid = true;
        double z = 0.0;
        for (std::size_t j = 0; j < i; ++j)
          if (f.timestamps[j] < f.timestamps[i]) z += std::exp(logits[j] - max_logit);
        for (std::size_t j = 0; j < i; ++j)
          if (f.timestamps[j] < f.timestamps[i])
            avg[j] += std::exp(logits[j] - max_logit) / z / static_cast<double>(H);
      }
      f.attn_cand[sl] = avg;

      // Pair heads over valid prior events.
      f.alpha_cand[sl].assign(i, 0.0);
      f.gamma_cand[sl].assign(i, 0.0);
      for (std::size_t j = 0; j < i; ++j) {
        if (!(f.timestamps[j] < f.timestamps[i])) continue;
        const double a = avg[j];
        f.alpha_cand[sl][j] = softplus(a * d_alpha[j * K + k]);
        f.gamma_cand[sl][j] =
            std::max(softplus(a * d_gamma[j * K + k] + ga_b[k]), P.cfg.gamma_floor);
      }

      // Background: base rate plus squashed context response.
      double ctx_dot = 0.0;
      if (any_valid) {
        std::vector<double> ctx(MV, 0.0);
        for (std::size_t j = 0; j < i; ++j) {
          const double w = avg[j];
          if (w == 0.0) continue;
          for (std::size_t c = 0; c < MV; ++c) ctx[c] += w * f.values[j][c];
        }
        for (std::size_t c = 0; c < MV; ++c) ctx_dot += mu_w[k * MV + c] * ctx[c];
      }
      f.mu_cand[sl] = softplus(mu_raw[k]) + sigmoid(ctx_dot);
    }
  }
  return f;
}

// Pair head outputs (alpha, gamma) for candidate type k at pair (i, j).
inline std::pair<double, double> heads(const SequenceForward& f, std::size_t i,
                                       std::size_t j, int k) {
  if (!(j < i) || !(f.timestamps[j] < f.timestamps[i]))
    throw ValidationError("heads: pair (i, j) is masked");
  const std::size_t sl = f.slot(i, k);
  return {f.alpha_cand[sl][j], f.gamma_cand[sl][j]};
}

inline double background(const SequenceForward& f, std::size_t i, int k) {
  return f.mu_cand[f.slot(i, k)];
}

// Intensity of candidate type k inside the interval (t_{i-1}, t_i].
inline double intensity(const SequenceForward& f, std::size_t i, int k, double t) {
  const std::size_t sl = f.slot(i, k);
  double lam = f.mu_cand[sl];
  for (std::size_t j = 0; j < i; ++j) {
    if (!(f.timestamps[j] < f.timestamps[i])) continue;
    const double a = f.alpha_cand[sl][j];
    const double g = f.gamma_cand[sl][j];
    lam += a * g * std::exp(-g * (t - f.timestamps[j]));
  }
  return lam;
}

// Closed-form integral of candidate type k's intensity over (t_a, t_b],
// where (t_a, t_b] lies inside the i-th inter-event interval.
inline double interval_compensator(const SequenceForward& f, std::size_t i, int k,
                                   double t_a, double t_b) {
  const std::size_t sl = f.slot(i, k);
  double comp = f.mu_cand[sl] * (t_b - t_a);
  for (std::size_t j = 0; j < i; ++j) {
    if (!(f.timestamps[j] < f.timestamps[i])) continue;
    const double a = f.alpha_cand[sl][j];
    const double g = f.gamma_cand[sl][j];
    comp += a * (std::exp(-g * (t_a - f.timestamps[j])) -
                 std::exp(-g * (t_b - f.timestamps[j])));
  }
  return comp;
}

// Negative log-likelihood of one sequence, compensator in closed form.
inline double sequence_nll(const IsahpParams& P, const EventSequence& seq) {
  if (seq.empty()) throw ValidationError("sequence_nll: empty sequence");
  SequenceForward f = isahp_forward(P, seq);
  const auto K = static_cast<std::size_t>(P.cfg.K);
  const bool all_types =
      P.cfg.compensator_mode == IsahpConfig::CompensatorMode::AllTypes;

  double nll = 0.0;
  for (std::size_t i = 0; i < f.L; ++i) {
    const double t_i = f.timestamps[i];
    const double t_prev = i == 0 ? 0.0 : f.timestamps[i - 1];

    const double lam = intensity(f, i, seq[i].k, t_i);
    if (!(lam > 0.0) || !std::isfinite(lam))
      throw NumericError("sequence_nll: non-positive intensity in '" + seq.seq_id() +
                         "' at event " + std::to_string(i));
    nll -= std::log(lam);

    for (std::size_t k = 0; k < K; ++k) {
      if (!all_types && static_cast<int>(k) != seq[i].k) continue;
      nll += interval_compensator(f, i, static_cast<int>(k), t_prev, t_i);
    }
  }
  return nll;
}

// Candidate intensities at the event's own timestamp; argmax is the type
// prediction, ties toward the smaller index.
inline int isahp_predict_type(const SequenceForward& f, std::size_t i) {
  int best = 0;
  double best_lam = -1.0;
  for (int k = 0; k < f.K; ++k) {
    const double lam = intensity(f, i, k, f.timestamps[i]);
    if (lam > best_lam) {
      best_lam = lam;
      best = k;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tape path: the training objective (NLL + type-level regularization).

struct IsahpSequenceGraph {
  ad::Value nll;
  // Observed-type pair kernels alpha_{i,j}^s for the batch-level regularizer.
  struct PairAlpha {
    int k_i;
    int k_j;
    ad::Value alpha;
  };
  std::vector<PairAlpha> pair_alphas;
};

inline IsahpSequenceGraph build_isahp_sequence_graph(ad::Tape& tape, const IsahpParams& P,
                                                     const EventSequence& seq) {
  using ad::Value;
  if (seq.empty()) throw ValidationError("build_isahp_sequence_graph: empty sequence");
  const auto K = static_cast<std::size_t>(P.cfg.K);
  const auto H = static_cast<std::size_t>(P.cfg.heads);
  const auto M = static_cast<std::size_t>(P.cfg.embed_dim);
  const auto MV = static_cast<std::size_t>(P.cfg.value_dim);
  const std::size_t L = seq.size();
  const bool all_types =
      P.cfg.compensator_mode == IsahpConfig::CompensatorMode::AllTypes;

  Value type_w1 = tape.leaf("type_w1"), type_b1 = tape.leaf("type_b1");
  Value type_w2 = tape.leaf("type_w2"), type_b2 = tape.leaf("type_b2");
  Value emb_w1 = tape.leaf("emb_w1"), emb_b1 = tape.leaf("emb_b1");
  Value emb_w2 = tape.leaf("emb_w2"), emb_b2 = tape.leaf("emb_b2");
  Value value_w = tape.leaf("value_w");
  std::vector<Value> attn_k;
  for (std::size_t h = 0; h < H; ++h) attn_k.push_back(tape.leaf("attn_k_" + std::to_string(h)));
  Value mu_w = tape.leaf("head_mu_w");
  Value al_w = tape.leaf("head_alpha_w");
  Value ga_w = tape.leaf("head_gamma_w");
  Value ga_b = tape.leaf("head_gamma_b");
  Value base_mu = tape.softplus(tape.leaf("base_mu_raw"));

  // Type embeddings (K of them).
  std::vector<Value> type_emb(K);
  for (std::size_t k = 0; k < K; ++k) {
    Value hidden = tape.gelu(tape.add(tape.col(type_w1, k, K), type_b1));
    type_emb[k] = tape.add(tape.matvec(type_w2, hidden), type_b2);
  }

  // Candidate embeddings per (i, k); observed embedding is the k_i slot.
  auto slot = [K](std::size_t i, std::size_t k) { return i * K + k; };
  std::vector<Value> x_cand(L * K);
  for (std::size_t i = 0; i < L; ++i) {
    const double dt_std = event_dt(seq, i) / P.dt_scale;
    Value dt_node = tape.constant(dt_std);
    for (std::size_t k = 0; k < K; ++k) {
      Value cat = tape.concat(dt_node, type_emb[k]);
      Value hidden = tape.gelu(tape.add(tape.matvec(emb_w1, cat), emb_b1));
      x_cand[slot(i, k)] = tape.add(tape.matvec(emb_w2, hidden), emb_b2);
    }
  }

  std::vector<Value> values(L);
  for (std::size_t j = 0; j < L; ++j)
    values[j] = tape.matvec(value_w, x_cand[slot(j, static_cast<std::size_t>(seq[j].k))]);

  // Incrementally stacked prior embeddings; X_stack[i] has length i*M.
  std::vector<Value> x_stack(L + 1);
  for (std::size_t i = 1; i <= L; ++i) {
    Value xi = x_cand[slot(i - 1, static_cast<std::size_t>(seq[i - 1].k))];
    x_stack[i] = i == 1 ? xi : tape.concat(x_stack[i - 1], xi);
  }

  // Head-row dot products with each value vector, shared across targets.
  std::vector<Value> mu_row(K), al_row(K), ga_row(K);
  for (std::size_t k = 0; k < K; ++k) {
    mu_row[k] = tape.row(mu_w, k, MV);
    al_row[k] = tape.row(al_w, k, MV);
    ga_row[k] = tape.row(ga_w, k, MV);
  }
  std::vector<Value> d_alpha(L * K), d_gamma(L * K);
  for (std::size_t j = 0; j < L; ++j)
    for (std::size_t k = 0; k < K; ++k) {
      d_alpha[slot(j, k)] = tape.dot(al_row[k], values[j]);
      d_gamma[slot(j, k)] = tape.dot(ga_row[k], values[j]);
    }

  IsahpSequenceGraph graph;
  Value nll = tape.constant(0.0);

  std::vector<std::uint8_t> mask;
  for (std::size_t i = 0; i < L; ++i) {
    const double t_i = seq[i].t;
    const double t_prev = i == 0 ? 0.0 : seq[i - 1].t;
    const auto k_obs = static_cast<std::size_t>(seq[i].k);

    mask.assign(i, 0);
    bool any_valid = false;
    for (std::size_t j = 0; j < i; ++j)
      if (seq[j].t < t_i) {
        mask[j] = 1;
        any_valid = true;
      }

    for (std::size_t k = 0; k < K; ++k) {
      const bool need_candidate = all_types || k == k_obs;
      if (!need_candidate) continue;
      const std::size_t sl = slot(i, k);

      // Head-averaged attention row over prior events.
      Value attn_avg;
      if (any_valid) {
        Value acc;
        for (std::size_t h = 0; h < H; ++h) {
          Value y = tape.matvec_t(attn_k[h], x_cand[sl]);
          Value logits = tape.matvec(x_stack[i], y);
          Value sm = tape.masked_softmax(logits, mask);
          acc = h == 0 ? sm : tape.add(acc, sm);
        }
        attn_avg = H == 1 ? acc : tape.scale(acc, 1.0 / static_cast<double>(H));
      }

      // Background intensity.
      Value mu;
      {
        Value second;
        if (any_valid) {
          std::span<const Value> vj(values.data(), i);
          Value ctx = tape.weighted_sum(attn_avg, vj);
          second = tape.sigmoid(tape.dot(mu_row[k], ctx));
        } else {
          second = tape.constant(0.5);  // sigmoid(0) under the zero-context rule
        }
        mu = tape.add(tape.pick(base_mu, k), second);
      }

      // Pair kernels and the interval compensator.
      Value comp = tape.scale(mu, t_i - t_prev);
      Value lam;  // only for the observed candidate
      if (k == k_obs) lam = mu;
      for (std::size_t j = 0; j < i; ++j) {
        if (!mask[j]) continue;
        Value a_ij = tape.pick(attn_avg, j);
        Value alpha = tape.softplus(tape.mul(a_ij, d_alpha[slot(j, k)]));
        Value gamma = tape.clamp_min(
            tape.softplus(tape.add(tape.mul(a_ij, d_gamma[slot(j, k)]), tape.pick(ga_b, k))),
            P.cfg.gamma_floor);
        const double tj = seq[j].t;
        Value decay_prev = tape.exp(tape.scale(gamma, -(t_prev - tj)));
        Value decay_cur = tape.exp(tape.scale(gamma, -(t_i - tj)));
        comp = tape.add(comp, tape.mul(alpha, tape.sub(decay_prev, decay_cur)));
        if (k == k_obs) {
          lam = tape.add(lam, tape.mul(tape.mul(alpha, gamma), decay_cur));
          graph.pair_alphas.push_back({seq[i].k, seq[j].k, alpha});
        }
      }
      nll = tape.add(nll, comp);
      if (k == k_obs) nll = tape.sub(nll, tape.log(lam));
    }
  }
  graph.nll = nll;
  return graph;
}

// Full training objective over a batch: sum of sequence NLLs plus the
// type-level regularizer, with per-pair means and variances taken over the
// batch. Type pairs absent from the batch contribute nothing.
inline ad::Value build_isahp_total_loss(ad::Tape& tape, const IsahpParams& P,
                                        const Dataset& ds,
                                        std::span<const std::size_t> batch) {
  using ad::Value;
  if (batch.empty()) throw ValidationError("build_isahp_total_loss: empty batch");
  const auto K = static_cast<std::size_t>(P.cfg.K);

  Value total;
  bool first = true;
  std::vector<std::vector<Value>> groups(K * K);
  for (std::size_t s : batch) {
    IsahpSequenceGraph g = build_isahp_sequence_graph(tape, P, ds[s]);
    total = first ? g.nll : tape.add(total, g.nll);
    first = false;
    for (const auto& pa : g.pair_alphas)
      groups[static_cast<std::size_t>(pa.k_i) * K + static_cast<std::size_t>(pa.k_j)]
          .push_back(pa.alpha);
  }

  if (P.cfg.omega1 > 0.0 || P.cfg.omega2 > 0.0) {
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const auto& alphas = groups[g];
      if (alphas.empty()) continue;
      const double inv_n = 1.0 / static_cast<double>(alphas.size());
      Value sum;
      for (std::size_t p = 0; p < alphas.size(); ++p)
        sum = p == 0 ? alphas[p] : tape.add(sum, alphas[p]);
      Value mean = tape.scale(sum, inv_n);
      if (P.cfg.omega1 > 0.0)
        total = tape.add(total, tape.scale(tape.abs(mean), P.cfg.omega1));
      if (P.cfg.omega2 > 0.0) {
        Value var_sum;
        for (std::size_t p = 0; p < alphas.size(); ++p) {
          Value d = tape.sub(alphas[p], mean);
          Value sq = tape.mul(d, d);
          var_sum = p == 0 ? sq : tape.add(var_sum, sq);
        }
        total = tape.add(total, tape.scale(var_sum, P.cfg.omega2 * inv_n));
      }
    }
  }
  return total;
}

// Plain value of the same objective (for reporting and tests).
inline double isahp_total_loss_value(const IsahpParams& P, const Dataset& ds,
                                     std::span<const std::size_t> batch) {
  const auto K = static_cast<std::size_t>(P.cfg.K);
  double total = 0.0;
  std::vector<std::vector<double>> groups(K * K);
  for (std::size_t s : batch) {
    const auto& seq = ds[s];
    total += sequence_nll(P, seq);
    SequenceForward f = isahp_forward(P, seq);
    for (std::size_t i = 0; i < f.L; ++i) {
      const std::size_t sl = f.slot(i, seq[i].k);
      for (std::size_t j = 0; j < i; ++j) {
        if (!(f.timestamps[j] < f.timestamps[i])) continue;
        groups[static_cast<std::size_t>(seq[i].k) * K +
               static_cast<std::size_t>(seq[j].k)]
            .push_back(f.alpha_cand[sl][j]);
      }
    }
  }
  for (const auto& alphas : groups) {
    if (alphas.empty()) continue;
    double mean = 0.0;
    for (double a : alphas) mean += a;
    mean /= static_cast<double>(alphas.size());
    double var = 0.0;
    for (double a : alphas) var += (a - mean) * (a - mean);
    var /= static_cast<double>(alphas.size());
    total += P.cfg.omega1 * std::abs(mean) + P.cfg.omega2 * var;
  }
  return total;
}

struct IsahpFitResult {
  IsahpParams params;
  TrainReport report;
};

inline IsahpFitResult fit_isahp(const Dataset& ds, const Split& split, IsahpConfig cfg,
                                const TrainConfig& tc) {
  cfg.K = ds.K();
  std::vector<double> rates;
  {
    std::vector<EventSequence> train_seqs;
    for (std::size_t i : split.train) train_seqs.push_back(ds[i]);
    rates = Dataset(std::move(train_seqs), ds.K()).empirical_rates();
  }
  IsahpParams params =
      IsahpParams::init(cfg, tc.seed, rates, mean_interevent_time(ds, split.train));

  BatchLossBuilder builder = [&params, &ds](ad::Tape& tape,
                                            std::span<const std::size_t> batch) {
    return build_isahp_total_loss(tape, params, ds, batch);
  };
  TrainReport report = train(params.store, ds, split, tc, builder);
  return {std::move(params), std::move(report)};
}

}  // namespace hawkes
