#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hawkes/autodiff.hpp"
#include "hawkes/eventseq.hpp"
#include "hawkes/simulate.hpp"
#include "hawkes/trainer.hpp"

namespace hawkes {

// Classical exponential-kernel multivariate Hawkes baseline, fitted by
// gradient MLE. Parameters are stored unconstrained and decoded through
// softplus, which keeps mu/alpha nonnegative and gamma positive.

struct HexpConfig {
  bool freeze_gamma = false;  // freeze all decays at gamma_init (classical HExp)
  double gamma_init = 1.0;

  void validate() const {
    if (!(gamma_init > 0.0)) throw ValidationError("HexpConfig: gamma_init must be > 0");
  }
};

namespace detail {
// softplus_inv extended to 0 (exp(-750) underflows, so the raw decodes to
// exactly 0.0).
inline double softplus_inv_or_zero(double y) {
  return y <= 0.0 ? -750.0 : softplus_inv(y);
}
}  // namespace detail

class HexpModel {
 public:
  explicit HexpModel(int K, HexpConfig cfg = {}) : K_(K), cfg_(cfg) {
    if (K < 1) throw ValidationError("HexpModel: K must be >= 1");
    cfg_.validate();
    const auto k = static_cast<std::size_t>(K);
    store_.add("mu_raw", {k}, softplus_inv(0.01));
    store_.add("alpha_raw", {k, k}, softplus_inv(0.01));
    store_.add("gamma_raw", {k, k}, softplus_inv(cfg.gamma_init));
  }

  // Near-Poisson start: mu at the empirical per-type rates, small kernel.
  static HexpModel init_for(const Dataset& ds, HexpConfig cfg = {},
                            std::span<const std::size_t> subset = {}) {
    HexpModel m(ds.K(), cfg);
    std::vector<double> rates;
    if (subset.empty()) {
      rates = ds.empirical_rates();
    } else {
      std::vector<EventSequence> seqs;
      for (std::size_t i : subset) seqs.push_back(ds[i]);
      rates = Dataset(std::move(seqs), ds.K()).empirical_rates();
    }
    auto& mu = m.store_.at("mu_raw").values;
    for (std::size_t k = 0; k < mu.size(); ++k) mu[k] = softplus_inv(rates[k]);
    return m;
  }

  int K() const { return K_; }
  const HexpConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return store_; }
  const ad::ParamStore& params() const { return store_; }

  void set_from(const MHPParams& p) {
    p.validate();
    if (p.K() != K_) throw ValidationError("HexpModel::set_from: K mismatch");
    auto& mu = store_.at("mu_raw").values;
    auto& al = store_.at("alpha_raw").values;
    auto& ga = store_.at("gamma_raw").values;
    for (int k = 0; k < K_; ++k) mu[static_cast<std::size_t>(k)] =
        detail::softplus_inv_or_zero(p.mu[static_cast<std::size_t>(k)]);
    for (std::size_t i = 0; i < al.size(); ++i) {
      al[i] = detail::softplus_inv_or_zero(p.alpha.storage()[i]);
      ga[i] = softplus_inv(p.gamma.storage()[i]);
    }
  }

  MHPParams decoded() const {
    MHPParams p;
    const auto k = static_cast<std::size_t>(K_);
    p.mu.resize(k);
    p.alpha = Matrix(k, k);
    p.gamma = Matrix(k, k);
    const auto& mu = store_.at("mu_raw").values;
    const auto& al = store_.at("alpha_raw").values;
    const auto& ga = store_.at("gamma_raw").values;
    for (std::size_t i = 0; i < k; ++i) p.mu[i] = softplus(mu[i]);
    for (std::size_t i = 0; i < k * k; ++i) {
      p.alpha.storage()[i] = softplus(al[i]);
      p.gamma.storage()[i] =
          cfg_.freeze_gamma ? cfg_.gamma_init : softplus(ga[i]);
    }
    return p;
  }

 private:
  int K_;
  HexpConfig cfg_;
  ad::ParamStore store_;
};

// ---------------------------------------------------------------------------
// Likelihood. The compensator is closed-form: event j contributes
// (alpha/gamma)(1 - exp(-gamma (T - t_j))) to each target type's integral.

// Intensities of all K types at time t given the events strictly before t.
inline std::vector<double> hexp_intensities(const MHPParams& p, const EventSequence& seq,
                                            double t) {
  const auto K = static_cast<std::size_t>(p.K());
  std::vector<double> lam(p.mu);
  for (const auto& e : seq.events()) {
    if (!(e.t < t)) break;
    const auto kj = static_cast<std::size_t>(e.k);
    for (std::size_t k = 0; k < K; ++k)
      lam[k] += p.alpha(k, kj) * std::exp(-p.gamma(k, kj) * (t - e.t));
  }
  return lam;
}

inline double hexp_seq_nll(const MHPParams& p, const EventSequence& seq) {
  const auto K = static_cast<std::size_t>(p.K());
  const double T = seq.t_end();
  double comp = 0.0;
  for (std::size_t k = 0; k < K; ++k) comp += p.mu[k] * T;
  for (const auto& e : seq.events()) {
    const auto kj = static_cast<std::size_t>(e.k);
    for (std::size_t k = 0; k < K; ++k)
      comp += p.alpha(k, kj) / p.gamma(k, kj) *
              (1.0 - std::exp(-p.gamma(k, kj) * (T - e.t)));
  }

  // Event terms via per-pair decaying state; simultaneous events are grouped
  // so they never excite each other.
  double ev = 0.0;
  Matrix state(K, K, 0.0);
  double t_cur = 0.0;
  const auto& events = seq.events();
  std::size_t i = 0;
  while (i < events.size()) {
    const double t = events[i].t;
    const double dt = t - t_cur;
    if (dt > 0.0)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp)
          state(k, kp) *= std::exp(-p.gamma(k, kp) * dt);
    t_cur = t;
    std::size_t group_end = i;
    while (group_end < events.size() && events[group_end].t == t) ++group_end;
    for (std::size_t e = i; e < group_end; ++e) {
      const auto k = static_cast<std::size_t>(events[e].k);
      double lam = p.mu[k];
      for (std::size_t kp = 0; kp < K; ++kp) lam += state(k, kp);
      if (!(lam > 0.0) || !std::isfinite(lam))
        throw NumericError("hexp_seq_nll: non-positive intensity in sequence '" +
                           seq.seq_id() + "' at event " + std::to_string(e));
      ev += std::log(lam);
    }
    for (std::size_t e = i; e < group_end; ++e) {
      const auto kj = static_cast<std::size_t>(events[e].k);
      for (std::size_t k = 0; k < K; ++k) state(k, kj) += p.alpha(k, kj);
    }
    i = group_end;
  }
  return comp - ev;
}

inline double hexp_nll(const HexpModel& m, const Dataset& ds) {
  if (ds.size() == 0) throw ValidationError("hexp_nll: empty dataset");
  const MHPParams p = m.decoded();
  double total = 0.0;
  for (const auto& s : ds.sequences()) total += hexp_seq_nll(p, s);
  return total;
}

// Tape version of hexp_seq_nll; mirrors the plain path exactly, including
// tie grouping.
inline ad::Value build_hexp_seq_nll(ad::Tape& tape, const HexpModel& m,
                                    const EventSequence& seq) {
  using ad::Value;
  const auto K = static_cast<std::size_t>(m.K());
  const double T = seq.t_end();

  Value mu = tape.softplus(tape.leaf("mu_raw"));
  Value alpha = tape.softplus(tape.leaf("alpha_raw"));
  Value gamma = m.config().freeze_gamma
                    ? tape.constant(std::vector<double>(K * K, m.config().gamma_init))
                    : tape.softplus(tape.leaf("gamma_raw"));

  std::vector<Value> alpha_col(K), gamma_col(K), ratio_col(K);
  for (std::size_t kp = 0; kp < K; ++kp) {
    alpha_col[kp] = tape.col(alpha, kp, K);
    gamma_col[kp] = tape.col(gamma, kp, K);
    ratio_col[kp] = tape.div(alpha_col[kp], gamma_col[kp]);
  }

  Value comp = tape.scale(tape.sum(mu), T);
  for (const auto& e : seq.events()) {
    const auto kj = static_cast<std::size_t>(e.k);
    Value decayed = tape.exp(tape.scale(gamma_col[kj], -(T - e.t)));
    Value one_minus = tape.sub(tape.constant(std::vector<double>(K, 1.0)), decayed);
    comp = tape.add(comp, tape.sum(tape.mul(ratio_col[kj], one_minus)));
  }

  std::vector<Value> state(K);  // per-source column of excitation, lazily live
  std::vector<bool> live(K, false);
  Value ev = tape.constant(0.0);
  const auto& events = seq.events();
  double t_cur = 0.0;
  std::size_t i = 0;
  while (i < events.size()) {
    const double t = events[i].t;
    const double dt = t - t_cur;
    if (dt > 0.0)
      for (std::size_t kp = 0; kp < K; ++kp)
        if (live[kp])
          state[kp] = tape.mul(state[kp], tape.exp(tape.scale(gamma_col[kp], -dt)));
    t_cur = t;
    std::size_t group_end = i;
    while (group_end < events.size() && events[group_end].t == t) ++group_end;
    for (std::size_t e = i; e < group_end; ++e) {
      const auto k = static_cast<std::size_t>(events[e].k);
      Value lam_vec = mu;
      for (std::size_t kp = 0; kp < K; ++kp)
        if (live[kp]) lam_vec = tape.add(lam_vec, state[kp]);
      ev = tape.add(ev, tape.log(tape.pick(lam_vec, k)));
    }
    for (std::size_t e = i; e < group_end; ++e) {
      const auto kj = static_cast<std::size_t>(events[e].k);
      state[kj] = live[kj] ? tape.add(state[kj], alpha_col[kj]) : alpha_col[kj];
      live[kj] = true;
    }
    i = group_end;
  }
  return tape.sub(comp, ev);
}

// Type-level causality scores: branching ratios alpha/gamma.
inline Matrix hexp_causality(const HexpModel& m) { return m.decoded().branching(); }

// Most intense type at the event's own timestamp, history strictly before it;
// ties break toward the smaller type index.
inline int hexp_predict_type(const MHPParams& p, const EventSequence& seq, std::size_t i) {
  const auto lam = hexp_intensities(p, seq, seq[i].t);
  std::size_t best = 0;
  for (std::size_t k = 1; k < lam.size(); ++k)
    if (lam[k] > lam[best]) best = k;
  return static_cast<int>(best);
}

struct HexpFitResult {
  HexpModel model;
  TrainReport report;
};

inline HexpFitResult fit_hexp(const Dataset& ds, const Split& split,
                              const TrainConfig& tc, const HexpConfig& hc = {}) {
  if (ds.K() < 1) throw ValidationError("fit_hexp: K must be >= 1");
  HexpModel model = HexpModel::init_for(ds, hc, split.train);
  BatchLossBuilder builder = [&model, &ds](ad::Tape& tape,
                                           std::span<const std::size_t> batch) {
    ad::Value total = tape.constant(0.0);
    for (std::size_t s : batch) total = tape.add(total, build_hexp_seq_nll(tape, model, ds[s]));
    return total;
  };
  TrainReport report = train(model.params(), ds, split, tc, builder);
  return {std::move(model), std::move(report)};
}

}  // namespace hawkes
