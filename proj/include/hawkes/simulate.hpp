#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "hawkes/eventseq.hpp"
#include "hawkes/rng.hpp"

namespace hawkes {

// ---------------------------------------------------------------------------
// Linear multivariate Hawkes parameters: intensity of type k is
//   lambda_k(t) = mu[k] + sum_j alpha[k][k_j] * exp(-gamma[k][k_j] (t - t_j)).
// The branching matrix alpha/gamma must have spectral radius < 1 for a
// stationary process; violations are simulated anyway under an event cap.

struct MHPParams {
  std::vector<double> mu;  // K background rates
  Matrix alpha;            // K x K jump sizes, row = target type
  Matrix gamma;            // K x K decay rates

  int K() const { return static_cast<int>(mu.size()); }

  void validate() const {
    const auto k = mu.size();
    if (k == 0) throw ValidationError("MHPParams: K must be >= 1");
    if (alpha.rows() != k || alpha.cols() != k || gamma.rows() != k || gamma.cols() != k)
      throw ValidationError("MHPParams: alpha/gamma must be K x K");
    for (double v : mu)
      if (!(v >= 0.0)) throw ValidationError("MHPParams: mu must be >= 0");
    for (double v : alpha.storage())
      if (!(v >= 0.0)) throw ValidationError("MHPParams: alpha must be >= 0");
    for (double v : gamma.storage())
      if (!(v > 0.0)) throw ValidationError("MHPParams: gamma must be > 0");
  }

  Matrix branching() const {
    Matrix b(alpha.rows(), alpha.cols());
    for (std::size_t i = 0; i < alpha.rows(); ++i)
      for (std::size_t j = 0; j < alpha.cols(); ++j)
        b(i, j) = alpha(i, j) / gamma(i, j);
    return b;
  }
};

// Perron root of a nonnegative matrix by power iteration.
inline double spectral_radius(const Matrix& m, int iters = 200) {
  const std::size_t n = m.rows();
  if (n == 0) return 0.0;
  std::vector<double> v(n, 1.0), w(n);
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += m(i, j) * v[j];
      w[i] = s;
      norm = std::max(norm, std::abs(s));
    }
    if (norm == 0.0) return 0.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    lambda = norm;
  }
  return lambda;
}

// PGEM rule: the target's rate is rate_active while every parent type has at
// least one event inside the trailing window (t - window, t], rate_base
// otherwise. An empty parent set means always active.
struct PgemRule {
  int target = 0;
  std::vector<int> parents;
  double window = 1.0;
  double rate_active = 1.0;
  double rate_base = 0.0;
};

struct PgemSpec {
  int K = 1;
  double default_rate = 0.0;  // homogeneous rate for types without a rule
  std::vector<PgemRule> rules;

  void validate() const {
    if (K < 1) throw ValidationError("PgemSpec: K must be >= 1");
    if (!(default_rate >= 0.0)) throw ValidationError("PgemSpec: default_rate must be >= 0");
    std::vector<bool> seen(static_cast<std::size_t>(K), false);
    for (const auto& r : rules) {
      if (r.target < 0 || r.target >= K)
        throw ValidationError("PgemSpec: rule target out of range");
      if (seen[static_cast<std::size_t>(r.target)])
        throw ValidationError("PgemSpec: more than one rule for a target type");
      seen[static_cast<std::size_t>(r.target)] = true;
      if (!(r.window > 0.0)) throw ValidationError("PgemSpec: window must be > 0");
      if (!(r.rate_active >= 0.0) || !(r.rate_base >= 0.0))
        throw ValidationError("PgemSpec: rates must be >= 0");
      for (int p : r.parents)
        if (p < 0 || p >= K) throw ValidationError("PgemSpec: parent out of range");
    }
  }

  // The synergistic benchmark layout: five types, one rule making type 3
  // fire fast only while both 0 and 1 occurred within the trailing window.
  // With the default horizon below, 1000 sequences carry ~15k events.
  static PgemSpec synergy_default() {
    PgemSpec spec;
    spec.K = 5;
    spec.default_rate = 0.2;
    spec.rules.push_back({3, {0, 1}, 2.0, 1.0, 0.05});
    return spec;
  }

  static constexpr double kSynergyDefaultHorizon = 16.0;
  static constexpr std::size_t kSynergyDefaultSequences = 1000;

  Matrix ground_truth() const {
    Matrix g(static_cast<std::size_t>(K), static_cast<std::size_t>(K), 0.0);
    for (const auto& r : rules)
      for (int p : r.parents)
        g(static_cast<std::size_t>(r.target), static_cast<std::size_t>(p)) = 1.0;
    return g;
  }
};

struct SimConfig {
  std::size_t S = 1;
  double t_end = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (S < 1) throw ValidationError("SimConfig: S must be >= 1");
    if (!(t_end > 0.0)) throw ValidationError("SimConfig: t_end must be > 0");
  }
};

struct SimLog {
  bool stability_warning = false;
  std::size_t capped_sequences = 0;
};

namespace detail {

constexpr std::size_t kMaxEventsPerSequence = 100000;

// One multivariate Hawkes realization by Ogata thinning. The proposal bound
// is the total intensity immediately after the latest state change, valid
// because exponential kernels only decay between events.
inline EventSequence thin_one_mhp(const MHPParams& p, double t_end, Rng& rng,
                                  const std::string& seq_id, bool* capped) {
  const auto K = static_cast<std::size_t>(p.K());
  // excite[k][k'] = summed alpha[k][k'] exp(-gamma[k][k'] dt) over past k' events
  Matrix excite(K, K, 0.0);
  std::vector<Event> events;
  double t = 0.0;

  auto total_intensity = [&] {
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      s += p.mu[k];
      for (std::size_t kp = 0; kp < K; ++kp) s += excite(k, kp);
    }
    return s;
  };

  while (true) {
    const double bound = total_intensity();
    if (bound <= 0.0) break;
    const double dt = rng.exponential(bound);
    const double t_next = t + dt;
    if (t_next > t_end) break;

    // decay the excitation state to the candidate time
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t kp = 0; kp < K; ++kp)
        excite(k, kp) *= std::exp(-p.gamma(k, kp) * dt);
    t = t_next;

    std::vector<double> lam(K);
    double lam_total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      double s = p.mu[k];
      for (std::size_t kp = 0; kp < K; ++kp) s += excite(k, kp);
      lam[k] = s;
      lam_total += s;
    }

    if (rng.uniform() * bound > lam_total) continue;  // thinned

    double u = rng.uniform() * lam_total;
    std::size_t type = K - 1;
    for (std::size_t k = 0; k < K; ++k) {
      if (u < lam[k]) {
        type = k;
        break;
      }
      u -= lam[k];
    }

    events.push_back({t, static_cast<int>(type)});
    for (std::size_t k = 0; k < K; ++k) excite(k, type) += p.alpha(k, type);

    if (events.size() >= kMaxEventsPerSequence) {
      if (capped) *capped = true;
      break;
    }
  }
  return EventSequence(seq_id, std::move(events), t_end);
}

// Exact simulation of piecewise-constant PGEM intensities: rates change only
// at event times and window expiries, so each constant stretch is sampled as
// a competition of homogeneous exponentials.
inline EventSequence sim_one_pgem(const PgemSpec& spec, double t_end, Rng& rng,
                                  const std::string& seq_id) {
  const auto K = static_cast<std::size_t>(spec.K);
  std::vector<const PgemRule*> rule_of(K, nullptr);
  for (const auto& r : spec.rules) rule_of[static_cast<std::size_t>(r.target)] = &r;

  constexpr double kNever = -std::numeric_limits<double>::infinity();
  std::vector<double> last_event(K, kNever);
  std::vector<Event> events;
  double t = 0.0;

  auto rate_of = [&](std::size_t k, double now) {
    const PgemRule* r = rule_of[k];
    if (!r) return spec.default_rate;
    for (int p : r->parents)
      if (!(last_event[static_cast<std::size_t>(p)] + r->window > now)) return r->rate_base;
    return r->rate_active;
  };

  // Next time any rule's parent window can expire after `now`.
  auto next_expiry = [&](double now) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : spec.rules)
      for (int p : r.parents) {
        const double e = last_event[static_cast<std::size_t>(p)] + r.window;
        if (e > now) best = std::min(best, e);
      }
    return best;
  };

  while (t < t_end) {
    double total = 0.0;
    std::vector<double> rates(K);
    for (std::size_t k = 0; k < K; ++k) {
      rates[k] = rate_of(k, t);
      total += rates[k];
    }
    const double boundary = std::min(next_expiry(t), t_end);

    if (total <= 0.0) {
      if (boundary >= t_end) break;
      t = boundary;
      continue;
    }

    const double t_next = t + rng.exponential(total);
    if (t_next > boundary) {
      t = boundary;
      continue;
    }

    double u = rng.uniform() * total;
    std::size_t type = K - 1;
    for (std::size_t k = 0; k < K; ++k) {
      if (u < rates[k]) {
        type = k;
        break;
      }
      u -= rates[k];
    }
    t = t_next;
    events.push_back({t, static_cast<int>(type)});
    last_event[type] = t;
    if (events.size() >= kMaxEventsPerSequence) break;
  }
  return EventSequence(seq_id, std::move(events), t_end);
}

}  // namespace detail

// Ogata-thinning dataset generator. Ground truth is the branching-ratio
// matrix alpha/gamma (zero exactly where alpha is zero). Deterministic per
// seed; sequences use derived per-index streams.
inline Dataset simulate_mhp(const MHPParams& p, const SimConfig& cfg, SimLog* log = nullptr) {
  p.validate();
  cfg.validate();
  const double radius = spectral_radius(p.branching());
  if (radius >= 1.0) {
    if (log) log->stability_warning = true;
    std::cerr << "simulate_mhp: branching spectral radius " << radius
              << " >= 1; sequences are capped at " << detail::kMaxEventsPerSequence
              << " events\n";
  }
  std::vector<EventSequence> seqs;
  seqs.reserve(cfg.S);
  for (std::size_t s = 0; s < cfg.S; ++s) {
    Rng rng = Rng::derive(cfg.seed, s);
    bool capped = false;
    seqs.push_back(
        detail::thin_one_mhp(p, cfg.t_end, rng, "mhp-" + std::to_string(s), &capped));
    if (capped && log) ++log->capped_sequences;
  }
  return Dataset(std::move(seqs), p.K(), p.branching());
}

// PGEM dataset generator; ground truth marks rule parents.
inline Dataset simulate_pgem(const PgemSpec& spec, const SimConfig& cfg) {
  spec.validate();
  cfg.validate();
  std::vector<EventSequence> seqs;
  seqs.reserve(cfg.S);
  for (std::size_t s = 0; s < cfg.S; ++s) {
    Rng rng = Rng::derive(cfg.seed, s);
    seqs.push_back(detail::sim_one_pgem(spec, cfg.t_end, rng, "pgem-" + std::to_string(s)));
  }
  return Dataset(std::move(seqs), spec.K, spec.ground_truth());
}

// ---------------------------------------------------------------------------
// Contiguous type-pattern matching with a single wildcard, e.g. "0#32".

struct PatternMatch {
  std::size_t seq_index = 0;
  std::string seq_id;
  std::size_t begin = 0;  // events [begin, begin + pattern length)
  int wildcard_type = -1;
};

struct Pattern {
  std::vector<int> types;   // -1 at the wildcard slot
  std::size_t wildcard_pos = 0;

  static Pattern parse(const std::string& s) {
    Pattern p;
    bool seen_wildcard = false;
    for (char c : s) {
      if (c == '#') {
        if (seen_wildcard) throw ValidationError("pattern: more than one wildcard");
        seen_wildcard = true;
        p.wildcard_pos = p.types.size();
        p.types.push_back(-1);
      } else if (c >= '0' && c <= '9') {
        p.types.push_back(c - '0');
      } else {
        throw ValidationError(std::string("pattern: invalid character '") + c + "'");
      }
    }
    if (!seen_wildcard) throw ValidationError("pattern: missing wildcard '#'");
    if (p.types.size() < 2) throw ValidationError("pattern: too short");
    return p;
  }

  // Position of the first literal occurrence of `type`, if any.
  std::size_t literal_pos(int type) const {
    for (std::size_t i = 0; i < types.size(); ++i)
      if (types[i] == type) return i;
    throw ValidationError("pattern: literal type " + std::to_string(type) + " not present");
  }
};

inline std::vector<PatternMatch> find_patterns(const Dataset& ds, const std::string& pattern) {
  const Pattern p = Pattern::parse(pattern);
  std::vector<PatternMatch> out;
  const std::size_t n = p.types.size();
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const auto& events = ds[s].events();
    if (events.size() < n) continue;
    for (std::size_t start = 0; start + n <= events.size(); ++start) {
      bool ok = true;
      for (std::size_t i = 0; i < n && ok; ++i)
        if (p.types[i] >= 0 && events[start + i].k != p.types[i]) ok = false;
      if (ok)
        out.push_back({s, ds[s].seq_id(), start, events[start + p.wildcard_pos].k});
    }
  }
  return out;
}

}  // namespace hawkes
