#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hawkes/eventseq.hpp"
#include "hawkes/hexp.hpp"
#include "hawkes/isahp.hpp"
#include "hawkes/simulate.hpp"

namespace hawkes {

// Instance-level attributions: one strict-lower-triangular set of alpha
// values per sequence (pairs with t_j < t_i only), plus enough structure to
// aggregate to type level.
struct AttributionResult {
  struct Pair {
    std::size_t i = 0;
    std::size_t j = 0;
    double alpha = 0.0;
  };
  struct Sequence {
    std::string seq_id;
    std::vector<int> types;   // event types, for aggregation
    std::vector<Pair> pairs;  // sorted by (i, j)

    std::optional<double> alpha_at(std::size_t i, std::size_t j) const {
      auto it = std::lower_bound(pairs.begin(), pairs.end(), std::make_pair(i, j),
                                 [](const Pair& p, const std::pair<std::size_t, std::size_t>& q) {
                                   return std::tie(p.i, p.j) < std::tie(q.first, q.second);
                                 });
      if (it != pairs.end() && it->i == i && it->j == j) return it->alpha;
      return std::nullopt;
    }
  };
  int K = 0;
  std::vector<Sequence> sequences;
};

// Instance attributions from a trained model in a single forward pass per
// sequence: alpha_{i,j} at the observed target type. Deterministic.
inline AttributionResult attribute(const IsahpParams& P, const Dataset& ds,
                                   std::span<const std::size_t> subset = {}) {
  AttributionResult out;
  out.K = ds.K();
  if (ds.K() > P.cfg.K)
    throw ValidationError("attribute: dataset has more types than the model");
  const std::size_t n = subset.empty() ? ds.size() : subset.size();
  out.sequences.resize(n);
  parallel_for(n, [&](std::size_t idx) {
    const EventSequence& seq = subset.empty() ? ds[idx] : ds[subset[idx]];
    AttributionResult::Sequence sa;
    sa.seq_id = seq.seq_id();
    for (const auto& e : seq.events()) sa.types.push_back(e.k);
    SequenceForward f = isahp_forward(P, seq);
    for (std::size_t i = 0; i < f.L; ++i) {
      const std::size_t sl = f.slot(i, seq[i].k);
      for (std::size_t j = 0; j < i; ++j) {
        if (!(f.timestamps[j] < f.timestamps[i])) continue;  // masked pair: no entry
        sa.pairs.push_back({i, j, f.alpha_cand[sl][j]});
      }
    }
    out.sequences[idx] = std::move(sa);
  });
  return out;
}

// Type-level adapter for the linear baseline: every (i, j) pair scores the
// branching ratio of its type pair, so instance context never matters.
inline AttributionResult hexp_attribution(const HexpModel& m, const Dataset& ds,
                                          std::span<const std::size_t> subset = {}) {
  AttributionResult out;
  out.K = ds.K();
  const Matrix b = hexp_causality(m);
  const std::size_t n = subset.empty() ? ds.size() : subset.size();
  out.sequences.resize(n);
  parallel_for(n, [&](std::size_t idx) {
    const EventSequence& seq = subset.empty() ? ds[idx] : ds[subset[idx]];
    AttributionResult::Sequence sa;
    sa.seq_id = seq.seq_id();
    for (const auto& e : seq.events()) sa.types.push_back(e.k);
    for (std::size_t i = 0; i < seq.size(); ++i)
      for (std::size_t j = 0; j < i; ++j) {
        if (!(seq[j].t < seq[i].t)) continue;
        sa.pairs.push_back({i, j,
                            b(static_cast<std::size_t>(seq[i].k),
                              static_cast<std::size_t>(seq[j].k))});
      }
    out.sequences[idx] = std::move(sa);
  });
  return out;
}

// Type-level aggregation: mean alpha over all pairs with target type k and
// source type k'. Pairs never observed keep count 0 and are reported absent
// rather than zero.
struct AggregateResult {
  Matrix mean;    // entries with count == 0 hold 0.0 and are flagged absent
  Matrix counts;  // N_{k,k'}

  bool present(std::size_t k, std::size_t kp) const { return counts(k, kp) > 0.0; }
};

inline AggregateResult aggregate(const AttributionResult& ar, int K) {
  const auto k = static_cast<std::size_t>(K);
  AggregateResult agg{Matrix(k, k, 0.0), Matrix(k, k, 0.0)};
  for (const auto& sa : ar.sequences)
    for (const auto& p : sa.pairs) {
      const auto ki = static_cast<std::size_t>(sa.types[p.i]);
      const auto kj = static_cast<std::size_t>(sa.types[p.j]);
      agg.mean(ki, kj) += p.alpha;
      agg.counts(ki, kj) += 1.0;
    }
  for (std::size_t a = 0; a < k; ++a)
    for (std::size_t b = 0; b < k; ++b)
      if (agg.counts(a, b) > 0.0) agg.mean(a, b) /= agg.counts(a, b);
  return agg;
}

// ---------------------------------------------------------------------------
// Synergy-ratio analysis over wildcard patterns such as "0#32": the mean
// attribution from the source-type event to the target-type event across
// matches where the wildcard equals the synergistic type, divided by the
// same mean across all other matches.

struct SynergyRatio {
  bool defined = false;
  double ratio = 0.0;
  double mean_synergistic = 0.0;
  double mean_other = 0.0;
  std::size_t n_synergistic = 0;
  std::size_t n_other = 0;
};

inline SynergyRatio synergy_ratio(const AttributionResult& ar, const Dataset& ds,
                                  const std::string& pattern, int synergy_wildcard,
                                  int source_type = 0, int target_type = 3) {
  const Pattern pat = Pattern::parse(pattern);
  const std::size_t src = pat.literal_pos(source_type);
  const std::size_t dst = pat.literal_pos(target_type);
  if (!(src < dst)) throw ValidationError("synergy_ratio: source must precede target");
  if (ar.sequences.size() != ds.size())
    throw ValidationError("synergy_ratio: attribution does not cover the dataset");

  SynergyRatio out;
  double sum_syn = 0.0, sum_other = 0.0;
  for (const auto& match : find_patterns(ds, pattern)) {
    const auto& sa = ar.sequences[match.seq_index];
    const auto a = sa.alpha_at(match.begin + dst, match.begin + src);
    if (!a) continue;  // masked (simultaneous) pair
    if (match.wildcard_type == synergy_wildcard) {
      sum_syn += *a;
      ++out.n_synergistic;
    } else {
      sum_other += *a;
      ++out.n_other;
    }
  }
  if (out.n_synergistic == 0 || out.n_other == 0) return out;  // undefined
  out.mean_synergistic = sum_syn / static_cast<double>(out.n_synergistic);
  out.mean_other = sum_other / static_cast<double>(out.n_other);
  if (out.mean_other == 0.0) return out;  // undefined (division by zero)
  out.defined = true;
  out.ratio = out.mean_synergistic / out.mean_other;
  return out;
}

// ---------------------------------------------------------------------------
// JSON export: per-sequence sparse triplets plus the aggregated matrix.
// Absent aggregate entries serialize as null.

inline nlohmann::json attribution_to_json(const AttributionResult& ar) {
  nlohmann::json j;
  j["K"] = ar.K;
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& sa : ar.sequences) {
    nlohmann::json triplets = nlohmann::json::array();
    for (const auto& p : sa.pairs)
      triplets.push_back(nlohmann::json::array({p.i, p.j, p.alpha}));
    seqs.push_back({{"seq_id", sa.seq_id}, {"types", sa.types}, {"pairs", triplets}});
  }
  j["sequences"] = std::move(seqs);
  const AggregateResult agg = aggregate(ar, ar.K);
  nlohmann::json mean = nlohmann::json::array();
  nlohmann::json counts = nlohmann::json::array();
  for (std::size_t a = 0; a < agg.mean.rows(); ++a) {
    nlohmann::json mrow = nlohmann::json::array();
    nlohmann::json crow = nlohmann::json::array();
    for (std::size_t b = 0; b < agg.mean.cols(); ++b) {
      mrow.push_back(agg.present(a, b) ? nlohmann::json(agg.mean(a, b))
                                       : nlohmann::json());
      crow.push_back(agg.counts(a, b));
    }
    mean.push_back(std::move(mrow));
    counts.push_back(std::move(crow));
  }
  j["aggregate"] = {{"mean", std::move(mean)}, {"counts", std::move(counts)}};
  return j;
}

inline AttributionResult attribution_from_json(const nlohmann::json& j) {
  AttributionResult ar;
  ar.K = j.at("K").get<int>();
  for (const auto& sj : j.at("sequences")) {
    AttributionResult::Sequence sa;
    sa.seq_id = sj.at("seq_id").get<std::string>();
    sa.types = sj.at("types").get<std::vector<int>>();
    for (const auto& t : sj.at("pairs"))
      sa.pairs.push_back({t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(),
                          t.at(2).get<double>()});
    ar.sequences.push_back(std::move(sa));
  }
  return ar;
}

}  // namespace hawkes
