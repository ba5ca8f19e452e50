#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hawkes/core.hpp"
#include "hawkes/eventseq.hpp"

namespace hawkes {

namespace detail {

// Flattens score/truth pairs, optionally dropping the diagonal.
inline void flatten_pair(const Matrix& scores, const Matrix& truth, bool include_diagonal,
                         std::vector<double>& s, std::vector<double>& t) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols())
    throw ValidationError("metrics: score/truth shape mismatch");
  s.clear();
  t.clear();
  for (std::size_t i = 0; i < scores.rows(); ++i)
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!include_diagonal && i == j) continue;
      s.push_back(scores(i, j));
      t.push_back(truth(i, j));
    }
}

}  // namespace detail

// Rank-based AUC over matrix entries; truth is binarized at > 0 and tied
// scores contribute half per positive-negative pair (midranks). Returns
// nullopt when the truth has a single class.
inline std::optional<double> auc(const Matrix& scores, const Matrix& truth,
                                 bool include_diagonal = true) {
  std::vector<double> s, t;
  detail::flatten_pair(scores, truth, include_diagonal, s, t);
  const std::size_t n = s.size();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });

  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && s[order[j]] == s[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);  // 1-based midrank
    for (std::size_t k = i; k < j; ++k) rank[order[k]] = mid;
    i = j;
  }

  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    if (t[k] > 0.0) {
      pos += 1.0;
      rank_sum += rank[k];
    }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

// Kendall's tau-b (tie corrected) over flattened matrix entries. Returns
// nullopt when either argument has zero variance.
inline std::optional<double> kendall_tau(const Matrix& scores, const Matrix& truth,
                                         bool include_diagonal = true) {
  std::vector<double> s, t;
  detail::flatten_pair(scores, truth, include_diagonal, s, t);
  const std::size_t n = s.size();
  if (n < 2) throw ValidationError("kendall_tau: need at least 2 entries");

  double concordant = 0.0, discordant = 0.0, ties_s = 0.0, ties_t = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double ds = s[i] - s[j];
      const double dt = t[i] - t[j];
      if (ds == 0.0 && dt == 0.0) continue;
      if (ds == 0.0)
        ties_s += 1.0;
      else if (dt == 0.0)
        ties_t += 1.0;
      else if (ds * dt > 0.0)
        concordant += 1.0;
      else
        discordant += 1.0;
    }
  const double denom_s = concordant + discordant + ties_s;
  const double denom_t = concordant + discordant + ties_t;
  if (denom_s == 0.0 || denom_t == 0.0) return std::nullopt;  // constant input
  return (concordant - discordant) / std::sqrt(denom_s * denom_t);
}

// ---------------------------------------------------------------------------
// Evaluation report assembly.

struct EvalOptions {
  bool include_diagonal = true;
};

struct EvalReport {
  std::optional<double> auc;
  std::optional<double> kendall_tau;
  double accuracy = 0.0;
  std::size_t n_predictions = 0;
  std::size_t n_matrix_entries = 0;
  std::size_t n_test_sequences = 0;
  std::string config_fingerprint;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["auc"] = auc ? nlohmann::json(*auc) : nlohmann::json();
    j["kendall_tau"] = kendall_tau ? nlohmann::json(*kendall_tau) : nlohmann::json();
    j["accuracy"] = accuracy;
    j["n_predictions"] = n_predictions;
    j["n_matrix_entries"] = n_matrix_entries;
    j["n_test_sequences"] = n_test_sequences;
    j["config_fingerprint"] = config_fingerprint;
    return j;
  }
};

// What evaluate() needs from a fitted model: a causality matrix estimated
// over a set of sequences, and a next-type prediction at an event's own
// timestamp.
struct CausalModelView {
  std::function<Matrix(const Dataset&, std::span<const std::size_t>)> causality;
  std::function<int(const EventSequence&, std::size_t)> predict;
};

inline EvalReport evaluate(const CausalModelView& model, const Dataset& ds,
                           const std::vector<std::size_t>& test, const Matrix& truth,
                           const std::string& fingerprint, EvalOptions opts = {}) {
  if (test.empty()) throw ValidationError("evaluate: empty test split");
  EvalReport report;
  report.config_fingerprint = fingerprint;
  report.n_test_sequences = test.size();

  const Matrix scores = model.causality(ds, test);
  report.auc = auc(scores, truth, opts.include_diagonal);
  report.kendall_tau = kendall_tau(scores, truth, opts.include_diagonal);
  report.n_matrix_entries =
      truth.rows() * truth.cols() - (opts.include_diagonal ? 0 : truth.rows());

  std::size_t correct = 0, total = 0;
  for (std::size_t s : test) {
    const auto& seq = ds[s];
    for (std::size_t i = 0; i < seq.size(); ++i) {
      if (model.predict(seq, i) == seq[i].k) ++correct;
      ++total;
    }
  }
  report.n_predictions = total;
  report.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return report;
}

// Share of the most frequent type; the floor any predictor should beat.
inline double majority_class_accuracy(const Dataset& ds,
                                      const std::vector<std::size_t>& train,
                                      const std::vector<std::size_t>& test) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(ds.K()), 0);
  for (std::size_t s : train)
    for (const auto& e : ds[s].events()) ++counts[static_cast<std::size_t>(e.k)];
  const std::size_t majority =
      static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) -
                               counts.begin());
  std::size_t correct = 0, total = 0;
  for (std::size_t s : test)
    for (const auto& e : ds[s].events()) {
      if (static_cast<std::size_t>(e.k) == majority) ++correct;
      ++total;
    }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace hawkes
