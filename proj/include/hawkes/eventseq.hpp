#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "hawkes/core.hpp"
#include "hawkes/rng.hpp"

namespace hawkes {

using json = nlohmann::json;

// One event: occurrence time and 0-based type index.
struct Event {
  double t = 0.0;
  int k = 0;

  bool operator==(const Event&) const = default;
};

// A single realization: time-sorted events over the observation window
// (0, t_end]. Construction validates ordering; simultaneous timestamps are
// allowed and keep their incoming order.
class EventSequence {
 public:
  EventSequence() = default;
  EventSequence(std::string seq_id, std::vector<Event> events, double t_end)
      : seq_id_(std::move(seq_id)), events_(std::move(events)), t_end_(t_end) {
    validate();
  }

  const std::string& seq_id() const { return seq_id_; }
  const std::vector<Event>& events() const { return events_; }
  double t_end() const { return t_end_; }
  std::size_t size() const { return events_.size(); }
  bool empty() const { return events_.empty(); }
  const Event& operator[](std::size_t i) const { return events_[i]; }

  bool operator==(const EventSequence&) const = default;

 private:
  void validate() const {
    if (!std::isfinite(t_end_))
      throw ValidationError("sequence '" + seq_id_ + "': t_end not finite");
    double prev = 0.0;
    for (std::size_t i = 0; i < events_.size(); ++i) {
      const Event& e = events_[i];
      if (!std::isfinite(e.t))
        throw ValidationError("sequence '" + seq_id_ + "': non-finite timestamp");
      if (e.t < 0.0)
        throw ValidationError("sequence '" + seq_id_ + "': negative timestamp");
      if (e.k < 0)
        throw ValidationError("sequence '" + seq_id_ + "': negative event type");
      if (i > 0 && e.t < prev)
        throw ValidationError("sequence '" + seq_id_ + "': timestamps out of order");
      if (e.t > t_end_)
        throw ValidationError("sequence '" + seq_id_ + "': event after t_end");
      prev = e.t;
    }
  }

  std::string seq_id_;
  std::vector<Event> events_;
  double t_end_ = 0.0;
};

// Immutable collection of sequences over K event types, optionally carrying a
// K x K ground-truth causality matrix (entry [k][k'] = influence of k' on k).
class Dataset {
 public:
  Dataset() = default;
  Dataset(std::vector<EventSequence> sequences, int K,
          std::optional<Matrix> ground_truth = std::nullopt)
      : sequences_(std::move(sequences)),
        K_(K),
        ground_truth_(std::move(ground_truth)) {
    validate();
  }

  const std::vector<EventSequence>& sequences() const { return sequences_; }
  int K() const { return K_; }
  const std::optional<Matrix>& ground_truth() const { return ground_truth_; }
  std::size_t size() const { return sequences_.size(); }
  const EventSequence& operator[](std::size_t s) const { return sequences_[s]; }

  std::size_t total_events() const {
    std::size_t n = 0;
    for (const auto& s : sequences_) n += s.size();
    return n;
  }

  std::size_t max_length() const {
    std::size_t n = 0;
    for (const auto& s : sequences_) n = std::max(n, s.size());
    return n;
  }

  // Events of each type per unit of observed time; floor keeps the value
  // usable as a softplus_inv argument for rate initialization.
  std::vector<double> empirical_rates(double floor = 1e-4) const {
    std::vector<double> counts(static_cast<std::size_t>(K_), 0.0);
    double total_time = 0.0;
    for (const auto& s : sequences_) {
      total_time += s.t_end();
      for (const auto& e : s.events()) counts[static_cast<std::size_t>(e.k)] += 1.0;
    }
    for (auto& c : counts) c = std::max(total_time > 0.0 ? c / total_time : 0.0, floor);
    return counts;
  }

 private:
  void validate() const {
    if (K_ < 1) throw ValidationError("Dataset: K must be >= 1");
    for (const auto& s : sequences_)
      for (const auto& e : s.events())
        if (e.k >= K_)
          throw ValidationError("Dataset: sequence '" + s.seq_id() +
                                "' has event type >= K");
    if (ground_truth_) {
      const Matrix& g = *ground_truth_;
      if (g.rows() != static_cast<std::size_t>(K_) ||
          g.cols() != static_cast<std::size_t>(K_))
        throw ValidationError("Dataset: ground truth is not K x K");
      for (double v : g.storage())
        if (!(v >= 0.0))
          throw ValidationError("Dataset: ground truth has negative entry");
    }
  }

  std::vector<EventSequence> sequences_;
  int K_ = 1;
  std::optional<Matrix> ground_truth_;
};

// Index partition of a dataset's sequences.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

namespace detail {

inline std::string gt_sidecar_path(const std::string& path) { return path + ".gt.json"; }

inline Matrix matrix_from_json(const json& j) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : j) rows.push_back(r.get<std::vector<double>>());
  return Matrix::from_rows(rows);
}

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// Reads a JSON-lines dataset. Optional first line {"header":{"K":<int>}};
// every other line is one sequence record. When no header is present, K is
// inferred as 1 + max event type. A ground-truth sidecar <path>.gt.json is
// picked up automatically.
inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_jsonl: cannot open '" + path + "'");

  std::vector<EventSequence> sequences;
  std::optional<int> header_k;
  int max_type = -1;
  std::string line;
  std::size_t line_no = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (line_no == 1 && rec.contains("header")) {
      header_k = rec.at("header").at("K").get<int>();
      if (*header_k < 1)
        throw ParseError(path + ":1: header K must be >= 1");
      continue;
    }
    try {
      auto seq_id = rec.at("seq_id").get<std::string>();
      std::vector<Event> events;
      for (const auto& ej : rec.at("events"))
        events.push_back({ej.at("t").get<double>(), ej.at("k").get<int>()});
      double t_end;
      if (rec.contains("t_end"))
        t_end = rec.at("t_end").get<double>();
      else
        t_end = events.empty() ? 0.0 : events.back().t;
      for (const auto& e : events) max_type = std::max(max_type, e.k);
      sequences.emplace_back(std::move(seq_id), std::move(events), t_end);
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }

  int K;
  if (header_k)
    K = *header_k;
  else if (max_type >= 0)
    K = max_type + 1;
  else
    throw ParseError("load_jsonl: '" + path +
                     "' has no events and no header record to define K");

  std::optional<Matrix> gt;
  std::ifstream gt_in(detail::gt_sidecar_path(path));
  if (gt_in) {
    json j;
    try {
      gt_in >> j;
      gt = detail::matrix_from_json(j.at("matrix"));
    } catch (const json::exception& e) {
      throw ParseError(detail::gt_sidecar_path(path) + ": " + e.what());
    }
  }

  return Dataset(std::move(sequences), K, std::move(gt));
}

// Writes the dataset with a header record; timestamps keep full precision so
// load(save(ds)) == ds. Ground truth, when present, goes to <path>.gt.json.
inline void save_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_jsonl: cannot open '" + path + "' for writing");
  out << json{{"header", {{"K", ds.K()}}}}.dump() << '\n';
  for (const auto& s : ds.sequences()) {
    json events = json::array();
    for (const auto& e : s.events()) events.push_back({{"t", e.t}, {"k", e.k}});
    json rec = {{"seq_id", s.seq_id()}, {"t_end", s.t_end()}, {"events", std::move(events)}};
    out << rec.dump() << '\n';
  }
  if (!out) throw IoError("save_jsonl: write failed for '" + path + "'");
  if (ds.ground_truth()) {
    std::ofstream gt_out(detail::gt_sidecar_path(path));
    if (!gt_out)
      throw IoError("save_jsonl: cannot open '" + detail::gt_sidecar_path(path) + "'");
    gt_out << json{{"K", ds.K()}, {"matrix", detail::matrix_to_json(*ds.ground_truth())}}
                  .dump(2)
           << '\n';
    if (!gt_out)
      throw IoError("save_jsonl: write failed for '" + detail::gt_sidecar_path(path) + "'");
  }
}

// Seeded train/validation/test partition. Sizes are the rounded fraction
// boundaries, so each part is within one sequence of fraction * S.
inline Split split(const Dataset& ds, double f_train, double f_val, double f_test,
                   std::uint64_t seed) {
  if (!(f_train > 0.0) || !(f_val > 0.0) || !(f_test > 0.0))
    throw ValidationError("split: fractions must be positive");
  if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
    throw ValidationError("split: fractions must sum to 1");

  const std::size_t S = ds.size();
  std::vector<std::size_t> order(S);
  for (std::size_t i = 0; i < S; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const auto cut1 = static_cast<std::size_t>(std::llround(f_train * static_cast<double>(S)));
  auto cut2 = static_cast<std::size_t>(
      std::llround((f_train + f_val) * static_cast<double>(S)));
  cut2 = std::max(cut2, cut1);

  Split sp;
  sp.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut1));
  sp.validation.assign(order.begin() + static_cast<std::ptrdiff_t>(cut1),
                       order.begin() + static_cast<std::ptrdiff_t>(cut2));
  sp.test.assign(order.begin() + static_cast<std::ptrdiff_t>(cut2), order.end());
  return sp;
}

}  // namespace hawkes
