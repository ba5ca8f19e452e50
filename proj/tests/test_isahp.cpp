#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "hawkes/isahp.hpp"
#include "hawkes/rng.hpp"
#include "oracles.hpp"

using namespace hawkes;

namespace {

IsahpConfig toy_config(int K) {
  IsahpConfig cfg;
  cfg.K = K;
  cfg.embed_dim = 6;
  cfg.value_dim = 6;
  cfg.hidden = 6;
  cfg.heads = 2;
  cfg.omega1 = 0.025;
  cfg.omega2 = 0.25;
  return cfg;
}

EventSequence random_sequence(Rng& rng, int K, std::size_t max_len, double mean_gap = 1.0) {
  const std::size_t n = 1 + rng.bounded(max_len);
  std::vector<Event> events;
  double t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    t += rng.exponential(1.0 / mean_gap);
    events.push_back({t, static_cast<int>(rng.bounded(static_cast<std::uint64_t>(K)))});
  }
  return EventSequence("toy", std::move(events), t + mean_gap);
}

IsahpParams random_params(Rng& rng, const IsahpConfig& cfg) {
  return IsahpParams::init(cfg, rng.next_u64(), {}, 1.0);
}

}  // namespace

TEST_CASE("embedding depends only on (dt, type)", "[isahp]") {
  Rng rng(1);
  IsahpParams P = random_params(rng, toy_config(3));
  // Two events with identical gaps and types at different absolute times.
  EventSequence seq("s", {{1.0, 2}, {2.5, 0}, {4.0, 2}, {5.5, 0}}, 6.0);
  CHECK(embed(P, seq, 1) == embed(P, seq, 3));           // both (1.5, type 0)
  CHECK(embed(P, seq, 1, 0) == embed(P, seq, 1));        // override = actual
  CHECK(embed(P, seq, 1, 2) == embed(P, seq, 2, {}));    // (1.5, type 2) both ways
  CHECK(embed(P, seq, 0) != embed(P, seq, 2));           // dt differs
  CHECK_THROWS_AS(embed(P, seq, 9), ValidationError);
}

TEST_CASE("zeroed output layer makes the embedding its bias", "[isahp]") {
  Rng rng(2);
  IsahpParams P = random_params(rng, toy_config(2));
  auto& w2 = P.store.at("emb_w2").values;
  for (auto& v : w2) v = 0.0;
  auto& b2 = P.store.at("emb_b2").values;
  for (std::size_t i = 0; i < b2.size(); ++i) b2[i] = 0.25 * static_cast<double>(i + 1);
  EventSequence seq("s", {{1.0, 0}, {3.0, 1}}, 4.0);
  CHECK(embed(P, seq, 0) == b2);
  CHECK(embed(P, seq, 1) == b2);
}

TEST_CASE("attention with a zero kernel matrix is uniform over history", "[isahp]") {
  Rng rng(3);
  IsahpParams P = random_params(rng, toy_config(2));
  for (int h = 0; h < P.cfg.heads; ++h)
    for (auto& v : P.store.at("attn_k_" + std::to_string(h)).values) v = 0.0;

  EventSequence seq("s", {{1.0, 0}, {2.0, 1}, {3.0, 0}, {4.0, 1}}, 5.0);
  std::vector<std::vector<double>> embeds;
  std::vector<double> ts;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    embeds.push_back(embed(P, seq, i));
    ts.push_back(seq[i].t);
  }
  auto heads_attn = attention(P, embeds, ts);
  for (const auto& A : heads_attn) {
    for (std::size_t j = 0; j < 4; ++j) CHECK(A(0, j) == 0.0);  // empty history row
    for (std::size_t i = 1; i < 4; ++i)
      for (std::size_t j = 0; j < i; ++j)
        CHECK(A(i, j) == Catch::Approx(1.0 / static_cast<double>(i)).margin(1e-15));
  }
}

TEST_CASE("attention rows normalize and mask strictly by time", "[isahp]") {
  Rng rng(4);
  for (int rep = 0; rep < 25; ++rep) {
    IsahpParams P = random_params(rng, toy_config(3));
    EventSequence seq = random_sequence(rng, 3, 5);
    std::vector<std::vector<double>> embeds;
    std::vector<double> ts;
    for (std::size_t i = 0; i < seq.size(); ++i) {
      embeds.push_back(embed(P, seq, i));
      ts.push_back(seq[i].t);
    }
    auto heads_attn = attention(P, embeds, ts);
    for (const auto& A : heads_attn) {
      for (std::size_t i = 0; i < seq.size(); ++i) {
        double row_sum = 0.0;
        bool has_prior = false;
        for (std::size_t j = 0; j < seq.size(); ++j) {
          if (!(ts[j] < ts[i])) CHECK(A(i, j) == 0.0);  // future/self exactly zero
          row_sum += A(i, j);
          if (ts[j] < ts[i]) has_prior = true;
        }
        if (has_prior)
          CHECK(std::abs(row_sum - 1.0) < 1e-12);
        else
          CHECK(row_sum == 0.0);
      }
    }
  }
}

TEST_CASE("attention matches a brute-force normalization oracle", "[isahp]") {
  Rng rng(5);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq = random_sequence(rng, 2, 5);
  std::vector<std::vector<double>> embeds;
  std::vector<double> ts;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    embeds.push_back(embed(P, seq, i));
    ts.push_back(seq[i].t);
  }
  const auto M = static_cast<std::size_t>(P.cfg.embed_dim);
  auto heads_attn = attention(P, embeds, ts);
  for (int h = 0; h < P.cfg.heads; ++h) {
    const auto& Km = P.store.at("attn_k_" + std::to_string(h)).values;
    for (std::size_t i = 0; i < seq.size(); ++i)
      for (std::size_t j = 0; j < seq.size(); ++j) {
        // oracle: direct exp ratio without the log-sum-exp shift
        if (!(ts[j] < ts[i])) continue;
        auto quad = [&](std::size_t a, std::size_t b) {
          double s = 0.0;
          for (std::size_t r = 0; r < M; ++r)
            for (std::size_t c = 0; c < M; ++c)
              s += embeds[a][r] * Km[r * M + c] * embeds[b][c];
          return s;
        };
        double denom = 0.0;
        for (std::size_t l = 0; l < seq.size(); ++l)
          if (ts[l] < ts[i]) denom += std::exp(quad(i, l));
        CHECK(heads_attn[static_cast<std::size_t>(h)](i, j) ==
              Catch::Approx(std::exp(quad(i, j)) / denom).epsilon(1e-10));
      }
  }
}

TEST_CASE("zero head vectors give the softplus/sigmoid baselines", "[isahp]") {
  Rng rng(6);
  IsahpParams P = random_params(rng, toy_config(2));
  for (auto& v : P.store.at("head_alpha_w").values) v = 0.0;
  for (auto& v : P.store.at("head_mu_w").values) v = 0.0;
  EventSequence seq("s", {{1.0, 0}, {2.0, 1}, {3.0, 0}}, 4.0);
  SequenceForward f = isahp_forward(P, seq);

  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t j = 0; j < i; ++j)
      for (int k = 0; k < 2; ++k)
        CHECK(heads(f, i, j, k).first == Catch::Approx(std::log(2.0)).margin(1e-15));

  for (std::size_t i = 0; i < 3; ++i)
    for (int k = 0; k < 2; ++k)
      CHECK(background(f, i, k) == Catch::Approx(P.base_mu(k) + 0.5).margin(1e-15));

  CHECK_THROWS_AS(heads(f, 0, 0, 0), ValidationError);  // masked pair
}

TEST_CASE("background stays inside (mu_bar, mu_bar + 1)", "[isahp]") {
  Rng rng(7);
  for (int rep = 0; rep < 10; ++rep) {
    IsahpParams P = random_params(rng, toy_config(3));
    EventSequence seq = random_sequence(rng, 3, 6);
    SequenceForward f = isahp_forward(P, seq);
    for (std::size_t i = 0; i < f.L; ++i)
      for (int k = 0; k < 3; ++k) {
        const double mu = background(f, i, k);
        CHECK(mu > P.base_mu(k));
        CHECK(mu < P.base_mu(k) + 1.0);
      }
  }
}

TEST_CASE("intensity reduces to the background with no history and in the limit",
          "[isahp]") {
  Rng rng(8);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq("s", {{1.0, 0}, {2.0, 1}, {4.0, 0}}, 5.0);
  SequenceForward f = isahp_forward(P, seq);

  CHECK(intensity(f, 0, 0, 0.5) == Catch::Approx(background(f, 0, 0)).margin(1e-15));
  // decay vanishes far in the future
  CHECK(intensity(f, 2, 1, 4.0 + 1e4) == Catch::Approx(background(f, 2, 1)).margin(1e-9));
}

TEST_CASE("intensity matches a hand-built sum on a 3-event instance", "[isahp]") {
  Rng rng(9);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq("s", {{0.7, 1}, {1.9, 0}, {3.1, 1}}, 4.0);
  SequenceForward f = isahp_forward(P, seq);

  const std::size_t i = 2;
  const int k = 0;
  const double t = 2.8;
  double expect = background(f, i, k);
  for (std::size_t j = 0; j < i; ++j) {
    auto [a, g] = heads(f, i, j, k);
    expect += a * g * std::exp(-g * (t - seq[j].t));
  }
  CHECK(intensity(f, i, k, t) == Catch::Approx(expect).margin(1e-14));

  // the jump at t_j+ is the full alpha * gamma
  auto [a1, g1] = heads(f, i, 1, k);
  const double just_after = intensity(f, i, k, seq[1].t + 1e-12);
  const double base_part = intensity(f, i, k, seq[1].t + 1e-12) - a1 * g1 *
                               std::exp(-g1 * 1e-12);
  CHECK(just_after - base_part == Catch::Approx(a1 * g1).epsilon(1e-9));
}

TEST_CASE("zero alpha removes an event's contribution entirely", "[isahp]") {
  Rng rng(10);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq("s", {{0.5, 0}, {1.5, 1}, {2.5, 0}}, 3.0);
  SequenceForward f = isahp_forward(P, seq);
  SequenceForward zeroed = f;
  zeroed.alpha_cand[zeroed.slot(2, 0)][0] = 0.0;  // silence event 0 -> event 2

  double manual = background(f, 2, 0);
  {
    auto [a, g] = heads(f, 2, 1, 0);
    manual += a * g * std::exp(-g * (2.6 - seq[1].t));
  }
  CHECK(intensity(zeroed, 2, 0, 2.6) == Catch::Approx(manual).margin(1e-14));
}

TEST_CASE("single-event NLL is the Poisson one-event form", "[isahp]") {
  Rng rng(11);
  IsahpConfig cfg = toy_config(2);
  cfg.compensator_mode = IsahpConfig::CompensatorMode::ObservedType;
  IsahpParams P = IsahpParams::init(cfg, rng.next_u64(), {}, 1.0);
  EventSequence seq("one", {{1.7, 1}}, 2.0);
  SequenceForward f = isahp_forward(P, seq);
  const double mu = background(f, 0, 1);
  CHECK(sequence_nll(P, seq) == Catch::Approx(mu * 1.7 - std::log(mu)).margin(1e-12));
}

TEST_CASE("analytic compensator matches adaptive quadrature", "[isahp]") {
  Rng rng(12);
  for (int rep = 0; rep < 10; ++rep) {
    IsahpConfig cfg = toy_config(2 + static_cast<int>(rng.bounded(2)));
    if (rep % 2 == 1) cfg.compensator_mode = IsahpConfig::CompensatorMode::ObservedType;
    IsahpParams P = random_params(rng, cfg);
    EventSequence seq = random_sequence(rng, cfg.K, 4);
    SequenceForward f = isahp_forward(P, seq);

    for (std::size_t i = 0; i < seq.size(); ++i) {
      const double t_prev = i == 0 ? 0.0 : seq[i - 1].t;
      const double t_i = seq[i].t;
      for (int k = 0; k < cfg.K; ++k) {
        const double analytic = interval_compensator(f, i, k, t_prev, t_i);
        const double quad = oracles::adaptive_simpson(
            [&](double t) { return intensity(f, i, k, t); }, t_prev, t_i, 1e-12);
        CHECK(std::abs(analytic - quad) < 1e-8);
      }
    }
  }
}

TEST_CASE("tape graph reproduces the plain forward values", "[isahp]") {
  Rng rng(13);
  for (int rep = 0; rep < 6; ++rep) {
    IsahpConfig cfg = toy_config(3);
    if (rep % 2 == 1) cfg.compensator_mode = IsahpConfig::CompensatorMode::ObservedType;
    IsahpParams P = random_params(rng, cfg);
    EventSequence seq = random_sequence(rng, 3, 6);

    const double plain = sequence_nll(P, seq);
    ad::Tape tape(P.store);
    auto graph = build_isahp_sequence_graph(tape, P, seq);
    CHECK(tape.scalar(graph.nll) == Catch::Approx(plain).epsilon(1e-12));

    // Pair alphas on the tape equal the cached forward values.
    SequenceForward f = isahp_forward(P, seq);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < f.L; ++i)
      for (std::size_t j = 0; j < i; ++j) {
        if (!(f.timestamps[j] < f.timestamps[i])) continue;
        REQUIRE(idx < graph.pair_alphas.size());
        const auto& pa = graph.pair_alphas[idx++];
        CHECK(tape.scalar(pa.alpha) ==
              Catch::Approx(f.alpha_cand[f.slot(i, seq[i].k)][j]).epsilon(1e-12));
      }
    CHECK(idx == graph.pair_alphas.size());
  }
}

TEST_CASE("tape graph handles simultaneous events like the plain path", "[isahp]") {
  Rng rng(14);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq("ties", {{1.0, 0}, {1.0, 1}, {2.0, 0}, {2.0, 1}, {3.0, 1}}, 4.0);
  const double plain = sequence_nll(P, seq);
  ad::Tape tape(P.store);
  auto graph = build_isahp_sequence_graph(tape, P, seq);
  CHECK(tape.scalar(graph.nll) == Catch::Approx(plain).epsilon(1e-12));
}

TEST_CASE("head gradient matches finite differences", "[isahp]") {
  Rng rng(15);
  IsahpParams P = random_params(rng, toy_config(2));
  EventSequence seq("s", {{0.6, 0}, {1.4, 1}, {2.0, 0}}, 3.0);

  // d alpha_{2,1} / d theta for every parameter group.
  ad::LossBuilder f = [&](ad::Tape& tape, ad::ParamStore&) {
    auto graph = build_isahp_sequence_graph(tape, P, seq);
    return graph.pair_alphas.back().alpha;  // pair (i=2, j=1)
  };
  auto report = ad::grad_check(f, P.store, 1e-5, 1e-4);
  INFO("worst " << report.worst_param << " rel " << report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("sequence NLL gradient passes grad_check at 1e-3", "[isahp]") {
  Rng rng(16);
  for (int rep = 0; rep < 2; ++rep) {
    IsahpConfig cfg = toy_config(2);
    cfg.compensator_mode = rep == 0 ? IsahpConfig::CompensatorMode::AllTypes
                                    : IsahpConfig::CompensatorMode::ObservedType;
    IsahpParams P = random_params(rng, cfg);
    EventSequence seq = random_sequence(rng, 2, 5);
    ad::LossBuilder f = [&](ad::Tape& tape, ad::ParamStore&) {
      return build_isahp_sequence_graph(tape, P, seq).nll;
    };
    auto report = ad::grad_check(f, P.store, 1e-5, 1e-3);
    INFO("worst " << report.worst_param << " rel " << report.max_rel_err);
    CHECK(report.pass);
  }
}

TEST_CASE("total loss with regularization off is the NLL sum", "[isahp]") {
  Rng rng(17);
  IsahpConfig cfg = toy_config(2);
  cfg.omega1 = 0.0;
  cfg.omega2 = 0.0;
  IsahpParams P = random_params(rng, cfg);
  std::vector<EventSequence> seqs = {random_sequence(rng, 2, 5), random_sequence(rng, 2, 5)};
  Dataset ds(std::move(seqs), 2);

  const std::vector<std::size_t> batch = {0, 1};
  const double expect = sequence_nll(P, ds[0]) + sequence_nll(P, ds[1]);
  CHECK(isahp_total_loss_value(P, ds, batch) == Catch::Approx(expect).epsilon(1e-13));

  ad::Tape tape(P.store);
  CHECK(tape.scalar(build_isahp_total_loss(tape, P, ds, batch)) ==
        Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("a single type-pair occurrence contributes omega1 * alpha", "[isahp]") {
  Rng rng(18);
  IsahpConfig cfg = toy_config(2);
  IsahpParams P = random_params(rng, cfg);
  Dataset ds({EventSequence("s", {{1.0, 0}, {2.0, 1}}, 3.0)}, 2);
  const std::vector<std::size_t> batch = {0};

  SequenceForward f = isahp_forward(P, ds[0]);
  const double alpha = f.alpha_cand[f.slot(1, 1)][0];
  const double expect = sequence_nll(P, ds[0]) + cfg.omega1 * alpha;  // variance = 0
  CHECK(isahp_total_loss_value(P, ds, batch) == Catch::Approx(expect).epsilon(1e-13));
}

TEST_CASE("total loss is invariant to batch order", "[isahp]") {
  Rng rng(19);
  IsahpParams P = random_params(rng, toy_config(2));
  std::vector<EventSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(random_sequence(rng, 2, 6));
  Dataset ds(std::move(seqs), 2);

  const std::vector<std::size_t> a = {0, 1, 2, 3};
  const std::vector<std::size_t> b = {3, 1, 0, 2};
  CHECK(isahp_total_loss_value(P, ds, a) ==
        Catch::Approx(isahp_total_loss_value(P, ds, b)).epsilon(1e-9));
}

TEST_CASE("total loss gradient passes grad_check with TLR on", "[isahp]") {
  Rng rng(20);
  IsahpParams P = random_params(rng, toy_config(2));
  std::vector<EventSequence> seqs = {random_sequence(rng, 2, 4), random_sequence(rng, 2, 4)};
  Dataset ds(std::move(seqs), 2);
  const std::vector<std::size_t> batch = {0, 1};

  ad::LossBuilder f = [&](ad::Tape& tape, ad::ParamStore&) {
    return build_isahp_total_loss(tape, P, ds, batch);
  };
  auto report = ad::grad_check(f, P.store, 1e-5, 1e-3);
  INFO("worst " << report.worst_param << " rel " << report.max_rel_err);
  CHECK(report.pass);
}

TEST_CASE("prediction picks the most intense candidate type", "[isahp]") {
  Rng rng(21);
  IsahpParams P = random_params(rng, toy_config(3));
  EventSequence seq = random_sequence(rng, 3, 6);
  SequenceForward f = isahp_forward(P, seq);
  for (std::size_t i = 0; i < f.L; ++i) {
    const int pred = isahp_predict_type(f, i);
    for (int k = 0; k < 3; ++k) {
      if (k == pred) continue;
      const double li = intensity(f, i, pred, f.timestamps[i]);
      const double lk = intensity(f, i, k, f.timestamps[i]);
      CHECK(li >= lk);
      if (li == lk) CHECK(pred < k);  // ties toward the smaller index
    }
  }
}
