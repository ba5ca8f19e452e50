#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "hawkes/metrics.hpp"
#include "hawkes/rng.hpp"
#include "oracles.hpp"

using namespace hawkes;

namespace {

Matrix from_flat(std::vector<double> v, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  m.storage() = std::move(v);
  return m;
}

}  // namespace

TEST_CASE("auc basics", "[metrics]") {
  Matrix scores = from_flat({0.9, 0.1, 0.8, 0.2}, 2, 2);
  Matrix truth = from_flat({1, 0, 1, 0}, 2, 2);
  CHECK(auc(scores, truth).value() == 1.0);

  Matrix flat = from_flat({0.3, 0.3, 0.3, 0.3}, 2, 2);
  CHECK(auc(flat, truth).value() == 0.5);

  Matrix one_class = from_flat({1, 1, 1, 1}, 2, 2);
  CHECK_FALSE(auc(scores, one_class).has_value());
}

TEST_CASE("auc matches externally computed values", "[metrics]") {
  // scipy rank-based references
  Matrix s4 = from_flat({2, 3, 0, 3, 1, 2, 2, 1, 3, 0, 1, 1, 2, 1, 0, 0}, 4, 4);
  Matrix t4 = from_flat({0, 0, 0, 1, 0, 1, 1, 0, 0, 0, 0, 1, 0, 1, 1, 1}, 4, 4);
  CHECK(auc(s4, t4).value() == Catch::Approx(0.4603174603174603).epsilon(1e-12));
}

TEST_CASE("auc matches brute-force pair counting on random matrices", "[metrics]") {
  Rng rng(8);
  for (int rep = 0; rep < 100; ++rep) {
    Matrix s(5, 5), t(5, 5);
    for (auto& v : s.storage()) v = rng.bounded(8) * 0.125;  // force ties
    bool has_pos = false, has_neg = false;
    for (auto& v : t.storage()) {
      v = rng.uniform() < 0.4 ? 1.0 : 0.0;
      (v > 0 ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    const double expect = oracles::auc_pair_counting(s.storage(), t.storage());
    CHECK(auc(s, t).value() == Catch::Approx(expect).margin(1e-13));
  }
}

TEST_CASE("kendall tau basics", "[metrics]") {
  Matrix truth = from_flat({0.9, 0.1, 0.5, 0.3}, 2, 2);
  CHECK(kendall_tau(truth, truth).value() == Catch::Approx(1.0));

  Matrix neg = truth;
  for (auto& v : neg.storage()) v = -v;
  CHECK(kendall_tau(neg, truth).value() == Catch::Approx(-1.0));

  Matrix constant = from_flat({1, 1, 1, 1}, 2, 2);
  CHECK_FALSE(kendall_tau(constant, truth).has_value());
}

TEST_CASE("kendall tau-b matches externally computed values", "[metrics]") {
  Matrix s2 = from_flat({0.5, 0.1, 0.5, 0.9}, 2, 2);
  Matrix t2 = from_flat({1, 0, 0, 1}, 2, 2);
  CHECK(kendall_tau(s2, t2).value() == Catch::Approx(0.6708203932499369).epsilon(1e-12));

  Matrix s4 = from_flat({2, 3, 0, 3, 1, 2, 2, 1, 3, 0, 1, 1, 2, 1, 0, 0}, 4, 4);
  Matrix t4 = from_flat({0, 0, 0, 1, 0, 1, 1, 0, 0, 0, 0, 1, 0, 1, 1, 1}, 4, 4);
  CHECK(kendall_tau(s4, t4).value() ==
        Catch::Approx(-0.06463056119412344).epsilon(1e-12));

  Matrix s5 = from_flat(
      {-0.007, 1.046,  0.742,  0.724,  1.619,  -1.206, -0.627, -1.321, -0.108,
       0.999,  -0.022, 0.496,  -1.911, 0.147,  -0.907, 1.775,  0.887,  0.949,
       -0.058, 0.613,  0.658,  -0.344, -0.497, -0.115, -0.605},
      5, 5);
  Matrix t5 = from_flat({1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1,
                         0, 1, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0},
                        5, 5);
  CHECK(kendall_tau(s5, t5).value() == Catch::Approx(-0.381498526263373).epsilon(1e-12));
  CHECK(auc(s5, t5).value() == Catch::Approx(0.23376623376623376).epsilon(1e-12));
}

TEST_CASE("tau matches brute-force counting on random matrices", "[metrics]") {
  Rng rng(9);
  for (int rep = 0; rep < 100; ++rep) {
    Matrix s(4, 4), t(4, 4);
    for (auto& v : s.storage()) v = rng.bounded(6) * 0.2;
    for (auto& v : t.storage()) v = rng.bounded(3) * 0.5;
    auto got = kendall_tau(s, t);
    if (!got) continue;
    const double expect = oracles::tau_b_pair_counting(s.storage(), t.storage());
    CHECK(*got == Catch::Approx(expect).margin(1e-12));
  }
}

TEST_CASE("auc and tau are invariant under increasing transforms", "[metrics]") {
  Rng rng(10);
  Matrix s(5, 5), t(5, 5);
  for (auto& v : s.storage()) v = rng.uniform();
  for (auto& v : t.storage()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  t.storage()[0] = 1.0;
  t.storage()[1] = 0.0;

  Matrix s2 = s;
  for (auto& v : s2.storage()) v = std::exp(3.0 * v) + 1.0;  // strictly increasing
  CHECK(auc(s, t).value() == Catch::Approx(auc(s2, t).value()).margin(1e-13));
  CHECK(kendall_tau(s, t).value() ==
        Catch::Approx(kendall_tau(s2, t).value()).margin(1e-13));
}

TEST_CASE("auc complement identity for tie-free scores", "[metrics]") {
  Rng rng(11);
  Matrix s(4, 4), t(4, 4);
  for (auto& v : s.storage()) v = rng.uniform();
  for (auto& v : t.storage()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  t.storage()[2] = 1.0;
  t.storage()[3] = 0.0;
  Matrix neg = s;
  for (auto& v : neg.storage()) v = -v;
  CHECK(auc(s, t).value() + auc(neg, t).value() == Catch::Approx(1.0).margin(1e-13));
}

TEST_CASE("diagonal exclusion drops K entries", "[metrics]") {
  Matrix s(3, 3, 0.0);
  Matrix t(3, 3, 0.0);
  s(0, 1) = 1.0;
  t(0, 1) = 1.0;
  t(1, 1) = 1.0;  // on the diagonal; excluded below
  auto with_diag = auc(s, t, true);
  auto without = auc(s, t, false);
  REQUIRE(with_diag.has_value());
  REQUIRE(without.has_value());
  CHECK(*without == 1.0);
  CHECK(*with_diag < 1.0);
}

TEST_CASE("evaluate assembles a report from a model view", "[metrics]") {
  // Two sequences, alternating types; a perfect scorer and always-0 predictor.
  std::vector<EventSequence> seqs;
  seqs.emplace_back("a", std::vector<Event>{{1.0, 0}, {2.0, 1}}, 3.0);
  seqs.emplace_back("b", std::vector<Event>{{0.5, 0}}, 2.0);
  Dataset ds(std::move(seqs), 2);
  Matrix truth = from_flat({0, 1, 0, 0}, 2, 2);

  CausalModelView view;
  view.causality = [&](const Dataset&, std::span<const std::size_t>) {
    return from_flat({0.1, 0.9, 0.05, 0.0}, 2, 2);
  };
  view.predict = [](const EventSequence&, std::size_t) { return 0; };

  EvalReport rep = evaluate(view, ds, {0, 1}, truth, "fp123");
  CHECK(rep.auc.value() == 1.0);
  CHECK(rep.accuracy == Catch::Approx(2.0 / 3.0));
  CHECK(rep.n_predictions == 3);
  CHECK(rep.config_fingerprint == "fp123");

  auto j = rep.to_json();
  CHECK(j["auc"].get<double>() == 1.0);

  CHECK_THROWS_AS(evaluate(view, ds, {}, truth, "fp"), ValidationError);
}

TEST_CASE("fingerprints change with any config field", "[metrics]") {
  const std::string a = fnv1a64_hex(R"({"lr":0.001,"batch":8})");
  const std::string b = fnv1a64_hex(R"({"lr":0.001,"batch":16})");
  const std::string c = fnv1a64_hex(R"({"lr":0.002,"batch":8})");
  CHECK(a != b);
  CHECK(a != c);
  CHECK(b != c);
  CHECK(a == fnv1a64_hex(R"({"lr":0.001,"batch":8})"));
}

TEST_CASE("majority-class accuracy", "[metrics]") {
  std::vector<EventSequence> seqs;
  seqs.emplace_back("a", std::vector<Event>{{1.0, 0}, {2.0, 0}, {3.0, 1}}, 4.0);
  seqs.emplace_back("b", std::vector<Event>{{1.0, 0}, {2.0, 1}}, 3.0);
  Dataset ds(std::move(seqs), 2);
  CHECK(majority_class_accuracy(ds, {0}, {1}) == Catch::Approx(0.5));
}
