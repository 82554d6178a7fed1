#include <random>

#include "doctest.h"
#include "rctkg/trial.hpp"

using namespace rctkg;

namespace {

StateMatrix random_state(std::mt19937_64& rng, int X, int max_n = 30) {
  StateMatrix s(X);
  for (int x = 0; x < X; ++x)
    for (const Arm arm : kArms) {
      const int n = static_cast<int>(rng() % (max_n + 1));
      s.at(x, arm) = {static_cast<double>(n ? rng() % (n + 1) : 0), static_cast<double>(n)};
    }
  return s;
}

// Posterior expected total error of labelling exactly `positive` as effective.
double subset_error(const std::vector<double>& p, unsigned positive, double lambda) {
  double e = 0.0;
  for (std::size_t x = 0; x < p.size(); ++x)
    e += (positive >> x) & 1u ? (1.0 - lambda) * (1.0 - p[x]) : lambda * p[x];
  return e;
}

}  // namespace

TEST_SUITE("trial_core") {
  TEST_CASE("transition delegates to update cell by cell") {
    StateMatrix s(2);
    Allocation u(2);
    CohortOutcome w(2);
    CHECK(transition(s, u, w) == s);
    u.at(0, Arm::treatment) = 5;
    w.at(0, Arm::treatment) = 3;
    const StateMatrix next = transition(s, u, w);
    CHECK(next.at(0, Arm::treatment) == ArmPosterior{3, 5});
    CHECK(next.at(0, Arm::control) == ArmPosterior{0, 0});
    CHECK(next.at(1, Arm::treatment) == ArmPosterior{0, 0});
  }

  TEST_CASE("two cohorts equal one merged cohort") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
      const StateMatrix s = random_state(rng, 3);
      Allocation u1(3), u2(3), um(3);
      CohortOutcome w1(3), w2(3), wm(3);
      for (int x = 0; x < 3; ++x)
        for (const Arm arm : kArms) {
          u1.at(x, arm) = static_cast<int>(rng() % 6);
          u2.at(x, arm) = static_cast<int>(rng() % 6);
          w1.at(x, arm) = u1.at(x, arm) ? static_cast<int>(rng() % (u1.at(x, arm) + 1)) : 0;
          w2.at(x, arm) = u2.at(x, arm) ? static_cast<int>(rng() % (u2.at(x, arm) + 1)) : 0;
          um.at(x, arm) = u1.at(x, arm) + u2.at(x, arm);
          wm.at(x, arm) = w1.at(x, arm) + w2.at(x, arm);
        }
      const StateMatrix two = transition(transition(s, u1, w1), u2, w2);
      CHECK(two == transition(s, um, wm));
      for (int x = 0; x < 3; ++x)
        for (const Arm arm : kArms) CHECK(two.at(x, arm).s1 >= s.at(x, arm).s1);
    }
  }

  TEST_CASE("transition rejects inconsistent outcomes") {
    StateMatrix s(1);
    Allocation u(1);
    CohortOutcome w(1);
    u.at(0, Arm::control) = 2;
    w.at(0, Arm::control) = 3;
    CHECK_THROWS_AS(transition(s, u, w), ValidationError);
    CHECK_THROWS_AS(transition(s, Allocation(2), CohortOutcome(2)), ValidationError);
  }

  TEST_CASE("g_loss values, continuity and peak") {
    CHECK(g_loss(0.5, 0.5) == 0.25);
    CHECK(g_loss(0.9, 0.5) == doctest::Approx(0.05).epsilon(1e-14));
    for (const double lambda : {0.0, 0.1, 0.3, 0.5, 0.77, 1.0}) {
      CHECK(g_loss(0.0, lambda) == 0.0);
      CHECK(g_loss(1.0, lambda) == 0.0);
      double peak = 0.0, prev = g_loss(0.0, lambda), jump = 0.0;
      for (int i = 1; i <= 200000; ++i) {
        const double p = i / 200000.0;
        const double v = g_loss(p, lambda);
        peak = std::max(peak, v);
        jump = std::max(jump, std::abs(v - prev));
        prev = v;
      }
      CHECK(std::abs(peak - lambda * (1 - lambda)) < 1e-12);
      CHECK(jump < 1e-5);
    }
  }

  TEST_CASE("expected total error and terminal value") {
    const StateMatrix fresh(1);
    CHECK(std::abs(expected_total_error(fresh, {}) - 0.25) < 1e-9);
    CHECK(std::abs(terminal_value(fresh, {}) + 0.25) < 1e-9);
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
      const StateMatrix a = random_state(rng, 1), b = random_state(rng, 1);
      StateMatrix both(2);
      both.subgroup(0) = a.subgroup(0);
      both.subgroup(1) = b.subgroup(0);
      const LossParams lp{0.3, 0.1};
      CHECK(std::abs(expected_total_error(both, lp) - expected_total_error(a, lp) - expected_total_error(b, lp)) < 1e-12);
      const double e = expected_total_error(both, lp);
      CHECK(e >= 0.0);
      CHECK(e <= 2 * 0.7);
      CHECK(terminal_value(both, lp) == -e);
    }
  }

  TEST_CASE("expected error is zero exactly when every P_x is 0 or 1") {
    CHECK(expected_total_error(std::vector<double>{0.0, 1.0, 1.0}, 0.4) == 0.0);
    CHECK(expected_total_error(std::vector<double>{0.0, 0.999, 1.0}, 0.4) > 0.0);
  }

  TEST_CASE("posterior concentration drives expected error down") {
    StateMatrix s(2);
    s.at(0, Arm::control) = {5000, 10000};
    s.at(0, Arm::treatment) = {6000, 10000};
    s.at(1, Arm::control) = {5000, 10000};
    s.at(1, Arm::treatment) = {4000, 10000};
    CHECK(expected_total_error(s, {}) < 0.01);
  }

  TEST_CASE("classify thresholds at 1 - lambda") {
    CHECK(classify(std::vector<double>{0.8}, 0.5) == std::vector<int>{0});
    CHECK(classify(std::vector<double>{0.2}, 0.9) == std::vector<int>{0});
    CHECK(classify(std::vector<double>{0.5}, 0.5) == std::vector<int>{0});
    CHECK(classify(std::vector<double>{0.49}, 0.5).empty());
    CHECK(classify(StateMatrix(3), LossParams{}) == std::vector<int>{0, 1, 2});
  }

  TEST_CASE("classify equals brute-force subset minimization") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
      const int X = 1 + static_cast<int>(rng() % 4);
      const double lambda = unit(rng);
      const StateMatrix s = random_state(rng, X);
      const auto p = effectiveness_probabilities(s, 0.1 * (rng() % 4));
      double best = 1e9;
      for (unsigned mask = 0; mask < (1u << X); ++mask) best = std::min(best, subset_error(p, mask, lambda));
      unsigned chosen = 0;
      for (const int x : classify(p, lambda)) chosen |= 1u << x;
      CHECK(subset_error(p, chosen, lambda) <= best + 1e-12);
      CHECK(std::abs(expected_total_error(p, lambda) - best) < 1e-12);
    }
  }

  TEST_CASE("realized error counts") {
    CHECK(realized_errors({0, 3}, {0, 3}, 0.5) == ErrorCounts{0, 0, 0.0});
    const ErrorCounts e = realized_errors({0, 1}, {0, 3}, 0.5);
    CHECK(e.type1 == 1);
    CHECK(e.type2 == 1);
    CHECK(e.total == 1.0);
    const ErrorCounts f = realized_errors({0, 1, 2, 3}, {}, 0.25);
    CHECK(f.type1 == 0);
    CHECK(f.type2 == 4);
    CHECK(f.total == 3.0);
  }

  TEST_CASE("loss parameter validation") {
    CHECK_THROWS_AS((LossParams{1.5, 0}.validate()), ValidationError);
    CHECK_THROWS_AS((LossParams{0.5, -1}.validate()), ValidationError);
    CHECK_NOTHROW((LossParams{1.0, 0.3}.validate()));
  }

  TEST_CASE("state text round trip") {
    std::mt19937_64 rng(4);
    for (int i = 0; i < 30; ++i) {
      StateMatrix s = random_state(rng, 1 + static_cast<int>(rng() % 5));
      s.at(0, Arm::control) = {1.0 / 3.0, 2.5};
      CHECK(StateMatrix::from_text(s.to_text()) == s);
    }
    const std::string text =
        "# pilot data\nrctkg-state 1\nsubgroups 1\n\n0 treatment 2 4\n0 control 1 3\n";
    const StateMatrix parsed = StateMatrix::from_text(text);
    CHECK(parsed.at(0, Arm::treatment) == ArmPosterior{2, 4});
  }

  TEST_CASE("state text errors name the line") {
    CHECK_THROWS_WITH_AS(StateMatrix::from_text("rctkg-state 1\nsubgroups 1\n0 control 5 3\n0 treatment 0 0\n"),
                         doctest::Contains("line 3"), ValidationError);
    CHECK_THROWS_AS(StateMatrix::from_text("rctkg-state 2\n"), ValidationError);
    CHECK_THROWS_AS(StateMatrix::from_text("rctkg-state 1\nsubgroups 1\n0 control 0 0\n"), ValidationError);
    CHECK_THROWS_AS(StateMatrix::from_text("rctkg-state 1\nsubgroups 1\n0 placebo 0 0\n"), ValidationError);
    CHECK_THROWS_AS(StateMatrix::from_text("rctkg-state 1\nsubgroups 1\n0 control 0 0\n0 control 0 0\n"),
                    ValidationError);
  }
}
