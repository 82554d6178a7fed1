#include <algorithm>
#include <map>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "rctkg/policies.hpp"

using namespace rctkg;

namespace {

StateMatrix random_state(std::mt19937_64& rng, int X, int max_n = 20) {
  StateMatrix s(X);
  for (int x = 0; x < X; ++x)
    for (const Arm arm : kArms) {
      const int n = static_cast<int>(rng() % (max_n + 1));
      s.at(x, arm) = {static_cast<double>(n ? rng() % (n + 1) : 0), static_cast<double>(n)};
    }
  return s;
}

double oracle_g(double p, double lambda) { return p >= 1 - lambda ? (1 - lambda) * (1 - p) : lambda * p; }

// Independent transcription of the optimistic scoring rule.
double oracle_score(const SubgroupPosterior& base, int c, int t, Arm arm, double lambda) {
  auto resolved = [&](int cc, int tt, bool success) {
    SubgroupPosterior sp = base;
    sp.control.s1 += cc;
    sp.treatment.s1 += tt;
    if (success) {
      sp.control.s0 += cc;
      sp.treatment.s0 += tt;
    }
    return oracle::grid_superiority(sp, 0.0, 40000);
  };
  const int dc = arm == Arm::control, dt = 1 - dc;
  double best = -1e9;
  for (const bool success : {true, false})
    best = std::max(best, oracle_g(resolved(c, t, success), lambda) - oracle_g(resolved(c + dc, t + dt, success), lambda));
  return best;
}

// Exact E[terminal value] of a multinomial uniform cohort, by enumerating allocations.
double uniform_expected_value(const StateMatrix& s, int M, const LossParams& lp) {
  const int cells = 2 * s.subgroup_count();
  double total = 0.0;
  for (const auto& u : enumerate_allocations(s.subgroup_count(), M)) {
    double log_p = std::lgamma(M + 1.0) - M * std::log(static_cast<double>(cells));
    for (int x = 0; x < s.subgroup_count(); ++x)
      for (const Arm arm : kArms) log_p -= std::lgamma(u.at(x, arm) + 1.0);
    total += std::exp(log_p) * expected_terminal_value(s, u, lp);
  }
  return total;
}

}  // namespace

TEST_SUITE("policies") {
  TEST_CASE("every policy conserves the cohort size") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 40; ++i) {
      const int X = 1 + static_cast<int>(rng() % 4);
      const int M = 1 + static_cast<int>(rng() % 40);
      const StateMatrix s = random_state(rng, X);
      TieBreakRng tie(rng(), 0);
      for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform, PolicyKind::thompson, PolicyKind::dexfem}) {
        const Allocation u = choose_action({k}, s, M, {}, tie);
        CHECK(u.total() == M);
        CHECK_NOTHROW(u.validate());
      }
      const Allocation q = uniform_action(X, M, tie, UniformMode::equal_quota);
      CHECK(q.total() == M);
    }
    const StateMatrix tiny = random_state(rng, 2, 4);
    TieBreakRng tie(5, 0);
    CHECK(choose_action({PolicyKind::kg_exact}, tiny, 3, {}, tie).total() == 3);
    CHECK(choose_action({PolicyKind::dp_optimal, UniformMode::multinomial, 1.0, 2}, tiny, 3, {}, tie).total() == 3);
  }

  TEST_CASE("policies reject an empty cohort") {
    TieBreakRng tie(1, 0);
    const StateMatrix s(2);
    CHECK_THROWS_AS(rctkg_action(s, 0, {}, tie), ValidationError);
    CHECK_THROWS_AS(uniform_action(2, 0, tie), ValidationError);
    CHECK_THROWS_AS(thompson_action(s, 0, tie), ValidationError);
    CHECK_THROWS_AS(dexfem_action(s, 0, tie), ValidationError);
  }

  TEST_CASE("same seed replays the same action") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 20; ++i) {
      const StateMatrix s = random_state(rng, 3);
      const std::uint64_t seed = rng();
      for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform, PolicyKind::thompson, PolicyKind::dexfem}) {
        TieBreakRng a(seed, 4), b(seed, 4);
        CHECK(choose_action({k}, s, 30, {}, a) == choose_action({k}, s, 30, {}, b));
      }
    }
  }

  TEST_CASE("RCT-KG on a fresh single subgroup is a pure tie at the first patient") {
    const StateMatrix s(1);
    const SubgroupPosterior& sp = s.subgroup(0);
    CHECK(std::abs(oracle_score(sp, 0, 0, Arm::control, 0.5) - oracle_score(sp, 0, 0, Arm::treatment, 0.5)) < 1e-9);
    std::map<int, int> first_arm;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      TieBreakRng tie(seed, 0);
      const Allocation u = rctkg_action(s, 2, {}, tie);
      CHECK(u.total() == 2);
      TieBreakRng one(seed, 0);
      ++first_arm[rctkg_action(s, 1, {}, one).at(0, Arm::treatment)];
    }
    // Both arms win the tie a reasonable share of the time.
    CHECK(first_arm[0] > 60);
    CHECK(first_arm[1] > 60);
  }

  TEST_CASE("RCT-KG favours the fresh subgroup when the other is saturated") {
    StateMatrix s(2);
    s.at(0, Arm::control) = {500, 1000};
    s.at(0, Arm::treatment) = {500, 1000};
    // The four first-patient scores: the fresh subgroup wins by a wide margin.
    const double heavy_c = oracle_score(s.subgroup(0), 0, 0, Arm::control, 0.5);
    const double heavy_t = oracle_score(s.subgroup(0), 0, 0, Arm::treatment, 0.5);
    const double fresh_c = oracle_score(s.subgroup(1), 0, 0, Arm::control, 0.5);
    const double fresh_t = oracle_score(s.subgroup(1), 0, 0, Arm::treatment, 0.5);
    CHECK(std::min(fresh_c, fresh_t) > 10 * std::max(heavy_c, heavy_t));

    // Independent replay of the greedy build. Both subgroups are symmetric in
    // their arms, so the subgroup totals do not depend on how ties are broken.
    int grown[2][2] = {};
    for (int step = 0; step < 10; ++step) {
      double best = -1e9;
      int bx = 0, by = 0;
      for (int x = 0; x < 2; ++x)
        for (const Arm arm : kArms) {
          const double q = oracle_score(s.subgroup(x), grown[x][0], grown[x][1], arm, 0.5);
          if (q > best + 1e-12) {
            best = q;
            bx = x;
            by = static_cast<int>(arm);
          }
        }
      ++grown[bx][by];
    }
    const int to_fresh = grown[1][0] + grown[1][1];
    // Resolving the whole batch optimistically makes each extra fresh patient
    // worth less than a first heavy patient once seven are placed.
    CHECK(to_fresh == 7);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      TieBreakRng tie(seed, 0);
      const Allocation u = rctkg_action(s, 10, {}, tie);
      CHECK(u.subgroup_total(1) == to_fresh);
      CHECK(u.subgroup_total(0) == 10 - to_fresh);
      for (int M = 1; M <= 7; ++M) {
        TieBreakRng small(seed, 0);
        CHECK(rctkg_action(s, M, {}, small).subgroup_total(1) == M);
      }
      TieBreakRng inc(seed, 0);
      CHECK(rctkg_incremental_action(s, 10, {}, inc).subgroup_total(1) == 10);
    }
  }

  TEST_CASE("RCT-KG matches an independent transcription of the scoring rule") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 6; ++i) {
      const StateMatrix s = random_state(rng, 2, 12);
      TieBreakRng tie(i, 0);
      const Allocation u = rctkg_action(s, 1, {}, tie);
      double best = -1e9, chosen = 0.0;
      for (int x = 0; x < 2; ++x)
        for (const Arm arm : kArms) {
          const double q = oracle_score(s.subgroup(x), 0, 0, arm, 0.5);
          best = std::max(best, q);
          if (u.at(x, arm) == 1) chosen = q;
        }
      CHECK(chosen >= best - 1e-6);
    }
  }

  TEST_CASE("fresh two-subgroup cohort of 100 splits 50/50 across subgroups") {
    const StateMatrix s(2);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      TieBreakRng tie(seed, 0);
      const Allocation u = rctkg_action(s, 100, {}, tie);
      CHECK(u.subgroup_total(0) == 50);
      CHECK(u.subgroup_total(1) == 50);
      TieBreakRng tie2(seed, 0);
      const Allocation inc = rctkg_incremental_action(s, 100, {}, tie2);
      for (int x = 0; x < 2; ++x)
        for (const Arm arm : kArms) CHECK(std::abs(inc.at(x, arm) - 25) <= 1);
    }
  }

  TEST_CASE("RCT-KG probability evaluations stay within 8 M X") {
    std::mt19937_64 rng(4);
    for (const int X : {1, 2, 4, 8})
      for (const int M : {1, 5, 25, 100, 300}) {
        for (const double tau : {0.0, 0.2}) {
          if (tau > 0 && M > 25) continue;
          const StateMatrix s = random_state(rng, X, 50);
          RctkgStats stats;
          TieBreakRng tie(rng(), 0);
          rctkg_action(s, M, {0.5, tau}, tie, &stats);
          CHECK(stats.probability_evaluations <= 8LL * M * X);
        }
      }
  }

  TEST_CASE("RCT-KG is equivariant under subgroup relabelling") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20; ++i) {
      const StateMatrix s = random_state(rng, 3, 40);
      StateMatrix perm(3);
      const int order[3] = {2, 0, 1};
      for (int x = 0; x < 3; ++x) perm.subgroup(x) = s.subgroup(order[x]);
      TieBreakRng a(7, 0), b(7, 0);
      const Allocation u = rctkg_action(s, 12, {}, a);
      const Allocation v = rctkg_action(perm, 12, {}, b);
      bool tie_free = true;
      for (int x = 0; x < 3; ++x)
        for (int y = 0; y < 3; ++y)
          if (x != y && s.subgroup(x) == s.subgroup(y)) tie_free = false;
      if (!tie_free) continue;
      for (int x = 0; x < 3; ++x)
        for (const Arm arm : kArms) CHECK(v.at(x, arm) == u.at(order[x], arm));
    }
  }

  TEST_CASE("uniform allocation averages M / 2X per cell") {
    double cell_sum[8] = {};
    const int reps = 4000;
    for (int r = 0; r < reps; ++r) {
      TieBreakRng tie(r, 0);
      const Allocation u = uniform_action(4, 100, tie);
      CHECK(u.total() == 100);
      for (int x = 0; x < 4; ++x)
        for (const Arm arm : kArms) cell_sum[2 * x + static_cast<int>(arm)] += u.at(x, arm);
    }
    // Per-cell count is Binomial(100, 1/8): sd 3.31, so the mean has sd 0.052.
    for (const double v : cell_sum) CHECK(std::abs(v / reps - 12.5) < 0.3);
    TieBreakRng tie(1, 0);
    const Allocation q = uniform_action(3, 10, tie, UniformMode::equal_quota);
    for (int x = 0; x < 3; ++x) CHECK(q.subgroup_total(x) >= 3);
  }

  TEST_CASE("Thompson allocation follows the posterior") {
    StateMatrix s(1);
    s.at(0, Arm::control) = {5, 100};
    s.at(0, Arm::treatment) = {95, 100};
    TieBreakRng tie(9, 0);
    const Allocation u = thompson_action(s, 10000, tie);
    CHECK(u.at(0, Arm::treatment) >= 9500);

    const StateMatrix sym(1);
    TieBreakRng tie2(10, 0);
    const Allocation v = thompson_action(sym, 20000, tie2);
    CHECK(std::abs(v.at(0, Arm::treatment) / 20000.0 - 0.5) < 0.015);

    std::mt19937_64 rng(6);
    for (int i = 0; i < 20; ++i) {
      TieBreakRng t(i, 0);
      const Allocation w = thompson_action(random_state(rng, 3), 31, t);
      const int lo = std::min({w.subgroup_total(0), w.subgroup_total(1), w.subgroup_total(2)});
      const int hi = std::max({w.subgroup_total(0), w.subgroup_total(1), w.subgroup_total(2)});
      CHECK(hi - lo <= 1);
    }
  }

  TEST_CASE("DexFEM splits in proportion to posterior variance") {
    TieBreakRng tie(1, 0);
    StateMatrix s(2);
    s.at(1, Arm::control) = {3, 7};
    s.at(1, Arm::treatment) = {3, 7};
    const Allocation u = dexfem_action(s, 41, tie);
    for (int x = 0; x < 2; ++x) CHECK(std::abs(u.at(x, Arm::control) - u.at(x, Arm::treatment)) <= 1);
    CHECK(proportional_split(100, {3.0, 1.0}, tie) == std::vector<int>{75, 25});
    CHECK(proportional_split(100, {1.0, 0.0}, tie) == std::vector<int>{100, 0});
    CHECK(proportional_split(0, {1.0, 2.0}, tie) == std::vector<int>{0, 0});
    // Larger variance arm gets more patients.
    StateMatrix t(1);
    t.at(0, Arm::treatment) = {50, 100};
    const Allocation v = dexfem_action(t, 100, tie);
    CHECK(v.at(0, Arm::control) > v.at(0, Arm::treatment));
    CHECK_THROWS_AS(proportional_split(3, {-1.0, 1.0}, tie), ValidationError);
  }

  TEST_CASE("exact knowledge gradient") {
    const StateMatrix fresh(1);
    const auto actions = enumerate_allocations(1, 1);
    REQUIRE(actions.size() == 2);
    CHECK(std::abs(expected_terminal_value(fresh, actions[0], {}) - expected_terminal_value(fresh, actions[1], {})) <
          1e-9);
    CHECK(action_count(1, 50) == 51);
    CHECK(action_count(2, 8) == 165);
    CHECK(static_cast<std::int64_t>(enumerate_allocations(2, 8).size()) == 165);
    CHECK_THROWS_AS(kg_exact(StateMatrix(4), 30, {}), ValidationError);

    StateMatrix s(1);
    s.at(0, Arm::control) = {0, 4};
    s.at(0, Arm::treatment) = {2, 2};
    const KgExactResult kg = kg_exact(s, 2, {});
    // Independent enumeration with Polya-urn predictive masses and grid probabilities.
    double best = -1e9;
    Allocation best_u;
    for (const auto& u : enumerate_allocations(1, 2)) {
      double v = 0.0;
      const int c = u.at(0, Arm::control), t = u.at(0, Arm::treatment);
      for (int wc = 0; wc <= c; ++wc)
        for (int wt = 0; wt <= t; ++wt) {
          SubgroupPosterior next = s.subgroup(0);
          next.control = {next.control.s0 + wc, next.control.s1 + c};
          next.treatment = {next.treatment.s0 + wt, next.treatment.s1 + t};
          v -= oracle::polya_urn(s.at(0, Arm::control), c, wc) * oracle::polya_urn(s.at(0, Arm::treatment), t, wt) *
               oracle_g(oracle::grid_superiority(next, 0.0), 0.5);
        }
      if (v > best + 1e-9) {
        best = v;
        best_u = u;
      }
    }
    CHECK(kg.action == best_u);
    CHECK(std::abs(kg.value - best) < 1e-6);
    // Pinned regression value for this instance.
    CHECK(kg.action.at(0, Arm::control) == 2);
    CHECK(kg.value == doctest::Approx(-0.0029693046).epsilon(1e-8));

    std::mt19937_64 rng(7);
    for (int i = 0; i < 10; ++i) {
      const StateMatrix r = random_state(rng, 2, 6);
      const KgExactResult k = kg_exact(r, 3, {});
      Allocation even(2);
      even.at(0, Arm::control) = 1;
      even.at(0, Arm::treatment) = 1;
      even.at(1, Arm::control) = 1;
      CHECK(k.value >= expected_terminal_value(r, even, {}) - 1e-12);
    }
  }

  TEST_CASE("dynamic program") {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 10; ++i) {
      const StateMatrix s = random_state(rng, 1 + static_cast<int>(rng() % 2), 6);
      const int M = 1 + static_cast<int>(rng() % 4);
      CHECK(std::abs(dp_optimal(s, 1, M, {}).value - kg_exact(s, M, {}).value) < 1e-12);
    }
    // More budget never hurts the Bayes-optimal policy.
    StateMatrix s(1);
    s.at(0, Arm::control) = {1, 3};
    double prev = terminal_value(s, {});
    for (int k = 1; k <= 6; ++k) {
      const double v = dp_optimal(s, k, 1, {}).value;
      CHECK(v >= prev - 1e-12);
      prev = v;
    }
    CHECK_THROWS_AS(dp_optimal(StateMatrix(3), 1, 1, {}), ValidationError);
    CHECK_THROWS_AS(dp_optimal(StateMatrix(1), 3, 3, {}), ValidationError);
  }

  TEST_CASE("tiny instances: DP >= RCT-KG >= uniform by exhaustive enumeration") {
    std::mt19937_64 rng(9);
    for (int i = 0; i < 12; ++i) {
      const StateMatrix s = random_state(rng, 1, 6);
      for (int M = 1; M <= 4; ++M) {
        TieBreakRng tie(i, 0);
        const double dp = dp_optimal(s, 1, M, {}).value;
        const double kg = expected_terminal_value(s, rctkg_action(s, M, {}, tie), {});
        const double ua = uniform_expected_value(s, M, {});
        CHECK(dp >= kg - 1e-12);
        CHECK(kg >= ua - 0.02);
      }
    }
  }

  TEST_CASE("incremental diagnostic differs from the literal reading only in arm placement") {
    std::mt19937_64 rng(10);
    for (int i = 0; i < 5; ++i) {
      const StateMatrix s = random_state(rng, 2, 10);
      TieBreakRng a(i, 0), b(i, 0);
      CHECK(rctkg_action(s, 6, {}, a).total() == rctkg_incremental_action(s, 6, {}, b).total());
    }
  }

  TEST_CASE("policy names round trip") {
    for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform, PolicyKind::thompson, PolicyKind::dexfem,
                               PolicyKind::kg_exact, PolicyKind::dp_optimal})
      CHECK(parse_policy(policy_name(k)) == k);
    CHECK(parse_policy("ua") == PolicyKind::uniform);
    CHECK(parse_policy("RCT-KG") == PolicyKind::rctkg);
    CHECK_THROWS_AS(parse_policy("gittins"), ValidationError);
  }
}
