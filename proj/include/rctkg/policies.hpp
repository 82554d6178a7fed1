#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rctkg/rng.hpp"
#include "rctkg/trial.hpp"

namespace rctkg {

enum class PolicyKind { rctkg, uniform, thompson, dexfem, kg_exact, dp_optimal };

const char* policy_name(PolicyKind kind);
PolicyKind parse_policy(const std::string& text);

enum class UniformMode { multinomial, equal_quota };

struct PolicySettings {
  PolicyKind kind = PolicyKind::rctkg;
  UniformMode uniform_mode = UniformMode::multinomial;
  double dexfem_exponent = 1.0;
  /// Remaining cohorts, used only by dp_optimal.
  int dp_horizon = 1;
};

/// Instrumentation for the optimistic action computation.
struct RctkgStats {
  std::int64_t probability_evaluations = 0;
};

/*
 * Optimistic action computation (RCT-KG). Builds the cohort one patient at a
 * time. For a candidate cell (x, y) the score is
 *
 *   q(x, y) = max(V(s + u~ at z_max) - V(s + u* at z_max),
 *                 V(s + u~ at z_min) - V(s + u* at z_min)),   u~ = u* + 1_(x,y)
 *
 * where "at z_max" resolves every selected patient as a success. Only the
 * candidate's subgroup term of V differs between the two states, so each
 * iteration re-scores just the two cells of the subgroup that last grew.
 * Ties go uniformly at random through `rng`.
 */
Allocation rctkg_action(const StateMatrix& s, int cohort_size, const LossParams& lp,
                        TieBreakRng& rng, RctkgStats* stats = nullptr);

/*
 * Alternative reading used only as a diagnostic: previously selected patients
 * are resolved at their posterior-predictive expected success counts and only
 * the candidate patient is resolved optimistically.
 */
Allocation rctkg_incremental_action(const StateMatrix& s, int cohort_size, const LossParams& lp,
                                    TieBreakRng& rng);

Allocation uniform_action(int subgroup_count, int cohort_size, TieBreakRng& rng,
                          UniformMode mode = UniformMode::multinomial);

Allocation thompson_action(const StateMatrix& s, int cohort_size, TieBreakRng& rng);

Allocation dexfem_action(const StateMatrix& s, int cohort_size, TieBreakRng& rng,
                         double exponent = 1.0);

/// Largest-remainder split of `total` proportional to `weights`; ties at random.
std::vector<int> proportional_split(int total, const std::vector<double>& weights, TieBreakRng& rng);

/// Per-subgroup recruitment quotas: floor(M / X) plus seeded largest-remainder extras.
std::vector<int> uniform_quotas(int subgroup_count, int cohort_size, TieBreakRng& rng);

/// Exact posterior-predictive expectation of terminal_value after allocating `u`.
double expected_terminal_value(const StateMatrix& s, const Allocation& u, const LossParams& lp);

/// Number of allocations of M patients over 2X cells, saturating at `cap + 1`.
std::int64_t action_count(int subgroup_count, int cohort_size, std::int64_t cap = 1'000'000'000);

inline constexpr std::int64_t kKgExactMaxActions = 10'000;

/// Every allocation in A, lexicographic order.
std::vector<Allocation> enumerate_allocations(int subgroup_count, int cohort_size);

struct KgExactResult {
  Allocation action;
  double value = 0.0;  // expected terminal value of `action`
};

/// One-step lookahead over the full action set (small instances only).
KgExactResult kg_exact(const StateMatrix& s, int cohort_size, const LossParams& lp);
Allocation kg_exact_action(const StateMatrix& s, int cohort_size, const LossParams& lp);

struct DpResult {
  double value = 0.0;  // optimal expected terminal value
  Allocation first_action;
};

inline constexpr int kDpMaxSubgroups = 2;
inline constexpr int kDpMaxPatients = 8;

/// Bellman recursion over all reachable count states (X <= 2, K * M <= 8).
DpResult dp_optimal(const StateMatrix& s, int horizon, int cohort_size, const LossParams& lp);

/// Dispatches on `settings.kind`.
Allocation choose_action(const PolicySettings& settings, const StateMatrix& s, int cohort_size,
                         const LossParams& lp, TieBreakRng& rng, RctkgStats* stats = nullptr);

}  // namespace rctkg
