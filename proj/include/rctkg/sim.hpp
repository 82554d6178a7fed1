#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rctkg/policies.hpp"
#include "rctkg/trial.hpp"

namespace rctkg {

/// Synthetic ground truth: Bernoulli success probability per (subgroup, arm).
struct Environment {
  std::vector<std::array<double, 2>> truth;
  double tau = 0.0;

  int subgroup_count() const { return static_cast<int>(truth.size()); }
  double probability(int x, Arm arm) const { return truth.at(x)[static_cast<int>(arm)]; }

  /// {x : (mu1 - mu0) / mu0 >= tau}, recomputed on every call.
  std::vector<int> truly_effective() const;

  void validate() const;
};

/// Pilot samples drawn from the environment to seed an informative prior.
struct PilotPrior {
  int per_cell_samples = 0;
  std::vector<int> subgroups;  // empty means every subgroup
};

/*
 * What the stopping rule averages over subgroups:
 *  - misclassification: posterior probability that the current label of x is
 *    wrong (1 - P_x on H+_est, P_x otherwise), i.e. one minus the confidence.
 *  - weighted_loss: g(P_x; lambda), the lambda-weighted version.
 * The two coincide up to the factor lambda = 1 - lambda = 1/2 at the default.
 */
enum class StoppingMeasure { misclassification, weighted_loss };

const char* stopping_measure_name(StoppingMeasure m);
StoppingMeasure parse_stopping_measure(const std::string& text);

struct StoppingRule {
  double beta = 0.95;
  int max_cohorts = 60;
  StoppingMeasure measure = StoppingMeasure::misclassification;
};

struct TrialConfig {
  int subgroups = 0;
  int budget = 0;       // N
  int cohorts = 0;      // K
  int cohort_size = 0;  // M
  LossParams loss;
  PolicySettings policy;
  std::uint64_t seed = 0;
  int replicates = 1000;
  std::optional<StateMatrix> prior;  // pseudo-observations folded into the start state
  std::optional<PilotPrior> pilot;
  std::optional<StoppingRule> stopping;

  void validate() const;
  /// Cohorts the trial may run: K in fixed mode, the cap in stopping mode.
  int max_cohorts() const { return stopping ? stopping->max_cohorts : cohorts; }
};

/// Binomial pilot draws per selected cell, as (successes, samples) pseudo-observations.
StateMatrix build_informative_prior(const Environment& env, int per_cell_samples,
                                    const std::vector<int>& subgroups, std::uint64_t seed);

/// Errors normalized by the size of the true positive / negative sets.
struct ErrorRates {
  double type1 = 0.0;  // e1 / |H+|, 0 when H+ is empty
  double type2 = 0.0;  // e2 / |H-|, 0 when H- is empty
  double total = 0.0;  // lambda * type1 + (1 - lambda) * type2
};

ErrorRates error_rates(const ErrorCounts& counts, int truly_positive, int subgroup_count, double lambda);

struct CohortRecord {
  Allocation allocation;
  CohortOutcome outcome;
  std::vector<double> p_effective;  // after this cohort
};

struct TrialResult {
  StateMatrix initial_state;
  StateMatrix final_state;
  std::vector<double> initial_p_effective;
  std::vector<double> final_p_effective;
  std::vector<CohortRecord> log;
  std::vector<int> estimated_positive;
  std::vector<int> truly_positive;
  ErrorCounts errors;
  ErrorRates error_rates;
  std::vector<bool> correct;  // per subgroup: estimated label matches truth
  std::vector<std::vector<bool>> correct_by_cohort;
  int cohorts_used = 0;
  Allocation tallies;
  std::int64_t probability_evaluations = 0;  // RCT-KG instrumentation
};

/// Mean over subgroups of the chosen stopping measure.
double stopping_statistic(const std::vector<double>& p_effective, double lambda, StoppingMeasure measure);

/// True once stopping_statistic(...) < 1 - beta.
bool confidence_reached(const std::vector<double>& p_effective, double lambda, const StoppingRule& rule);

/// Runs one trial (fixed horizon, or until confidence when cfg.stopping is set).
TrialResult run_trial(const Environment& env, const TrialConfig& cfg);

/// Stopping-rule mode; requires cfg.stopping.
TrialResult run_until_confidence(const Environment& env, const TrialConfig& cfg);

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;
};

Summary summarize(const std::vector<double>& values);

struct MetricsRecord {
  int replicates = 0;
  Summary type1;
  Summary type2;
  Summary total;
  Summary type1_rate;
  Summary type2_rate;
  Summary total_rate;
  Summary cohorts_used;
  std::vector<double> confidence_pct;     // per subgroup
  std::vector<double> confidence_stderr;  // percentage points
  /// [k][x]: confidence after cohort k+1 (fixed-horizon mode only).
  std::vector<std::vector<double>> confidence_by_cohort_pct;
  std::vector<std::array<double, 2>> mean_recruitment;
  /// Mean per-subgroup recruitment of the first cohort.
  std::vector<double> first_cohort_recruitment;
  /// Per-replicate values, in replicate order, for paired comparisons.
  std::vector<double> replicate_totals;
  std::vector<double> replicate_total_rates;
  std::vector<double> replicate_cohorts;
};

/// Per-replicate trial seed derived from (master seed, replicate index).
std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate_index);

/// Runs `replicates` independent trials. `threads` <= 0 picks hardware concurrency;
/// results are identical for every thread count.
MetricsRecord replicate(const Environment& env, const TrialConfig& cfg, int replicates, int threads = 0);

/// Aggregation used by `replicate`, exposed for reuse.
MetricsRecord aggregate(const std::vector<TrialResult>& results, int subgroup_count);

std::vector<TrialResult> run_replicates(const Environment& env, const TrialConfig& cfg, int replicates,
                                        int threads = 0);

}  // namespace rctkg
