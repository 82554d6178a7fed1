#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "rctkg/sim.hpp"

namespace rctkg {

using Cell = std::variant<std::string, std::int64_t, double>;

/// A named result table with a fixed column schema.
struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Cell>> rows;

  void add_row(std::vector<Cell> row);
};

enum class Preset {
  two_subgroup_sweep,
  four_subgroup_confidence,
  trial_length,
  budget_curve,
  cohort_size,
  lambda_tradeoff,
  informative_prior,
};

const char* preset_name(Preset p);
Preset parse_preset(const std::string& text);
std::vector<Preset> all_presets();

inline constexpr std::uint64_t kDefaultMasterSeed = 20190125;

struct ExperimentOptions {
  int replicates = 1000;
  std::uint64_t seed = kDefaultMasterSeed;
  int threads = 0;
  LossParams loss;
};

/// Control 0.5 everywhere; treatment 0.3, 0.45, 0.55, 0.7.
Environment four_subgroup_environment();

/// Control 0.5 everywhere; treatment `treatment_0` in subgroup 0 and 0.7 in subgroup 1.
Environment two_subgroup_environment(double treatment_0);

TrialConfig fixed_horizon_config(int subgroups, int cohorts, int cohort_size, PolicyKind policy,
                                 const ExperimentOptions& opts);

TrialConfig stopping_config(int subgroups, int cohort_size, double beta, int max_cohorts, PolicyKind policy,
                            const ExperimentOptions& opts);

/// One replicated run at one sweep point.
struct ExperimentRun {
  PolicyKind policy;
  double point = 0.0;   // sweep coordinate (theta, beta, budget, m, lambda)
  std::string variant;  // free-form label (prior variant), empty if unused
  MetricsRecord metrics;
};

std::vector<double> two_subgroup_grid();
std::vector<ExperimentRun> two_subgroup_sweep(const ExperimentOptions& opts,
                                              const std::vector<double>& grid = two_subgroup_grid());

std::vector<ExperimentRun> four_subgroup_confidence(const ExperimentOptions& opts,
                                                    const std::vector<PolicyKind>& policies = {
                                                        PolicyKind::rctkg, PolicyKind::uniform,
                                                        PolicyKind::dexfem, PolicyKind::thompson});

inline constexpr int kTrialLengthCap = 60;
std::vector<ExperimentRun> trial_length(const ExperimentOptions& opts, const std::vector<double>& betas = {0.95, 0.90},
                                        const std::vector<PolicyKind>& policies = {
                                            PolicyKind::rctkg, PolicyKind::uniform, PolicyKind::dexfem});

std::vector<ExperimentRun> budget_curve(const ExperimentOptions& opts,
                                        const std::vector<int>& budgets = {200, 400, 600, 800, 1000});

/*
 * RCT-KG is rerun per cohort size. Uniform allocation ignores the state, so
 * its final state has the same law for every m at a fixed budget; one shared
 * run (a single cohort of the whole budget) is reported for every m.
 */
std::vector<ExperimentRun> cohort_size_study(const ExperimentOptions& opts, int budget = 500,
                                             const std::vector<int>& sizes = {25, 50, 100, 250});

std::vector<ExperimentRun> lambda_tradeoff(const ExperimentOptions& opts,
                                           const std::vector<double>& lambdas = {0.1, 0.3, 0.5, 0.7, 0.9});

/// Prior variants: "none", "subgroups 0,3", "subgroups 1,2"; budgets 500 and 1000; RCT-KG and UA.
inline constexpr int kPilotSamples = 50;
std::vector<ExperimentRun> informative_prior_study(const ExperimentOptions& opts,
                                                   const std::vector<int>& budgets = {500, 1000});

/// Runs a preset and renders its tables; the first table is the preset's main result.
std::vector<Table> run_experiment(Preset preset, const ExperimentOptions& opts);

}  // namespace rctkg
