#include "rctkg/experiments.hpp"

#include <array>
#include <cmath>

namespace rctkg {

void Table::add_row(std::vector<Cell> row) {
  if (row.size() != columns.size())
    throw std::logic_error("table " + name + ": row has " + std::to_string(row.size()) + " cells, expected " +
                           std::to_string(columns.size()));
  rows.push_back(std::move(row));
}

namespace {

struct PresetEntry {
  Preset preset;
  const char* name;
};

constexpr std::array<PresetEntry, 7> kPresets{{
    {Preset::two_subgroup_sweep, "TWO_SUBGROUP_SWEEP"},
    {Preset::four_subgroup_confidence, "FOUR_SUBGROUP_CONFIDENCE"},
    {Preset::trial_length, "TRIAL_LENGTH"},
    {Preset::budget_curve, "BUDGET_CURVE"},
    {Preset::cohort_size, "COHORT_SIZE"},
    {Preset::lambda_tradeoff, "LAMBDA_TRADEOFF"},
    {Preset::informative_prior, "INFORMATIVE_PRIOR"},
}};

constexpr int kCohortSize = 100;

std::string policy_label(PolicyKind k) { return policy_name(k); }

}  // namespace

const char* preset_name(Preset p) {
  for (const auto& e : kPresets)
    if (e.preset == p) return e.name;
  return "?";
}

Preset parse_preset(const std::string& text) {
  std::string upper;
  for (const char c : text) upper += c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& e : kPresets)
    if (upper == e.name) return e.preset;
  std::string known;
  for (const auto& e : kPresets) known += std::string(known.empty() ? "" : ", ") + e.name;
  throw ValidationError("unknown preset '" + text + "' (known: " + known + ")");
}

std::vector<Preset> all_presets() {
  std::vector<Preset> out;
  for (const auto& e : kPresets) out.push_back(e.preset);
  return out;
}

Environment four_subgroup_environment() {
  return Environment{{{0.5, 0.3}, {0.5, 0.45}, {0.5, 0.55}, {0.5, 0.7}}, 0.0};
}

Environment two_subgroup_environment(double treatment_0) {
  return Environment{{{0.5, treatment_0}, {0.5, 0.7}}, 0.0};
}

TrialConfig fixed_horizon_config(int subgroups, int cohorts, int cohort_size, PolicyKind policy,
                                 const ExperimentOptions& opts) {
  TrialConfig cfg;
  cfg.subgroups = subgroups;
  cfg.cohorts = cohorts;
  cfg.cohort_size = cohort_size;
  cfg.budget = cohorts * cohort_size;
  cfg.loss = opts.loss;
  cfg.policy.kind = policy;
  cfg.seed = opts.seed;
  cfg.replicates = opts.replicates;
  return cfg;
}

TrialConfig stopping_config(int subgroups, int cohort_size, double beta, int max_cohorts, PolicyKind policy,
                            const ExperimentOptions& opts) {
  TrialConfig cfg = fixed_horizon_config(subgroups, 0, cohort_size, policy, opts);
  cfg.stopping = StoppingRule{beta, max_cohorts};
  return cfg;
}

namespace {

ExperimentRun run_point(const Environment& env, const TrialConfig& cfg, double point,
                        const ExperimentOptions& opts, std::string variant = {}) {
  Environment e = env;
  e.tau = cfg.loss.tau;
  return {cfg.policy.kind, point, std::move(variant), replicate(e, cfg, opts.replicates, opts.threads)};
}

}  // namespace

std::vector<double> two_subgroup_grid() {
  std::vector<double> grid;
  for (int i = 51; i <= 70; ++i) grid.push_back(i / 100.0);
  return grid;
}

std::vector<ExperimentRun> two_subgroup_sweep(const ExperimentOptions& opts, const std::vector<double>& grid) {
  std::vector<ExperimentRun> runs;
  for (const double theta : grid)
    for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform})
      runs.push_back(run_point(two_subgroup_environment(theta), fixed_horizon_config(2, 10, kCohortSize, k, opts),
                               theta, opts));
  return runs;
}

std::vector<ExperimentRun> four_subgroup_confidence(const ExperimentOptions& opts,
                                                    const std::vector<PolicyKind>& policies) {
  std::vector<ExperimentRun> runs;
  for (const PolicyKind k : policies)
    runs.push_back(run_point(four_subgroup_environment(), fixed_horizon_config(4, 10, kCohortSize, k, opts), 10, opts));
  return runs;
}

std::vector<ExperimentRun> trial_length(const ExperimentOptions& opts, const std::vector<double>& betas,
                                        const std::vector<PolicyKind>& policies) {
  std::vector<ExperimentRun> runs;
  for (const double beta : betas)
    for (const PolicyKind k : policies)
      runs.push_back(run_point(four_subgroup_environment(),
                               stopping_config(4, kCohortSize, beta, kTrialLengthCap, k, opts), beta, opts));
  return runs;
}

std::vector<ExperimentRun> budget_curve(const ExperimentOptions& opts, const std::vector<int>& budgets) {
  std::vector<ExperimentRun> runs;
  for (const int budget : budgets) {
    if (budget % kCohortSize != 0) throw ValidationError("budget_curve: budgets must be multiples of 100");
    for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform, PolicyKind::dexfem, PolicyKind::thompson})
      runs.push_back(run_point(four_subgroup_environment(),
                               fixed_horizon_config(4, budget / kCohortSize, kCohortSize, k, opts), budget, opts));
  }
  return runs;
}

std::vector<ExperimentRun> cohort_size_study(const ExperimentOptions& opts, int budget, const std::vector<int>& sizes) {
  std::vector<ExperimentRun> runs;
  const ExperimentRun shared = run_point(four_subgroup_environment(),
                                         fixed_horizon_config(4, 1, budget, PolicyKind::uniform, opts), budget, opts);
  for (const int m : sizes) {
    if (m < 1 || budget % m != 0) throw ValidationError("cohort_size: every m must divide the budget");
    runs.push_back(run_point(four_subgroup_environment(),
                             fixed_horizon_config(4, budget / m, m, PolicyKind::rctkg, opts), m, opts));
    ExperimentRun ua = shared;
    ua.point = m;
    runs.push_back(std::move(ua));
  }
  return runs;
}

std::vector<ExperimentRun> lambda_tradeoff(const ExperimentOptions& opts, const std::vector<double>& lambdas) {
  std::vector<ExperimentRun> runs;
  for (const double lambda : lambdas) {
    ExperimentOptions o = opts;
    o.loss.lambda = lambda;
    for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform})
      runs.push_back(run_point(four_subgroup_environment(), fixed_horizon_config(4, 10, kCohortSize, k, o), lambda, o));
  }
  return runs;
}

std::vector<ExperimentRun> informative_prior_study(const ExperimentOptions& opts, const std::vector<int>& budgets) {
  struct Variant {
    const char* label;
    std::vector<int> subgroups;
  };
  const std::vector<Variant> variants{{"none", {}}, {"subgroups 0,3", {0, 3}}, {"subgroups 1,2", {1, 2}}};
  std::vector<ExperimentRun> runs;
  for (const auto& v : variants)
    for (const int budget : budgets)
      for (const PolicyKind k : {PolicyKind::rctkg, PolicyKind::uniform}) {
        TrialConfig cfg = fixed_horizon_config(4, budget / kCohortSize, kCohortSize, k, opts);
        if (!v.subgroups.empty()) cfg.pilot = PilotPrior{kPilotSamples, v.subgroups};
        runs.push_back(run_point(four_subgroup_environment(), cfg, budget, opts, v.label));
      }
  return runs;
}

namespace {

std::vector<Table> sweep_tables(const std::vector<ExperimentRun>& runs) {
  Table t{"two_subgroup_sweep",
          {"policy", "treatment_0", "type1", "total_error", "total_error_stderr", "error_rate", "error_rate_stderr"},
          {}};
  for (const auto& r : runs)
    t.add_row({policy_label(r.policy), r.point, r.metrics.type1.mean, r.metrics.total.mean, r.metrics.total.stderr_,
               r.metrics.total_rate.mean, r.metrics.total_rate.stderr_});
  return {t};
}

std::vector<Table> confidence_tables(const std::vector<ExperimentRun>& runs) {
  Table conf{"confidence", {"policy", "subgroup", "confidence_pct", "stderr"}, {}};
  Table by_cohort{"confidence_by_cohort", {"policy", "cohort", "subgroup", "confidence_pct"}, {}};
  Table recruit{"recruitment", {"policy", "subgroup", "control", "treatment", "total", "first_cohort"}, {}};
  for (const auto& r : runs) {
    const auto& m = r.metrics;
    for (std::size_t x = 0; x < m.confidence_pct.size(); ++x) {
      const auto sg = static_cast<std::int64_t>(x);
      conf.add_row({policy_label(r.policy), sg, m.confidence_pct[x], m.confidence_stderr[x]});
      recruit.add_row({policy_label(r.policy), sg, m.mean_recruitment[x][0], m.mean_recruitment[x][1],
                       m.mean_recruitment[x][0] + m.mean_recruitment[x][1], m.first_cohort_recruitment[x]});
    }
    for (std::size_t k = 0; k < m.confidence_by_cohort_pct.size(); ++k)
      for (std::size_t x = 0; x < m.confidence_by_cohort_pct[k].size(); ++x)
        by_cohort.add_row({policy_label(r.policy), static_cast<std::int64_t>(k + 1), static_cast<std::int64_t>(x),
                           m.confidence_by_cohort_pct[k][x]});
  }
  return {conf, recruit, by_cohort};
}

std::vector<Table> length_tables(const std::vector<ExperimentRun>& runs) {
  Table t{"trial_length", {"policy", "beta", "mean_cohorts", "stderr", "error_rate", "error_rate_stderr"}, {}};
  for (const auto& r : runs)
    t.add_row({policy_label(r.policy), r.point, r.metrics.cohorts_used.mean, r.metrics.cohorts_used.stderr_,
               r.metrics.total_rate.mean, r.metrics.total_rate.stderr_});
  return {t};
}

std::vector<Table> error_tables(const std::string& name, const std::string& axis,
                                const std::vector<ExperimentRun>& runs, bool axis_is_integer) {
  Table t{name,
          {"policy", axis, "type1", "type1_stderr", "type2", "type2_stderr", "total_error", "total_error_stderr",
           "error_rate", "error_rate_stderr"},
          {}};
  for (const auto& r : runs) {
    const auto& m = r.metrics;
    const Cell point = axis_is_integer ? Cell{static_cast<std::int64_t>(std::llround(r.point))} : Cell{r.point};
    t.add_row({policy_label(r.policy), point, m.type1.mean, m.type1.stderr_, m.type2.mean, m.type2.stderr_,
               m.total.mean, m.total.stderr_, m.total_rate.mean, m.total_rate.stderr_});
  }
  return {t};
}

std::vector<Table> prior_tables(const std::vector<ExperimentRun>& runs) {
  Table main{"informative_prior",
             {"prior", "budget", "rctkg_error_rate", "rctkg_stderr", "uniform_error_rate", "uniform_stderr",
              "rate_difference", "relative_reduction", "count_difference"},
             {}};
  Table first{"informative_prior_first_cohort", {"prior", "budget", "subgroup", "rctkg_first_cohort"}, {}};
  for (std::size_t i = 0; i + 1 < runs.size(); i += 2) {
    const auto& kg = runs[i].metrics;
    const auto& ua = runs[i + 1].metrics;
    const auto budget = static_cast<std::int64_t>(std::llround(runs[i].point));
    const double diff = ua.total_rate.mean - kg.total_rate.mean;
    const double rel = ua.total_rate.mean > 0.0 ? diff / ua.total_rate.mean : 0.0;
    main.add_row({runs[i].variant, budget, kg.total_rate.mean, kg.total_rate.stderr_, ua.total_rate.mean,
                  ua.total_rate.stderr_, diff, rel, ua.total.mean - kg.total.mean});
    for (std::size_t x = 0; x < kg.first_cohort_recruitment.size(); ++x)
      first.add_row({runs[i].variant, budget, static_cast<std::int64_t>(x), kg.first_cohort_recruitment[x]});
  }
  return {main, first};
}

}  // namespace

std::vector<Table> run_experiment(Preset preset, const ExperimentOptions& opts) {
  if (opts.replicates < 1) throw ValidationError("replicates: must be at least 1");
  opts.loss.validate();
  switch (preset) {
    case Preset::two_subgroup_sweep:
      return sweep_tables(two_subgroup_sweep(opts));
    case Preset::four_subgroup_confidence:
      return confidence_tables(four_subgroup_confidence(opts));
    case Preset::trial_length:
      return length_tables(trial_length(opts));
    case Preset::budget_curve:
      return error_tables("budget_curve", "budget", budget_curve(opts), true);
    case Preset::cohort_size:
      return error_tables("cohort_size", "cohort_size", cohort_size_study(opts), true);
    case Preset::lambda_tradeoff:
      return error_tables("lambda_tradeoff", "lambda", lambda_tradeoff(opts), false);
    case Preset::informative_prior:
      return prior_tables(informative_prior_study(opts));
  }
  throw ValidationError("unknown preset");
}

}  // namespace rctkg
