#include "rctkg/sim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

namespace rctkg {

std::vector<int> Environment::truly_effective() const {
  std::vector<int> out;
  for (int x = 0; x < subgroup_count(); ++x) {
    const double mu0 = probability(x, Arm::control);
    const double mu1 = probability(x, Arm::treatment);
    if ((mu1 - mu0) / mu0 >= tau) out.push_back(x);
  }
  return out;
}

void Environment::validate() const {
  if (truth.empty()) throw ValidationError("environment needs at least one subgroup");
  for (const auto& cell : truth)
    for (const double p : cell)
      if (!(p > 0.0 && p < 1.0)) throw ValidationError("true success probabilities must lie in (0, 1)");
  if (!(tau >= 0.0)) throw ValidationError("tau must be nonnegative");
}

void TrialConfig::validate() const {
  if (subgroups < 1) throw ValidationError("subgroups: must be at least 1");
  if (cohort_size < 1) throw ValidationError("cohort_size: must be at least 1");
  loss.validate();
  if (replicates < 1) throw ValidationError("replicates: must be at least 1");
  if (stopping) {
    if (!(stopping->beta > 0.5 && stopping->beta < 1.0))
      throw ValidationError("stopping.beta: must lie in (0.5, 1)");
    if (stopping->max_cohorts < 0) throw ValidationError("stopping.max_cohorts: must be nonnegative");
  } else {
    if (cohorts < 0) throw ValidationError("cohorts: must be nonnegative");
    if (static_cast<long long>(cohorts) * cohort_size != budget)
      throw ValidationError("budget, cohorts, cohort_size: budget must equal cohorts * cohort_size (" +
                            std::to_string(budget) + " != " + std::to_string(cohorts) + " * " +
                            std::to_string(cohort_size) + ")");
  }
  if (prior) {
    prior->validate();
    if (prior->subgroup_count() != subgroups) throw ValidationError("prior: subgroup count mismatch");
  }
  if (pilot) {
    if (pilot->per_cell_samples < 0) throw ValidationError("pilot.samples: must be nonnegative");
    for (const int x : pilot->subgroups)
      if (x < 0 || x >= subgroups) throw ValidationError("pilot.subgroups: index out of range");
  }
}

StateMatrix build_informative_prior(const Environment& env, int per_cell_samples,
                                    const std::vector<int>& subgroups, std::uint64_t seed) {
  env.validate();
  if (per_cell_samples < 0) throw ValidationError("pilot sample count must be nonnegative");
  StateMatrix prior(env.subgroup_count());
  Engine engine = make_stream(seed, StreamDomain::prior, 0);
  for (int x = 0; x < env.subgroup_count(); ++x) {
    const bool selected =
        subgroups.empty() || std::find(subgroups.begin(), subgroups.end(), x) != subgroups.end();
    if (!selected || per_cell_samples == 0) continue;
    for (const Arm arm : kArms) {
      std::binomial_distribution<int> draw(per_cell_samples, env.probability(x, arm));
      prior.at(x, arm) = {static_cast<double>(draw(engine)), static_cast<double>(per_cell_samples)};
    }
  }
  return prior;
}

const char* stopping_measure_name(StoppingMeasure m) {
  return m == StoppingMeasure::misclassification ? "misclassification" : "weighted_loss";
}

StoppingMeasure parse_stopping_measure(const std::string& text) {
  if (text == "misclassification") return StoppingMeasure::misclassification;
  if (text == "weighted_loss") return StoppingMeasure::weighted_loss;
  throw ValidationError("unknown stopping measure '" + text + "' (expected misclassification or weighted_loss)");
}

double stopping_statistic(const std::vector<double>& p_effective, double lambda, StoppingMeasure measure) {
  if (p_effective.empty()) return 0.0;
  double sum = 0.0;
  for (const double p : p_effective) {
    if (measure == StoppingMeasure::weighted_loss)
      sum += g_loss(p, lambda);
    else
      sum += p >= 1.0 - lambda ? 1.0 - p : p;
  }
  return sum / static_cast<double>(p_effective.size());
}

bool confidence_reached(const std::vector<double>& p_effective, double lambda, const StoppingRule& rule) {
  return stopping_statistic(p_effective, lambda, rule.measure) < 1.0 - rule.beta;
}

ErrorRates error_rates(const ErrorCounts& counts, int truly_positive, int subgroup_count, double lambda) {
  ErrorRates r;
  const int negatives = subgroup_count - truly_positive;
  r.type1 = truly_positive > 0 ? static_cast<double>(counts.type1) / truly_positive : 0.0;
  r.type2 = negatives > 0 ? static_cast<double>(counts.type2) / negatives : 0.0;
  r.total = lambda * r.type1 + (1.0 - lambda) * r.type2;
  return r;
}

namespace {

StateMatrix starting_state(const Environment& env, const TrialConfig& cfg) {
  StateMatrix s(cfg.subgroups);
  auto fold = [&](const StateMatrix& extra) {
    for (int x = 0; x < cfg.subgroups; ++x)
      for (const Arm arm : kArms)
        s.at(x, arm) = update(s.at(x, arm), extra.at(x, arm).s0, extra.at(x, arm).s1);
  };
  if (cfg.prior) fold(*cfg.prior);
  if (cfg.pilot) fold(build_informative_prior(env, cfg.pilot->per_cell_samples, cfg.pilot->subgroups, cfg.seed));
  return s;
}

CohortOutcome sample_outcomes(const Environment& env, const Allocation& u, std::uint64_t seed, int cohort) {
  Engine engine = make_stream(seed, StreamDomain::outcomes, static_cast<std::uint64_t>(cohort));
  CohortOutcome w(u.subgroup_count());
  for (int x = 0; x < u.subgroup_count(); ++x)
    for (const Arm arm : kArms) {
      std::binomial_distribution<int> draw(u.at(x, arm), env.probability(x, arm));
      w.at(x, arm) = draw(engine);
    }
  return w;
}

}  // namespace

TrialResult run_trial(const Environment& env, const TrialConfig& cfg) {
  env.validate();
  cfg.validate();
  if (env.subgroup_count() != cfg.subgroups)
    throw ValidationError("environment and config disagree on the subgroup count");

  TrialResult r;
  r.initial_state = starting_state(env, cfg);
  r.tallies = Allocation(cfg.subgroups);
  StateMatrix s = r.initial_state;
  std::vector<double> p = effectiveness_probabilities(s, cfg.loss.tau);
  r.initial_p_effective = p;
  Environment truth_env = env;
  truth_env.tau = cfg.loss.tau;
  r.truly_positive = truth_env.truly_effective();
  auto labels_correct = [&](const std::vector<int>& estimated) {
    std::vector<bool> ok(cfg.subgroups);
    for (int x = 0; x < cfg.subgroups; ++x) {
      const bool est = std::count(estimated.begin(), estimated.end(), x) > 0;
      const bool truth = std::count(r.truly_positive.begin(), r.truly_positive.end(), x) > 0;
      ok[x] = est == truth;
    }
    return ok;
  };
  RctkgStats stats;
  const int cap = cfg.max_cohorts();
  for (int k = 0; k < cap; ++k) {
    if (cfg.stopping && confidence_reached(p, cfg.loss.lambda, *cfg.stopping)) break;
    TieBreakRng rng(cfg.seed, static_cast<std::uint64_t>(k));
    PolicySettings policy = cfg.policy;
    policy.dp_horizon = cap - k;
    const Allocation u = choose_action(policy, s, cfg.cohort_size, cfg.loss, rng, &stats);
    const CohortOutcome w = sample_outcomes(env, u, cfg.seed, k);
    s = transition(s, u, w);
    p = effectiveness_probabilities(s, cfg.loss.tau);
    for (int x = 0; x < cfg.subgroups; ++x)
      for (const Arm arm : kArms) r.tallies.at(x, arm) += u.at(x, arm);
    r.log.push_back({u, w, p});
    r.correct_by_cohort.push_back(labels_correct(classify(p, cfg.loss.lambda)));
  }
  r.final_state = s;
  r.final_p_effective = p;
  r.cohorts_used = static_cast<int>(r.log.size());
  r.estimated_positive = classify(p, cfg.loss.lambda);
  r.errors = realized_errors(r.estimated_positive, r.truly_positive, cfg.loss.lambda);
  r.error_rates = error_rates(r.errors, static_cast<int>(r.truly_positive.size()), cfg.subgroups,
                              cfg.loss.lambda);
  r.correct = labels_correct(r.estimated_positive);
  r.probability_evaluations = stats.probability_evaluations;
  return r;
}

TrialResult run_until_confidence(const Environment& env, const TrialConfig& cfg) {
  if (!cfg.stopping) throw ValidationError("stopping rule required (stopping.beta, stopping.max_cohorts)");
  return run_trial(env, cfg);
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  double sum = 0.0;
  for (const double v : values) sum += v;
  s.mean = sum / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (const double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return s;
}

std::uint64_t replicate_seed(std::uint64_t master_seed, int replicate_index) {
  return derive_seed(master_seed, {static_cast<std::uint64_t>(StreamDomain::replicate),
                                   static_cast<std::uint64_t>(replicate_index)});
}

std::vector<TrialResult> run_replicates(const Environment& env, const TrialConfig& cfg, int replicates,
                                        int threads) {
  if (replicates < 1) throw ValidationError("replicates: must be at least 1");
  env.validate();
  cfg.validate();
  std::vector<TrialResult> results(replicates);
  int workers = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
  workers = std::clamp(workers, 1, replicates);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (int i = next++; i < replicates; i = next++) {
      try {
        TrialConfig c = cfg;
        c.seed = replicate_seed(cfg.seed, i);
        results[i] = run_trial(env, c);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = replicates;
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

MetricsRecord aggregate(const std::vector<TrialResult>& results, int subgroup_count) {
  MetricsRecord m;
  m.replicates = static_cast<int>(results.size());
  std::vector<double> e1, e2, cohorts, rate1, rate2;
  m.confidence_pct.assign(subgroup_count, 0.0);
  m.confidence_stderr.assign(subgroup_count, 0.0);
  m.mean_recruitment.assign(subgroup_count, {0.0, 0.0});
  m.first_cohort_recruitment.assign(subgroup_count, 0.0);
  std::size_t horizon = results.empty() ? 0 : results.front().log.size();
  for (const auto& r : results) horizon = std::min(horizon, r.log.size());
  std::vector<std::vector<double>> by_cohort(horizon, std::vector<double>(subgroup_count, 0.0));
  for (const auto& r : results) {
    e1.push_back(r.errors.type1);
    e2.push_back(r.errors.type2);
    m.replicate_totals.push_back(r.errors.total);
    rate1.push_back(r.error_rates.type1);
    rate2.push_back(r.error_rates.type2);
    m.replicate_total_rates.push_back(r.error_rates.total);
    cohorts.push_back(r.cohorts_used);
    for (int x = 0; x < subgroup_count; ++x) {
      if (r.correct[x]) m.confidence_pct[x] += 1.0;
      for (const Arm arm : kArms) m.mean_recruitment[x][static_cast<int>(arm)] += r.tallies.at(x, arm);
      if (!r.log.empty()) m.first_cohort_recruitment[x] += r.log.front().allocation.subgroup_total(x);
    }
    for (std::size_t k = 0; k < horizon; ++k)
      for (int x = 0; x < subgroup_count; ++x)
        if (r.correct_by_cohort[k][x]) by_cohort[k][x] += 1.0;
  }
  const double n = std::max<double>(1.0, static_cast<double>(results.size()));
  for (int x = 0; x < subgroup_count; ++x) {
    const double frac = m.confidence_pct[x] / n;
    m.confidence_pct[x] = 100.0 * frac;
    m.confidence_stderr[x] = 100.0 * std::sqrt(frac * (1.0 - frac) / n);
    m.first_cohort_recruitment[x] /= n;
    for (auto& v : m.mean_recruitment[x]) v /= n;
  }
  m.type1 = summarize(e1);
  m.type2 = summarize(e2);
  m.total = summarize(m.replicate_totals);
  m.type1_rate = summarize(rate1);
  m.type2_rate = summarize(rate2);
  m.total_rate = summarize(m.replicate_total_rates);
  m.cohorts_used = summarize(cohorts);
  m.replicate_cohorts = cohorts;
  for (auto& row : by_cohort)
    for (auto& v : row) v = 100.0 * v / n;
  m.confidence_by_cohort_pct = by_cohort;
  return m;
}

MetricsRecord replicate(const Environment& env, const TrialConfig& cfg, int replicates, int threads) {
  return aggregate(run_replicates(env, cfg, replicates, threads), cfg.subgroups);
}

}  // namespace rctkg
