#include "rctkg/policies.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <tuple>
#include <unordered_map>

namespace rctkg {

const char* policy_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::rctkg: return "RCTKG";
    case PolicyKind::uniform: return "UNIFORM";
    case PolicyKind::thompson: return "THOMPSON";
    case PolicyKind::dexfem: return "DEXFEM";
    case PolicyKind::kg_exact: return "KG_EXACT";
    case PolicyKind::dp_optimal: return "DP_OPTIMAL";
  }
  return "?";
}

PolicyKind parse_policy(const std::string& text) {
  std::string t;
  for (const char c : text) t += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (t == "RCTKG" || t == "RCT-KG" || t == "RCT_KG") return PolicyKind::rctkg;
  if (t == "UNIFORM" || t == "UA") return PolicyKind::uniform;
  if (t == "THOMPSON" || t == "TS") return PolicyKind::thompson;
  if (t == "DEXFEM") return PolicyKind::dexfem;
  if (t == "KG_EXACT" || t == "KG-EXACT") return PolicyKind::kg_exact;
  if (t == "DP_OPTIMAL" || t == "DP-OPTIMAL" || t == "DP") return PolicyKind::dp_optimal;
  throw ValidationError("unknown policy '" + text + "'");
}

namespace {

constexpr double kTieTolerance = 1e-12;

void require_cohort(int cohort_size) {
  if (cohort_size < 1) throw ValidationError("cohort size must be at least 1");
}

std::size_t pick_best(const std::vector<double>& scores, TieBreakRng& rng) {
  const double best = *std::max_element(scores.begin(), scores.end());
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= best - kTieTolerance) ties.push_back(i);
  return ties.size() == 1 ? ties.front() : ties[rng.pick(ties.size())];
}

SubgroupPosterior add_patients(SubgroupPosterior sp, int control, int treatment, double control_successes,
                               double treatment_successes) {
  sp.control.s0 += control_successes;
  sp.control.s1 += control;
  sp.treatment.s0 += treatment_successes;
  sp.treatment.s1 += treatment;
  return sp;
}

// P_x of one subgroup after resolving (c, t) extra patients all at z_max or
// all at z_min. Grid points are reached one patient at a time, so with
// tau = 0 each new point is one exact recurrence step from a cached one.
class OptimisticGrid {
 public:
  OptimisticGrid(const SubgroupPosterior& base, double tau, RctkgStats* stats)
      : base_(base), tau_(tau), stats_(stats) {}

  double probability(int control, int treatment, bool all_success) {
    if (control == 0 && treatment == 0) all_success = true;  // both resolutions are the base state
    const Key key{control, treatment, all_success};
    if (auto it = cache_.find(key); it != cache_.end()) return it->second.value;
    count();
    Entry entry;
    if (tau_ == 0.0) {
      std::optional<SuperiorityWalker> walker;
      if (control > 0 && cache_.count({control - 1, treatment, all_success})) {
        walker = *cache_.at({control - 1, treatment, all_success}).walker;
        walker->step(Arm::control, all_success);
      } else if (treatment > 0 && cache_.count({control, treatment - 1, all_success})) {
        walker = *cache_.at({control, treatment - 1, all_success}).walker;
        walker->step(Arm::treatment, all_success);
      } else {
        const auto sp = resolved(control, treatment, all_success);
        walker.emplace(sp, prob_effective(sp, 0.0));
      }
      entry.value = std::clamp(walker->probability(), 0.0, 1.0);
      entry.walker = walker;
    } else {
      entry.value = prob_effective(resolved(control, treatment, all_success), tau_);
    }
    cache_.emplace(key, entry);
    return entry.value;
  }

 private:
  struct Key {
    int control;
    int treatment;
    bool all_success;
    bool operator<(const Key& o) const {
      return std::tie(control, treatment, all_success) < std::tie(o.control, o.treatment, o.all_success);
    }
  };
  struct Entry {
    double value = 0.0;
    std::optional<SuperiorityWalker> walker;
  };

  SubgroupPosterior resolved(int control, int treatment, bool all_success) const {
    return add_patients(base_, control, treatment, all_success ? control : 0, all_success ? treatment : 0);
  }

  void count() {
    if (stats_) ++stats_->probability_evaluations;
  }

  SubgroupPosterior base_;
  double tau_;
  RctkgStats* stats_;
  std::map<Key, Entry> cache_;
};

}  // namespace

Allocation rctkg_action(const StateMatrix& s, int cohort_size, const LossParams& lp, TieBreakRng& rng,
                        RctkgStats* stats) {
  require_cohort(cohort_size);
  lp.validate();
  const int X = s.subgroup_count();
  std::vector<OptimisticGrid> grids;
  grids.reserve(X);
  for (int x = 0; x < X; ++x) grids.emplace_back(s.subgroup(x), lp.tau, stats);

  Allocation chosen(X);
  std::vector<double> scores(2 * X);
  auto rescore = [&](int x) {
    const int c = chosen.at(x, Arm::control);
    const int t = chosen.at(x, Arm::treatment);
    auto& grid = grids[x];
    const double base_max = g_loss(grid.probability(c, t, true), lp.lambda);
    const double base_min = g_loss(grid.probability(c, t, false), lp.lambda);
    for (const Arm arm : kArms) {
      const int dc = arm == Arm::control ? 1 : 0;
      const int dt = 1 - dc;
      // V = -sum g, so the improvement is g(before) - g(after).
      const double v_max = base_max - g_loss(grid.probability(c + dc, t + dt, true), lp.lambda);
      const double v_min = base_min - g_loss(grid.probability(c + dc, t + dt, false), lp.lambda);
      scores[2 * x + static_cast<int>(arm)] = std::max(v_max, v_min);
    }
  };
  for (int x = 0; x < X; ++x) rescore(x);
  for (int m = 0; m < cohort_size; ++m) {
    const std::size_t cell = pick_best(scores, rng);
    const int x = static_cast<int>(cell / 2);
    ++chosen.at(x, static_cast<Arm>(cell % 2));
    if (m + 1 < cohort_size) rescore(x);
  }
  return chosen;
}

Allocation rctkg_incremental_action(const StateMatrix& s, int cohort_size, const LossParams& lp,
                                    TieBreakRng& rng) {
  require_cohort(cohort_size);
  lp.validate();
  const int X = s.subgroup_count();
  Allocation chosen(X);
  std::vector<double> scores(2 * X);
  auto rescore = [&](int x) {
    const auto& sp = s.subgroup(x);
    const int c = chosen.at(x, Arm::control);
    const int t = chosen.at(x, Arm::treatment);
    const auto expected =
        add_patients(sp, c, t, c * posterior_mean(sp.control), t * posterior_mean(sp.treatment));
    const double p_base = prob_effective(expected, lp.tau);
    const double g_base = g_loss(p_base, lp.lambda);
    for (const Arm arm : kArms) {
      double best = -1.0;
      for (const bool success : {true, false}) {
        double p;
        if (lp.tau == 0.0) {
          SuperiorityWalker walker(expected, p_base);
          walker.step(arm, success);
          p = std::clamp(walker.probability(), 0.0, 1.0);
        } else {
          auto next = expected;
          next.arm(arm) = update(next.arm(arm), success ? 1.0 : 0.0, 1.0);
          p = prob_effective(next, lp.tau);
        }
        best = std::max(best, g_base - g_loss(p, lp.lambda));
      }
      scores[2 * x + static_cast<int>(arm)] = best;
    }
  };
  for (int x = 0; x < X; ++x) rescore(x);
  for (int m = 0; m < cohort_size; ++m) {
    const std::size_t cell = pick_best(scores, rng);
    const int x = static_cast<int>(cell / 2);
    ++chosen.at(x, static_cast<Arm>(cell % 2));
    rescore(x);
  }
  return chosen;
}

std::vector<int> proportional_split(int total, const std::vector<double>& weights, TieBreakRng& rng) {
  if (total < 0) throw ValidationError("cannot split a negative total");
  if (weights.empty()) throw ValidationError("proportional split needs at least one weight");
  double sum = 0.0;
  for (const double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("split weights must be finite and nonnegative");
    sum += w;
  }
  std::vector<double> share(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i)
    share[i] = sum > 0.0 ? total * weights[i] / sum : static_cast<double>(total) / weights.size();
  std::vector<int> out(weights.size());
  int assigned = 0;
  for (std::size_t i = 0; i < share.size(); ++i) {
    out[i] = static_cast<int>(std::floor(share[i]));
    assigned += out[i];
  }
  std::vector<std::pair<double, std::uint64_t>> order(share.size());
  std::vector<std::size_t> idx(share.size());
  for (std::size_t i = 0; i < share.size(); ++i) {
    order[i] = {share[i] - std::floor(share[i]), rng.engine()()};
    idx[i] = i;
  }
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (order[a].first != order[b].first) return order[a].first > order[b].first;
    return order[a].second < order[b].second;
  });
  for (std::size_t r = 0; assigned < total; ++r, ++assigned) ++out[idx[r % idx.size()]];
  return out;
}

std::vector<int> uniform_quotas(int subgroup_count, int cohort_size, TieBreakRng& rng) {
  if (subgroup_count < 1) throw ValidationError("need at least one subgroup");
  return proportional_split(cohort_size, std::vector<double>(subgroup_count, 1.0), rng);
}

Allocation uniform_action(int subgroup_count, int cohort_size, TieBreakRng& rng, UniformMode mode) {
  require_cohort(cohort_size);
  if (subgroup_count < 1) throw ValidationError("need at least one subgroup");
  Allocation u(subgroup_count);
  if (mode == UniformMode::multinomial) {
    const std::size_t cells = 2 * static_cast<std::size_t>(subgroup_count);
    for (int m = 0; m < cohort_size; ++m) {
      const std::size_t cell = rng.pick(cells);
      ++u.at(static_cast<int>(cell / 2), static_cast<Arm>(cell % 2));
    }
    return u;
  }
  const auto quotas = uniform_quotas(subgroup_count, cohort_size, rng);
  for (int x = 0; x < subgroup_count; ++x) {
    const auto split = proportional_split(quotas[x], {1.0, 1.0}, rng);
    u.at(x, Arm::control) = split[0];
    u.at(x, Arm::treatment) = split[1];
  }
  return u;
}

namespace {

double sample_beta(const ArmPosterior& p, Engine& engine) {
  std::gamma_distribution<double> ga(p.alpha()), gb(p.beta());
  const double x = ga(engine);
  const double y = gb(engine);
  return x / (x + y);
}

}  // namespace

Allocation thompson_action(const StateMatrix& s, int cohort_size, TieBreakRng& rng) {
  require_cohort(cohort_size);
  const int X = s.subgroup_count();
  const auto quotas = uniform_quotas(X, cohort_size, rng);
  Allocation u(X);
  for (int x = 0; x < X; ++x) {
    const auto& sp = s.subgroup(x);
    for (int i = 0; i < quotas[x]; ++i) {
      const double draw_control = sample_beta(sp.control, rng.engine());
      const double draw_treatment = sample_beta(sp.treatment, rng.engine());
      ++u.at(x, draw_treatment > draw_control ? Arm::treatment : Arm::control);
    }
  }
  return u;
}

Allocation dexfem_action(const StateMatrix& s, int cohort_size, TieBreakRng& rng, double exponent) {
  require_cohort(cohort_size);
  if (!(exponent >= 0.0)) throw ValidationError("DexFEM exponent must be nonnegative");
  const int X = s.subgroup_count();
  const auto quotas = uniform_quotas(X, cohort_size, rng);
  Allocation u(X);
  for (int x = 0; x < X; ++x) {
    const auto& sp = s.subgroup(x);
    const auto split = proportional_split(
        quotas[x],
        {std::pow(posterior_variance_of_mean(sp.control), exponent),
         std::pow(posterior_variance_of_mean(sp.treatment), exponent)},
        rng);
    u.at(x, Arm::control) = split[0];
    u.at(x, Arm::treatment) = split[1];
  }
  return u;
}

namespace {

// E[g(P_x)] for one subgroup after enrolling (c, t) patients, under the
// beta-binomial predictive law of each arm.
double expected_subgroup_loss(const SubgroupPosterior& sp, int c, int t, const LossParams& lp) {
  double sum = 0.0;
  for (int wc = 0; wc <= c; ++wc) {
    const double pc = beta_binomial_pmf(sp.control, c, wc);
    for (int wt = 0; wt <= t; ++wt) {
      const double pt = beta_binomial_pmf(sp.treatment, t, wt);
      sum += pc * pt * g_loss(prob_effective(add_patients(sp, c, t, wc, wt), lp.tau), lp.lambda);
    }
  }
  return sum;
}

}  // namespace

double expected_terminal_value(const StateMatrix& s, const Allocation& u, const LossParams& lp) {
  if (u.subgroup_count() != s.subgroup_count())
    throw ValidationError("allocation and state cover different subgroup counts");
  u.validate();
  double value = 0.0;
  for (int x = 0; x < s.subgroup_count(); ++x)
    value -= expected_subgroup_loss(s.subgroup(x), u.at(x, Arm::control), u.at(x, Arm::treatment), lp);
  return value;
}

std::int64_t action_count(int subgroup_count, int cohort_size, std::int64_t cap) {
  // C(M + 2X - 1, 2X - 1)
  const std::int64_t k = 2LL * subgroup_count - 1;
  const std::int64_t n = cohort_size + k;
  long double c = 1.0L;
  for (std::int64_t i = 1; i <= k; ++i) {
    c = c * (n - k + i) / i;
    if (c > static_cast<long double>(cap)) return cap + 1;
  }
  return static_cast<std::int64_t>(std::llround(static_cast<double>(c)));
}

std::vector<Allocation> enumerate_allocations(int subgroup_count, int cohort_size) {
  std::vector<Allocation> out;
  const int cells = 2 * subgroup_count;
  std::vector<int> counts(cells, 0);
  auto recurse = [&](auto&& self, int cell, int remaining) -> void {
    if (cell == cells - 1) {
      counts[cell] = remaining;
      Allocation u(subgroup_count);
      for (int i = 0; i < cells; ++i) u.at(i / 2, static_cast<Arm>(i % 2)) = counts[i];
      out.push_back(std::move(u));
      return;
    }
    for (int v = remaining; v >= 0; --v) {
      counts[cell] = v;
      self(self, cell + 1, remaining - v);
    }
  };
  recurse(recurse, 0, cohort_size);
  return out;
}

KgExactResult kg_exact(const StateMatrix& s, int cohort_size, const LossParams& lp) {
  require_cohort(cohort_size);
  lp.validate();
  const int X = s.subgroup_count();
  if (action_count(X, cohort_size, kKgExactMaxActions) > kKgExactMaxActions)
    throw ValidationError("instance too large for exact knowledge gradient (more than 10^4 actions)");
  std::vector<std::map<std::pair<int, int>, double>> memo(X);
  auto loss = [&](int x, int c, int t) {
    auto& m = memo[x];
    const auto key = std::make_pair(c, t);
    if (auto it = m.find(key); it != m.end()) return it->second;
    const double v = expected_subgroup_loss(s.subgroup(x), c, t, lp);
    m.emplace(key, v);
    return v;
  };
  const auto actions = enumerate_allocations(X, cohort_size);
  std::vector<double> values(actions.size());
  for (std::size_t i = 0; i < actions.size(); ++i) {
    double v = 0.0;
    for (int x = 0; x < X; ++x) v -= loss(x, actions[i].at(x, Arm::control), actions[i].at(x, Arm::treatment));
    values[i] = v;
  }
  const double best = *std::max_element(values.begin(), values.end());
  for (std::size_t i = 0; i < actions.size(); ++i)
    if (values[i] >= best - kTieTolerance) return {actions[i], values[i]};
  return {actions.front(), values.front()};
}

Allocation kg_exact_action(const StateMatrix& s, int cohort_size, const LossParams& lp) {
  return kg_exact(s, cohort_size, lp).action;
}

namespace {

class DpSolver {
 public:
  DpSolver(int cohort_size, const LossParams& lp)
      : cohort_size_(cohort_size), lp_(lp) {}

  // Best expected terminal value with `remaining` cohorts left; optionally
  // reports the maximizing first action.
  double value(const StateMatrix& s, int remaining, Allocation* best_action = nullptr) {
    if (remaining == 0) return terminal(s);
    auto key = flatten(s);
    key.push_back(remaining);
    if (!best_action) {
      if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    if (actions_.empty()) actions_ = enumerate_allocations(s.subgroup_count(), cohort_size_);
    std::vector<double> q(actions_.size());
    for (std::size_t i = 0; i < actions_.size(); ++i) q[i] = q_value(s, actions_[i], remaining);
    const double best = *std::max_element(q.begin(), q.end());
    if (best_action) {
      for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] >= best - kTieTolerance) {
          *best_action = actions_[i];
          break;
        }
    }
    memo_[key] = best;
    return best;
  }

 private:
  double q_value(const StateMatrix& s, const Allocation& u, int remaining) {
    const int X = s.subgroup_count();
    CohortOutcome w(X);
    double total = 0.0;
    // Enumerate every success vector with 0 <= w <= u, cell by cell.
    auto recurse = [&](auto&& self, int cell, double prob) -> void {
      if (cell == 2 * X) {
        total += prob * value(transition(s, u, w), remaining - 1);
        return;
      }
      const int x = cell / 2;
      const Arm arm = static_cast<Arm>(cell % 2);
      const int n = u.at(x, arm);
      for (int k = 0; k <= n; ++k) {
        w.at(x, arm) = k;
        self(self, cell + 1, prob * beta_binomial_pmf(s.at(x, arm), n, k));
      }
      w.at(x, arm) = 0;
    };
    recurse(recurse, 0, 1.0);
    return total;
  }

  double terminal(const StateMatrix& s) {
    auto key = flatten(s);
    if (auto it = terminal_memo_.find(key); it != terminal_memo_.end()) return it->second;
    const double v = terminal_value(s, lp_);
    terminal_memo_.emplace(std::move(key), v);
    return v;
  }

  static std::vector<double> flatten(const StateMatrix& s) {
    std::vector<double> key;
    for (const auto& sg : s.subgroups()) {
      key.push_back(sg.control.s0);
      key.push_back(sg.control.s1);
      key.push_back(sg.treatment.s0);
      key.push_back(sg.treatment.s1);
    }
    return key;
  }

  int cohort_size_;
  LossParams lp_;
  std::vector<Allocation> actions_;
  std::map<std::vector<double>, double> memo_;
  std::map<std::vector<double>, double> terminal_memo_;
};

}  // namespace

DpResult dp_optimal(const StateMatrix& s, int horizon, int cohort_size, const LossParams& lp) {
  require_cohort(cohort_size);
  lp.validate();
  if (horizon < 1) throw ValidationError("dynamic program needs at least one cohort");
  if (s.subgroup_count() > kDpMaxSubgroups || static_cast<long>(horizon) * cohort_size > kDpMaxPatients)
    throw ValidationError("instance too large for the exact dynamic program (X <= 2 and K*M <= 8)");
  DpSolver solver(cohort_size, lp);
  DpResult result;
  result.value = solver.value(s, horizon, &result.first_action);
  return result;
}

Allocation choose_action(const PolicySettings& settings, const StateMatrix& s, int cohort_size,
                         const LossParams& lp, TieBreakRng& rng, RctkgStats* stats) {
  switch (settings.kind) {
    case PolicyKind::rctkg: return rctkg_action(s, cohort_size, lp, rng, stats);
    case PolicyKind::uniform: return uniform_action(s.subgroup_count(), cohort_size, rng, settings.uniform_mode);
    case PolicyKind::thompson: return thompson_action(s, cohort_size, rng);
    case PolicyKind::dexfem: return dexfem_action(s, cohort_size, rng, settings.dexfem_exponent);
    case PolicyKind::kg_exact: return kg_exact_action(s, cohort_size, lp);
    case PolicyKind::dp_optimal:
      return dp_optimal(s, std::max(1, settings.dp_horizon), cohort_size, lp).first_action;
  }
  throw ValidationError("unknown policy kind");
}

}  // namespace rctkg
