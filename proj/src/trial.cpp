#include "rctkg/trial.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace rctkg {

void LossParams::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda must lie in [0, 1]");
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be a finite nonnegative number");
}

StateMatrix::StateMatrix(int subgroup_count) {
  if (subgroup_count < 1) throw ValidationError("state needs at least one subgroup");
  subgroups_.resize(subgroup_count);
}

StateMatrix::StateMatrix(std::vector<SubgroupPosterior> subgroups) : subgroups_(std::move(subgroups)) {
  validate();
}

void StateMatrix::validate() const {
  if (subgroups_.empty()) throw ValidationError("state needs at least one subgroup");
  for (const auto& sg : subgroups_) {
    rctkg::validate(sg.control);
    rctkg::validate(sg.treatment);
  }
}

namespace {

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string StateMatrix::to_text() const {
  std::string out = "rctkg-state 1\nsubgroups " + std::to_string(subgroup_count()) + "\n";
  for (int x = 0; x < subgroup_count(); ++x) {
    for (const Arm arm : kArms) {
      const auto& p = at(x, arm);
      out += std::to_string(x) + " " + arm_name(arm) + " " + format_number(p.s0) + " " +
             format_number(p.s1) + "\n";
    }
  }
  return out;
}

StateMatrix StateMatrix::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  int declared = -1;
  bool header = false;
  std::vector<SubgroupPosterior> cells;
  std::vector<std::array<bool, 2>> seen;
  auto fail = [&](const std::string& what) {
    throw ValidationError("state file line " + std::to_string(line_no) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    if (!header) {
      std::string magic;
      int version = 0;
      if (!(fields >> magic >> version) || magic != "rctkg-state" || version != 1)
        fail("expected header 'rctkg-state 1'");
      header = true;
      continue;
    }
    if (declared < 0) {
      std::string key;
      if (!(fields >> key >> declared) || key != "subgroups" || declared < 1)
        fail("expected 'subgroups <X>' with X >= 1");
      cells.resize(declared);
      seen.assign(declared, {false, false});
      continue;
    }
    int x = -1;
    std::string arm_text;
    double s0 = 0.0, s1 = 0.0;
    if (!(fields >> x >> arm_text >> s0 >> s1)) fail("expected '<x> <arm> <s0> <s1>'");
    std::string extra;
    if (fields >> extra) fail("trailing content '" + extra + "'");
    if (x < 0 || x >= declared) fail("subgroup index out of range");
    Arm arm;
    try {
      arm = parse_arm(arm_text);
    } catch (const ValidationError& e) {
      fail(e.what());
    }
    auto& flag = seen[x][static_cast<int>(arm)];
    if (flag) fail("duplicate cell");
    flag = true;
    cells[x].arm(arm) = {s0, s1};
    try {
      rctkg::validate(cells[x].arm(arm));
    } catch (const ValidationError& e) {
      fail(e.what());
    }
  }
  if (!header || declared < 0) throw ValidationError("state file is missing its header");
  for (int x = 0; x < declared; ++x)
    if (!seen[x][0] || !seen[x][1])
      throw ValidationError("state file is missing cells for subgroup " + std::to_string(x));
  return StateMatrix(std::move(cells));
}

int Allocation::total() const {
  int sum = 0;
  for (const auto& c : counts_) sum += c[0] + c[1];
  return sum;
}

void Allocation::validate() const {
  for (const auto& c : counts_)
    if (c[0] < 0 || c[1] < 0) throw ValidationError("allocation counts must be nonnegative");
}

void CohortOutcome::check_against(const Allocation& u) const {
  if (u.subgroup_count() != subgroup_count())
    throw ValidationError("outcome and allocation cover different subgroup counts");
  u.validate();
  for (int x = 0; x < subgroup_count(); ++x) {
    for (const Arm arm : kArms) {
      if (at(x, arm) < 0 || at(x, arm) > u.at(x, arm))
        throw ValidationError("subgroup " + std::to_string(x) + " " + arm_name(arm) +
                              ": successes must lie in [0, enrolled]");
    }
  }
}

StateMatrix transition(const StateMatrix& s, const Allocation& u, const CohortOutcome& w) {
  if (u.subgroup_count() != s.subgroup_count())
    throw ValidationError("allocation and state cover different subgroup counts");
  w.check_against(u);
  StateMatrix next = s;
  for (int x = 0; x < s.subgroup_count(); ++x)
    for (const Arm arm : kArms)
      if (u.at(x, arm) > 0) next.at(x, arm) = update(s.at(x, arm), w.at(x, arm), u.at(x, arm));
  return next;
}

// Per-subgroup minimum of the posterior expected error: labelled effective,
// the risk is a type-II error (weight 1 - lambda); otherwise a type-I error
// (weight lambda).
double g_loss(double p, double lambda) {
  return p >= 1.0 - lambda ? (1.0 - lambda) * (1.0 - p) : lambda * p;
}

std::vector<double> effectiveness_probabilities(const StateMatrix& s, double tau) {
  std::vector<double> p(s.subgroup_count());
  for (int x = 0; x < s.subgroup_count(); ++x) p[x] = prob_effective(s.subgroup(x), tau);
  return p;
}

double expected_total_error(const std::vector<double>& p_effective, double lambda) {
  double sum = 0.0;
  for (const double p : p_effective) sum += g_loss(p, lambda);
  return sum;
}

double expected_total_error(const StateMatrix& s, const LossParams& lp) {
  return expected_total_error(effectiveness_probabilities(s, lp.tau), lp.lambda);
}

double terminal_value(const StateMatrix& s, const LossParams& lp) {
  return -expected_total_error(s, lp);
}

std::vector<int> classify(const std::vector<double>& p_effective, double lambda) {
  std::vector<int> positive;
  for (int x = 0; x < static_cast<int>(p_effective.size()); ++x)
    if (p_effective[x] >= 1.0 - lambda) positive.push_back(x);
  return positive;
}

std::vector<int> classify(const StateMatrix& s, const LossParams& lp) {
  return classify(effectiveness_probabilities(s, lp.tau), lp.lambda);
}

ErrorCounts realized_errors(const std::vector<int>& estimated_positive,
                            const std::vector<int>& truly_positive, double lambda) {
  auto contains = [](const std::vector<int>& set, int x) {
    return std::find(set.begin(), set.end(), x) != set.end();
  };
  ErrorCounts e;
  for (const int x : truly_positive)
    if (!contains(estimated_positive, x)) ++e.type1;
  for (const int x : estimated_positive)
    if (!contains(truly_positive, x)) ++e.type2;
  e.total = lambda * e.type1 + (1.0 - lambda) * e.type2;
  return e;
}

}  // namespace rctkg
