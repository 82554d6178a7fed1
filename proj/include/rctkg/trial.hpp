#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rctkg/bayes.hpp"

namespace rctkg {

struct LossParams {
  double lambda = 0.5;  // weight of type-I errors
  double tau = 0.0;     // minimum relative improvement counted as effective

  void validate() const;
};

/// Posterior hyper-parameters for every (subgroup, arm) cell.
class StateMatrix {
 public:
  StateMatrix() = default;
  explicit StateMatrix(int subgroup_count);
  explicit StateMatrix(std::vector<SubgroupPosterior> subgroups);

  int subgroup_count() const { return static_cast<int>(subgroups_.size()); }

  const SubgroupPosterior& subgroup(int x) const { return subgroups_.at(x); }
  SubgroupPosterior& subgroup(int x) { return subgroups_.at(x); }
  const ArmPosterior& at(int x, Arm arm) const { return subgroup(x).arm(arm); }
  ArmPosterior& at(int x, Arm arm) { return subgroup(x).arm(arm); }

  const std::vector<SubgroupPosterior>& subgroups() const { return subgroups_; }

  void validate() const;

  /*
   * Canonical text form, one cell per line in (x, arm) order:
   *
   *   rctkg-state 1
   *   subgroups <X>
   *   <x> control <s0> <s1>
   *   <x> treatment <s0> <s1>
   *   ...
   *
   * Values use the shortest round-trip decimal representation. Lines
   * starting with '#' and blank lines are ignored on input.
   */
  std::string to_text() const;
  static StateMatrix from_text(const std::string& text);

  friend bool operator==(const StateMatrix&, const StateMatrix&) = default;

 private:
  std::vector<SubgroupPosterior> subgroups_;
};

/// Patients recruited per (subgroup, arm) in one cohort.
class Allocation {
 public:
  Allocation() = default;
  explicit Allocation(int subgroup_count) : counts_(subgroup_count, {0, 0}) {}

  int subgroup_count() const { return static_cast<int>(counts_.size()); }
  int& at(int x, Arm arm) { return counts_.at(x)[static_cast<int>(arm)]; }
  int at(int x, Arm arm) const { return counts_.at(x)[static_cast<int>(arm)]; }
  int subgroup_total(int x) const { return at(x, Arm::control) + at(x, Arm::treatment); }
  int total() const;

  void validate() const;

  const std::vector<std::array<int, 2>>& counts() const { return counts_; }

  friend bool operator==(const Allocation&, const Allocation&) = default;

 private:
  std::vector<std::array<int, 2>> counts_;
};

/// Observed successes per (subgroup, arm) for one cohort.
class CohortOutcome {
 public:
  CohortOutcome() = default;
  explicit CohortOutcome(int subgroup_count) : successes_(subgroup_count, {0, 0}) {}

  int subgroup_count() const { return static_cast<int>(successes_.size()); }
  int& at(int x, Arm arm) { return successes_.at(x)[static_cast<int>(arm)]; }
  int at(int x, Arm arm) const { return successes_.at(x)[static_cast<int>(arm)]; }

  /// Throws unless shapes match and 0 <= successes <= enrolled in every cell.
  void check_against(const Allocation& u) const;

  friend bool operator==(const CohortOutcome&, const CohortOutcome&) = default;

 private:
  std::vector<std::array<int, 2>> successes_;
};

StateMatrix transition(const StateMatrix& s, const Allocation& u, const CohortOutcome& w);

/// g(p; lambda): posterior misclassification loss of one subgroup.
double g_loss(double p, double lambda);

/// P_x(s) for every subgroup.
std::vector<double> effectiveness_probabilities(const StateMatrix& s, double tau);

double expected_total_error(const StateMatrix& s, const LossParams& lp);
double expected_total_error(const std::vector<double>& p_effective, double lambda);

/// V^K(s) = -(posterior expected total error).
double terminal_value(const StateMatrix& s, const LossParams& lp);

/// H+_est = {x : P_x >= 1 - lambda}, ascending.
std::vector<int> classify(const std::vector<double>& p_effective, double lambda);
std::vector<int> classify(const StateMatrix& s, const LossParams& lp);

struct ErrorCounts {
  int type1 = 0;  // effective, estimated ineffective
  int type2 = 0;  // ineffective, estimated effective
  double total = 0.0;

  friend bool operator==(const ErrorCounts&, const ErrorCounts&) = default;
};

ErrorCounts realized_errors(const std::vector<int>& estimated_positive,
                            const std::vector<int>& truly_positive, double lambda);

}  // namespace rctkg
