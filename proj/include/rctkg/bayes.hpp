#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rctkg {

/// Thrown when an input violates a documented precondition.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/*
 * One-parameter exponential family with density
 *   p(z | theta) = h(z) exp(theta * G(z) - F(theta)).
 * Only the Bernoulli member is instantiated; the interface exists so the
 * posterior bookkeeping does not hard-code the outcome range.
 */
class OutcomeModel {
 public:
  virtual ~OutcomeModel() = default;

  virtual std::string name() const = 0;
  virtual int sufficient_statistic_dim() const { return 1; }
  virtual double z_min() const = 0;
  virtual double z_max() const = 0;
  /// G(z)
  virtual double sufficient_statistic(double z) const = 0;
  /// F(theta)
  virtual double log_normalizer(double theta) const = 0;
  /// mu(theta) = E[Z | theta]
  virtual double mean(double theta) const = 0;
};

/// Bernoulli outcomes: G(z) = z, theta = logit(q), F(theta) = log(1 + e^theta).
class BernoulliModel final : public OutcomeModel {
 public:
  std::string name() const override { return "bernoulli"; }
  double z_min() const override { return 0.0; }
  double z_max() const override { return 1.0; }
  double sufficient_statistic(double z) const override { return z; }
  double log_normalizer(double theta) const override;
  double mean(double theta) const override;

  static double natural_parameter(double success_probability);
};

const BernoulliModel& bernoulli();

/*
 * Sufficient-statistic summary s = [s0, s1] of a Jeffreys-prior posterior:
 * s0 is the cumulative sufficient statistic, s1 the number of observations.
 * For Bernoulli outcomes the posterior is Beta(s0 + 1/2, s1 - s0 + 1/2).
 */
struct ArmPosterior {
  double s0 = 0.0;
  double s1 = 0.0;

  double alpha() const { return s0 + 0.5; }
  double beta() const { return s1 - s0 + 0.5; }

  friend bool operator==(const ArmPosterior&, const ArmPosterior&) = default;
};

enum class Arm { control = 0, treatment = 1 };

inline constexpr Arm kArms[] = {Arm::control, Arm::treatment};

const char* arm_name(Arm arm);
Arm parse_arm(const std::string& text);

struct SubgroupPosterior {
  ArmPosterior control;
  ArmPosterior treatment;

  ArmPosterior& arm(Arm a) { return a == Arm::control ? control : treatment; }
  const ArmPosterior& arm(Arm a) const { return a == Arm::control ? control : treatment; }

  friend bool operator==(const SubgroupPosterior&, const SubgroupPosterior&) = default;
};

/// Throws ValidationError unless `p` is a valid Bernoulli posterior summary.
void validate(const ArmPosterior& p);

/// Folds `n` observations whose sufficient statistics sum to `w` into `p`.
ArmPosterior update(const OutcomeModel& model, const ArmPosterior& p, double w, double n);
ArmPosterior update(const ArmPosterior& p, double w, double n);

double posterior_mean(const ArmPosterior& p);
double posterior_variance_of_mean(const ArmPosterior& p);

/// I_x(a, b), the regularized incomplete beta function.
double regularized_incomplete_beta(double a, double b, double x);

/// Beta(a, b) density.
double beta_pdf(double a, double b, double x);

/*
 * Posterior probability that the treatment is effective:
 *   P(p1 >= (1 + tau) p0),  p0 ~ Beta(control), p1 ~ Beta(treatment) independent.
 * Deterministic adaptive Gauss-Legendre quadrature, absolute error well below 1e-6.
 */
double prob_effective(const SubgroupPosterior& sp, double tau);

/*
 * Exact unit-step recurrences for P(p1 >= p0) (tau = 0). Starting from a
 * known value at some state, each added success or failure on either arm
 * changes the probability by a closed-form Beta-function term:
 *
 *   treatment success:  h += k / a1     treatment failure:  h -= k / b1
 *   control success:    h -= k / a0     control failure:    h += k / b0
 *
 * with k = B(a0 + a1, b0 + b1) / (B(a0, b0) B(a1, b1)). k itself updates by
 * a rational factor, so a step costs a handful of flops.
 */
class SuperiorityWalker {
 public:
  /// `probability` must be P(p1 >= p0) at `start`.
  SuperiorityWalker(const SubgroupPosterior& start, double probability);

  void step(Arm arm, bool success);

  double probability() const { return h_; }
  const SubgroupPosterior& state() const { return state_; }

 private:
  SubgroupPosterior state_;
  double h_;
  double k_;
};

/// tau = 0 probability by walking from the Jeffreys prior (integer counts only).
double prob_superior_by_recurrence(const SubgroupPosterior& sp);

struct MonteCarloEstimate {
  double value = 0.0;
  double standard_error = 0.0;
};

/// Plain Monte Carlo estimate of prob_effective from Beta draws (test oracle).
MonteCarloEstimate mc_prob_effective(const SubgroupPosterior& sp, double tau,
                                     std::int64_t draws, std::uint64_t seed);

/// Beta-binomial posterior predictive probability of `w` successes in `n` draws.
double beta_binomial_pmf(const ArmPosterior& p, int n, int w);

}  // namespace rctkg
