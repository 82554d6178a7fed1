#include "rctkg/bayes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace rctkg {

double BernoulliModel::log_normalizer(double theta) const {
  // log(1 + e^theta) without overflow
  return theta > 0 ? theta + std::log1p(std::exp(-theta)) : std::log1p(std::exp(theta));
}

double BernoulliModel::mean(double theta) const {
  return 1.0 / (1.0 + std::exp(-theta));
}

double BernoulliModel::natural_parameter(double success_probability) {
  if (!(success_probability > 0.0 && success_probability < 1.0))
    throw ValidationError("success probability must lie in (0, 1)");
  return std::log(success_probability / (1.0 - success_probability));
}

const BernoulliModel& bernoulli() {
  static const BernoulliModel model;
  return model;
}

void validate(const ArmPosterior& p) {
  if (!std::isfinite(p.s0) || !std::isfinite(p.s1))
    throw ValidationError("posterior statistics must be finite");
  if (p.s1 < 0.0) throw ValidationError("posterior sample count s1 must be nonnegative");
  if (p.s0 < 0.0 || p.s0 > p.s1)
    throw ValidationError("posterior success count s0 must lie in [0, s1]");
}

ArmPosterior update(const OutcomeModel& model, const ArmPosterior& p, double w, double n) {
  if (!(n >= 0.0)) throw ValidationError("observation count must be nonnegative");
  const double lo = n * model.sufficient_statistic(model.z_min());
  const double hi = n * model.sufficient_statistic(model.z_max());
  if (!(w >= std::min(lo, hi) && w <= std::max(lo, hi)))
    throw ValidationError("sufficient statistic outside the range reachable by n observations");
  return {p.s0 + w, p.s1 + n};
}

ArmPosterior update(const ArmPosterior& p, double w, double n) {
  return update(bernoulli(), p, w, n);
}

double posterior_mean(const ArmPosterior& p) {
  return p.alpha() / (p.s1 + 1.0);
}

double posterior_variance_of_mean(const ArmPosterior& p) {
  const double a = p.alpha();
  const double b = p.beta();
  const double t = a + b;
  return a * b / (t * t * (t + 1.0));
}

namespace {

double log_beta(double a, double b) {
  return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Continued fraction for I_x(a, b), modified Lentz. Converges fast for
// x < (a + 1) / (a + b + 2).
double incbeta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 1000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) break;
  }
  return h;
}

// Regularized incomplete beta with a cached log B(a, b). Returns the pair
// (I_x(a,b), 1 - I_x(a,b)) so callers needing the upper tail keep full
// relative accuracy. `xc` is 1 - x, supplied separately to avoid cancellation.
struct IncompleteBeta {
  double a;
  double b;
  double lbeta;

  IncompleteBeta(double a_, double b_) : a(a_), b(b_), lbeta(log_beta(a_, b_)) {}

  std::pair<double, double> operator()(double x, double xc) const {
    if (x <= 0.0) return {0.0, 1.0};
    if (xc <= 0.0) return {1.0, 0.0};
    const double front = std::exp(a * std::log(x) + b * std::log(xc) - lbeta);
    if (x < (a + 1.0) / (a + b + 2.0)) {
      const double lower = front * incbeta_cf(a, b, x) / a;
      return {lower, 1.0 - lower};
    }
    const double upper = front * incbeta_cf(b, a, xc) / b;
    return {1.0 - upper, upper};
  }
};

struct GaussLegendre {
  std::vector<double> nodes;  // on [-1, 1]
  std::vector<double> weights;

  explicit GaussLegendre(int n) : nodes(n), weights(n) {
    for (int i = 0; i < n; ++i) {
      double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p1 = 1.0;
        double p2 = 0.0;
        for (int j = 1; j <= n; ++j) {
          const double p3 = p2;
          p2 = p1;
          p1 = ((2.0 * j - 1.0) * z * p2 - (j - 1.0) * p3) / j;
        }
        dp = n * (z * p1 - p2) / (z * z - 1.0);
        const double dz = p1 / dp;
        z -= dz;
        if (std::fabs(dz) < 1e-16) break;
      }
      nodes[i] = z;
      weights[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
  }

  template <class F>
  double integrate(F&& f, double lo, double hi) const {
    const double half = 0.5 * (hi - lo);
    const double mid = 0.5 * (hi + lo);
    double sum = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) sum += weights[i] * f(mid + half * nodes[i]);
    return sum * half;
  }
};

const GaussLegendre& coarse_rule() {
  static const GaussLegendre rule(10);
  return rule;
}

const GaussLegendre& fine_rule() {
  static const GaussLegendre rule(20);
  return rule;
}

constexpr double kPanelTolerance = 1e-11;
constexpr int kMaxDepth = 30;

template <class F>
double adaptive_panel(const F& f, double lo, double hi, double fine, int depth) {
  const double coarse = coarse_rule().integrate(f, lo, hi);
  if (std::fabs(fine - coarse) <= kPanelTolerance || depth >= kMaxDepth) return fine;
  const double mid = 0.5 * (lo + hi);
  const double left = fine_rule().integrate(f, lo, mid);
  const double right = fine_rule().integrate(f, mid, hi);
  return adaptive_panel(f, lo, mid, left, depth + 1) + adaptive_panel(f, mid, hi, right, depth + 1);
}

// Beta-distribution spread, used only to place panel breakpoints.
std::pair<double, double> mean_sd(double a, double b) {
  const double t = a + b;
  return {a / t, std::sqrt(a * b / (t * t * (t + 1.0)))};
}

// P(p1 >= c * p0) for p0 ~ Beta(a0, b0), p1 ~ Beta(a1, b1).
//
// Integrates over p0 with the substitution p0 = sin^2(phi). For the
// half-integer shape parameters produced by Jeffreys posteriors the
// transformed density 2 sin^(2a-1) cos^(2b-1) / B(a, b) is smooth on
// [0, pi/2], so Gauss-Legendre converges geometrically even for a = 1/2.
double effective_probability(double a0, double b0, double a1, double b1, double c) {
  const IncompleteBeta tail(a1, b1);
  const double lbeta0 = log_beta(a0, b0);
  const double e_sin = 2.0 * a0 - 1.0;
  const double e_cos = 2.0 * b0 - 1.0;
  const bool unit_ratio = (c == 1.0);

  auto integrand = [&](double phi) {
    const double s = std::sin(phi);
    const double co = std::cos(phi);
    const double u = s * s;
    const double x = c * u;
    if (x >= 1.0) return 0.0;
    const double xc = unit_ratio ? co * co : 1.0 - x;
    const double survival = tail(x, xc).second;
    if (survival == 0.0) return 0.0;
    const double log_density =
        std::numbers::ln2 + e_sin * std::log(s) + e_cos * std::log(co) - lbeta0;
    return std::exp(log_density) * survival;
  };

  const double u_max = std::min(1.0, 1.0 / c);
  std::vector<double> cuts{0.0, u_max};
  auto add_cuts = [&](double m, double sd) {
    for (double k : {0.0, -3.0, 3.0, -8.0, 8.0}) {
      const double u = m + k * sd;
      if (u > 0.0 && u < u_max) cuts.push_back(u);
    }
  };
  const auto [m0, sd0] = mean_sd(a0, b0);
  const auto [m1, sd1] = mean_sd(a1, b1);
  add_cuts(m0, sd0);
  add_cuts(m1 / c, sd1 / c);
  std::sort(cuts.begin(), cuts.end());

  std::vector<double> phis;
  phis.reserve(cuts.size());
  for (double u : cuts) {
    const double phi = std::asin(std::sqrt(u));
    if (phis.empty() || phi - phis.back() > 1e-9) phis.push_back(phi);
  }
  phis.back() = std::asin(std::sqrt(u_max));

  double total = 0.0;
  for (std::size_t i = 0; i + 1 < phis.size(); ++i) {
    const double lo = phis[i];
    const double hi = phis[i + 1];
    total += adaptive_panel(integrand, lo, hi, fine_rule().integrate(integrand, lo, hi), 0);
  }
  return std::clamp(total, 0.0, 1.0);
}

bool canonical_before(const ArmPosterior& lhs, const ArmPosterior& rhs) {
  if (lhs.s1 != rhs.s1) return lhs.s1 < rhs.s1;
  return lhs.s0 < rhs.s0;
}

}  // namespace

const char* arm_name(Arm arm) {
  return arm == Arm::control ? "control" : "treatment";
}

Arm parse_arm(const std::string& text) {
  if (text == "control" || text == "0") return Arm::control;
  if (text == "treatment" || text == "1") return Arm::treatment;
  throw ValidationError("unknown arm '" + text + "' (expected control or treatment)");
}

SuperiorityWalker::SuperiorityWalker(const SubgroupPosterior& start, double probability)
    : state_(start), h_(probability) {
  const double a0 = start.control.alpha(), b0 = start.control.beta();
  const double a1 = start.treatment.alpha(), b1 = start.treatment.beta();
  k_ = std::exp(log_beta(a0 + a1, b0 + b1) - log_beta(a0, b0) - log_beta(a1, b1));
}

void SuperiorityWalker::step(Arm arm, bool success) {
  const double a0 = state_.control.alpha(), b0 = state_.control.beta();
  const double a1 = state_.treatment.alpha(), b1 = state_.treatment.beta();
  const double total = a0 + b0 + a1 + b1;
  if (arm == Arm::treatment) {
    if (success) {
      h_ += k_ / a1;
      k_ *= (a0 + a1) / total * (a1 + b1) / a1;
    } else {
      h_ -= k_ / b1;
      k_ *= (b0 + b1) / total * (a1 + b1) / b1;
    }
  } else {
    if (success) {
      h_ -= k_ / a0;
      k_ *= (a0 + a1) / total * (a0 + b0) / a0;
    } else {
      h_ += k_ / b0;
      k_ *= (b0 + b1) / total * (a0 + b0) / b0;
    }
  }
  auto& p = state_.arm(arm);
  p.s1 += 1.0;
  if (success) p.s0 += 1.0;
}

double prob_superior_by_recurrence(const SubgroupPosterior& sp) {
  validate(sp.control);
  validate(sp.treatment);
  for (const Arm arm : kArms) {
    const auto& p = sp.arm(arm);
    if (p.s0 != std::floor(p.s0) || p.s1 != std::floor(p.s1))
      throw ValidationError("recurrence route requires integer counts");
  }
  SuperiorityWalker walker(SubgroupPosterior{}, 0.5);
  for (const Arm arm : kArms) {
    const auto& p = sp.arm(arm);
    const auto successes = static_cast<std::int64_t>(p.s0);
    const auto failures = static_cast<std::int64_t>(p.s1 - p.s0);
    for (std::int64_t i = 0; i < successes; ++i) walker.step(arm, true);
    for (std::int64_t i = 0; i < failures; ++i) walker.step(arm, false);
  }
  return std::clamp(walker.probability(), 0.0, 1.0);
}

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ValidationError("incomplete beta requires a > 0 and b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("incomplete beta requires x in [0, 1]");
  return IncompleteBeta(a, b)(x, 1.0 - x).first;
}

double beta_pdf(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ValidationError("beta density requires a > 0 and b > 0");
  if (x < 0.0 || x > 1.0) return 0.0;
  if (x == 0.0) return a < 1.0 ? std::numeric_limits<double>::infinity() : (a == 1.0 ? b : 0.0);
  if (x == 1.0) return b < 1.0 ? std::numeric_limits<double>::infinity() : (b == 1.0 ? a : 0.0);
  return std::exp((a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - log_beta(a, b));
}

double prob_effective(const SubgroupPosterior& sp, double tau) {
  if (!(tau >= 0.0)) throw ValidationError("effectiveness threshold tau must be nonnegative");
  validate(sp.control);
  validate(sp.treatment);
  const auto& ctl = sp.control;
  const auto& trt = sp.treatment;
  if (tau == 0.0 && canonical_before(trt, ctl)) {
    // P(p1 >= p0) = 1 - P(p0 >= p1); evaluating one canonical orientation
    // makes arm-swapped states exact complements.
    return 1.0 - effective_probability(trt.alpha(), trt.beta(), ctl.alpha(), ctl.beta(), 1.0);
  }
  return effective_probability(ctl.alpha(), ctl.beta(), trt.alpha(), trt.beta(), 1.0 + tau);
}

MonteCarloEstimate mc_prob_effective(const SubgroupPosterior& sp, double tau, std::int64_t draws,
                                     std::uint64_t seed) {
  if (draws < 1) throw ValidationError("Monte Carlo estimate needs at least one draw");
  validate(sp.control);
  validate(sp.treatment);
  std::mt19937_64 gen(seed);
  std::gamma_distribution<double> ga0(sp.control.alpha()), gb0(sp.control.beta());
  std::gamma_distribution<double> ga1(sp.treatment.alpha()), gb1(sp.treatment.beta());
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < draws; ++i) {
    const double x0 = ga0(gen);
    const double p0 = x0 / (x0 + gb0(gen));
    const double x1 = ga1(gen);
    const double p1 = x1 / (x1 + gb1(gen));
    if (p1 >= (1.0 + tau) * p0) ++hits;
  }
  const double n = static_cast<double>(draws);
  const double mean = hits / n;
  return {mean, std::sqrt(std::max(mean * (1.0 - mean), 0.0) / n)};
}

double beta_binomial_pmf(const ArmPosterior& p, int n, int w) {
  if (n < 0 || w < 0 || w > n) throw ValidationError("beta-binomial pmf requires 0 <= w <= n");
  validate(p);
  const double a = p.alpha();
  const double b = p.beta();
  const double log_choose = std::lgamma(n + 1.0) - std::lgamma(w + 1.0) - std::lgamma(n - w + 1.0);
  return std::exp(log_choose + log_beta(w + a, n - w + b) - log_beta(a, b));
}

}  // namespace rctkg
