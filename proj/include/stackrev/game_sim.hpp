#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "stackrev/errors.hpp"
#include "stackrev/rng.hpp"

namespace stackrev::sim {

/// Synthetic strongly convex risk surface: loss(x) = 1/2 (x-x*)' A (x-x*)
/// with A symmetric positive definite.
struct QuadraticLandscape {
  int dimension = 0;
  Eigen::MatrixXd a;
  Eigen::VectorXd x_star;
  double mu = 0.0;        // smallest eigenvalue of A
  double l_smooth = 0.0;  // largest eigenvalue of A

  double loss(const Eigen::VectorXd& x) const;
  Eigen::VectorXd gradient(const Eigen::VectorXd& x) const;

  /// Validates symmetry (within 1e-9) and positive definiteness.
  static QuadraticLandscape from_matrix(Eigen::MatrixXd a,
                                        Eigen::VectorXd x_star);
  static QuadraticLandscape from_diagonal(const std::vector<double>& diag,
                                          Eigen::VectorXd x_star);
};

/// Q diag(lambda) Q' with Q from the QR of a standard normal matrix and
/// eigenvalues log-uniform in [mu, l]; the extreme eigenvalues are pinned to
/// mu and l so the stated conditioning is exact.
QuadraticLandscape random_landscape(Rng& rng, int dimension, double mu,
                                    double l);

/// Quadratic proxy for the alignment penalty: gamma/2 * ||x - target||^2.
/// gamma = 0 is the null hint (unguided follower).
struct SyntheticHint {
  Eigen::VectorXd target;
  double gamma = 0.0;

  bool is_null() const { return gamma == 0.0; }
  static SyntheticHint null_hint(int dimension) {
    return SyntheticHint{Eigen::VectorXd::Zero(dimension), 0.0};
  }
};

double total_loss(const QuadraticLandscape& landscape,
                  const SyntheticHint& hint, const Eigen::VectorXd& x);
Eigen::VectorXd total_gradient(const QuadraticLandscape& landscape,
                               const SyntheticHint& hint,
                               const Eigen::VectorXd& x);

/// Minimizer of the hinted objective: (A + gamma I)^-1 (A x* + gamma s).
Eigen::VectorXd hinted_fixed_point(const QuadraticLandscape& landscape,
                                   const SyntheticHint& hint);

/// kappa = max_i |1 - eta * lambda_i| of the descent operator, including the
/// hint curvature when present. kappa < 1 iff eta in (0, 2/L_total).
double contraction_factor(const QuadraticLandscape& landscape, double eta);
double contraction_factor(const QuadraticLandscape& landscape,
                          const SyntheticHint& hint, double eta);

struct SimResult {
  std::vector<Eigen::VectorXd> trajectory;  // includes the start point
  std::vector<double> gradient_norms;       // same indexing as trajectory
  Eigen::VectorXd x_final;
  double final_gradient_norm = 0.0;
  int iterations = 0;
};

/// Plain gradient descent on loss + hint penalty until ||grad|| < eps or
/// max_steps. Throws Diverged if the gradient norm grows by 1e6x, which can
/// only happen for eta >= 2/L_total.
SimResult follower_descend(const Eigen::VectorXd& x0,
                           const QuadraticLandscape& landscape,
                           const SyntheticHint& hint, double eta,
                           int max_steps, double eps);

/// Steps sufficient to reach ||grad|| < eps from ||grad|| = grad0 under
/// per-step contraction kappa: ceil(log(grad0/eps) / log(1/kappa)) + 1.
int contraction_step_bound(double kappa, double grad0, double eps);

/// A risk is resolved at x when x is within eps_risk of its risk-free point.
struct SimRisk {
  Eigen::VectorXd safe_point;
  double severity = 0.0;
};

struct EquilibriumOptions {
  Eigen::VectorXd x0;
  double eta = 0.0;  // <= 0: per-hint 1 / (L + gamma)
  int max_steps = 200000;
  double eps = 1e-9;
  double eps_risk = 1e-3;
};

struct EquilibriumResult {
  double v_se = 0.0;  // max utility over the hint grid
  double v_ne = 0.0;  // utility of the null hint
  std::size_t best_hint = 0;
  std::vector<double> hint_utilities;
};

/// Descends to the fixed point of every hint in the grid and scores the
/// leader utility V(h) = sum_k severity_k * [risk k resolved] - lambda_cost *
/// cost(h), with cost 0 for the null hint and 1 otherwise. The grid must
/// contain the null hint, which makes V_SE >= V_NE structural.
EquilibriumResult simulate_equilibrium(const QuadraticLandscape& landscape,
                                       const std::vector<SyntheticHint>& grid,
                                       const std::vector<SimRisk>& risks,
                                       double lambda_cost,
                                       const EquilibriumOptions& opts);

struct Theorem2Instance {
  std::uint64_t seed = 0;
  int dimension = 0;
  double kappa = 0.0;
  double max_step_ratio = 0.0;  // max measured per-step gradient decay ratio
  int steps_used = 0;
  int steps_bound = 0;
  double final_gradient = 0.0;
  double max_decay_violation = 0.0;  // geometric-decay slack, <= 0 when clean
  bool pass = false;
};

struct Theorem2Report {
  std::vector<Theorem2Instance> instances;
  double boundary_kappa = 0.0;  // kappa at eta = 2/L, must be 1 +- 1e-12
  bool boundary_non_contractive = false;
  bool all_pass = false;
};

/// 100 (by default) seeded random SPD landscapes with n <= 8 and condition
/// number <= 100, descended at eta = eta_scale/L; checks geometric decay and
/// the kappa-derived step bound, plus the eta = 2/L boundary case. Forcing
/// eta_scale = 2 puts every instance on the non-contractive boundary and the
/// suite fails as it must.
Theorem2Report run_theorem2_suite(std::uint64_t seed, int instances = 100,
                                  double eta_scale = 1.0);

struct Theorem1Instance {
  std::uint64_t seed = 0;
  double v_se = 0.0;
  double v_ne = 0.0;
  bool weak_ok = false;        // V_SE >= V_NE (random grid with null)
  double strict_v_se = 0.0;
  double strict_v_ne = 0.0;
  bool strict_ok = false;      // V_SE > V_NE (misaligned-risk family)
  bool pass = false;
};

struct Theorem1Report {
  std::vector<Theorem1Instance> instances;
  bool all_pass = false;
};

Theorem1Report run_theorem1_suite(std::uint64_t seed, int instances = 100);

}  // namespace stackrev::sim
