#pragma once

// Small dense nonlinear programs: min f(x) s.t. g(x) >= 0, h(x) = 0, solved by a
// PHR augmented Lagrangian with a BFGS inner loop.

#include "twohop/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace twohop {

struct Nlp {
  int dim = 0;
  int n_ineq = 0;
  int n_eq = 0;
  std::function<double(const Vector&, Vector*)> f;  // may return +inf outside its domain
  std::function<Vector(const Vector&)> g;
  std::function<Matrix(const Vector&)> g_jac;
  std::function<Vector(const Vector&)> h;
  std::function<Matrix(const Vector&)> h_jac;
};

struct KktResiduals {
  double stationarity = 0.0;     // || grad f - Jg^T lambda - Jh^T mu ||_2
  double complementarity = 0.0;  // sum_i |lambda_i g_i|
  double feasibility = 0.0;      // max(max_i -g_i, max_j |h_j|, 0)
};

inline KktResiduals kkt_residuals(const Nlp& p, const Vector& x, const Vector& lambda, const Vector& mu) {
  Vector grad(p.dim);
  p.f(x, &grad);
  const Vector g = p.g(x);
  const Vector h = p.h(x);
  KktResiduals r;
  r.stationarity = (grad - p.g_jac(x).transpose() * lambda - p.h_jac(x).transpose() * mu).norm();
  r.complementarity = (lambda.array() * g.array()).abs().sum();
  r.feasibility = 0.0;
  if (g.size()) r.feasibility = std::max(r.feasibility, (-g).maxCoeff());
  if (h.size()) r.feasibility = std::max(r.feasibility, h.cwiseAbs().maxCoeff());
  return r;
}

struct AlConfig {
  int max_outer = 20;
  double rho0 = 10.0;
  double rho_growth = 10.0;
  double rho_max = 1e9;
  double feas_tol = 1e-10;
  double kkt_tol = 1e-7;
  int max_inner = 5000;
  double inner_tol = 1e-11;
  // Active-set Newton polish is attempted once feasibility is below this level.
  double polish_feas = 1e-8;

  void validate() const {
    if (max_outer < 1 || max_inner < 1) fail(ErrorCode::InvalidConfig, "iteration budgets must be positive");
    if (!(rho0 > 0) || !(rho_growth > 1) || !(rho_max >= rho0))
      fail(ErrorCode::InvalidConfig, "penalty schedule must be positive and increasing");
    if (!(feas_tol > 0) || !(kkt_tol > 0) || !(inner_tol > 0))
      fail(ErrorCode::InvalidConfig, "tolerances must be positive");
  }
};

struct AlResult {
  Vector x, lambda, mu;
  double feasibility = 0.0;
  double stationarity = 0.0;
  double complementarity = 0.0;
  int outer_rounds = 0;
  bool converged = false;
};

/// BFGS with Armijo backtracking on a C^1 function. Returns the final point.
inline Vector bfgs_minimize(const std::function<double(const Vector&, Vector&)>& fg, Vector x, int max_iter,
                            double tol) {
  const auto n = x.size();
  Vector g(n);
  double fx = fg(x, g);
  if (!std::isfinite(fx)) return x;
  Matrix H = Matrix::Identity(n, n);
  bool scaled = false;
  Vector g_new(n);
  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= tol) break;
    Vector d = -H * g;
    double slope = g.dot(d);
    if (!(slope < 0)) {
      H.setIdentity();
      d = -g;
      slope = -g.squaredNorm();
    }
    double step = 1.0;
    Vector x_new;
    double f_new = 0.0;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = x + step * d;
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const Vector s = x_new - x;
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    x = x_new;
    g = g_new;
    const bool stalled = fx - f_new <= 1e-16 * std::max(1.0, std::abs(fx));
    fx = f_new;
    if (sy > 1e-14 * s.norm() * y.norm()) {
      if (!scaled) {
        H *= sy / y.squaredNorm();
        scaled = true;
      }
      const double r = 1.0 / sy;
      const Vector Hy = H * y;
      H += (sy + y.dot(Hy)) * r * r * (s * s.transpose()) - r * (Hy * s.transpose() + s * Hy.transpose());
    }
    if (stalled && s.lpNorm<Eigen::Infinity>() <= 1e-16 * std::max(1.0, x.lpNorm<Eigen::Infinity>())) break;
  }
  return x;
}

/// Newton iterations on the KKT system of the constraints active at x (g_i <= active_tol),
/// treated as equalities. Steps are minimum-norm least-squares solutions, so linearly
/// dependent active gradients are tolerated. The Lagrangian Hessian is a central
/// difference of the analytic Lagrangian gradient. Returns true and overwrites the
/// state only if the polished point is at least as feasible, keeps every multiplier
/// above -1e-8 (then clamped to 0), and reduces stationarity.
inline bool polish_kkt(const Nlp& p, Vector& x, Vector& lambda, Vector& mu, double active_tol = 1e-6,
                       int max_iter = 20) {
  const Vector g0 = p.g(x);
  std::vector<int> active;
  for (int i = 0; i < p.n_ineq; ++i)
    if (g0(i) <= active_tol) active.push_back(i);
  const int na = static_cast<int>(active.size());
  const int m = na + p.n_eq;

  auto lagrangian_grad = [&](const Vector& z, const Vector& lam, const Vector& nu) {
    Vector gf(p.dim);
    p.f(z, &gf);
    return Vector(gf - p.g_jac(z).transpose() * lam - p.h_jac(z).transpose() * nu);
  };

  Vector xs = x, lam = lambda, nu = mu;
  const auto before = kkt_residuals(p, x, lambda, mu);
  for (int i = 0; i < p.n_ineq; ++i)
    if (g0(i) > active_tol) lam(i) = 0.0;

  for (int it = 0; it < max_iter; ++it) {
    const Vector gl = lagrangian_grad(xs, lam, nu);
    const Vector g = p.g(xs);
    const Vector h = p.h(xs);
    const Matrix Jg = p.g_jac(xs);
    const Matrix Jh = p.h_jac(xs);
    Vector rhs(p.dim + m);
    rhs.head(p.dim) = -gl;
    for (int a = 0; a < na; ++a) rhs(p.dim + a) = -g(active[static_cast<std::size_t>(a)]);
    rhs.tail(p.n_eq) = -h;
    if (rhs.lpNorm<Eigen::Infinity>() <= 1e-14) break;

    Matrix H(p.dim, p.dim);
    for (int j = 0; j < p.dim; ++j) {
      const double step = 1e-6 * std::max(1.0, std::abs(xs(j)));
      Vector xp = xs, xm = xs;
      xp(j) += step;
      xm(j) -= step;
      H.col(j) = (lagrangian_grad(xp, lam, nu) - lagrangian_grad(xm, lam, nu)) / (2 * step);
    }
    H = 0.5 * (H + H.transpose()).eval();

    Matrix K = Matrix::Zero(p.dim + m, p.dim + m);
    K.topLeftCorner(p.dim, p.dim) = H;
    for (int a = 0; a < na; ++a) {
      const auto row = Jg.row(active[static_cast<std::size_t>(a)]);
      K.block(0, p.dim + a, p.dim, 1) = -row.transpose();
      K.block(p.dim + a, 0, 1, p.dim) = row;
    }
    K.block(0, p.dim + na, p.dim, p.n_eq) = -Jh.transpose();
    K.block(p.dim + na, 0, p.n_eq, p.dim) = Jh;
    const Vector step = K.completeOrthogonalDecomposition().solve(rhs);
    if (!step.allFinite()) return false;
    xs += step.head(p.dim);
    for (int a = 0; a < na; ++a) lam(active[static_cast<std::size_t>(a)]) += step(p.dim + a);
    nu += step.tail(p.n_eq);
  }
  if (lam.size() && lam.minCoeff() < -1e-8) return false;
  lam = lam.cwiseMax(0.0);
  const auto after = kkt_residuals(p, xs, lam, nu);
  if (!(after.stationarity < before.stationarity) || after.feasibility > std::max(before.feasibility, 1e-12) ||
      !(after.complementarity <= std::max(before.complementarity, 1e-10)))
    return false;
  x = xs;
  lambda = lam;
  mu = nu;
  return true;
}

/// PHR augmented Lagrangian:
///   L = f - sum mu h + rho/2 sum h^2 + 1/(2 rho) sum [max(0, lambda - rho g)^2 - lambda^2].
/// The penalty grows by rho_growth whenever feasibility is above tolerance and failed to
/// shrink fourfold in the last round.
inline AlResult augmented_lagrangian(const Nlp& p, Vector x, const AlConfig& cfg, const Vector* lambda0 = nullptr,
                                     const Vector* mu0 = nullptr) {
  cfg.validate();
  AlResult r;
  r.lambda = lambda0 && lambda0->size() == p.n_ineq ? *lambda0 : Vector::Zero(p.n_ineq);
  r.mu = mu0 && mu0->size() == p.n_eq ? *mu0 : Vector::Zero(p.n_eq);
  double rho = cfg.rho0;
  double last_feas = std::numeric_limits<double>::infinity();

  for (int outer = 1; outer <= cfg.max_outer; ++outer) {
    const Vector lam = r.lambda, mu = r.mu;
    auto fg = [&](const Vector& z, Vector& grad) {
      Vector gf(p.dim);
      const double fz = p.f(z, &gf);
      if (!std::isfinite(fz)) return fz;
      const Vector g = p.g(z);
      const Vector h = p.h(z);
      const Vector shifted = (lam - rho * g).cwiseMax(0.0);
      const Vector heq = mu - rho * h;
      grad = gf - p.g_jac(z).transpose() * shifted - p.h_jac(z).transpose() * heq;
      return fz - mu.dot(h) + 0.5 * rho * h.squaredNorm() +
             (shifted.squaredNorm() - lam.squaredNorm()) / (2.0 * rho);
    };
    x = bfgs_minimize(fg, x, cfg.max_inner, cfg.inner_tol);
    r.lambda = (lam - rho * p.g(x)).cwiseMax(0.0);
    r.mu = mu - rho * p.h(x);
    auto k = kkt_residuals(p, x, r.lambda, r.mu);
    if (k.feasibility <= cfg.polish_feas && k.stationarity > cfg.kkt_tol) {
      Vector xp = x, lp = r.lambda, mp = r.mu;
      if (polish_kkt(p, xp, lp, mp)) {
        x = xp;
        r.lambda = lp;
        r.mu = mp;
        k = kkt_residuals(p, x, r.lambda, r.mu);
      }
    }
    r.x = x;
    r.feasibility = k.feasibility;
    r.stationarity = k.stationarity;
    r.complementarity = k.complementarity;
    r.outer_rounds = outer;
    if (!x.allFinite()) break;
    if (k.feasibility <= cfg.feas_tol && k.stationarity <= cfg.kkt_tol && k.complementarity <= cfg.kkt_tol) {
      r.converged = true;
      break;
    }
    if (k.feasibility > cfg.feas_tol && k.feasibility > 0.25 * last_feas) rho = std::min(rho * cfg.rho_growth, cfg.rho_max);
    last_feas = k.feasibility;
  }
  return r;
}

}  // namespace twohop
