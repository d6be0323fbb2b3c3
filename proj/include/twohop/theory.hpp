#pragma once

// Nuclear-norm margin programs over the restricted block form of the logit
// matrix, with and without identity supervision, plus a full-matrix oracle.
//
// W has 2n+2 rows (a_1..a_n, b_1..b_n, r1, r2) and 2n columns (b_1..b_n, c_1..c_n),
// i.e. the Emb-MLP logit matrix of the C = 1 task with N = n.

#include "twohop/common.hpp"
#include "twohop/margins.hpp"
#include "twohop/nlp.hpp"
#include "twohop/taskgen.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace twohop::theory {

using Json = nlohmann::ordered_json;

enum class Program { Id, NoId };

inline std::string_view to_string(Program p) { return p == Program::Id ? "id" : "noid"; }

inline Program program_from_string(std::string_view s) {
  if (s == "id") return Program::Id;
  if (s == "noid") return Program::NoId;
  fail(ErrorCode::InvalidConfig, "unknown program '" + std::string(s) + "'");
}

inline void check_n(int n) {
  if (n < 2) fail(ErrorCode::InvalidDimension, "n must be >= 2, got " + std::to_string(n));
}

struct ReducedPointId {
  double a1 = 0, a2 = 0, b1 = 0, b2 = 0, c1 = 0, c2 = 0, d1 = 0, d2 = 0, e = 0, f = 0, g = 0, h = 0;
  double t = 0;
  int n = 0;

  double u() const { return a1 * d1 - b1 * c1; }

  /// Free variables of the reformulated program: (a1,a2,b1,b2,c1,c2,d1,d2,e,f,t); g = -e, h = -f.
  Vector program_vector() const {
    Vector x(11);
    x << a1, a2, b1, b2, c1, c2, d1, d2, e, f, t;
    return x;
  }

  static ReducedPointId from_program_vector(const Vector& x, int n) {
    ReducedPointId p;
    p.a1 = x(0), p.a2 = x(1), p.b1 = x(2), p.b2 = x(3), p.c1 = x(4), p.c2 = x(5);
    p.d1 = x(6), p.d2 = x(7), p.e = x(8), p.f = x(9), p.t = x(10);
    p.g = -p.e;
    p.h = -p.f;
    p.n = n;
    return p;
  }

  ReducedPointId scaled(double k) const {
    ReducedPointId p = *this;
    for (double* v : {&p.a1, &p.a2, &p.b1, &p.b2, &p.c1, &p.c2, &p.d1, &p.d2, &p.e, &p.f, &p.g, &p.h}) *v *= k;
    p.t *= k * k;  // slack for the quadratic u
    return p;
  }
};

struct ReducedPointNoId {
  double a1 = 0, a2 = 0, b1 = 0, b2 = 0, alpha = 0, beta = 0;
  int n = 0;

  ReducedPointNoId scaled(double k) const {
    ReducedPointNoId p = *this;
    for (double* v : {&p.a1, &p.a2, &p.b1, &p.b2, &p.alpha, &p.beta}) *v *= k;
    return p;
  }
};

// --- assembly -------------------------------------------------------------------

namespace detail {

inline void fill_block(Matrix& W, Eigen::Index r0, Eigen::Index c0, int n, double diag, double all) {
  W.block(r0, c0, n, n).setConstant(all);
  for (int i = 0; i < n; ++i) W(r0 + i, c0 + i) += diag;
}

}  // namespace detail

inline Matrix assemble_w(const ReducedPointId& p, int n) {
  check_n(n);
  Matrix W(2 * n + 2, 2 * n);
  detail::fill_block(W, 0, 0, n, p.a1, p.a2);
  detail::fill_block(W, n, 0, n, p.b1, p.b2);
  detail::fill_block(W, 0, n, n, p.c1, p.c2);
  detail::fill_block(W, n, n, n, p.d1, p.d2);
  W.block(2 * n, 0, 1, n).setConstant(p.e);
  W.block(2 * n + 1, 0, 1, n).setConstant(p.f);
  W.block(2 * n, n, 1, n).setConstant(p.g);
  W.block(2 * n + 1, n, 1, n).setConstant(p.h);
  return W;
}

/// Symmetric no-identity form: the bridge-input and object-output blocks swap roles.
inline Matrix assemble_w(const ReducedPointNoId& p, int n) {
  check_n(n);
  Matrix W(2 * n + 2, 2 * n);
  detail::fill_block(W, 0, 0, n, p.a1, p.a2);
  detail::fill_block(W, n, 0, n, p.b1, p.b2);
  detail::fill_block(W, 0, n, n, p.b1, p.b2);
  detail::fill_block(W, n, n, n, p.a1, p.a2);
  W.block(2 * n, 0, 1, n).setConstant(p.alpha);
  W.block(2 * n + 1, 0, 1, n).setConstant(p.beta);
  W.block(2 * n, n, 1, n).setConstant(p.beta);
  W.block(2 * n + 1, n, 1, n).setConstant(p.alpha);
  return W;
}

inline double svd_nuclear_norm(const Matrix& W) {
  Eigen::JacobiSVD<Matrix> svd(W);
  return svd.singularValues().sum();
}

// --- closed-form nuclear norm -----------------------------------------------------

struct GramCoefficients {
  double ca1, ca2, cd1, cd2, cb1, cb2;
};

inline GramCoefficients gram_coefficients(const ReducedPointId& p, int n) {
  const double N = n;
  GramCoefficients k;
  k.ca1 = p.a1 * p.a1 + p.b1 * p.b1;
  k.ca2 = 2 * p.a1 * p.a2 + N * p.a2 * p.a2 + 2 * p.b1 * p.b2 + N * p.b2 * p.b2 + p.e * p.e + p.f * p.f;
  k.cd1 = p.c1 * p.c1 + p.d1 * p.d1;
  k.cd2 = 2 * p.c1 * p.c2 + N * p.c2 * p.c2 + 2 * p.d1 * p.d2 + N * p.d2 * p.d2 + p.g * p.g + p.h * p.h;
  k.cb1 = p.a1 * p.c1 + p.b1 * p.d1;
  k.cb2 = p.a1 * p.c2 + p.a2 * p.c1 + N * p.a2 * p.c2 + p.b1 * p.d2 + p.b2 * p.d1 + N * p.b2 * p.d2 + p.e * p.g +
          p.f * p.h;
  return k;
}

/// Rounding guard for AD - B^2, which is a Gram determinant and never negative in
/// exact arithmetic. Values down to -tol * max(1, AD) are treated as zero.
inline constexpr double kRadicandTolerance = 1e-9;

inline double nuclear_norm_closed(const ReducedPointId& p, int n) {
  check_n(n);
  const auto k = gram_coefficients(p, n);
  const double N = n;
  const double A = k.ca1 + N * k.ca2;
  const double D = k.cd1 + N * k.cd2;
  const double B = k.cb1 + N * k.cb2;
  double inner = A * D - B * B;
  const double scale = std::max(1.0, std::abs(A * D));
  if (inner < -kRadicandTolerance * scale)
    fail(ErrorCode::NegativeRadicand, "inner radicand " + std::to_string(inner) + " is negative");
  // AD - B^2 = |x|^2 |y|^2 - (x.y)^2 for the column-sum directions x, y of W; the
  // Lagrange identity evaluates it without the cancellation of the printed form.
  const double rn = std::sqrt(N);
  const double x[4] = {p.a1 + N * p.a2, p.b1 + N * p.b2, rn * p.e, rn * p.f};
  const double y[4] = {p.c1 + N * p.c2, p.d1 + N * p.d2, rn * p.g, rn * p.h};
  inner = 0.0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) inner += (x[i] * y[j] - x[j] * y[i]) * (x[i] * y[j] - x[j] * y[i]);
  const double first = k.ca1 + k.cd1 + 2.0 * std::abs(p.u());
  const double second = A + D + 2.0 * std::sqrt(inner);
  return (N - 1.0) * std::sqrt(std::max(first, 0.0)) + std::sqrt(std::max(second, 0.0));
}

// --- the reformulated identity program -----------------------------------------------

inline constexpr double kEqualityTolerance = 1e-8;

struct IdTerms {
  double m1, m2;
};

inline IdTerms id_terms(const ReducedPointId& p, int n) {
  const double N = n;
  const double x = p.a1 + N * p.a2, y = p.b1 + N * p.b2;
  return {p.a1 * p.a1 + p.b1 * p.b1 + p.c1 * p.c1 + p.d1 * p.d1 + 2 * p.t, x * x + y * y + N * p.e * p.e + N * p.f * p.f};
}

/// Equality residuals: h1, h2, e + g, f + h.
inline Vector id_equalities(const ReducedPointId& p, int n) {
  const double N = n;
  Vector r(4);
  r << p.a1 + p.c1 + N * (p.a2 + p.c2), p.b1 + p.d1 + N * (p.b2 + p.d2), p.e + p.g, p.f + p.h;
  return r;
}

/// Inequality values g1..g9 (feasible when all >= 0), using the eliminated forms e = -g, f = -h.
inline Vector id_inequalities(const ReducedPointId& p) {
  Vector g(9);
  g << p.a1 - 1, p.a1 + p.a2 + 2 * p.e - p.c1 - p.c2 - 1, p.b1 - 1, p.b1 + p.b2 - p.d1 - p.d2 - 1, p.d1 - 1,
      p.d1 + p.d2 - p.b1 - p.b2 - 2 * p.f - 1, p.t - p.u(), p.t + p.u(), p.t;
  return g;
}

/// The restricted-form constraint list with g and h kept free:
/// a1-1, d1-1, a1+a2+e-c1-c2-g-1, d1+d2+h-b1-b2-f-1, b1-1, b1+b2-d1-d2-1.
inline Vector lemma_inequalities(const ReducedPointId& p) {
  Vector g(6);
  g << p.a1 - 1, p.d1 - 1, p.a1 + p.a2 + p.e - p.c1 - p.c2 - p.g - 1, p.d1 + p.d2 + p.h - p.b1 - p.b2 - p.f - 1,
      p.b1 - 1, p.b1 + p.b2 - p.d1 - p.d2 - 1;
  return g;
}

inline double feasibility_residual(const ReducedPointId& p, int n) {
  const Vector g = id_inequalities(p);
  const Vector h = id_equalities(p, n);
  return std::max((-g.array()).max(0.0).maxCoeff(), h.cwiseAbs().maxCoeff());
}

inline double objective_id(const ReducedPointId& p, int n) {
  check_n(n);
  if (id_equalities(p, n).cwiseAbs().maxCoeff() > kEqualityTolerance)
    fail(ErrorCode::InfeasiblePoint, "equality constraints violated");
  const auto m = id_terms(p, n);
  if (m.m1 < 0) fail(ErrorCode::InfeasiblePoint, "M1 is negative");
  return (n - 1.0) * std::sqrt(m.m1) + std::sqrt(2.0 * m.m2);
}

inline Nlp id_program(int n) {
  const double N = n;
  Nlp p;
  p.dim = 11;
  p.n_ineq = 9;
  p.n_eq = 2;
  p.f = [N](const Vector& x, Vector* grad) {
    const double m1 = x(0) * x(0) + x(2) * x(2) + x(4) * x(4) + x(6) * x(6) + 2 * x(10);
    const double X = x(0) + N * x(1), Y = x(2) + N * x(3);
    const double m2 = X * X + Y * Y + N * x(8) * x(8) + N * x(9) * x(9);
    if (!(m1 > 0)) return std::numeric_limits<double>::infinity();
    const double s1 = std::sqrt(m1), s2 = std::sqrt(2 * m2);
    if (grad) {
      grad->setZero(11);
      const double k1 = (N - 1) / (2 * s1);
      (*grad)(0) += k1 * 2 * x(0);
      (*grad)(2) += k1 * 2 * x(2);
      (*grad)(4) += k1 * 2 * x(4);
      (*grad)(6) += k1 * 2 * x(6);
      (*grad)(10) += k1 * 2;
      if (s2 > 0) {
        const double k2 = 1.0 / s2;
        (*grad)(0) += k2 * 2 * X;
        (*grad)(1) += k2 * 2 * N * X;
        (*grad)(2) += k2 * 2 * Y;
        (*grad)(3) += k2 * 2 * N * Y;
        (*grad)(8) += k2 * 2 * N * x(8);
        (*grad)(9) += k2 * 2 * N * x(9);
      }
    }
    return (N - 1) * s1 + s2;
  };
  p.g = [](const Vector& x) {
    const double u = x(0) * x(6) - x(2) * x(4);
    Vector g(9);
    g << x(0) - 1, x(0) + x(1) + 2 * x(8) - x(4) - x(5) - 1, x(2) - 1, x(2) + x(3) - x(6) - x(7) - 1, x(6) - 1,
        x(6) + x(7) - x(2) - x(3) - 2 * x(9) - 1, x(10) - u, x(10) + u, x(10);
    return g;
  };
  p.g_jac = [](const Vector& x) {
    Matrix J = Matrix::Zero(9, 11);
    J(0, 0) = 1;
    J.row(1) << 1, 1, 0, 0, -1, -1, 0, 0, 2, 0, 0;
    J(2, 2) = 1;
    J.row(3) << 0, 0, 1, 1, 0, 0, -1, -1, 0, 0, 0;
    J(4, 6) = 1;
    J.row(5) << 0, 0, -1, -1, 0, 0, 1, 1, 0, -2, 0;
    // du = d1 da1 + a1 dd1 - c1 db1 - b1 dc1
    J.row(6) << -x(6), 0, x(4), 0, x(2), 0, -x(0), 0, 0, 0, 1;
    J.row(7) << x(6), 0, -x(4), 0, -x(2), 0, x(0), 0, 0, 0, 1;
    J(8, 10) = 1;
    return J;
  };
  p.h = [N](const Vector& x) {
    Vector h(2);
    h << x(0) + x(4) + N * (x(1) + x(5)), x(2) + x(6) + N * (x(3) + x(7));
    return h;
  };
  p.h_jac = [N](const Vector&) {
    Matrix J = Matrix::Zero(2, 11);
    J.row(0) << 1, N, 0, 0, 1, N, 0, 0, 0, 0, 0;
    J.row(1) << 0, 0, 1, N, 0, 0, 1, N, 0, 0, 0;
    return J;
  };
  return p;
}

// --- the no-identity failure program -----------------------------------------------

/// Printed objective: (n-1) sqrt(2(a1^2+b1^2) + 2|a1^2-b1^2|) + 2 sqrt((a1+n a2)^2 + n alpha^2).
inline double objective_noid(const ReducedPointNoId& p, int n) {
  check_n(n);
  const double N = n;
  const double first = 2 * (p.a1 * p.a1 + p.b1 * p.b1) + 2 * std::abs(p.a1 * p.a1 - p.b1 * p.b1);
  const double X = p.a1 + N * p.a2;
  return (N - 1) * std::sqrt(first) + 2 * std::sqrt(X * X + N * p.alpha * p.alpha);
}

/// Printed constraints: a1 - 1 >= 0, a1+a2+2 alpha-b1-b2-1 >= 0 (beta = -alpha); a1+b1+n(a2+b2) = 0.
inline double feasibility_residual(const ReducedPointNoId& p, int n) {
  const double N = n;
  const double g1 = p.a1 - 1;
  const double g2 = p.a1 + p.a2 + p.alpha - p.b1 - p.b2 - p.beta - 1;
  const double h1 = p.a1 + p.b1 + N * (p.a2 + p.b2);
  return std::max({0.0, -g1, -g2, std::abs(h1), std::abs(p.alpha + p.beta)});
}

/// Epigraph form over (a1, a2, b1, b2, alpha, s) with s >= max(a1, |b1|), which is exact
/// for the first term once a1 >= 1. The norm term is smoothed as sqrt(X^2 + n alpha^2 + delta^2);
/// the smoothing does not move the minimizers, which sit at X = alpha = 0.
inline Nlp noid_program(int n, double delta) {
  const double N = n;
  Nlp p;
  p.dim = 6;
  p.n_ineq = 5;
  p.n_eq = 1;
  p.f = [N, delta](const Vector& x, Vector* grad) {
    const double X = x(0) + N * x(1);
    const double r = std::sqrt(X * X + N * x(4) * x(4) + delta * delta);
    if (grad) {
      grad->setZero(6);
      (*grad)(0) = 2 * X / r;
      (*grad)(1) = 2 * N * X / r;
      (*grad)(4) = 2 * N * x(4) / r;
      (*grad)(5) = 2 * (N - 1);
    }
    return 2 * (N - 1) * x(5) + 2 * r;
  };
  p.g = [](const Vector& x) {
    Vector g(5);
    g << x(0) - 1, x(0) + x(1) + 2 * x(4) - x(2) - x(3) - 1, x(5) - x(0), x(5) - x(2), x(5) + x(2);
    return g;
  };
  p.g_jac = [](const Vector&) {
    Matrix J = Matrix::Zero(5, 6);
    J.row(0) << 1, 0, 0, 0, 0, 0;
    J.row(1) << 1, 1, -1, -1, 2, 0;
    J.row(2) << -1, 0, 0, 0, 0, 1;
    J.row(3) << 0, 0, -1, 0, 0, 1;
    J.row(4) << 0, 0, 1, 0, 0, 1;
    return J;
  };
  p.h = [N](const Vector& x) {
    Vector h(1);
    h << x(0) + x(2) + N * (x(1) + x(3));
    return h;
  };
  p.h_jac = [N](const Vector&) {
    Matrix J(1, 6);
    J << 1, N, 1, N, 0, 0;
    return J;
  };
  return p;
}

// --- OOD margins --------------------------------------------------------------------------

/// Layout of the C = 1 task with N = n, whose tokens label the rows and columns of W.
inline taskgen::VocabLayout theory_layout(int n) {
  taskgen::DatasetSpec s;
  s.n_entities = n;
  s.complexity = 1;
  return taskgen::build_layout(s);
}

inline taskgen::Example ood_query(const taskgen::VocabLayout& l, int i) {
  return {{i, l.first_rel1(), l.rel2_token()}, l.first_object() + i, taskgen::ExampleKind::TwoHop};
}

inline constexpr double kMarginFeasibilityTolerance = 1e-6;

/// Gaps of query (a_i, r1, r2) with label c_i: to c_j (j != i) the gap is c1, to b_j it is
/// c1+c2+g+h - (a1 [i=j] + a2 + e + f).
inline std::vector<MarginReport> ood_margin_id(const ReducedPointId& p, int n) {
  check_n(n);
  if (feasibility_residual(p, n) > kMarginFeasibilityTolerance)
    fail(ErrorCode::InfeasiblePoint, "point violates the identity program constraints");
  const auto l = theory_layout(n);
  std::vector<MarginReport> out;
  for (int i = 0; i < n; ++i) {
    Vector logits(2 * n);
    for (int j = 0; j < n; ++j) {
      logits(j) = (i == j ? p.a1 : 0.0) + p.a2 + p.e + p.f;
      logits(n + j) = (i == j ? p.c1 : 0.0) + p.c2 + p.g + p.h;
    }
    out.push_back(margin_report(ood_query(l, i), logits, l));
  }
  return out;
}

inline std::vector<MarginReport> ood_margin_noid(const ReducedPointNoId& p, int n) {
  check_n(n);
  if (feasibility_residual(p, n) > kMarginFeasibilityTolerance)
    fail(ErrorCode::InfeasiblePoint, "point violates the failure program constraints");
  const auto l = theory_layout(n);
  std::vector<MarginReport> out;
  for (int i = 0; i < n; ++i) {
    Vector logits(2 * n);
    for (int j = 0; j < n; ++j) {
      logits(j) = (i == j ? p.a1 : 0.0) + p.a2 + p.alpha + p.beta;
      logits(n + j) = (i == j ? p.b1 : 0.0) + p.b2 + p.beta + p.alpha;
    }
    out.push_back(margin_report(ood_query(l, i), logits, l));
  }
  return out;
}

/// OOD reports read directly off an assembled matrix: row sums over the query's tokens.
inline std::vector<MarginReport> ood_margin_from_w(const Matrix& W, int n) {
  const auto l = theory_layout(n);
  if (W.rows() != 2 * n + 2 || W.cols() != 2 * n) fail(ErrorCode::ShapeMismatch, "W has the wrong shape");
  std::vector<MarginReport> out;
  for (int i = 0; i < n; ++i) {
    const auto q = ood_query(l, i);
    Vector logits = Vector::Zero(2 * n);
    for (int t : q.tokens) logits += W.row(l.in_index(t)).transpose();
    out.push_back(margin_report(q, logits, l));
  }
  return out;
}

// --- solving --------------------------------------------------------------------------------

struct SolverConfig {
  AlConfig al;
  int starts = 8;
  std::uint64_t seed = 0;
  int workers = 1;
  // Smoothing schedule for the failure program's norm term.
  std::vector<double> noid_smoothing = {1e-1, 1e-2, 1e-3, 1e-4};

  void validate() const {
    al.validate();
    if (starts < 1) fail(ErrorCode::InvalidConfig, "starts must be >= 1");
    if (workers < 1) fail(ErrorCode::InvalidConfig, "workers must be >= 1");
    if (noid_smoothing.empty()) fail(ErrorCode::InvalidConfig, "noid_smoothing must be non-empty");
    for (double d : noid_smoothing)
      if (!(d > 0)) fail(ErrorCode::InvalidConfig, "smoothing values must be positive");
  }
};

struct SolveReport {
  int n = 0;
  Program program = Program::Id;
  ReducedPointId id;
  ReducedPointNoId noid;
  Vector x;  // program variables at the solution
  double objective = 0.0;
  double feasibility_residual = 0.0;
  double kkt_residual = 0.0;
  double complementarity = 0.0;
  Vector lambda;
  Vector mu;
  double smoothing = 0.0;  // failure program only
  std::uint64_t start_seed = 0;
  int outer_rounds = 0;
  std::vector<MarginReport> margins;
};

struct KktSummary {
  double stationarity = 0.0;
  double complementarity = 0.0;
  double min_lambda = 0.0;
};

inline Nlp program_for(const SolveReport& r) {
  return r.program == Program::Id ? id_program(r.n) : noid_program(r.n, r.smoothing);
}

inline KktSummary kkt_check(const SolveReport& r) {
  const Nlp p = program_for(r);
  if (r.x.size() != p.dim || r.lambda.size() != p.n_ineq || r.mu.size() != p.n_eq)
    fail(ErrorCode::ShapeMismatch, "report does not match its program");
  const auto res = kkt_residuals(p, r.x, r.lambda, r.mu);
  return {res.stationarity, res.complementarity, r.lambda.size() ? r.lambda.minCoeff() : 0.0};
}

namespace detail {

inline Vector id_start(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 2.0);
  Vector x(11);
  for (int i = 0; i < 11; ++i) x(i) = nd(rng);
  for (int i : {0, 2, 6}) x(i) = std::abs(x(i)) + 1.0;
  x(10) = std::abs(x(10)) + 3.0;
  return x;
}

inline Vector noid_start(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 2.0);
  Vector x(6);
  for (int i = 0; i < 6; ++i) x(i) = nd(rng);
  x(0) = std::abs(x(0)) + 1.0;
  x(5) = std::max(x(0), std::abs(x(2))) + std::abs(x(5));
  return x;
}

struct StartResult {
  bool ok = false;
  AlResult al;
  double smoothing = 0.0;
  double objective = std::numeric_limits<double>::infinity();
};

inline StartResult run_start(Program prog, int n, const SolverConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  StartResult s;
  if (prog == Program::Id) {
    const Nlp prog_id = id_program(n);
    s.al = augmented_lagrangian(prog_id, id_start(rng), cfg.al);
    if (!s.al.converged) return s;
    s.objective = objective_id(ReducedPointId::from_program_vector(s.al.x, n), n);
  } else {
    Vector x = noid_start(rng);
    Vector lam, mu;
    for (double delta : cfg.noid_smoothing) {
      s.al = augmented_lagrangian(noid_program(n, delta), x, cfg.al, &lam, &mu);
      x = s.al.x;
      lam = s.al.lambda;
      mu = s.al.mu;
      s.smoothing = delta;
    }
    if (!s.al.converged) return s;
    const auto& v = s.al.x;
    ReducedPointNoId p{v(0), v(1), v(2), v(3), v(4), -v(4), n};
    s.objective = objective_noid(p, n);
  }
  s.ok = s.al.converged && std::isfinite(s.objective);
  return s;
}

}  // namespace detail

inline SolveReport solve(Program prog, int n, const SolverConfig& cfg = {}) {
  check_n(n);
  cfg.validate();
  std::vector<detail::StartResult> results(static_cast<std::size_t>(cfg.starts));
  parallel_for(cfg.starts, cfg.workers, [&](int k) {
    results[static_cast<std::size_t>(k)] = detail::run_start(prog, n, cfg, cfg.seed + static_cast<std::uint64_t>(k));
  });

  // Best objective wins; objectives within a relative 1e-9 count as tied and the lowest seed is kept.
  int best = -1;
  for (int k = 0; k < cfg.starts; ++k) {
    const auto& r = results[static_cast<std::size_t>(k)];
    if (!r.ok) continue;
    if (best < 0) {
      best = k;
      continue;
    }
    const double ref = results[static_cast<std::size_t>(best)].objective;
    if (r.objective < ref - 1e-9 * std::max(1.0, std::abs(ref))) best = k;
  }
  if (best < 0) {
    double worst_feas = std::numeric_limits<double>::infinity();
    for (const auto& r : results) worst_feas = std::min(worst_feas, r.al.feasibility);
    fail(ErrorCode::DidNotConverge, "no start converged for n = " + std::to_string(n) + " (" +
                                        std::string(to_string(prog)) + "), best feasibility " +
                                        std::to_string(worst_feas));
  }
  const auto& r = results[static_cast<std::size_t>(best)];
  SolveReport rep;
  rep.n = n;
  rep.program = prog;
  rep.x = r.al.x;
  rep.lambda = r.al.lambda;
  rep.mu = r.al.mu;
  rep.objective = r.objective;
  rep.smoothing = r.smoothing;
  rep.start_seed = cfg.seed + static_cast<std::uint64_t>(best);
  rep.outer_rounds = r.al.outer_rounds;
  if (prog == Program::Id) {
    rep.id = ReducedPointId::from_program_vector(r.al.x, n);
    rep.feasibility_residual = feasibility_residual(rep.id, n);
    rep.margins = ood_margin_id(rep.id, n);
  } else {
    const auto& v = r.al.x;
    rep.noid = {v(0), v(1), v(2), v(3), v(4), -v(4), n};
    rep.feasibility_residual = std::max(feasibility_residual(rep.noid, n), r.al.feasibility);
    rep.margins = ood_margin_noid(rep.noid, n);
  }
  const auto kkt = kkt_check(rep);
  rep.kkt_residual = kkt.stationarity;
  rep.complementarity = kkt.complementarity;
  return rep;
}

inline SolveReport solve_id(int n, const SolverConfig& cfg = {}) { return solve(Program::Id, n, cfg); }
inline SolveReport solve_noid(int n, const SolverConfig& cfg = {}) { return solve(Program::NoId, n, cfg); }

// --- full-matrix oracle ----------------------------------------------------------------------

struct OracleConfig {
  long max_iters = 200000;
  long check_every = 100;
  double violation_tol = 1e-6;
  double objective_tol = 1e-8;
};

struct OracleResult {
  Matrix W;
  double objective = 0.0;  // 0.5 * ||W||_*^2
  double nuclear_norm = 0.0;
  double violation = 0.0;
  long iterations = 0;
};

/// Margin constraint matrix: one row per (training example, competitor) with K vec(W) = gap.
/// vec is row-major over the (2n+2) x 2n matrix.
inline Matrix margin_constraints(const taskgen::Dataset& ds) {
  const auto& l = ds.layout;
  const auto rows = static_cast<Eigen::Index>(l.in_vocab.size());
  const auto cols = static_cast<Eigen::Index>(l.out_vocab.size());
  std::vector<Eigen::RowVectorXd> out;
  for (const auto& ex : ds.train) {
    const int y = l.out_index(ex.target);
    for (Eigen::Index yp = 0; yp < cols; ++yp) {
      if (yp == y) continue;
      Eigen::RowVectorXd k = Eigen::RowVectorXd::Zero(rows * cols);
      for (int t : ex.tokens) {
        const int s = l.in_index(t);
        k(s * cols + y) += 1.0;
        k(s * cols + yp) -= 1.0;
      }
      out.push_back(std::move(k));
    }
  }
  Matrix K(static_cast<Eigen::Index>(out.size()), rows * cols);
  for (std::size_t i = 0; i < out.size(); ++i) K.row(static_cast<Eigen::Index>(i)) = out[i];
  return K;
}

namespace detail {

inline Matrix singular_value_threshold(const Matrix& W, double tau) {
  Eigen::JacobiSVD<Matrix> svd(W, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector s = (svd.singularValues().array() - tau).max(0.0).matrix();
  return svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Matrix unvec(const Vector& w, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const RowMajor>(w.data(), rows, cols);
}

inline Vector vec(const Matrix& W) {
  RowMajor R = W;
  return Eigen::Map<const Vector>(R.data(), R.size());
}

}  // namespace detail

/// Minimizes ||W||_* subject to every training margin >= 1 by primal-dual proximal
/// iterations (singular-value soft-thresholding on W, projection on the dual). The
/// reported objective is 0.5 ||W||_*^2, which has the same minimizers.
inline OracleResult full_matrix_oracle(int n, bool with_identity, const OracleConfig& cfg = {}) {
  check_n(n);
  if (n > 8) fail(ErrorCode::InvalidDimension, "full-matrix oracle is limited to n <= 8");
  taskgen::DatasetSpec spec;
  spec.n_entities = n;
  spec.complexity = 1;
  spec.include_identity = with_identity;
  const auto ds = taskgen::generate(spec);
  const Matrix K = margin_constraints(ds);
  const Eigen::Index rows = 2 * n + 2, cols = 2 * n;
  Eigen::JacobiSVD<Matrix> ksvd(K);
  const double step = 0.99 / ksvd.singularValues()(0);

  Vector w = Vector::Zero(rows * cols), w_bar = w, y = Vector::Zero(K.rows());
  double last_obj = std::numeric_limits<double>::infinity();
  OracleResult res;
  for (long it = 1; it <= cfg.max_iters; ++it) {
    // Dual ascent on the indicator of {Kw >= 1}: y stays nonpositive.
    y = (y + step * (K * w_bar - Vector::Ones(K.rows()))).cwiseMin(0.0);
    const Vector w_new = detail::vec(detail::singular_value_threshold(detail::unvec(w - step * K.transpose() * y, rows, cols), step));
    w_bar = 2.0 * w_new - w;
    w = w_new;
    if (it % cfg.check_every == 0) {
      const double viol = std::max(0.0, (Vector::Ones(K.rows()) - K * w).maxCoeff());
      const double obj = svd_nuclear_norm(detail::unvec(w, rows, cols));
      const bool done = viol <= cfg.violation_tol && std::abs(obj - last_obj) <= cfg.objective_tol;
      last_obj = obj;
      res.iterations = it;
      res.violation = viol;
      if (done) {
        res.W = detail::unvec(w, rows, cols);
        res.nuclear_norm = obj;
        res.objective = 0.5 * obj * obj;
        return res;
      }
    }
  }
  fail(ErrorCode::DidNotConverge, "full-matrix oracle exhausted its iteration budget");
}

// --- random points ---------------------------------------------------------------------------

/// A random point satisfying every constraint of the reformulated identity program.
/// With probability one half the slack is tight (t = |u|).
inline ReducedPointId sample_feasible_id(int n, Rng& rng) {
  check_n(n);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto pos = [&] { return std::abs(nd(rng)); };
  const double N = n;
  ReducedPointId p;
  p.n = n;
  p.a1 = 1 + pos();
  p.b1 = 1 + pos();
  p.d1 = 1 + pos();
  p.c1 = nd(rng);
  p.a2 = nd(rng);
  // h2 fixes d2 from b2; g4 then bounds b2 from below.
  const double b2_min = (1 + p.d1 - p.b1 - (p.b1 + p.d1) / N) / 2;
  p.b2 = std::max(nd(rng), b2_min) + pos();
  p.d2 = -(p.b1 + p.d1) / N - p.b2;
  p.f = (p.d1 + p.d2 - p.b1 - p.b2 - 1) / 2 - pos();
  p.c2 = -(p.a1 + p.c1) / N - p.a2;
  p.e = (1 + p.c1 + p.c2 - p.a1 - p.a2) / 2 + pos();
  p.g = -p.e;
  p.h = -p.f;
  p.t = std::abs(p.u()) + (std::bernoulli_distribution(0.5)(rng) ? 0.0 : pos());
  return p;
}

// --- JSON -------------------------------------------------------------------------------------

inline Json to_json(const ReducedPointId& p) {
  Json j;
  j["a1"] = p.a1, j["a2"] = p.a2, j["b1"] = p.b1, j["b2"] = p.b2, j["c1"] = p.c1, j["c2"] = p.c2;
  j["d1"] = p.d1, j["d2"] = p.d2, j["e"] = p.e, j["f"] = p.f, j["g"] = p.g, j["h"] = p.h, j["t"] = p.t;
  return j;
}

inline Json to_json(const ReducedPointNoId& p) {
  Json j;
  j["a1"] = p.a1, j["a2"] = p.a2, j["b1"] = p.b1, j["b2"] = p.b2, j["alpha"] = p.alpha, j["beta"] = p.beta;
  return j;
}

inline Json to_json(const SolveReport& r) {
  Json j;
  j["n"] = r.n;
  j["program"] = std::string(to_string(r.program));
  j["point"] = r.program == Program::Id ? to_json(r.id) : to_json(r.noid);
  j["objective"] = r.objective;
  j["feasibility_residual"] = r.feasibility_residual;
  j["kkt_residual"] = r.kkt_residual;
  Json lam = Json::array();
  for (Eigen::Index i = 0; i < r.lambda.size(); ++i) lam.push_back(r.lambda(i));
  Json mu = Json::array();
  for (Eigen::Index i = 0; i < r.mu.size(); ++i) mu.push_back(r.mu(i));
  j["multipliers"] = {{"lambda", lam}, {"mu", mu}};
  Json m = Json::array();
  for (const auto& rep : r.margins) m.push_back(rep.q);
  j["margins"] = m;
  j["complementarity"] = r.complementarity;
  j["smoothing"] = r.smoothing;
  j["start_seed"] = r.start_seed;
  j["outer_rounds"] = r.outer_rounds;
  return j;
}

}  // namespace twohop::theory
