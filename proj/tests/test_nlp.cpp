#include "twohop/nlp.hpp"

#include <gtest/gtest.h>

using namespace twohop;

namespace {

// min (x0-2)^2 + (x1-1)^2  s.t.  x0 + x1 <= 2,  x0 >= 0,  x1 = 1/4.
// Optimum (7/4, 1/4) with lambda = (1/2, 0) and mu = -1.
Nlp small_qp() {
  Nlp p;
  p.dim = 2;
  p.n_ineq = 2;
  p.n_eq = 1;
  p.f = [](const Vector& x, Vector* g) {
    if (g) *g = Vector{{2 * (x(0) - 2), 2 * (x(1) - 1)}};
    return (x(0) - 2) * (x(0) - 2) + (x(1) - 1) * (x(1) - 1);
  };
  p.g = [](const Vector& x) { return Vector{{2 - x(0) - x(1), x(0)}}; };
  p.g_jac = [](const Vector&) { return Matrix{{-1, -1}, {1, 0}}; };
  p.h = [](const Vector& x) { return Vector{{x(1) - 0.25}}; };
  p.h_jac = [](const Vector&) { return Matrix{{0, 1}}; };
  return p;
}

}  // namespace

TEST(Nlp, BfgsFindsRosenbrockMinimum) {
  auto fg = [](const Vector& x, Vector& g) {
    const double a = 1 - x(0), b = x(1) - x(0) * x(0);
    g = Vector{{-2 * a - 400 * x(0) * b, 200 * b}};
    return a * a + 100 * b * b;
  };
  const Vector x = bfgs_minimize(fg, Vector{{-1.2, 1.0}}, 2000, 1e-12);
  EXPECT_NEAR(x(0), 1.0, 1e-6);
  EXPECT_NEAR(x(1), 1.0, 1e-6);
}

TEST(Nlp, AugmentedLagrangianRecoversPointAndMultipliers) {
  const Nlp p = small_qp();
  const auto r = augmented_lagrangian(p, Vector{{0.0, 0.0}}, AlConfig{});
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.x(0), 1.75, 1e-8);
  EXPECT_NEAR(r.x(1), 0.25, 1e-8);
  EXPECT_NEAR(r.lambda(0), 0.5, 1e-6);
  EXPECT_NEAR(r.lambda(1), 0.0, 1e-8);
  EXPECT_NEAR(r.mu(0), -1.0, 1e-6);
  const auto k = kkt_residuals(p, r.x, r.lambda, r.mu);
  EXPECT_LE(k.stationarity, 1e-6);
  EXPECT_LE(k.complementarity, 1e-6);
  EXPECT_LE(k.feasibility, 1e-9);
}

TEST(Nlp, KktResidualsOfKnownOptimumAreZero) {
  const auto k = kkt_residuals(small_qp(), Vector{{1.75, 0.25}}, Vector{{0.5, 0.0}}, Vector{{-1.0}});
  EXPECT_NEAR(k.stationarity, 0.0, 1e-15);
  EXPECT_NEAR(k.complementarity, 0.0, 1e-15);
  EXPECT_NEAR(k.feasibility, 0.0, 1e-15);
}

TEST(Nlp, PolishSnapsNearOptimumOntoActiveSet) {
  const Nlp p = small_qp();
  Vector x{{1.75 - 1e-9, 0.25}}, lambda{{0.49, 0.0}}, mu{{-0.98}};
  ASSERT_TRUE(polish_kkt(p, x, lambda, mu));
  EXPECT_LE(kkt_residuals(p, x, lambda, mu).stationarity, 1e-12);
}

TEST(Nlp, InvalidScheduleRejected) {
  AlConfig c;
  c.rho_growth = 1.0;
  EXPECT_THROW(c.validate(), Error);
}
