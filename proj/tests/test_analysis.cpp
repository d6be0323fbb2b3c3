#include "twohop/analysis.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace twohop;
using namespace twohop::analysis;

namespace {

taskgen::Dataset dataset(int n, int c, bool identity = true) {
  taskgen::DatasetSpec s;
  s.n_entities = n;
  s.complexity = c;
  s.include_identity = identity;
  return taskgen::generate(s);
}

theory::ReducedPointId random_point(int n, Rng& rng) {
  std::normal_distribution<double> nd;
  theory::ReducedPointId p;
  for (double* v : {&p.a1, &p.a2, &p.b1, &p.b2, &p.c1, &p.c2, &p.d1, &p.d2, &p.e, &p.f, &p.g, &p.h}) *v = nd(rng);
  p.n = n;
  return p;
}

}  // namespace

TEST(Margins, SinglePeakGivesItsHeight) {
  const auto l = theory::theory_layout(3);
  const auto q = theory::ood_query(l, 1);
  Vector logits = Vector::Zero(6);
  logits(l.out_index(q.target)) = 2.0;
  const auto r = margin_report(q, logits, l);
  EXPECT_DOUBLE_EQ(r.q, 2.0);
  EXPECT_TRUE(r.correct);
  EXPECT_EQ(r.gaps.size(), 5u);
}

TEST(Margins, UniformLogitsTieToLowestToken) {
  const auto l = theory::theory_layout(3);
  const auto r = margin_report(theory::ood_query(l, 2), Vector::Zero(6), l);
  EXPECT_EQ(r.q, 0.0);
  EXPECT_FALSE(r.correct);
  EXPECT_EQ(r.predicted, l.out_vocab.front());
}

TEST(Margins, WrongLengthRejected) {
  const auto l = theory::theory_layout(3);
  EXPECT_THROW(margin_report(theory::ood_query(l, 0), Vector::Zero(5), l), Error);
}

TEST(Margins, PositiveScalingKeepsPredictionAndSign) {
  const auto ds = dataset(6, 2);
  Rng rng(1);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> scale(1e-3, 1e3);
  for (int k = 0; k < 50; ++k) {
    Vector logits(static_cast<Eigen::Index>(ds.layout.out_vocab.size()));
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = nd(rng);
    const auto& q = ds.test_ood[static_cast<std::size_t>(k) % ds.test_ood.size()];
    const double lam = scale(rng);
    const auto a = margin_report(q, logits, ds.layout), b = margin_report(q, lam * logits, ds.layout);
    EXPECT_EQ(a.predicted, b.predicted);
    EXPECT_EQ(a.q > 0, b.q > 0);
  }
}

TEST(Margins, ForwardAgreesWithLogitMatrixRowSums) {
  const auto ds = dataset(7, 3);
  embmlp::Params p = embmlp::init_params(ds.layout, 9, InitPolicy::standard(), 3);
  p.E *= 30;
  p.W_proj *= 30;
  const Matrix W = embmlp::logit_matrix(p);
  const auto via_forward = embmlp::ood_reports(p, ds);
  for (std::size_t i = 0; i < ds.test_ood.size(); ++i) {
    Vector sum = Vector::Zero(W.cols());
    for (int t : ds.test_ood[i].tokens) sum += W.row(ds.layout.in_index(t)).transpose();
    const auto r = margin_report(ds.test_ood[i], sum, ds.layout);
    EXPECT_LE(std::abs(r.q - via_forward[i].q), 1e-10 * std::max(1.0, std::abs(r.q)));
    EXPECT_EQ(r.predicted, via_forward[i].predicted);
  }
}

TEST(OodAccuracy, UntrainedModelsNearChance) {
  const auto ds = dataset(20, 1);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = embmlp::init_params(ds.layout, embmlp::default_width(ds.layout), InitPolicy::standard(), seed);
    EXPECT_LE(ood_accuracy(p, ds), 0.15) << seed;
  }
}

TEST(BlockFit, RecoversAssembledPoints) {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const int n = 2 + k % 7;
    const auto p = random_point(n, rng);
    const auto fit = fit_blocks(theory::assemble_w(p, n), n, true);
    EXPECT_LE(fit.residual, 1e-12);
    EXPECT_NEAR(fit.id.a1, p.a1, 1e-12);
    EXPECT_NEAR(fit.id.d2, p.d2, 1e-12);
    EXPECT_NEAR(fit.id.h, p.h, 1e-12);
  }
  theory::ReducedPointNoId q{1.5, -0.2, 0.3, 0.1, 0.7, -0.4, 5};
  const auto fit = fit_blocks(theory::assemble_w(q, 5), 5, false);
  EXPECT_LE(fit.residual, 1e-12);
  EXPECT_NEAR(fit.noid.b1, 0.3, 1e-12);
  EXPECT_NEAR(fit.noid.beta, -0.4, 1e-12);
}

TEST(BlockFit, AcceptsTransposeAndRejectsOtherShapes) {
  Rng rng(3);
  const auto p = random_point(4, rng);
  const Matrix W = theory::assemble_w(p, 4);
  const auto fit = fit_blocks(W.transpose(), 4, true);
  EXPECT_TRUE(fit.transposed);
  EXPECT_NEAR(fit.id.c1, p.c1, 1e-12);
  try {
    fit_blocks(Matrix::Zero(9, 8), 4, true);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
  }
}

TEST(BlockFit, GaussianNoiseIsFarFromTemplate) {
  Rng rng(4);
  for (int k = 0; k < 5; ++k) {
    Matrix W(18, 16);
    fill_normal(W, 1.0, rng);
    EXPECT_GE(fit_blocks(W, 8, true).residual, 0.7);
  }
}

TEST(BlockFit, ZeroMatrixHasZeroResidual) { EXPECT_EQ(fit_blocks(Matrix::Zero(10, 8), 4, true).residual, 0.0); }

TEST(BlockFit, TrainedIdentityModelHasNegativeSecondRelationRow) {
  const auto ds = dataset(20, 1);
  const auto r = embmlp::train(ds, embmlp::TrainConfig{});
  const auto fit = fit_blocks(embmlp::logit_matrix(r.params), 20, true);
  EXPECT_LE(fit.id.f, -0.5);
  EXPECT_GT(fit.id.a1, 0.0);
  EXPECT_GT(fit.id.c1, 0.0);
}

TEST(Patterns, IdentityOptimumPassesEveryFlag) {
  const auto rep = theory::solve_id(6);
  const auto f = template_pattern_check(theory::assemble_w(rep.id, 6), theory::theory_layout(6));
  EXPECT_TRUE(f.all());
  EXPECT_TRUE(f.subject_object_bias);
}

TEST(Patterns, FailureOptimumLosesSelfPeakAndSubjectBias) {
  const auto rep = theory::solve_noid(6);
  const auto f = template_pattern_check(theory::assemble_w(rep.noid, 6), theory::theory_layout(6));
  EXPECT_FALSE(f.bridge_self_peak);
  EXPECT_EQ(f.self_peak_count, 0);
  EXPECT_FALSE(f.subject_object_bias);
  // The bridge-to-object block of the failure optimum is a1 I + a2 E with a1 = 1, so
  // every bridge row still peaks on its own object.
  EXPECT_TRUE(f.bridge_object_alignment);
}

TEST(Patterns, ZeroMatrixFailsEveryFlag) {
  const auto l = dataset(5, 2).layout;
  const auto f = template_pattern_check(Matrix::Zero(static_cast<Eigen::Index>(l.in_vocab.size()),
                                                     static_cast<Eigen::Index>(l.out_vocab.size())),
                                        l);
  EXPECT_FALSE(f.relation_set_selection);
  EXPECT_FALSE(f.bridge_self_peak);
  EXPECT_FALSE(f.bridge_object_alignment);
  EXPECT_FALSE(f.subject_object_bias);
}

TEST(Patterns, ShapeChecked) {
  const auto l = dataset(5, 1).layout;
  EXPECT_THROW(template_pattern_check(Matrix::Zero(3, 3), l), Error);
}

TEST(Alignment, IdenticalInputsGiveUnitCosine) {
  const auto ds = dataset(5, 2);
  const auto cfg = nanoformer::default_config(ds.layout);
  const auto p = nanoformer::init_params(cfg, 1);
  const std::vector<int> x = {1, ds.layout.first_rel1()};
  for (double c : layer_cosines(p, cfg, x, x)) EXPECT_NEAR(c, 1.0, 1e-12);
  EXPECT_EQ(cosine(RowVector::Zero(3), RowVector::Ones(3)), 0.0);
}

TEST(Alignment, UntrainedModelsAreNotAligned) {
  const auto ds = dataset(10, 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cfg = nanoformer::default_config(ds.layout);
    const auto p = nanoformer::init_params(cfg, seed);
    const auto s = alignment(p, cfg, ds);
    EXPECT_EQ(s.pairs.size(), 20u);
    EXPECT_EQ(s.per_layer.size(), 3u);
    EXPECT_LT(std::abs(s.aggregate), 0.5) << seed;
  }
}

TEST(Alignment, SamplingPicksEvenlySpacedPairs) {
  const auto ds = dataset(4, 3);
  const auto cfg = nanoformer::default_config(ds.layout);
  const auto p = nanoformer::init_params(cfg, 2);
  const auto s = alignment(p, cfg, ds, 4);
  ASSERT_EQ(s.pairs.size(), 4u);
  EXPECT_EQ(s.pairs[1].bridge, ds.layout.first_bridge() + 3);
  EXPECT_EQ(s.pairs[1].subject, 3);
  EXPECT_EQ(s.pairs[2].relation, ds.layout.first_rel1() + 1);
  EXPECT_THROW(alignment(p, cfg, ds, 13), Error);
}

TEST(Emitters, CsvShapes) {
  const auto ds = dataset(3, 1);
  const Matrix W = Matrix::Ones(8, 6);
  std::ostringstream logits;
  write_logits_csv(logits, W, ds.layout);
  std::istringstream in(logits.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "token,b1,b2,b3,c1,c2,c3");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 8);

  std::ostringstream m;
  const auto reports = margins([](const std::vector<int>&) { return Vector(Vector::Zero(6)); }, ds.test_ood, ds.layout);
  write_margins_csv(m, reports, ds.layout);
  EXPECT_EQ(m.str().substr(0, m.str().find('\n')), "query,target,predicted,q,correct");
}
