#include "oracles.hpp"
#include "twohop/nanoformer.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace twohop;
using namespace twohop::nanoformer;

namespace {

taskgen::Dataset dataset(int n, int c) {
  taskgen::DatasetSpec s;
  s.n_entities = n;
  s.complexity = c;
  return taskgen::generate(s);
}

TransformerConfig tiny(int vocab, int layers = 1, int heads = 1, int d_m = 8, int d_k = 8) {
  TransformerConfig c;
  c.d_vocab = vocab;
  c.d_m = d_m;
  c.d_k = d_k;
  c.n_heads = heads;
  c.n_layers = layers;
  return c;
}

// Random values in every tensor, LN scales and biases included, so no gradient is trivially zero.
Params perturbed(const TransformerConfig& cfg, std::uint64_t seed, double sigma = 0.4) {
  Params p = shaped(cfg);
  Rng rng(seed);
  for (auto& t : tensors(p)) {
    Matrix noise(t.m->rows(), t.m->cols());
    fill_normal(noise, sigma, rng);
    *t.m += noise;
  }
  return p;
}

}  // namespace

TEST(TfConfig, DepthAndContextValidated) {
  auto c = tiny(10);
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), Error);
  c = tiny(10);
  c.context = 2;
  EXPECT_THROW(c.validate(), Error);
}

TEST(TfForward, MatchesStraightLineOracle) {
  const auto ds = dataset(4, 2);
  for (bool tied : {true, false}) {
    auto cfg = tiny(ds.layout.vocab_size(), 2, 2, 8, 4);
    cfg.tie_embeddings = tied;
    const Params p = perturbed(cfg, tied ? 1 : 2);
    for (const auto& ex : ds.train) {
      const Vector got = tf_forward(p, cfg, ex.tokens).logits;
      EXPECT_LE(oracle::relative_error(got, oracle::transformer_logits(p, cfg, ex.tokens)), 1e-12);
    }
  }
}

TEST(TfForward, EmbeddingOnlyModelReducesToNormalizedEmbeddingTimesHead) {
  const auto ds = dataset(3, 1);
  auto cfg = tiny(ds.layout.vocab_size());
  Params p = shaped(cfg);
  Rng rng(3);
  fill_normal(p.tok, 1.0, rng);
  // With zero block weights the residual stream is the token embedding alone.
  const int t = ds.layout.first_rel1();
  const RowVector x = p.tok.row(t);
  const RowVector xhat = (x.array() - x.mean()) / std::sqrt((x.array() - x.mean()).square().mean() + cfg.ln_eps);
  EXPECT_LE(oracle::relative_error(tf_forward(p, cfg, {t}).logits, p.tok * xhat.transpose()), 1e-12);
}

TEST(TfForward, CausalMaskOnLongerProbe) {
  auto cfg = tiny(12, 2, 2, 8, 4);
  cfg.context = 6;
  const Params p = perturbed(cfg, 4);
  const std::vector<int> a = {1, 2, 3, 4, 5, 6}, b = {1, 2, 3, 9, 10, 11};
  const auto ha = tf_forward(p, cfg, a).hidden, hb = tf_forward(p, cfg, b).hidden;
  for (std::size_t l = 0; l < ha.layers.size(); ++l) {
    EXPECT_TRUE(ha.layers[l].topRows(3).isApprox(hb.layers[l].topRows(3), 1e-14)) << l;
    EXPECT_FALSE(ha.layers[l].row(5).isApprox(hb.layers[l].row(5)));
  }
}

TEST(TfForward, PositionsMatterForFixedMultiset) {
  const auto ds = dataset(4, 1);
  const auto cfg = tiny(ds.layout.vocab_size(), 1, 1);
  const Params p = perturbed(cfg, 5);
  const int a = 0, r = ds.layout.first_rel1();
  EXPECT_FALSE(tf_forward(p, cfg, {a, r}).logits.isApprox(tf_forward(p, cfg, {r, a}).logits, 1e-6));
}

TEST(TfForward, RejectsBadSequences) {
  const auto cfg = tiny(6);
  const Params p = perturbed(cfg, 6);
  EXPECT_THROW(tf_forward(p, cfg, {1, 2, 3, 4}), Error);
  EXPECT_THROW(tf_forward(p, cfg, {6}), Error);
  EXPECT_THROW(tf_forward(p, cfg, {}), Error);
}

TEST(TfLayerNorm, NormalizedRowsHaveZeroMeanUnitVariance) {
  Rng rng(7);
  for (double scale : {1.0, 10.0, 1e3}) {
    Matrix x(5, 64);
    fill_normal(x, scale, rng);
    LnCache c;
    ln_forward(x, Matrix::Ones(1, 64), Matrix::Zero(1, 64), 1e-8, c);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      EXPECT_NEAR(c.xhat.row(r).mean(), 0.0, 1e-6);
      EXPECT_NEAR(c.xhat.row(r).array().square().mean(), 1.0, 1e-6) << scale;
    }
  }
}

TEST(TfHidden, ShapeAndDeterminism) {
  const auto ds = dataset(4, 1);
  const auto cfg = default_config(ds.layout);
  const Params p = init_params(cfg, 9);
  const std::vector<int> x = {0, ds.layout.first_rel1()};
  const Matrix h = extract_hidden(p, cfg, x);
  EXPECT_EQ(h.rows(), cfg.n_layers + 1);
  EXPECT_EQ(h.cols(), cfg.d_m);
  EXPECT_EQ(h, extract_hidden(p, cfg, x));
}

TEST(TfGrad, TinyModelAllTensorsMatchFiniteDifferences) {
  const auto ds = dataset(3, 2);
  for (bool tied : {true, false}) {
    auto cfg = tiny(ds.layout.vocab_size());
    cfg.tie_embeddings = tied;
    Params p = perturbed(cfg, tied ? 10 : 11);
    const double wd = 0.02;
    const auto g = tf_loss_and_grads(p, cfg, ds.train, wd);
    Batch batch = make_batch(cfg, ds.train);
    auto f = [&] { return tf_loss_and_grads(p, cfg, batch, wd).loss; };
    auto ps = tensors(p);
    auto gs = tensors(g.grads);
    double num2 = 0, diff2 = 0, ana2 = 0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Matrix num = oracle::finite_difference(*ps[i].m, f);
      num2 += num.squaredNorm();
      ana2 += gs[i].m->squaredNorm();
      diff2 += (num - *gs[i].m).squaredNorm();
      // per-tensor check wherever the gradient is not essentially zero
      if (num.norm() > 1e-6) {
        EXPECT_LE(oracle::relative_error(*gs[i].m, num), 1e-4) << ps[i].name;
      }
    }
    EXPECT_LE(std::sqrt(diff2) / std::max(std::sqrt(num2), std::sqrt(ana2)), 1e-4);
  }
}

TEST(TfGrad, TwoLayerTwoHeadModelMatchesFiniteDifferences) {
  const auto ds = dataset(3, 1);
  const auto cfg = tiny(ds.layout.vocab_size(), 2, 2, 6, 3);
  Params p = perturbed(cfg, 12);
  const auto g = tf_loss_and_grads(p, cfg, ds.train, 0.0);
  Batch batch = make_batch(cfg, ds.train);
  auto f = [&] { return tf_loss_and_grads(p, cfg, batch, 0.0).loss; };
  auto ps = tensors(p);
  auto gs = tensors(g.grads);
  double diff2 = 0, num2 = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Matrix num = oracle::finite_difference(*ps[i].m, f);
    diff2 += (num - *gs[i].m).squaredNorm();
    num2 += num.squaredNorm();
  }
  EXPECT_LE(std::sqrt(diff2 / num2), 1e-4);
}

TEST(TfGrad, RepeatedExampleBatchEqualsSingleExample) {
  const auto ds = dataset(3, 1);
  const auto cfg = tiny(ds.layout.vocab_size());
  const Params p = perturbed(cfg, 13);
  const auto one = tf_loss_and_grads(p, cfg, {ds.train[1]}, 0.0);
  const auto four = tf_loss_and_grads(p, cfg, std::vector<taskgen::Example>(4, ds.train[1]), 0.0);
  EXPECT_NEAR(one.loss, four.loss, 1e-13);
  auto a = tensors(one.grads), b = tensors(four.grads);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].m->isApprox(*b[i].m, 1e-12) || a[i].m->isZero(1e-15));
}

TEST(TfGrad, WeightDecaySkipsNormsAndBiases) {
  const auto ds = dataset(3, 1);
  const auto cfg = tiny(ds.layout.vocab_size());
  const Params p = perturbed(cfg, 14);
  const auto g0 = tf_loss_and_grads(p, cfg, ds.train, 0.0);
  const auto g1 = tf_loss_and_grads(p, cfg, ds.train, 0.25);
  auto ps = tensors(p), a = tensors(g0.grads), b = tensors(g1.grads);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Matrix delta = *b[i].m - *a[i].m;
    if (ps[i].decay)
      EXPECT_TRUE(delta.isApprox(0.25 * *ps[i].m, 1e-12)) << ps[i].name;
    else
      EXPECT_TRUE(delta.isZero(0.0)) << ps[i].name;
  }
}

TEST(TfInit, SmallInitUsesFanIn) {
  const auto ds = dataset(5, 1);
  auto cfg = default_config(ds.layout, InitPolicy::small(1.0));
  const Params p = init_params(cfg, 15);
  auto ts = tensors(p);
  for (const auto& t : ts) {
    if (!t.decay || t.m->size() < 2000) continue;
    const double sd = std::sqrt(t.m->array().square().mean());
    EXPECT_NEAR(sd, 1.0 / static_cast<double>(t.fan_in), 0.1 / static_cast<double>(t.fan_in)) << t.name;
  }
}

TEST(TfTrain, ZeroStepsKeepsInitAndIsDeterministic) {
  const auto ds = dataset(4, 1);
  const auto cfg = default_config(ds.layout);
  TrainConfig tc;
  tc.max_steps = 0;
  tc.seed = 2;
  const auto r = tf_train(ds, cfg, tc);
  ASSERT_EQ(r.trace.size(), 1u);
  const Params init = init_params(cfg, 2);
  auto a = tensors(r.params), b = tensors(init);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].m, *b[i].m);

  tc.max_steps = 20;
  tc.log_every = 5;
  const auto x = tf_train(ds, cfg, tc), y = tf_train(ds, cfg, tc);
  ASSERT_EQ(x.trace.size(), y.trace.size());
  for (std::size_t i = 0; i < x.trace.size(); ++i) EXPECT_EQ(x.trace[i].loss, y.trace[i].loss);
}

TEST(TfTrain, FitsTrainingSetAtToyScale) {
  const auto ds = dataset(6, 1);
  const auto cfg = default_config(ds.layout);
  TrainConfig tc;
  tc.max_steps = 1500;
  const auto r = tf_train(ds, cfg, tc);
  EXPECT_EQ(r.trace.back().train_acc, 1.0);
}

TEST(TfCheckpoint, RoundTrip) {
  const auto ds = dataset(3, 2);
  for (bool tied : {true, false}) {
    auto cfg = tiny(ds.layout.vocab_size(), 2, 2, 8, 4);
    cfg.tie_embeddings = tied;
    const Params p = perturbed(cfg, 16);
    std::stringstream ss;
    save(ss, p, cfg);
    const auto ck = load(ss);
    EXPECT_EQ(ck.cfg.d_m, cfg.d_m);
    EXPECT_EQ(ck.cfg.n_layers, cfg.n_layers);
    EXPECT_EQ(ck.cfg.tie_embeddings, tied);
    auto a = tensors(p), b = tensors(ck.params);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].m, *b[i].m);
  }
  std::stringstream bad("xxxxxxxx");
  EXPECT_THROW(load(bad), Error);
}
