#pragma once

// Embedding-MLP: logits = (sum of input-token embeddings) * W_proj, trained by
// full-batch gradient descent on softmax cross-entropy.

#include "twohop/common.hpp"
#include "twohop/margins.hpp"
#include "twohop/taskgen.hpp"
#include "twohop/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace twohop::embmlp {

using taskgen::Dataset;
using taskgen::Example;
using taskgen::VocabLayout;

struct Params {
  Matrix E;       // |V_in| x d_m
  Matrix W_proj;  // d_m x |V_out|

  Eigen::Index d_m() const { return E.cols(); }
  bool operator==(const Params& o) const { return E == o.E && W_proj == o.W_proj; }
};

struct TrainConfig {
  InitPolicy init;
  double learning_rate = 0.5;
  double weight_decay = 0.0;
  long max_steps = 20000;
  double stop_loss = 1e-3;
  std::uint64_t seed = 0;
  int d_m = 0;  // 0 selects min(|V_in|, |V_out|)
  Optimizer optimizer = Optimizer::GradientDescent;
  AdamHyper adam;
  long log_every = 100;
  // After the stop rule fires at step s, training continues to (1 + factor) * s.
  double continue_factor = 10.0;

  void validate() const {
    init.validate();
    if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidConfig, "learning_rate must be positive");
    if (weight_decay < 0.0) fail(ErrorCode::InvalidConfig, "weight_decay must be nonnegative");
    if (max_steps < 0) fail(ErrorCode::InvalidConfig, "max_steps must be nonnegative");
    if (!(stop_loss > 0.0)) fail(ErrorCode::InvalidConfig, "stop_loss must be positive");
    if (d_m != 0 && d_m < 2) fail(ErrorCode::InvalidConfig, "d_m must be >= 2");
    if (log_every < 1) fail(ErrorCode::InvalidConfig, "log_every must be >= 1");
    if (continue_factor < 0.0) fail(ErrorCode::InvalidConfig, "continue_factor must be nonnegative");
  }
};

inline int default_width(const VocabLayout& l) {
  return static_cast<int>(std::min(l.in_vocab.size(), l.out_vocab.size()));
}

inline Params init_params(const VocabLayout& layout, int d_m, const InitPolicy& init, std::uint64_t seed) {
  init.validate();
  if (d_m < 2) fail(ErrorCode::InvalidConfig, "d_m must be >= 2");
  const auto n_in = static_cast<Eigen::Index>(layout.in_vocab.size());
  const auto n_out = static_cast<Eigen::Index>(layout.out_vocab.size());
  Rng rng(seed);
  Params p;
  p.E.resize(n_in, d_m);
  p.W_proj.resize(d_m, n_out);
  fill_normal(p.E, init.sigma(n_in), rng);
  fill_normal(p.W_proj, init.sigma(d_m), rng);
  return p;
}

/// Row-wise logit templates W = E * W_proj.
inline Matrix logit_matrix(const Params& p) { return p.E * p.W_proj; }

inline Vector forward(const Params& p, const VocabLayout& layout, const std::vector<int>& tokens) {
  RowVector h = RowVector::Zero(p.d_m());
  for (int t : tokens) h += p.E.row(layout.in_index(t));
  return (h * p.W_proj).transpose();
}

/// Bag-of-tokens count matrix and label indices for a fixed example list.
struct Batch {
  Matrix X;  // rows: examples, cols: input-vocab counts
  std::vector<int> labels;
};

inline Batch make_batch(const std::vector<Example>& examples, const VocabLayout& layout) {
  Batch b;
  b.X = Matrix::Zero(static_cast<Eigen::Index>(examples.size()), static_cast<Eigen::Index>(layout.in_vocab.size()));
  b.labels.reserve(examples.size());
  for (std::size_t r = 0; r < examples.size(); ++r) {
    for (int t : examples[r].tokens) b.X(static_cast<Eigen::Index>(r), layout.in_index(t)) += 1.0;
    b.labels.push_back(layout.out_index(examples[r].target));
  }
  return b;
}

struct Gradients {
  double loss = 0.0;
  Matrix dE;
  Matrix dW_proj;
  double accuracy = 0.0;  // argmax accuracy of the batch at the evaluated params
};

inline Gradients loss_and_grads(const Params& p, const Batch& batch, double weight_decay) {
  const auto B = batch.X.rows();
  if (B == 0) fail(ErrorCode::InvalidConfig, "empty batch");
  const Matrix H = batch.X * p.E;
  Matrix Z = H * p.W_proj;
  if (!Z.allFinite()) fail(ErrorCode::NumericalOverflow, "non-finite logits");

  Gradients g;
  std::size_t hits = 0;
  double nll = 0.0;
  for (Eigen::Index r = 0; r < B; ++r) {
    const int y = batch.labels[static_cast<std::size_t>(r)];
    if (argmax_lowest(Z.row(r).transpose()) == y) ++hits;
    const double mx = Z.row(r).maxCoeff();
    Z.row(r).array() = (Z.row(r).array() - mx).exp();
    const double sum = Z.row(r).sum();
    const double zy = Z(r, y);
    Z.row(r) /= sum;
    nll += std::log(sum) - std::log(zy);
    Z(r, y) -= 1.0;
  }
  // Z now holds softmax - onehot.
  Z /= static_cast<double>(B);
  g.loss = nll / static_cast<double>(B) + 0.5 * weight_decay * (p.E.squaredNorm() + p.W_proj.squaredNorm());
  g.dW_proj = H.transpose() * Z + weight_decay * p.W_proj;
  g.dE = batch.X.transpose() * (Z * p.W_proj.transpose()) + weight_decay * p.E;
  g.accuracy = static_cast<double>(hits) / static_cast<double>(B);
  if (!std::isfinite(g.loss)) fail(ErrorCode::NumericalOverflow, "non-finite loss");
  return g;
}

inline Gradients loss_and_grads(const Params& p, const VocabLayout& layout, const std::vector<Example>& batch,
                                double weight_decay) {
  if (batch.empty()) fail(ErrorCode::InvalidConfig, "empty batch");
  return loss_and_grads(p, make_batch(batch, layout), weight_decay);
}

inline LogitProvider provider(const Params& p, const VocabLayout& layout) {
  return [&p, &layout](const std::vector<int>& tokens) { return forward(p, layout, tokens); };
}

inline std::vector<MarginReport> ood_reports(const Params& p, const Dataset& ds) {
  return margins(provider(p, ds.layout), ds.test_ood, ds.layout);
}

struct TrainResult {
  Params params;
  TrainTrace trace;
  long steps = 0;
};

inline TrainResult train(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.train.empty()) fail(ErrorCode::InvalidConfig, "empty training set");
  const int d_m = cfg.d_m > 0 ? cfg.d_m : default_width(ds.layout);
  TrainResult res;
  res.params = init_params(ds.layout, d_m, cfg.init, cfg.seed);
  Params& p = res.params;
  const Batch batch = make_batch(ds.train, ds.layout);
  AdamSlot adam_e, adam_w;

  auto log_row = [&](long step, const Gradients& g) {
    const auto reports = ood_reports(p, ds);
    res.trace.push_back({step, g.loss, g.accuracy, accuracy(reports), min_margin(reports)});
  };

  long budget = cfg.max_steps;
  bool stop_fired = false;
  long step = 0;
  for (;; ++step) {
    Gradients g;
    try {
      g = loss_and_grads(p, batch, cfg.weight_decay);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NumericalOverflow)
        fail(ErrorCode::Diverged, "training diverged at step " + std::to_string(step));
      throw;
    }
    if (!stop_fired && g.accuracy == 1.0 && g.loss <= cfg.stop_loss) {
      stop_fired = true;
      const double target = (1.0 + cfg.continue_factor) * static_cast<double>(step);
      budget = std::min(budget, static_cast<long>(std::ceil(target)));
    }
    const bool last = step >= budget;
    if (step % cfg.log_every == 0 || last) log_row(step, g);
    if (last) break;
    if (cfg.optimizer == Optimizer::Adam) {
      adam_e.step(p.E, g.dE, cfg.learning_rate, cfg.adam, step + 1);
      adam_w.step(p.W_proj, g.dW_proj, cfg.learning_rate, cfg.adam, step + 1);
    } else {
      p.E -= cfg.learning_rate * g.dE;
      p.W_proj -= cfg.learning_rate * g.dW_proj;
    }
  }
  res.steps = step;
  return res;
}

// --- checkpoint --------------------------------------------------------------

inline constexpr std::uint32_t kMagic = 0x504C4D45u;  // "EMLP" little-endian
inline constexpr std::uint32_t kVersion = 1;

inline void save(std::ostream& os, const Params& p) {
  binio::put_u32(os, kMagic);
  binio::put_u32(os, kVersion);
  binio::put_u32(os, static_cast<std::uint32_t>(p.E.rows()));
  binio::put_u32(os, static_cast<std::uint32_t>(p.W_proj.cols()));
  binio::put_u32(os, static_cast<std::uint32_t>(p.d_m()));
  binio::put_matrix(os, p.E);
  binio::put_matrix(os, p.W_proj);
}

inline Params load(std::istream& is) {
  if (binio::get_u32(is) != kMagic) fail(ErrorCode::Io, "not an Emb-MLP checkpoint");
  if (binio::get_u32(is) != kVersion) fail(ErrorCode::Io, "unsupported Emb-MLP checkpoint version");
  const auto n_in = binio::get_u32(is);
  const auto n_out = binio::get_u32(is);
  const auto d_m = binio::get_u32(is);
  if (n_in == 0 || n_out == 0 || d_m == 0 || n_in > 1u << 20 || n_out > 1u << 20 || d_m > 1u << 16)
    fail(ErrorCode::Io, "implausible checkpoint dimensions");
  Params p;
  p.E = binio::get_matrix(is, n_in, d_m);
  p.W_proj = binio::get_matrix(is, d_m, n_out);
  return p;
}

inline void save_file(const std::string& path, const Params& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  save(os, p);
  if (!os) fail(ErrorCode::Io, "write failed for " + path);
}

inline Params load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open " + path);
  return load(is);
}

/// Throws ShapeMismatch unless the params fit the layout's vocabularies.
inline void check_shapes(const Params& p, const VocabLayout& layout) {
  if (p.E.rows() != static_cast<Eigen::Index>(layout.in_vocab.size()) ||
      p.W_proj.cols() != static_cast<Eigen::Index>(layout.out_vocab.size()) || p.E.cols() != p.W_proj.rows())
    fail(ErrorCode::ShapeMismatch, "checkpoint dimensions do not match the dataset vocabulary");
}

}  // namespace twohop::embmlp
