#pragma once

// Minimal decoder-only pre-norm transformer with a hand-written backward pass.
// Supervision is a single next-token target at the last input position.

#include "twohop/common.hpp"
#include "twohop/margins.hpp"
#include "twohop/taskgen.hpp"
#include "twohop/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace twohop::nanoformer {

using taskgen::Dataset;
using taskgen::Example;
using taskgen::VocabLayout;

struct TransformerConfig {
  int d_vocab = 0;
  int d_m = 64;
  int d_k = 32;
  int n_heads = 2;
  int n_layers = 2;
  int context = 3;
  InitPolicy init;
  bool tie_embeddings = true;
  double ln_eps = 1e-8;

  int attn_width() const { return n_heads * d_k; }

  void validate() const {
    init.validate();
    if (d_vocab < 1) fail(ErrorCode::InvalidConfig, "d_vocab must be positive");
    if (d_m < 1 || d_k < 1 || n_heads < 1) fail(ErrorCode::InvalidConfig, "widths and head count must be positive");
    if (n_layers < 1) fail(ErrorCode::InvalidConfig, "n_layers must be >= 1");
    if (context < 3) fail(ErrorCode::InvalidConfig, "context must be >= 3");
    if (!(ln_eps > 0.0)) fail(ErrorCode::InvalidConfig, "ln_eps must be positive");
  }
};

struct Layer {
  Matrix ln1_g, ln1_b;
  Matrix wq, bq, wk, bk, wv, bv;  // d_m x H*d_k, biases 1 x H*d_k
  Matrix wo, bo;                  // H*d_k x d_m
  Matrix ln2_g, ln2_b;
  Matrix w1, b1;  // d_m x 4 d_m
  Matrix w2, b2;  // 4 d_m x d_m
};

struct Params {
  Matrix tok;  // d_vocab x d_m, also the LM head when tied
  Matrix pos;  // T x d_m
  std::vector<Layer> layers;
  Matrix lnf_g, lnf_b;
  Matrix head;  // d_vocab x d_m when untied, empty otherwise

  const Matrix& head_matrix() const { return head.size() ? head : tok; }
};

struct TensorRef {
  std::string name;
  Matrix* m;
  bool decay;        // weight matrices and embeddings; LN parameters and biases are excluded
  Eigen::Index fan_in;  // input dimension used by small initialization, 0 for non-weights
};

/// Every parameter tensor in a fixed order; that order defines initialization
/// draws, optimizer slots and the checkpoint layout.
inline std::vector<TensorRef> tensors(Params& p) {
  std::vector<TensorRef> out;
  out.push_back({"tok_emb", &p.tok, true, p.tok.rows()});
  out.push_back({"pos_emb", &p.pos, true, p.pos.rows()});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.push_back({pre + "ln1.g", &L.ln1_g, false, 0});
    out.push_back({pre + "ln1.b", &L.ln1_b, false, 0});
    out.push_back({pre + "attn.wq", &L.wq, true, L.wq.rows()});
    out.push_back({pre + "attn.bq", &L.bq, false, 0});
    out.push_back({pre + "attn.wk", &L.wk, true, L.wk.rows()});
    out.push_back({pre + "attn.bk", &L.bk, false, 0});
    out.push_back({pre + "attn.wv", &L.wv, true, L.wv.rows()});
    out.push_back({pre + "attn.bv", &L.bv, false, 0});
    out.push_back({pre + "attn.wo", &L.wo, true, L.wo.rows()});
    out.push_back({pre + "attn.bo", &L.bo, false, 0});
    out.push_back({pre + "ln2.g", &L.ln2_g, false, 0});
    out.push_back({pre + "ln2.b", &L.ln2_b, false, 0});
    out.push_back({pre + "mlp.w1", &L.w1, true, L.w1.rows()});
    out.push_back({pre + "mlp.b1", &L.b1, false, 0});
    out.push_back({pre + "mlp.w2", &L.w2, true, L.w2.rows()});
    out.push_back({pre + "mlp.b2", &L.b2, false, 0});
  }
  out.push_back({"ln_f.g", &p.lnf_g, false, 0});
  out.push_back({"ln_f.b", &p.lnf_b, false, 0});
  if (p.head.size()) out.push_back({"head", &p.head, true, p.head.cols()});
  return out;
}

inline std::vector<TensorRef> tensors(const Params& p) { return tensors(const_cast<Params&>(p)); }

/// Same shapes as cfg, every entry zero except LayerNorm scales (one).
inline Params shaped(const TransformerConfig& cfg) {
  const int d = cfg.d_m, a = cfg.attn_width(), f = 4 * cfg.d_m;
  Params p;
  p.tok = Matrix::Zero(cfg.d_vocab, d);
  p.pos = Matrix::Zero(cfg.context, d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& L : p.layers) {
    L.ln1_g = Matrix::Ones(1, d);
    L.ln1_b = Matrix::Zero(1, d);
    L.wq = Matrix::Zero(d, a);
    L.bq = Matrix::Zero(1, a);
    L.wk = Matrix::Zero(d, a);
    L.bk = Matrix::Zero(1, a);
    L.wv = Matrix::Zero(d, a);
    L.bv = Matrix::Zero(1, a);
    L.wo = Matrix::Zero(a, d);
    L.bo = Matrix::Zero(1, d);
    L.ln2_g = Matrix::Ones(1, d);
    L.ln2_b = Matrix::Zero(1, d);
    L.w1 = Matrix::Zero(d, f);
    L.b1 = Matrix::Zero(1, f);
    L.w2 = Matrix::Zero(f, d);
    L.b2 = Matrix::Zero(1, d);
  }
  p.lnf_g = Matrix::Ones(1, d);
  p.lnf_b = Matrix::Zero(1, d);
  if (!cfg.tie_embeddings) p.head = Matrix::Zero(cfg.d_vocab, d);
  return p;
}

inline Params zeros_like(const Params& p) {
  Params z = p;
  for (auto& t : tensors(z)) t.m->setZero();
  return z;
}

inline Params init_params(const TransformerConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Params p = shaped(cfg);
  Rng rng(seed);
  for (auto& t : tensors(p))
    if (t.decay) fill_normal(*t.m, cfg.init.sigma(t.fan_in), rng);
  return p;
}

// --- building blocks ----------------------------------------------------------

struct LnCache {
  Matrix xhat;
  Vector rstd;
};

inline Matrix ln_forward(const Matrix& x, const Matrix& g, const Matrix& b, double eps, LnCache& c) {
  const auto d = static_cast<double>(x.cols());
  c.xhat.resize(x.rows(), x.cols());
  c.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / d;
    c.rstd(r) = 1.0 / std::sqrt(var + eps);
    c.xhat.row(r) = (x.row(r).array() - mu) * c.rstd(r);
  }
  Matrix y = c.xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  return y;
}

/// Returns dx; accumulates into dg, db.
inline Matrix ln_backward(const Matrix& dy, const Matrix& g, const LnCache& c, Matrix& dg, Matrix& db) {
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * g.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = dxhat.row(r).dot(c.xhat.row(r)) / static_cast<double>(dy.cols());
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

// --- batched forward / backward ------------------------------------------------

struct LayerCache {
  Matrix x_in;
  LnCache ln1;
  Matrix h1, q, k, v;
  std::vector<Matrix> probs;  // B * H blocks of T x T
  Matrix o;
  Matrix z;
  LnCache ln2;
  Matrix h2, u;
};

/// B sequences of equal length T stacked as B*T rows (row b*T + t).
struct GroupCache {
  int B = 0;
  int T = 0;
  std::vector<int> tokens;
  std::vector<LayerCache> layers;
  Matrix x_out;  // residual stream after the last block, all rows
  LnCache lnf;
  Matrix hf;  // final LN at the last position of each sequence, B x d_m
};

inline void check_tokens(const TransformerConfig& cfg, const std::vector<int>& tokens) {
  if (tokens.empty()) fail(ErrorCode::InvalidConfig, "empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.context)
    fail(ErrorCode::SequenceTooLong, "sequence of length " + std::to_string(tokens.size()) + " exceeds context " +
                                         std::to_string(cfg.context));
  for (int t : tokens)
    if (t < 0 || t >= cfg.d_vocab) fail(ErrorCode::UnknownToken, "token " + std::to_string(t) + " outside vocabulary");
}

/// Runs the blocks and returns B x d_vocab logits at each sequence's last position.
inline Matrix forward_group(const Params& p, const TransformerConfig& cfg, GroupCache& c) {
  const int B = c.B, T = c.T, H = cfg.n_heads, dk = cfg.d_k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix x(B * T, cfg.d_m);
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) x.row(b * T + t) = p.tok.row(c.tokens[static_cast<std::size_t>(b * T + t)]) + p.pos.row(t);

  c.layers.assign(p.layers.size(), {});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    lc.h1 = ln_forward(x, L.ln1_g, L.ln1_b, cfg.ln_eps, lc.ln1);
    lc.q = (lc.h1 * L.wq).rowwise() + L.bq.row(0);
    lc.k = (lc.h1 * L.wk).rowwise() + L.bk.row(0);
    lc.v = (lc.h1 * L.wv).rowwise() + L.bv.row(0);
    lc.o.resize(B * T, H * dk);
    lc.probs.resize(static_cast<std::size_t>(B * H));
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        Matrix s = lc.q.block(b * T, h * dk, T, dk) * lc.k.block(b * T, h * dk, T, dk).transpose() * scale;
        for (int i = 0; i < T; ++i) {
          const double mx = s.row(i).head(i + 1).maxCoeff();
          double sum = 0.0;
          for (int j = 0; j < T; ++j) {
            s(i, j) = j <= i ? std::exp(s(i, j) - mx) : 0.0;
            sum += s(i, j);
          }
          s.row(i) /= sum;
        }
        lc.o.block(b * T, h * dk, T, dk) = s * lc.v.block(b * T, h * dk, T, dk);
        lc.probs[static_cast<std::size_t>(b * H + h)] = std::move(s);
      }
    lc.z = x + ((lc.o * L.wo).rowwise() + L.bo.row(0));
    lc.h2 = ln_forward(lc.z, L.ln2_g, L.ln2_b, cfg.ln_eps, lc.ln2);
    lc.u = (lc.h2 * L.w1).rowwise() + L.b1.row(0);
    const Matrix a = lc.u.unaryExpr([](double u) { return gelu(u); });
    x = lc.z + ((a * L.w2).rowwise() + L.b2.row(0));
  }
  c.x_out = x;
  Matrix last(B, cfg.d_m);
  for (int b = 0; b < B; ++b) last.row(b) = x.row(b * T + T - 1);
  c.hf = ln_forward(last, p.lnf_g, p.lnf_b, cfg.ln_eps, c.lnf);
  return c.hf * p.head_matrix().transpose();
}

/// Backpropagates dlogits (B x d_vocab) through the cached group, accumulating into g.
inline void backward_group(const Params& p, const TransformerConfig& cfg, const GroupCache& c, const Matrix& dlogits,
                           Params& g) {
  const int B = c.B, T = c.T, H = cfg.n_heads, dk = cfg.d_k;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix& dhead = g.head.size() ? g.head : g.tok;
  dhead += dlogits.transpose() * c.hf;
  const Matrix dhf = dlogits * p.head_matrix();
  const Matrix dlast = ln_backward(dhf, p.lnf_g, c.lnf, g.lnf_g, g.lnf_b);
  Matrix dx = Matrix::Zero(B * T, cfg.d_m);
  for (int b = 0; b < B; ++b) dx.row(b * T + T - 1) = dlast.row(b);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = g.layers[li];
    const auto& lc = c.layers[li];
    // MLP branch: x_next = z + gelu(h2 W1 + b1) W2 + b2
    const Matrix a = lc.u.unaryExpr([](double u) { return gelu(u); });
    G.w2 += a.transpose() * dx;
    G.b2.row(0) += dx.colwise().sum();
    const Matrix du = (dx * L.w2.transpose()).cwiseProduct(lc.u.unaryExpr([](double u) { return gelu_grad(u); }));
    G.w1 += lc.h2.transpose() * du;
    G.b1.row(0) += du.colwise().sum();
    const Matrix dh2 = du * L.w1.transpose();
    Matrix dz = dx + ln_backward(dh2, L.ln2_g, lc.ln2, G.ln2_g, G.ln2_b);
    // attention branch: z = x + o Wo + bo
    G.wo += lc.o.transpose() * dz;
    G.bo.row(0) += dz.colwise().sum();
    const Matrix dO = dz * L.wo.transpose();
    Matrix dq(B * T, H * dk), dk_(B * T, H * dk), dv(B * T, H * dk);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const Matrix& P = lc.probs[static_cast<std::size_t>(b * H + h)];
        const auto dOb = dO.block(b * T, h * dk, T, dk);
        const auto vb = lc.v.block(b * T, h * dk, T, dk);
        dv.block(b * T, h * dk, T, dk) = P.transpose() * dOb;
        const Matrix dP = dOb * vb.transpose();
        Matrix dS = P.cwiseProduct(dP);
        for (int i = 0; i < T; ++i) dS.row(i) -= P.row(i) * dS.row(i).sum();
        dS *= scale;
        dq.block(b * T, h * dk, T, dk) = dS * lc.k.block(b * T, h * dk, T, dk);
        dk_.block(b * T, h * dk, T, dk) = dS.transpose() * lc.q.block(b * T, h * dk, T, dk);
      }
    G.wq += lc.h1.transpose() * dq;
    G.bq.row(0) += dq.colwise().sum();
    G.wk += lc.h1.transpose() * dk_;
    G.bk.row(0) += dk_.colwise().sum();
    G.wv += lc.h1.transpose() * dv;
    G.bv.row(0) += dv.colwise().sum();
    const Matrix dh1 = dq * L.wq.transpose() + dk_ * L.wk.transpose() + dv * L.wv.transpose();
    dx = dz + ln_backward(dh1, L.ln1_g, lc.ln1, G.ln1_g, G.ln1_b);
  }
  for (int b = 0; b < B; ++b)
    for (int t = 0; t < T; ++t) {
      g.tok.row(c.tokens[static_cast<std::size_t>(b * T + t)]) += dx.row(b * T + t);
      g.pos.row(t) += dx.row(b * T + t);
    }
}

// --- single-sequence API -----------------------------------------------------------

/// Residual stream at every layer boundary: entry 0 is post-embedding, entry L
/// is after the last block. Each matrix is T x d_m.
struct HiddenStates {
  std::vector<Matrix> layers;
};

struct ForwardResult {
  Vector logits;  // over the full token vocabulary
  HiddenStates hidden;
};

inline ForwardResult tf_forward(const Params& p, const TransformerConfig& cfg, const std::vector<int>& tokens) {
  check_tokens(cfg, tokens);
  GroupCache c;
  c.B = 1;
  c.T = static_cast<int>(tokens.size());
  c.tokens = tokens;
  const Matrix logits = forward_group(p, cfg, c);
  ForwardResult r;
  r.logits = logits.row(0).transpose();
  for (const auto& lc : c.layers) r.hidden.layers.push_back(lc.x_in);
  r.hidden.layers.push_back(c.x_out);
  return r;
}

/// (L+1) x d_m: the residual stream at the last input position, one row per layer boundary.
inline Matrix extract_hidden(const Params& p, const TransformerConfig& cfg, const std::vector<int>& tokens) {
  const auto r = tf_forward(p, cfg, tokens);
  Matrix out(static_cast<Eigen::Index>(r.hidden.layers.size()), cfg.d_m);
  for (std::size_t l = 0; l < r.hidden.layers.size(); ++l)
    out.row(static_cast<Eigen::Index>(l)) = r.hidden.layers[l].row(r.hidden.layers[l].rows() - 1);
  return out;
}

/// Logits restricted to the task's output vocabulary, ordered like layout.out_vocab.
inline Vector out_logits(const Vector& full, const VocabLayout& layout) {
  Vector v(static_cast<Eigen::Index>(layout.out_vocab.size()));
  for (std::size_t k = 0; k < layout.out_vocab.size(); ++k) v(static_cast<Eigen::Index>(k)) = full(layout.out_vocab[k]);
  return v;
}

inline LogitProvider provider(const Params& p, const TransformerConfig& cfg, const VocabLayout& layout) {
  return [&p, &cfg, &layout](const std::vector<int>& tokens) {
    return out_logits(tf_forward(p, cfg, tokens).logits, layout);
  };
}

// --- loss and gradients ----------------------------------------------------------

/// Examples grouped by sequence length so each group runs as one stacked batch.
struct Batch {
  std::vector<GroupCache> groups;
  std::vector<std::vector<int>> targets;  // per group
  std::size_t size = 0;
};

inline Batch make_batch(const TransformerConfig& cfg, const std::vector<Example>& examples) {
  std::map<int, std::size_t> by_len;
  Batch b;
  for (const auto& ex : examples) {
    check_tokens(cfg, ex.tokens);
    if (ex.target < 0 || ex.target >= cfg.d_vocab) fail(ErrorCode::UnknownToken, "target outside vocabulary");
    const int T = static_cast<int>(ex.tokens.size());
    auto it = by_len.find(T);
    if (it == by_len.end()) {
      it = by_len.emplace(T, b.groups.size()).first;
      b.groups.emplace_back();
      b.groups.back().T = T;
      b.targets.emplace_back();
    }
    auto& g = b.groups[it->second];
    g.B += 1;
    g.tokens.insert(g.tokens.end(), ex.tokens.begin(), ex.tokens.end());
    b.targets[it->second].push_back(ex.target);
  }
  b.size = examples.size();
  return b;
}

struct Gradients {
  double loss = 0.0;
  Params grads;
  double accuracy = 0.0;  // argmax over the full vocabulary
};

/// Mean cross-entropy over the batch plus (weight_decay / 2) * squared norm of decayed tensors.
inline Gradients tf_loss_and_grads(const Params& p, const TransformerConfig& cfg, Batch& batch, double weight_decay) {
  if (batch.size == 0) fail(ErrorCode::InvalidConfig, "empty batch");
  Gradients out;
  out.grads = zeros_like(p);
  const double inv = 1.0 / static_cast<double>(batch.size);
  double nll = 0.0;
  std::size_t hits = 0;
  for (std::size_t gi = 0; gi < batch.groups.size(); ++gi) {
    auto& grp = batch.groups[gi];
    Matrix z = forward_group(p, cfg, grp);
    if (!z.allFinite()) fail(ErrorCode::NumericalOverflow, "non-finite logits");
    for (int r = 0; r < grp.B; ++r) {
      const int y = batch.targets[gi][static_cast<std::size_t>(r)];
      if (argmax_lowest(z.row(r).transpose()) == y) ++hits;
      const double mx = z.row(r).maxCoeff();
      z.row(r).array() = (z.row(r).array() - mx).exp();
      const double sum = z.row(r).sum();
      nll += std::log(sum) - std::log(z(r, y));
      z.row(r) /= sum;
      z(r, y) -= 1.0;
    }
    z *= inv;
    backward_group(p, cfg, grp, z, out.grads);
  }
  out.loss = nll * inv;
  if (weight_decay != 0.0) {
    auto ps = tensors(p);
    auto gs = tensors(out.grads);
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps[i].decay) {
        out.loss += 0.5 * weight_decay * ps[i].m->squaredNorm();
        *gs[i].m += weight_decay * *ps[i].m;
      }
  }
  if (!std::isfinite(out.loss)) fail(ErrorCode::NumericalOverflow, "non-finite loss");
  out.accuracy = static_cast<double>(hits) * inv;
  return out;
}

inline Gradients tf_loss_and_grads(const Params& p, const TransformerConfig& cfg, const std::vector<Example>& examples,
                                   double weight_decay) {
  if (examples.empty()) fail(ErrorCode::InvalidConfig, "empty batch");
  Batch b = make_batch(cfg, examples);
  return tf_loss_and_grads(p, cfg, b, weight_decay);
}

// --- training -----------------------------------------------------------------------

struct TrainConfig {
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  long max_steps = 3000;
  double stop_loss = 1e-3;
  double continue_factor = 1.0;
  std::uint64_t seed = 0;
  AdamHyper adam;
  long log_every = 100;

  void validate() const {
    if (!(learning_rate > 0.0)) fail(ErrorCode::InvalidConfig, "learning_rate must be positive");
    if (weight_decay < 0.0) fail(ErrorCode::InvalidConfig, "weight_decay must be nonnegative");
    if (max_steps < 0) fail(ErrorCode::InvalidConfig, "max_steps must be nonnegative");
    if (!(stop_loss > 0.0)) fail(ErrorCode::InvalidConfig, "stop_loss must be positive");
    if (log_every < 1) fail(ErrorCode::InvalidConfig, "log_every must be >= 1");
    if (continue_factor < 0.0) fail(ErrorCode::InvalidConfig, "continue_factor must be nonnegative");
  }
};

/// Toy-scale defaults sized for a dataset's vocabulary.
inline TransformerConfig default_config(const VocabLayout& layout, InitPolicy init = {}) {
  TransformerConfig cfg;
  cfg.d_vocab = layout.vocab_size();
  cfg.init = init;
  return cfg;
}

/// OOD reports with logits restricted to the output vocabulary.
inline std::vector<MarginReport> ood_reports(const Params& p, const TransformerConfig& cfg, const Dataset& ds) {
  return margins(provider(p, cfg, ds.layout), ds.test_ood, ds.layout);
}

struct TrainResult {
  Params params;
  TrainTrace trace;
  long steps = 0;
};

/// Called after every logged step with the current parameters.
using Observer = std::function<void(long step, const Params&)>;

inline TrainResult tf_train(const Dataset& ds, const TransformerConfig& cfg, const TrainConfig& tc,
                            const Observer& observe = {}) {
  cfg.validate();
  tc.validate();
  if (ds.train.empty()) fail(ErrorCode::InvalidConfig, "empty training set");
  if (cfg.d_vocab < ds.layout.vocab_size()) fail(ErrorCode::InvalidConfig, "d_vocab smaller than the task vocabulary");
  TrainResult res;
  res.params = init_params(cfg, tc.seed);
  Params& p = res.params;
  Batch batch = make_batch(cfg, ds.train);
  std::vector<AdamSlot> slots(tensors(p).size());

  // Train accuracy on the output vocabulary, matching how OOD queries are scored.
  auto log_row = [&](long step, double loss) {
    const auto train_reports = margins(provider(p, cfg, ds.layout), ds.train, ds.layout);
    const auto reports = ood_reports(p, cfg, ds);
    res.trace.push_back({step, loss, accuracy(train_reports), accuracy(reports), min_margin(reports)});
    if (observe) observe(step, p);
  };

  long budget = tc.max_steps;
  bool stop_fired = false;
  long step = 0;
  for (;; ++step) {
    Gradients g;
    try {
      g = tf_loss_and_grads(p, cfg, batch, tc.weight_decay);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::NumericalOverflow)
        fail(ErrorCode::Diverged, "training diverged at step " + std::to_string(step));
      throw;
    }
    if (!stop_fired && g.accuracy == 1.0 && g.loss <= tc.stop_loss) {
      stop_fired = true;
      budget = std::min(budget, static_cast<long>(std::ceil((1.0 + tc.continue_factor) * static_cast<double>(step))));
    }
    const bool last = step >= budget;
    if (step % tc.log_every == 0 || last) log_row(step, g.loss);
    if (last) break;
    auto ps = tensors(p);
    auto gs = tensors(g.grads);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (tc.optimizer == Optimizer::Adam)
        slots[i].step(*ps[i].m, *gs[i].m, tc.learning_rate, tc.adam, step + 1);
      else
        *ps[i].m -= tc.learning_rate * *gs[i].m;
    }
  }
  res.steps = step;
  return res;
}

// --- checkpoint ------------------------------------------------------------------------

inline constexpr std::uint32_t kMagic = 0x464E5754u;  // "TWNF" little-endian
inline constexpr std::uint32_t kVersion = 1;

/// Header: magic, version, d_vocab, d_m, d_k, n_heads, n_layers, context, tied flag,
/// tensor count (u32 LE), then per tensor: name, rows, cols, row-major f64 LE.
inline void save(std::ostream& os, const Params& p, const TransformerConfig& cfg) {
  binio::put_u32(os, kMagic);
  binio::put_u32(os, kVersion);
  for (int v : {cfg.d_vocab, cfg.d_m, cfg.d_k, cfg.n_heads, cfg.n_layers, cfg.context})
    binio::put_u32(os, static_cast<std::uint32_t>(v));
  binio::put_u32(os, cfg.tie_embeddings ? 1u : 0u);
  const auto ts = tensors(p);
  binio::put_u32(os, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    binio::put_string(os, t.name);
    binio::put_u32(os, static_cast<std::uint32_t>(t.m->rows()));
    binio::put_u32(os, static_cast<std::uint32_t>(t.m->cols()));
    binio::put_matrix(os, *t.m);
  }
}

struct Checkpoint {
  TransformerConfig cfg;
  Params params;
};

inline Checkpoint load(std::istream& is) {
  if (binio::get_u32(is) != kMagic) fail(ErrorCode::Io, "not a transformer checkpoint");
  if (binio::get_u32(is) != kVersion) fail(ErrorCode::Io, "unsupported transformer checkpoint version");
  Checkpoint ck;
  auto& c = ck.cfg;
  for (int* v : {&c.d_vocab, &c.d_m, &c.d_k, &c.n_heads, &c.n_layers, &c.context}) {
    const auto x = binio::get_u32(is);
    if (x == 0 || x > (1u << 20)) fail(ErrorCode::Io, "implausible checkpoint dimension");
    *v = static_cast<int>(x);
  }
  c.tie_embeddings = binio::get_u32(is) != 0;
  ck.params = shaped(c);
  auto ts = tensors(ck.params);
  if (binio::get_u32(is) != ts.size()) fail(ErrorCode::Io, "tensor count mismatch");
  for (auto& t : ts) {
    if (binio::get_string(is) != t.name) fail(ErrorCode::Io, "unexpected tensor name, expected " + t.name);
    const auto rows = binio::get_u32(is);
    const auto cols = binio::get_u32(is);
    if (rows != t.m->rows() || cols != t.m->cols()) fail(ErrorCode::Io, "tensor shape mismatch for " + t.name);
    *t.m = binio::get_matrix(is, rows, cols);
  }
  return ck;
}

inline void save_file(const std::string& path, const Params& p, const TransformerConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::Io, "cannot open " + path + " for writing");
  save(os, p, cfg);
  if (!os) fail(ErrorCode::Io, "write failed for " + path);
}

inline Checkpoint load_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::Io, "cannot open " + path);
  return load(is);
}

}  // namespace twohop::nanoformer
