#pragma once

// Diagnostics that connect trained models to the reduced theory: block fits of the
// logit-template matrix, pattern flags, OOD accuracy and hidden-state alignment.

#include "twohop/common.hpp"
#include "twohop/embmlp.hpp"
#include "twohop/margins.hpp"
#include "twohop/nanoformer.hpp"
#include "twohop/taskgen.hpp"
#include "twohop/theory.hpp"
#include "twohop/training.hpp"

#include <json.hpp>

#include <cmath>
#include <ostream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace twohop::analysis {

using taskgen::Dataset;
using taskgen::VocabLayout;
using Json = nlohmann::ordered_json;

inline double ood_accuracy(const LogitProvider& provider, const Dataset& ds) {
  return accuracy(margins(provider, ds.test_ood, ds.layout));
}

inline double ood_accuracy(const embmlp::Params& p, const Dataset& ds) {
  return ood_accuracy(embmlp::provider(p, ds.layout), ds);
}

inline double ood_accuracy(const nanoformer::Params& p, const nanoformer::TransformerConfig& cfg, const Dataset& ds) {
  return ood_accuracy(nanoformer::provider(p, cfg, ds.layout), ds);
}

// --- block fits ------------------------------------------------------------------------

struct BlockFit {
  bool with_identity = true;
  theory::ReducedPointId id;
  theory::ReducedPointNoId noid;
  double residual = 0.0;    // ||W - template||_F / ||W||_F, 0 for W = 0
  bool transposed = false;  // input arrived as W^T
};

namespace detail {

struct BlockStats {
  double diag_sum = 0.0, off_sum = 0.0;
  long diag_count = 0, off_count = 0;

  void add(const Matrix& W, Eigen::Index r0, Eigen::Index c0, int n) {
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const double v = W(r0 + i, c0 + j);
        if (i == j) {
          diag_sum += v;
          ++diag_count;
        } else {
          off_sum += v;
          ++off_count;
        }
      }
  }

  // Least squares onto x1 I + x2 E: x2 is the off-diagonal mean, x1 + x2 the diagonal mean.
  std::pair<double, double> fit() const {
    const double off = off_sum / static_cast<double>(off_count);
    return {diag_sum / static_cast<double>(diag_count) - off, off};
  }
};

inline double row_mean(const Matrix& W, Eigen::Index r, Eigen::Index c0, int n) {
  return W.block(r, c0, 1, n).mean();
}

inline double relative_residual(const Matrix& W, const Matrix& T) {
  const double norm = W.norm();
  return norm == 0.0 ? 0.0 : (W - T).norm() / norm;
}

}  // namespace detail

/// Orthogonal projection of W onto the restricted block template. W may be given as
/// (2n+2) x 2n or as its transpose.
inline BlockFit fit_blocks(const Matrix& W_in, int n, bool with_identity) {
  theory::check_n(n);
  BlockFit fit;
  fit.with_identity = with_identity;
  Matrix W;
  if (W_in.rows() == 2 * n + 2 && W_in.cols() == 2 * n) {
    W = W_in;
  } else if (W_in.rows() == 2 * n && W_in.cols() == 2 * n + 2) {
    W = W_in.transpose();
    fit.transposed = true;
  } else {
    fail(ErrorCode::ShapeMismatch, "W is " + std::to_string(W_in.rows()) + "x" + std::to_string(W_in.cols()) +
                                       ", expected " + std::to_string(2 * n + 2) + "x" + std::to_string(2 * n));
  }
  const Eigen::Index r1 = 2 * n, r2 = 2 * n + 1;
  if (with_identity) {
    auto& p = fit.id;
    p.n = n;
    detail::BlockStats s;
    s.add(W, 0, 0, n);
    std::tie(p.a1, p.a2) = s.fit();
    s = {};
    s.add(W, n, 0, n);
    std::tie(p.b1, p.b2) = s.fit();
    s = {};
    s.add(W, 0, n, n);
    std::tie(p.c1, p.c2) = s.fit();
    s = {};
    s.add(W, n, n, n);
    std::tie(p.d1, p.d2) = s.fit();
    p.e = detail::row_mean(W, r1, 0, n);
    p.f = detail::row_mean(W, r2, 0, n);
    p.g = detail::row_mean(W, r1, n, n);
    p.h = detail::row_mean(W, r2, n, n);
    p.t = std::abs(p.u());
    fit.residual = detail::relative_residual(W, theory::assemble_w(p, n));
  } else {
    auto& p = fit.noid;
    p.n = n;
    detail::BlockStats s;
    s.add(W, 0, 0, n);
    s.add(W, n, n, n);
    std::tie(p.a1, p.a2) = s.fit();
    s = {};
    s.add(W, n, 0, n);
    s.add(W, 0, n, n);
    std::tie(p.b1, p.b2) = s.fit();
    p.alpha = 0.5 * (detail::row_mean(W, r1, 0, n) + detail::row_mean(W, r2, n, n));
    p.beta = 0.5 * (detail::row_mean(W, r2, 0, n) + detail::row_mean(W, r1, n, n));
    fit.residual = detail::relative_residual(W, theory::assemble_w(p, n));
  }
  return fit;
}

// --- pattern flags -----------------------------------------------------------------------

inline constexpr double kPatternTolerance = 1e-9;

struct PatternFlags {
  bool relation_set_selection = false;
  bool bridge_self_peak = false;
  bool bridge_object_alignment = false;
  // Supplementary: each subject row peaks, among objects, on one of its two-hop objects.
  bool subject_object_bias = false;
  int relation_rows_passing = 0;
  int relation_rows = 0;
  int self_peak_count = 0;
  int object_aligned_count = 0;
  int bridge_count = 0;
  int subject_biased_count = 0;
  int subject_count = 0;

  bool all() const { return relation_set_selection && bridge_self_peak && bridge_object_alignment; }
};

namespace detail {

// True when entry `want` beats every other entry of v by more than the tolerance.
inline bool strict_peak(const Vector& v, Eigen::Index want) {
  for (Eigen::Index k = 0; k < v.size(); ++k)
    if (k != want && !(v(want) > v(k) + kPatternTolerance)) return false;
  return true;
}

}  // namespace detail

/// Checks the row-template geometry of a |V_in| x |V_out| logit matrix: each first
/// relation favors the bridge columns and the second relation the object columns, and
/// each bridge row peaks on itself among bridges and on its second-hop object among objects.
inline PatternFlags template_pattern_check(const Matrix& W, const VocabLayout& layout) {
  const auto n_in = static_cast<Eigen::Index>(layout.in_vocab.size());
  const auto n_out = static_cast<Eigen::Index>(layout.out_vocab.size());
  if (W.rows() != n_in || W.cols() != n_out) fail(ErrorCode::ShapeMismatch, "W does not match the layout vocabularies");
  const int nb = layout.n * layout.c;
  const int no = layout.n;
  PatternFlags f;

  auto set_means = [&](int token) {
    const auto row = W.row(layout.in_index(token));
    return std::pair{row.head(nb).mean(), row.tail(no).mean()};
  };
  for (int r : layout.rel1) {
    const auto [bridge_mean, object_mean] = set_means(r);
    f.relation_rows_passing += bridge_mean > object_mean + kPatternTolerance ? 1 : 0;
  }
  {
    const auto [bridge_mean, object_mean] = set_means(layout.rel2_token());
    f.relation_rows_passing += object_mean > bridge_mean + kPatternTolerance ? 1 : 0;
  }
  f.relation_rows = static_cast<int>(layout.rel1.size()) + 1;
  f.relation_set_selection = f.relation_rows_passing == f.relation_rows;

  f.bridge_count = nb;
  for (int k = 0; k < nb; ++k) {
    const Vector row = W.row(layout.in_index(layout.bridges[static_cast<std::size_t>(k)])).transpose();
    if (detail::strict_peak(row.head(nb), k)) ++f.self_peak_count;
    const int object = taskgen::g2(k + 1, layout.n, layout.c) - 1;
    if (detail::strict_peak(row.tail(no), object)) ++f.object_aligned_count;
  }
  f.bridge_self_peak = f.self_peak_count == nb;
  f.bridge_object_alignment = f.object_aligned_count == nb;

  f.subject_count = layout.n;
  for (int i = 0; i < layout.n; ++i) {
    const Vector row = W.row(layout.in_index(layout.subjects[static_cast<std::size_t>(i)])).transpose();
    for (int j = 1; j <= layout.c; ++j) {
      const int object = taskgen::g2(taskgen::g1(i + 1, j, layout.n, layout.c), layout.n, layout.c) - 1;
      if (detail::strict_peak(row.tail(no), object)) {
        ++f.subject_biased_count;
        break;
      }
    }
  }
  f.subject_object_bias = f.subject_biased_count == layout.n;
  return f;
}

// --- alignment -----------------------------------------------------------------------------

struct AlignmentPair {
  int subject = 0;
  int relation = 0;
  int bridge = 0;
  std::vector<double> cosine;    // one per layer boundary
  std::vector<double> contrast;  // cosine minus mean cosine to every other bridge
};

struct AlignmentScore {
  std::vector<AlignmentPair> pairs;
  std::vector<double> per_layer;           // mean over pairs
  std::vector<double> contrast_per_layer;  // mean contrast over pairs
  double aggregate = 0.0;                  // last-layer mean

  double last_layer() const { return per_layer.empty() ? 0.0 : per_layer.back(); }
};

/// Cosine similarity; 0 when either vector is zero.
inline double cosine(const Eigen::Ref<const RowVector>& a, const Eigen::Ref<const RowVector>& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

/// Per-layer cosine between the last-position residual streams of two inputs.
inline std::vector<double> layer_cosines(const nanoformer::Params& p, const nanoformer::TransformerConfig& cfg,
                                         const std::vector<int>& x, const std::vector<int>& y) {
  const Matrix hx = nanoformer::extract_hidden(p, cfg, x);
  const Matrix hy = x == y ? hx : nanoformer::extract_hidden(p, cfg, y);
  std::vector<double> out;
  for (Eigen::Index l = 0; l < hx.rows(); ++l) out.push_back(cosine(hx.row(l), hy.row(l)));
  return out;
}

/// Compares the hidden state of each first-hop prefix (a_i, r1_j) with that of its
/// bridge token alone. sample_count = 0 uses all C*N pairs; otherwise pairs are taken
/// at evenly spaced positions of the bridge-ordered enumeration.
inline AlignmentScore alignment(const nanoformer::Params& p, const nanoformer::TransformerConfig& cfg,
                                const Dataset& ds, int sample_count = 0) {
  const auto& l = ds.layout;
  const int total = l.n * l.c;
  if (sample_count < 0 || sample_count > total)
    fail(ErrorCode::InvalidConfig, "sample_count must lie in [0, C*N]");
  const int count = sample_count == 0 ? total : sample_count;
  const auto layers = static_cast<std::size_t>(cfg.n_layers + 1);
  std::vector<Matrix> bridge_hidden;
  for (int b : l.bridges) bridge_hidden.push_back(nanoformer::extract_hidden(p, cfg, {b}));
  AlignmentScore s;
  s.per_layer.assign(layers, 0.0);
  s.contrast_per_layer.assign(layers, 0.0);
  for (int k = 0; k < count; ++k) {
    const int idx = static_cast<int>(static_cast<long>(k) * total / count);
    AlignmentPair pair;
    pair.subject = idx % l.n;
    pair.relation = l.first_rel1() + idx / l.n;
    pair.bridge = l.first_bridge() + idx;
    for (int t : {pair.subject, pair.relation, pair.bridge}) l.in_index(t);
    const Matrix h = nanoformer::extract_hidden(p, cfg, {pair.subject, pair.relation});
    for (std::size_t j = 0; j < layers; ++j) {
      const auto row = static_cast<Eigen::Index>(j);
      const double own = cosine(h.row(row), bridge_hidden[static_cast<std::size_t>(idx)].row(row));
      double others = 0.0;
      for (std::size_t b = 0; b < bridge_hidden.size(); ++b)
        if (static_cast<int>(b) != idx) others += cosine(h.row(row), bridge_hidden[b].row(row));
      const double contrast = total > 1 ? own - others / static_cast<double>(total - 1) : own;
      pair.cosine.push_back(own);
      pair.contrast.push_back(contrast);
      s.per_layer[j] += own;
      s.contrast_per_layer[j] += contrast;
    }
    s.pairs.push_back(std::move(pair));
  }
  for (auto& v : s.per_layer) v /= static_cast<double>(count);
  for (auto& v : s.contrast_per_layer) v /= static_cast<double>(count);
  s.aggregate = s.per_layer.back();
  return s;
}

// --- emitters -------------------------------------------------------------------------------

inline void write_logits_csv(std::ostream& os, const Matrix& W, const VocabLayout& layout) {
  os << "token";
  for (int t : layout.out_vocab) os << ',' << layout.label(t);
  os << '\n';
  for (std::size_t r = 0; r < layout.in_vocab.size(); ++r) {
    os << layout.label(layout.in_vocab[r]);
    for (Eigen::Index c = 0; c < W.cols(); ++c) os << ',' << format_double(W(static_cast<Eigen::Index>(r), c));
    os << '\n';
  }
}

inline void write_margins_csv(std::ostream& os, const std::vector<MarginReport>& reports, const VocabLayout& layout) {
  os << "query,target,predicted,q,correct\n";
  for (const auto& r : reports) {
    std::string q;
    for (int t : r.query.tokens) q += (q.empty() ? "" : " ") + layout.label(t);
    os << q << ',' << layout.label(r.query.target) << ',' << layout.label(r.predicted) << ',' << format_double(r.q)
       << ',' << (r.correct ? "true" : "false") << '\n';
  }
}

inline void write_alignment_csv(std::ostream& os, const AlignmentScore& s, const VocabLayout& layout) {
  os << "layer,pair,cosine,contrast\n";
  for (const auto& p : s.pairs)
    for (std::size_t l = 0; l < p.cosine.size(); ++l)
      os << l << ',' << layout.label(p.subject) << ' ' << layout.label(p.relation) << "~" << layout.label(p.bridge)
         << ',' << format_double(p.cosine[l]) << ',' << format_double(p.contrast[l]) << '\n';
}

inline Json to_json(const PatternFlags& f) {
  Json j;
  j["relation_set_selection"] = f.relation_set_selection;
  j["bridge_self_peak"] = f.bridge_self_peak;
  j["bridge_object_alignment"] = f.bridge_object_alignment;
  j["subject_object_bias"] = f.subject_object_bias;
  j["counts"] = {{"relation_rows_passing", f.relation_rows_passing},
                 {"relation_rows", f.relation_rows},
                 {"self_peak", f.self_peak_count},
                 {"object_aligned", f.object_aligned_count},
                 {"bridges", f.bridge_count},
                 {"subject_biased", f.subject_biased_count},
                 {"subjects", f.subject_count}};
  return j;
}

inline Json to_json(const BlockFit& b) {
  Json j;
  j["with_identity"] = b.with_identity;
  j["params"] = b.with_identity ? theory::to_json(b.id) : theory::to_json(b.noid);
  j["residual"] = b.residual;
  return j;
}

}  // namespace twohop::analysis
