#pragma once

// Logit gaps and multiclass margins over the output vocabulary.

#include "twohop/common.hpp"
#include "twohop/taskgen.hpp"

#include <functional>
#include <limits>
#include <map>
#include <vector>

namespace twohop {

/// Maps an input token sequence to logits indexed like layout.out_vocab.
using LogitProvider = std::function<Vector(const std::vector<int>&)>;

struct MarginReport {
  taskgen::Example query;
  std::map<int, double> gaps;  // competitor token -> label logit minus competitor logit
  double q = 0.0;
  int predicted = -1;
  bool correct = false;
};

inline MarginReport margin_report(const taskgen::Example& query, const Eigen::Ref<const Vector>& logits,
                                  const taskgen::VocabLayout& layout) {
  if (logits.size() != static_cast<Eigen::Index>(layout.out_vocab.size()))
    fail(ErrorCode::ShapeMismatch, "logit vector does not match the output vocabulary");
  const int label = layout.out_index(query.target);
  MarginReport r;
  r.query = query;
  r.q = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < logits.size(); ++k) {
    if (k == label) continue;
    const double s = logits(label) - logits(k);
    r.gaps.emplace(layout.out_vocab[static_cast<std::size_t>(k)], s);
    r.q = std::min(r.q, s);
  }
  r.predicted = layout.out_vocab[static_cast<std::size_t>(argmax_lowest(logits))];
  r.correct = r.predicted == query.target;
  return r;
}

inline std::vector<MarginReport> margins(const LogitProvider& provider, const std::vector<taskgen::Example>& queries,
                                         const taskgen::VocabLayout& layout) {
  std::vector<MarginReport> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    for (int t : q.tokens) layout.in_index(t);
    out.push_back(margin_report(q, provider(q.tokens), layout));
  }
  return out;
}

/// Fraction of correct reports; NaN for an empty list.
inline double accuracy(const std::vector<MarginReport>& reports) {
  if (reports.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t hit = 0;
  for (const auto& r : reports) hit += r.correct ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(reports.size());
}

inline double min_margin(const std::vector<MarginReport>& reports) {
  if (reports.empty()) return std::numeric_limits<double>::quiet_NaN();
  double m = std::numeric_limits<double>::infinity();
  for (const auto& r : reports) m = std::min(m, r.q);
  return m;
}

}  // namespace twohop
