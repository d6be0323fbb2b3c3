#pragma once

// Synthetic two-hop task family: entity/relation vocabulary, hop maps and
// train / out-of-distribution splits, with optional identity supervision.

#include "twohop/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

namespace twohop::taskgen {

struct DatasetSpec {
  int n_entities = 20;  // |E1| = |E3|
  int complexity = 1;   // C: number of first-hop relations / bridge slices
  bool include_identity = true;
  bool include_two_hop_in_train = false;
  // Fraction of bridges whose two-hop queries go to train when enabled.
  double two_hop_train_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_entities < 2) fail(ErrorCode::InvalidSpec, "n_entities must be >= 2");
    if (complexity < 1) fail(ErrorCode::InvalidSpec, "complexity must be >= 1");
    if (include_two_hop_in_train && !(two_hop_train_fraction > 0.0 && two_hop_train_fraction < 1.0))
      fail(ErrorCode::InvalidSpec, "two_hop_train_fraction must lie in (0, 1)");
  }

  bool operator==(const DatasetSpec&) const = default;
};

/// Token ids are contiguous: subjects, bridge slices in order, objects, R1, R2.
struct VocabLayout {
  int n = 0;
  int c = 0;
  std::vector<int> subjects;
  std::vector<int> bridges;
  std::vector<int> objects;
  std::vector<int> rel1;
  std::vector<int> rel2;
  std::vector<int> in_vocab;   // E1, E2, R1, R2
  std::vector<int> out_vocab;  // E2, E3

  int vocab_size() const { return 2 * n + c * n + c + 1; }
  int first_bridge() const { return n; }
  int first_object() const { return n + c * n; }
  int first_rel1() const { return 2 * n + c * n; }
  int rel2_token() const { return 2 * n + c * n + c; }

  bool is_subject(int t) const { return t >= 0 && t < n; }
  bool is_bridge(int t) const { return t >= n && t < n + c * n; }
  bool is_object(int t) const { return t >= first_object() && t < first_rel1(); }
  bool is_rel1(int t) const { return t >= first_rel1() && t < rel2_token(); }
  bool is_rel2(int t) const { return t == rel2_token(); }

  bool in_contains(int t) const { return is_subject(t) || is_bridge(t) || is_rel1(t) || is_rel2(t); }
  bool out_contains(int t) const { return is_bridge(t) || is_object(t); }

  int in_index(int t) const {
    if (is_subject(t) || is_bridge(t)) return t;
    if (is_rel1(t) || is_rel2(t)) return t - n;
    fail(ErrorCode::UnknownToken, "token " + std::to_string(t) + " is not in the input vocabulary");
  }

  int out_index(int t) const {
    if (is_bridge(t)) return t - n;
    if (is_object(t)) return t - n;
    fail(ErrorCode::UnknownToken, "token " + std::to_string(t) + " is not in the output vocabulary");
  }

  /// Human-readable token label, 1-based within each group: a3, b7, c2, r1_2, r2.
  std::string label(int t) const {
    if (is_subject(t)) return "a" + std::to_string(t + 1);
    if (is_bridge(t)) return "b" + std::to_string(t - n + 1);
    if (is_object(t)) return "c" + std::to_string(t - first_object() + 1);
    if (is_rel1(t)) return "r1_" + std::to_string(t - first_rel1() + 1);
    if (is_rel2(t)) return "r2";
    return "?" + std::to_string(t);
  }

  bool operator==(const VocabLayout&) const = default;
};

enum class ExampleKind { ZeroHop, OneHopFirst, OneHopSecond, TwoHop };

inline std::string_view to_string(ExampleKind k) {
  switch (k) {
    case ExampleKind::ZeroHop: return "ZeroHop";
    case ExampleKind::OneHopFirst: return "OneHopFirst";
    case ExampleKind::OneHopSecond: return "OneHopSecond";
    case ExampleKind::TwoHop: return "TwoHop";
  }
  return "?";
}

inline ExampleKind example_kind_from_string(std::string_view s) {
  if (s == "ZeroHop") return ExampleKind::ZeroHop;
  if (s == "OneHopFirst") return ExampleKind::OneHopFirst;
  if (s == "OneHopSecond") return ExampleKind::OneHopSecond;
  if (s == "TwoHop") return ExampleKind::TwoHop;
  fail(ErrorCode::Io, "unknown example kind '" + std::string(s) + "'");
}

struct Example {
  std::vector<int> tokens;
  int target = -1;
  ExampleKind kind = ExampleKind::OneHopFirst;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> test_ood;
  VocabLayout layout;
  DatasetSpec spec;
};

inline VocabLayout build_layout(const DatasetSpec& spec) {
  spec.validate();
  VocabLayout l;
  l.n = spec.n_entities;
  l.c = spec.complexity;
  auto range = [](int first, int count) {
    std::vector<int> v(static_cast<std::size_t>(count));
    std::iota(v.begin(), v.end(), first);
    return v;
  };
  l.subjects = range(0, l.n);
  l.bridges = range(l.first_bridge(), l.c * l.n);
  l.objects = range(l.first_object(), l.n);
  l.rel1 = range(l.first_rel1(), l.c);
  l.rel2 = {l.rel2_token()};
  l.in_vocab = l.subjects;
  l.in_vocab.insert(l.in_vocab.end(), l.bridges.begin(), l.bridges.end());
  l.in_vocab.insert(l.in_vocab.end(), l.rel1.begin(), l.rel1.end());
  l.in_vocab.insert(l.in_vocab.end(), l.rel2.begin(), l.rel2.end());
  l.out_vocab = l.bridges;
  l.out_vocab.insert(l.out_vocab.end(), l.objects.begin(), l.objects.end());
  return l;
}

/// First hop on 1-based indices: subject i under relation j lands on bridge (j-1)N + i.
inline int g1(int i, int j, int n, int c) {
  if (i < 1 || i > n || j < 1 || j > c)
    fail(ErrorCode::IndexOutOfRange, "g1 index (" + std::to_string(i) + ", " + std::to_string(j) + ")");
  return (j - 1) * n + i;
}

/// Second hop on 1-based indices. Bridge k = (j-1)N + i maps to object ((i + j - 2) mod N) + 1,
/// so each slice is a cyclic shift of the one before it.
inline int g2(int k, int n, int c) {
  if (k < 1 || k > c * n) fail(ErrorCode::IndexOutOfRange, "g2 index " + std::to_string(k));
  const int i = (k - 1) % n + 1;
  const int j = (k - 1) / n + 1;
  return ((i + j - 2) % n) + 1;
}

inline int g1(int i, int j, const DatasetSpec& s) { return g1(i, j, s.n_entities, s.complexity); }
inline int g2(int k, const DatasetSpec& s) { return g2(k, s.n_entities, s.complexity); }

/// Bridge token a query passes through: the bridge itself for ZeroHop/OneHopSecond,
/// g1(subject, relation) otherwise.
inline int latent_bridge(const Example& ex, const VocabLayout& l) {
  switch (ex.kind) {
    case ExampleKind::ZeroHop:
    case ExampleKind::OneHopSecond: return ex.tokens.at(0);
    case ExampleKind::OneHopFirst:
    case ExampleKind::TwoHop: {
      const int i = ex.tokens.at(0) + 1;
      const int j = ex.tokens.at(1) - l.first_rel1() + 1;
      return l.first_bridge() + g1(i, j, l.n, l.c) - 1;
    }
  }
  return -1;
}

inline Dataset generate(const DatasetSpec& spec) {
  Dataset ds;
  ds.spec = spec;
  ds.layout = build_layout(spec);
  const auto& l = ds.layout;
  const int n = l.n;
  const int c = l.c;

  auto bridge_token = [&](int k) { return l.first_bridge() + k - 1; };
  auto object_token = [&](int o) { return l.first_object() + o - 1; };
  auto rel1_token = [&](int j) { return l.first_rel1() + j - 1; };

  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= c; ++j)
      ds.train.push_back({{i - 1, rel1_token(j)}, bridge_token(g1(i, j, n, c)), ExampleKind::OneHopFirst});
  for (int k = 1; k <= c * n; ++k)
    ds.train.push_back({{bridge_token(k), l.rel2_token()}, object_token(g2(k, n, c)), ExampleKind::OneHopSecond});
  if (spec.include_identity)
    for (int k = 1; k <= c * n; ++k)
      ds.train.push_back({{bridge_token(k)}, bridge_token(k), ExampleKind::ZeroHop});

  std::vector<char> bridge_in_train(static_cast<std::size_t>(c * n) + 1, 0);
  if (spec.include_two_hop_in_train) {
    std::vector<int> ks(static_cast<std::size_t>(c * n));
    std::iota(ks.begin(), ks.end(), 1);
    Rng rng(spec.seed);
    std::shuffle(ks.begin(), ks.end(), rng);
    auto take = static_cast<int>(std::lround(spec.two_hop_train_fraction * c * n));
    take = std::clamp(take, 1, c * n - 1);
    for (int m = 0; m < take; ++m) bridge_in_train[static_cast<std::size_t>(ks[static_cast<std::size_t>(m)])] = 1;
  }

  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= c; ++j) {
      const int k = g1(i, j, n, c);
      Example ex{{i - 1, rel1_token(j), l.rel2_token()}, object_token(g2(k, n, c)), ExampleKind::TwoHop};
      if (bridge_in_train[static_cast<std::size_t>(k)])
        ds.train.push_back(std::move(ex));
      else
        ds.test_ood.push_back(std::move(ex));
    }
  }
  return ds;
}

/// Max over subjects of the number of distinct objects reachable through any
/// first-hop relation followed by the second hop, read off the training rows.
inline int complexity_of(const Dataset& ds) {
  std::vector<std::vector<int>> first(static_cast<std::size_t>(ds.layout.vocab_size()));
  std::vector<std::vector<int>> second(static_cast<std::size_t>(ds.layout.vocab_size()));
  for (const auto& ex : ds.train) {
    if (ex.kind == ExampleKind::OneHopFirst)
      first.at(static_cast<std::size_t>(ex.tokens.at(0))).push_back(ex.target);
    else if (ex.kind == ExampleKind::OneHopSecond)
      second.at(static_cast<std::size_t>(ex.tokens.at(0))).push_back(ex.target);
  }
  std::size_t best = 0;
  for (int s : ds.layout.subjects) {
    std::set<int> reach;
    for (int b : first[static_cast<std::size_t>(s)])
      for (int o : second.at(static_cast<std::size_t>(b))) reach.insert(o);
    best = std::max(best, reach.size());
  }
  return static_cast<int>(best);
}

// --- JSON ------------------------------------------------------------------

using Json = nlohmann::ordered_json;

inline Json to_json(const DatasetSpec& s) {
  Json j;
  j["n_entities"] = s.n_entities;
  j["complexity"] = s.complexity;
  j["include_identity"] = s.include_identity;
  j["include_two_hop_in_train"] = s.include_two_hop_in_train;
  j["two_hop_train_fraction"] = s.two_hop_train_fraction;
  j["seed"] = s.seed;
  return j;
}

inline DatasetSpec spec_from_json(const Json& j) {
  DatasetSpec s;
  s.n_entities = j.value("n_entities", s.n_entities);
  s.complexity = j.value("complexity", s.complexity);
  s.include_identity = j.value("include_identity", s.include_identity);
  s.include_two_hop_in_train = j.value("include_two_hop_in_train", s.include_two_hop_in_train);
  s.two_hop_train_fraction = j.value("two_hop_train_fraction", s.two_hop_train_fraction);
  s.seed = j.value("seed", s.seed);
  return s;
}

inline Json to_json(const VocabLayout& l) {
  Json j;
  j["n"] = l.n;
  j["c"] = l.c;
  j["subjects"] = l.subjects;
  j["bridges"] = l.bridges;
  j["objects"] = l.objects;
  j["rel1"] = l.rel1;
  j["rel2"] = l.rel2;
  j["in_vocab"] = l.in_vocab;
  j["out_vocab"] = l.out_vocab;
  return j;
}

inline Json to_json(const Example& e) {
  Json j;
  j["tokens"] = e.tokens;
  j["target"] = e.target;
  j["kind"] = std::string(to_string(e.kind));
  return j;
}

inline Example example_from_json(const Json& j) {
  Example e;
  e.tokens = j.at("tokens").get<std::vector<int>>();
  e.target = j.at("target").get<int>();
  e.kind = example_kind_from_string(j.at("kind").get<std::string>());
  return e;
}

inline Json to_json(const Dataset& ds) {
  Json j;
  j["spec"] = to_json(ds.spec);
  j["layout"] = to_json(ds.layout);
  Json train = Json::array();
  for (const auto& e : ds.train) train.push_back(to_json(e));
  j["train"] = std::move(train);
  Json test = Json::array();
  for (const auto& e : ds.test_ood) test.push_back(to_json(e));
  j["test_ood"] = std::move(test);
  return j;
}

/// Parses a dataset document. The layout is rebuilt from the DatasetSpec and must
/// agree with the stored one; every example is checked against it.
inline Dataset dataset_from_json(const Json& j) {
  Dataset ds;
  try {
    ds.spec = spec_from_json(j.at("spec"));
    ds.layout = build_layout(ds.spec);
    const auto& lj = j.at("layout");
    if (lj.at("in_vocab").get<std::vector<int>>() != ds.layout.in_vocab ||
        lj.at("out_vocab").get<std::vector<int>>() != ds.layout.out_vocab)
      fail(ErrorCode::Io, "stored layout disagrees with spec");
    for (const auto& e : j.at("train")) ds.train.push_back(example_from_json(e));
    for (const auto& e : j.at("test_ood")) ds.test_ood.push_back(example_from_json(e));
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::Io, std::string("malformed dataset document: ") + ex.what());
  }
  const int v = ds.layout.vocab_size();
  for (const auto* split : {&ds.train, &ds.test_ood})
    for (const auto& e : *split) {
      if (e.tokens.empty() || e.tokens.size() > 3) fail(ErrorCode::Io, "example with bad length");
      for (int t : e.tokens)
        if (t < 0 || t >= v) fail(ErrorCode::Io, "token id out of range");
      if (!ds.layout.out_contains(e.target)) fail(ErrorCode::Io, "target outside output vocabulary");
    }
  return ds;
}

}  // namespace twohop::taskgen
