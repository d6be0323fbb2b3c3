#include "twohop/taskgen.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <set>

using namespace twohop;
using namespace twohop::taskgen;

namespace {

DatasetSpec spec(int n, int c, bool identity = true) {
  DatasetSpec s;
  s.n_entities = n;
  s.complexity = c;
  s.include_identity = identity;
  return s;
}

}  // namespace

TEST(Layout, SmallestInstanceVocabularySizes) {
  const auto l = build_layout(spec(2, 1));
  EXPECT_EQ(l.in_vocab.size(), 6u);
  EXPECT_EQ(l.out_vocab.size(), 4u);
}

TEST(Layout, BridgeSlicesAndRelations) {
  const auto l = build_layout(spec(3, 2));
  ASSERT_EQ(l.bridges.size(), 6u);
  EXPECT_EQ(l.rel1.size(), 2u);
  EXPECT_EQ(l.rel2.size(), 1u);
  // slice j holds bridge indices (j-1)N+1 .. jN
  EXPECT_EQ(l.bridges.front(), l.first_bridge());
  EXPECT_EQ(l.first_bridge() + g1(3, 1, 3, 2) - 1, l.bridges[2]);
  EXPECT_EQ(l.first_bridge() + g1(1, 2, 3, 2) - 1, l.bridges[3]);
}

TEST(Layout, TokenOrderIsSubjectsBridgesObjectsRelations) {
  const auto l = build_layout(spec(4, 3));
  int expect = 0;
  for (const auto* group : {&l.subjects, &l.bridges, &l.objects, &l.rel1, &l.rel2})
    for (int t : *group) EXPECT_EQ(t, expect++);
  EXPECT_EQ(expect, l.vocab_size());
}

TEST(Layout, SingleEntityIsInvalid) {
  EXPECT_THROW(build_layout(spec(1, 1)), Error);
  try {
    generate(spec(1, 1));
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidSpec);
  }
}

TEST(Layout, IndexLookupsRejectForeignTokens) {
  const auto l = build_layout(spec(3, 1));
  EXPECT_THROW(l.in_index(l.objects[0]), Error);
  EXPECT_THROW(l.out_index(l.subjects[0]), Error);
  EXPECT_THROW(l.out_index(l.rel2_token()), Error);
}

TEST(HopMaps, FirstHopExamples) {
  EXPECT_EQ(g1(2, 2, 3, 2), 5);
  for (int n : {2, 5, 9}) EXPECT_EQ(g1(1, 1, n, 3), 1);
  EXPECT_EQ(g1(7, 4, 7, 4), 28);
  EXPECT_THROW(g1(0, 1, 3, 1), Error);
  EXPECT_THROW(g1(1, 3, 3, 2), Error);
}

TEST(HopMaps, SecondHopExamples) {
  EXPECT_EQ(g2(5, 3, 2), 3);
  for (int i = 1; i <= 6; ++i) EXPECT_EQ(g2(i, 6, 1), i);
  EXPECT_EQ(g2(9, 9, 3), 9);
  EXPECT_THROW(g2(0, 3, 1), Error);
  EXPECT_THROW(g2(7, 3, 2), Error);
}

TEST(HopMaps, FirstHopInjectiveAndCompositionBijectivePerRelation) {
  for (int n = 1; n <= 64; n += (n < 8 ? 1 : 9))
    for (int c = 1; c <= 64; c += (c < 8 ? 1 : 11)) {
      std::set<int> bridges;
      for (int i = 1; i <= n; ++i)
        for (int j = 1; j <= c; ++j) bridges.insert(g1(i, j, n, c));
      ASSERT_EQ(static_cast<int>(bridges.size()), n * c) << n << "," << c;
      for (int j = 1; j <= c; ++j) {
        std::set<int> objects;
        for (int i = 1; i <= n; ++i) objects.insert(g2(g1(i, j, n, c), n, c));
        ASSERT_EQ(static_cast<int>(objects.size()), n) << n << "," << c << "," << j;
      }
    }
}

TEST(Generate, CountsWithIdentity) {
  const auto ds = generate(spec(20, 1));
  EXPECT_EQ(ds.train.size(), 60u);
  EXPECT_EQ(ds.test_ood.size(), 20u);
}

TEST(Generate, CountsWithoutIdentity) { EXPECT_EQ(generate(spec(20, 1, false)).train.size(), 40u); }

TEST(Generate, OodQueriesEnumerateEveryComposition) { EXPECT_EQ(generate(spec(5, 3)).test_ood.size(), 15u); }

TEST(Generate, ComplexityExamples) {
  EXPECT_EQ(complexity_of(generate(spec(4, 3))), 3);
  EXPECT_EQ(complexity_of(generate(spec(4, 1))), 1);
  Dataset empty;
  empty.layout = build_layout(spec(4, 1));
  EXPECT_EQ(complexity_of(empty), 0);
}

TEST(Generate, ComplexityInvariantOverFamily) {
  for (int n = 2; n <= 16; ++n)
    for (int c = 1; c <= 8; ++c) ASSERT_EQ(complexity_of(generate(spec(n, c))), std::min(n, c)) << n << "," << c;
}

TEST(Generate, DeterministicSerialization) {
  auto s = spec(7, 3);
  s.include_two_hop_in_train = true;
  s.seed = 42;
  EXPECT_EQ(to_json(generate(s)).dump(), to_json(generate(s)).dump());
}

TEST(Generate, OodBridgesAppearOnlyInSingleHopRows) {
  for (int c : {1, 2, 4}) {
    const auto ds = generate(spec(6, c));
    std::set<int> ood_bridges;
    for (const auto& q : ds.test_ood) ood_bridges.insert(latent_bridge(q, ds.layout));
    for (const auto& ex : ds.train) {
      EXPECT_NE(ex.kind, ExampleKind::TwoHop);
      if (ex.kind == ExampleKind::TwoHop) {
        EXPECT_EQ(ood_bridges.count(latent_bridge(ex, ds.layout)), 0u);
      }
    }
  }
}

TEST(Generate, TwoHopTrainSplitKeepsBridgesDisjoint) {
  auto s = spec(10, 2);
  s.include_two_hop_in_train = true;
  s.seed = 3;
  const auto ds = generate(s);
  std::set<int> train_bridges, test_bridges;
  for (const auto& ex : ds.train)
    if (ex.kind == ExampleKind::TwoHop) train_bridges.insert(latent_bridge(ex, ds.layout));
  for (const auto& q : ds.test_ood) test_bridges.insert(latent_bridge(q, ds.layout));
  EXPECT_EQ(train_bridges.size(), 10u);
  EXPECT_EQ(test_bridges.size(), 10u);
  for (int b : train_bridges) EXPECT_EQ(test_bridges.count(b), 0u);
}

TEST(Generate, TargetsFollowHopMaps) {
  const auto ds = generate(spec(5, 2));
  const auto& l = ds.layout;
  for (const auto& q : ds.test_ood) {
    const int k = latent_bridge(q, l) - l.first_bridge() + 1;
    EXPECT_EQ(q.target, l.first_object() + g2(k, l.n, l.c) - 1);
  }
}

TEST(Json, RoundTrip) {
  auto s = spec(4, 2, false);
  s.seed = 9;
  const auto ds = generate(s);
  const auto back = dataset_from_json(to_json(ds));
  EXPECT_EQ(back.spec, ds.spec);
  EXPECT_EQ(back.layout, ds.layout);
  EXPECT_EQ(back.train, ds.train);
  EXPECT_EQ(back.test_ood, ds.test_ood);
}

TEST(Json, MalformedDocumentsAreIoErrors) {
  auto j = to_json(generate(spec(3, 1)));
  j["train"][0]["tokens"] = {99};
  try {
    dataset_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Io);
  }
  Json missing;
  missing["spec"] = to_json(spec(3, 1));
  EXPECT_THROW(dataset_from_json(missing), Error);
}
