#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "lancer/dataio.hpp"
#include "lancer/evalkit.hpp"
#include "lancer/rng.hpp"

using namespace lancer;

TEST(Metrics, RecallAtK) {
  std::vector<std::string> r{"a", "b", "c", "d", "e", "f"};
  EXPECT_EQ(recall_at_k(r, "a", 5), 1.0);
  EXPECT_EQ(recall_at_k(r, "f", 5), 0.0);
  EXPECT_EQ(recall_at_k(r, "f", 10), 1.0);
  EXPECT_EQ(recall_at_k(r, "zz", 10), 0.0);
  EXPECT_THROW(recall_at_k(r, "a", 0), Error);
}

TEST(Metrics, NdcgAtK) {
  std::vector<std::string> r{"a", "b", "c"};
  EXPECT_DOUBLE_EQ(ndcg_at_k(r, "a", 5), 1.0);
  EXPECT_NEAR(ndcg_at_k(r, "b", 5), 0.6309, 1e-4);
  EXPECT_DOUBLE_EQ(ndcg_at_k(r, "c", 5), 0.5);
  EXPECT_EQ(ndcg_at_k(r, "c", 2), 0.0);
  EXPECT_EQ(ndcg_at_k(r, "q", 5), 0.0);
}

TEST(Evaluate, SingleUserAtRankOne) {
  auto rep = evaluate_rankings({{"u", "x"}}, [](std::size_t) { return std::vector<std::string>{"x", "y"}; });
  EXPECT_EQ(rep.users, 1u);
  EXPECT_EQ(rep.recall5, 1.0);
  EXPECT_EQ(rep.recall10, 1.0);
  EXPECT_EQ(rep.ndcg5, 1.0);
  EXPECT_EQ(rep.ndcg10, 1.0);
}

TEST(Evaluate, MeansAndErrors) {
  std::vector<EvalCase> cases{{"u1", "a"}, {"u2", "a"}, {"u3", "a"}};
  auto rep = evaluate_rankings(cases, [](std::size_t i) -> std::vector<std::string> {
    if (i == 0) return {"a"};
    if (i == 1) return {"b", "c", "a"};
    fail(ErrorKind::degenerate, "zero vector");
  });
  EXPECT_EQ(rep.errors, 1u);
  EXPECT_DOUBLE_EQ(rep.ndcg5, (1.0 + 0.5 + 0.0) / 3.0);
  EXPECT_DOUBLE_EQ(rep.recall5, 2.0 / 3.0);
  EXPECT_TRUE(rep.detail[2].error);

  auto two = evaluate_rankings({{"u1", "a"}, {"u2", "a"}}, [](std::size_t i) {
    return i == 0 ? std::vector<std::string>{"a"} : std::vector<std::string>{"b", "c", "a"};
  });
  EXPECT_DOUBLE_EQ(two.ndcg5, 0.75);
  EXPECT_THROW(evaluate_rankings({}, [](std::size_t) { return std::vector<std::string>{}; }), Error);
}

TEST(Evaluate, MonotoneAndDetailRecomputes) {
  Rng rng(3);
  std::vector<std::string> items;
  for (int i = 0; i < 40; ++i) items.push_back("i" + std::to_string(i));
  std::vector<EvalCase> cases;
  std::vector<std::vector<std::string>> rankings;
  for (int u = 0; u < 30; ++u) {
    auto r = items;
    rng.shuffle(r.begin(), r.end());
    r.resize(15);
    rankings.push_back(r);
    cases.push_back({"u" + std::to_string(u), items[rng.below(items.size())]});
  }
  auto rep = evaluate_rankings(cases, [&](std::size_t i) { return rankings[i]; });
  EXPECT_GE(rep.recall10, rep.recall5);
  EXPECT_GE(rep.ndcg10, rep.ndcg5);
  for (const auto& u : rep.detail) {
    EXPECT_GE(u.recall10, u.recall5);
    EXPECT_GE(u.ndcg10, u.ndcg5);
    EXPECT_LE(u.ndcg5, u.recall5);
  }

  // Independent pass over the dumped detail table.
  std::istringstream is(rep.detail_tsv());
  std::string line;
  std::getline(is, line);
  double r5 = 0, n10 = 0;
  int rows = 0;
  while (std::getline(is, line)) {
    auto f = split(line, '\t');
    auto ranked = split(f[7], ',');
    for (std::size_t k = 0; k < ranked.size(); ++k)
      if (ranked[k] == f[1]) {
        if (k < 5) r5 += 1;
        if (k < 10) n10 += 1.0 / std::log2(static_cast<double>(k) + 2.0);
      }
    ++rows;
  }
  EXPECT_EQ(rows, 30);
  EXPECT_NEAR(r5 / 30, rep.recall5, 1e-12);
  EXPECT_NEAR(n10 / 30, rep.ndcg10, 1e-12);
}

TEST(Evaluate, ReportJsonFields) {
  auto rep = evaluate_rankings({{"u", "x"}}, [](std::size_t) { return std::vector<std::string>{"y", "x"}; });
  rep.seed = 9;
  rep.checkpoint_hash = "abc";
  auto j = nlohmann::json::parse(rep.json());
  for (const char* k : {"users", "errors", "recall@5", "recall@10", "ndcg@5", "ndcg@10", "seed", "checkpoint_hash"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["checkpoint_hash"], "abc");
}
