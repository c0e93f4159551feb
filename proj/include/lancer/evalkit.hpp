#pragma once

// Recall/NDCG at K and the all-ranking evaluation loop.

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lancer/error.hpp"

namespace lancer {

/// 1-based rank of target among the first k entries, 0 when absent.
inline std::size_t rank_within(const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
  for (std::size_t i = 0; i < ranked.size() && i < k; ++i)
    if (ranked[i] == target) return i + 1;
  return 0;
}

inline double recall_at_k(const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
  if (k == 0) fail(ErrorKind::config, "K must be >= 1");
  return rank_within(ranked, target, k) ? 1.0 : 0.0;
}

/// Single relevant item, so the ideal DCG is 1.
inline double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, std::size_t k) {
  if (k == 0) fail(ErrorKind::config, "K must be >= 1");
  const std::size_t r = rank_within(ranked, target, k);
  return r ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

struct UserResult {
  std::string user_id;
  std::string target;
  std::vector<std::string> ranked;
  bool error = false;
  std::string error_message;
  double recall5 = 0, recall10 = 0, ndcg5 = 0, ndcg10 = 0;
};

struct MetricsReport {
  std::size_t users = 0;
  std::size_t errors = 0;
  double recall5 = 0, recall10 = 0, ndcg5 = 0, ndcg10 = 0;
  std::uint64_t seed = 0;
  std::string checkpoint_hash;
  std::vector<UserResult> detail;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  std::string json() const {
    nlohmann::ordered_json j;
    j["users"] = users;
    j["errors"] = errors;
    j["recall@5"] = recall5;
    j["recall@10"] = recall10;
    j["ndcg@5"] = ndcg5;
    j["ndcg@10"] = ndcg10;
    j["seed"] = seed;
    j["checkpoint_hash"] = checkpoint_hash;
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    return j.dump(2) + "\n";
  }

  /// user, target, error flag, metrics, then the ranked ids comma-joined.
  std::string detail_tsv() const {
    std::ostringstream os;
    os.precision(17);
    os << "user_id\ttarget\terror\trecall@5\trecall@10\tndcg@5\tndcg@10\tranked\n";
    for (const auto& u : detail) {
      os << u.user_id << '\t' << u.target << '\t' << (u.error ? 1 : 0) << '\t' << u.recall5 << '\t' << u.recall10 << '\t'
         << u.ndcg5 << '\t' << u.ndcg10 << '\t';
      for (std::size_t i = 0; i < u.ranked.size(); ++i) os << (i ? "," : "") << u.ranked[i];
      os << '\n';
    }
    return os.str();
  }
};

struct EvalCase {
  std::string user_id;
  std::string target;
};

/// Scores every case with `rank_fn(i)` (a ranked id list of at least 10
/// entries when the catalog allows). A throwing rank_fn scores 0 and is
/// counted in `errors`.
inline MetricsReport evaluate_rankings(const std::vector<EvalCase>& cases,
                                       const std::function<std::vector<std::string>(std::size_t)>& rank_fn) {
  if (cases.empty()) fail(ErrorKind::empty, "nothing to evaluate");
  MetricsReport rep;
  rep.users = cases.size();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    UserResult u{cases[i].user_id, cases[i].target, {}, false, "", 0, 0, 0, 0};
    try {
      u.ranked = rank_fn(i);
      u.recall5 = recall_at_k(u.ranked, u.target, 5);
      u.recall10 = recall_at_k(u.ranked, u.target, 10);
      u.ndcg5 = ndcg_at_k(u.ranked, u.target, 5);
      u.ndcg10 = ndcg_at_k(u.ranked, u.target, 10);
    } catch (const Error& e) {
      u.error = true;
      u.error_message = e.what();
      ++rep.errors;
    }
    rep.recall5 += u.recall5;
    rep.recall10 += u.recall10;
    rep.ndcg5 += u.ndcg5;
    rep.ndcg10 += u.ndcg10;
    rep.detail.push_back(std::move(u));
  }
  const double n = static_cast<double>(cases.size());
  rep.recall5 /= n;
  rep.recall10 /= n;
  rep.ndcg5 /= n;
  rep.ndcg10 /= n;
  return rep;
}

}  // namespace lancer
