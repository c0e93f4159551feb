#pragma once

// Synthetic catalogs and interaction logs with a known successor rule.

#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "lancer/catalog.hpp"
#include "lancer/rng.hpp"

namespace lancer::synthetic {

/// Pronounceable pseudo-word unique to k.
inline std::string word(std::size_t k, const std::string& stem = "") {
  static const char* syl[] = {"ka", "lo", "mi", "ne", "ru", "sa", "ti", "vo", "ze", "pa",
                              "do", "fi", "gu", "ho", "je", "bu", "wa", "yo", "xi", "qe"};
  std::string w = stem;
  do {
    w += syl[k % 20];
    k /= 20;
  } while (k);
  return w;
}

inline std::string item_id(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "item_%03zu", k);
  return buf;
}

/// n items with titles "<name> <genre>", pairwise-distinct token sets, and
/// content that repeats the title followed by a genre line and a short blurb.
inline ItemCatalog catalog(std::size_t n, std::uint64_t seed) {
  static const char* genres[] = {"drama", "comedy", "thriller", "western", "romance"};
  static const char* blurb[] = {"a", "story", "about", "the", "old", "city", "river", "friends", "night", "journey", "home"};
  Rng rng(seed);
  ItemCatalog cat;
  for (std::size_t k = 0; k < n; ++k) {
    const std::string name = word(k + 20, "");
    const std::string genre = genres[k % 5];
    std::string content = name + " " + genre + " . genre : " + genre + " . ";
    const std::size_t len = 3 + rng.below(4);
    for (std::size_t i = 0; i < len; ++i) content += std::string(blurb[rng.below(11)]) + " ";
    content += "with " + name + " .";
    cat.add({item_id(k), name + " " + genre, content});
  }
  return cat;
}

/// One user's chronological item indices.
struct UserLog {
  std::string user_id;
  std::vector<std::size_t> items;
};

/// Users walk item k -> k+1 mod n with probability `rule`, otherwise jump
/// uniformly. Lengths are drawn from [min_len, max_len].
inline std::vector<UserLog> successor_logs(std::size_t users, std::size_t n_items, double rule, std::size_t min_len,
                                           std::size_t max_len, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<UserLog> out;
  for (std::size_t u = 0; u < users; ++u) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "user_%04zu", u);
    UserLog log{buf, {}};
    const std::size_t len = min_len + rng.below(max_len - min_len + 1);
    std::size_t cur = rng.below(n_items);
    for (std::size_t i = 0; i < len; ++i) {
      log.items.push_back(cur);
      cur = rng.uniform() < rule ? (cur + 1) % n_items : rng.below(n_items);
    }
    out.push_back(std::move(log));
  }
  return out;
}

/// "user<TAB>item<TAB>timestamp" rows, one per interaction.
inline std::string interactions_tsv(const std::vector<UserLog>& logs) {
  std::ostringstream os;
  for (std::size_t u = 0; u < logs.size(); ++u)
    for (std::size_t i = 0; i < logs[u].items.size(); ++i)
      os << logs[u].user_id << '\t' << item_id(logs[u].items[i]) << '\t' << 1700000000 + 3600 * i + u << '\n';
  return os.str();
}

}  // namespace lancer::synthetic
