#pragma once

// Interaction/catalog ingestion, the 5..10 length rule, leave-one-out splits,
// context rendering and dataset statistics.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lancer/catalog.hpp"
#include "lancer/hash.hpp"
#include "lancer/textproc.hpp"

namespace lancer {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::io, "cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::io, "cannot write " + path);
  f << text;
  if (!f) fail(ErrorKind::io, "failed writing " + path);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

/// One JSON object per line: item_id, title, optional content.
inline ItemCatalog parse_catalog(const std::string& text, const std::string& label = "catalog") {
  ItemCatalog cat;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = label + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::parse, where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object() || !j.contains("item_id") || !j.contains("title"))
      fail(ErrorKind::parse, where + "record needs item_id and title");
    ItemRecord rec;
    const auto& id = j["item_id"];
    if (id.is_string()) rec.item_id = id.get<std::string>();
    else if (id.is_number_integer()) rec.item_id = std::to_string(id.get<long long>());
    else fail(ErrorKind::parse, where + "item_id must be a string or integer");
    if (!j["title"].is_string()) fail(ErrorKind::parse, where + "title must be a string");
    rec.title = j["title"].get<std::string>();
    if (j.contains("content")) {
      if (!j["content"].is_string()) fail(ErrorKind::parse, where + "content must be a string");
      rec.content = j["content"].get<std::string>();
    }
    try {
      cat.add(std::move(rec));
    } catch (const Error& e) {
      fail(e.kind(), where + e.what());
    }
  }
  return cat;
}

inline std::string catalog_jsonl(const ItemCatalog& cat) {
  std::string out;
  for (const auto& it : cat.items()) {
    nlohmann::ordered_json j;
    j["item_id"] = it.item_id;
    j["title"] = it.title;
    j["content"] = it.content;
    out += j.dump() + "\n";
  }
  return out;
}

/// A user's chronological interactions as item indices.
struct UserSequence {
  std::string user_id;
  std::vector<std::size_t> items;
};

/// "user<TAB>item<TAB>timestamp" rows grouped per user (users in order of
/// first appearance), stably sorted by timestamp, consecutive duplicates of
/// the same (item, timestamp) collapsed.
inline std::vector<UserSequence> parse_interactions(const std::string& text, const ItemCatalog& cat,
                                                    const std::string& label = "interactions") {
  struct Row {
    std::string item;
    long long ts;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> by_user;
  std::set<std::string> dangling;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split(line, '\t');
    const std::string where = label + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 3 || f[0].empty() || f[1].empty())
      fail(ErrorKind::parse, where + "expected user<TAB>item<TAB>timestamp");
    long long ts = 0;
    std::size_t used = 0;
    try {
      ts = std::stoll(f[2], &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != f[2].size()) fail(ErrorKind::parse, where + "timestamp '" + f[2] + "' is not an integer");
    if (!cat.contains(f[1])) dangling.insert(f[1]);
    auto [it, fresh] = by_user.try_emplace(f[0]);
    if (fresh) order.push_back(f[0]);
    it->second.push_back({f[1], ts});
  }
  if (!dangling.empty()) {
    std::string ids;
    for (const auto& d : dangling) ids += (ids.empty() ? "" : ", ") + d;
    fail(ErrorKind::data, "interactions reference unknown items: " + ids);
  }
  std::vector<UserSequence> out;
  for (const auto& user : order) {
    auto rows = by_user[user];
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; });
    UserSequence seq{user, {}};
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i && rows[i].item == rows[i - 1].item && rows[i].ts == rows[i - 1].ts) continue;
      seq.items.push_back(cat.index_of(rows[i].item));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

struct RawDataset {
  ItemCatalog catalog;
  std::vector<UserSequence> sequences;
};

inline RawDataset load_dataset(const std::string& interactions_path, const std::string& catalog_path) {
  RawDataset d;
  d.catalog = parse_catalog(read_file(catalog_path), catalog_path);
  d.sequences = parse_interactions(read_file(interactions_path), d.catalog, interactions_path);
  return d;
}

/// Drops sequences shorter than min_len, keeps the last max_len of longer ones.
inline std::vector<UserSequence> apply_length_rules(const std::vector<UserSequence>& seqs, std::size_t min_len = 5,
                                                    std::size_t max_len = 10) {
  std::vector<UserSequence> out;
  for (const auto& s : seqs) {
    if (s.items.size() < min_len) continue;
    UserSequence t{s.user_id, {}};
    const std::size_t skip = s.items.size() > max_len ? s.items.size() - max_len : 0;
    t.items.assign(s.items.begin() + static_cast<std::ptrdiff_t>(skip), s.items.end());
    out.push_back(std::move(t));
  }
  return out;
}

/// Leave-one-out markers: last item is the test target, the one before it
/// the validation target, everything earlier the training region.
struct SplitSequence {
  std::string user_id;
  std::vector<std::size_t> items;

  std::size_t test_target() const { return items.back(); }
  std::size_t valid_target() const { return items[items.size() - 2]; }
  std::vector<std::size_t> train_region() const { return {items.begin(), items.end() - 2}; }
  /// History the test target is predicted from.
  std::vector<std::size_t> test_history() const { return {items.begin(), items.end() - 1}; }
  std::vector<std::size_t> valid_history() const { return {items.begin(), items.end() - 2}; }

  /// (prefix, next) for every position k >= 1 of the training region.
  std::vector<std::pair<std::vector<std::size_t>, std::size_t>> training_pairs() const {
    std::vector<std::pair<std::vector<std::size_t>, std::size_t>> out;
    const auto region = train_region();
    for (std::size_t k = 1; k < region.size(); ++k)
      out.emplace_back(std::vector<std::size_t>(region.begin(), region.begin() + static_cast<std::ptrdiff_t>(k)), region[k]);
    return out;
  }
};

inline SplitSequence split_leave_one_out(const UserSequence& seq) {
  if (seq.items.size() < 5)
    fail(ErrorKind::data, "user " + seq.user_id + " has " + std::to_string(seq.items.size()) + " items; split needs >= 5");
  return {seq.user_id, seq.items};
}

inline const char* default_instruction = "a user watched the following items :";
inline const char* default_cue = "next :";

/// Template words, for vocabulary building.
inline std::string template_text() { return std::string(default_instruction) + " " + default_cue; }

struct RenderedContext {
  TokenSeq tokens;
  std::vector<std::size_t> item_starts;  // offset of each kept item's segment
  std::size_t items_kept = 0;
  std::size_t items_dropped = 0;
};

/// BOS, instruction, each title (at most 32 tokens) followed by SEP, cue.
/// Oldest items are dropped until the whole fits in `budget` tokens.
inline RenderedContext render_context(const std::vector<std::size_t>& history, const ItemCatalog& cat, const Vocab& vocab,
                                      std::size_t budget = 512) {
  if (history.empty()) fail(ErrorKind::empty, "cannot render an empty history");
  constexpr std::size_t unlimited = static_cast<std::size_t>(-1);
  const TokenSeq instr = vocab.encode(default_instruction, unlimited);
  const TokenSeq cue = vocab.encode(default_cue, unlimited);
  std::vector<TokenSeq> segs;
  for (std::size_t i : history) {
    TokenSeq s = vocab.encode(cat[i].title, 32);
    s.push_back(special::sep);
    segs.push_back(std::move(s));
  }
  const std::size_t fixed = 1 + instr.size() + cue.size();
  std::size_t first = 0, total = fixed;
  for (const auto& s : segs) total += s.size();
  while (total > budget && first < segs.size()) total -= segs[first++].size();
  if (first == segs.size())
    fail(ErrorKind::budget, "context budget " + std::to_string(budget) + " cannot hold even the newest item");
  RenderedContext r;
  r.tokens.push_back(special::bos);
  r.tokens.insert(r.tokens.end(), instr.begin(), instr.end());
  for (std::size_t i = first; i < segs.size(); ++i) {
    r.item_starts.push_back(r.tokens.size());
    r.tokens.insert(r.tokens.end(), segs[i].begin(), segs[i].end());
  }
  r.tokens.insert(r.tokens.end(), cue.begin(), cue.end());
  r.items_kept = segs.size() - first;
  r.items_dropped = first;
  return r;
}

struct DatasetStats {
  std::size_t users = 0, items = 0, interactions = 0;

  double sparsity() const {
    return 1.0 - static_cast<double>(interactions) / (static_cast<double>(users) * static_cast<double>(items));
  }
  double avg_per_user() const { return static_cast<double>(interactions) / static_cast<double>(users); }
  double avg_per_item() const { return static_cast<double>(interactions) / static_cast<double>(items); }

  static std::string two_decimals(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
  }
  std::string sparsity_text() const { return two_decimals(100.0 * sparsity()) + "%"; }
  std::string avg_per_user_text() const { return two_decimals(avg_per_user()); }
  std::string avg_per_item_text() const { return two_decimals(avg_per_item()); }

  std::string json() const {
    nlohmann::ordered_json j;
    j["users"] = users;
    j["items"] = items;
    j["interactions"] = interactions;
    j["sparsity"] = sparsity_text();
    j["avg_per_user"] = avg_per_user_text();
    j["avg_per_item"] = avg_per_item_text();
    return j.dump();
  }
};

inline DatasetStats dataset_stats(std::size_t users, std::size_t items, std::size_t interactions) {
  if (users == 0 || items == 0) fail(ErrorKind::empty, "statistics need at least one user and one item");
  return {users, items, interactions};
}

/// Counts distinct items that occur in the sequences, as the processed-table
/// columns do.
inline DatasetStats dataset_stats(const std::vector<UserSequence>& seqs) {
  std::set<std::size_t> items;
  std::size_t n = 0;
  for (const auto& s : seqs) {
    n += s.items.size();
    items.insert(s.items.begin(), s.items.end());
  }
  return dataset_stats(seqs.size(), items.size(), n);
}

/// Processed dataset container: versioned header, one row per user with the
/// split markers, and a trailing checksum over everything above it.
struct ProcessedDataset {
  std::vector<SplitSequence> users;
  std::string config_hash;

  std::string serialize(const ItemCatalog& cat) const {
    std::ostringstream os;
    os << "lancer-dataset\t1\n" << "config\t" << config_hash << "\n" << "users\t" << users.size() << "\n"
       << "items\t" << cat.size() << "\n";
    for (const auto& u : users) {
      os << u.user_id << '\t' << u.items.size() - 2 << '\t' << u.items.size() - 1 << '\t';
      for (std::size_t i = 0; i < u.items.size(); ++i) os << (i ? "," : "") << cat[u.items[i]].item_id;
      os << '\n';
    }
    const std::string body = os.str();
    return body + "checksum\t" + hex64(fnv1a(body)) + "\n";
  }

  static ProcessedDataset parse(const std::string& text, const ItemCatalog& cat) {
    const auto pos = text.rfind("checksum\t");
    if (pos == std::string::npos) fail(ErrorKind::corruption, "dataset file has no checksum line");
    const std::string body = text.substr(0, pos);
    std::string sum = text.substr(pos + 9);
    while (!sum.empty() && (sum.back() == '\n' || sum.back() == '\r')) sum.pop_back();
    if (sum != hex64(fnv1a(body))) fail(ErrorKind::hash_mismatch, "dataset checksum mismatch");
    std::istringstream is(body);
    std::string line;
    std::getline(is, line);
    if (line != "lancer-dataset\t1") fail(ErrorKind::version, "unsupported dataset header '" + line + "'");
    ProcessedDataset d;
    std::getline(is, line);
    if (line.rfind("config\t", 0) != 0) fail(ErrorKind::corruption, "dataset file has no config line");
    d.config_hash = line.substr(7);
    std::getline(is, line);
    std::getline(is, line);
    while (std::getline(is, line)) {
      auto f = split(line, '\t');
      if (f.size() != 4) fail(ErrorKind::corruption, "bad dataset row");
      SplitSequence s{f[0], {}};
      for (const auto& id : split(f[3], ',')) s.items.push_back(cat.index_of(id));
      if (s.items.size() < 5) fail(ErrorKind::corruption, "dataset row for " + f[0] + " is too short");
      d.users.push_back(std::move(s));
    }
    return d;
  }
};

inline ProcessedDataset process(const std::vector<UserSequence>& raw) {
  ProcessedDataset d;
  for (const auto& s : apply_length_rules(raw)) d.users.push_back(split_leave_one_out(s));
  return d;
}

}  // namespace lancer
