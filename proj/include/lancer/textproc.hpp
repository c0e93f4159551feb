#pragma once

// Word-level vocabulary: lowercased, split on whitespace and around every
// ASCII punctuation character.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lancer/error.hpp"
#include "lancer/hash.hpp"

namespace lancer {

using TokenSeq = std::vector<int>;

namespace special {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int sep = 3;
inline constexpr int unk = 4;
inline constexpr int count = 5;
inline constexpr std::string_view names[count] = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
}  // namespace special

inline bool is_special(int id) { return id >= 0 && id < special::count; }

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

class Vocab {
 public:
  Vocab() {
    for (int i = 0; i < special::count; ++i) add(std::string(special::names[i]), 0);
  }

  /// Tokens with frequency >= min_freq, by descending frequency then
  /// lexicographically, after the five reserved ids.
  static Vocab build(const std::vector<std::string>& corpus, std::size_t min_freq) {
    if (corpus.empty()) fail(ErrorKind::empty, "cannot build a vocabulary from an empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : corpus)
      for (auto& t : tokenize(doc)) ++freq[t];
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (auto& [tok, n] : freq)
      if (n >= min_freq) kept.emplace_back(tok, n);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (auto& [tok, n] : kept) v.add(tok, n);
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? special::unk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t frequency(int id) const { return freqs_.at(static_cast<std::size_t>(id)); }

  TokenSeq encode(std::string_view text, std::size_t max_len) const {
    TokenSeq out;
    for (auto& t : tokenize(text)) {
      if (out.size() >= max_len) break;
      out.push_back(id(t));
    }
    return out;
  }

  std::string decode(const TokenSeq& seq, bool strip_special = false) const {
    std::string out;
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        fail(ErrorKind::index, "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(size()));
      if (strip_special && is_special(id)) continue;
      if (!out.empty()) out.push_back(' ');
      out += tokens_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  /// "id<TAB>token<TAB>frequency" per line, ids ascending.
  std::string serialize() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < tokens_.size(); ++i) os << i << '\t' << tokens_[i] << '\t' << freqs_[i] << '\n';
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a(serialize()); }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot write " + path);
    f << serialize();
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot read " + path);
    Vocab v;
    v.tokens_.clear();
    v.freqs_.clear();
    v.index_.clear();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      auto t1 = line.find('\t');
      auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      if (t2 == std::string::npos) fail(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": malformed vocab row");
      std::size_t id = std::stoul(line.substr(0, t1));
      if (id != v.tokens_.size())
        fail(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": ids must be dense and ascending");
      v.add(line.substr(t1 + 1, t2 - t1 - 1), std::stoul(line.substr(t2 + 1)));
    }
    if (v.size() < special::count) fail(ErrorKind::parse, path + ": missing reserved tokens");
    for (int i = 0; i < special::count; ++i)
      if (v.token(i) != special::names[i]) fail(ErrorKind::parse, path + ": reserved id " + std::to_string(i) + " altered");
    return v;
  }

 private:
  void add(std::string tok, std::size_t freq) {
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(std::move(tok));
    freqs_.push_back(freq);
  }

  std::vector<std::string> tokens_;
  std::vector<std::size_t> freqs_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace lancer
