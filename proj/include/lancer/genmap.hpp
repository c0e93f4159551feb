#pragma once

// Beam-search generation of the next item's title, max-pooled embedding of
// the generated text and cosine mapping onto the catalog.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "lancer/catalog.hpp"
#include "lancer/reasoning.hpp"
#include "lancer/textproc.hpp"

namespace lancer {

struct Hypothesis {
  TokenSeq tokens;  // includes the terminal token when one was emitted
  double logprob = 0.0;
  bool finished = false;

  /// Tokens before the first SEP/EOS.
  TokenSeq content() const {
    TokenSeq out;
    for (int t : tokens) {
      if (t == special::sep || t == special::eos) break;
      out.push_back(t);
    }
    return out;
  }
};

/// Ranking used everywhere hypotheses are ordered: higher log-probability
/// first, then the lexicographically smaller token sequence (so smaller token
/// ids first, and a prefix before its extensions).
inline bool hypothesis_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.tokens < b.tokens;
}

/// log softmax in double precision.
template <class Range>
std::vector<double> log_softmax(const Range& logits) {
  std::vector<double> out(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double sum = 0;
  for (std::size_t i = 0; i < out.size(); ++i) sum += std::exp(static_cast<double>(logits[i]) - mx);
  const double lse = mx + std::log(sum);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

inline bool is_terminal(int t) { return t == special::sep || t == special::eos; }

/// A decoding model exposes an opaque state: `start()`, `logits(state)` (a
/// random-access range of vocab_size() values) and `extend(state, token)`.
template <class M>
concept DecodingModel = requires(const M& m, const typename M::State& s, int t) {
  { m.start() } -> std::convertible_to<typename M::State>;
  { m.extend(s, t) } -> std::convertible_to<typename M::State>;
  m.logits(s).size();
  { m.vocab_size() } -> std::convertible_to<std::size_t>;
};

struct BeamOptions {
  std::size_t width = 1;
  std::size_t max_steps = 34;
  bool reject_all_empty = true;
};

/// Length-synchronous beam search. Each step every live hypothesis is
/// expanded by every token and the best `width` unfinished expansions stay
/// live. Expansions ending in SEP/EOS, or reaching max_steps tokens, go to a
/// finished pool instead of taking a live slot. Search stops when nothing is
/// live or the pool's width-th entry already beats every live prefix (scores
/// only fall as tokens are added). Returns the pool's best `width`.
template <DecodingModel M>
std::vector<Hypothesis> beam_search(const M& model, const BeamOptions& opt) {
  const std::size_t vocab = model.vocab_size();
  if (opt.width == 0) fail(ErrorKind::config, "beam width must be >= 1");
  if (opt.max_steps == 0) fail(ErrorKind::config, "max_steps must be >= 1");
  if (opt.width > vocab)
    fail(ErrorKind::config, "beam width " + std::to_string(opt.width) + " exceeds vocabulary size " + std::to_string(vocab));

  using State = typename M::State;
  struct Beam {
    Hypothesis hyp;
    State state;
  };
  struct Candidate {
    Hypothesis hyp;
    std::size_t parent;
  };
  auto before = [](const Candidate& a, const Candidate& b) { return hypothesis_before(a.hyp, b.hyp); };

  std::vector<Hypothesis> pool;
  std::vector<Beam> beams;
  beams.push_back({Hypothesis{}, model.start()});
  for (std::size_t step = 1; step <= opt.max_steps && !beams.empty(); ++step) {
    std::vector<Candidate> live;
    live.reserve(beams.size() * vocab);
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const auto lp = log_softmax(model.logits(beams[b].state));
      for (std::size_t t = 0; t < vocab; ++t) {
        Candidate c{beams[b].hyp, b};
        c.hyp.tokens.push_back(static_cast<int>(t));
        c.hyp.logprob += lp[t];
        if (is_terminal(static_cast<int>(t)) || step == opt.max_steps) {
          c.hyp.finished = true;
          pool.push_back(std::move(c.hyp));
        } else {
          live.push_back(std::move(c));
        }
      }
    }
    std::sort(pool.begin(), pool.end(), hypothesis_before);
    if (pool.size() > opt.width) pool.resize(opt.width);

    const std::size_t keep = std::min(opt.width, live.size());
    std::partial_sort(live.begin(), live.begin() + static_cast<std::ptrdiff_t>(keep), live.end(), before);
    std::vector<Beam> next;
    next.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) {
      // extensions of a pruned prefix can never outrank the pool's width-th entry
      if (pool.size() == opt.width && !hypothesis_before(live[i].hyp, pool.back())) break;
      State s = model.extend(beams[live[i].parent].state, live[i].hyp.tokens.back());
      next.push_back({std::move(live[i].hyp), std::move(s)});
    }
    beams = std::move(next);
  }

  if (opt.reject_all_empty &&
      std::all_of(pool.begin(), pool.end(), [](const Hypothesis& h) { return h.content().empty(); }))
    fail(ErrorKind::degenerate, "every beam is empty after truncation at the first separator");
  return pool;
}

/// Argmax chain: stops at the first SEP/EOS or at max_steps.
template <DecodingModel M>
Hypothesis greedy_decode(const M& model, std::size_t max_steps) {
  if (max_steps == 0) fail(ErrorKind::config, "max_steps must be >= 1");
  Hypothesis h;
  auto state = model.start();
  for (std::size_t step = 1; step <= max_steps; ++step) {
    const auto lp = log_softmax(model.logits(state));
    const auto best = static_cast<int>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(best);
    h.logprob += lp[static_cast<std::size_t>(best)];
    if (is_terminal(best) || step == max_steps) break;
    state = model.extend(state, best);
  }
  h.finished = true;
  return h;
}

/// Temperature sampling, one hypothesis.
template <DecodingModel M>
Hypothesis sample_decode(const M& model, std::size_t max_steps, double temperature, Rng& rng) {
  if (temperature <= 0) fail(ErrorKind::config, "sampling temperature must be > 0");
  Hypothesis h;
  auto state = model.start();
  for (std::size_t step = 1; step <= max_steps; ++step) {
    const auto& raw = model.logits(state);
    std::vector<double> scaled(raw.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = static_cast<double>(raw[i]) / temperature;
    const auto lp_scaled = log_softmax(scaled);
    const auto lp = log_softmax(raw);
    double u = rng.uniform(), acc = 0;
    std::size_t tok = lp_scaled.size() - 1;
    for (std::size_t i = 0; i < lp_scaled.size(); ++i) {
      acc += std::exp(lp_scaled[i]);
      if (u < acc) {
        tok = i;
        break;
      }
    }
    h.tokens.push_back(static_cast<int>(tok));
    h.logprob += lp[tok];
    if (is_terminal(static_cast<int>(tok)) || step == max_steps) break;
    state = model.extend(state, static_cast<int>(tok));
  }
  h.finished = true;
  return h;
}

/// Adapts a trained generator plus one user's context to DecodingModel.
template <class T>
class GeneratorDecoder {
 public:
  using State = DecodeState<T>;

  GeneratorDecoder(const Generator<T>& gen, const TokenSeq& context, const HistoryMatrix<T>& history)
      : gen_(&gen), start_(gen.start_decoding(context, history)) {}

  State start() const { return start_; }
  const std::vector<T>& logits(const State& s) const { return s.logits(); }
  State extend(const State& s, int token) const {
    State n = s;
    n.step(token);
    return n;
  }
  std::size_t vocab_size() const { return gen_->backbone.config().vocab_size; }
  /// Generation steps that fit in the remaining context.
  std::size_t room() const { return gen_->backbone.config().max_context - start_.positions() + 1; }

 private:
  const Generator<T>* gen_;
  State start_;
};

struct PooledEmbedding {
  std::vector<double> gamma;
  std::size_t count = 0;
};

/// Per-dimension max over the embedding rows of `tokens`.
template <class T>
PooledEmbedding pool(const TokenSeq& tokens, const Tensor<T>& table) {
  if (tokens.empty()) fail(ErrorKind::empty, "cannot pool an empty token sequence");
  const std::size_t d = table.cols();
  PooledEmbedding p{std::vector<double>(d, -std::numeric_limits<double>::infinity()), tokens.size()};
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= table.rows())
      fail(ErrorKind::index, "token id " + std::to_string(t) + " outside embedding table of " + std::to_string(table.rows()));
    for (std::size_t j = 0; j < d; ++j) p.gamma[j] = std::max(p.gamma[j], static_cast<double>(table.at(t, j)));
  }
  return p;
}

/// One pooled title vector per catalog item.
struct ItemIndex {
  std::string source_hash;
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<std::vector<double>> vectors;

  std::size_t size() const { return ids.size(); }

  std::string serialize() const {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "lancer-index\t1\n" << "source\t" << source_hash << "\n" << "dim\t" << dim << "\n" << "count\t" << ids.size() << "\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
      os << ids[i];
      for (double v : vectors[i]) os << '\t' << v;
      os << '\n';
    }
    return os.str();
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::io, "cannot write index " + path);
    f << serialize();
    if (!f) fail(ErrorKind::io, "failed writing index " + path);
  }

  static ItemIndex parse(const std::string& text) {
    std::istringstream is(text);
    std::string line, key;
    ItemIndex idx;
    auto header = [&](const std::string& want) {
      if (!std::getline(is, line)) fail(ErrorKind::corruption, "index truncated before '" + want + "'");
      auto tab = line.find('\t');
      if (tab == std::string::npos || line.substr(0, tab) != want)
        fail(ErrorKind::corruption, "index header expected '" + want + "'");
      return line.substr(tab + 1);
    };
    if (header("lancer-index") != "1") fail(ErrorKind::version, "unsupported index version");
    idx.source_hash = header("source");
    std::size_t count = 0;
    try {
      idx.dim = std::stoul(header("dim"));
      count = std::stoul(header("count"));
    } catch (const std::logic_error&) {
      fail(ErrorKind::corruption, "index header has a non-numeric size");
    }
    for (std::size_t i = 0; i < count; ++i) {
      if (!std::getline(is, line)) fail(ErrorKind::corruption, "index truncated at row " + std::to_string(i));
      std::istringstream row(line);
      std::string id, cell;
      std::getline(row, id, '\t');
      std::vector<double> v;
      while (std::getline(row, cell, '\t')) {
        try {
          v.push_back(std::stod(cell));
        } catch (const std::logic_error&) {
          fail(ErrorKind::corruption, "index row " + std::to_string(i) + " has a bad number");
        }
      }
      if (v.size() != idx.dim) fail(ErrorKind::corruption, "index row " + std::to_string(i) + " has the wrong width");
      idx.ids.push_back(id);
      idx.vectors.push_back(std::move(v));
    }
    return idx;
  }

  static ItemIndex load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::io, "cannot open index " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }
};

/// Title tokens as the generator is trained to emit them.
inline TokenSeq title_tokens(const Vocab& vocab, const std::string& title) { return vocab.encode(title, 32); }

template <class T>
ItemIndex build_index(const ItemCatalog& catalog, const Vocab& vocab, const Tensor<T>& table, const std::string& source_hash) {
  if (catalog.empty()) fail(ErrorKind::empty, "cannot index an empty catalog");
  ItemIndex idx;
  idx.source_hash = source_hash;
  idx.dim = table.cols();
  std::string bad;
  for (const auto& item : catalog.items()) {
    TokenSeq toks = title_tokens(vocab, item.title);
    if (toks.empty()) {
      bad += (bad.empty() ? "" : ", ") + item.item_id;
      continue;
    }
    idx.ids.push_back(item.item_id);
    idx.vectors.push_back(pool(toks, table).gamma);
  }
  if (!bad.empty()) fail(ErrorKind::data, "items with empty title tokenization: " + bad);
  return idx;
}

inline double norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Cosine similarity; 0 when either side has zero norm.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = norm(a), nb = norm(b);
  if (na == 0 || nb == 0) return 0.0;
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return dot / (na * nb);
}

struct MappedItem {
  std::size_t index = 0;  // row in the ItemIndex
  double similarity = 0.0;
};

/// All items by descending cosine, ties to the smaller item id.
inline std::vector<MappedItem> rank_by_cosine(const std::vector<double>& gamma, const ItemIndex& index) {
  if (gamma.size() != index.dim)
    fail(ErrorKind::dimension, "query has " + std::to_string(gamma.size()) + " dims, index has " + std::to_string(index.dim));
  if (norm(gamma) == 0) fail(ErrorKind::degenerate, "cannot map a zero vector");
  std::vector<MappedItem> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = {i, cosine(gamma, index.vectors[i])};
  std::stable_sort(out.begin(), out.end(), [&](const MappedItem& a, const MappedItem& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return index.ids[a.index] < index.ids[b.index];
  });
  return out;
}

inline MappedItem map_to_item(const std::vector<double>& gamma, const ItemIndex& index) {
  if (index.size() == 0) fail(ErrorKind::empty, "empty item index");
  if (gamma.size() != index.dim)
    fail(ErrorKind::dimension, "query has " + std::to_string(gamma.size()) + " dims, index has " + std::to_string(index.dim));
  if (norm(gamma) == 0) fail(ErrorKind::degenerate, "cannot map a zero vector");
  MappedItem best{0, cosine(gamma, index.vectors[0])};
  for (std::size_t i = 1; i < index.size(); ++i) {
    const double s = cosine(gamma, index.vectors[i]);
    if (s > best.similarity || (s == best.similarity && index.ids[i] < index.ids[best.index])) best = {i, s};
  }
  return best;
}

enum class Decoder { beam, greedy, sample };

inline Decoder parse_decoder(const std::string& s) {
  if (s == "beam") return Decoder::beam;
  if (s == "greedy") return Decoder::greedy;
  if (s == "sample") return Decoder::sample;
  fail(ErrorKind::config, "unknown decoder '" + s + "' (expected beam, greedy or sample)");
}

struct RecommendOptions {
  std::size_t k = 10;
  std::size_t width = 0;  // 0 means k + 5
  std::size_t max_steps = 34;
  Decoder decoder = Decoder::beam;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

struct Recommendation {
  std::string item_id;
  double score = 0.0;  // beam log-probability, or cosine for backfilled items
  bool backfill = false;
  TokenSeq generated;  // empty for backfill
};

/// Maps decoded hypotheses to distinct items, then tops up with the items
/// closest to the best hypothesis.
inline std::vector<Recommendation> rank_hypotheses(const std::vector<Hypothesis>& hyps, const ItemIndex& index,
                                                   const std::vector<std::vector<double>>& pooled, std::size_t k) {
  std::vector<Recommendation> out;
  std::vector<bool> used(index.size(), false);
  const std::vector<double>* top = nullptr;
  for (std::size_t h = 0; h < hyps.size() && out.size() < k; ++h) {
    if (pooled[h].empty() || norm(pooled[h]) == 0) continue;
    if (!top) top = &pooled[h];
    auto m = map_to_item(pooled[h], index);
    if (used[m.index]) continue;
    used[m.index] = true;
    out.push_back({index.ids[m.index], hyps[h].logprob, false, hyps[h].content()});
  }
  if (out.size() < k && top) {
    for (const auto& m : rank_by_cosine(*top, index)) {
      if (out.size() >= k) break;
      if (used[m.index]) continue;
      used[m.index] = true;
      out.push_back({index.ids[m.index], m.similarity, true, {}});
    }
  }
  return out;
}

/// Top-k distinct items for one user.
template <class T>
std::vector<Recommendation> recommend(const Generator<T>& gen, const TokenSeq& context, const HistoryMatrix<T>& history,
                                      const ItemIndex& index, const RecommendOptions& opt) {
  if (opt.k == 0) fail(ErrorKind::config, "K must be >= 1");
  if (history.real_rows() == 0) fail(ErrorKind::empty, "empty history");
  const std::size_t width = opt.width ? opt.width : opt.k + 5;
  if (opt.decoder == Decoder::beam && width < opt.k)
    fail(ErrorKind::config, "beam width " + std::to_string(width) + " is smaller than K=" + std::to_string(opt.k));
  GeneratorDecoder<T> dec(gen, context, history);
  const std::size_t steps = std::min(opt.max_steps, dec.room());
  if (steps == 0) fail(ErrorKind::budget, "context leaves no room to generate");

  std::vector<Hypothesis> hyps;
  switch (opt.decoder) {
    case Decoder::beam:
      hyps = beam_search(dec, BeamOptions{std::min(width, dec.vocab_size()), steps, true});
      break;
    case Decoder::greedy:
      hyps = {greedy_decode(dec, steps)};
      break;
    case Decoder::sample: {
      Rng rng(opt.seed);
      hyps = {sample_decode(dec, steps, opt.temperature, rng)};
      break;
    }
  }
  std::vector<std::vector<double>> pooled;
  for (const auto& h : hyps) {
    auto c = h.content();
    pooled.push_back(c.empty() ? std::vector<double>{} : pool(c, gen.backbone.token_embedding()).gamma);
  }
  auto out = rank_hypotheses(hyps, index, pooled, opt.k);
  if (out.empty()) fail(ErrorKind::degenerate, "no generated text mapped to an item");
  return out;
}

}  // namespace lancer
