#pragma once

// Stage one: a continuous knowledge prompt learned on item content while the
// backbone stays frozen, and the item/history encoders built on it.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lancer/adam.hpp"
#include "lancer/backbone.hpp"
#include "lancer/catalog.hpp"
#include "lancer/train.hpp"

namespace lancer {

/// Knowledge token embeddings plus the two-layer MLP that expands each token
/// into one key row and one value row per layer.
template <class T>
class KnowledgePrompt {
 public:
  KnowledgePrompt() = default;

  static KnowledgePrompt init(std::size_t tokens, std::size_t embed_dim, const BackboneConfig& cfg, Rng& rng) {
    if (tokens > 64) fail(ErrorKind::config, "knowledge token count must be within 0..64");
    if (embed_dim == 0) fail(ErrorKind::config, "knowledge embedding width must be >= 1");
    KnowledgePrompt p;
    p.tokens_ = tokens;
    p.layers_ = cfg.layers;
    p.d_model_ = cfg.d_model;
    const std::size_t hidden = 2 * embed_dim;
    if (tokens) p.emb_ = normal_tensor<T>(rng, {tokens, embed_dim}, 1.0);
    p.w1_ = normal_tensor<T>(rng, {embed_dim, hidden}, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
    p.b1_ = Tensor<T>({hidden}, T(0), true);
    p.w2_ = normal_tensor<T>(rng, {hidden, 2 * cfg.layers * cfg.d_model}, 0.02);
    p.b2_ = Tensor<T>({2 * cfg.layers * cfg.d_model}, T(0), true);
    return p;
  }

  std::size_t tokens() const { return tokens_; }
  std::size_t embed_dim() const { return w1_.rows(); }
  std::size_t layers() const { return layers_; }
  std::size_t d_model() const { return d_model_; }
  const Tensor<T>& token_embeddings() const { return emb_; }

  template <class F>
  void visit(F&& f) {
    if (tokens_) f(std::string("emb"), emb_);
    f(std::string("w1"), w1_);
    f(std::string("b1"), b1_);
    f(std::string("w2"), w2_);
    f(std::string("b2"), b2_);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<KnowledgePrompt*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, std::as_const(t)); });
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  KnowledgePrompt aliased() const {
    KnowledgePrompt c = *this;
    c.visit([](const std::string&, Tensor<T>& t) { t = t.alias(); });
    return c;
  }

  void set_trainable(bool on) {
    visit([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    visit([&](const std::string& n, const Tensor<T>& t) {
      h.update(n);
      h.update(t.values());
    });
    return h.digest();
  }

  /// Restores shape metadata after tensors were loaded by name.
  void rebind(std::size_t tokens, std::size_t layers, std::size_t d_model) {
    tokens_ = tokens;
    layers_ = layers;
    d_model_ = d_model;
  }

  /// MLP(Emb(tokens)) split per layer into key and value prefixes.
  PrefixCache<T> expand() const {
    PrefixCache<T> cache;
    if (tokens_ == 0) return cache;
    Tensor<T> hidden = tanh(add_row(matmul(emb_, w1_), b1_));
    Tensor<T> out = add_row(matmul(hidden, w2_), b2_);
    for (std::size_t l = 0; l < layers_; ++l) {
      cache.keys.push_back(slice_cols(out, (2 * l) * d_model_, d_model_));
      cache.values.push_back(slice_cols(out, (2 * l + 1) * d_model_, d_model_));
    }
    return cache;
  }

 private:
  std::size_t tokens_ = 0, layers_ = 0, d_model_ = 0;
  Tensor<T> emb_, w1_, b1_, w2_, b2_;
};

/// BOS content EOS, cut to the context budget.
inline TokenSeq content_sequence(const Vocab& vocab, const std::string& content, std::size_t max_context) {
  TokenSeq seq{special::bos};
  TokenSeq body = vocab.encode(content, max_context >= 2 ? max_context - 2 : 0);
  if (body.empty()) return {};
  seq.insert(seq.end(), body.begin(), body.end());
  seq.push_back(special::eos);
  return seq;
}

struct StageOneOptions {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t threads = 1;
};

struct StageOneReport {
  std::size_t items_used = 0;
  std::size_t items_skipped = 0;  // content encoded to nothing
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

template <class T>
double prompt_loss(const Backbone<T>& frozen, const KnowledgePrompt<T>& prompt, const TokenSeq& seq) {
  NoGradGuard ng;
  PrefixCache<T> cache = prompt.expand();
  TokenSeq input(seq.begin(), seq.end() - 1);
  TokenSeq target(seq.begin() + 1, seq.end());
  auto out = frozen.forward(input, &cache);
  return static_cast<double>(cross_entropy(out.logits, target, special::pad).item());
}

/// Fits the knowledge prompt by next-token NLL over every item's content;
/// the backbone is never written.
template <class T>
StageOneReport train_knowledge_prompt(const Backbone<T>& backbone, KnowledgePrompt<T>& prompt, const Vocab& vocab,
                                      const ItemCatalog& catalog, const StageOneOptions& opt, Rng& rng) {
  if (catalog.empty()) fail(ErrorKind::empty, "stage one needs a non-empty catalog");
  Backbone<T> frozen = backbone.aliased();
  frozen.set_trainable(false);
  prompt.set_trainable(true);
  StageOneReport report;
  std::vector<TokenSeq> seqs;
  for (const auto& item : catalog.items()) {
    TokenSeq s = content_sequence(vocab, item.content, frozen.config().max_context);
    if (s.size() < 2) {
      ++report.items_skipped;
      continue;
    }
    seqs.push_back(std::move(s));
  }
  report.items_used = seqs.size();
  if (seqs.empty()) fail(ErrorKind::empty, "no catalog item has encodable content");

  auto mean_loss = [&] {
    double total = 0;
    for (const auto& s : seqs) total += prompt_loss(frozen, prompt, s);
    return total / static_cast<double>(seqs.size());
  };
  report.initial_loss = mean_loss();

  const std::size_t batch = std::max<std::size_t>(1, opt.batch);
  const std::size_t steps_per_epoch = (seqs.size() + batch - 1) / batch;
  Adam<T> adam(prompt.parameters(), opt.lr, steps_per_epoch * opt.epochs);
  std::vector<std::size_t> order(seqs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_total = 0;
    for (const auto& b : make_batches(order, batch)) {
      adam.zero_grad();
      double l = accumulate_batch<T>(
          prompt, b,
          [&](const KnowledgePrompt<T>& local, std::size_t i) {
            PrefixCache<T> cache = local.expand();
            const auto& s = seqs[i];
            TokenSeq input(s.begin(), s.end() - 1);
            TokenSeq target(s.begin() + 1, s.end());
            return cross_entropy(frozen.forward(input, &cache).logits, target, special::pad);
          },
          opt.threads);
      if (!std::isfinite(l)) fail(ErrorKind::numeric, "stage one loss became non-finite");
      epoch_total += l * static_cast<double>(b.size());
      adam.step();
    }
    report.epoch_losses.push_back(epoch_total / static_cast<double>(seqs.size()));
  }
  report.final_loss = mean_loss();
  return report;
}

/// Final-layer state at the last content token under the knowledge prefix.
template <class T>
std::vector<T> encode_item(const Backbone<T>& frozen, const KnowledgePrompt<T>& prompt, const Vocab& vocab,
                           const std::string& content) {
  TokenSeq seq{special::bos};
  TokenSeq body = vocab.encode(content, frozen.config().max_context - 1);
  if (body.empty()) fail(ErrorKind::empty, "cannot encode an item with empty content");
  seq.insert(seq.end(), body.begin(), body.end());
  NoGradGuard ng;
  PrefixCache<T> cache = prompt.expand();
  auto out = frozen.forward(seq, &cache);
  const std::size_t d = frozen.config().d_model;
  auto v = out.last_hidden.values();
  return std::vector<T>(v.end() - static_cast<std::ptrdiff_t>(d), v.end());
}

/// Item vectors for a whole catalog, by item index.
template <class T>
std::vector<std::vector<T>> encode_catalog(const Backbone<T>& frozen, const KnowledgePrompt<T>& prompt,
                                           const Vocab& vocab, const ItemCatalog& catalog) {
  std::vector<std::vector<T>> out;
  out.reserve(catalog.size());
  for (const auto& item : catalog.items()) out.push_back(encode_item(frozen, prompt, vocab, item.content));
  return out;
}

/// N x d matrix of history item vectors, zero-padded, with a row mask.
template <class T>
struct HistoryMatrix {
  Tensor<T> rows;
  std::vector<bool> mask;

  std::size_t real_rows() const {
    std::size_t n = 0;
    for (bool b : mask) n += b;
    return n;
  }
};

template <class T>
HistoryMatrix<T> encode_history(const std::vector<std::size_t>& items, const std::vector<std::vector<T>>& item_vectors,
                                std::size_t max_rows) {
  if (items.empty()) fail(ErrorKind::empty, "history needs at least one item");
  if (items.size() > max_rows)
    fail(ErrorKind::dimension, "history of " + std::to_string(items.size()) + " items exceeds " + std::to_string(max_rows));
  if (item_vectors.empty()) fail(ErrorKind::empty, "no item vectors");
  const std::size_t d = item_vectors.front().size();
  std::vector<T> data(max_rows * d, T(0));
  std::vector<bool> mask(max_rows, false);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i] >= item_vectors.size()) fail(ErrorKind::data, "unknown item index " + std::to_string(items[i]));
    std::copy(item_vectors[items[i]].begin(), item_vectors[items[i]].end(), data.begin() + static_cast<std::ptrdiff_t>(i * d));
    mask[i] = true;
  }
  return {Tensor<T>({max_rows, d}, std::move(data)), std::move(mask)};
}

/// Encodes each listed catalog item directly; unknown ids are data errors.
template <class T>
HistoryMatrix<T> encode_history(const std::vector<std::string>& item_ids, const ItemCatalog& catalog,
                                const Backbone<T>& frozen, const KnowledgePrompt<T>& prompt, const Vocab& vocab,
                                std::size_t max_rows) {
  if (item_ids.empty()) fail(ErrorKind::empty, "history needs at least one item");
  std::vector<std::size_t> idx;
  std::vector<std::vector<T>> vecs;
  for (const auto& id : item_ids) {
    idx.push_back(vecs.size());
    vecs.push_back(encode_item(frozen, prompt, vocab, catalog[catalog.index_of(id)].content));
  }
  return encode_history(idx, vecs, max_rows);
}

}  // namespace lancer
