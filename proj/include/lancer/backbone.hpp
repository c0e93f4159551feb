#pragma once

// Pre-LN decoder-only transformer with two conditioning hooks:
//  * a per-layer key/value prefix (keys/values only, no positions, never queries);
//  * virtual input rows prepended to the token embeddings.
// The output head is tied to the token embedding table.

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lancer/hash.hpp"
#include "lancer/ops.hpp"
#include "lancer/rng.hpp"
#include "lancer/textproc.hpp"

namespace lancer {

struct BackboneConfig {
  std::size_t layers = 4;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_context = 512;
  std::size_t vocab_size = 0;

  std::size_t head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (layers == 0) fail(ErrorKind::config, "layers must be >= 1");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      fail(ErrorKind::config, "d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
    if (d_ff == 0) fail(ErrorKind::config, "d_ff must be >= 1");
    if (max_context == 0) fail(ErrorKind::config, "max_context must be >= 1");
    if (vocab_size <= 5) fail(ErrorKind::config, "vocab_size must exceed the reserved ids");
  }
};

/// Per-layer key and value prefixes, each prefix_len x d_model.
template <class T>
struct PrefixCache {
  std::vector<Tensor<T>> keys;
  std::vector<Tensor<T>> values;

  std::size_t length() const { return keys.empty() ? 0 : keys.front().rows(); }
  bool empty() const { return length() == 0; }
};

template <class T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_shift, w_qkv, b_qkv, w_out, b_out;
  Tensor<T> ln2_gain, ln2_shift, w_ff1, b_ff1, w_ff2, b_ff2;
};

struct AttentionShape {
  std::size_t queries;
  std::size_t keys;
};

template <class T>
struct ForwardOutput {
  Tensor<T> logits;       // T x |V|, real positions only
  Tensor<T> last_hidden;  // T x d after the final layer norm
  std::vector<AttentionShape> attention;  // one entry per layer
};

template <class T>
class Backbone {
 public:
  Backbone() = default;

  static Backbone init(const BackboneConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone m;
    m.cfg_ = cfg;
    const std::size_t d = cfg.d_model;
    const double sd = 0.02;
    const double resid_sd = sd / std::sqrt(2.0 * static_cast<double>(cfg.layers));
    m.tok_emb_ = normal_tensor<T>(rng, {cfg.vocab_size, d}, sd);
    m.pos_emb_ = normal_tensor<T>(rng, {cfg.max_context, d}, sd);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerParams<T> p;
      p.ln1_gain = Tensor<T>({d}, T(1), true);
      p.ln1_shift = Tensor<T>({d}, T(0), true);
      p.w_qkv = normal_tensor<T>(rng, {d, 3 * d}, sd);
      p.b_qkv = Tensor<T>({3 * d}, T(0), true);
      p.w_out = normal_tensor<T>(rng, {d, d}, resid_sd);
      p.b_out = Tensor<T>({d}, T(0), true);
      p.ln2_gain = Tensor<T>({d}, T(1), true);
      p.ln2_shift = Tensor<T>({d}, T(0), true);
      p.w_ff1 = normal_tensor<T>(rng, {d, cfg.d_ff}, sd);
      p.b_ff1 = Tensor<T>({cfg.d_ff}, T(0), true);
      p.w_ff2 = normal_tensor<T>(rng, {cfg.d_ff, d}, resid_sd);
      p.b_ff2 = Tensor<T>({d}, T(0), true);
      m.layers_.push_back(std::move(p));
    }
    m.lnf_gain_ = Tensor<T>({d}, T(1), true);
    m.lnf_shift_ = Tensor<T>({d}, T(0), true);
    return m;
  }

  const BackboneConfig& config() const { return cfg_; }
  const Tensor<T>& token_embedding() const { return tok_emb_; }

  /// Visits every parameter with a stable name, in a fixed order.
  template <class F>
  void visit(F&& f) {
    f(std::string("tok_emb"), tok_emb_);
    f(std::string("pos_emb"), pos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& p = layers_[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      f(pre + "ln1_gain", p.ln1_gain);
      f(pre + "ln1_shift", p.ln1_shift);
      f(pre + "w_qkv", p.w_qkv);
      f(pre + "b_qkv", p.b_qkv);
      f(pre + "w_out", p.w_out);
      f(pre + "b_out", p.b_out);
      f(pre + "ln2_gain", p.ln2_gain);
      f(pre + "ln2_shift", p.ln2_shift);
      f(pre + "w_ff1", p.w_ff1);
      f(pre + "b_ff1", p.b_ff1);
      f(pre + "w_ff2", p.w_ff2);
      f(pre + "b_ff2", p.b_ff2);
    }
    f(std::string("lnf_gain"), lnf_gain_);
    f(std::string("lnf_shift"), lnf_shift_);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Backbone*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, std::as_const(t)); });
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  void set_trainable(bool on) {
    visit([&](const std::string&, Tensor<T>& t) { t.set_requires_grad(on); });
  }

  /// Independent deep copy.
  Backbone clone() const {
    Backbone c = *this;
    c.visit([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return c;
  }

  /// Shares parameter storage, owns fresh gradient buffers.
  Backbone aliased() const {
    Backbone c = *this;
    c.visit([](const std::string&, Tensor<T>& t) { t = t.alias(); });
    return c;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    visit([&](const std::string& n, const Tensor<T>& t) {
      h.update(n);
      h.update(t.values());
    });
    return h.digest();
  }

  ForwardOutput<T> forward(const TokenSeq& tokens, const PrefixCache<T>* prefix = nullptr,
                           const Tensor<T>* virtual_rows = nullptr, std::size_t position_offset = 0) const {
    const std::size_t d = cfg_.d_model;
    const std::size_t n_real = tokens.size();
    const std::size_t n_virtual = virtual_rows ? virtual_rows->rows() : 0;
    const std::size_t rows = n_real + n_virtual;
    const std::size_t theta = prefix ? prefix->length() : 0;
    if (n_real == 0) fail(ErrorKind::empty, "forward needs at least one token");
    if (rows + position_offset > cfg_.max_context)
      fail(ErrorKind::budget, "context of " + std::to_string(n_real) + " tokens + " + std::to_string(n_virtual) +
                                  " virtual rows" + (position_offset ? " at offset " + std::to_string(position_offset) : "") +
                                  " exceeds budget " + std::to_string(cfg_.max_context));
    if (virtual_rows && virtual_rows->cols() != d)
      fail(ErrorKind::dimension, "virtual rows " + shape_str(virtual_rows->shape()) + " do not have width " + std::to_string(d));
    if (theta && (prefix->keys.size() != cfg_.layers || prefix->values.size() != cfg_.layers))
      fail(ErrorKind::dimension, "prefix has " + std::to_string(prefix->keys.size()) + " layers, model has " +
                                     std::to_string(cfg_.layers));

    Tensor<T> x = embedding(tok_emb_, tokens);
    if (n_virtual) x = concat_rows<T>({*virtual_rows, x});
    x = add(x, slice_rows(pos_emb_, position_offset, rows));

    const std::size_t keys = theta + rows;
    auto allowed = std::make_shared<std::vector<unsigned char>>(rows * keys, 0);
    for (std::size_t q = 0; q < rows; ++q)
      for (std::size_t k = 0; k < keys; ++k) (*allowed)[q * keys + k] = (k < theta || k - theta <= q) ? 1 : 0;

    ForwardOutput<T> out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& p = layers_[l];
      Tensor<T> h = layer_norm(x, p.ln1_gain, p.ln1_shift);
      Tensor<T> qkv = add_row(matmul(h, p.w_qkv), p.b_qkv);
      Tensor<T> q = slice_cols(qkv, 0, d);
      Tensor<T> k = slice_cols(qkv, d, d);
      Tensor<T> v = slice_cols(qkv, 2 * d, d);
      if (theta) {
        k = concat_rows<T>({prefix->keys[l], k});
        v = concat_rows<T>({prefix->values[l], v});
      }
      out.attention.push_back({rows, keys});
      Tensor<T> attn = multi_head_attention<T>(q, k, v, cfg_.n_heads, allowed);
      x = add(x, add_row(matmul(attn, p.w_out), p.b_out));
      Tensor<T> h2 = layer_norm(x, p.ln2_gain, p.ln2_shift);
      Tensor<T> ff = add_row(matmul(gelu(add_row(matmul(h2, p.w_ff1), p.b_ff1)), p.w_ff2), p.b_ff2);
      x = add(x, ff);
    }
    Tensor<T> final = layer_norm(x, lnf_gain_, lnf_shift_);
    out.last_hidden = n_virtual ? slice_rows(final, n_virtual, n_real) : final;
    out.logits = matmul(out.last_hidden, transpose(tok_emb_));
    return out;
  }

 private:
  template <class>
  friend class DecodeState;

  BackboneConfig cfg_;
  Tensor<T> tok_emb_, pos_emb_;
  std::vector<LayerParams<T>> layers_;
  Tensor<T> lnf_gain_, lnf_shift_;
};

/// Incremental decoder with per-layer key/value caches. Works on raw
/// parameter storage, independent of the autodiff tape.
template <class T>
class DecodeState {
 public:
  using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;

  DecodeState() = default;

  /// Runs the context through the model and returns logits after its last row.
  const std::vector<T>& init(const Backbone<T>& model, const TokenSeq& tokens, const PrefixCache<T>* prefix = nullptr,
                             const Tensor<T>* virtual_rows = nullptr) {
    model_ = &model;
    const auto& cfg = model.cfg_;
    const std::size_t d = cfg.d_model;
    const std::size_t n_virtual = virtual_rows ? virtual_rows->rows() : 0;
    if (tokens.empty() && n_virtual == 0) fail(ErrorKind::empty, "decode state needs a non-empty context");
    if (tokens.size() + n_virtual > cfg.max_context)
      fail(ErrorKind::budget, "context of " + std::to_string(tokens.size()) + " tokens + " + std::to_string(n_virtual) +
                                  " virtual rows exceeds budget " + std::to_string(cfg.max_context));
    keys_.assign(cfg.layers, {});
    values_.assign(cfg.layers, {});
    rows_ = 0;
    prefix_len_ = prefix ? prefix->length() : 0;
    for (std::size_t l = 0; l < cfg.layers && prefix_len_; ++l) {
      keys_[l].assign(prefix->keys[l].values().begin(), prefix->keys[l].values().end());
      values_[l].assign(prefix->values[l].values().begin(), prefix->values[l].values().end());
    }
    for (std::size_t r = 0; r < n_virtual; ++r) {
      Row x = Eigen::Map<const Row>(virtual_rows->values().data() + r * d, static_cast<Eigen::Index>(d));
      advance(x, r + 1 == n_virtual && tokens.empty());
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) advance(token_row(tokens[i]), i + 1 == tokens.size());
    return logits_;
  }

  /// Appends one token; returns logits for the following position.
  const std::vector<T>& step(int token) {
    if (!model_) fail(ErrorKind::state, "decode step on an uninitialized state");
    if (rows_ + 1 > model_->cfg_.max_context)
      fail(ErrorKind::budget, "decoding past the context budget of " + std::to_string(model_->cfg_.max_context));
    advance(token_row(token), true);
    return logits_;
  }

  const std::vector<T>& logits() const { return logits_; }
  std::size_t positions() const { return rows_; }
  bool initialized() const { return model_ != nullptr; }

 private:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using CRow = Eigen::Map<const Row>;

  Row token_row(int token) const {
    const auto& cfg = model_->cfg_;
    if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
      fail(ErrorKind::index, "token id " + std::to_string(token) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    return CRow(model_->tok_emb_.values().data() + static_cast<std::size_t>(token) * cfg.d_model,
                static_cast<Eigen::Index>(cfg.d_model));
  }

  static CMap mat(const Tensor<T>& t) {
    return CMap(t.values().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  }
  static CRow vec(const Tensor<T>& t) { return CRow(t.values().data(), static_cast<Eigen::Index>(t.size())); }

  static Row layer_norm_row(const Row& x, const Tensor<T>& gain, const Tensor<T>& shift) {
    const auto n = static_cast<T>(x.size());
    T mean = x.sum() / n;
    T var = (x.array() - mean).square().sum() / n;
    T is = T(1) / std::sqrt(var + T(1e-5));
    return ((x.array() - mean) * is * vec(gain).array() + vec(shift).array()).matrix();
  }

  void advance(Row x, bool want_logits) {
    const auto& m = *model_;
    const auto& cfg = m.cfg_;
    const std::size_t d = cfg.d_model, hd = cfg.head_dim();
    const auto di = static_cast<Eigen::Index>(d);
    x += CRow(m.pos_emb_.values().data() + rows_ * d, di);
    ++rows_;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const auto& p = m.layers_[l];
      Row h = layer_norm_row(x, p.ln1_gain, p.ln1_shift);
      Row qkv = h * mat(p.w_qkv) + vec(p.b_qkv);
      keys_[l].insert(keys_[l].end(), qkv.data() + d, qkv.data() + 2 * d);
      values_[l].insert(values_[l].end(), qkv.data() + 2 * d, qkv.data() + 3 * d);
      const auto n_keys = static_cast<Eigen::Index>(keys_[l].size() / d);
      CMap K(keys_[l].data(), n_keys, di);
      CMap V(values_[l].data(), n_keys, di);
      Row attn(di);
      for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
        const auto off = static_cast<Eigen::Index>(hh * hd), w = static_cast<Eigen::Index>(hd);
        Row scores = (qkv.segment(off, w) * K.middleCols(off, w).transpose()) * inv_sqrt;
        T mx = scores.maxCoeff();
        Row e = (scores.array() - mx).exp().matrix();
        e /= e.sum();
        attn.segment(off, w) = e * V.middleCols(off, w);
      }
      x += attn * mat(p.w_out) + vec(p.b_out);
      Row h2 = layer_norm_row(x, p.ln2_gain, p.ln2_shift);
      Row f = h2 * mat(p.w_ff1) + vec(p.b_ff1);
      constexpr T c = T(0.7978845608028654), k = T(0.044715);
      f = (T(0.5) * f.array() * (T(1) + (c * (f.array() + k * f.array().cube())).tanh())).matrix();
      x += f * mat(p.w_ff2) + vec(p.b_ff2);
    }
    if (want_logits) {
      Row fin = layer_norm_row(x, m.lnf_gain_, m.lnf_shift_);
      Row lg = fin * mat(m.tok_emb_).transpose();
      logits_.assign(lg.data(), lg.data() + lg.size());
    }
  }

  const Backbone<T>* model_ = nullptr;
  std::vector<std::vector<T>> keys_, values_;
  std::size_t rows_ = 0;
  std::size_t prefix_len_ = 0;
  std::vector<T> logits_;
};

}  // namespace lancer
