#pragma once

// Stage two: a per-user reasoning prompt from attention of the user's history
// over a learned domain memory, and the generator trained to emit the next
// item's title.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lancer/adam.hpp"
#include "lancer/backbone.hpp"
#include "lancer/hash.hpp"
#include "lancer/knowledge.hpp"
#include "lancer/train.hpp"

namespace lancer {

/// Where the reasoning prompt enters the generator.
enum class Injection {
  input,   // rho virtual input rows
  prefix,  // rho key/value rows per layer
};

inline std::string injection_name(Injection i) { return i == Injection::input ? "input" : "prefix"; }
inline Injection parse_injection(const std::string& s) {
  if (s == "input") return Injection::input;
  if (s == "prefix") return Injection::prefix;
  fail(ErrorKind::config, "unknown reasoning injection '" + s + "' (expected input or prefix)");
}

/// Learnable m x d memory with key/value projections.
template <class T>
struct DomainMemory {
  Tensor<T> memory, w_key, w_value;

  /// Seeds memory rows from the knowledge token embeddings (projected to d
  /// when widths differ, tiled or truncated to m rows). Falls back to a
  /// normal draw when there are no knowledge tokens.
  static DomainMemory init(std::size_t rows, std::size_t d, const KnowledgePrompt<T>& knowledge, Rng& rng) {
    if (rows == 0) fail(ErrorKind::config, "domain memory needs at least one row");
    DomainMemory m;
    std::vector<T> data(rows * d);
    if (knowledge.tokens() == 0) {
      for (auto& v : data) v = static_cast<T>(rng.normal(0.0, 0.02));
    } else {
      const auto& emb = knowledge.token_embeddings();
      const std::size_t de = emb.cols();
      std::vector<T> proj;  // de x d, identity when widths agree
      if (de != d) {
        proj.resize(de * d);
        for (auto& v : proj) v = static_cast<T>(rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(de))));
      }
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t src = r % knowledge.tokens();
        for (std::size_t c = 0; c < d; ++c) {
          if (de == d) {
            data[r * d + c] = emb.at(src, c);
          } else {
            T acc = 0;
            for (std::size_t e = 0; e < de; ++e) acc += emb.at(src, e) * proj[e * d + c];
            data[r * d + c] = acc;
          }
        }
      }
    }
    m.memory = Tensor<T>({rows, d}, std::move(data), true);
    m.w_key = normal_tensor<T>(rng, {d, d}, 0.02);
    m.w_value = normal_tensor<T>(rng, {d, d}, 0.02);
    return m;
  }

  template <class F>
  void visit(F&& f) {
    f(std::string("memory"), memory);
    f(std::string("w_key"), w_key);
    f(std::string("w_value"), w_value);
  }
};

/// Query projection plus the affine map A -> rho rows, squashed by tanh.
template <class T>
struct ReasoningModule {
  Tensor<T> w_query, w_r, b_r;
  std::size_t rho = 8;
  Injection injection = Injection::input;

  /// Width of one prompt row: d for input rows, 2*L*d for per-layer prefixes.
  static std::size_t row_width(Injection inj, const BackboneConfig& cfg) {
    return inj == Injection::input ? cfg.d_model : 2 * cfg.layers * cfg.d_model;
  }

  static ReasoningModule init(std::size_t rho, Injection inj, const BackboneConfig& cfg, Rng& rng) {
    ReasoningModule m;
    m.rho = rho;
    m.injection = inj;
    if (rho == 0) return m;  // no prompt; generator runs unconditioned
    const std::size_t d = cfg.d_model;
    m.w_query = normal_tensor<T>(rng, {d, d}, 0.02);
    m.w_r = normal_tensor<T>(rng, {d, rho * row_width(inj, cfg)}, 0.02);
    m.b_r = Tensor<T>({rho * row_width(inj, cfg)}, T(0), true);
    return m;
  }

  template <class F>
  void visit(F&& f) {
    if (rho == 0) return;
    f(std::string("w_query"), w_query);
    f(std::string("w_r"), w_r);
    f(std::string("b_r"), b_r);
  }
};

template <class T>
struct Attended {
  Tensor<T> pooled;   // 1 x d
  Tensor<T> weights;  // real rows x m
};

/// History rows query the memory; A is the mean attended output over the
/// unmasked rows.
template <class T>
Attended<T> attend(const HistoryMatrix<T>& history, const DomainMemory<T>& mem, const ReasoningModule<T>& mod) {
  std::vector<int> real;
  for (std::size_t i = 0; i < history.mask.size(); ++i)
    if (history.mask[i]) real.push_back(static_cast<int>(i));
  if (real.empty()) fail(ErrorKind::empty, "history has no unmasked rows");
  const std::size_t d = history.rows.cols();
  Tensor<T> h = embedding(history.rows, real);
  Tensor<T> q = matmul(h, mod.w_query);
  Tensor<T> k = matmul(mem.memory, mem.w_key);
  Tensor<T> v = matmul(mem.memory, mem.w_value);
  Tensor<T> scores = scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(d)));
  Tensor<T> w = softmax(scores, 1);
  Tensor<T> out = matmul(w, v);
  Tensor<T> mean_row({1, real.size()}, T(1) / static_cast<T>(real.size()));
  return {matmul(mean_row, out), w};
}

/// tanh(A W_r + b_r) as rho rows.
template <class T>
Tensor<T> build_reasoning_prompt(const HistoryMatrix<T>& history, const DomainMemory<T>& mem,
                                 const ReasoningModule<T>& mod) {
  Tensor<T> a = attend(history, mem, mod).pooled;
  Tensor<T> flat = tanh(add_row(matmul(a, mod.w_r), mod.b_r));
  return reshape(flat, {mod.rho, flat.size() / mod.rho});
}

/// Splits prefix-mode prompt rows into per-layer key/value blocks.
template <class T>
PrefixCache<T> prompt_as_prefix(const Tensor<T>& prompt, const BackboneConfig& cfg) {
  PrefixCache<T> cache;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    cache.keys.push_back(slice_cols(prompt, (2 * l) * cfg.d_model, cfg.d_model));
    cache.values.push_back(slice_cols(prompt, (2 * l + 1) * cfg.d_model, cfg.d_model));
  }
  return cache;
}

/// Trainable stage-two state: generator weights plus the prompt machinery.
template <class T>
struct Generator {
  Backbone<T> backbone;
  DomainMemory<T> memory;
  ReasoningModule<T> reasoning;

  template <class F>
  void visit(F&& f) {
    backbone.visit([&](const std::string& n, Tensor<T>& t) { f("generator." + n, t); });
    memory.visit([&](const std::string& n, Tensor<T>& t) { f("memory." + n, t); });
    reasoning.visit([&](const std::string& n, Tensor<T>& t) { f("reasoning." + n, t); });
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Generator*>(this)->visit([&](const std::string& n, Tensor<T>& t) { f(n, std::as_const(t)); });
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    visit([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  Generator aliased() const {
    Generator g = *this;
    g.visit([](const std::string&, Tensor<T>& t) { t = t.alias(); });
    return g;
  }

  std::uint64_t checksum() const {
    Fnv1a h;
    visit([&](const std::string& n, const Tensor<T>& t) {
      h.update(n);
      h.update(t.values());
    });
    return h.digest();
  }

  /// Generator forward conditioned on the user's reasoning prompt.
  /// `position_offset` shifts every position id; training uses it so the
  /// whole position table gets gradient.
  ForwardOutput<T> forward(const TokenSeq& tokens, const HistoryMatrix<T>& history, std::size_t position_offset = 0) const {
    if (reasoning.rho == 0) return backbone.forward(tokens, nullptr, nullptr, position_offset);
    Tensor<T> prompt = build_reasoning_prompt(history, memory, reasoning);
    if (reasoning.injection == Injection::input) return backbone.forward(tokens, nullptr, &prompt, position_offset);
    PrefixCache<T> cache = prompt_as_prefix(prompt, backbone.config());
    return backbone.forward(tokens, &cache, nullptr, position_offset);
  }

  /// Decoder state positioned after `context`, prompt precomputed.
  DecodeState<T> start_decoding(const TokenSeq& context, const HistoryMatrix<T>& history) const {
    NoGradGuard ng;
    DecodeState<T> st;
    if (reasoning.rho == 0) {
      st.init(backbone, context);
      return st;
    }
    Tensor<T> prompt = build_reasoning_prompt(history, memory, reasoning);
    if (reasoning.injection == Injection::input) {
      st.init(backbone, context, nullptr, &prompt);
    } else {
      PrefixCache<T> cache = prompt_as_prefix(prompt, backbone.config());
      st.init(backbone, context, &cache, nullptr);
    }
    return st;
  }

  /// Rows the prompt occupies in the context budget.
  std::size_t prompt_positions() const { return reasoning.injection == Injection::input ? reasoning.rho : 0; }
};

/// One teacher-forced target: history item indices, the rendered context and
/// the title the generator must produce.
struct GenerationExample {
  std::vector<std::size_t> history;
  TokenSeq context;
  TokenSeq target_title;
};

/// Context + title as input; loss on the title tokens and the closing SEP only.
inline std::pair<TokenSeq, std::vector<int>> teacher_forcing_pair(const GenerationExample& ex) {
  TokenSeq input = ex.context;
  input.insert(input.end(), ex.target_title.begin(), ex.target_title.end());
  std::vector<int> targets(input.size(), -1);
  for (std::size_t i = 0; i < ex.target_title.size(); ++i) targets[ex.context.size() - 1 + i] = ex.target_title[i];
  targets[input.size() - 1] = special::sep;
  return {std::move(input), std::move(targets)};
}

struct StageTwoOptions {
  std::size_t epochs = 40;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::size_t threads = 1;
  std::size_t history_rows = 10;
  std::size_t position_shift = 0;  // largest random position offset per example
};

struct StageTwoReport {
  std::size_t examples_used = 0;
  std::size_t examples_skipped = 0;  // empty target title
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

template <class T>
double generation_loss(const Generator<T>& gen, const GenerationExample& ex,
                       const std::vector<std::vector<T>>& item_vectors, std::size_t history_rows) {
  NoGradGuard ng;
  auto [input, targets] = teacher_forcing_pair(ex);
  auto hist = encode_history(ex.history, item_vectors, history_rows);
  return static_cast<double>(cross_entropy(gen.forward(input, hist).logits, targets, -1).item());
}

/// Teacher-forced NLL on next-item titles. Trains the generator backbone,
/// domain memory and reasoning module; item vectors are constants.
template <class T>
StageTwoReport train_generator(Generator<T>& gen, const std::vector<GenerationExample>& all_examples,
                               const std::vector<std::vector<T>>& item_vectors, const StageTwoOptions& opt, Rng& rng) {
  if (all_examples.empty()) fail(ErrorKind::empty, "stage two needs at least one training example");
  StageTwoReport report;
  std::vector<const GenerationExample*> examples;
  for (const auto& ex : all_examples) {
    if (ex.target_title.empty() || ex.context.empty() || ex.history.empty()) {
      ++report.examples_skipped;
      continue;
    }
    examples.push_back(&ex);
  }
  report.examples_used = examples.size();
  if (examples.empty()) fail(ErrorKind::empty, "every stage-two example has an empty target title");
  gen.visit([](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });

  auto mean_loss = [&] {
    double total = 0;
    for (const auto* ex : examples) total += generation_loss(gen, *ex, item_vectors, opt.history_rows);
    return total / static_cast<double>(examples.size());
  };
  report.initial_loss = mean_loss();

  const std::size_t batch = std::max<std::size_t>(1, opt.batch);
  const std::size_t steps_per_epoch = (examples.size() + batch - 1) / batch;
  Adam<T> adam(gen.parameters(), opt.lr, steps_per_epoch * opt.epochs);
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::size_t> offset(examples.size(), 0);
  const std::size_t max_context = gen.backbone.config().max_context;

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_total = 0;
    for (const auto& b : make_batches(order, batch)) {
      for (std::size_t i : b) {
        const std::size_t used = examples[i]->context.size() + examples[i]->target_title.size() + gen.prompt_positions();
        const std::size_t room = max_context > used ? max_context - used : 0;
        offset[i] = opt.position_shift ? rng.below(std::min(opt.position_shift, room) + 1) : 0;
      }
      adam.zero_grad();
      double l = accumulate_batch<T>(
          gen, b,
          [&](const Generator<T>& local, std::size_t i) {
            const auto& ex = *examples[i];
            auto [input, targets] = teacher_forcing_pair(ex);
            auto hist = encode_history(ex.history, item_vectors, opt.history_rows);
            return cross_entropy(local.forward(input, hist, offset[i]).logits, targets, -1);
          },
          opt.threads);
      if (!std::isfinite(l)) fail(ErrorKind::numeric, "stage two loss became non-finite");
      epoch_total += l * static_cast<double>(b.size());
      adam.step();
    }
    report.epoch_losses.push_back(epoch_total / static_cast<double>(examples.size()));
  }
  report.final_loss = mean_loss();
  return report;
}

}  // namespace lancer
