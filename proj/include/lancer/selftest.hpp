#pragma once

// Built-in checks behind `lancer selftest`: finite-difference gradients on a
// small model and the beam decoder against exhaustive enumeration.

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "lancer/genmap.hpp"
#include "lancer/knowledge.hpp"
#include "lancer/reasoning.hpp"

namespace lancer::selftest {

struct GradReport {
  double worst = 0.0;  // relative error
  std::string where;
  std::size_t checked = 0;
};

/// Central differences for every element of every tensor in `params`.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
inline GradReport gradcheck(const std::function<Tensor<double>()>& loss,
                            std::vector<std::pair<std::string, Tensor<double>>> params, double h = 1e-5) {
  for (auto& [n, p] : params) p.zero_grad();
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (auto& [n, p] : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.size(), 0.0);
  }
  GradReport r;
  NoGradGuard ng;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto vals = params[k].second.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = loss().item();
      vals[i] = orig - h;
      const double down = loss().item();
      vals[i] = orig;
      const double num = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6});
      ++r.checked;
      if (rel > r.worst) {
        r.worst = rel;
        r.where = params[k].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

inline BackboneConfig small_config() {
  BackboneConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_context = 64;
  c.vocab_size = 20;
  return c;
}

/// Pushes weights off their tiny init scale so no gradient sits at rounding level.
template <class M>
void lift(M& m, Rng& rng) {
  m.visit([&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.mutable_values()) v += rng.normal(0.0, 0.3);
  });
}

/// Knowledge-prompt parameters through a frozen backbone (theta = 4).
inline GradReport check_knowledge(std::uint64_t seed) {
  const auto cfg = small_config();
  Rng rng(seed);
  auto bb = Backbone<double>::init(cfg, rng);
  bb.set_trainable(false);
  auto kp = KnowledgePrompt<double>::init(4, cfg.d_model, cfg, rng);
  lift(bb, rng);
  lift(kp, rng);
  const TokenSeq input{1, 7, 8, 9, 10};
  const std::vector<int> target{7, 8, 9, 10, 2};
  auto loss = [&] {
    auto cache = kp.expand();
    return cross_entropy(bb.forward(input, &cache).logits, target, special::pad);
  };
  std::vector<std::pair<std::string, Tensor<double>>> params;
  kp.visit([&](const std::string& n, Tensor<double>& t) { params.emplace_back("knowledge." + n, t); });
  return gradcheck(loss, params);
}

/// Every stage-two parameter (rho = 2) for one injection mode.
inline GradReport check_generator(Injection inj, std::uint64_t seed) {
  const auto cfg = small_config();
  Rng rng(seed);
  auto kp = KnowledgePrompt<double>::init(4, cfg.d_model, cfg, rng);
  Generator<double> g;
  g.backbone = Backbone<double>::init(cfg, rng);
  g.memory = DomainMemory<double>::init(3, cfg.d_model, kp, rng);
  g.reasoning = ReasoningModule<double>::init(2, inj, cfg, rng);
  lift(g, rng);
  std::vector<std::vector<double>> vecs(3, std::vector<double>(cfg.d_model));
  for (auto& v : vecs)
    for (auto& x : v) x = rng.normal();
  const auto hist = encode_history<double>({0, 1, 2}, vecs, 4);
  GenerationExample ex{{0, 1, 2}, {1, 5, 6, 3, 7}, {8, 9}};
  auto [input, targets] = teacher_forcing_pair(ex);
  auto loss = [&] { return cross_entropy(g.forward(input, hist).logits, targets, -1); };
  std::vector<std::pair<std::string, Tensor<double>>> params;
  g.visit([&](const std::string& n, Tensor<double>& t) { params.emplace_back(n, t); });
  return gradcheck(loss, params);
}

/// Logits indexed by decoding step only.
struct StepTable {
  using State = std::size_t;
  std::vector<std::vector<double>> rows;
  State start() const { return 0; }
  const std::vector<double>& logits(State s) const { return rows[std::min(s, rows.size() - 1)]; }
  State extend(State s, int) const { return s + 1; }
  std::size_t vocab_size() const { return rows.front().size(); }
};

/// All complete sequences up to max_steps, best first.
template <class M>
std::vector<Hypothesis> enumerate_all(const M& model, std::size_t max_steps) {
  std::vector<Hypothesis> out;
  std::function<void(const typename M::State&, const Hypothesis&)> walk = [&](const typename M::State& st,
                                                                                const Hypothesis& h) {
    const auto lp = log_softmax(model.logits(st));
    for (std::size_t t = 0; t < lp.size(); ++t) {
      Hypothesis n = h;
      n.tokens.push_back(static_cast<int>(t));
      n.logprob += lp[t];
      if (is_terminal(static_cast<int>(t)) || n.tokens.size() == max_steps) {
        n.finished = true;
        out.push_back(std::move(n));
      } else {
        walk(model.extend(st, static_cast<int>(t)), n);
      }
    }
  };
  walk(model.start(), Hypothesis{});
  std::sort(out.begin(), out.end(), hypothesis_before);
  return out;
}

/// Number of random tables (|V| in 5..10, depth in 1..4, w in 1..3) on which
/// beam search disagrees with enumeration.
inline std::size_t beam_mismatches(std::size_t tables, std::uint64_t seed) {
  Rng rng(seed);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < tables; ++i) {
    const std::size_t vocab = 5 + rng.below(6), depth = 1 + rng.below(4), width = 1 + rng.below(3);
    StepTable m;
    m.rows.assign(depth, std::vector<double>(vocab));
    for (auto& row : m.rows)
      for (auto& v : row) v = rng.normal(0.0, 2.0);
    auto got = beam_search(m, BeamOptions{width, depth, false});
    auto all = enumerate_all(m, depth);
    bool same = got.size() == std::min(width, all.size());
    for (std::size_t k = 0; same && k < got.size(); ++k)
      same = got[k].tokens == all[k].tokens && got[k].logprob == all[k].logprob;
    bad += !same;
  }
  return bad;
}

/// Runs everything, one line per check; true when all pass.
inline bool run(std::ostream& os) {
  bool ok = true;
  auto line = [&](const std::string& name, bool pass, const std::string& detail) {
    os << (pass ? "PASS " : "FAIL ") << name << "  " << detail << "\n";
    ok = ok && pass;
  };
  auto grad = [&](const std::string& name, const GradReport& r) {
    line(name, r.worst < 1e-3,
         "worst relative error " + std::to_string(r.worst) + " at " + r.where + " over " + std::to_string(r.checked));
  };
  grad("gradcheck knowledge prompt", check_knowledge(1));
  grad("gradcheck generator (input)", check_generator(Injection::input, 2));
  grad("gradcheck generator (prefix)", check_generator(Injection::prefix, 3));
  const auto bad = beam_mismatches(50, 4);
  line("beam oracle", bad == 0, std::to_string(bad) + " of 50 tables differ from enumeration");
  return ok;
}

}  // namespace lancer::selftest
