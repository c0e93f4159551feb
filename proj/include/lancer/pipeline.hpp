#pragma once

// Workdir artifacts and the stage-by-stage pipeline behind the CLI.
//
//   catalog.jsonl  dataset.tsv  vocab.tsv        ingest
//   stage1.ckpt  items.tsv                       train-knowledge
//   stage2.ckpt                                  train-reason
//   index.bin                                    build-index
//   metrics.json  metrics_detail.tsv             evaluate

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "lancer/checkpoint.hpp"
#include "lancer/config.hpp"
#include "lancer/dataio.hpp"
#include "lancer/evalkit.hpp"
#include "lancer/genmap.hpp"
#include "lancer/knowledge.hpp"
#include "lancer/reasoning.hpp"

namespace lancer {

/// Exclusive advisory lock on <workdir>/.lock for the life of the object.
class WorkdirLock {
 public:
  explicit WorkdirLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/.lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) fail(ErrorKind::io, "cannot open lock file " + path);
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fail(ErrorKind::locked, "workdir " + dir + " is in use by another process");
    }
  }
  ~WorkdirLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  WorkdirLock(const WorkdirLock&) = delete;
  WorkdirLock& operator=(const WorkdirLock&) = delete;

 private:
  int fd_ = -1;
};

struct Workdir {
  std::string root;
  std::string path(const std::string& name) const { return root + "/" + name; }
  bool has(const std::string& name) const { return std::filesystem::exists(path(name)); }
  void require(const std::string& name, const std::string& producer) const {
    if (!has(name)) fail(ErrorKind::state, name + " not found in " + root + " (run " + producer + " first)");
  }
};

inline void check_hash(const std::string& artifact, const std::string& stored, const std::string& expected, bool force) {
  if (stored == expected || force) return;
  fail(ErrorKind::hash_mismatch, artifact + " was produced by config " + stored + ", current config hashes to " +
                                     expected + " (rerun the producing command or pass --force)");
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Ingested {
  ItemCatalog catalog;
  ProcessedDataset dataset;
  Vocab vocab;
};

/// Reads the raw files, applies the length rule and LOO split, builds the
/// vocabulary and writes catalog.jsonl, dataset.tsv and vocab.tsv.
inline DatasetStats ingest(const RunConfig& cfg, const Workdir& wd) {
  if (cfg.interactions.empty() || cfg.catalog.empty())
    fail(ErrorKind::config, "ingest needs both interactions and catalog paths");
  RawDataset raw = load_dataset(cfg.interactions, cfg.catalog);
  ProcessedDataset ds = process(raw.sequences);
  if (ds.users.empty()) fail(ErrorKind::data, "no user has at least 5 interactions");
  ds.config_hash = cfg.data_hash();
  std::vector<std::string> corpus{template_text()};
  for (const auto& it : raw.catalog.items()) {
    corpus.push_back(it.title);
    corpus.push_back(it.content);
  }
  Vocab vocab = Vocab::build(corpus, cfg.min_freq);
  write_file(wd.path("catalog.jsonl"), catalog_jsonl(raw.catalog));
  write_file(wd.path("dataset.tsv"), ds.serialize(raw.catalog));
  vocab.save(wd.path("vocab.tsv"));
  std::vector<UserSequence> seqs;
  for (const auto& u : ds.users) seqs.push_back({u.user_id, u.items});
  return dataset_stats(seqs);
}

inline Ingested load_ingested(const RunConfig& cfg, const Workdir& wd, bool force) {
  for (const char* f : {"catalog.jsonl", "dataset.tsv", "vocab.tsv"}) wd.require(f, "ingest");
  Ingested in;
  in.catalog = parse_catalog(read_file(wd.path("catalog.jsonl")), wd.path("catalog.jsonl"));
  in.dataset = ProcessedDataset::parse(read_file(wd.path("dataset.tsv")), in.catalog);
  check_hash("dataset.tsv", in.dataset.config_hash, cfg.data_hash(), force);
  in.vocab = Vocab::load(wd.path("vocab.tsv"));
  return in;
}

template <class T>
BackboneConfig model_config(const RunConfig& cfg, const Vocab& vocab) {
  BackboneConfig m = cfg.model;
  m.vocab_size = vocab.size();
  m.validate();
  return m;
}

template <class T>
struct StageOneArtifacts {
  Backbone<T> backbone;  // frozen encoder, also the stage-two starting point
  KnowledgePrompt<T> prompt;
  std::string hash;
};

inline void log_line(std::ostream* log, const std::string& s) {
  if (log) *log << s << std::endl;
}

/// Vectors for the items.tsv cache, keyed by the stage-one checkpoint hash.
template <class T>
ItemIndex item_vector_table(const ItemCatalog& cat, const std::vector<std::vector<T>>& vecs, const std::string& source) {
  ItemIndex t;
  t.source_hash = source;
  t.dim = vecs.empty() ? 0 : vecs.front().size();
  for (std::size_t i = 0; i < cat.size(); ++i) {
    t.ids.push_back(cat[i].item_id);
    t.vectors.emplace_back(vecs[i].begin(), vecs[i].end());
  }
  return t;
}

template <class T>
StageOneReport train_knowledge_stage(const RunConfig& cfg, const Workdir& wd, bool force, std::ostream* log) {
  Ingested in = load_ingested(cfg, wd, force);
  const BackboneConfig mc = model_config<T>(cfg, in.vocab);
  Rng rng(cfg.seed);
  Backbone<T> backbone = Backbone<T>::init(mc, rng);
  const std::size_t de = cfg.knowledge_dim ? cfg.knowledge_dim : mc.d_model;
  KnowledgePrompt<T> prompt = KnowledgePrompt<T>::init(cfg.knowledge_tokens, de, mc, rng);
  StageOneOptions opt{cfg.stage1_epochs, cfg.stage1_lr, cfg.batch, cfg.threads};
  StageOneReport rep;
  if (cfg.knowledge_tokens > 0) {
    rep = train_knowledge_prompt(backbone, prompt, in.vocab, in.catalog, opt, rng);
    for (std::size_t e = 0; e < rep.epoch_losses.size(); ++e)
      log_line(log, "stage1 epoch " + std::to_string(e + 1) + " loss " + fmt_double(rep.epoch_losses[e]));
    if (rep.items_skipped) log_line(log, "stage1 warning: skipped " + std::to_string(rep.items_skipped) + " items with empty content");
  } else {
    log_line(log, "stage1: knowledge_tokens = 0, nothing to train");
  }

  Checkpoint ck;
  ck.set_meta("kind", "stage1");
  ck.set_meta("config_hash", cfg.stage1_hash());
  ck.set_meta("vocab_hash", hex64(in.vocab.hash()));
  ck.set_meta("precision", dtype_name<T>());
  ck.set_meta("vocab_size", std::to_string(mc.vocab_size));
  ck.set_meta("knowledge_tokens", std::to_string(cfg.knowledge_tokens));
  ck.set_meta("knowledge_dim", std::to_string(de));
  ck.set_meta("items_used", std::to_string(rep.items_used));
  ck.set_meta("items_skipped", std::to_string(rep.items_skipped));
  ck.set_meta("initial_loss", fmt_double(rep.initial_loss));
  ck.set_meta("final_loss", fmt_double(rep.final_loss));
  ck.store<T>(backbone, "backbone.");
  ck.store<T>(prompt, "knowledge.");
  ck.save(wd.path("stage1.ckpt"));
  write_file(wd.path("stage1.config"), cfg.serialize());

  auto vecs = encode_catalog(backbone, prompt, in.vocab, in.catalog);
  item_vector_table(in.catalog, vecs, ck.hash()).save(wd.path("items.tsv"));
  return rep;
}

template <class T>
StageOneArtifacts<T> load_stage_one(const RunConfig& cfg, const Workdir& wd, const Vocab& vocab, bool force) {
  wd.require("stage1.ckpt", "train-knowledge");
  Checkpoint ck = Checkpoint::load(wd.path("stage1.ckpt"));
  if (ck.meta("kind") != "stage1") fail(ErrorKind::corruption, "stage1.ckpt is not a stage-one checkpoint");
  check_hash("stage1.ckpt", ck.meta("config_hash"), cfg.stage1_hash(), force);
  if (ck.meta("precision") != dtype_name<T>())
    fail(ErrorKind::config, "stage1.ckpt holds " + ck.meta("precision") + " tensors, config asks for " + dtype_name<T>());
  if (ck.meta("vocab_hash") != hex64(vocab.hash())) fail(ErrorKind::hash_mismatch, "stage1.ckpt was trained on a different vocab.tsv");
  BackboneConfig mc = cfg.model;
  mc.vocab_size = std::stoul(ck.meta("vocab_size"));
  mc.validate();
  Rng dummy(0);
  StageOneArtifacts<T> a;
  a.backbone = Backbone<T>::init(mc, dummy);
  a.prompt = KnowledgePrompt<T>::init(std::stoul(ck.meta("knowledge_tokens")), std::stoul(ck.meta("knowledge_dim")), mc, dummy);
  ck.load_into<T>(a.backbone, "backbone.");
  ck.load_into<T>(a.prompt, "knowledge.");
  a.hash = ck.hash();
  return a;
}

/// Item encodings from items.tsv when it matches the stage-one checkpoint,
/// recomputed (and rewritten) otherwise.
template <class T>
std::vector<std::vector<T>> item_vectors(const Workdir& wd, const StageOneArtifacts<T>& s1, const Vocab& vocab,
                                         const ItemCatalog& cat) {
  if (wd.has("items.tsv")) {
    ItemIndex t = ItemIndex::load(wd.path("items.tsv"));
    if (t.source_hash == s1.hash && t.size() == cat.size()) {
      std::vector<std::vector<T>> out;
      for (const auto& v : t.vectors) out.emplace_back(v.begin(), v.end());
      return out;
    }
  }
  auto vecs = encode_catalog(s1.backbone, s1.prompt, vocab, cat);
  item_vector_table(cat, vecs, s1.hash).save(wd.path("items.tsv"));
  return vecs;
}

/// The last `rows` entries of a history.
inline std::vector<std::size_t> tail(const std::vector<std::size_t>& h, std::size_t rows) {
  if (h.size() <= rows) return h;
  return {h.end() - static_cast<std::ptrdiff_t>(rows), h.end()};
}

/// Context budget left after the prompt rows and a full title plus SEP.
template <class T>
std::size_t context_budget(const Generator<T>& g, std::size_t max_steps) {
  const std::size_t reserve = g.prompt_positions() + max_steps;
  const std::size_t ctx = g.backbone.config().max_context;
  if (reserve >= ctx) fail(ErrorKind::config, "max_context leaves no room for the rendered history");
  return ctx - reserve;
}

template <class T>
std::vector<GenerationExample> generation_examples(const ProcessedDataset& ds, const ItemCatalog& cat, const Vocab& vocab,
                                                   std::size_t budget, std::size_t history_rows) {
  std::vector<GenerationExample> out;
  for (const auto& u : ds.users)
    for (const auto& [hist, next] : u.training_pairs()) {
      GenerationExample ex;
      ex.history = tail(hist, history_rows);
      ex.context = render_context(hist, cat, vocab, budget).tokens;
      ex.target_title = title_tokens(vocab, cat[next].title);
      out.push_back(std::move(ex));
    }
  return out;
}

template <class T>
Generator<T> fresh_generator(const RunConfig& cfg, const StageOneArtifacts<T>& s1, Rng& rng) {
  Generator<T> g;
  g.backbone = s1.backbone.clone();
  g.backbone.set_trainable(true);
  g.memory = DomainMemory<T>::init(cfg.memory_rows, s1.backbone.config().d_model, s1.prompt, rng);
  g.reasoning = ReasoningModule<T>::init(cfg.reasoning_tokens, parse_injection(cfg.injection), s1.backbone.config(), rng);
  return g;
}

template <class T>
StageTwoReport train_reason_stage(const RunConfig& cfg, const Workdir& wd, bool force, std::ostream* log) {
  Ingested in = load_ingested(cfg, wd, force);
  StageOneArtifacts<T> s1 = load_stage_one<T>(cfg, wd, in.vocab, force);
  auto vecs = item_vectors(wd, s1, in.vocab, in.catalog);
  Rng rng(cfg.seed * 2654435761ULL + 1);
  Generator<T> gen = fresh_generator(cfg, s1, rng);
  const auto before = s1.prompt.checksum();
  auto examples = generation_examples<T>(in.dataset, in.catalog, in.vocab, context_budget(gen, cfg.max_steps), cfg.history_rows);
  StageTwoOptions opt{cfg.stage2_epochs, cfg.stage2_lr, cfg.batch, cfg.threads, cfg.history_rows, cfg.position_shift};
  StageTwoReport rep = train_generator(gen, examples, vecs, opt, rng);
  if (s1.prompt.checksum() != before) fail(ErrorKind::state, "knowledge prompt changed during stage two");
  for (std::size_t e = 0; e < rep.epoch_losses.size(); ++e)
    log_line(log, "stage2 epoch " + std::to_string(e + 1) + " loss " + fmt_double(rep.epoch_losses[e]));
  if (rep.examples_skipped)
    log_line(log, "stage2 warning: skipped " + std::to_string(rep.examples_skipped) + " examples with empty targets");

  Checkpoint ck;
  ck.set_meta("kind", "stage2");
  ck.set_meta("config_hash", cfg.stage2_hash());
  ck.set_meta("stage1_hash", s1.hash);
  ck.set_meta("precision", dtype_name<T>());
  ck.set_meta("vocab_size", std::to_string(s1.backbone.config().vocab_size));
  ck.set_meta("reasoning_tokens", std::to_string(cfg.reasoning_tokens));
  ck.set_meta("memory_rows", std::to_string(cfg.memory_rows));
  ck.set_meta("injection", cfg.injection);
  ck.set_meta("examples_used", std::to_string(rep.examples_used));
  ck.set_meta("examples_skipped", std::to_string(rep.examples_skipped));
  ck.set_meta("initial_loss", fmt_double(rep.initial_loss));
  ck.set_meta("final_loss", fmt_double(rep.final_loss));
  ck.store<T>(gen);
  ck.save(wd.path("stage2.ckpt"));
  write_file(wd.path("stage2.config"), cfg.serialize());
  return rep;
}

template <class T>
struct StageTwoArtifacts {
  Generator<T> generator;
  std::string hash;
};

template <class T>
StageTwoArtifacts<T> load_stage_two(const RunConfig& cfg, const Workdir& wd, const StageOneArtifacts<T>& s1, bool force) {
  wd.require("stage2.ckpt", "train-reason");
  Checkpoint ck = Checkpoint::load(wd.path("stage2.ckpt"));
  if (ck.meta("kind") != "stage2") fail(ErrorKind::corruption, "stage2.ckpt is not a stage-two checkpoint");
  check_hash("stage2.ckpt", ck.meta("config_hash"), cfg.stage2_hash(), force);
  check_hash("stage2.ckpt parent", ck.meta("stage1_hash"), s1.hash, force);
  RunConfig shaped = cfg;
  shaped.reasoning_tokens = std::stoul(ck.meta("reasoning_tokens"));
  shaped.memory_rows = std::stoul(ck.meta("memory_rows"));
  shaped.injection = ck.meta("injection");
  Rng dummy(0);
  StageTwoArtifacts<T> a{fresh_generator(shaped, s1, dummy), ck.hash()};
  ck.load_into<T>(a.generator);
  return a;
}

template <class T>
ItemIndex build_index_stage(const RunConfig& cfg, const Workdir& wd, bool force) {
  Ingested in = load_ingested(cfg, wd, force);
  auto s1 = load_stage_one<T>(cfg, wd, in.vocab, force);
  auto s2 = load_stage_two<T>(cfg, wd, s1, force);
  ItemIndex idx = build_index(in.catalog, in.vocab, s2.generator.backbone.token_embedding(), s2.hash);
  idx.save(wd.path("index.bin"));
  return idx;
}

/// Everything needed to serve recommendations.
template <class T>
struct Serving {
  Ingested in;
  StageOneArtifacts<T> s1;
  StageTwoArtifacts<T> s2;
  ItemIndex index;
  std::vector<std::vector<T>> vectors;

  std::vector<Recommendation> recommend_for(const std::vector<std::size_t>& history, const RunConfig& cfg,
                                            std::size_t k) const {
    if (history.empty()) fail(ErrorKind::empty, "empty history");
    RecommendOptions opt;
    opt.k = k;
    opt.width = cfg.beam_width ? cfg.beam_width : k + 5;
    opt.max_steps = cfg.max_steps;
    opt.decoder = parse_decoder(cfg.decoder);
    opt.temperature = cfg.temperature;
    opt.seed = cfg.seed;
    const auto& g = s2.generator;
    auto ctx = render_context(history, in.catalog, in.vocab, context_budget(g, cfg.max_steps)).tokens;
    auto hm = encode_history(tail(history, cfg.history_rows), vectors, cfg.history_rows);
    return recommend(g, ctx, hm, index, opt);
  }
};

template <class T>
Serving<T> load_serving(const RunConfig& cfg, const Workdir& wd, bool force) {
  Serving<T> s{load_ingested(cfg, wd, force), {}, {}, {}, {}};
  s.s1 = load_stage_one<T>(cfg, wd, s.in.vocab, force);
  s.s2 = load_stage_two<T>(cfg, wd, s.s1, force);
  wd.require("index.bin", "build-index");
  s.index = ItemIndex::load(wd.path("index.bin"));
  check_hash("index.bin", s.index.source_hash, s.s2.hash, force);
  if (s.index.size() != s.in.catalog.size()) fail(ErrorKind::corruption, "index.bin does not cover the catalog");
  s.vectors = item_vectors(wd, s.s1, s.in.vocab, s.in.catalog);
  return s;
}

/// All-ranking evaluation of every user's test target; writes metrics.json
/// (and metrics_detail.tsv when asked).
template <class T>
MetricsReport evaluate_stage(const RunConfig& cfg, const Workdir& wd, bool force, bool detail) {
  Serving<T> s = load_serving<T>(cfg, wd, force);
  std::vector<EvalCase> cases;
  for (const auto& u : s.in.dataset.users) cases.push_back({u.user_id, s.in.catalog[u.test_target()].item_id});
  const std::size_t k = std::max<std::size_t>(cfg.max_k(), 10);
  MetricsReport rep = evaluate_rankings(cases, [&](std::size_t i) {
    std::vector<std::string> ids;
    for (const auto& r : s.recommend_for(s.in.dataset.users[i].test_history(), cfg, k)) ids.push_back(r.item_id);
    return ids;
  });
  rep.seed = cfg.seed;
  rep.checkpoint_hash = s.s2.hash;
  write_file(wd.path("metrics.json"), rep.json());
  if (detail) write_file(wd.path("metrics_detail.tsv"), rep.detail_tsv());
  return rep;
}

/// ingest through evaluate in one go.
template <class T>
MetricsReport run_pipeline(const RunConfig& cfg, const Workdir& wd, std::ostream* log, bool detail = false) {
  ingest(cfg, wd);
  train_knowledge_stage<T>(cfg, wd, false, log);
  train_reason_stage<T>(cfg, wd, false, log);
  build_index_stage<T>(cfg, wd, false);
  return evaluate_stage<T>(cfg, wd, false, detail);
}

}  // namespace lancer
