#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "lancer/pipeline.hpp"
#include "lancer/selftest.hpp"

using namespace lancer;

namespace {

constexpr int exit_failure = 1;
constexpr int exit_usage = 2;
constexpr int exit_config = 3;

std::string flag_name(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

struct Context {
  RunConfig cfg;
  bool force = false;
  Workdir wd;
};

template <class T>
int train_knowledge(const Context& c) {
  auto rep = train_knowledge_stage<T>(c.cfg, c.wd, c.force, &std::cerr);
  std::cout << "stage1.ckpt items " << rep.items_used << " initial_loss " << fmt_double(rep.initial_loss)
            << " final_loss " << fmt_double(rep.final_loss) << "\n";
  return 0;
}

template <class T>
int train_reason(const Context& c) {
  auto rep = train_reason_stage<T>(c.cfg, c.wd, c.force, &std::cerr);
  std::cout << "stage2.ckpt examples " << rep.examples_used << " initial_loss " << fmt_double(rep.initial_loss)
            << " final_loss " << fmt_double(rep.final_loss) << "\n";
  return 0;
}

template <class T>
int index(const Context& c) {
  auto idx = build_index_stage<T>(c.cfg, c.wd, c.force);
  std::cout << "index.bin items " << idx.size() << " dim " << idx.dim << "\n";
  return 0;
}

template <class T>
int evaluate(const Context& c, bool detail) {
  std::cout << evaluate_stage<T>(c.cfg, c.wd, c.force, detail).json();
  return 0;
}

template <class T>
int recommend_cmd(const Context& c, const std::string& history, std::size_t k) {
  Serving<T> s = load_serving<T>(c.cfg, c.wd, c.force);
  std::vector<std::size_t> items;
  for (const auto& id : split(history, ','))
    if (!id.empty()) items.push_back(s.in.catalog.index_of(id));
  if (items.empty()) fail(ErrorKind::empty, "--user-history names no items");
  std::size_t rank = 0;
  for (const auto& r : s.recommend_for(items, c.cfg, k))
    std::cout << ++rank << '\t' << r.item_id << '\t' << fmt_double(r.score) << '\t'
              << s.in.vocab.decode(r.generated, true) << "\n";
  return 0;
}

int stats_cmd(const Context& c, std::optional<std::size_t> users, std::optional<std::size_t> items,
              std::optional<std::size_t> n) {
  if (users || items || n) {
    if (!users || !items || !n) fail(ErrorKind::config, "stats needs --users, --items and --n-interactions together");
    std::cout << dataset_stats(*users, *items, *n).json() << "\n";
    return 0;
  }
  std::vector<UserSequence> seqs;
  if (!c.wd.root.empty() && c.wd.has("dataset.tsv")) {
    Ingested in = load_ingested(c.cfg, c.wd, c.force);
    for (const auto& u : in.dataset.users) seqs.push_back({u.user_id, u.items});
  } else {
    if (c.cfg.interactions.empty() || c.cfg.catalog.empty())
      fail(ErrorKind::config, "stats needs counts, an ingested workdir, or interactions and catalog paths");
    for (const auto& u : process(load_dataset(c.cfg.interactions, c.cfg.catalog).sequences).users)
      seqs.push_back({u.user_id, u.items});
  }
  std::cout << dataset_stats(seqs).json() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lancer: sequential recommendation with knowledge and reasoning prompts"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string config_file;
  bool force = false;
  app.add_option("--config", config_file, "key = value config file");
  app.add_flag("--force", force, "accept artifacts produced under a different config");

  // one flag per config key; flags beat the config file
  RunConfig defaults;
  std::map<std::string, std::string> overrides;
  std::map<std::string, CLI::Option*> flags;
  for (const auto& [key, value] : defaults.entries())
    flags[key] = app.add_option(flag_name(key), overrides[key], "default: " + (value.empty() ? "(none)" : value));

  auto* ingest_cmd = app.add_subcommand("ingest", "read raw files, split, build the vocabulary");
  auto* k1 = app.add_subcommand("train-knowledge", "stage one: fit the knowledge prompt");
  auto* k2 = app.add_subcommand("train-reason", "stage two: fit generator, memory and reasoning module");
  auto* idx = app.add_subcommand("build-index", "embed every catalog title");
  auto* eval = app.add_subcommand("evaluate", "leave-one-out test metrics into metrics.json");
  bool detail = false;
  eval->add_flag("--detail", detail, "also write metrics_detail.tsv");
  auto* rec = app.add_subcommand("recommend", "rank items for one history");
  std::string history;
  std::size_t k = 10;
  rec->add_option("--user-history", history, "comma-separated item ids, oldest first")->required();
  rec->add_option("--k", k, "list length");
  auto* st = app.add_subcommand("stats", "dataset statistics as JSON");
  std::optional<std::size_t> users, items, n_inter;
  st->add_option("--users", users);
  st->add_option("--items", items);
  st->add_option("--n-interactions", n_inter);
  auto* self = app.add_subcommand("selftest", "gradient check and beam oracle");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n" << app.help();
    return exit_usage;
  }

  try {
    if (self->parsed()) return selftest::run(std::cout) ? 0 : exit_failure;

    Context c;
    c.force = force;
    if (const char* env = std::getenv("LANCER_WORKDIR")) c.cfg.workdir = env;
    if (!config_file.empty()) c.cfg.merge_text(read_file(config_file), config_file);
    for (const auto& [key, opt] : flags)
      if (opt->count()) c.cfg.set(key, overrides[key]);
    c.cfg.validate();
    c.wd.root = c.cfg.workdir;

    const bool counts_only = st->parsed() && (users || items || n_inter);
    if (!counts_only && c.wd.root.empty() && !st->parsed())
      fail(ErrorKind::config, "no workdir: pass --workdir or set LANCER_WORKDIR");
    std::optional<WorkdirLock> lock;
    if (!c.wd.root.empty() && !counts_only) lock.emplace(c.wd.root);

    const bool f64 = c.cfg.precision == "f64";
    if (ingest_cmd->parsed()) {
      std::cout << ingest(c.cfg, c.wd).json() << "\n";
      return 0;
    }
    if (k1->parsed()) return f64 ? train_knowledge<double>(c) : train_knowledge<float>(c);
    if (k2->parsed()) return f64 ? train_reason<double>(c) : train_reason<float>(c);
    if (idx->parsed()) return f64 ? index<double>(c) : index<float>(c);
    if (eval->parsed()) return f64 ? evaluate<double>(c, detail) : evaluate<float>(c, detail);
    if (rec->parsed()) return f64 ? recommend_cmd<double>(c, history, k) : recommend_cmd<float>(c, history, k);
    if (st->parsed()) return stats_cmd(c, users, items, n_inter);
  } catch (const Error& e) {
    std::cerr << "error: " << kind_name(e.kind()) << ": " << e.what() << "\n";
    return e.kind() == ErrorKind::config ? exit_config : exit_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return exit_failure;
  }
  return exit_usage;
}
