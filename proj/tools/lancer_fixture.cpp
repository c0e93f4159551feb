// Writes a synthetic catalog.jsonl and interactions.tsv with a known
// successor rule (item k is followed by k+1 mod n with probability --rule).

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "lancer/dataio.hpp"
#include "lancer/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"lancer-fixture: synthetic successor datasets"};
  std::string out;
  std::size_t items = 50, users = 200, min_len = 5, max_len = 12;
  double rule = 1.0;
  std::uint64_t seed = 7;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--items", items, "catalog size");
  app.add_option("--users", users, "number of users");
  app.add_option("--rule", rule, "probability of following the successor rule")->check(CLI::Range(0.0, 1.0));
  app.add_option("--min-len", min_len, "shortest log");
  app.add_option("--max-len", max_len, "longest log");
  app.add_option("--seed", seed, "generator seed");
  CLI11_PARSE(app, argc, argv);
  if (items < 2 || users == 0 || min_len == 0 || max_len < min_len) {
    std::cerr << "error: config: need items >= 2, users >= 1 and 1 <= min-len <= max-len\n";
    return 3;
  }
  try {
    std::filesystem::create_directories(out);
    lancer::write_file(out + "/catalog.jsonl", lancer::catalog_jsonl(lancer::synthetic::catalog(items, seed)));
    lancer::write_file(out + "/interactions.tsv",
                       lancer::synthetic::interactions_tsv(
                           lancer::synthetic::successor_logs(users, items, rule, min_len, max_len, seed + 1)));
  } catch (const lancer::Error& e) {
    std::cerr << "error: " << lancer::kind_name(e.kind()) << ": " << e.what() << "\n";
    return 1;
  }
  std::cout << out << "/catalog.jsonl\n" << out << "/interactions.tsv\n";
  return 0;
}
