#include <gtest/gtest.h>

#include <map>
#include <sstream>

#include "lancer/dataio.hpp"
#include "lancer/synthetic.hpp"

using namespace lancer;

namespace {

ItemCatalog abc_catalog() {
  return parse_catalog(
      "{\"item_id\":\"a\",\"title\":\"Alpha One\",\"content\":\"alpha one . a story\"}\n"
      "{\"item_id\":\"b\",\"title\":\"Bravo\"}\n"
      "{\"item_id\":\"c\",\"title\":\"Charlie Two\"}\n"
      "{\"item_id\":\"d\",\"title\":\"Delta\"}\n"
      "{\"item_id\":\"e\",\"title\":\"Echo\"}\n"
      "{\"item_id\":7,\"title\":\"Seven\"}\n");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return std::string(kind_name(e.kind())) + ": " + e.what();
  }
  return "";
}

}  // namespace

TEST(Catalog, JsonLinesParsing) {
  auto cat = abc_catalog();
  ASSERT_EQ(cat.size(), 6u);
  EXPECT_EQ(cat[1].content, "Bravo");
  EXPECT_EQ(cat[5].item_id, "7");
  EXPECT_NE(error_of([] { parse_catalog("{\"item_id\":\"a\",\"title\":\"x\"}\n{oops\n"); }).find(":2:"), std::string::npos);
  EXPECT_NE(error_of([] { parse_catalog("{\"item_id\":\"a\"}\n"); }).find("parse"), std::string::npos);
  EXPECT_NE(error_of([] { parse_catalog("{\"item_id\":\"a\",\"title\":\"\"}\n"); }).find("empty title"), std::string::npos);
  EXPECT_NE(error_of([] { parse_catalog("{\"item_id\":\"a\",\"title\":\"x\"}\n{\"item_id\":\"a\",\"title\":\"y\"}\n"); })
                .find("duplicate"),
            std::string::npos);
  EXPECT_EQ(parse_catalog(catalog_jsonl(cat)).items().size(), 6u);
}

TEST(Interactions, SortedByTimestampWithStableTies) {
  auto cat = abc_catalog();
  auto seqs = parse_interactions("u1\tc\t30\nu1\ta\t10\nu1\tb\t20\nu2\td\t5\nu2\te\t5\n", cat);
  ASSERT_EQ(seqs.size(), 2u);
  EXPECT_EQ(seqs[0].user_id, "u1");
  EXPECT_EQ(seqs[0].items, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(seqs[1].items, (std::vector<std::size_t>{3, 4}));
}

TEST(Interactions, CollapsesConsecutiveDuplicates) {
  auto cat = abc_catalog();
  auto seqs = parse_interactions("u\ta\t1\nu\ta\t1\nu\tb\t2\nu\ta\t3\n", cat);
  EXPECT_EQ(seqs[0].items, (std::vector<std::size_t>{0, 1, 0}));
}

TEST(Interactions, Errors) {
  auto cat = abc_catalog();
  auto dangling = error_of([&] { parse_interactions("u\ta\t1\nu\tzz\t2\nu\tyy\t3\n", cat); });
  EXPECT_NE(dangling.find("data"), std::string::npos);
  EXPECT_NE(dangling.find("yy, zz"), std::string::npos);
  auto bad_ts = error_of([&] { parse_interactions("u\ta\t1\nu\tb\tnoon\n", cat, "f.tsv"); });
  EXPECT_NE(bad_ts.find("f.tsv:2:"), std::string::npos);
  auto bad_cols = error_of([&] { parse_interactions("u\ta\n", cat); });
  EXPECT_NE(bad_cols.find(":1:"), std::string::npos);
}

TEST(Interactions, HundredUserFixtureMatchesRecount) {
  auto cat = synthetic::catalog(30, 1);
  auto logs = synthetic::successor_logs(100, 30, 0.8, 3, 14, 2);
  const std::string tsv = synthetic::interactions_tsv(logs);
  // recount straight from the text
  std::map<std::string, std::size_t> count;
  std::istringstream is(tsv);
  std::string line;
  while (std::getline(is, line)) ++count[line.substr(0, line.find('\t'))];
  auto seqs = parse_interactions(tsv, cat);
  ASSERT_EQ(seqs.size(), 100u);
  for (const auto& s : seqs) EXPECT_EQ(s.items.size(), count[s.user_id]);
}

TEST(LengthRules, DropTruncateKeep) {
  std::vector<UserSequence> in{{"twelve", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}},
                               {"four", {0, 1, 2, 3}},
                               {"seven", {6, 5, 4, 3, 2, 1, 0}}};
  auto out = apply_length_rules(in);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].items, (std::vector<std::size_t>{2, 3, 4, 5, 6, 7, 8, 9, 10, 11}));
  EXPECT_EQ(out[1].items, in[2].items);
}

TEST(LengthRules, EveryKeptLengthInRange) {
  auto cat = synthetic::catalog(20, 3);
  auto seqs = parse_interactions(synthetic::interactions_tsv(synthetic::successor_logs(60, 20, 0.5, 1, 20, 4)), cat);
  for (const auto& s : apply_length_rules(seqs)) {
    EXPECT_GE(s.items.size(), 5u);
    EXPECT_LE(s.items.size(), 10u);
  }
}

TEST(LeaveOneOut, Markers) {
  auto s = split_leave_one_out({"u", {0, 1, 2, 3, 4}});
  EXPECT_EQ(s.test_target(), 4u);
  EXPECT_EQ(s.valid_target(), 3u);
  EXPECT_EQ(s.train_region(), (std::vector<std::size_t>{0, 1, 2}));
  auto pairs = s.training_pairs();
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].first, (std::vector<std::size_t>{0}));
  EXPECT_EQ(pairs[0].second, 1u);
  EXPECT_EQ(pairs[1].first, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(pairs[1].second, 2u);
  EXPECT_EQ(s.test_history(), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_THROW(split_leave_one_out({"u", {0, 1, 2, 3}}), Error);
}

TEST(RenderContext, LayoutAndRecount) {
  auto cat = abc_catalog();
  std::vector<std::string> corpus{template_text()};
  for (const auto& it : cat.items()) corpus.push_back(it.title);
  auto vocab = Vocab::build(corpus, 1);
  auto r = render_context({0, 1, 2}, cat, vocab);
  std::size_t expect = 1 + tokenize(default_instruction).size() + tokenize(default_cue).size();
  for (std::size_t i : {0, 1, 2}) expect += tokenize(cat[i].title).size() + 1;
  EXPECT_EQ(r.tokens.size(), expect);
  EXPECT_EQ(r.items_kept, 3u);
  EXPECT_EQ(r.items_dropped, 0u);
  EXPECT_EQ(vocab.decode(r.tokens),
            "<bos> a user watched the following items : alpha one <sep> bravo <sep> charlie two <sep> next :");
  ASSERT_EQ(r.item_starts.size(), 3u);
  EXPECT_EQ(r.tokens[r.item_starts[1]], vocab.id("bravo"));
}

TEST(RenderContext, TitleCapAndBudget) {
  ItemCatalog cat;
  std::string long_title;
  for (int i = 0; i < 50; ++i) long_title += "w" + std::to_string(i) + " ";
  cat.add({"long", long_title, ""});
  for (int i = 0; i < 10; ++i) cat.add({"i" + std::to_string(i), "short title " + std::to_string(i), ""});
  std::vector<std::string> corpus{template_text(), long_title, "short title 0 1 2 3 4 5 6 7 8 9"};
  auto vocab = Vocab::build(corpus, 1);
  auto r = render_context({0}, cat, vocab);
  EXPECT_EQ(r.tokens.size(), 1 + 7 + 32 + 1 + 2u);

  std::vector<std::size_t> ten{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto full = render_context(ten, cat, vocab);
  EXPECT_EQ(full.items_dropped, 0u);
  EXPECT_LT(full.tokens.size(), 512u);
  auto tight = render_context(ten, cat, vocab, 40);
  EXPECT_LE(tight.tokens.size(), 40u);
  EXPECT_GT(tight.items_dropped, 0u);
  // newest survive: the last segment is item 10's title
  EXPECT_EQ(tight.tokens[tight.item_starts.back() + 2], vocab.id("9"));
  EXPECT_THROW(render_context(ten, cat, vocab, 12), Error);
  EXPECT_THROW(render_context({}, cat, vocab), Error);
}

TEST(RenderContext, TestTargetNeverInItsContext) {
  auto cat = synthetic::catalog(50, 5);
  std::vector<std::string> corpus{template_text()};
  for (const auto& it : cat.items()) corpus.push_back(it.content);
  auto vocab = Vocab::build(corpus, 1);
  auto seqs = apply_length_rules(parse_interactions(synthetic::interactions_tsv(synthetic::successor_logs(40, 50, 1.0, 5, 10, 6)), cat));
  for (const auto& s : seqs) {
    auto split = split_leave_one_out(s);
    auto ctx = render_context(split.test_history(), cat, vocab);
    auto name = vocab.id(tokenize(cat[split.test_target()].title)[0]);
    EXPECT_EQ(std::count(ctx.tokens.begin(), ctx.tokens.end(), name), 0) << s.user_id;
  }
}

TEST(Stats, TableOneRows) {
  auto ml = dataset_stats(6040, 3231, 72480);
  EXPECT_EQ(ml.sparsity_text(), "99.63%");
  EXPECT_EQ(ml.avg_per_user_text(), "12.00");
  EXPECT_EQ(ml.avg_per_item_text(), "22.43");
  auto gr = dataset_stats(120968, 28480, 1095758);
  EXPECT_EQ(gr.sparsity_text(), "99.97%");
  EXPECT_EQ(gr.avg_per_user_text(), "9.06");
  EXPECT_EQ(gr.avg_per_item_text(), "38.47");
  EXPECT_EQ(dataset_stats(1, 1, 1).sparsity_text(), "0.00%");
  EXPECT_THROW(dataset_stats(0, 3, 0), Error);
  EXPECT_EQ(ml.json(),
            "{\"users\":6040,\"items\":3231,\"interactions\":72480,\"sparsity\":\"99.63%\",\"avg_per_user\":\"12.00\","
            "\"avg_per_item\":\"22.43\"}");
}

TEST(Stats, FromSequences) {
  std::vector<UserSequence> seqs{{"a", {0, 1, 2, 3, 4}}, {"b", {1, 2, 3, 4, 5, 6}}};
  auto s = dataset_stats(seqs);
  EXPECT_EQ(s.users, 2u);
  EXPECT_EQ(s.items, 7u);
  EXPECT_EQ(s.interactions, 11u);
}

TEST(ProcessedDataset, RoundTripAndTamperDetection) {
  auto cat = synthetic::catalog(20, 7);
  auto d = process(parse_interactions(synthetic::interactions_tsv(synthetic::successor_logs(30, 20, 1.0, 3, 12, 8)), cat));
  d.config_hash = "cafe";
  const auto text = d.serialize(cat);
  auto back = ProcessedDataset::parse(text, cat);
  EXPECT_EQ(back.serialize(cat), text);
  EXPECT_EQ(back.config_hash, "cafe");
  ASSERT_EQ(back.users.size(), d.users.size());
  auto tampered = text;
  tampered[tampered.find("item_0")] = 'X';
  EXPECT_THROW(ProcessedDataset::parse(tampered, cat), Error);
}
