#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "lancer/checkpoint.hpp"
#include "lancer/config.hpp"
#include "lancer/reasoning.hpp"

using namespace lancer;

namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.max_context = 32;
  c.vocab_size = 12;
  return c;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorKind::state;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("lancer_ckpt_" + name)).string();
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  Rng rng(1);
  auto bb = Backbone<float>::init(small(), rng);
  Checkpoint ck;
  ck.set_meta("kind", "test");
  ck.store<float>(bb, "backbone.");
  const auto path = tmp_path("roundtrip");
  ck.save(path);
  auto back = Checkpoint::load(path);
  EXPECT_EQ(back.serialize(), ck.serialize());
  EXPECT_EQ(back.hash(), ck.hash());
  EXPECT_EQ(back.meta("kind"), "test");

  Rng other(2);
  auto bb2 = Backbone<float>::init(small(), other);
  back.load_into<float>(bb2, "backbone.");
  EXPECT_EQ(bb2.checksum(), bb.checksum());
  std::filesystem::remove(path);
}

TEST(Checkpoint, DoubleTensorsAreBitExact) {
  Rng rng(3);
  auto t = normal_tensor<double>(rng, {3, 5}, 1.0);
  Checkpoint ck;
  ck.put("t", t);
  auto back = Checkpoint::parse(ck.serialize()).get<double>("t");
  ASSERT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.values().data(), t.values().data(), t.size() * sizeof(double)), 0);
  EXPECT_EQ(kind_of([&] { Checkpoint::parse(ck.serialize()).get<float>("t"); }), ErrorKind::config);
}

TEST(Checkpoint, TruncationAndBitFlipsAreCorruption) {
  Rng rng(4);
  Checkpoint ck;
  ck.put("w", normal_tensor<float>(rng, {4, 4}, 1.0));
  const auto bytes = ck.serialize();
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_EQ(kind_of([&] { Checkpoint::parse(bytes.substr(0, cut)); }), ErrorKind::corruption) << cut;
  for (std::size_t pos : {std::size_t{20}, bytes.size() / 2, bytes.size() - 12}) {
    auto flipped = bytes;
    flipped[pos] = static_cast<char>(flipped[pos] ^ 0x40);
    EXPECT_EQ(kind_of([&] { Checkpoint::parse(flipped); }), ErrorKind::corruption) << pos;
  }
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of([&] { Checkpoint::parse(bad_magic); }), ErrorKind::corruption);
}

TEST(Checkpoint, VersionSkewIsExplicit) {
  Checkpoint ck;
  ck.set_meta("kind", "x");
  auto bytes = ck.serialize();
  bytes[8] = 7;  // little-endian version word follows the magic
  EXPECT_EQ(kind_of([&] { Checkpoint::parse(bytes); }), ErrorKind::version);
}

TEST(Checkpoint, MissingTensorAndShapeMismatch) {
  Rng rng(5);
  auto bb = Backbone<float>::init(small(), rng);
  Checkpoint ck;
  ck.store<float>(bb, "backbone.");
  auto cfg = small();
  cfg.d_model = 16;
  auto wider = Backbone<float>::init(cfg, rng);
  EXPECT_EQ(kind_of([&] { ck.load_into<float>(wider, "backbone."); }), ErrorKind::corruption);
  EXPECT_EQ(kind_of([&] { ck.load_into<float>(bb, "other."); }), ErrorKind::corruption);
  EXPECT_EQ(kind_of([] { Checkpoint::load("/nonexistent/lancer.ckpt"); }), ErrorKind::io);
}

TEST(RunConfig, FileThenOverridesAndValidation) {
  RunConfig c;
  c.merge_text("# comment\nd_model = 32\nn_heads = 4   # trailing\n\nstage2_lr = 0.01\n", "run.cfg");
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.model.n_heads, 4u);
  EXPECT_DOUBLE_EQ(c.stage2_lr, 0.01);
  c.set("d_model", "48");
  EXPECT_EQ(c.model.d_model, 48u);
  EXPECT_NO_THROW(c.validate());

  RunConfig back;
  back.merge_text(c.serialize(), "copy");
  EXPECT_EQ(back.serialize(), c.serialize());

  EXPECT_EQ(kind_of([] { RunConfig().merge_text("nonsense_key = 1\n", "f"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { RunConfig().merge_text("layers\n", "f"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { RunConfig().set("layers", "-2"); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { RunConfig().set("stage1_lr", "fast"); }), ErrorKind::config);
  auto invalid = [](const std::string& key, const std::string& value) {
    RunConfig r;
    r.set(key, value);
    return kind_of([&] { r.validate(); });
  };
  EXPECT_EQ(invalid("n_heads", "3"), ErrorKind::config);
  EXPECT_EQ(invalid("injection", "middle"), ErrorKind::config);
  EXPECT_EQ(invalid("precision", "f16"), ErrorKind::config);
  EXPECT_EQ(invalid("k_list", "5,0"), ErrorKind::config);
  EXPECT_EQ(invalid("beam_width", "3"), ErrorKind::config);
  EXPECT_EQ(invalid("knowledge_tokens", "65"), ErrorKind::config);
}

TEST(RunConfig, StageHashesCoverOnlyTheirKeys) {
  RunConfig a, b;
  b.k_list = "1,3";
  b.beam_width = 20;
  EXPECT_EQ(a.stage2_hash(), b.stage2_hash());
  b.reasoning_tokens = 4;
  EXPECT_EQ(a.stage1_hash(), b.stage1_hash());
  EXPECT_NE(a.stage2_hash(), b.stage2_hash());
  b.knowledge_tokens = 0;
  EXPECT_NE(a.stage1_hash(), b.stage1_hash());
  EXPECT_EQ(a.data_hash(), b.data_hash());
  b.min_freq = 2;
  EXPECT_NE(a.data_hash(), b.data_hash());
}
