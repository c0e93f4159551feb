#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "lancer/adam.hpp"
#include "lancer/ops.hpp"
#include "lancer/rng.hpp"

using namespace lancer;
using Td = Tensor<double>;

namespace {

Td mat(std::size_t r, std::size_t c, std::vector<double> v, bool grad = false) { return Td({r, c}, std::move(v), grad); }

Td random(Rng& rng, Shape s, double sd = 1.0) { return normal_tensor<double>(rng, std::move(s), sd, true); }

}  // namespace

TEST(Matmul, IdentityAndRowSums) {
  auto eye = mat(2, 2, {1, 0, 0, 1});
  auto a = mat(2, 2, {1, 2, 3, 4});
  auto p = matmul(eye, a);
  EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{1, 2, 3, 4}));
  auto s = matmul(a, mat(2, 1, {1, 1}));
  EXPECT_EQ(s.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(s[0], 3);
  EXPECT_DOUBLE_EQ(s[1], 7);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Td({2, 3}), Td({2, 3}));
    FAIL() << "expected a dimension error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::dimension);
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos);
  }
}

TEST(Matmul, AssociativeInDoublePrecision) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random(rng, {4, 4}), b = random(rng, {4, 4}), c = random(rng, {4, 4});
    auto l = matmul(matmul(a, b), c), r = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(l[i], r[i], 1e-9);
  }
}

TEST(Softmax, AnalyticCases) {
  auto u = softmax(Td({4}, 0.0), 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(u[i], 0.25, 1e-12);
  auto t = softmax(Td({2}, {0.0, std::log(3.0)}), 0);
  EXPECT_NEAR(t[0], 0.25, 1e-12);
  EXPECT_NEAR(t[1], 0.75, 1e-12);
}

TEST(Softmax, SumsToOneOverSeededDraws) {
  Rng rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = Td({5}, 0.0);
    for (auto& v : x.mutable_values()) v = rng.uniform() * 100.0 - 50.0;
    auto y = softmax(x, 0);
    double s = 0;
    for (double v : y.values()) {
      EXPECT_GT(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, AlongEitherAxisOfAMatrix) {
  Rng rng(3);
  auto x = random(rng, {3, 4}, 5.0);
  auto rows = softmax(x, 1);
  auto cols = softmax(x, 0);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += rows.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  for (std::size_t c = 0; c < 4; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 3; ++r) s += cols.at(r, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(softmax(x, 2), Error);
}

TEST(Softmax, PositiveAtLargeMagnitudes) {
  auto x = Td({3}, {50.0, -50.0, 0.0});
  auto y = softmax(x, 0);
  for (double v : y.values()) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GT(v, 0.0);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  auto logits = Td({1, 4}, 0.0);
  for (int target = 0; target < 4; ++target)
    EXPECT_NEAR(cross_entropy(logits, {target}, -1).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectLogit) {
  auto logits = mat(1, 2, {10, -10});
  EXPECT_NEAR(cross_entropy(logits, {0}, -1).item(), 2.0611536942919273e-09, 1e-15);
}

TEST(CrossEntropy, IgnoredPositionExcludedFromMean) {
  // Per-row NLLs computed independently: lse(1,2,0)-2 and lse(3,1,2)-2.
  auto logits = mat(3, 3, {1, 2, 0, 0, 0, 0, 3, 1, 2});
  EXPECT_NEAR(cross_entropy(logits, {1, -1, 2}, -1).item(), 0.9076059644443801, 1e-12);
}

TEST(CrossEntropy, Errors) {
  auto logits = Td({2, 3}, 0.0);
  try {
    cross_entropy(logits, {-1, -1}, -1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::empty);
  }
  try {
    cross_entropy(logits, {0, 3}, -1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::index);
  }
}

TEST(Backward, SquareAtThree) {
  auto x = Td::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, UntrackedGraphLeavesGradientsEmpty) {
  auto a = Td::scalar(2.0), b = Td::scalar(5.0);
  auto loss = mul(add(a, b), b);
  EXPECT_FALSE(loss.requires_grad());
  backward(loss);
  EXPECT_FALSE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Backward, RejectsNonScalar) {
  auto x = Td({2}, 1.0, true);
  EXPECT_THROW(backward(scale(x, 2.0)), Error);
}

TEST(Backward, AccumulatesUntilZeroed) {
  auto x = Td::scalar(3.0, true);
  backward(mul(x, x));
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, SharedSubexpressionCountedPerUse) {
  auto x = Td::scalar(2.0, true);
  auto y = mul(x, x);       // 4
  auto z = add(y, mul(y, x));  // y + y*x
  backward(z);
  // dz/dx = 2x + 3x^2 = 4 + 12
  EXPECT_DOUBLE_EQ(x.grad()[0], 16.0);
}

TEST(Backward, NoGradGuardSuppressesRecording) {
  auto x = Td::scalar(3.0, true);
  NoGradGuard ng;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, EveryPrimitiveMatchesFiniteDifferences) {
  Rng rng(5);
  auto a = random(rng, {3, 4}), b = random(rng, {4, 5}), bias = random(rng, {5});
  auto g = random(rng, {5}), s = random(rng, {5}), w = random(rng, {3, 5});
  auto table = random(rng, {6, 5});
  auto mask = std::make_shared<std::vector<unsigned char>>(std::vector<unsigned char>{1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1, 0, 0, 1, 1});
  auto f = [&] {
    auto x = add_row(matmul(a, b), bias);                                    // 3x5
    auto y = layer_norm(gelu(x), g, s);                                       // 3x5
    auto e = embedding(table, {2, 0, 2});                                     // 3x5
    auto z = add(mul(y, w), tanh(e));                                         // 3x5
    auto cat = concat_cols<double>({slice_cols(z, 0, 2), slice_cols(z, 2, 3)});
    auto rows = concat_rows<double>({slice_rows(cat, 1, 2), slice_rows(cat, 0, 1)});
    auto p = masked_softmax_rows<double>(rows, mask);
    auto q = softmax(reshape(transpose(z), {5, 3}), 0);
    auto logits = add(matmul(p, q), scale(matmul(rows, transpose(w)), 0.5));  // 3x3
    return add(cross_entropy(logits, {1, -1, 2}, -1), scale(sum(q), 0.1));
  };
  auto r = oracle::gradcheck(f, {{"a", a}, {"b", b}, {"bias", bias}, {"g", g}, {"s", s}, {"w", w}, {"table", table}});
  EXPECT_LT(r.worst_rel_error, 1e-6) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Finite, OpsStayFiniteForBoundedInputs) {
  Rng rng(9);
  auto x = Td({4, 6}, 0.0, true);
  for (auto& v : x.mutable_values()) v = rng.uniform() * 100.0 - 50.0;
  auto g = Td({6}, 1.0), s = Td({6}, 0.0);
  EXPECT_TRUE(gelu(x).all_finite());
  EXPECT_TRUE(tanh(x).all_finite());
  EXPECT_TRUE(softmax(x, 1).all_finite());
  EXPECT_TRUE(layer_norm(x, g, s).all_finite());
  EXPECT_TRUE(cross_entropy(x, {0, 1, 2, 3}, -1).all_finite());
  EXPECT_FALSE(Td({1}, {std::nan("")}).all_finite());
}

TEST(Adam, ZeroLearningRateLeavesParametersBitIdentical) {
  Rng rng(1);
  auto p = random(rng, {3, 3});
  std::vector<double> before(p.values().begin(), p.values().end());
  Adam<double> opt({p}, 0.0, 10);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    backward(sum(mul(p, p)));
    opt.step();
  }
  EXPECT_EQ(before, std::vector<double>(p.values().begin(), p.values().end()));
}

TEST(Adam, LinearDecayReachesZero) {
  auto p = Td::scalar(1.0, true);
  Adam<double> opt({p}, 0.1, 4);
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.1);
  for (int i = 0; i < 2; ++i) {
    backward(mul(p, p));
    opt.step();
  }
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.05);
  for (int i = 0; i < 2; ++i) opt.step();
  EXPECT_DOUBLE_EQ(opt.current_lr(), 0.0);
}

TEST(Adam, DescendsAQuadratic) {
  auto p = Td::scalar(3.0, true);
  Adam<double> opt({p}, 0.1, 0);
  for (int i = 0; i < 200; ++i) {
    opt.zero_grad();
    backward(mul(p, p));
    opt.step();
  }
  EXPECT_LT(std::abs(p.item()), 0.05);
}

TEST(Alias, SharesValuesButNotGradients) {
  auto p = Td::scalar(2.0, true);
  auto q = p.alias();
  backward(mul(q, q));
  EXPECT_FALSE(p.has_grad());
  EXPECT_DOUBLE_EQ(q.grad()[0], 4.0);
  p.mutable_values()[0] = 5.0;
  EXPECT_DOUBLE_EQ(q.item(), 5.0);
}

TEST(GradCheck, MultiHeadAttentionWithPrefixMask) {
  Rng rng(21);
  const std::size_t rows = 4, prefix = 2, keys = prefix + rows, d = 6;
  auto q = random(rng, {rows, d}), k = random(rng, {keys, d}), v = random(rng, {keys, d});
  auto w = random(rng, {d, 5});
  auto mask = std::make_shared<std::vector<unsigned char>>(rows * keys, 0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < keys; ++j) (*mask)[i * keys + j] = j < prefix || j - prefix <= i;
  auto f = [&] { return cross_entropy(matmul(multi_head_attention<double>(q, k, v, 3, mask), w), {0, 4, 2, 1}, -1); };
  auto r = oracle::gradcheck(f, {{"q", q}, {"k", k}, {"v", v}, {"w", w}});
  EXPECT_LT(r.worst_rel_error, 1e-6) << r.worst_param << "[" << r.worst_index << "]";
}

TEST(Attention, MatchesPerHeadComposition) {
  Rng rng(22);
  auto q = random(rng, {3, 4}), k = random(rng, {5, 4}), v = random(rng, {5, 4});
  auto mask = std::make_shared<std::vector<unsigned char>>(15, 1);
  (*mask)[4] = 0;
  auto fused = multi_head_attention<double>(q, k, v, 2, mask);
  std::vector<Td> heads;
  for (std::size_t h = 0; h < 2; ++h) {
    auto s = scale(matmul(slice_cols(q, 2 * h, 2), transpose(slice_cols(k, 2 * h, 2))), 1.0 / std::sqrt(2.0));
    heads.push_back(matmul(masked_softmax_rows<double>(s, mask), slice_cols(v, 2 * h, 2)));
  }
  auto ref = concat_cols(heads);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(fused[i], ref[i], 1e-12);
}
