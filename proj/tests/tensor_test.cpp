#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "gradcheck.hpp"
#include "pht/checkpoint.hpp"
#include "pht/errors.hpp"
#include "pht/nn.hpp"
#include "pht/optim.hpp"
#include "pht/tensor.hpp"

using namespace pht;
using pht::testing::check_gradients;
using pht::testing::random_shape;
using pht::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Contracts an arbitrary output with fixed random weights into a scalar.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng, -1.0, 1.0, false)));
}

constexpr int kTrials = 50;
constexpr double kOpTolerance = 1e-4;

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(matmul(eye, m)), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tensor out = matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}));
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(out.item(), 11.0);
}

TEST(Matmul, BatchedAllOnes) {
  Tensor out = matmul(Tensor::full({2, 1, 2}, 1.0), Tensor::full({2, 2, 1}, 1.0));
  EXPECT_EQ(out.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(values(out), (std::vector<double>{2, 2}));
}

TEST(Matmul, MismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3) x (2, 3)"), std::string::npos) << msg;
  }
}

TEST(Softmax, UniformInput) {
  Tensor out = softmax(Tensor({3}, {0, 0, 0}), 0);
  for (double v : out.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogWeights) {
  Tensor out = softmax(Tensor({2}, {std::log(1.0), std::log(3.0)}), 0);
  EXPECT_NEAR(out.data()[0], 0.25, 1e-15);
  EXPECT_NEAR(out.data()[1], 0.75, 1e-15);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor out = softmax(Tensor({2}, {1000, 0}), 0);
  EXPECT_TRUE(std::isfinite(out.data()[0]));
  EXPECT_NEAR(out.data()[0], 1.0, 1e-15);
  EXPECT_NEAR(out.data()[1], 0.0, 1e-15);
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(softmax(Tensor({2}, {NAN, 0}), 0), NumericError);
  EXPECT_THROW(softmax(Tensor({2}, {INFINITY, 0}), 0), NumericError);
}

TEST(Softmax, RowsSumToOneOnRandomInputs) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor(random_shape(rng, 1, 4, 6), rng, -50.0, 50.0, false);
    const int axis = static_cast<int>(rng() % x.rank());
    Tensor y = softmax(x, axis);
    Tensor totals = sum(y, axis);
    for (double v : y.data()) EXPECT_GE(v, 0.0);
    for (double t : totals.data()) EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
  Tensor out = layer_norm(Tensor({4}, {3, 3, 3, 3}), Tensor::full({4}, 1.0), Tensor::zeros({4}), 1e-6);
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValues) {
  Tensor out = layer_norm(Tensor({2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  EXPECT_NEAR(out.data()[0], -1.0, 1e-9);
  EXPECT_NEAR(out.data()[1], 1.0, 1e-9);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  Tensor out = layer_norm(Tensor({3}, {1, 5, -2}), Tensor::zeros({3}), Tensor({3}, {0.5, -1, 2}), 1e-6);
  EXPECT_EQ(values(out), (std::vector<double>{0.5, -1, 2}));
}

TEST(LayerNorm, GainMismatchIsDimensionError) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3}), 1e-6), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 3, 2}, rng);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, SumOfSquares) {
  Tensor x({2}, {1, 2}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(values(Tensor({2}, {x.grad()[0], x.grad()[1]})), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), ContractError);
}

TEST(Backward, UnreachedLeafKeepsZeroGradient) {
  Tensor x({2}, {1, 2}, true);
  Tensor unused({3}, {1, 2, 3}, true);
  backward(sum(x));
  ASSERT_TRUE(unused.has_grad());
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x({1}, {3}, true);
  Tensor y = mul(x, x);
  backward(sum(add(y, y)));  // 2 x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    std::mt19937_64 rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 5}, rng);
    backward(weighted_sum(softmax(matmul(a, b), -1), 3));
    return std::make_pair(values(Tensor(a.shape(), {a.grad().begin(), a.grad().end()})),
                          values(Tensor(b.shape(), {b.grad().begin(), b.grad().end()})));
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(Dropout, IdentityAtZeroRateAndInEval) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4, 4}, rng);
  EXPECT_EQ(values(dropout(x, 0.0, rng, true)), values(x));
  EXPECT_EQ(values(dropout(x, 0.7, rng, false)), values(x));
}

TEST(Dropout, InvertedScaling) {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::full({10000}, 1.0);
  Tensor y = dropout(x, 0.5, rng, true);
  double total = 0.0;
  for (double v : y.data()) {
    EXPECT_TRUE(v == 0.0 || v == 2.0);
    total += v;
  }
  EXPECT_NEAR(total / 10000.0, 1.0, 0.05);
}

TEST(Embedding, OutOfVocabularyIsInputError) {
  Tensor table = Tensor::zeros({3, 2});
  std::vector<int> ids{0, 3};
  EXPECT_THROW(embedding(table, ids), InputError);
}

// ---------------------------------------------------------------------------
// Finite-difference checks: >= 50 randomized trials per differentiable op.

class OpGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{20240601};

  void expect_ok(const std::function<Tensor()>& loss, std::vector<Tensor> inputs) {
    const auto result = check_gradients(loss, inputs);
    EXPECT_LT(result.max_relative_error, kOpTolerance);
  }
};

TEST_F(OpGradient, AddSubMulWithBroadcast) {
  for (int t = 0; t < kTrials; ++t) {
    Shape sa = random_shape(rng);
    Shape sb(sa.begin() + static_cast<std::ptrdiff_t>(rng() % sa.size()), sa.end());
    for (auto& d : sb) {
      if (rng() % 3 == 0) d = 1;
    }
    Tensor a = random_tensor(sa, rng);
    Tensor b = random_tensor(sb, rng);
    expect_ok([&] { return weighted_sum(add(a, b), t); }, {a, b});
    expect_ok([&] { return weighted_sum(sub(b, a), t); }, {a, b});
    expect_ok([&] { return weighted_sum(mul(a, b), t); }, {a, b});
  }
}

TEST_F(OpGradient, ScaleShiftRelu) {
  for (int t = 0; t < kTrials; ++t) {
    Tensor a = random_tensor(random_shape(rng), rng);
    // Keep inputs away from the ReLU kink.
    for (double& v : a.mutable_data()) v += v >= 0 ? 0.05 : -0.05;
    expect_ok([&] { return weighted_sum(scale(a, -1.7), t); }, {a});
    expect_ok([&] { return weighted_sum(add_scalar(a, 0.3), t); }, {a});
    expect_ok([&] { return weighted_sum(relu(a), t); }, {a});
  }
}

TEST_F(OpGradient, BatchedMatmul) {
  for (int t = 0; t < kTrials; ++t) {
    std::uniform_int_distribution<std::size_t> dim(1, 4);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Shape lead = random_shape(rng, 0, 2, 3);
    Shape sa = lead;
    sa.insert(sa.end(), {m, k});
    Shape sb = rng() % 2 ? Shape{} : lead;
    if (!sb.empty() && rng() % 2) sb[0] = 1;
    sb.insert(sb.end(), {k, n});
    Tensor a = random_tensor(sa, rng);
    Tensor b = random_tensor(sb, rng);
    expect_ok([&] { return weighted_sum(matmul(a, b), t); }, {a, b});
  }
}

TEST_F(OpGradient, LayoutOps) {
  for (int t = 0; t < kTrials; ++t) {
    Tensor a = random_tensor(random_shape(rng), rng);
    std::vector<std::size_t> order(a.rank());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Shape flat{a.numel()};
    expect_ok([&] { return weighted_sum(permute(a, order), t); }, {a});
    expect_ok([&] { return weighted_sum(transpose(a), t); }, {a});
    expect_ok([&] { return weighted_sum(reshape(a, flat), t); }, {a});
    const int axis = static_cast<int>(rng() % a.rank());
    const std::size_t len = a.dim(axis);
    const std::size_t start = rng() % len;
    const std::size_t count = 1 + rng() % (len - start);
    expect_ok([&] { return weighted_sum(slice(a, axis, start, count), t); }, {a});
    std::vector<std::size_t> rows;
    for (int i = 0; i < 5; ++i) rows.push_back(rng() % a.dim(0));
    expect_ok([&] { return weighted_sum(index_select(a, rows), t); }, {a});
  }
}

TEST_F(OpGradient, ConcatAndStack) {
  for (int t = 0; t < kTrials; ++t) {
    Shape s = random_shape(rng);
    const int axis = static_cast<int>(rng() % s.size());
    Shape s2 = s;
    s2[axis] = 1 + rng() % 3;
    Tensor a = random_tensor(s, rng);
    Tensor b = random_tensor(s2, rng);
    Tensor c = random_tensor(s, rng);
    expect_ok([&] { return weighted_sum(concat({a, b}, axis), t); }, {a, b});
    expect_ok([&] { return weighted_sum(stack({a, c}, axis), t); }, {a, c});
  }
}

TEST_F(OpGradient, SoftmaxAndLogSoftmax) {
  for (int t = 0; t < kTrials; ++t) {
    Tensor a = random_tensor(random_shape(rng), rng, -3.0, 3.0);
    const int axis = static_cast<int>(rng() % a.rank());
    expect_ok([&] { return weighted_sum(softmax(a, axis), t); }, {a});
    expect_ok([&] { return weighted_sum(log_softmax(a, axis), t); }, {a});
  }
}

TEST_F(OpGradient, LayerNormAllInputs) {
  for (int t = 0; t < kTrials; ++t) {
    Shape s = random_shape(rng);
    s.back() = 2 + rng() % 4;
    Tensor x = random_tensor(s, rng, -2.0, 2.0);
    Tensor gain = random_tensor({s.back()}, rng, 0.5, 1.5);
    Tensor bias = random_tensor({s.back()}, rng);
    expect_ok([&] { return weighted_sum(layer_norm(x, gain, bias, 1e-6), t); }, {x, gain, bias});
  }
}

TEST_F(OpGradient, Reductions) {
  for (int t = 0; t < kTrials; ++t) {
    Tensor a = random_tensor(random_shape(rng), rng);
    const int axis = static_cast<int>(rng() % a.rank());
    expect_ok([&] { return weighted_sum(sum(a), t); }, {a});
    expect_ok([&] { return weighted_sum(sum(a, axis, rng() % 2 == 0), t); }, {a});
    expect_ok([&] { return weighted_sum(mean(a, axis), t); }, {a});
    expect_ok([&] { return weighted_sum(mean(a), t); }, {a});
  }
}

TEST_F(OpGradient, EmbeddingAndCrossEntropy) {
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t vocab = 2 + rng() % 5;
    const std::size_t d = 1 + rng() % 4;
    const std::size_t k = 1 + rng() % 4;
    Tensor table = random_tensor({vocab, d}, rng);
    std::vector<int> ids(k);
    for (int& id : ids) id = static_cast<int>(rng() % vocab);
    expect_ok([&] { return weighted_sum(embedding(table, ids), t); }, {table});

    Tensor logits = random_tensor({k, vocab}, rng, -3.0, 3.0);
    std::vector<int> targets = ids;
    if (k > 1) targets[0] = -1;  // ignored row
    expect_ok([&] { return cross_entropy_sum(logits, targets, -1); }, {logits});
  }
}

TEST_F(OpGradient, DropoutWithFixedMask) {
  for (int t = 0; t < kTrials; ++t) {
    Tensor a = random_tensor(random_shape(rng), rng);
    expect_ok(
        [&] {
          std::mt19937_64 mask_rng(static_cast<std::uint64_t>(t));
          return weighted_sum(dropout(a, 0.3, mask_rng, true), t);
        },
        {a});
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tensor logits = Tensor::zeros({3, 7});
  std::vector<int> targets{1, 4, 6};
  EXPECT_NEAR(cross_entropy_sum(logits, targets).item() / 3.0, std::log(7.0), 1e-14);
}

// ---------------------------------------------------------------------------
// Optimizer

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor p({3}, {0.5, -1.0, 2.0}, true);
  std::vector<Tensor> params{p};
  AdamState state = make_adam_state(AdamConfig{}, params);
  adam_step(params, {{0.0, 0.0, 0.0}}, state);
  EXPECT_EQ(values(p), (std::vector<double>{0.5, -1.0, 2.0}));
  EXPECT_EQ(state.step, 1);
}

TEST(Adam, FirstStepMovesAgainstGradientByRate) {
  AdamConfig cfg;
  cfg.base_rate = 2.0;
  cfg.warmup_steps = 10;
  cfg.model_dim = 16;
  Tensor p({1}, {1.0}, true);
  std::vector<Tensor> params{p};
  AdamState state = make_adam_state(cfg, params);
  adam_step(params, {{1.0}}, state);
  // m_hat = v_hat = 1 after bias correction, so the update is -rate / (1 + eps).
  const double rate = warmup_rate(cfg, 1);
  EXPECT_NEAR(p.data()[0], 1.0 - rate / (1.0 + cfg.eps), 1e-15);
  EXPECT_LT(p.data()[0], 1.0);
}

TEST(Adam, RatePeaksAtWarmupStep) {
  AdamConfig cfg;
  cfg.warmup_steps = 400;
  double best = 0.0;
  std::int64_t best_step = 0;
  for (std::int64_t s = 1; s <= 4000; ++s) {
    const double r = warmup_rate(cfg, s);
    if (r > best) {
      best = r;
      best_step = s;
    }
  }
  EXPECT_EQ(best_step, 400);
}

TEST(Adam, ShapeMismatchIsDimensionError) {
  Tensor p({2}, {0.0, 0.0}, true);
  std::vector<Tensor> params{p};
  AdamState state = make_adam_state(AdamConfig{}, params);
  EXPECT_THROW(adam_step(params, {{1.0}}, state), DimensionError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, BitExactRoundTrip) {
  std::mt19937_64 rng(5);
  std::vector<NamedTensor> entries{
      {"a", random_tensor({3, 4}, rng, -1e300, 1e300)},
      {"b.bias", Tensor({1}, {std::nextafter(1.0, 2.0)})},
      {"c", Tensor({2, 1, 2}, {-0.0, 5e-324, 1.0 / 3.0, -7.25})},
  };
  const auto path = std::filesystem::temp_directory_path() / "pht_tensor_test.ckpt";
  save_checkpoint(path, entries);
  const auto loaded = load_checkpoint(path);
  ASSERT_EQ(loaded.size(), entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) {
    EXPECT_EQ(loaded[i].name, entries[i].name);
    EXPECT_EQ(loaded[i].tensor.shape(), entries[i].tensor.shape());
    const auto x = entries[i].tensor.data();
    const auto y = loaded[i].tensor.data();
    ASSERT_EQ(x.size(), y.size());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)), 0);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = std::filesystem::temp_directory_path() / "pht_not_a_ckpt.bin";
  {
    std::ofstream os(path);
    os << "hello";
  }
  EXPECT_THROW(load_checkpoint(path), IoError);
  std::filesystem::remove(path);
}

TEST(Sinusoid, PositionZeroAlternates) {
  Tensor pe = nn::sinusoidal_encoding(1, 6);
  EXPECT_EQ(values(pe), (std::vector<double>{0, 1, 0, 1, 0, 1}));
}
