#include <gtest/gtest.h>

#include <cmath>
#include <span>

#include "grad_cases.hpp"
#include "tvcl/backbone.hpp"
#include "tvcl/error.hpp"
#include "tvcl/model.hpp"
#include "tvcl/ops.hpp"
#include "tvcl/peft.hpp"
#include "tvcl/task_vector.hpp"

using namespace tvcl;
using tvcl::testing::random_tensor;

namespace {

BackboneConfig small_backbone() {
  BackboneConfig c;
  c.vocab_size = 40;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.n_layers = 2;
  c.max_seq_len = 8;
  c.n_total_classes = 6;
  return c;
}

PeftConfig config_for(PeftKind kind, std::size_t rank = 4, std::size_t bottleneck = 8) {
  auto c = PeftConfig::for_backbone(kind, small_backbone());
  c.lora_rank = rank;
  c.lora_alpha = 2.0 * static_cast<double>(rank);
  c.adapter_bottleneck = bottleneck;
  return c;
}

void randomize(PeftParams<float>& p, std::uint64_t seed) {
  SplitMix64 rng(seed);
  p.for_each([&](const std::string&, Tensor& t) { t = random_tensor<float>(t.shape(), rng, 0.5); });
}

std::vector<TokenSequence> tokens_for(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < 6; ++i) {
    TokenSequence s(2 + rng.below(6));
    for (auto& t : s) t = static_cast<std::int32_t>(rng.below(40));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(PeftConfig, Defaults) {
  const PeftConfig c;
  EXPECT_EQ(c.lora_rank, 16u);
  EXPECT_EQ(c.lora_alpha, 32.0);
  EXPECT_EQ(c.adapter_bottleneck, 32u);
  const auto b = PeftConfig::for_backbone(PeftKind::adapter, BackboneConfig{});
  EXPECT_EQ(b.target_layers, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(b.head_classes, 20u);
  EXPECT_EQ(b.lora_scale(), 2.0);
}

TEST(PeftConfig, Invariants) {
  auto c = config_for(PeftKind::lora, 17);
  EXPECT_THROW(c.validate(), PreconditionError);
  c = config_for(PeftKind::adapter, 4, 65);
  EXPECT_THROW(c.validate(), PreconditionError);
  c = config_for(PeftKind::adapter, 4, 64);
  EXPECT_NO_THROW(c.validate());
  c.target_layers = {1, 0};
  EXPECT_THROW(c.validate(), PreconditionError);
  c = config_for(PeftKind::adapter);
  c.target_layers = {0, 2};
  EXPECT_THROW(c.validate_against(small_backbone()), IncompatibleModuleError);
  c = config_for(PeftKind::adapter);
  c.d_model = 8;
  EXPECT_THROW(c.validate_against(small_backbone()), IncompatibleModuleError);
}

TEST(LoraForward, ZeroBIsBitExact) {
  SplitMix64 rng(1);
  const auto x = random_tensor<float>({5, 6}, rng);
  const auto w = random_tensor<float>({6, 6}, rng);
  const auto a = random_tensor<float>({6, 3}, rng);
  EXPECT_EQ(lora_forward(x, w, a, Tensor({3, 6}), 6.0, 3), ops::matmul(x, w));
}

TEST(LoraForward, RankOneHandCase) {
  const auto x = Tensor::matrix({{2, 3, 5}, {7, 11, 13}});
  const auto w = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const auto a = Tensor::matrix({{1}, {0}, {0}});
  const auto b = Tensor::matrix({{1, 0, 0}});
  EXPECT_EQ(lora_forward(x, w, a, b, 1.0, 1), Tensor::matrix({{4, 3, 5}, {14, 11, 13}}));
}

TEST(LoraForward, MatchesFoldedWeight) {
  SplitMix64 rng(2);
  const auto x = random_tensor<float>({7, 8}, rng);
  const auto w = random_tensor<float>({8, 8}, rng);
  const auto a = random_tensor<float>({8, 4}, rng);
  const auto b = random_tensor<float>({4, 8}, rng);
  auto folded = w;
  const auto ab = ops::matmul(a, b);
  for (std::size_t i = 0; i < folded.size(); ++i) folded[i] += static_cast<float>(3.0 / 4.0) * ab[i];
  const auto got = lora_forward(x, w, a, b, 3.0, 4);
  const auto want = ops::matmul(x, folded);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-5);
}

TEST(LoraForward, ShapeMismatch) {
  EXPECT_THROW(lora_forward(Tensor({2, 4}), Tensor({4, 4}), Tensor({4, 2}), Tensor({3, 4}), 2.0, 2), DimensionError);
  EXPECT_THROW(lora_forward(Tensor({2, 4}), Tensor({3, 3}), Tensor({4, 2}), Tensor({2, 4}), 2.0, 2), DimensionError);
}

TEST(AdapterForward, ZeroUpIsIdentity) {
  SplitMix64 rng(3);
  const auto h = random_tensor<float>({4, 6}, rng);
  AdapterWeights<float> w{random_tensor<float>({6, 3}, rng), random_tensor<float>({3}, rng), Tensor({3, 6}),
                          Tensor({6})};
  EXPECT_EQ(adapter_forward(h, w), h);
}

TEST(AdapterForward, ScalarBottleneckHandCase) {
  // relu([1, 2]·[1, -1]ᵀ + 0.5) = relu(-0.5) = 0; relu([3, 1]·[1, -1]ᵀ + 0.5) = 2.5
  const auto h = Tensor::matrix({{1, 2}, {3, 1}});
  AdapterWeights<float> w{Tensor::matrix({{1}, {-1}}), Tensor::vector({0.5f}), Tensor::matrix({{2, -1}}),
                          Tensor::vector({0.25f, 0.0f})};
  EXPECT_EQ(adapter_forward(h, w), Tensor::matrix({{1.25f, 2.0f}, {8.25f, -1.5f}}));
}

TEST(AdapterForward, MatchesStraightLineOracle) {
  SplitMix64 rng(4);
  const auto h = random_tensor<double>({5, 6}, rng);
  AdapterWeights<double> w{random_tensor<double>({6, 4}, rng), random_tensor<double>({4}, rng),
                           random_tensor<double>({4, 6}, rng), random_tensor<double>({6}, rng)};
  const auto got = adapter_forward(h, w);
  for (std::size_t i = 0; i < 5; ++i) {
    double hidden[4];
    for (std::size_t k = 0; k < 4; ++k) {
      double s = w.b_down[k];
      for (std::size_t j = 0; j < 6; ++j) s += h(i, j) * w.w_down(j, k);
      hidden[k] = s > 0 ? s : 0.0;
    }
    for (std::size_t j = 0; j < 6; ++j) {
      double s = h(i, j) + w.b_up[j];
      for (std::size_t k = 0; k < 4; ++k) s += hidden[k] * w.w_up(k, j);
      EXPECT_NEAR(got(i, j), s, 1e-6);
    }
  }
}

TEST(AdapterForward, ShapeMismatch) {
  AdapterWeights<float> w{Tensor({6, 3}), Tensor({3}), Tensor({3, 6}), Tensor({6})};
  EXPECT_THROW(adapter_forward(Tensor({2, 5}), w), DimensionError);
}

TEST(InitRandom, DeterministicAndZeroDelta) {
  for (auto kind : {PeftKind::lora, PeftKind::adapter}) {
    const auto c = config_for(kind);
    const auto a = init_random<float>(c, 7);
    const auto b = init_random<float>(c, 7);
    EXPECT_EQ(a.live, b.live);
    ASSERT_TRUE(a.init_snapshot.has_value());
    EXPECT_EQ(*a.init_snapshot, a.live);
    EXPECT_EQ(a.lineage.kind, Lineage::Kind::random);
    EXPECT_EQ(a.lineage.seed, 7u);

    const auto bb = Backbone::random(small_backbone(), 1);
    const auto tokens = tokens_for(2);
    const std::span<const TokenSequence> batch(tokens);
    EXPECT_EQ(backbone_forward(batch, bb, &a).pooled, backbone_forward(batch, bb).pooled);
  }
}

TEST(InitRandom, DistinctSeedsDiffer) {
  const auto a = init_random<float>(config_for(PeftKind::lora), 1);
  const auto b = init_random<float>(config_for(PeftKind::lora), 2);
  EXPECT_NE(a.live.lora[0].a_q, b.live.lora[0].a_q);
  const auto c = init_random<float>(config_for(PeftKind::adapter), 1);
  const auto d = init_random<float>(config_for(PeftKind::adapter), 2);
  EXPECT_NE(c.live.adapter[0].w_down, d.live.adapter[0].w_down);
}

TEST(InitRandom, DrawScaleAndZeroBlocks) {
  const auto phi = init_random<double>(config_for(PeftKind::lora, 8), 3);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& block : phi.live.lora) {
    for (const auto* t : {&block.a_q, &block.a_v}) {
      for (double v : t->values()) sum += v, sq += v * v, ++n;
    }
    for (double v : block.b_q.values()) EXPECT_EQ(v, 0.0);
    for (double v : block.b_v.values()) EXPECT_EQ(v, 0.0);
  }
  for (double v : phi.live.head_b.values()) EXPECT_EQ(v, 0.0);
  const double sd = std::sqrt(sq / static_cast<double>(n) - (sum / n) * (sum / n));
  EXPECT_NEAR(sd, 0.02, 0.002);
}

TEST(InitPre, CopiesLiveAndZeroesTaskVector) {
  auto prev = init_random<float>(config_for(PeftKind::adapter), 5);
  randomize(prev.live, 6);
  const auto next = init_pre(prev);
  EXPECT_EQ(next.live, prev.live);
  EXPECT_EQ(*next.init_snapshot, prev.live);
  EXPECT_EQ(next.lineage.kind, Lineage::Kind::pre);
  for (float v : compute_task_vector(next).values) EXPECT_EQ(v, 0.0f);

  const auto bb = Backbone::random(small_backbone(), 2);
  const auto tokens = tokens_for(3);
  const std::span<const TokenSequence> batch(tokens);
  EXPECT_EQ(classify(bb, next, batch), classify(bb, prev, batch));
}

TEST(InitMean, SingletonEqualsPre) {
  auto prev = init_random<float>(config_for(PeftKind::lora), 5);
  randomize(prev.live, 8);
  const std::vector<PeftModule> one{prev};
  const auto mean = init_mean(std::span<const PeftModule>(one));
  const auto pre = init_pre(prev);
  EXPECT_EQ(mean.live, pre.live);
  EXPECT_EQ(*mean.init_snapshot, *pre.init_snapshot);
  EXPECT_EQ(mean.lineage.kind, Lineage::Kind::mean);
}

TEST(InitMean, SymmetricPairCancels) {
  auto p = init_random<float>(config_for(PeftKind::adapter), 5);
  randomize(p.live, 9);
  auto q = p;
  q.live.for_each([](const std::string&, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = -t[i];
  });
  const std::vector<PeftModule> pair{p, q};
  const auto mean = init_mean(std::span<const PeftModule>(pair));
  for (float v : flatten(mean)) EXPECT_EQ(v, 0.0f);
}

TEST(InitMean, PerElementMeanOfThree) {
  std::vector<PeftModule> modules;
  for (std::uint64_t s = 0; s < 3; ++s) {
    auto m = init_random<float>(config_for(PeftKind::lora), s);
    randomize(m.live, 100 + s);
    modules.push_back(m);
  }
  const auto mean = flatten(init_mean(std::span<const PeftModule>(modules)));
  const auto a = flatten(modules[0]), b = flatten(modules[1]), c = flatten(modules[2]);
  for (std::size_t i = 0; i < mean.size(); ++i) {
    EXPECT_NEAR(mean[i], (static_cast<double>(a[i]) + b[i] + c[i]) / 3.0, 1e-6);
  }
}

TEST(InitMean, Errors) {
  EXPECT_THROW(init_mean(std::span<const PeftModule>()), PreconditionError);
  const std::vector<PeftModule> mixed{init_random<float>(config_for(PeftKind::lora, 4), 1),
                                      init_random<float>(config_for(PeftKind::lora, 2), 1)};
  EXPECT_THROW(init_mean(std::span<const PeftModule>(mixed)), IncompatibleModuleError);
}

TEST(Flatten, RoundTripOverConfigGrid) {
  std::uint64_t seed = 0;
  for (std::size_t r : {1u, 4u, 16u}) {
    auto c = config_for(PeftKind::lora, r);
    auto phi = init_random<float>(c, ++seed);
    randomize(phi.live, ++seed);
    const auto flat = flatten(phi);
    EXPECT_EQ(flat.size(), c.parameter_count());
    EXPECT_EQ(unflatten(std::span<const float>(flat), c), phi.live);
  }
  for (std::size_t b : {1u, 8u, 32u}) {
    auto c = config_for(PeftKind::adapter, 4, b);
    auto phi = init_random<float>(c, ++seed);
    randomize(phi.live, ++seed);
    const auto flat = flatten(phi);
    EXPECT_EQ(flat.size(), c.parameter_count());
    EXPECT_EQ(unflatten(std::span<const float>(flat), c), phi.live);
  }
}

TEST(Flatten, CanonicalOrder) {
  const auto c = config_for(PeftKind::adapter, 4, 2);
  auto p = PeftParams<float>::zeros(c);
  float next = 1.0f;
  p.for_each([&](const std::string&, Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = next++;
  });
  const auto flat = flatten(p);
  for (std::size_t i = 0; i < flat.size(); ++i) ASSERT_EQ(flat[i], static_cast<float>(i + 1));
  std::vector<std::string> names;
  p.for_each([&](const std::string& name, const Tensor&) { names.push_back(name); });
  EXPECT_EQ(names, (std::vector<std::string>{"block0.w_down", "block0.b_down", "block0.w_up", "block0.b_up",
                                             "block1.w_down", "block1.b_down", "block1.w_up", "block1.b_up",
                                             "head_w", "head_b"}));
  const auto l = PeftParams<float>::zeros(config_for(PeftKind::lora));
  names.clear();
  l.for_each([&](const std::string& name, const Tensor&) { names.push_back(name); });
  EXPECT_EQ(names, (std::vector<std::string>{"block0.a_q", "block0.b_q", "block0.a_v", "block0.b_v", "block1.a_q",
                                             "block1.b_q", "block1.a_v", "block1.b_v", "head_w", "head_b"}));
}

TEST(Flatten, FreshModuleIsZeroOutsideDrawnBlocks) {
  const auto c = config_for(PeftKind::lora, 4);
  const auto phi = init_random<float>(c, 3);
  const auto flat = flatten(phi);
  std::size_t offset = 0;
  phi.live.for_each([&](const std::string& name, const Tensor& t) {
    const bool drawn = name.ends_with("a_q") || name.ends_with("a_v") || name == "head_w";
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (!drawn) EXPECT_EQ(flat[offset + i], 0.0f) << name;
    }
    offset += t.size();
  });
}

TEST(Flatten, ParameterCountFormula) {
  // Summed declared shapes: LoRA 4·d·r per block; adapter 2·d·b + b + d.
  const auto l = config_for(PeftKind::lora, 4);
  EXPECT_EQ(l.parameter_count(), 2 * (16 * 4 + 4 * 16 + 16 * 4 + 4 * 16) + 16 * 6 + 6);
  const auto a = config_for(PeftKind::adapter, 4, 8);
  EXPECT_EQ(a.parameter_count(), 2 * (16 * 8 + 8 + 8 * 16 + 16) + 16 * 6 + 6);
  std::size_t counted = 0;
  PeftParams<float>::zeros(a).for_each([&](const std::string&, const Tensor& t) { counted += t.size(); });
  EXPECT_EQ(counted, a.parameter_count());
}

TEST(Flatten, LengthMismatch) {
  const auto c = config_for(PeftKind::lora);
  std::vector<float> flat(c.parameter_count() + 1);
  EXPECT_THROW(unflatten(std::span<const float>(flat), c), DimensionError);
}

TEST(PeftGradient, ModuleGradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (const auto& c : tvcl::testing::gradient_cases(seed)) {
      if (c.name == "lora" || c.name == "adapter") EXPECT_LT(c.max_relative_error, 1e-5) << c.name;
    }
  }
}

TEST(PeftGradient, MaskedHeadColumnsGetNoGradient) {
  const auto bb = Backbone::random(small_backbone(), 4);
  auto phi = init_random<float>(config_for(PeftKind::adapter), 5);
  randomize(phi.live, 6);
  const auto tokens = tokens_for(7);
  std::vector<std::int32_t> labels(tokens.size(), 1);
  ops::ClassMask mask(6, false);
  mask[0] = mask[1] = true;
  const std::vector<ops::ClassMask> masks(tokens.size(), mask);
  const auto r = peft_loss_and_grad(bb, phi, std::span<const TokenSequence>(tokens),
                                    std::span<const std::int32_t>(labels), std::span<const ops::ClassMask>(masks));
  for (std::size_t j = 0; j < r.grads.head_w.rows(); ++j) {
    for (std::size_t c = 2; c < 6; ++c) EXPECT_EQ(r.grads.head_w(j, c), 0.0f);
  }
  for (std::size_t c = 2; c < 6; ++c) EXPECT_EQ(r.grads.head_b[c], 0.0f);
}
