#include "diffvps/engine.hpp"
#include "diffvps/networks.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace diffvps;

namespace {

DiffVPSModel make_model(const NetworkConfig& net, torch::Dtype dtype = torch::kDouble, uint64_t seed = 1) {
  DiffVPSModel m(net);
  m->reset_parameters(seed);
  m->to(dtype);
  return m;
}

void expect_close(const PyramidFeatures& a, const PyramidFeatures& b, double tol = 1e-12) {
  for (int j = 0; j < kNumLevels; ++j) {
    EXPECT_TRUE(torch::allclose(a.levels[j], b.levels[j], tol, tol)) << "level " << j;
  }
}

}  // namespace

class EncoderKinds : public ::testing::TestWithParam<EncoderKind> {};

TEST_P(EncoderKinds, PyramidShapesAtDefaultWidths) {
  NetworkConfig net;
  net.encoder = GetParam();
  auto m = make_model(net, torch::kFloat);
  torch::NoGradGuard ng;
  auto p = m->image_encode(torch::zeros({1, 3, 64, 64}));
  const std::vector<std::vector<int64_t>> expect{{1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}, {1, 256, 2, 2}};
  for (int j = 0; j < kNumLevels; ++j) {
    EXPECT_EQ(p.levels[j].sizes(), expect[static_cast<size_t>(j)]);
    EXPECT_TRUE(torch::isfinite(p.levels[j]).all().item<bool>());
  }
  EXPECT_NO_THROW(check_pyramid(p, net, "test"));
}

TEST_P(EncoderKinds, OnePixelChangesOutput) {
  auto net = fixtures::tiny_net(32, GetParam());
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto x = torch::rand({1, 3, 32, 32}, torch::kDouble) * 2 - 1;
  auto y = x.clone();
  y[0][1][20][7] += 0.5;
  auto a = m->image_encode(x), b = m->image_encode(y);
  for (int j = 0; j < kNumLevels; ++j) EXPECT_FALSE(torch::equal(a.levels[j], b.levels[j]));
}

TEST_P(EncoderKinds, TemporalMean) {
  auto net = fixtures::tiny_net(32, GetParam());
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto f0 = torch::rand({3, 32, 32}, torch::kDouble) * 2 - 1;
  auto f1 = torch::rand({3, 32, 32}, torch::kDouble) * 2 - 1;
  auto f2 = torch::rand({3, 32, 32}, torch::kDouble) * 2 - 1;
  auto single0 = m->image_encoder(f0.unsqueeze(0));
  auto single0_t = m->temporal_encoder(f0.unsqueeze(0));
  auto single1_t = m->temporal_encoder(f1.unsqueeze(0));
  (void)single0;

  // identical frames collapse to the single-frame encoding
  expect_close(m->temporal_encode(torch::stack({f0, f0, f0, f0}).unsqueeze(0)), single0_t);
  // permutation invariance
  expect_close(m->temporal_encode(torch::stack({f0, f1, f2}).unsqueeze(0)),
               m->temporal_encode(torch::stack({f2, f0, f1}).unsqueeze(0)));
  // two frames average their encodings
  auto pair = m->temporal_encode(torch::stack({f0, f1}).unsqueeze(0));
  for (int j = 0; j < kNumLevels; ++j) {
    EXPECT_TRUE(torch::allclose(pair.levels[j], (single0_t.levels[j] + single1_t.levels[j]) / 2, 1e-12, 1e-12));
  }
}

INSTANTIATE_TEST_SUITE_P(Networks, EncoderKinds, ::testing::Values(EncoderKind::kConv, EncoderKind::kAttention),
                         [](const ::testing::TestParamInfo<EncoderKind>& info) {
                           return std::string(info.param == EncoderKind::kConv ? "Conv" : "Attention");
                         });

TEST(Fusion, ZeroTemporalWithIdentityProjection) {
  auto net = fixtures::tiny_net(32);
  auto m = make_model(net);
  torch::NoGradGuard ng;
  for (int j = 0; j < kNumLevels; ++j) {
    auto& conv = m->fusion->projection(j);
    const auto c = net.channels[static_cast<size_t>(j)];
    conv->weight.zero_();
    conv->weight.slice(1, 0, c).copy_(torch::eye(c, torch::kDouble).view({c, c, 1, 1}));
    if (conv->bias.defined()) conv->bias.zero_();
  }
  auto s = m->image_encode(torch::rand({2, 3, 32, 32}, torch::kDouble));
  expect_close(m->fuse_prior(s, m->zero_pyramid(2)), m->fusion->top_down(s));
}

TEST(Fusion, ShapesAndTopDownPropagation) {
  NetworkConfig net;
  net.encoder = EncoderKind::kConv;
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto s = m->image_encode(torch::rand({1, 3, 64, 64}, torch::kDouble));
  auto r = m->image_encode(torch::rand({1, 3, 64, 64}, torch::kDouble));
  auto h = m->fuse_prior(s, r);
  EXPECT_NO_THROW(check_pyramid(h, net, "fused"));
  auto r2 = r;
  r2.levels[3] = r.levels[3] + 1.0;
  auto h2 = m->fuse_prior(s, r2);
  EXPECT_FALSE(torch::allclose(h.levels[0], h2.levels[0]));
}

TEST(Head, ShapesBoxRangeAndTime) {
  NetworkConfig net;
  net.encoder = EncoderKind::kConv;
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto prior = m->image_encode(torch::rand({2, 3, 64, 64}, torch::kDouble));
  auto z = torch::randn({2, 1, 16, 16}, torch::kDouble);
  auto a = m->denoise(z, prior, torch::tensor({0, 0}, torch::kLong));
  EXPECT_EQ(a.z0_hat.sizes(), (std::vector<int64_t>{2, 1, 16, 16}));
  EXPECT_EQ(a.mask_logits.sizes(), (std::vector<int64_t>{2, 64, 64}));
  EXPECT_EQ(a.cls_logits.sizes(), (std::vector<int64_t>{2, 6}));
  EXPECT_EQ(a.box.sizes(), (std::vector<int64_t>{2, 4}));
  auto b = m->denoise(z, prior, torch::tensor({999, 999}, torch::kLong));
  EXPECT_FALSE(torch::allclose(a.z0_hat, b.z0_hat));

  // box stays in [0, 1] however large the weights get
  for (auto& p : m->denoise_head->parameters()) p.mul_(50.0);
  auto c = m->denoise(z * 10, prior, torch::tensor({3, 500}, torch::kLong));
  EXPECT_GE(c.box.min().item<double>(), 0.0);
  EXPECT_LE(c.box.max().item<double>(), 1.0);
  EXPECT_TRUE(torch::isfinite(c.cls_logits).all().item<bool>());
}

TEST(Recon, ShapeAndBounds) {
  NetworkConfig net;
  net.encoder = EncoderKind::kConv;
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto r = m->temporal_encode(torch::rand({1, 4, 3, 64, 64}, torch::kDouble));
  for (auto& p : m->recon_decoder->parameters()) p.mul_(100.0);
  auto x = m->reconstruct(r);
  EXPECT_EQ(x.sizes(), (std::vector<int64_t>{1, 3, 64, 64}));
  EXPECT_GE(x.min().item<double>(), -1.0);
  EXPECT_LE(x.max().item<double>(), 1.0);
}

TEST(Recon, OverfitsOneClip) {
  auto net = fixtures::tiny_net(32);
  auto m = make_model(net, torch::kFloat, 4);
  torch::manual_seed(0);
  auto prev = torch::rand({1, 4, 3, 32, 32}) * 2 - 1;
  auto target = torch::rand({1, 3, 32, 32}) * 1.6 - 0.8;
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& item : m->named_parameters()) {
    if (item.key().starts_with("temporal_encoder.") || item.key().starts_with("recon_decoder.")) {
      params.emplace_back(item.key(), item.value());
    }
  }
  Adam opt(params, 0.9, 0.999, 1e-8);
  auto mse = [&] { return (m->reconstruct(m->temporal_encode(prev)) - target).pow(2).mean(); };
  const double start = mse().item<double>();
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    auto l = mse();
    l.backward();
    opt.step(1e-3);
  }
  EXPECT_LT(mse().item<double>(), start);
}

TEST(Discriminator, RangeAndDeterminism) {
  auto net = fixtures::tiny_net(32);
  auto m = make_model(net);
  torch::NoGradGuard ng;
  auto x = torch::randn({3, 3, 32, 32}, torch::kDouble);
  auto d = m->discriminate(x);
  EXPECT_EQ(d.sizes(), (std::vector<int64_t>{3}));
  EXPECT_GT(d.min().item<double>(), 0.0);
  EXPECT_LT(d.max().item<double>(), 1.0);
  EXPECT_TRUE(torch::equal(d, m->discriminate(x)));
  auto m2 = make_model(net);
  EXPECT_TRUE(torch::equal(d, m2->discriminate(x)));
}

TEST(Discriminator, LearnsSeparablePopulations) {
  auto net = fixtures::tiny_net(32);
  auto m = make_model(net, torch::kFloat, 7);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& item : m->named_parameters()) {
    if (item.key().starts_with("discriminator.")) params.emplace_back(item.key(), item.value());
  }
  Adam opt(params, 0.9, 0.999, 1e-8);
  auto real = [&] { return (0.5 + 0.2 * torch::randn({8, 3, 32, 32}, gen, torch::kFloat)).clamp(-1, 1); };
  auto fake = [&] { return (-0.5 + 0.2 * torch::randn({8, 3, 32, 32}, gen, torch::kFloat)).clamp(-1, 1); };
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    auto l = disc_loss(m->discriminate(fake()), m->discriminate(real())).value;
    l.backward();
    opt.step(1e-3);
  }
  torch::NoGradGuard ng;
  EXPECT_GT(m->discriminate(real()).mean().item<double>(), m->discriminate(fake()).mean().item<double>());
}

TEST(Model, ResetIsDeterministicAndPartitioned) {
  auto net = fixtures::tiny_net(32);
  DiffVPSModel a(net), b(net);
  a->reset_parameters(42);
  b->reset_parameters(42);
  auto pa = a->named_parameters(), pb = b->named_parameters();
  for (const auto& item : pa) {
    EXPECT_TRUE(torch::equal(item.value(), pb[item.key()])) << item.key();
    bool known = false;
    for (const char* part : kPartitions) known = known || item.key().starts_with(std::string(part) + ".");
    EXPECT_TRUE(known) << item.key();
    if (item.key().ends_with(".weight") && item.value().dim() > 1) {
      EXPECT_LE(item.value().abs().max().item<double>(), 2 * net.init_std + 1e-7) << item.key();
    }
  }
  EXPECT_EQ(a->generator_parameters().size() + a->discriminator_parameters().size(), pa.size());
}

TEST(Model, PretrainedDiscriminatorHook) {
  const auto dir = fixtures::scratch_dir("disc_hook");
  auto net = fixtures::tiny_net(32);
  DiffVPSModel src(net);
  src->reset_parameters(5);
  TensorMap weights;
  for (const auto& item : src->discriminator->named_parameters()) weights[item.key()] = item.value().detach();
  write_tensor_container(dir / "d.bin", weights, {{"kind", "discriminator"}});
  DiffVPSModel dst(net);
  dst->reset_parameters(6);
  dst->load_discriminator_weights((dir / "d.bin").string());
  for (const auto& item : dst->discriminator->named_parameters()) {
    EXPECT_TRUE(torch::equal(item.value(), weights[item.key()]));
  }
  weights.begin()->second = torch::zeros({1});
  write_tensor_container(dir / "bad.bin", weights, {});
  EXPECT_THROW(dst->load_discriminator_weights((dir / "bad.bin").string()), std::runtime_error);
}
