#include "diffvps/schedule.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace diffvps;

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1, 0.01, 0.01);
  ASSERT_EQ(s.betas.size(), 1u);
  EXPECT_DOUBLE_EQ(s.betas[0], 0.01);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 0.99);
}

TEST(Schedule, ConstantBetaClosedForm) {
  const auto s = make_schedule(ScheduleKind::kLinear, 10, 0.1, 0.1);
  EXPECT_NEAR(s.alpha_bars[9], 0.3486784401, 1e-12);
}

TEST(Schedule, DefaultLinearProductIdentity) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  long double prod = 1.0L;
  for (int64_t t = 0; t < 1000; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * t / 999.0L;
    prod *= 1.0L - beta;
    EXPECT_NEAR(s.alpha_bars[static_cast<size_t>(t)], static_cast<double>(prod), 1e-12);
    EXPECT_DOUBLE_EQ(s.alphas[static_cast<size_t>(t)], 1.0 - s.betas[static_cast<size_t>(t)]);
    if (t > 0) {
      EXPECT_LT(s.alpha_bars[static_cast<size_t>(t)], s.alpha_bars[static_cast<size_t>(t - 1)]);
      EXPECT_DOUBLE_EQ(s.alpha_bars[static_cast<size_t>(t)],
                       s.alpha_bars[static_cast<size_t>(t - 1)] * s.alphas[static_cast<size_t>(t)]);
    }
  }
  EXPECT_GT(s.alpha_bars[999], 0.0);
  EXPECT_LT(s.alpha_bars[999], 1e-3);
}

TEST(Schedule, CosineIsMonotone) {
  const auto s = make_schedule(ScheduleKind::kCosine, 200, 1e-4, 0.02);
  for (size_t t = 1; t < s.alpha_bars.size(); ++t) {
    EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
    EXPECT_GT(s.alpha_bars[t], 0.0);
  }
}

TEST(Schedule, RejectsInvalid) {
  EXPECT_THROW(make_schedule(ScheduleKind::kLinear, 0, 1e-4, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::kLinear, 10, 0.0, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::kLinear, 10, 0.03, 0.02), std::invalid_argument);
  EXPECT_THROW(make_schedule(ScheduleKind::kLinear, 10, 1e-4, 1.0), std::invalid_argument);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  const auto r = schedule_from_json(schedule_to_json(s));
  EXPECT_EQ(r.T, s.T);
  EXPECT_EQ(r.alpha_bars, s.alpha_bars);
}

TEST(ForwardDiffuse, ZeroBetasIsIdentity) {
  const auto s = schedule_from_betas(std::vector<double>(16, 0.0));
  auto z0 = torch::randn({2, 1, 4, 4}, torch::kDouble);
  auto eps = torch::randn({2, 1, 4, 4}, torch::kDouble);
  for (int64_t t : {0, 7, 15}) EXPECT_TRUE(torch::equal(forward_diffuse(z0, t, eps, s), z0));
}

TEST(ForwardDiffuse, ZeroNoise) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto z0 = torch::randn({1, 4, 4}, torch::kDouble);
  auto out = forward_diffuse(z0, 500, torch::zeros_like(z0), s);
  EXPECT_TRUE(torch::allclose(out, std::sqrt(s.alpha_bar(500)) * z0, 0.0, 1e-15));
}

TEST(ForwardDiffuse, Linear) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto z0 = torch::randn({1, 4, 4}, torch::kDouble);
  auto eps = torch::randn({1, 4, 4}, torch::kDouble);
  const double a = -2.5;
  EXPECT_TRUE(torch::allclose(forward_diffuse(a * z0, 321, a * eps, s), a * forward_diffuse(z0, 321, eps, s),
                              1e-14, 1e-14));
}

TEST(ForwardDiffuse, BatchedMatchesScalar) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto z0 = torch::randn({3, 1, 4, 4}, torch::kDouble);
  auto eps = torch::randn({3, 1, 4, 4}, torch::kDouble);
  auto t = torch::tensor({0, 500, 999}, torch::kLong);
  auto out = forward_diffuse(z0, t, eps, s);
  for (int64_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(torch::allclose(out[i], forward_diffuse(z0[i], t[i].item<int64_t>(), eps[i], s), 0.0, 1e-15));
  }
}

TEST(ForwardDiffuse, MonteCarloMoments) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  torch::manual_seed(5);
  const int64_t n = 10000;
  auto z0 = torch::rand({1, 4, 4}, torch::kDouble) * 2 - 1;
  const int64_t t = 250;
  auto eps = torch::randn({n, 1, 4, 4}, torch::kDouble);
  auto x = forward_diffuse(z0.expand({n, 1, 4, 4}), t, eps, s);
  const double ab = s.alpha_bar(t);
  auto mean = x.mean(0);
  auto var = x.var(0);
  const double tol = 4.0 * std::sqrt((1 - ab) / n);
  EXPECT_LE((mean - std::sqrt(ab) * z0).abs().max().item<double>(), tol);
  EXPECT_LE(((var - (1 - ab)).abs() / (1 - ab)).max().item<double>(), 0.1);
}

TEST(StepSchedule, Examples) {
  EXPECT_EQ(make_step_schedule(1000, 1).steps, (std::vector<int64_t>{999, 0}));
  const auto k10 = make_step_schedule(1000, 10).steps;
  ASSERT_EQ(k10.size(), 11u);
  EXPECT_EQ(k10.front(), 999);
  EXPECT_EQ(k10.back(), 0);
  const auto k4 = make_step_schedule(8, 4).steps;
  ASSERT_EQ(k4.size(), 5u);
  EXPECT_EQ(k4.front(), 7);
  EXPECT_EQ(k4.back(), 0);
  for (int64_t T : {2, 8, 50, 1000}) {
    for (int64_t K = 1; K < std::min<int64_t>(T, 40); ++K) {
      const auto st = make_step_schedule(T, K).steps;
      ASSERT_EQ(static_cast<int64_t>(st.size()), K + 1);
      EXPECT_EQ(st.front(), T - 1);
      EXPECT_EQ(st.back(), 0);
      for (size_t i = 1; i < st.size(); ++i) EXPECT_LT(st[i], st[i - 1]);
    }
  }
  EXPECT_THROW(make_step_schedule(1000, 0), std::invalid_argument);
  EXPECT_THROW(make_step_schedule(10, 10), std::invalid_argument);
}

TEST(ReverseStep, OracleConsistency) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  torch::manual_seed(9);
  for (auto [t, tp] : {std::pair<int64_t, int64_t>{999, 899}, {500, 1}, {10, 0}, {1, 0}}) {
    auto z0 = torch::rand({1, 8, 8}, torch::kDouble) * 2 - 1;
    auto eps = torch::randn({1, 8, 8}, torch::kDouble);
    auto zt = forward_diffuse(z0, t, eps, s);
    auto out = reverse_step(zt, z0, t, tp, s);
    EXPECT_TRUE(torch::allclose(out, forward_diffuse(z0, tp, eps, s), 1e-10, 1e-10)) << t << " -> " << tp;
  }
}

TEST(ReverseStep, EmitClean) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto zt = torch::randn({1, 4, 4}, torch::kDouble);
  auto z0 = torch::randn({1, 4, 4}, torch::kDouble);
  EXPECT_TRUE(torch::equal(reverse_step(zt, z0, 0, kEmitClean, s), z0));
}

TEST(ReverseStep, RejectsBadOrderAndNonFinite) {
  const auto s = make_schedule(ScheduleKind::kLinear, 100, 1e-4, 0.02);
  auto z = torch::zeros({1, 4, 4}, torch::kDouble);
  EXPECT_THROW(reverse_step(z, z, 10, 10, s), std::invalid_argument);
  auto bad = z.clone();
  bad[0][0][0] = std::nan("");
  EXPECT_THROW(reverse_step(bad, z, 10, 5, s), std::invalid_argument);
}

TEST(ReverseStep, FullOracleChain) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  torch::manual_seed(4);
  auto z0 = torch::rand({1, 8, 8}, torch::kDouble) * 2 - 1;
  for (int64_t K : {1, 5, 10, 50}) {
    auto z = torch::randn({1, 8, 8}, torch::kDouble);
    const auto steps = make_step_schedule(1000, K).steps;
    for (size_t i = 0; i < steps.size(); ++i) {
      const int64_t prev = i + 1 < steps.size() ? steps[i + 1] : kEmitClean;
      z = reverse_step(z, z0, steps[i], prev, s);
    }
    EXPECT_LE(((z - z0).abs() / z0.abs().clamp_min(1e-12)).max().item<double>(), 1e-6);
  }
}

TEST(ReverseStep, StochasticEtaZeroMatchesDeterministic) {
  const auto s = make_schedule(ScheduleKind::kLinear, 1000, 1e-4, 0.02);
  auto zt = torch::randn({1, 4, 4}, torch::kDouble);
  auto z0 = torch::randn({1, 4, 4}, torch::kDouble);
  auto noise = torch::randn({1, 4, 4}, torch::kDouble);
  EXPECT_TRUE(torch::allclose(reverse_step_stochastic(zt, z0, 600, 500, s, 0.0, noise),
                              reverse_step(zt, z0, 600, 500, s), 1e-12, 1e-12));
  EXPECT_FALSE(torch::allclose(reverse_step_stochastic(zt, z0, 600, 500, s, 1.0, noise),
                               reverse_step(zt, z0, 600, 500, s)));
}
