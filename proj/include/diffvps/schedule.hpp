#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffvps {

enum class ScheduleKind { kLinear, kCosine };

std::string to_string(ScheduleKind kind);
ScheduleKind schedule_kind_from_string(const std::string& name);

// Discrete noise schedule. Only (kind, T, beta_start, beta_end) are
// persisted; the tables are rebuilt on construction.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::kLinear;
  int64_t T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int64_t t) const { return alpha_bars.at(static_cast<size_t>(t)); }
  torch::Tensor alpha_bar_table(torch::Dtype dtype = torch::kFloat) const;
};

NoiseSchedule make_schedule(ScheduleKind kind, int64_t T, double beta_start,
                            double beta_end);

// Schedule from an explicit beta table. Betas may be zero here, which the
// public constructor rejects; used for identity checks.
NoiseSchedule schedule_from_betas(std::vector<double> betas);

nlohmann::json schedule_to_json(const NoiseSchedule& schedule);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
torch::Tensor forward_diffuse(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule);

// Batched form: t holds one timestep per leading-dimension entry of z0.
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule);

// Timesteps visited by the sampler: K+1 strictly decreasing entries from
// T-1 to 0.
struct StepSchedule {
  std::vector<int64_t> steps;
  int64_t K() const { return static_cast<int64_t>(steps.size()) - 1; }
};

StepSchedule make_step_schedule(int64_t T, int64_t K);

inline constexpr int64_t kEmitClean = -1;

// Deterministic update for an x0-predicting denoiser. The noise estimate is
// recovered from (z_t, z0_hat); t_prev == kEmitClean returns z0_hat.
torch::Tensor reverse_step(const torch::Tensor& z_t, const torch::Tensor& z0_hat, int64_t t,
                           int64_t t_prev, const NoiseSchedule& schedule);

// Stochastic variant. eta = 0 reproduces reverse_step; eta = 1 matches
// ancestral sampling variance. `noise` must have z_t's shape.
torch::Tensor reverse_step_stochastic(const torch::Tensor& z_t, const torch::Tensor& z0_hat,
                                      int64_t t, int64_t t_prev, const NoiseSchedule& schedule,
                                      double eta, const torch::Tensor& noise);

}  // namespace diffvps
