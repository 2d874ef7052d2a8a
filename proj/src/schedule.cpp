#include "diffvps/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace diffvps {
namespace {

void require_finite(const torch::Tensor& x, const char* what) {
  if (!torch::isfinite(x).all().item<bool>()) {
    throw std::invalid_argument(std::string(what) + " contains non-finite values");
  }
}

void check_timestep(int64_t t, const NoiseSchedule& schedule) {
  if (t < 0 || t >= schedule.T) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(schedule.T) + ")");
  }
}

void fill_tables(NoiseSchedule& s) {
  s.alphas.resize(s.betas.size());
  s.alpha_bars.resize(s.betas.size());
  double running = 1.0;
  for (size_t i = 0; i < s.betas.size(); ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    running *= s.alphas[i];
    s.alpha_bars[i] = running;
  }
}

}  // namespace

std::string to_string(ScheduleKind kind) {
  return kind == ScheduleKind::kLinear ? "linear" : "cosine";
}

ScheduleKind schedule_kind_from_string(const std::string& name) {
  if (name == "linear") return ScheduleKind::kLinear;
  if (name == "cosine") return ScheduleKind::kCosine;
  throw std::invalid_argument("unknown schedule kind '" + name + "'");
}

torch::Tensor NoiseSchedule::alpha_bar_table(torch::Dtype dtype) const {
  return torch::tensor(alpha_bars, torch::kDouble).to(dtype);
}

NoiseSchedule make_schedule(ScheduleKind kind, int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule needs T >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("schedule needs 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.kind = kind;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(static_cast<size_t>(T));
  if (kind == ScheduleKind::kLinear) {
    for (int64_t i = 0; i < T; ++i) {
      const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
      s.betas[static_cast<size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
  } else {
    // Squared-cosine cumulative product, betas clipped into [beta_start, beta_end].
    constexpr double offset = 0.008;
    auto f = [&](double u) {
      const double v = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return v * v;
    };
    for (int64_t i = 0; i < T; ++i) {
      const double prev = f(static_cast<double>(i) / static_cast<double>(T));
      const double next = f(static_cast<double>(i + 1) / static_cast<double>(T));
      s.betas[static_cast<size_t>(i)] = std::clamp(1.0 - next / prev, beta_start, beta_end);
    }
  }
  fill_tables(s);
  return s;
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("empty beta table");
  for (double b : betas) {
    if (!(b >= 0.0 && b < 1.0)) throw std::invalid_argument("beta outside [0, 1)");
  }
  NoiseSchedule s;
  s.T = static_cast<int64_t>(betas.size());
  s.beta_start = betas.front();
  s.beta_end = betas.back();
  s.betas = std::move(betas);
  fill_tables(s);
  return s;
}

nlohmann::json schedule_to_json(const NoiseSchedule& schedule) {
  return {{"kind", to_string(schedule.kind)},
          {"T", schedule.T},
          {"beta_start", schedule.beta_start},
          {"beta_end", schedule.beta_end}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  return make_schedule(schedule_kind_from_string(j.at("kind").get<std::string>()),
                       j.at("T").get<int64_t>(), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>());
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                              const NoiseSchedule& schedule) {
  check_timestep(t, schedule);
  if (z0.sizes() != eps.sizes()) throw std::invalid_argument("forward_diffuse: z0/eps shape mismatch");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t,
                              const torch::Tensor& eps, const NoiseSchedule& schedule) {
  if (z0.sizes() != eps.sizes()) throw std::invalid_argument("forward_diffuse: z0/eps shape mismatch");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) {
    throw std::invalid_argument("forward_diffuse: need one timestep per batch entry");
  }
  if (t.numel() > 0 && (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= schedule.T)) {
    throw std::out_of_range("forward_diffuse: timestep out of range");
  }
  std::vector<int64_t> bshape(static_cast<size_t>(z0.dim()), 1);
  bshape[0] = z0.size(0);
  auto ab = schedule.alpha_bar_table(z0.scalar_type()).index_select(0, t.to(torch::kLong)).view(bshape);
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

StepSchedule make_step_schedule(int64_t T, int64_t K) {
  if (K < 1) throw std::invalid_argument("step schedule needs K >= 1");
  if (K > T - 1) {
    throw std::invalid_argument("step schedule needs K <= T - 1 (got K=" + std::to_string(K) +
                                ", T=" + std::to_string(T) + ")");
  }
  StepSchedule out;
  out.steps.reserve(static_cast<size_t>(K + 1));
  for (int64_t k = K; k >= 0; --k) {
    const double pos = static_cast<double>(T - 1) * static_cast<double>(k) / static_cast<double>(K);
    out.steps.push_back(static_cast<int64_t>(std::llround(pos)));
  }
  return out;
}

torch::Tensor reverse_step(const torch::Tensor& z_t, const torch::Tensor& z0_hat, int64_t t,
                           int64_t t_prev, const NoiseSchedule& schedule) {
  return reverse_step_stochastic(z_t, z0_hat, t, t_prev, schedule, 0.0, torch::Tensor());
}

torch::Tensor reverse_step_stochastic(const torch::Tensor& z_t, const torch::Tensor& z0_hat,
                                      int64_t t, int64_t t_prev, const NoiseSchedule& schedule,
                                      double eta, const torch::Tensor& noise) {
  check_timestep(t, schedule);
  if (t_prev >= t) throw std::invalid_argument("reverse_step needs t_prev < t");
  if (t_prev != kEmitClean) check_timestep(t_prev, schedule);
  if (z_t.sizes() != z0_hat.sizes()) throw std::invalid_argument("reverse_step: shape mismatch");
  require_finite(z_t, "z_t");
  require_finite(z0_hat, "z0_hat");
  if (t_prev == kEmitClean) return z0_hat;

  const double ab_t = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  // abar_t == 1 only for a zero-noise prefix; z_t is then already clean.
  const auto eps_hat =
      ab_t < 1.0 ? (z_t - std::sqrt(ab_t) * z0_hat) / std::sqrt(1.0 - ab_t) : torch::zeros_like(z_t);
  if (eta == 0.0) {
    return std::sqrt(ab_prev) * z0_hat + std::sqrt(1.0 - ab_prev) * eps_hat;
  }
  if (!noise.defined() || noise.sizes() != z_t.sizes()) {
    throw std::invalid_argument("reverse_step: stochastic mode needs noise shaped like z_t");
  }
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  return std::sqrt(ab_prev) * z0_hat + dir * eps_hat + sigma * noise;
}

}  // namespace diffvps
