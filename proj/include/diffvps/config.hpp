#pragma once

#include "diffvps/losses.hpp"
#include "diffvps/metrics.hpp"
#include "diffvps/networks.hpp"
#include "diffvps/schedule.hpp"

#include <filesystem>
#include <string>

#include <json.hpp>

namespace diffvps {

struct Ablation {
  bool mdm = true;  // classification + detection supervision
  bool trm = true;  // temporal branch and reconstruction loss
  bool ass = true;  // adversarial term and discriminator updates
};

struct DiffusionConfig {
  ScheduleKind kind = ScheduleKind::kLinear;
  int64_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int64_t K = 10;      // sampler steps
  double eta = 0.0;    // 0 = deterministic updates
  double latent_scale = 1.0;
};

struct TrainConfig {
  int64_t epochs = 15;
  int64_t max_steps = 0;  // optional cap on optimizer steps; 0 = none
  int64_t batch_size = 16;
  double lr = 1e-4;
  double lr_power = 0.9;
  int64_t delta = 4;
  NetworkConfig net;
  LossWeights weights;
  BoxLoss box_loss = BoxLoss::kBce;
  DiffusionConfig diffusion;
  Ablation ablation;
  uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double val_fraction = 0.1;
  int64_t ensemble = 1;
  Pooling pooling = Pooling::kFrames;
  std::string disc_weights;  // optional pretrained discriminator container
};

void validate(const TrainConfig& cfg);

// Loss weights after the ablation toggles are applied.
LossWeights effective_weights(const TrainConfig& cfg);

nlohmann::json config_to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

NoiseSchedule build_schedule(const DiffusionConfig& d);

// Sets one key from the key = value config format; throws on unknown keys
// or unparsable values.
void apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

// "key = value" lines; '#' starts a comment; blank lines ignored.
void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path);

// Documented keys, in file order, with a one-line description each.
std::string config_keys_help();

}  // namespace diffvps
