#pragma once

#include "diffvps/checkpoint.hpp"
#include "diffvps/config.hpp"
#include "diffvps/data.hpp"
#include "diffvps/metrics.hpp"
#include "diffvps/networks.hpp"
#include "diffvps/schedule.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffvps {

uint64_t mix_seed(uint64_t a, uint64_t b);

// lr0 * (1 - step / total_steps)^power; 0 at and beyond the last step.
double lr_at(int64_t step, int64_t total_steps, double lr0, double power);

// Adam with bias correction over a fixed, named parameter list.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1, double beta2, double eps);

  void step(double lr);
  void zero_grad();
  int64_t steps() const { return steps_; }

  void save(const std::string& prefix, TensorMap& out) const;
  void load(const std::string& prefix, const TensorMap& in, int64_t steps);

 private:
  std::vector<std::pair<std::string, torch::Tensor>> params_;
  std::vector<torch::Tensor> m_, v_;
  double beta1_, beta2_, eps_;
  int64_t steps_ = 0;
};

struct LossRecord {
  int64_t step = 0;
  double lr = 0;
  double seg = 0, cls = 0, det = 0, mdm = 0;
  double g_mse = 0, g_adv = 0, disc = 0;
  double trm = 0, total = 0;

  nlohmann::json to_json() const;
};

struct Batch {
  torch::Tensor target;  // B x 3 x H x W
  torch::Tensor prev;    // B x delta x 3 x H x W
  torch::Tensor mask;    // B x H x W
  torch::Tensor cls;     // B (long)
  torch::Tensor box;     // B x 4
};

Batch collate(const std::vector<VideoClip>& clips, torch::Dtype dtype = torch::kFloat);

// Loss terms of one forward pass with the discriminator treated as fixed.
struct ForwardLosses {
  torch::Tensor seg, cls, det, mdm;
  torch::Tensor g_mse, g_adv, trm;
  torch::Tensor total;
  torch::Tensor frame_hat;  // undefined when the temporal branch is off
};

enum class TrainPhase { kGenerator, kDiscriminator };

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  static Trainer from_checkpoint(const Checkpoint& ckpt);

  // Forward pass and all generator-side losses for given timesteps/noise.
  ForwardLosses forward_losses(const Batch& batch, const torch::Tensor& t, const torch::Tensor& eps);

  // One generator update followed by one discriminator update.
  LossRecord train_step(const std::vector<VideoClip>& clips, int64_t total_steps);

  Checkpoint checkpoint() const;

  DiffVPSModel& model() { return model_; }
  const TrainConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  int64_t step() const { return step_; }
  int64_t epoch() const { return epoch_; }
  void set_epoch(int64_t e) { epoch_ = e; }

  // Called after each parameter update with the phase that just ran.
  std::function<void(TrainPhase)> on_update;

 private:
  TrainConfig cfg_;
  NoiseSchedule schedule_;
  DiffVPSModel model_{nullptr};
  std::unique_ptr<Adam> gen_opt_, disc_opt_;
  int64_t step_ = 0;
  int64_t epoch_ = 0;
};

// Rebuilds a model from a checkpoint, validating every parameter shape.
DiffVPSModel model_from_checkpoint(const Checkpoint& ckpt);

// Denoiser seen by the sampler: (z_t, t) -> prediction. The spatiotemporal
// prior is bound inside.
using DenoiseFn = std::function<MultiTaskPrediction(const torch::Tensor& z_t, const torch::Tensor& t)>;

struct ChainResult {
  torch::Tensor z0;           // final latent
  torch::Tensor mask_logits;  // head output at the last visited step
};

// Runs the reverse chain from z_T over make_step_schedule(T, K).
ChainResult sample_chain(const DenoiseFn& head, const torch::Tensor& z_T, const NoiseSchedule& schedule,
                         int64_t K, double eta = 0.0, uint64_t noise_seed = 0);

struct InferOptions {
  int64_t K = 10;
  double eta = 0.0;
  int64_t ensemble = 1;
  uint64_t seed = 0;
};

// Noise seed of a frame; identical regardless of batching.
uint64_t frame_noise_seed(uint64_t seed, const std::string& case_id, int64_t frame);

// Probability maps (B x H x W) for a batch; one noise seed per sample.
torch::Tensor infer_batch(DiffVPSModel& model, const TrainConfig& cfg, const NoiseSchedule& schedule,
                          const Batch& batch, const std::vector<uint64_t>& noise_seeds, const InferOptions& opts);

torch::Tensor infer_clip(const Checkpoint& ckpt, const VideoClip& clip, const InferOptions& opts);

struct Evaluation {
  MetricReport report;
  std::vector<FrameScore> frames;
  std::map<std::string, std::string> split_of;  // case_id -> split
};

// Selects test cases by split: "all", "seen", "unseen", "easy", "hard" or
// an exact split such as "hard-unseen".
std::vector<const CaseEntry*> select_test_cases(const DatasetIndex& index, const std::string& filter);

using PredictFn = std::function<torch::Tensor(const std::vector<VideoClip>&)>;

// Scores every frame of `cases`; split labels come from `split_of` (or the
// case's own split when absent).
Evaluation evaluate_cases(const DatasetIndex& index, const std::vector<const CaseEntry*>& cases, int64_t height,
                          int64_t width, int64_t delta, const PredictFn& predict, Pooling pooling = Pooling::kFrames,
                          int64_t batch_size = 16, const std::map<std::string, std::string>& split_of = {});

Evaluation evaluate_with(const DatasetIndex& index, const std::string& filter, int64_t height, int64_t width,
                         int64_t delta, const PredictFn& predict, Pooling pooling = Pooling::kFrames,
                         int64_t batch_size = 16);

Evaluation evaluate(const Checkpoint& ckpt, const DatasetIndex& index, const std::string& filter,
                    const InferOptions& opts);

// Pooled mean Dice / S over the frames of the given splits.
double mean_dice(const Evaluation& eval, const std::vector<std::string>& splits = {});
double mean_s_alpha(const Evaluation& eval, const std::vector<std::string>& splits = {});

struct TrainSummary {
  std::filesystem::path last_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_val_dice = -1.0;
  int64_t steps = 0;
};

// Full training run over the index's train cases. Writes last.ckpt,
// best.ckpt (when validating) and train_log.jsonl into out_dir.
TrainSummary train(const TrainConfig& cfg, const DatasetIndex& index, const std::filesystem::path& out_dir,
                   const std::function<void(const std::string&)>& log = {});

struct AblationRow {
  std::string model;  // "#1".."#4", "Ours"
  Ablation toggles;
  Evaluation eval;
};

std::vector<Ablation> ablation_matrix();
std::string ablation_name(size_t i);

std::vector<AblationRow> run_ablation(const TrainConfig& base, const DatasetIndex& index,
                                      const std::filesystem::path& out_dir,
                                      const std::function<void(const std::string&)>& log = {});

std::string ablation_summary_csv(const std::vector<AblationRow>& rows);
std::string ablation_detail_csv(const std::vector<AblationRow>& rows);

}  // namespace diffvps
