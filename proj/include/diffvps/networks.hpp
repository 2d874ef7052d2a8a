#pragma once

#include <torch/torch.h>

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffvps {

inline constexpr int64_t kNumClasses = 6;
inline constexpr int64_t kNumLevels = 4;

enum class EncoderKind { kConv, kAttention };

std::string to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& name);

struct NetworkConfig {
  int64_t height = 64;
  int64_t width = 64;
  std::array<int64_t, kNumLevels> channels{32, 64, 128, 256};
  int64_t embed_dim = 64;
  int64_t disc_width = 16;
  EncoderKind encoder = EncoderKind::kAttention;
  double init_std = 0.02;
};

nlohmann::json network_config_to_json(const NetworkConfig& cfg);
NetworkConfig network_config_from_json(const nlohmann::json& j);

// Four levels; level j (1-based) is c_j x H/2^(j+1) x W/2^(j+1), batched.
struct PyramidFeatures {
  std::array<torch::Tensor, kNumLevels> levels;

  PyramidFeatures map(const std::function<torch::Tensor(const torch::Tensor&)>& fn) const;
  int64_t batch() const { return levels[0].size(0); }
};

// Throws unless every level matches the configured channel/spatial contract.
void check_pyramid(const PyramidFeatures& p, const NetworkConfig& cfg, const char* what);

struct MultiTaskPrediction {
  torch::Tensor z0_hat;       // B x 1 x H/4 x W/4
  torch::Tensor mask_logits;  // B x H x W
  torch::Tensor cls_logits;   // B x 6
  torch::Tensor box;          // B x 4, (x_c, y_c, w, h) in [0, 1]
};

// Sinusoidal embedding of integer timesteps, B -> B x dim.
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, torch::Dtype dtype);

class PyramidEncoderImpl : public torch::nn::Module {
 public:
  explicit PyramidEncoderImpl(const NetworkConfig& cfg);
  PyramidFeatures forward(const torch::Tensor& frames);

 private:
  NetworkConfig cfg_;
  torch::nn::ModuleList stages_;
};
TORCH_MODULE(PyramidEncoder);

class PriorFusionImpl : public torch::nn::Module {
 public:
  explicit PriorFusionImpl(const NetworkConfig& cfg);
  PyramidFeatures forward(const PyramidFeatures& spatial, const PyramidFeatures& temporal);
  // Top-down pass alone, applied to already merged levels.
  PyramidFeatures top_down(const PyramidFeatures& merged);
  torch::nn::Conv2d& projection(int64_t level) { return proj_[static_cast<size_t>(level)]; }

 private:
  NetworkConfig cfg_;
  std::vector<torch::nn::Conv2d> proj_;
  std::vector<torch::nn::Conv2d> lateral_;
  std::vector<torch::nn::Conv2d> smooth_;
};
TORCH_MODULE(PriorFusion);

class DenoiseHeadImpl : public torch::nn::Module {
 public:
  explicit DenoiseHeadImpl(const NetworkConfig& cfg);
  MultiTaskPrediction forward(const torch::Tensor& z_t, const PyramidFeatures& prior,
                              const torch::Tensor& t);

 private:
  NetworkConfig cfg_;
  std::vector<torch::nn::Conv2d> unify_;
  torch::nn::Linear time_in_{nullptr}, time_out_{nullptr};
  torch::nn::Conv2d fuse_a_{nullptr}, fuse_b_{nullptr};
  torch::nn::Conv2d latent_out_{nullptr}, mask_out_{nullptr};
  torch::nn::Linear cls_out_{nullptr}, box_out_{nullptr};
};
TORCH_MODULE(DenoiseHead);

class ReconDecoderImpl : public torch::nn::Module {
 public:
  explicit ReconDecoderImpl(const NetworkConfig& cfg);
  torch::Tensor forward(const PyramidFeatures& temporal);

 private:
  NetworkConfig cfg_;
  std::vector<torch::nn::Conv2d> unify_;
  torch::nn::Conv2d fuse_a_{nullptr}, fuse_b_{nullptr}, rgb_out_{nullptr};
};
TORCH_MODULE(ReconDecoder);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(const NetworkConfig& cfg);
  // B x 3 x H x W -> B probabilities clamped into [1e-7, 1 - 1e-7].
  torch::Tensor forward(const torch::Tensor& frames);

 private:
  std::vector<torch::nn::Conv2d> convs_;
  torch::nn::Linear out_{nullptr};
};
TORCH_MODULE(Discriminator);

// All parameterized operators. Parameter names are prefixed by the owning
// partition: image_encoder, temporal_encoder, fusion, denoise_head,
// recon_decoder, discriminator.
class DiffVPSModelImpl : public torch::nn::Module {
 public:
  explicit DiffVPSModelImpl(const NetworkConfig& cfg);

  const NetworkConfig& config() const { return cfg_; }

  PyramidFeatures image_encode(const torch::Tensor& frame);
  // frames: B x delta x 3 x H x W; per-frame shared encoder then temporal mean.
  PyramidFeatures temporal_encode(const torch::Tensor& frames);
  PyramidFeatures fuse_prior(const PyramidFeatures& spatial, const PyramidFeatures& temporal);
  MultiTaskPrediction denoise(const torch::Tensor& z_t, const PyramidFeatures& prior,
                              const torch::Tensor& t);
  torch::Tensor reconstruct(const PyramidFeatures& temporal);
  torch::Tensor discriminate(const torch::Tensor& frames);

  PyramidFeatures zero_pyramid(int64_t batch) const;

  std::vector<torch::Tensor> generator_parameters() const;
  std::vector<torch::Tensor> discriminator_parameters() const;

  // Truncated normal (std cfg.init_std, cut at 2 std) weights, zero biases,
  // unit norm scales. Deterministic for a given seed.
  void reset_parameters(uint64_t seed);

  // Loads discriminator weights from a tensor container whose names match
  // this model's discriminator parameters (without the partition prefix).
  void load_discriminator_weights(const std::string& path);

  PyramidEncoder image_encoder{nullptr};
  PyramidEncoder temporal_encoder{nullptr};
  PriorFusion fusion{nullptr};
  DenoiseHead denoise_head{nullptr};
  ReconDecoder recon_decoder{nullptr};
  Discriminator discriminator{nullptr};

 private:
  NetworkConfig cfg_;
};
TORCH_MODULE(DiffVPSModel);

inline constexpr std::array<const char*, 6> kPartitions{
    "image_encoder", "temporal_encoder", "fusion", "denoise_head", "recon_decoder", "discriminator"};

}  // namespace diffvps
