#pragma once

#include <torch/torch.h>

#include <filesystem>

namespace diffvps {

inline constexpr int64_t kLatentStride = 4;

enum class Upsample { kNearest, kBilinear };

// Binary mask (H x W, or B x H x W) -> latent (1 x H/4 x W/4, or B x 1 x H/4 x W/4).
// 4x4 area average mapped affinely from [0, 1] onto [-scale_b, +scale_b].
torch::Tensor encode_mask(const torch::Tensor& mask, double scale_b = 1.0);

// Latent -> probability map of out_h x out_w (batch dimension preserved).
// Nearest upsampling keeps block-constant masks exact through a round trip.
torch::Tensor decode_pred(const torch::Tensor& z0_hat, double scale_b, int64_t out_h, int64_t out_w,
                          Upsample mode = Upsample::kNearest);

// 1 where prob >= threshold, else 0. Threshold must lie in (0, 1].
torch::Tensor binarize(const torch::Tensor& prob, double threshold = 0.5);

// 8-bit single channel PNG. Binary masks are stored as {0, 255}; reading
// maps 0..255 linearly onto [0, 1] (float, H x W).
torch::Tensor read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const torch::Tensor& mask);

bool is_binary(const torch::Tensor& mask);

}  // namespace diffvps
