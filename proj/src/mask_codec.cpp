#include "diffvps/mask_codec.hpp"

#include <opencv2/imgcodecs.hpp>

#include <stdexcept>

namespace diffvps {

namespace F = torch::nn::functional;

bool is_binary(const torch::Tensor& mask) {
  return torch::logical_or(mask == 0, mask == 1).all().item<bool>();
}

torch::Tensor encode_mask(const torch::Tensor& mask, double scale_b) {
  if (mask.dim() != 2 && mask.dim() != 3) throw std::invalid_argument("encode_mask: expected H x W or B x H x W");
  if (!(scale_b > 0.0)) throw std::invalid_argument("encode_mask: scale must be positive");
  const auto h = mask.size(-2);
  const auto w = mask.size(-1);
  if (h % kLatentStride != 0 || w % kLatentStride != 0) {
    throw std::invalid_argument("encode_mask: mask dimensions must be divisible by 4");
  }
  if (!is_binary(mask)) throw std::invalid_argument("encode_mask: mask is not binary");
  const bool batched = mask.dim() == 3;
  auto x = batched ? mask.unsqueeze(1) : mask.unsqueeze(0).unsqueeze(0);
  if (!x.is_floating_point()) x = x.to(torch::kFloat);
  auto pooled = F::avg_pool2d(x, F::AvgPool2dFuncOptions(kLatentStride));
  auto latent = pooled * (2.0 * scale_b) - scale_b;
  return batched ? latent : latent.squeeze(0);
}

torch::Tensor decode_pred(const torch::Tensor& z0_hat, double scale_b, int64_t out_h, int64_t out_w,
                          Upsample mode) {
  if (z0_hat.dim() != 3 && z0_hat.dim() != 4) throw std::invalid_argument("decode_pred: expected latent with channel dim");
  if (!(scale_b > 0.0)) throw std::invalid_argument("decode_pred: scale must be positive");
  if (!torch::isfinite(z0_hat).all().item<bool>()) throw std::invalid_argument("decode_pred: non-finite latent");
  const bool batched = z0_hat.dim() == 4;
  auto x = batched ? z0_hat : z0_hat.unsqueeze(0);
  auto prob = ((x + scale_b) / (2.0 * scale_b)).clamp(0.0, 1.0);
  auto opts = F::InterpolateFuncOptions().size(std::vector<int64_t>{out_h, out_w});
  if (mode == Upsample::kBilinear) {
    opts = opts.mode(torch::kBilinear).align_corners(false);
  } else {
    opts = opts.mode(torch::kNearest);
  }
  auto up = F::interpolate(prob, opts).select(1, 0);
  return batched ? up : up.squeeze(0);
}

torch::Tensor binarize(const torch::Tensor& prob, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw std::invalid_argument("binarize: threshold outside (0, 1]");
  return (prob >= threshold).to(prob.is_floating_point() ? prob.scalar_type() : torch::kFloat);
}

torch::Tensor read_mask(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (img.empty()) throw std::runtime_error("cannot read mask " + path.string());
  auto t = torch::from_blob(img.data, {img.rows, img.cols}, torch::kUInt8).clone();
  return t.to(torch::kFloat) / 255.0;
}

void write_mask(const std::filesystem::path& path, const torch::Tensor& mask) {
  if (mask.dim() != 2) throw std::invalid_argument("write_mask: expected H x W");
  auto bytes = (mask.to(torch::kDouble).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  cv::Mat img(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC1, bytes.data_ptr<uint8_t>());
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write mask " + path.string());
}

}  // namespace diffvps
