#pragma once

#include <torch/torch.h>

#include <string>

#include <json.hpp>

namespace diffvps {

inline constexpr double kProbClamp = 1e-7;
inline constexpr double kIouSmooth = 1.0;

struct LossWeights {
  double seg = 0.5;
  double cls = 0.05;
  double det = 0.2;
  double adv = 0.001;
  double mdm = 0.75;
  double trm = 0.25;
};

nlohmann::json loss_weights_to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);
void validate(const LossWeights& w);

enum class BoxLoss { kBce, kL1 };
std::string to_string(BoxLoss kind);
BoxLoss box_loss_from_string(const std::string& name);

// Inputs are H x W or B x H x W; reductions are means over pixels and batch.
torch::Tensor pixel_bce(const torch::Tensor& prob, const torch::Tensor& gt);
// Per-sample soft IoU loss with smoothing 1, averaged over the batch.
torch::Tensor iou_loss(const torch::Tensor& prob, const torch::Tensor& gt);

// CE(prob, gt) + MSE(z0_hat, z0) + IoU(prob, gt).
torch::Tensor seg_loss(const torch::Tensor& prob, const torch::Tensor& z0_hat, const torch::Tensor& z0,
                       const torch::Tensor& gt);

torch::Tensor class_ce(const torch::Tensor& cls_logits, const torch::Tensor& y_cls);
// Coordinate-wise BCE between squashed boxes and normalized targets (or L1).
torch::Tensor box_loss(const torch::Tensor& box, const torch::Tensor& y_box, BoxLoss kind = BoxLoss::kBce);

struct MdmLoss {
  torch::Tensor seg, cls, det;  // unweighted terms
  torch::Tensor total;
};

MdmLoss mdm_loss(const torch::Tensor& seg, const torch::Tensor& cls_logits, const torch::Tensor& y_cls,
                 const torch::Tensor& box, const torch::Tensor& y_box, const LossWeights& w,
                 BoxLoss kind = BoxLoss::kBce);

struct DiscLoss {
  torch::Tensor value;
  bool clamped = false;  // some input lay outside [1e-7, 1 - 1e-7]
};

// -log(1 - D(fake)) - log D(real), batch mean.
DiscLoss disc_loss(const torch::Tensor& d_fake, const torch::Tensor& d_real);

struct GenLoss {
  torch::Tensor mse;
  torch::Tensor adv;  // -log D(fake), unweighted
  torch::Tensor total;
};

GenLoss gen_loss(const torch::Tensor& frame_hat, const torch::Tensor& frame, const torch::Tensor& d_fake,
                 double lambda_adv);

torch::Tensor total_loss(const torch::Tensor& l_mdm, const torch::Tensor& l_trm, const LossWeights& w);

}  // namespace diffvps
