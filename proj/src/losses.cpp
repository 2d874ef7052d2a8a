#include "diffvps/losses.hpp"

#include <stdexcept>

namespace diffvps {

nlohmann::json loss_weights_to_json(const LossWeights& w) {
  return {{"seg", w.seg}, {"cls", w.cls}, {"det", w.det}, {"adv", w.adv}, {"mdm", w.mdm}, {"trm", w.trm}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.seg = j.at("seg").get<double>();
  w.cls = j.at("cls").get<double>();
  w.det = j.at("det").get<double>();
  w.adv = j.at("adv").get<double>();
  w.mdm = j.at("mdm").get<double>();
  w.trm = j.at("trm").get<double>();
  validate(w);
  return w;
}

void validate(const LossWeights& w) {
  for (double v : {w.seg, w.cls, w.det, w.adv, w.mdm, w.trm}) {
    if (!(v >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
  }
}

std::string to_string(BoxLoss kind) { return kind == BoxLoss::kBce ? "bce" : "l1"; }

BoxLoss box_loss_from_string(const std::string& name) {
  if (name == "bce") return BoxLoss::kBce;
  if (name == "l1") return BoxLoss::kL1;
  throw std::invalid_argument("unknown box loss '" + name + "'");
}

namespace {

void same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 2 ? x.unsqueeze(0) : x; }

}  // namespace

torch::Tensor pixel_bce(const torch::Tensor& prob, const torch::Tensor& gt) {
  same_shape(prob, gt, "pixel_bce");
  auto p = prob.clamp(kProbClamp, 1.0 - kProbClamp);
  return -(gt * torch::log(p) + (1.0 - gt) * torch::log(1.0 - p)).mean();
}

torch::Tensor iou_loss(const torch::Tensor& prob, const torch::Tensor& gt) {
  same_shape(prob, gt, "iou_loss");
  auto p = as_batch(prob);
  auto g = as_batch(gt);
  auto inter = (p * g).sum({1, 2});
  auto uni = p.sum({1, 2}) + g.sum({1, 2}) - inter;
  return (1.0 - (inter + kIouSmooth) / (uni + kIouSmooth)).mean();
}

torch::Tensor seg_loss(const torch::Tensor& prob, const torch::Tensor& z0_hat, const torch::Tensor& z0,
                       const torch::Tensor& gt) {
  same_shape(z0_hat, z0, "seg_loss(latent)");
  return pixel_bce(prob, gt) + torch::mse_loss(z0_hat, z0) + iou_loss(prob, gt);
}

torch::Tensor class_ce(const torch::Tensor& cls_logits, const torch::Tensor& y_cls) {
  auto logits = cls_logits.dim() == 1 ? cls_logits.unsqueeze(0) : cls_logits;
  auto labels = y_cls.dim() == 0 ? y_cls.unsqueeze(0) : y_cls;
  if (labels.numel() > 0 &&
      (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= logits.size(1))) {
    throw std::invalid_argument("class_ce: class index out of range");
  }
  return torch::nll_loss(torch::log_softmax(logits, 1), labels.to(torch::kLong));
}

torch::Tensor box_loss(const torch::Tensor& box, const torch::Tensor& y_box, BoxLoss kind) {
  same_shape(box, y_box, "box_loss");
  if (kind == BoxLoss::kL1) return (box - y_box).abs().mean();
  auto p = box.clamp(kProbClamp, 1.0 - kProbClamp);
  return -(y_box * torch::log(p) + (1.0 - y_box) * torch::log(1.0 - p)).mean();
}

MdmLoss mdm_loss(const torch::Tensor& seg, const torch::Tensor& cls_logits, const torch::Tensor& y_cls,
                 const torch::Tensor& box, const torch::Tensor& y_box, const LossWeights& w, BoxLoss kind) {
  MdmLoss out;
  out.seg = seg;
  out.cls = class_ce(cls_logits, y_cls);
  out.det = box_loss(box, y_box, kind);
  out.total = w.seg * out.seg + w.cls * out.cls + w.det * out.det;
  return out;
}

DiscLoss disc_loss(const torch::Tensor& d_fake, const torch::Tensor& d_real) {
  DiscLoss out;
  auto out_of_range = [](const torch::Tensor& d) {
    return torch::logical_or(d < kProbClamp, d > 1.0 - kProbClamp).any().item<bool>();
  };
  out.clamped = out_of_range(d_fake) || out_of_range(d_real);
  auto f = d_fake.clamp(kProbClamp, 1.0 - kProbClamp);
  auto r = d_real.clamp(kProbClamp, 1.0 - kProbClamp);
  out.value = (-torch::log(1.0 - f) - torch::log(r)).mean();
  return out;
}

GenLoss gen_loss(const torch::Tensor& frame_hat, const torch::Tensor& frame, const torch::Tensor& d_fake,
                 double lambda_adv) {
  same_shape(frame_hat, frame, "gen_loss");
  GenLoss out;
  out.mse = torch::mse_loss(frame_hat, frame);
  out.adv = (-torch::log(d_fake.clamp(kProbClamp, 1.0))).mean();
  out.total = out.mse + lambda_adv * out.adv;
  return out;
}

torch::Tensor total_loss(const torch::Tensor& l_mdm, const torch::Tensor& l_trm, const LossWeights& w) {
  return w.mdm * l_mdm + w.trm * l_trm;
}

}  // namespace diffvps
