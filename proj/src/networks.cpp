#include "diffvps/networks.hpp"

#include "diffvps/checkpoint.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace diffvps {

namespace F = torch::nn::functional;
namespace nn = torch::nn;

std::string to_string(EncoderKind kind) { return kind == EncoderKind::kConv ? "conv" : "attention"; }

EncoderKind encoder_kind_from_string(const std::string& name) {
  if (name == "conv") return EncoderKind::kConv;
  if (name == "attention") return EncoderKind::kAttention;
  throw std::invalid_argument("unknown encoder kind '" + name + "'");
}

nlohmann::json network_config_to_json(const NetworkConfig& cfg) {
  return {{"height", cfg.height},         {"width", cfg.width},
          {"channels", cfg.channels},     {"embed_dim", cfg.embed_dim},
          {"disc_width", cfg.disc_width}, {"encoder", to_string(cfg.encoder)},
          {"init_std", cfg.init_std}};
}

NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig cfg;
  cfg.height = j.at("height").get<int64_t>();
  cfg.width = j.at("width").get<int64_t>();
  cfg.channels = j.at("channels").get<std::array<int64_t, kNumLevels>>();
  cfg.embed_dim = j.at("embed_dim").get<int64_t>();
  cfg.disc_width = j.at("disc_width").get<int64_t>();
  cfg.encoder = encoder_kind_from_string(j.at("encoder").get<std::string>());
  cfg.init_std = j.at("init_std").get<double>();
  return cfg;
}

PyramidFeatures PyramidFeatures::map(const std::function<torch::Tensor(const torch::Tensor&)>& fn) const {
  PyramidFeatures out;
  for (size_t j = 0; j < levels.size(); ++j) out.levels[j] = fn(levels[j]);
  return out;
}

void check_pyramid(const PyramidFeatures& p, const NetworkConfig& cfg, const char* what) {
  for (size_t j = 0; j < p.levels.size(); ++j) {
    const auto& x = p.levels[j];
    const int64_t div = int64_t{1} << (j + 2);
    if (!x.defined() || x.dim() != 4 || x.size(1) != cfg.channels[j] || x.size(2) != cfg.height / div ||
        x.size(3) != cfg.width / div) {
      throw std::invalid_argument(std::string(what) + ": pyramid level " + std::to_string(j + 1) +
                                  " violates the shape contract");
    }
  }
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim, torch::Dtype dtype) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kDouble) / static_cast<double>(half));
  auto args = t.to(torch::kDouble).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, torch::kDouble)}, 1);
  return emb.to(dtype);
}

namespace {

torch::Tensor resize_to(const torch::Tensor& x, int64_t h, int64_t w) {
  if (x.size(2) == h && x.size(3) == w) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(stride == 1 ? k / 2 : 0));
}

// Pre-norm residual convolution block.
class ConvBlockImpl : public nn::Module {
 public:
  explicit ConvBlockImpl(int64_t c)
      : norm_(register_module("norm", nn::GroupNorm(nn::GroupNormOptions(1, c)))),
        a_(register_module("conv_a", conv(c, c, 3))),
        b_(register_module("conv_b", conv(c, c, 3))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    return x + b_(F::gelu(a_(F::gelu(norm_(x)))));
  }

 private:
  nn::GroupNorm norm_;
  nn::Conv2d a_, b_;
};
TORCH_MODULE(ConvBlock);

// Pre-norm transformer block; keys/values are spatially reduced by
// `reduction` to bound the cost of global attention on fine levels.
class AttentionBlockImpl : public nn::Module {
 public:
  AttentionBlockImpl(int64_t c, int64_t reduction)
      : heads_(std::max<int64_t>(1, c / 32)), reduction_(reduction) {
    norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({c})));
    q_ = register_module("q", nn::Linear(c, c));
    kv_ = register_module("kv", nn::Linear(c, 2 * c));
    proj_ = register_module("proj", nn::Linear(c, c));
    if (reduction_ > 1) {
      sr_ = register_module("sr", nn::Conv2d(nn::Conv2dOptions(c, c, reduction_).stride(reduction_)));
      sr_norm_ = register_module("sr_norm", nn::LayerNorm(nn::LayerNormOptions({c})));
    }
    norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({c})));
    mlp_a_ = register_module("mlp_a", nn::Linear(c, 2 * c));
    mlp_b_ = register_module("mlp_b", nn::Linear(2 * c, c));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = x.flatten(2).transpose(1, 2);  // B x N x C
    auto normed = norm1_(tokens);
    torch::Tensor kv_src = normed;
    if (reduction_ > 1 && h >= reduction_ && w >= reduction_) {
      auto grid = normed.transpose(1, 2).reshape({b, c, h, w});
      kv_src = sr_norm_(sr_(grid).flatten(2).transpose(1, 2));
    }
    const auto hd = c / heads_;
    auto q = q_(normed).view({b, -1, heads_, hd}).transpose(1, 2);
    auto kv = kv_(kv_src).view({b, -1, 2, heads_, hd}).permute({2, 0, 3, 1, 4});
    auto attn = torch::softmax(torch::matmul(q, kv[0].transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
    auto ctx = torch::matmul(attn, kv[1]).transpose(1, 2).reshape({b, -1, c});
    tokens = tokens + proj_(ctx);
    tokens = tokens + mlp_b_(F::gelu(mlp_a_(norm2_(tokens))));
    return tokens.transpose(1, 2).reshape({b, c, h, w});
  }

 private:
  int64_t heads_;
  int64_t reduction_;
  nn::LayerNorm norm1_{nullptr}, norm2_{nullptr}, sr_norm_{nullptr};
  nn::Linear q_{nullptr}, kv_{nullptr}, proj_{nullptr}, mlp_a_{nullptr}, mlp_b_{nullptr};
  nn::Conv2d sr_{nullptr};
};
TORCH_MODULE(AttentionBlock);

// Patch embedding / merging followed by one mixing block.
class EncoderStageImpl : public nn::Module {
 public:
  EncoderStageImpl(int64_t in, int64_t out, int64_t patch, EncoderKind kind, int64_t reduction) {
    embed_ = register_module("embed", nn::Conv2d(nn::Conv2dOptions(in, out, patch).stride(patch)));
    norm_ = register_module("norm", nn::GroupNorm(nn::GroupNormOptions(1, out)));
    if (kind == EncoderKind::kConv) {
      conv_block_ = register_module("block", ConvBlock(out));
    } else {
      attn_block_ = register_module("block", AttentionBlock(out, reduction));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = norm_(embed_(x));
    return conv_block_ ? conv_block_(y) : attn_block_(y);
  }

 private:
  nn::Conv2d embed_{nullptr};
  nn::GroupNorm norm_{nullptr};
  ConvBlock conv_block_{nullptr};
  AttentionBlock attn_block_{nullptr};
};
TORCH_MODULE(EncoderStage);

void trunc_normal_(torch::Tensor& w, double std, torch::Generator& gen) {
  // Inverse-CDF sampling restricted to [-2 std, 2 std].
  const double lo = 0.5 * (1.0 + std::erf(-2.0 / std::numbers::sqrt2));
  const double hi = 0.5 * (1.0 + std::erf(2.0 / std::numbers::sqrt2));
  auto u = torch::empty(w.sizes(), torch::kDouble).uniform_(2.0 * lo - 1.0, 2.0 * hi - 1.0, gen);
  auto v = torch::erfinv(u) * (std * std::numbers::sqrt2);
  w.copy_(v.clamp(-2.0 * std, 2.0 * std));
}

}  // namespace

PyramidEncoderImpl::PyramidEncoderImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  if (cfg.height % 32 != 0 || cfg.width % 32 != 0) {
    throw std::invalid_argument("encoder: frame size must be divisible by 32");
  }
  constexpr std::array<int64_t, kNumLevels> reductions{4, 2, 1, 1};
  stages_ = register_module("stages", nn::ModuleList());
  int64_t in = 3;
  for (size_t j = 0; j < kNumLevels; ++j) {
    stages_->push_back(EncoderStage(in, cfg.channels[j], j == 0 ? 4 : 2, cfg.encoder, reductions[j]));
    in = cfg.channels[j];
  }
}

PyramidFeatures PyramidEncoderImpl::forward(const torch::Tensor& frames) {
  if (frames.dim() != 4 || frames.size(1) != 3) throw std::invalid_argument("encoder: expected B x 3 x H x W");
  if (frames.size(2) % 32 != 0 || frames.size(3) % 32 != 0) {
    throw std::invalid_argument("encoder: frame size must be divisible by 32");
  }
  PyramidFeatures out;
  auto x = frames;
  for (size_t j = 0; j < kNumLevels; ++j) {
    x = stages_[j]->as<EncoderStage>()->forward(x);
    out.levels[j] = x;
  }
  return out;
}

PriorFusionImpl::PriorFusionImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  for (size_t j = 0; j < kNumLevels; ++j) {
    const auto c = cfg.channels[j];
    proj_.push_back(register_module("proj" + std::to_string(j + 1), conv(2 * c, c, 1)));
    smooth_.push_back(register_module("smooth" + std::to_string(j + 1), conv(c, c, 3)));
    if (j + 1 < kNumLevels) {
      lateral_.push_back(register_module("lateral" + std::to_string(j + 1), conv(cfg.channels[j + 1], c, 1)));
    }
  }
}

PyramidFeatures PriorFusionImpl::top_down(const PyramidFeatures& merged) {
  PyramidFeatures out;
  torch::Tensor carry = merged.levels[kNumLevels - 1];
  out.levels[kNumLevels - 1] = smooth_[kNumLevels - 1](carry);
  for (int j = kNumLevels - 2; j >= 0; --j) {
    const auto& lvl = merged.levels[static_cast<size_t>(j)];
    carry = lvl + lateral_[static_cast<size_t>(j)](resize_to(carry, lvl.size(2), lvl.size(3)));
    out.levels[static_cast<size_t>(j)] = smooth_[static_cast<size_t>(j)](carry);
  }
  return out;
}

PyramidFeatures PriorFusionImpl::forward(const PyramidFeatures& spatial, const PyramidFeatures& temporal) {
  check_pyramid(spatial, cfg_, "fuse_prior(spatial)");
  check_pyramid(temporal, cfg_, "fuse_prior(temporal)");
  PyramidFeatures merged;
  for (size_t j = 0; j < kNumLevels; ++j) {
    merged.levels[j] = proj_[j](torch::cat({spatial.levels[j], temporal.levels[j]}, 1));
  }
  return top_down(merged);
}

DenoiseHeadImpl::DenoiseHeadImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  const auto d = cfg.embed_dim;
  for (size_t j = 0; j < kNumLevels; ++j) {
    unify_.push_back(register_module("unify" + std::to_string(j + 1), conv(cfg.channels[j] + 1, d, 1)));
  }
  time_in_ = register_module("time_in", nn::Linear(d, d));
  time_out_ = register_module("time_out", nn::Linear(d, d));
  fuse_a_ = register_module("fuse_a", conv(d, d, 1));
  fuse_b_ = register_module("fuse_b", conv(d, d, 3));
  latent_out_ = register_module("latent_out", conv(d, 1, 1));
  mask_out_ = register_module("mask_out", conv(d, 1, 1));
  cls_out_ = register_module("cls_out", nn::Linear(d, kNumClasses));
  box_out_ = register_module("box_out", nn::Linear(d, 4));
}

MultiTaskPrediction DenoiseHeadImpl::forward(const torch::Tensor& z_t, const PyramidFeatures& prior,
                                             const torch::Tensor& t) {
  check_pyramid(prior, cfg_, "denoise_head");
  const auto h = cfg_.height / 4, w = cfg_.width / 4;
  if (z_t.dim() != 4 || z_t.size(1) != 1 || z_t.size(2) != h || z_t.size(3) != w ||
      z_t.size(0) != prior.batch()) {
    throw std::invalid_argument("denoise_head: z_t must be B x 1 x H/4 x W/4");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw std::invalid_argument("denoise_head: need one timestep per sample");

  auto temb = time_out_(F::gelu(time_in_(timestep_embedding(t, cfg_.embed_dim, z_t.scalar_type()))));
  temb = temb.unsqueeze(-1).unsqueeze(-1);
  torch::Tensor acc;
  for (size_t j = 0; j < kNumLevels; ++j) {
    const auto& lvl = prior.levels[j];
    auto z = resize_to(z_t, lvl.size(2), lvl.size(3));
    auto u = unify_[j](torch::cat({lvl, z}, 1)) + temb;
    u = resize_to(u, h, w);
    acc = acc.defined() ? acc + u : u;
  }
  auto feat = F::gelu(fuse_b_(F::gelu(fuse_a_(acc))));

  MultiTaskPrediction out;
  out.z0_hat = latent_out_(feat);
  out.mask_logits = resize_to(mask_out_(feat), cfg_.height, cfg_.width).squeeze(1);
  auto pooled = feat.mean({2, 3});
  out.cls_logits = cls_out_(pooled);
  out.box = torch::sigmoid(box_out_(pooled));
  return out;
}

ReconDecoderImpl::ReconDecoderImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  const auto d = cfg.embed_dim;
  for (size_t j = 0; j < kNumLevels; ++j) {
    unify_.push_back(register_module("unify" + std::to_string(j + 1), conv(cfg.channels[j], d, 1)));
  }
  fuse_a_ = register_module("fuse_a", conv(d, d, 1));
  fuse_b_ = register_module("fuse_b", conv(d, d, 3));
  rgb_out_ = register_module("rgb_out", conv(d, 3, 1));
}

torch::Tensor ReconDecoderImpl::forward(const PyramidFeatures& temporal) {
  check_pyramid(temporal, cfg_, "reconstruct");
  const auto h = cfg_.height / 4, w = cfg_.width / 4;
  torch::Tensor acc;
  for (size_t j = 0; j < kNumLevels; ++j) {
    auto u = resize_to(unify_[j](temporal.levels[j]), h, w);
    acc = acc.defined() ? acc + u : u;
  }
  auto feat = F::gelu(fuse_b_(F::gelu(fuse_a_(acc))));
  return torch::tanh(resize_to(rgb_out_(feat), cfg_.height, cfg_.width));
}

DiscriminatorImpl::DiscriminatorImpl(const NetworkConfig& cfg) {
  const auto w = cfg.disc_width;
  const std::array<int64_t, 5> widths{3, w, 2 * w, 4 * w, 4 * w};
  for (size_t i = 0; i + 1 < widths.size(); ++i) {
    convs_.push_back(register_module(
        "conv" + std::to_string(i + 1),
        nn::Conv2d(nn::Conv2dOptions(widths[i], widths[i + 1], 4).stride(2).padding(1))));
  }
  out_ = register_module("out", nn::Linear(widths.back(), 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& frames) {
  if (frames.dim() != 4 || frames.size(1) != 3) throw std::invalid_argument("discriminate: expected B x 3 x H x W");
  if (!torch::isfinite(frames).all().item<bool>()) throw std::invalid_argument("discriminate: non-finite input");
  auto x = frames;
  for (auto& c : convs_) x = F::gelu(c(x));
  auto logit = out_(x.mean({2, 3})).squeeze(1);
  return torch::sigmoid(logit).clamp(1e-7, 1.0 - 1e-7);
}

DiffVPSModelImpl::DiffVPSModelImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  image_encoder = register_module("image_encoder", PyramidEncoder(cfg));
  temporal_encoder = register_module("temporal_encoder", PyramidEncoder(cfg));
  fusion = register_module("fusion", PriorFusion(cfg));
  denoise_head = register_module("denoise_head", DenoiseHead(cfg));
  recon_decoder = register_module("recon_decoder", ReconDecoder(cfg));
  discriminator = register_module("discriminator", Discriminator(cfg));
}

PyramidFeatures DiffVPSModelImpl::image_encode(const torch::Tensor& frame) { return image_encoder(frame); }

PyramidFeatures DiffVPSModelImpl::temporal_encode(const torch::Tensor& frames) {
  if (frames.dim() != 5 || frames.size(2) != 3) throw std::invalid_argument("temporal_encode: expected B x delta x 3 x H x W");
  const auto b = frames.size(0), delta = frames.size(1);
  if (delta < 1) throw std::invalid_argument("temporal_encode: need at least one previous frame");
  auto per_frame = temporal_encoder(frames.flatten(0, 1));
  return per_frame.map([&](const torch::Tensor& x) {
    return x.view({b, delta, x.size(1), x.size(2), x.size(3)}).mean(1);
  });
}

PyramidFeatures DiffVPSModelImpl::fuse_prior(const PyramidFeatures& spatial, const PyramidFeatures& temporal) {
  return fusion(spatial, temporal);
}

MultiTaskPrediction DiffVPSModelImpl::denoise(const torch::Tensor& z_t, const PyramidFeatures& prior,
                                              const torch::Tensor& t) {
  return denoise_head(z_t, prior, t);
}

torch::Tensor DiffVPSModelImpl::reconstruct(const PyramidFeatures& temporal) { return recon_decoder(temporal); }

torch::Tensor DiffVPSModelImpl::discriminate(const torch::Tensor& frames) { return discriminator(frames); }

PyramidFeatures DiffVPSModelImpl::zero_pyramid(int64_t batch) const {
  PyramidFeatures out;
  const auto opts = torch::TensorOptions().dtype(parameters().front().scalar_type());
  for (size_t j = 0; j < kNumLevels; ++j) {
    const int64_t div = int64_t{1} << (j + 2);
    out.levels[j] = torch::zeros({batch, cfg_.channels[j], cfg_.height / div, cfg_.width / div}, opts);
  }
  return out;
}

std::vector<torch::Tensor> DiffVPSModelImpl::generator_parameters() const {
  std::vector<torch::Tensor> out;
  for (const auto& item : named_parameters()) {
    if (!item.key().starts_with("discriminator.")) out.push_back(item.value());
  }
  return out;
}

std::vector<torch::Tensor> DiffVPSModelImpl::discriminator_parameters() const {
  return discriminator->parameters();
}

void DiffVPSModelImpl::reset_parameters(uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& item : named_parameters()) {
    auto p = item.value();
    const auto& name = item.key();
    if (name.ends_with(".bias")) {
      p.zero_();
    } else if (p.dim() == 1) {
      p.fill_(1.0);
    } else {
      trunc_normal_(p, cfg_.init_std, gen);
    }
  }
}

void DiffVPSModelImpl::load_discriminator_weights(const std::string& path) {
  const auto tensors = read_tensor_container(path);
  torch::NoGradGuard no_grad;
  for (auto& item : discriminator->named_parameters()) {
    auto it = tensors.find(item.key());
    if (it == tensors.end()) throw std::runtime_error("discriminator weights missing '" + item.key() + "'");
    if (it->second.sizes() != item.value().sizes()) {
      throw std::runtime_error("discriminator weight '" + item.key() + "' has the wrong shape");
    }
    item.value().copy_(it->second);
  }
}

}  // namespace diffvps
