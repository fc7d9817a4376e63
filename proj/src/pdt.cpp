#include "padiff/pdt.hpp"

#include <cmath>

#include "padiff/error.hpp"

namespace padiff::pdt {

void PDTConfig::validate() const {
  if (inner_channel < 1 || channel_multipliers.empty()) {
    throw DomainError("PDTConfig: inner_channel and channel_multipliers must be set");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw DomainError("PDTConfig: dropout must lie in [0, 1)");
  }
  if (norm_groups < 1 || encoder_blocks < 1 || decoder_blocks < 1 || ppu_reduction < 1 || ffn_expansion <= 0.0) {
    throw DomainError("PDTConfig: group, block and expansion sizes must be positive");
  }
  for (int64_t ch : stage_channels()) {
    if (ch % norm_groups != 0) {
      throw DomainError("PDTConfig: norm_groups " + std::to_string(norm_groups) +
                        " does not divide stage width " + std::to_string(ch));
    }
  }
  if (ffn_kernel_sizes.empty()) {
    throw DomainError("PDTConfig: need at least one GM-FFN kernel size");
  }
  for (int64_t k : ffn_kernel_sizes) {
    if (k < 1 || k % 2 == 0) {
      throw DomainError("PDTConfig: GM-FFN kernel sizes must be odd");
    }
  }
  const int64_t factor = int64_t{1} << (channel_multipliers.size() - 1);
  if (image_size < factor || image_size % factor != 0) {
    throw DomainError("PDTConfig: image_size must be divisible by " + std::to_string(factor));
  }
}

std::vector<int64_t> PDTConfig::stage_channels() const {
  std::vector<int64_t> out;
  out.reserve(channel_multipliers.size());
  for (int64_t m : channel_multipliers) {
    out.push_back(inner_channel * m);
  }
  return out;
}

bool PDTConfig::stage_has_attention(size_t level) const {
  return (image_size >> level) <= attention_resolution;
}

PDTConfig PDTConfig::desk() { return PDTConfig{}; }

PDTConfig PDTConfig::full() {
  PDTConfig c;
  c.inner_channel = 48;
  c.channel_multipliers = {1, 2, 4, 8, 8};
  c.attention_resolution = 16;
  c.image_size = 256;
  c.dropout = 0.2;
  c.norm_groups = 24;
  c.encoder_blocks = 2;
  c.decoder_blocks = 1;
  return c;
}

// ---------------------------------------------------------------------------------------------

TimeEmbeddingImpl::TimeEmbeddingImpl(int64_t dim) : dim_(dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw DomainError("time embedding dimension must be even");
  }
  fc1_ = register_module("fc1", torch::nn::Linear(dim, 4 * dim));
  fc2_ = register_module("fc2", torch::nn::Linear(4 * dim, 4 * dim));
}

torch::Tensor TimeEmbeddingImpl::sinusoid(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::kFloat64) *
                          (-std::log(10000.0) / static_cast<double>(half)));
  auto args = t.to(torch::kFloat64).view({-1, 1}) * freqs.view({1, half});
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

torch::Tensor TimeEmbeddingImpl::forward(const torch::Tensor& t) {
  auto dtype = fc1_->weight.scalar_type();
  auto s = sinusoid(t, dim_).to(dtype);
  return fc2_(torch::silu(fc1_(s)));
}

// ---------------------------------------------------------------------------------------------

CrossAttentionImpl::CrossAttentionImpl(int64_t prior_channels, int64_t channels)
    : channels_(channels) {
  q_proj_ = register_module("q_proj", nn::conv1x1(prior_channels, channels));
  k_proj_ = register_module("k_proj", nn::conv1x1(channels, channels));
  v_proj_ = register_module("v_proj", nn::conv1x1(prior_channels, channels));
}

std::pair<torch::Tensor, torch::Tensor> CrossAttentionImpl::forward_with_attention(
    const torch::Tensor& transmission_feats, const torch::Tensor& features) {
  if (transmission_feats.size(2) != features.size(2) ||
      transmission_feats.size(3) != features.size(3)) {
    throw ShapeError("CAM: transmission and features differ in spatial size");
  }
  const int64_t h = features.size(2);
  const int64_t w = features.size(3);
  auto q = nn::to_tokens(q_proj_(transmission_feats));
  auto k = nn::to_tokens(k_proj_(features));
  auto v = nn::to_tokens(v_proj_(transmission_feats));
  auto scale = torch::full({}, std::sqrt(static_cast<double>(channels_)), q.options());
  auto [out, attn] = nn::scaled_attention(q, k, v, scale);
  if (probe_ != nullptr) {
    probe_->maps.push_back(attn.detach());
  }
  return {nn::from_tokens(out, h, w), attn};
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& transmission_feats,
                                          const torch::Tensor& features) {
  return forward_with_attention(transmission_feats, features).first;
}

// ---------------------------------------------------------------------------------------------

PhysicsAwareSelfAttentionImpl::PhysicsAwareSelfAttentionImpl(int64_t channels, int64_t time_dim,
                                                             int64_t norm_groups)
    : channels_(channels) {
  norm_ = register_module("norm", torch::nn::GroupNorm(norm_groups, channels));
  time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, channels));
  qkv_pw_ = register_module("qkv_pw", nn::conv1x1(channels, 3 * channels, false));
  qkv_dw_ = register_module("qkv_dw", nn::depthwise(3 * channels, 3, false));
  qt_pw_ = register_module("qt_pw", nn::conv1x1(channels, channels, false));
  qt_dw_ = register_module("qt_dw", nn::depthwise(channels, 3, false));
  query_fuse_ = register_module("query_fuse", nn::conv1x1(2 * channels, channels, false));
  out_proj_ = register_module("out_proj", nn::conv1x1(channels, channels, false));
  // alpha = exp(s) starts at sqrt(d_k), matching the CAM scaling.
  log_alpha_ = register_parameter(
      "log_alpha", torch::full({}, 0.5 * std::log(static_cast<double>(channels))));
}

std::pair<torch::Tensor, torch::Tensor> PhysicsAwareSelfAttentionImpl::forward_with_attention(
    const torch::Tensor& features, const torch::Tensor& cam_out, const torch::Tensor& t_emb) {
  if (features.sizes() != cam_out.sizes()) {
    throw ShapeError("PA-SA: features and CAM output differ in shape");
  }
  const int64_t b = features.size(0);
  const int64_t h = features.size(2);
  const int64_t w = features.size(3);
  auto embedded = norm_(features) + time_proj_(t_emb).view({b, channels_, 1, 1});
  auto qkv = qkv_dw_(qkv_pw_(embedded)).chunk(3, 1);
  auto q_t = qt_dw_(qt_pw_(cam_out));
  auto q = query_fuse_(torch::cat({qkv[0], q_t}, 1));
  auto [out, attn] = nn::scaled_attention(nn::to_tokens(q), nn::to_tokens(qkv[1]),
                                          nn::to_tokens(qkv[2]), alpha());
  if (probe_ != nullptr) {
    probe_->maps.push_back(attn.detach());
  }
  return {features + out_proj_(nn::from_tokens(out, h, w)), attn};
}

torch::Tensor PhysicsAwareSelfAttentionImpl::forward(const torch::Tensor& features,
                                                     const torch::Tensor& cam_out,
                                                     const torch::Tensor& t_emb) {
  return forward_with_attention(features, cam_out, t_emb).first;
}

void PhysicsAwareSelfAttentionImpl::zero_value_projection() {
  torch::NoGradGuard no_grad;
  qkv_pw_->weight.narrow(0, 2 * channels_, channels_).zero_();
}

// ---------------------------------------------------------------------------------------------

PhysicsPerceptionUnitImpl::PhysicsPerceptionUnitImpl(int64_t channels, int64_t reduction,
                                                     int64_t norm_groups) {
  const int64_t hidden = std::max<int64_t>(1, channels / reduction);
  norm_ = register_module("norm", torch::nn::GroupNorm(norm_groups, channels));
  b_fc1_ = register_module("b_fc1", nn::conv1x1(channels, hidden));
  b_fc2_ = register_module("b_fc2", nn::conv1x1(hidden, channels));
  t_conv0_ = register_module("t_conv0", nn::conv1x1(channels, channels));
  t_conv1_ = register_module("t_conv1", nn::conv3x3(channels, hidden));
  t_conv2_ = register_module("t_conv2", nn::conv1x1(hidden, 2 * channels));
  out_proj_ = register_module("out_proj", nn::conv1x1(channels, channels));
}

PPUEstimate PhysicsPerceptionUnitImpl::estimate(const torch::Tensor& latent) {
  auto pooled = latent.mean({2, 3}, /*keepdim=*/true);
  auto light = torch::sigmoid(b_fc2_(torch::relu(b_fc1_(pooled))));
  auto gates = torch::sigmoid(t_conv2_(torch::relu(t_conv1_(t_conv0_(latent))))).chunk(2, 1);
  return {gates[0], gates[1], light.expand_as(latent)};
}

torch::Tensor PhysicsPerceptionUnitImpl::combine(const torch::Tensor& latent,
                                                 const torch::Tensor& t1, const torch::Tensor& t2,
                                                 const torch::Tensor& background) {
  if (t1.sizes() != latent.sizes() || t2.sizes() != latent.sizes()) {
    throw ShapeError("PPU combine: gate shapes differ from the latent");
  }
  return t1 * latent + t2 * background;
}

torch::Tensor PhysicsPerceptionUnitImpl::forward(const torch::Tensor& features) {
  auto latent = norm_(features);
  auto est = estimate(latent);
  return features + out_proj_(combine(latent, est.t1, est.t2, est.background));
}

// ---------------------------------------------------------------------------------------------

GatedMultiScaleFFNImpl::GatedMultiScaleFFNImpl(int64_t channels, double expansion,
                                               const std::vector<int64_t>& kernel_sizes,
                                               int64_t norm_groups, double dropout)
    : hidden_(static_cast<int64_t>(static_cast<double>(channels) * expansion)) {
  norm_ = register_module("norm", torch::nn::GroupNorm(norm_groups, channels));
  proj_in_ = register_module("proj_in", nn::conv1x1(channels, 2 * hidden_, false));
  depthwise_ = register_module("depthwise", torch::nn::ModuleList());
  for (int64_t k : kernel_sizes) {
    depthwise_->push_back(nn::depthwise(2 * hidden_, k, false));
  }
  dropout_ = register_module("dropout", nn::SeededDropout(dropout));
  proj_out_ = register_module("proj_out", nn::conv1x1(hidden_, channels, false));
}

torch::Tensor GatedMultiScaleFFNImpl::forward(const torch::Tensor& features) {
  auto expanded = proj_in_(norm_(features));
  torch::Tensor mixed;
  for (const auto& dw : *depthwise_) {
    auto branch = dw->as<torch::nn::Conv2dImpl>()->forward(expanded);
    mixed = mixed.defined() ? mixed + branch : branch;
  }
  auto halves = mixed.chunk(2, 1);
  auto gated = torch::gelu(halves[0]) * halves[1];
  return features + proj_out_(dropout_(gated));
}

// ---------------------------------------------------------------------------------------------

ConvMixerImpl::ConvMixerImpl(int64_t channels, int64_t time_dim, int64_t norm_groups,
                             double dropout) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(norm_groups, channels));
  conv1_ = register_module("conv1", nn::conv3x3(channels, channels));
  time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, channels));
  prior_proj_ = register_module("prior_proj", nn::conv1x1(3, channels));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(norm_groups, channels));
  dropout_ = register_module("dropout", nn::SeededDropout(dropout));
  conv2_ = register_module("conv2", nn::conv3x3(channels, channels));
}

torch::Tensor ConvMixerImpl::forward(const torch::Tensor& features,
                                     const torch::Tensor& transmission,
                                     const torch::Tensor& t_emb) {
  const int64_t b = features.size(0);
  auto h = conv1_(torch::silu(norm1_(features)));
  h = h + time_proj_(t_emb).view({b, -1, 1, 1}) + prior_proj_(transmission);
  return features + conv2_(dropout_(torch::silu(norm2_(h))));
}

// ---------------------------------------------------------------------------------------------

PDTBlockImpl::PDTBlockImpl(int64_t channels, int64_t time_dim, const PDTConfig& config,
                           bool attention)
    : attention_(attention) {
  if (attention) {
    cam_ = register_module("cam", CrossAttention(3, channels));
    pa_sa_ = register_module("pa_sa",
                             PhysicsAwareSelfAttention(channels, time_dim, config.norm_groups));
  } else {
    conv_mixer_ = register_module(
        "conv_mixer", ConvMixer(channels, time_dim, config.norm_groups, config.dropout));
  }
  ppu_ = register_module("ppu",
                         PhysicsPerceptionUnit(channels, config.ppu_reduction, config.norm_groups));
  ffn_ = register_module("ffn", GatedMultiScaleFFN(channels, config.ffn_expansion,
                                                   config.ffn_kernel_sizes, config.norm_groups,
                                                   config.dropout));
}

torch::Tensor PDTBlockImpl::mix(const torch::Tensor& features, const torch::Tensor& transmission,
                                const torch::Tensor& t_emb) {
  if (attention_) {
    return pa_sa_(features, cam_(transmission, features), t_emb);
  }
  return conv_mixer_(features, transmission, t_emb);
}

torch::Tensor PDTBlockImpl::forward(const torch::Tensor& features,
                                    const torch::Tensor& transmission,
                                    const torch::Tensor& t_emb) {
  return ffn_(ppu_(mix(features, transmission, t_emb)));
}

torch::Tensor PDTBlockImpl::forward_from_cam(const torch::Tensor& features,
                                             const torch::Tensor& cam_out,
                                             const torch::Tensor& t_emb) {
  if (!attention_) {
    throw DomainError("forward_from_cam on a convolution-only block");
  }
  return ffn_(ppu_(pa_sa_(features, cam_out, t_emb)));
}

void PDTBlockImpl::zero_residual_branches() {
  torch::NoGradGuard no_grad;
  if (attention_) {
    pa_sa_->zero_value_projection();
  } else {
    conv_mixer_->output_conv()->weight.zero_();
    conv_mixer_->output_conv()->bias.zero_();
  }
  ppu_->output_projection()->weight.zero_();
  ppu_->output_projection()->bias.zero_();
  ffn_->output_projection()->weight.zero_();
}

// ---------------------------------------------------------------------------------------------

PDTDenoiserImpl::PDTDenoiserImpl(const PDTConfig& config) : config_(config) {
  config_.validate();
  const auto widths = config_.stage_channels();
  const size_t levels = widths.size();
  const int64_t inner = config_.inner_channel;

  time_ = register_module("time", TimeEmbedding(inner));
  stem_ = register_module("stem", nn::conv3x3(9, inner));

  int64_t current = inner;
  encoder_.resize(levels);
  for (size_t l = 0; l < levels; ++l) {
    const bool attn = config_.stage_has_attention(l);
    for (int64_t b = 0; b < config_.encoder_blocks; ++b) {
      const std::string name = "enc" + std::to_string(l) + "_" + std::to_string(b);
      encoder_[l].push_back(make_layer(name, current, widths[l], attn));
      current = widths[l];
    }
    if (l + 1 < levels) {
      down_.push_back(register_module("down" + std::to_string(l),
                                      nn::conv3x3(current, current, true, 2)));
    }
  }
  const bool mid_attn = config_.stage_has_attention(levels - 1);
  for (int i = 0; i < 2; ++i) {
    middle_.push_back(make_layer("mid" + std::to_string(i), current, current, mid_attn));
  }
  decoder_.resize(levels);
  up_.assign(levels, torch::nn::Conv2d(nullptr));
  skip_fuse_.assign(levels, torch::nn::Conv2d(nullptr));
  for (size_t li = levels; li-- > 0;) {
    const bool attn = config_.stage_has_attention(li);
    if (li + 1 < levels) {
      up_[li] = register_module("up" + std::to_string(li), nn::conv3x3(current, widths[li]));
      current = widths[li];
    }
    skip_fuse_[li] =
        register_module("skip_fuse" + std::to_string(li), nn::conv1x1(2 * widths[li], widths[li]));
    for (int64_t b = 0; b < config_.decoder_blocks; ++b) {
      const std::string name = "dec" + std::to_string(li) + "_" + std::to_string(b);
      decoder_[li].push_back(make_layer(name, widths[li], widths[li], attn));
    }
  }
  out_norm_ = register_module("out_norm", torch::nn::GroupNorm(config_.norm_groups, inner));
  out_conv_ = register_module("out_conv", nn::conv3x3(inner, 3));
}

PDTDenoiserImpl::Layer PDTDenoiserImpl::make_layer(const std::string& name, int64_t in,
                                                   int64_t out, bool attention) {
  Layer layer;
  if (in != out) {
    layer.proj = register_module(name + "_proj", nn::conv1x1(in, out));
  }
  layer.block = register_module(name, PDTBlock(out, time_->output_dim(), config_, attention));
  return layer;
}

torch::Tensor PDTDenoiserImpl::run_layer(Layer& layer, const torch::Tensor& x,
                                         const torch::Tensor& transmission,
                                         const torch::Tensor& t_emb) {
  auto h = layer.proj ? layer.proj->forward(x) : x;
  return layer.block->forward(h, transmission, t_emb);
}

torch::Tensor PDTDenoiserImpl::forward(const torch::Tensor& x_t, const ConditionBundle& cond,
                                       const torch::Tensor& t) {
  if (x_t.dim() != 4 || x_t.size(1) != 3) {
    throw ShapeError("denoise: x_t must be [B, 3, H, W]");
  }
  for (const auto* part : {&cond.x_c, &cond.background, &cond.transmission}) {
    if (!part->defined() || part->sizes() != x_t.sizes()) {
      throw ShapeError("denoise: condition is not aligned with x_t");
    }
  }
  const size_t levels = encoder_.size();
  const int64_t factor = int64_t{1} << (levels - 1);
  if (x_t.size(2) % factor != 0 || x_t.size(3) % factor != 0) {
    throw ShapeError("denoise: spatial size must be divisible by " + std::to_string(factor));
  }
  if (t.numel() != x_t.size(0)) {
    throw ShapeError("denoise: need one timestep per batch entry");
  }

  auto t_emb = torch::silu(time_(t));
  std::vector<torch::Tensor> priors{cond.transmission};
  for (size_t l = 1; l < levels; ++l) {
    priors.push_back(torch::avg_pool2d(priors.back(), 2));
  }

  auto x = stem_(torch::cat({x_t, cond.background, cond.x_c}, 1));
  std::vector<torch::Tensor> skips;
  for (size_t l = 0; l < levels; ++l) {
    for (auto& layer : encoder_[l]) {
      x = run_layer(layer, x, priors[l], t_emb);
    }
    skips.push_back(x);
    if (l + 1 < levels) {
      x = down_[l](x);
    }
  }
  for (auto& layer : middle_) {
    x = run_layer(layer, x, priors[levels - 1], t_emb);
  }
  for (size_t li = levels; li-- > 0;) {
    if (li + 1 < levels) {
      x = up_[li](torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2}));
    }
    x = skip_fuse_[li](torch::cat({x, skips[li]}, 1));
    for (auto& layer : decoder_[li]) {
      x = run_layer(layer, x, priors[li], t_emb);
    }
  }
  return out_conv_(torch::silu(out_norm_(x)));
}

std::vector<PDTBlock> PDTDenoiserImpl::blocks() const {
  std::vector<PDTBlock> out;
  auto collect = [&](const std::vector<Layer>& layers) {
    for (const auto& layer : layers) {
      out.push_back(layer.block);
    }
  };
  for (const auto& stage : encoder_) {
    collect(stage);
  }
  collect(middle_);
  for (const auto& stage : decoder_) {
    collect(stage);
  }
  return out;
}

void PDTDenoiserImpl::set_attention_probe(AttentionProbe* probe) {
  for (auto& block : blocks()) {
    if (block->has_attention()) {
      block->cam()->set_probe(probe);
      block->pa_sa()->set_probe(probe);
    }
  }
}

}  // namespace padiff::pdt
