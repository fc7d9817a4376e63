#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "padiff/nn_util.hpp"

// Physics-aware diffusion transformer: the U-shaped noise predictor.
namespace padiff::pdt {

struct PDTConfig {
  int64_t inner_channel = 16;
  std::vector<int64_t> channel_multipliers{1, 2, 4};
  /// Stages whose spatial size (at image_size input) is <= this use CAM + PA-SA blocks;
  /// finer stages use convolution-only blocks.
  int64_t attention_resolution = 16;
  /// Training resolution the attention placement is decided for.
  int64_t image_size = 64;
  double dropout = 0.2;
  int64_t norm_groups = 8;
  std::vector<int64_t> ffn_kernel_sizes{3, 5};
  double ffn_expansion = 2.66;
  int64_t encoder_blocks = 1;
  int64_t decoder_blocks = 1;
  int64_t ppu_reduction = 4;

  /// Throws DomainError on inconsistent settings.
  void validate() const;
  std::vector<int64_t> stage_channels() const;
  bool stage_has_attention(size_t level) const;

  /// Desk-scale default: 16 channels, [1, 2, 4], 64 x 64.
  static PDTConfig desk();
  /// Full profile: 48 channels, [1, 2, 4, 8, 8], attention at 16, 24 groups, 256 x 256,
  /// two encoder blocks and one decoder block per stage.
  static PDTConfig full();
};

/// Diffusion condition: everything spatially aligned with x_t ([B, 3, H, W] each).
struct ConditionBundle {
  torch::Tensor x_c;           ///< I_inr + I, diffusion space
  torch::Tensor background;    ///< B^c mapped to diffusion space
  torch::Tensor transmission;  ///< T^c in [0, 1]
};

/// Collects attention matrices while attached; used by diagnostics and tests.
struct AttentionProbe {
  std::vector<torch::Tensor> maps;
};

/// Sinusoidal timestep features followed by a two-layer projection.
class TimeEmbeddingImpl : public torch::nn::Module {
 public:
  explicit TimeEmbeddingImpl(int64_t dim);
  /// t: [B] int64 steps -> [B, 4 * dim]
  torch::Tensor forward(const torch::Tensor& t);
  static torch::Tensor sinusoid(const torch::Tensor& t, int64_t dim);
  int64_t output_dim() const { return 4 * dim_; }

 private:
  int64_t dim_;
  torch::nn::Linear fc1_{nullptr};
  torch::nn::Linear fc2_{nullptr};
};
TORCH_MODULE(TimeEmbedding);

/// CAM: Q and V from the transmission prior, K from the features;
/// T_out = softmax(Q K^T / sqrt(d_k)) V.
class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t prior_channels, int64_t channels);

  torch::Tensor forward(const torch::Tensor& transmission_feats, const torch::Tensor& features);
  /// Also returns the [B, N, N] attention matrix.
  std::pair<torch::Tensor, torch::Tensor> forward_with_attention(
      const torch::Tensor& transmission_feats, const torch::Tensor& features);

  torch::nn::Conv2d& key_projection() { return k_proj_; }
  torch::nn::Conv2d& value_projection() { return v_proj_; }
  void set_probe(AttentionProbe* probe) { probe_ = probe; }

 private:
  int64_t channels_;
  torch::nn::Conv2d q_proj_{nullptr};
  torch::nn::Conv2d k_proj_{nullptr};
  torch::nn::Conv2d v_proj_{nullptr};
  AttentionProbe* probe_ = nullptr;
};
TORCH_MODULE(CrossAttention);

/// PA-SA: F~ = Norm(F) + t; Q_f, K, V = W_d W_p F~; Q_t = W_d W_p T_out;
/// Q = Conv1x1(concat(Q_f, Q_t)); output F + softmax(Q K^T / alpha) V with alpha = exp(s).
class PhysicsAwareSelfAttentionImpl : public torch::nn::Module {
 public:
  PhysicsAwareSelfAttentionImpl(int64_t channels, int64_t time_dim, int64_t norm_groups);

  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& cam_out,
                        const torch::Tensor& t_emb);
  std::pair<torch::Tensor, torch::Tensor> forward_with_attention(const torch::Tensor& features,
                                                                 const torch::Tensor& cam_out,
                                                                 const torch::Tensor& t_emb);

  torch::Tensor alpha() const { return log_alpha_.exp(); }
  torch::Tensor& log_alpha() { return log_alpha_; }
  /// Zeroes the value rows of the pointwise qkv projection.
  void zero_value_projection();
  void set_probe(AttentionProbe* probe) { probe_ = probe; }

 private:
  int64_t channels_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
  torch::nn::Conv2d qkv_pw_{nullptr};
  torch::nn::Conv2d qkv_dw_{nullptr};
  torch::nn::Conv2d qt_pw_{nullptr};
  torch::nn::Conv2d qt_dw_{nullptr};
  torch::nn::Conv2d query_fuse_{nullptr};
  torch::nn::Conv2d out_proj_{nullptr};
  torch::Tensor log_alpha_;
  AttentionProbe* probe_ = nullptr;
};
TORCH_MODULE(PhysicsAwareSelfAttention);

struct PPUEstimate {
  torch::Tensor t1;          ///< [B, C, H, W] in (0, 1)
  torch::Tensor t2;          ///< [B, C, H, W] in (0, 1)
  torch::Tensor background;  ///< [B, C, H, W], spatially constant
};

/// Feature-space inverse Koschmieder model: J~ = t1 * I~ + t2 * B~.
class PhysicsPerceptionUnitImpl : public torch::nn::Module {
 public:
  PhysicsPerceptionUnitImpl(int64_t channels, int64_t reduction, int64_t norm_groups);

  /// B~ = H(sigmoid(Conv(ReLU(Conv(GAP(I~)))))), t1, t2 = sigmoid(Conv(ReLU(Conv(Conv(I~))))).
  PPUEstimate estimate(const torch::Tensor& latent);
  static torch::Tensor combine(const torch::Tensor& latent, const torch::Tensor& t1,
                               const torch::Tensor& t2, const torch::Tensor& background);

  /// F + Proj(combine(Norm(F), estimate(Norm(F)))).
  torch::Tensor forward(const torch::Tensor& features);

  torch::nn::Conv2d& output_projection() { return out_proj_; }

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d b_fc1_{nullptr};
  torch::nn::Conv2d b_fc2_{nullptr};
  torch::nn::Conv2d t_conv0_{nullptr};
  torch::nn::Conv2d t_conv1_{nullptr};
  torch::nn::Conv2d t_conv2_{nullptr};
  torch::nn::Conv2d out_proj_{nullptr};
};
TORCH_MODULE(PhysicsPerceptionUnit);

/// GM-FFN: Norm -> 1x1 expansion -> summed multi-scale depthwise convs -> GELU(a) * b
/// -> 1x1 projection -> residual.
class GatedMultiScaleFFNImpl : public torch::nn::Module {
 public:
  GatedMultiScaleFFNImpl(int64_t channels, double expansion, const std::vector<int64_t>& kernel_sizes,
                         int64_t norm_groups, double dropout);
  torch::Tensor forward(const torch::Tensor& features);

  torch::nn::Conv2d& expansion() { return proj_in_; }
  torch::nn::Conv2d& output_projection() { return proj_out_; }

 private:
  int64_t hidden_;
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d proj_in_{nullptr};
  torch::nn::ModuleList depthwise_;
  nn::SeededDropout dropout_{nullptr};
  torch::nn::Conv2d proj_out_{nullptr};
};
TORCH_MODULE(GatedMultiScaleFFN);

/// Time-conditioned residual convolution used where attention is too expensive. The
/// transmission prior enters through a 1x1 projection instead of CAM.
class ConvMixerImpl : public torch::nn::Module {
 public:
  ConvMixerImpl(int64_t channels, int64_t time_dim, int64_t norm_groups, double dropout);
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& transmission,
                        const torch::Tensor& t_emb);
  torch::nn::Conv2d& output_conv() { return conv2_; }

 private:
  torch::nn::GroupNorm norm1_{nullptr};
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Linear time_proj_{nullptr};
  torch::nn::Conv2d prior_proj_{nullptr};
  torch::nn::GroupNorm norm2_{nullptr};
  nn::SeededDropout dropout_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(ConvMixer);

/// One denoiser block: (CAM + PA-SA | ConvMixer) -> PPU -> GM-FFN, all residual.
class PDTBlockImpl : public torch::nn::Module {
 public:
  PDTBlockImpl(int64_t channels, int64_t time_dim, const PDTConfig& config, bool attention);

  /// transmission: T^c already pooled to this block's resolution, [B, 3, h, w].
  torch::Tensor forward(const torch::Tensor& features, const torch::Tensor& transmission,
                        const torch::Tensor& t_emb);
  /// Attention blocks only: runs the block from a precomputed CAM output.
  torch::Tensor forward_from_cam(const torch::Tensor& features, const torch::Tensor& cam_out,
                                 const torch::Tensor& t_emb);
  /// Output of the mixer stage alone (PA-SA or ConvMixer), before PPU and GM-FFN.
  torch::Tensor mix(const torch::Tensor& features, const torch::Tensor& transmission,
                    const torch::Tensor& t_emb);

  bool has_attention() const { return attention_; }
  CrossAttention& cam() { return cam_; }
  PhysicsAwareSelfAttention& pa_sa() { return pa_sa_; }
  ConvMixer& conv_mixer() { return conv_mixer_; }
  PhysicsPerceptionUnit& ppu() { return ppu_; }
  GatedMultiScaleFFN& ffn() { return ffn_; }

  /// Zeroes every residual branch output so the block becomes the identity.
  void zero_residual_branches();

 private:
  bool attention_;
  CrossAttention cam_{nullptr};
  PhysicsAwareSelfAttention pa_sa_{nullptr};
  ConvMixer conv_mixer_{nullptr};
  PhysicsPerceptionUnit ppu_{nullptr};
  GatedMultiScaleFFN ffn_{nullptr};
};
TORCH_MODULE(PDTBlock);

class PDTDenoiserImpl : public torch::nn::Module {
 public:
  explicit PDTDenoiserImpl(const PDTConfig& config = PDTConfig::desk());

  /// x_t: [B, 3, H, W]; t: [B] int64 1-indexed steps. Returns eps_hat [B, 3, H, W].
  torch::Tensor forward(const torch::Tensor& x_t, const ConditionBundle& cond,
                        const torch::Tensor& t);

  const PDTConfig& config() const { return config_; }
  std::vector<PDTBlock> blocks() const;
  void set_attention_probe(AttentionProbe* probe);

 private:
  struct Layer {
    torch::nn::Conv2d proj{nullptr};  // channel change, may be null
    PDTBlock block{nullptr};
  };
  Layer make_layer(const std::string& name, int64_t in, int64_t out, bool attention);
  torch::Tensor run_layer(Layer& layer, const torch::Tensor& x, const torch::Tensor& transmission,
                          const torch::Tensor& t_emb);

  PDTConfig config_;
  TimeEmbedding time_{nullptr};
  torch::nn::Conv2d stem_{nullptr};
  std::vector<std::vector<Layer>> encoder_;
  std::vector<torch::nn::Conv2d> down_;
  std::vector<Layer> middle_;
  std::vector<torch::nn::Conv2d> up_;
  std::vector<torch::nn::Conv2d> skip_fuse_;
  std::vector<std::vector<Layer>> decoder_;
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(PDTDenoiser);

}  // namespace padiff::pdt
