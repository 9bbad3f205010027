#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ranktide/autodiff.hpp"
#include "ranktide/tensor.hpp"

namespace ranktide {

/// Each stage: 3x3 conv (stride 1, pad 1) -> relu -> 2x2 average downsample.
struct BackboneConfig {
  std::vector<std::size_t> channels{8, 16, 32};
  std::size_t in_channels = 1;
};

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t num_classes = 3;
  /// Bottleneck width of the non-local block is C / nl_reduction.
  std::size_t nl_reduction = 2;

  std::size_t feature_channels() const { return backbone.channels.back(); }
};

/// All trainable tensors. Visiting order is fixed and defines the checkpoint
/// layout and optimizer state layout.
struct ModelParams {
  std::vector<Tensor> conv_w;  // [Cout x Cin x 3 x 3]
  std::vector<Tensor> conv_b;  // [Cout]
  Tensor nl_xi;                // [C' x C]
  Tensor nl_psi;               // [C' x C]
  Tensor nl_g;                 // [C' x C]
  Tensor nl_y;                 // [C x C']
  Tensor attn_q;               // [C], no bias
  Tensor cls_w;                // [K x C]
  Tensor cls_b;                // [K]

  template <class F>
  void for_each(F&& f) {
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
      f("backbone." + std::to_string(i) + ".weight", conv_w[i]);
      f("backbone." + std::to_string(i) + ".bias", conv_b[i]);
    }
    f(std::string("nonlocal.xi"), nl_xi);
    f(std::string("nonlocal.psi"), nl_psi);
    f(std::string("nonlocal.g"), nl_g);
    f(std::string("nonlocal.y"), nl_y);
    f(std::string("attention.q"), attn_q);
    f(std::string("classifier.weight"), cls_w);
    f(std::string("classifier.bias"), cls_b);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each([&](const std::string& n, Tensor& t) { f(n, std::as_const(t)); });
  }

  std::size_t parameter_count() const;
  /// Reconstructs the configuration from tensor shapes.
  ModelConfig config() const;
  bool all_finite() const;
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, attention.q and
/// nonlocal.y start at zero (uniform attention, identity non-local block).
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Zero tensors shaped like `p` (gradient / optimizer buffers).
ModelParams zeros_like(const ModelParams& p);

// ---- forward graph ----

struct NonLocalLeaves {
  ad::Value xi, psi, g, y;
};

struct ParamLeaves {
  std::vector<ad::Value> conv_w, conv_b;
  NonLocalLeaves nl;
  ad::Value attn_q, cls_w, cls_b;
};

/// Places every parameter on `tape` as a leaf.
ParamLeaves bind_params(ad::Tape& tape, const ModelParams& p, bool requires_grad = true);

/// Collects the accumulated gradients of the bound leaves.
ModelParams collect_grads(const ad::Tape& tape, const ParamLeaves& leaves);

/// [Cin x H x W] -> [C x H/2^s x W/2^s]. Throws when an extent would drop
/// below 2 or is odd before a downsample.
ad::Value backbone_forward(ad::Value img, const ParamLeaves& p);

/// Embedded-Gaussian non-local block with residual:
///   A = softmax_rows((xi X)^T (psi X)),  out = y (g X) A^T + X
/// over the N = H*W positions of x [C x H x W]. If `attention` is given it
/// receives A [N x N].
ad::Value non_local(ad::Value x, const NonLocalLeaves& p, ad::Value* attention = nullptr);

/// Global average pooling [C x H x W] -> [C].
ad::Value pool_feature(ad::Value f);

/// alpha = softmax_i(sigmoid(F_i . q)) -> [4].
ad::Value segment_attention(const std::array<ad::Value, 4>& features, ad::Value q);

/// sum_i alpha_i F_i -> [C].
ad::Value aggregate(const std::array<ad::Value, 4>& features, ad::Value alpha);

struct ForwardResult {
  ad::Value logits;                     // [K]
  ad::Value alpha;                      // [4]
  std::array<ad::Value, 4> features;    // F_i after non-local block and pooling
};

struct ForwardOptions {
  /// When false the non-local block is skipped and alpha is fixed to 1/4.
  bool enable_stma = true;
};

/// Full pipeline on four standardized dynamic images sharing all weights.
ForwardResult forward(ad::Tape& tape, const std::array<Tensor, 4>& images, const ParamLeaves& p,
                      const ForwardOptions& opts = {});

/// Single-image path (backbone -> pool -> classifier); the static baseline.
ad::Value forward_single(ad::Tape& tape, const Tensor& image, const ParamLeaves& p);

// ---- checkpoint ----
// "SMAS", u32 version, u32 count, then per tensor: u16 name length, UTF-8
// name, u8 rank, u32 dims[rank], float64 data. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const ModelParams& p);
ModelParams decode_checkpoint(const std::string& bytes);
void save_checkpoint(const ModelParams& p, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace ranktide
