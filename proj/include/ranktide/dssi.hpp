#pragma once

// Segmented sparse sampling and rank pooling into dynamic images.
//
// A sequence of T >= 9 frames is cut into three segments with the floor
// rule [floor(kT/3), floor((k+1)T/3)), each segment into three sub-segments
// by the same rule, and one frame is drawn per sub-segment. Together with the
// (onset, middle, offset) triple this yields four 3-frame snippets, each of
// which is collapsed into one dynamic image by approximate rank pooling.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "ranktide/sequence_io.hpp"
#include "ranktide/tensor.hpp"

namespace ranktide {

struct IndexRange {
  std::size_t begin = 0, end = 0;  // half-open
  std::size_t size() const { return end - begin; }
  friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

using Snippet = std::array<std::size_t, 3>;

struct SamplingPlan {
  std::array<IndexRange, 3> segment_bounds;
  /// snippets[0] = (onset, middle, offset); snippets[k] drawn from segment k.
  std::array<Snippet, 4> snippets;
  std::uint64_t seed = 0;
};

/// The three floor-rule parts of [begin, end).
std::array<IndexRange, 3> split_three(IndexRange r);

SamplingPlan make_plan(std::size_t num_frames, std::uint64_t seed);

enum class RankPoolVariant { time_average, direct_frame };

struct RankPoolConfig {
  RankPoolVariant variant = RankPoolVariant::time_average;
  double ranksvm_reg_lambda = 1.0;  // exact oracle only
  std::size_t oracle_steps = 200;
  double oracle_lr = 0.1;
};

/// beta_t = 2t - n - 1 for t = 1..n.
std::vector<double> arp_coefficients(std::size_t n);

/// Per-frame weights w_t such that the dynamic image equals sum_t w_t R_t.
/// For time_average, w_t = sum_{s >= t} beta_s / s; for direct_frame, w_t = beta_t.
std::vector<double> effective_frame_weights(std::size_t n, RankPoolVariant variant);

/// Approximate rank pooling of frames [n x C x H x W] into a [C x H x W] image.
Tensor dynamic_image(const Tensor& frames, RankPoolVariant variant = RankPoolVariant::time_average);

/// Subgradient-descent minimizer of the RankSVM objective
///   lambda/2 |d|^2 + 2/(n(n-1)) sum_{q>t} max(0, 1 - <d, V_q> + <d, V_t>)
/// started at d = 0. Test oracle for dynamic_image. Throws Error when the
/// objective increases for 10 consecutive steps.
Tensor rank_pool_exact(const Tensor& frames, const RankPoolConfig& cfg = {});

/// The RankSVM objective at `d`, using the same V_t as rank_pool_exact.
double ranksvm_objective(const Tensor& frames, const Tensor& d, const RankPoolConfig& cfg);

struct DynamicImage {
  Tensor pixels;            // [C x H x W], signed and unnormalized
  std::size_t segment_id;   // 0 = onset/middle/offset snippet
  Snippet snippet;
};

/// Stacks the frames at `idx` into [3 x C x H x W].
Tensor gather_frames(const FrameSequence& seq, const Snippet& idx);

/// The four dynamic images (I_0, I_1, I_2, I_3) of `seq` under make_plan(T, seed).
std::array<DynamicImage, 4> compute_dssi(const FrameSequence& seq, std::uint64_t seed, const RankPoolConfig& cfg = {});
std::array<DynamicImage, 4> compute_dssi(const FrameSequence& seq, const SamplingPlan& plan, const RankPoolConfig& cfg = {});

/// Zero mean, unit variance: (x - mean) / (std + eps). Network input form.
Tensor standardize(const Tensor& img, double eps = 1e-8);

/// Global min-max map to 8 bits, rounding half away from zero; a constant
/// image maps to 128 everywhere.
std::vector<std::uint8_t> display_bytes(const Tensor& img);

/// Writes display_bytes(img) as PNG. Image must have 1 or 3 channels.
void export_display(const Tensor& img, const std::filesystem::path& path);

/// Raw descriptor: "DIMG", u32 version, u32 C, H, W, then C*H*W float64, all little-endian.
inline constexpr std::uint32_t kDimgVersion = 1;
std::string encode_dimg(const Tensor& img);
Tensor decode_dimg(const std::string& bytes);
void write_dimg(const Tensor& img, const std::filesystem::path& path);
Tensor read_dimg(const std::filesystem::path& path);

}  // namespace ranktide
