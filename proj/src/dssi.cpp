#include "ranktide/dssi.hpp"

#include <algorithm>
#include <cmath>

#include "ranktide/detail/le_bytes.hpp"
#include "ranktide/image_io.hpp"
#include "ranktide/rng.hpp"

namespace ranktide {

namespace {

void require_frames(const char* op, const Tensor& frames) {
  if (frames.shape.rank() != 4) throw Error(std::string(op) + ": frames must be [n x C x H x W], got " + frames.shape.str());
  if (frames.shape[0] < 2) throw Error(std::string(op) + ": need at least 2 frames");
}

/// V_t for t = 1..n as flat vectors (time averages or the frames themselves).
std::vector<std::vector<double>> ranking_features(const Tensor& frames, RankPoolVariant variant) {
  const std::size_t n = frames.shape[0], d = frames.numel() / n;
  std::vector<std::vector<double>> v(n, std::vector<double>(d, 0.0));
  std::vector<double> running(d, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    const double* f = frames.data.data() + t * d;
    if (variant == RankPoolVariant::direct_frame) {
      std::copy(f, f + d, v[t].begin());
      continue;
    }
    for (std::size_t i = 0; i < d; ++i) {
      running[i] += f[i];
      v[t][i] = running[i] / static_cast<double>(t + 1);
    }
  }
  return v;
}

}  // namespace

std::array<IndexRange, 3> split_three(IndexRange r) {
  const std::size_t len = r.size();
  std::array<IndexRange, 3> parts;
  for (std::size_t k = 0; k < 3; ++k) parts[k] = {r.begin + k * len / 3, r.begin + (k + 1) * len / 3};
  return parts;
}

SamplingPlan make_plan(std::size_t num_frames, std::uint64_t seed) {
  if (num_frames < kMinFrames)
    throw Error("make_plan: sequence has " + std::to_string(num_frames) + " frames, need at least " +
                std::to_string(kMinFrames));
  SamplingPlan plan;
  plan.seed = seed;
  plan.segment_bounds = split_three({0, num_frames});
  plan.snippets[0] = {0, (num_frames - 1) / 2, num_frames - 1};
  Rng rng(seed);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto subs = split_three(plan.segment_bounds[k]);
    for (std::size_t j = 0; j < 3; ++j) plan.snippets[k + 1][j] = subs[j].begin + rng.uniform_index(subs[j].size());
  }
  return plan;
}

std::vector<double> arp_coefficients(std::size_t n) {
  if (n < 2) throw Error("arp_coefficients: need n >= 2");
  std::vector<double> beta(n);
  for (std::size_t t = 1; t <= n; ++t) beta[t - 1] = 2.0 * static_cast<double>(t) - static_cast<double>(n) - 1.0;
  return beta;
}

std::vector<double> effective_frame_weights(std::size_t n, RankPoolVariant variant) {
  const auto beta = arp_coefficients(n);
  if (variant == RankPoolVariant::direct_frame) return beta;
  std::vector<double> w(n, 0.0);
  double tail = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    tail += beta[t] / static_cast<double>(t + 1);
    w[t] = tail;
  }
  return w;
}

Tensor dynamic_image(const Tensor& frames, RankPoolVariant variant) {
  require_frames("dynamic_image", frames);
  const std::size_t n = frames.shape[0];
  const auto w = effective_frame_weights(n, variant);
  Tensor out(Shape{frames.shape[1], frames.shape[2], frames.shape[3]}, 0.0);
  const std::size_t d = out.numel();
  // The weights sum to zero, so differences from frame 0 give the same
  // image while making constant sequences come out exactly zero.
  const double* f0 = frames.data.data();
  for (std::size_t t = 1; t < n; ++t) {
    const double* f = frames.data.data() + t * d;
    for (std::size_t i = 0; i < d; ++i) out[i] += w[t] * (f[i] - f0[i]);
  }
  return out;
}

double ranksvm_objective(const Tensor& frames, const Tensor& d, const RankPoolConfig& cfg) {
  require_frames("ranksvm_objective", frames);
  const auto v = ranking_features(frames, cfg.variant);
  const std::size_t n = v.size();
  std::vector<double> score(n, 0.0);
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t i = 0; i < d.numel(); ++i) score[t] += d[i] * v[t][i];
  double hinge = 0.0;
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t q = t + 1; q < n; ++q) hinge += std::max(0.0, 1.0 - score[q] + score[t]);
  double norm2 = 0.0;
  for (double x : d.data) norm2 += x * x;
  return 0.5 * cfg.ranksvm_reg_lambda * norm2 + 2.0 / static_cast<double>(n * (n - 1)) * hinge;
}

Tensor rank_pool_exact(const Tensor& frames, const RankPoolConfig& cfg) {
  require_frames("rank_pool_exact", frames);
  if (!(cfg.ranksvm_reg_lambda > 0) || !(cfg.oracle_lr > 0) || cfg.oracle_steps == 0)
    throw Error("rank_pool_exact: hyperparameters must be positive");
  const auto v = ranking_features(frames, cfg.variant);
  const std::size_t n = v.size(), dim = v[0].size();
  const double pair_scale = 2.0 / static_cast<double>(n * (n - 1));

  Tensor d(Shape{frames.shape[1], frames.shape[2], frames.shape[3]}, 0.0);
  std::vector<double> grad(dim), score(n);
  double prev = ranksvm_objective(frames, d, cfg);
  int rising = 0;
  for (std::size_t step = 0; step < cfg.oracle_steps; ++step) {
    for (std::size_t t = 0; t < n; ++t) {
      score[t] = 0.0;
      for (std::size_t i = 0; i < dim; ++i) score[t] += d[i] * v[t][i];
    }
    for (std::size_t i = 0; i < dim; ++i) grad[i] = cfg.ranksvm_reg_lambda * d[i];
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t q = t + 1; q < n; ++q)
        if (1.0 - score[q] + score[t] > 0.0)
          for (std::size_t i = 0; i < dim; ++i) grad[i] += pair_scale * (v[t][i] - v[q][i]);
    for (std::size_t i = 0; i < dim; ++i) d[i] -= cfg.oracle_lr * grad[i];

    const double e = ranksvm_objective(frames, d, cfg);
    if (!std::isfinite(e)) throw Error("rank_pool_exact: objective became non-finite");
    rising = e > prev ? rising + 1 : 0;
    if (rising >= 10) throw Error("rank_pool_exact: diverged (objective rose for 10 consecutive steps)");
    prev = e;
  }
  return d;
}

Tensor gather_frames(const FrameSequence& seq, const Snippet& idx) {
  const std::size_t n = seq.frame_size();
  Tensor out(Shape{idx.size(), seq.channels(), seq.height(), seq.width()});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] >= seq.length()) throw Error("gather_frames: index out of range");
    auto f = seq.frame(idx[k]);
    std::copy(f.begin(), f.end(), out.data.begin() + static_cast<std::ptrdiff_t>(k * n));
  }
  return out;
}

std::array<DynamicImage, 4> compute_dssi(const FrameSequence& seq, const SamplingPlan& plan, const RankPoolConfig& cfg) {
  std::array<DynamicImage, 4> out;
  for (std::size_t k = 0; k < 4; ++k)
    out[k] = DynamicImage{dynamic_image(gather_frames(seq, plan.snippets[k]), cfg.variant), k, plan.snippets[k]};
  return out;
}

std::array<DynamicImage, 4> compute_dssi(const FrameSequence& seq, std::uint64_t seed, const RankPoolConfig& cfg) {
  return compute_dssi(seq, make_plan(seq.length(), seed), cfg);
}

Tensor standardize(const Tensor& img, double eps) {
  const double n = static_cast<double>(img.numel());
  double mu = 0.0;
  for (double v : img.data) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : img.data) var += (v - mu) * (v - mu);
  const double sd = std::sqrt(var / n);
  Tensor out = img;
  for (double& v : out.data) v = (v - mu) / (sd + eps);
  return out;
}

// ------------------------------------------------------------------ display + raw files

std::vector<std::uint8_t> display_bytes(const Tensor& img) {
  if (!img.all_finite()) throw Error("export_display: non-finite pixels");
  const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
  std::vector<std::uint8_t> out(img.numel(), 128);
  const double range = *hi - *lo;
  if (range <= 0.0) return out;
  for (std::size_t i = 0; i < img.numel(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround((img[i] - *lo) / range * 255.0));
  return out;
}

void export_display(const Tensor& img, const std::filesystem::path& path) {
  if (img.shape.rank() != 3) throw Error("export_display: expected [C x H x W], got " + img.shape.str());
  write_file_atomic(path, encode_png(display_bytes(img), img.shape[0], img.shape[1], img.shape[2]));
}

using detail::get_le;
using detail::put_le;

std::string encode_dimg(const Tensor& img) {
  if (img.shape.rank() != 3) throw Error("encode_dimg: expected [C x H x W], got " + img.shape.str());
  std::string out = "DIMG";
  put_le<std::uint32_t>(out, kDimgVersion);
  for (std::size_t i = 0; i < 3; ++i) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(img.shape[i]));
  for (double v : img.data) put_le<double>(out, v);
  return out;
}

Tensor decode_dimg(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "DIMG") != 0) throw Error("decode_dimg: bad magic");
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kDimgVersion) throw Error("decode_dimg: unsupported version " + std::to_string(version));
  const std::size_t c = get_le<std::uint32_t>(bytes, pos), h = get_le<std::uint32_t>(bytes, pos),
                    w = get_le<std::uint32_t>(bytes, pos);
  Tensor out(Shape{c, h, w});
  for (double& v : out.data) v = get_le<double>(bytes, pos);
  if (pos != bytes.size()) throw Error("decode_dimg: trailing bytes");
  return out;
}

void write_dimg(const Tensor& img, const std::filesystem::path& path) { write_file_atomic(path, encode_dimg(img)); }

Tensor read_dimg(const std::filesystem::path& path) { return decode_dimg(read_file(path)); }

}  // namespace ranktide
