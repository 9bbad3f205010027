#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ranktide/tensor.hpp"

namespace ranktide {

/// Shortest sequence the segmented sampler can handle (3 segments x 3 sub-segments).
inline constexpr std::size_t kMinFrames = 9;

/// An aligned face clip: frames [T x C x H x W] in [0, 1].
struct FrameSequence {
  Tensor frames;
  std::string subject_id;
  std::size_t label = 0;
  std::string source_path;

  std::size_t length() const { return frames.shape[0]; }
  std::size_t channels() const { return frames.shape[1]; }
  std::size_t height() const { return frames.shape[2]; }
  std::size_t width() const { return frames.shape[3]; }
  std::size_t frame_size() const { return channels() * height() * width(); }
  std::span<const double> frame(std::size_t t) const {
    return std::span<const double>(frames.data).subspan(t * frame_size(), frame_size());
  }
  /// Copies frame t as a [C x H x W] tensor.
  Tensor frame_tensor(std::size_t t) const;
};

struct ManifestEntry {
  std::string sequence_dir;  // relative to the manifest's directory, or absolute
  std::string subject;
  std::size_t label = 0;
  std::vector<std::string> frames;  // optional explicit order
};

struct Manifest {
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::size_t num_classes() const { return class_names.size(); }
  std::vector<std::string> subjects() const;  // sorted, unique
};

/// JSON lines: header {"class_names": [...]} then one object per sequence.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

/// Target extent; 0 in either field keeps the native size (frames must then agree).
struct LoadOptions {
  std::size_t height = 64;
  std::size_t width = 64;
};

/// Loads >= 9 PNG/PGM frames from `dir`, ordered by `frame_list` when given
/// and by filename otherwise, resized bilinearly to the configured extent.
FrameSequence load_sequence(const std::filesystem::path& dir, const std::vector<std::string>& frame_list = {},
                            const LoadOptions& opts = {});

/// Loads every manifest entry; subject and label come from the manifest.
std::vector<FrameSequence> load_dataset(const Manifest& m, const LoadOptions& opts = {});

/// Bilinear resize of a [C x H x W] image (pixel-centre alignment).
Tensor resize_bilinear(const Tensor& chw, std::size_t height, std::size_t width);

// ---- augmentation ----

struct AugmentSpec {
  std::vector<double> rotations_deg{-10.0, -5.0, 5.0, 10.0};
  bool hflip = true;
};

/// Rotates a [C x H x W] image about its centre; positive angles turn the
/// content clockwise as displayed. Bilinear, zero outside the source.
Tensor rotate_image(const Tensor& chw, double degrees);
Tensor hflip_image(const Tensor& chw);

/// Returns the original followed by one sequence per rotation and then the
/// mirrored sequence. Every output applies a single transform to all frames.
std::vector<FrameSequence> augment(const FrameSequence& seq, const AugmentSpec& spec = {});

// ---- synthetic micro-motion data ----

struct SynthSpec {
  std::size_t num_subjects = 8;
  std::size_t seqs_per_subject = 6;
  std::size_t frames = 24;
  std::size_t extent = 64;
  double motion_px = 1.0;
  std::uint64_t seed = 7;
};

inline const std::vector<std::string> kSynthClassNames{"drift_right", "drift_up", "pulse"};

/// Per-sequence rendering parameters, exposed for tests.
struct SynthBlob {
  double x0, y0;        // start centre (pixels)
  double dx, dy;        // total displacement over the sequence
  double sigma;         // blob radius
  double amplitude;     // peak intensity added to the background
  double pulse_depth;   // relative amplitude modulation (class 2 only)
};

/// Blob centre at frame t of a T-frame sequence.
std::pair<double, double> blob_centre(const SynthBlob& b, std::size_t t, std::size_t frames);

/// Renders the dataset in memory: subjects "s01".."sNN", labels cycling
/// 0,1,2 within each subject. Frames are quantized to 8 bits so that the
/// in-memory sequences equal what load_sequence reads back from disk.
std::vector<FrameSequence> synth_sequences(const SynthSpec& spec, std::vector<SynthBlob>* blobs = nullptr);

/// Writes the dataset as PNG frames plus `manifest.jsonl` under `out_dir`.
Manifest synth_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir);

}  // namespace ranktide
