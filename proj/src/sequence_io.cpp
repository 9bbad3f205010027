#include "ranktide/sequence_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"

#include "ranktide/image_io.hpp"
#include "ranktide/rng.hpp"

namespace ranktide {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor FrameSequence::frame_tensor(std::size_t t) const {
  auto f = frame(t);
  return Tensor(Shape{channels(), height(), width()}, std::vector<double>(f.begin(), f.end()));
}

// ------------------------------------------------------------------ manifest

std::vector<std::string> Manifest::subjects() const {
  std::set<std::string> s;
  for (const auto& e : entries) s.insert(e.subject);
  return {s.begin(), s.end()};
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!have_header) {
      if (!j.contains("class_names")) throw Error("manifest line 1 must be a {\"class_names\": [...]} header");
      m.class_names = j.at("class_names").get<std::vector<std::string>>();
      if (m.class_names.empty()) throw Error("manifest header lists no classes");
      have_header = true;
      continue;
    }
    ManifestEntry e;
    try {
      e.sequence_dir = j.at("sequence_dir").get<std::string>();
      e.subject = j.at("subject").get<std::string>();
      const auto label = j.at("label").get<long long>();
      if (label < 0) throw Error("negative label");
      e.label = static_cast<std::size_t>(label);
      if (j.contains("frames")) e.frames = j.at("frames").get<std::vector<std::string>>();
    } catch (const json::exception& ex) {
      throw Error("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (e.subject.empty()) throw Error("manifest line " + std::to_string(lineno) + ": empty subject");
    if (e.label >= m.class_names.size())
      throw Error("manifest line " + std::to_string(lineno) + ": label " + std::to_string(e.label) +
                  " out of range for " + std::to_string(m.class_names.size()) + " classes");
    m.entries.push_back(std::move(e));
  }
  if (!have_header) throw Error("manifest " + path.string() + " is empty");
  return m;
}

void write_manifest(const Manifest& m, const fs::path& path) {
  std::ostringstream os;
  os << json{{"class_names", m.class_names}}.dump() << '\n';
  for (const auto& e : m.entries) {
    json j{{"sequence_dir", e.sequence_dir}, {"subject", e.subject}, {"label", e.label}};
    if (!e.frames.empty()) j["frames"] = e.frames;
    os << j.dump() << '\n';
  }
  write_file_atomic(path, os.str());
}

// ------------------------------------------------------------------ loading

Tensor resize_bilinear(const Tensor& img, std::size_t height, std::size_t width) {
  const std::size_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  if (h == height && w == width) return img;
  Tensor out(Shape{c, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](std::size_t yy, std::size_t xx) { return img[(ch * h + yy) * w + xx]; };
        const double top = at(y0, x0) * (1 - tx) + at(y0, x1) * tx;
        const double bot = at(y1, x0) * (1 - tx) + at(y1, x1) * tx;
        out[(ch * height + y) * width + x] = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

FrameSequence load_sequence(const fs::path& dir, const std::vector<std::string>& frame_list, const LoadOptions& opts) {
  std::vector<fs::path> files;
  if (!frame_list.empty()) {
    for (const auto& f : frame_list) files.push_back(dir / f);
  } else {
    if (!fs::is_directory(dir)) throw Error("sequence directory not found: " + dir.string());
    for (const auto& de : fs::directory_iterator(dir)) {
      if (!de.is_regular_file()) continue;
      std::string ext = de.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".png" || ext == ".pgm") files.push_back(de.path());
    }
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  }
  if (files.size() < kMinFrames)
    throw Error("insufficient frames in " + dir.string() + ": found " + std::to_string(files.size()) + ", need " +
                std::to_string(kMinFrames));

  const bool native = opts.height == 0 || opts.width == 0;
  std::size_t channels = 0, height = opts.height, width = opts.width;
  std::vector<double> data;
  for (const auto& f : files) {
    Tensor img = read_image(f);
    if (channels == 0) {
      channels = img.shape[0];
      if (native) height = img.shape[1], width = img.shape[2];
    }
    if (img.shape[0] != channels)
      throw Error("inconsistent channel counts in " + dir.string() + ": " + f.filename().string() + " has " +
                  std::to_string(img.shape[0]) + ", expected " + std::to_string(channels));
    if (native && (img.shape[1] != height || img.shape[2] != width))
      throw Error("inconsistent frame sizes in " + dir.string() + ": " + f.filename().string() + " is " +
                  img.shape.str());
    if (!native) img = resize_bilinear(img, height, width);
    data.insert(data.end(), img.data.begin(), img.data.end());
  }
  FrameSequence seq;
  seq.frames = Tensor(Shape{files.size(), channels, height, width}, std::move(data));
  seq.source_path = dir.string();
  return seq;
}

std::vector<FrameSequence> load_dataset(const Manifest& m, const LoadOptions& opts) {
  std::vector<FrameSequence> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    fs::path dir = e.sequence_dir;
    if (dir.is_relative()) dir = m.base_dir / dir;
    FrameSequence seq = load_sequence(dir, e.frames, opts);
    if (e.label >= m.num_classes()) throw Error("label out of range for " + e.sequence_dir);
    seq.subject_id = e.subject;
    seq.label = e.label;
    seq.source_path = e.sequence_dir;
    out.push_back(std::move(seq));
  }
  return out;
}

// ------------------------------------------------------------------ augmentation

Tensor rotate_image(const Tensor& img, double degrees) {
  const std::size_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  Tensor out(img.shape, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // Inverse map: with y pointing down, a clockwise turn by th sends
      // (u, v) to (u cos - v sin, u sin + v cos); undo it for the source.
      const double u = static_cast<double>(x) - cx, v = static_cast<double>(y) - cy;
      const double sx = cs * u + sn * v + cx;
      const double sy = -sn * u + cs * v + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double tx = sx - fx, ty = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto at = [&](long yy, long xx) {
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
          return img[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
        };
        out[(ch * h + y) * w + x] = (at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx) * (1 - ty) +
                                    (at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx) * ty;
      }
    }
  return out;
}

Tensor hflip_image(const Tensor& img) {
  const std::size_t c = img.shape[0], h = img.shape[1], w = img.shape[2];
  Tensor out(img.shape);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
  return out;
}

namespace {

template <class Fn>
FrameSequence map_frames(const FrameSequence& seq, Fn&& fn) {
  FrameSequence out = seq;
  const std::size_t n = seq.frame_size();
  for (std::size_t t = 0; t < seq.length(); ++t) {
    Tensor f = fn(seq.frame_tensor(t));
    std::copy(f.data.begin(), f.data.end(), out.frames.data.begin() + static_cast<std::ptrdiff_t>(t * n));
  }
  return out;
}

}  // namespace

std::vector<FrameSequence> augment(const FrameSequence& seq, const AugmentSpec& spec) {
  std::vector<FrameSequence> out{seq};
  for (double deg : spec.rotations_deg)
    out.push_back(map_frames(seq, [deg](const Tensor& f) { return rotate_image(f, deg); }));
  if (spec.hflip) out.push_back(map_frames(seq, [](const Tensor& f) { return hflip_image(f); }));
  return out;
}

// ------------------------------------------------------------------ synthetic data

std::pair<double, double> blob_centre(const SynthBlob& b, std::size_t t, std::size_t frames) {
  const double s = static_cast<double>(t) / static_cast<double>(frames - 1);
  return {b.x0 + s * b.dx, b.y0 + s * b.dy};
}

namespace {

struct Background {
  double base;
  struct Grating {
    double amp, fx, fy, phase;
  };
  std::vector<Grating> gratings;

  double at(double x, double y) const {
    double v = base;
    for (const auto& g : gratings) v += g.amp * std::sin(g.fx * x + g.fy * y + g.phase);
    return v;
  }
};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::vector<FrameSequence> synth_sequences(const SynthSpec& spec, std::vector<SynthBlob>* blobs) {
  if (!(spec.motion_px > 0)) throw Error("synth: motion_px must be positive");
  if (spec.num_subjects < 1) throw Error("synth: need at least one subject");
  if (spec.seqs_per_subject == 0 || spec.seqs_per_subject % kSynthClassNames.size() != 0)
    throw Error("synth: sequences per subject must be a positive multiple of 3 for class balance");
  if (spec.frames < kMinFrames) throw Error("synth: need at least 9 frames");
  if (spec.extent < 16) throw Error("synth: extent must be at least 16");

  const double ext = static_cast<double>(spec.extent);
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<FrameSequence> out;
  if (blobs) blobs->clear();

  for (std::size_t s = 0; s < spec.num_subjects; ++s) {
    Rng subj(mix_seed(spec.seed, s));
    Background bg{subj.uniform(0.15, 0.3), {}};
    for (int k = 0; k < 3; ++k) {
      const double freq = subj.uniform(1.0, 4.0) * two_pi / ext;
      const double ang = subj.uniform(0.0, std::numbers::pi);
      bg.gratings.push_back({subj.uniform(0.03, 0.06), freq * std::cos(ang), freq * std::sin(ang),
                             subj.uniform(0.0, two_pi)});
    }
    const double sigma = subj.uniform(2.5, 4.0);
    const double cx = ext / 2 + subj.uniform(-ext / 8, ext / 8);
    const double cy = ext / 2 + subj.uniform(-ext / 8, ext / 8);

    char subject_id[16];
    std::snprintf(subject_id, sizeof subject_id, "s%02zu", s + 1);

    for (std::size_t q = 0; q < spec.seqs_per_subject; ++q) {
      const std::size_t label = q % kSynthClassNames.size();
      Rng rs(mix_seed(mix_seed(spec.seed, s), 1000 + q));
      SynthBlob b{};
      b.x0 = cx + rs.uniform(-ext / 10, ext / 10);
      b.y0 = cy + rs.uniform(-ext / 10, ext / 10);
      b.sigma = sigma;
      b.amplitude = rs.uniform(0.35, 0.5);
      if (label == 0) b.dx = spec.motion_px;
      if (label == 1) b.dy = -spec.motion_px;  // image y points down
      b.pulse_depth = label == 2 ? 0.15 : 0.0;
      if (blobs) blobs->push_back(b);

      const std::size_t T = spec.frames, E = spec.extent;
      Tensor frames(Shape{T, 1, E, E});
      for (std::size_t t = 0; t < T; ++t) {
        const auto [bx, by] = blob_centre(b, t, T);
        const double amp =
            b.amplitude * (1.0 + b.pulse_depth * std::sin(two_pi * static_cast<double>(t) / static_cast<double>(T - 1)));
        for (std::size_t y = 0; y < E; ++y)
          for (std::size_t x = 0; x < E; ++x) {
            const double ddx = static_cast<double>(x) - bx, ddy = static_cast<double>(y) - by;
            const double v = bg.at(static_cast<double>(x), static_cast<double>(y)) +
                             amp * std::exp(-(ddx * ddx + ddy * ddy) / (2 * sigma * sigma));
            frames[(t * E + y) * E + x] = quantize(v);
          }
      }
      char dir[64];
      std::snprintf(dir, sizeof dir, "%s/seq_%02zu", subject_id, q);
      out.push_back(FrameSequence{std::move(frames), subject_id, label, dir});
    }
  }
  return out;
}

Manifest synth_dataset(const SynthSpec& spec, const fs::path& out_dir) {
  const auto seqs = synth_sequences(spec);
  Manifest m;
  m.class_names = kSynthClassNames;
  m.base_dir = out_dir;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  for (const auto& seq : seqs) {
    const fs::path dir = out_dir / seq.source_path;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
    const std::size_t n = seq.frame_size();
    for (std::size_t t = 0; t < seq.length(); ++t) {
      std::vector<std::uint8_t> px(n);
      auto f = seq.frame(t);
      for (std::size_t i = 0; i < n; ++i) px[i] = static_cast<std::uint8_t>(std::lround(f[i] * 255.0));
      char name[32];
      std::snprintf(name, sizeof name, "frame_%03zu.png", t);
      write_file_atomic(dir / name, encode_png(px, seq.channels(), seq.height(), seq.width()));
    }
    m.entries.push_back({seq.source_path, seq.subject_id, seq.label, {}});
  }
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

}  // namespace ranktide
