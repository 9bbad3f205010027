#include "ranktide/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <memory>
#include <sstream>

namespace ranktide {

namespace fs = std::filesystem;

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

Tensor decode_png(const fs::path& path, const std::string& bytes) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw Error("undecodable image " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t c = color ? 3 : 1, h = img.height, w = img.width;
  std::vector<std::uint8_t> hwc(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, hwc.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw Error("undecodable image " + path.string() + ": " + msg);
  }
  Tensor out(Shape{c, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) out[(ch * h + y) * w + x] = hwc[(y * w + x) * c + ch] / 255.0;
  return out;
}

Tensor decode_pgm(const fs::path& path, const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  in >> magic;
  auto next_int = [&]() -> long {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    return v;
  };
  if (magic != "P5") throw Error("undecodable image " + path.string() + ": only binary PGM (P5) is supported");
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (!in || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw Error("undecodable image " + path.string() + ": bad PGM header (8-bit only)");
  in.get();  // single whitespace before raster
  const auto offset = static_cast<std::size_t>(in.tellg());
  const std::size_t n = static_cast<std::size_t>(w * h);
  if (bytes.size() < offset + n) throw Error("undecodable image " + path.string() + ": truncated PGM raster");
  Tensor out(Shape{1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<std::uint8_t>(bytes[offset + i]) / 255.0;
  return out;
}

}  // namespace

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Tensor read_image(const fs::path& path) {
  const std::string ext = lower_ext(path);
  const std::string bytes = read_file(path);
  if (ext == ".png") return decode_png(path, bytes);
  if (ext == ".pgm") return decode_pgm(path, bytes);
  throw Error("undecodable image " + path.string() + ": unsupported extension");
}

std::string encode_png(const std::vector<std::uint8_t>& chw, std::size_t channels, std::size_t height,
                       std::size_t width) {
  if (channels != 1 && channels != 3) throw Error("encode_png: channels must be 1 or 3");
  if (chw.size() != channels * height * width) throw Error("encode_png: buffer size mismatch");
  std::vector<std::uint8_t> hwc(chw.size());
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t i = 0; i < height * width; ++i) hwc[i * channels + ch] = chw[ch * height * width + i];
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(width);
  img.height = static_cast<png_uint_32>(height);
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(img, size, 0, hwc.data(), 0, nullptr))
    throw Error(std::string("encode_png: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, hwc.data(), 0, nullptr))
    throw Error(std::string("encode_png: ") + img.message);
  out.resize(size);
  return out;
}

}  // namespace ranktide
