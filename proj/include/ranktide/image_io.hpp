#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ranktide/tensor.hpp"

namespace ranktide {

/// Decodes an 8-bit PNG (gray or colour; alpha is dropped) or binary PGM
/// (P5) into a [C x H x W] tensor with values intensity / 255.
Tensor read_image(const std::filesystem::path& path);

/// Encodes 8-bit samples laid out [C x H x W] (C = 1 or 3) as PNG bytes.
std::string encode_png(const std::vector<std::uint8_t>& chw, std::size_t channels, std::size_t height,
                       std::size_t width);

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace ranktide
