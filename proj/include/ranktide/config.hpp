#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ranktide/sequence_io.hpp"
#include "ranktide/train.hpp"

namespace ranktide {

/// Everything a run can be configured with.
struct RunSettings {
  TrainConfig train;
  LoadOptions load;
  std::uint64_t eval_seed = 12345;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; blank lines and lines starting with '#' are
/// ignored. Throws Error naming the line on malformed input.
KeyValues parse_config_text(const std::string& text);
KeyValues read_config_file(const std::filesystem::path& path);

/// Applies one setting. Throws Error naming the key when it is unknown or the
/// value does not parse.
void apply_setting(RunSettings& s, const std::string& key, const std::string& value);
void apply_settings(RunSettings& s, const KeyValues& kv);

/// Every recognised key with its current value, in a stable order.
KeyValues describe(const RunSettings& s);

}  // namespace ranktide
