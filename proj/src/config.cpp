#include "ranktide/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>

#include "ranktide/image_io.hpp"

namespace ranktide {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw Error("config: invalid value '" + v + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error("config: invalid boolean '" + v + "' for key '" + key + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw Error("config: empty list for key '" + key + "'");
  return out;
}

template <class E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, e] : names)
    if (v == n) return e;
  std::string allowed;
  for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
  throw Error("config: invalid value '" + v + "' for key '" + key + "' (expected " + allowed + ")");
}

template <class E>
std::string enum_name(E value, std::initializer_list<std::pair<const char*, E>> names) {
  for (const auto& [n, e] : names)
    if (e == value) return n;
  return "?";
}

const std::initializer_list<std::pair<const char*, OptimizerKind>> kOptimizers{{"adam", OptimizerKind::adam},
                                                                               {"sgd", OptimizerKind::sgd_momentum}};
const std::initializer_list<std::pair<const char*, AugmentMode>> kAugment{
    {"none", AugmentMode::none}, {"sequence", AugmentMode::sequence}, {"dynamic_image", AugmentMode::dynamic_image}};
const std::initializer_list<std::pair<const char*, InputMode>> kInput{{"dssi", InputMode::dssi},
                                                                      {"middle_frame", InputMode::middle_frame}};
const std::initializer_list<std::pair<const char*, RankPoolVariant>> kVariant{
    {"timeavg", RankPoolVariant::time_average}, {"direct", RankPoolVariant::direct_frame}};

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Key {
  const char* name;
  std::function<void(RunSettings&, const std::string& key, const std::string& value)> set;
  std::function<std::string(const RunSettings&)> get;
};

#define RT_DOUBLE(name, field)                                                                          \
  Key {                                                                                                 \
    name, [](RunSettings& s, const std::string& k, const std::string& v) { s.field = parse_number<double>(k, v); }, \
        [](const RunSettings& s) { return num(s.field); }                                               \
  }
#define RT_SIZE(name, field)                                                                                 \
  Key {                                                                                                      \
    name, [](RunSettings& s, const std::string& k, const std::string& v) { s.field = parse_number<std::size_t>(k, v); }, \
        [](const RunSettings& s) { return std::to_string(s.field); }                                         \
  }
#define RT_BOOL(name, field)                                                                      \
  Key {                                                                                           \
    name, [](RunSettings& s, const std::string& k, const std::string& v) { s.field = parse_bool(k, v); }, \
        [](const RunSettings& s) { return std::string(s.field ? "true" : "false"); }              \
  }
#define RT_ENUM(name, field, table)                                                                     \
  Key {                                                                                                 \
    name, [](RunSettings& s, const std::string& k, const std::string& v) { s.field = parse_enum(k, v, table); }, \
        [](const RunSettings& s) { return enum_name(s.field, table); }                                  \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k{
      RT_DOUBLE("lr", train.lr),
      RT_SIZE("epochs", train.epochs),
      RT_DOUBLE("tradeoff_lambda", train.tradeoff_lambda),
      Key{"seed", [](RunSettings& s, const std::string& k, const std::string& v) { s.train.seed = parse_number<std::uint64_t>(k, v); },
          [](const RunSettings& s) { return std::to_string(s.train.seed); }},
      RT_SIZE("batch_size", train.batch_size),
      RT_BOOL("enable_stma", train.enable_stma),
      RT_BOOL("enable_de_loss", train.enable_de_loss),
      RT_ENUM("optimizer", train.optimizer, kOptimizers),
      RT_DOUBLE("adam_beta1", train.adam_beta1),
      RT_DOUBLE("adam_beta2", train.adam_beta2),
      RT_DOUBLE("adam_eps", train.adam_eps),
      RT_DOUBLE("momentum", train.momentum),
      RT_ENUM("augment", train.augment, kAugment),
      RT_BOOL("augment_hflip", train.augment_spec.hflip),
      Key{"augment_rotations",
          [](RunSettings& s, const std::string& k, const std::string& v) {
            std::vector<double> r;
            std::stringstream ss(v);
            for (std::string item; std::getline(ss, item, ',');)
              if (!trim(item).empty()) r.push_back(parse_number<double>(k, trim(item)));
            s.train.augment_spec.rotations_deg = r;
          },
          [](const RunSettings& s) {
            std::string out;
            for (double d : s.train.augment_spec.rotations_deg) out += (out.empty() ? "" : ",") + num(d);
            return out;
          }},
      RT_ENUM("input", train.input, kInput),
      Key{"channels",
          [](RunSettings& s, const std::string& k, const std::string& v) { s.train.model.backbone.channels = parse_list(k, v); },
          [](const RunSettings& s) {
            std::string out;
            for (auto c : s.train.model.backbone.channels) out += (out.empty() ? "" : ",") + std::to_string(c);
            return out;
          }},
      RT_SIZE("nl_reduction", train.model.nl_reduction),
      RT_ENUM("variant", train.rank_pool.variant, kVariant),
      RT_DOUBLE("ranksvm_reg_lambda", train.rank_pool.ranksvm_reg_lambda),
      RT_SIZE("oracle_steps", train.rank_pool.oracle_steps),
      RT_DOUBLE("oracle_lr", train.rank_pool.oracle_lr),
      RT_DOUBLE("de_epsilon", train.de.epsilon),
      RT_BOOL("de_normalize", train.de.normalize),
      RT_SIZE("threads", train.threads),
      RT_SIZE("height", load.height),
      RT_SIZE("width", load.width),
      Key{"eval_seed", [](RunSettings& s, const std::string& k, const std::string& v) { s.eval_seed = parse_number<std::uint64_t>(k, v); },
          [](const RunSettings& s) { return std::to_string(s.eval_seed); }},
  };
  return k;
}

#undef RT_DOUBLE
#undef RT_SIZE
#undef RT_BOOL
#undef RT_ENUM

}  // namespace

KeyValues parse_config_text(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw Error("config: line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw Error("config: line " + std::to_string(lineno) + ": empty key");
    kv.emplace_back(key, trim(t.substr(eq + 1)));
  }
  return kv;
}

KeyValues read_config_file(const std::filesystem::path& path) { return parse_config_text(read_file(path)); }

void apply_setting(RunSettings& s, const std::string& key, const std::string& value) {
  for (const Key& k : keys())
    if (key == k.name) {
      k.set(s, key, value);
      return;
    }
  throw Error("config: unknown key '" + key + "'");
}

void apply_settings(RunSettings& s, const KeyValues& kv) {
  for (const auto& [k, v] : kv) apply_setting(s, k, v);
}

KeyValues describe(const RunSettings& s) {
  KeyValues out;
  for (const Key& k : keys()) out.emplace_back(k.name, k.get(s));
  return out;
}

}  // namespace ranktide
