#include "tpmamba/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace tpmamba {

void TrainConfig::sync() {
  augment.crop_size = crop;
  model.adapter.channels = model.channels;
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (!(lr_start > lr_end) || lr_end < 0) throw ConfigError("need lr_start > lr_end >= 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (classes < 2 || classes > 255) throw ConfigError("classes must be in [2, 255]");
  for (Index c : crop) {
    if (c <= 0) throw ConfigError("crop extents must be positive");
  }
  if (crop[1] % model.patch != 0 || crop[2] % model.patch != 0) {
    throw ConfigError("crop H, W must be divisible by the patch size " + std::to_string(model.patch));
  }
  if (window_overlap < 0 || window_overlap >= 1) throw ConfigError("eval.overlap must be in [0, 1)");
  if (augment.flip_p < 0 || augment.flip_p > 1) throw ConfigError("augment.flip_p must be in [0, 1]");
  if (!(augment.gamma_min > 0) || augment.gamma_max < augment.gamma_min) {
    throw ConfigError("augment gamma range must satisfy 0 < min <= max");
  }
  if (augment.jitter < 0 || augment.jitter >= 1) throw ConfigError("augment.jitter must be in [0, 1)");
  model.validate();
  DecoderConfig::for_encoder(model, classes).validate();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<Index> parse_list(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<Index>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

std::array<Index, 3> parse_triple(const std::string& key, const std::string& v) {
  const auto l = parse_list(key, v);
  if (l.size() != 3) throw ConfigError("config key '" + key + "': expected D,H,W");
  return {l[0], l[1], l[2]};
}

std::string join(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// Shortest text that parses back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define TP_INT(member) \
  Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<Index>(k, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }}
#define TP_REAL(member) \
  Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<double>(k, v); }, \
        [](const TrainConfig& c) { return fmt(c.member); }}
#define TP_BOOL(member) \
  Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.member = parse_bool(k, v); }, \
        [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"epochs", TP_INT(epochs)},
      {"lr_start", TP_REAL(lr_start)},
      {"lr_end", TP_REAL(lr_end)},
      {"weight_decay", TP_REAL(weight_decay)},
      {"batch_size", TP_INT(batch_size)},
      {"crop", Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.crop = parse_triple(k, v); },
                     [](const TrainConfig& c) { return join({c.crop.begin(), c.crop.end()}); }}},
      {"seed", Field{[](TrainConfig& c, const std::string& k, const std::string& v) {
                       c.seed = parse_number<std::uint64_t>(k, v);
                     },
                     [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      {"classes", TP_INT(classes)},
      {"model.channels", TP_INT(model.channels)},
      {"model.patch", TP_INT(model.patch)},
      {"model.n_blocks", TP_INT(model.n_blocks)},
      {"model.n_heads", TP_INT(model.n_heads)},
      {"model.mlp_ratio", TP_INT(model.mlp_ratio)},
      {"model.lora_rank", TP_INT(model.lora_rank)},
      {"model.lora_alpha", TP_REAL(model.lora_alpha)},
      {"model.img_size", TP_INT(model.img_size)},
      {"model.n_outputs", TP_INT(model.n_outputs)},
      {"model.use_adapters", TP_BOOL(model.use_adapters)},
      {"adapter.rank", TP_INT(model.adapter.rank)},
      {"adapter.dilations",
       Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.model.adapter.dilations = parse_list(k, v); },
             [](const TrainConfig& c) { return join(c.model.adapter.dilations); }}},
      {"adapter.depth_kernel", TP_INT(model.adapter.depth_kernel)},
      {"adapter.scan_mode",
       Field{[](TrainConfig& c, const std::string&, const std::string& v) { c.model.adapter.scan_mode = parse_scan_mode(v); },
             [](const TrainConfig& c) { return std::string(to_string(c.model.adapter.scan_mode)); }}},
      {"adapter.conv_mode",
       Field{[](TrainConfig& c, const std::string&, const std::string& v) { c.model.adapter.conv_mode = parse_conv_mode(v); },
             [](const TrainConfig& c) { return std::string(to_string(c.model.adapter.conv_mode)); }}},
      {"adapter.d_state", TP_INT(model.adapter.d_state)},
      {"adapter.expand", TP_INT(model.adapter.expand)},
      {"adapter.d_conv", TP_INT(model.adapter.d_conv)},
      {"augment.crop", TP_BOOL(augment.crop)},
      {"augment.flip", TP_BOOL(augment.flip)},
      {"augment.contrast", TP_BOOL(augment.contrast)},
      {"augment.spacing_jitter", TP_BOOL(augment.spacing_jitter)},
      {"augment.flip_p", TP_REAL(augment.flip_p)},
      {"augment.gamma_min", TP_REAL(augment.gamma_min)},
      {"augment.gamma_max", TP_REAL(augment.gamma_max)},
      {"augment.jitter", TP_REAL(augment.jitter)},
      {"eval.overlap", TP_REAL(window_overlap)},
  };
  return table;
}

#undef TP_INT
#undef TP_REAL
#undef TP_BOOL

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(cfg, key, value);
      cfg.sync();
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config(std::istream& is, TrainConfig cfg) {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + line + "'");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.sync();
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  return parse_config(is);
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + "=" + field.get(cfg) + "\n";
  return out;
}

}  // namespace tpmamba
