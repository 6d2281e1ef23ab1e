#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "refuseg/cli/cli.hpp"
#include "refuseg/errors.hpp"

namespace refuseg::cli {

namespace {

using trainer::RunConfig;

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorKind::configuration, "'" + value + "' is not a valid " + expected + " for " + key);
}

template <class N>
N parse_number(const std::string& key, const std::string& value) {
  N v{};
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, v);
  if (ec != std::errc{} || ptr != end || value.empty())
    bad_value(key, value, std::is_floating_point_v<N> ? "number" : "integer");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "boolean");
}

template <class N>
std::string number_text(N v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class N, class Access>
Field number_field(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_number<N>(k, v); },
          [access](const RunConfig& c) { return number_text(access(const_cast<RunConfig&>(c))); }};
}

template <class Access>
Field bool_field(Access access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define REFUSEG_FIELD(type, key, expr) \
  {key, number_field<type>([](RunConfig& c) -> type& { return expr; })}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      REFUSEG_FIELD(int, "epochs", c.train.epochs),
      REFUSEG_FIELD(int, "batch_size", c.train.batch_size),
      REFUSEG_FIELD(double, "lr", c.train.lr),
      REFUSEG_FIELD(double, "beta", c.train.beta),
      REFUSEG_FIELD(uint64_t, "seed", c.train.seed),
      REFUSEG_FIELD(int, "checkpoint_every", c.train.checkpoint_every),
      REFUSEG_FIELD(int, "eval_every", c.train.eval_every),
      REFUSEG_FIELD(double, "modality_dropout_p", c.train.modality_dropout_p),
      REFUSEG_FIELD(int, "val_cases", c.train.val_cases),
      REFUSEG_FIELD(int64_t, "max_steps", c.train.max_steps),
      {"augment", bool_field([](RunConfig& c) -> bool& { return c.train.augment; })},
      REFUSEG_FIELD(int, "stages", c.model.stages),
      REFUSEG_FIELD(int, "base_width", c.model.base_width),
      REFUSEG_FIELD(int, "blocks_per_stage", c.model.blocks_per_stage),
      REFUSEG_FIELD(int, "proj_dim", c.model.proj_dim),
      REFUSEG_FIELD(int, "num_classes", c.model.num_classes),
      REFUSEG_FIELD(int64_t, "input_height", c.model.input_height),
      REFUSEG_FIELD(int64_t, "input_width", c.model.input_width),
      REFUSEG_FIELD(double, "w_dice", c.loss.w_dice),
      REFUSEG_FIELD(double, "w_focal", c.loss.w_focal),
      REFUSEG_FIELD(double, "temperature", c.loss.temperature),
      REFUSEG_FIELD(double, "focal_alpha", c.focal.alpha),
      REFUSEG_FIELD(double, "focal_gamma", c.focal.gamma),
      REFUSEG_FIELD(double, "focal_clamp_eps", c.focal.clamp_eps),
      REFUSEG_FIELD(double, "hflip_p", c.augment.hflip_p),
      REFUSEG_FIELD(double, "vflip_p", c.augment.vflip_p),
      REFUSEG_FIELD(double, "rotate_limit_deg", c.augment.rotate_limit_deg),
      REFUSEG_FIELD(double, "shift_limit", c.augment.shift_limit),
      REFUSEG_FIELD(double, "shift_rotate_p", c.augment.shift_rotate_p),
      REFUSEG_FIELD(int64_t, "crop_size", c.augment.crop_size),
      REFUSEG_FIELD(int64_t, "final_size", c.augment.final_size),
      REFUSEG_FIELD(uint64_t, "augment_seed", c.augment.seed),
  };
  return table;
}

#undef REFUSEG_FIELD

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw Error(ErrorKind::configuration, "unknown configuration key '" + key + "'");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const auto& [k, f] : fields()) out.push_back(k);
    return out;
  }();
  return keys;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(trim(key)).set(cfg, trim(key), trim(value));
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::configuration,
            "line " + std::to_string(number) + ": expected 'key = value'");
    try {
      apply_setting(base, line.substr(0, eq), line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error(e.kind(), "line " + std::to_string(number) + ": " + e.message());
    }
  }
  return base;
}

RunConfig read_config_file(const std::string& path, RunConfig base) {
  std::ifstream f(path);
  require(f.good(), ErrorKind::io, "cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str(), std::move(base));
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.message());
  }
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace refuseg::cli
