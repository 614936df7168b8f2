#include "cbvit/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cbvit/checkpoint.hpp"

namespace cbvit {

namespace {

const std::vector<std::pair<std::string, std::string>>& schema() {
  // key -> default value
  static const std::vector<std::pair<std::string, std::string>> kSchema = {
      {"seed", "1"},
      {"model.image_size", "32"},
      {"model.patch_size", "8"},
      {"model.channels", "3"},
      {"model.depth", "4"},
      {"model.dim", "64"},
      {"model.heads", "4"},
      {"model.mlp_ratio", "4"},
      {"model.num_classes", "3"},
      {"model.extra_block", "none"},
      {"model.dropout", "0"},
      {"model.drop_path", "0"},
      {"model.attn_scale", "0"},  // 0 selects 1/sqrt(head_dim)
      {"model.exclude_class_from_mean", "false"},
      {"cb.variant", "none"},
      {"cb.site", "mlp_end"},
      {"cb.layers", "all"},
      {"cb.aggregation", "mean"},
      {"cb.msa_uniform_head", "none"},
      {"cb.lambda_init", "1"},
      {"train.epochs", "20"},
      {"train.batch_size", "128"},
      {"train.base_lr", "-1"},  // negative selects 1e-3 * batch_size / 1024
      {"train.min_lr", "1e-5"},
      {"train.beta1", "0.9"},
      {"train.beta2", "0.999"},
      {"train.weight_decay", "0.05"},
      {"train.warmup_epochs", "1"},
      {"train.label_smoothing", "0"},
      {"train.precision", "f32"},
      {"data.path", ""},
      {"data.n", "2000"},
      {"data.noise", "14"},
      {"data.seed", "0"},  // 0 derives from the run seed
      {"analyze.batch", "64"},
      {"analyze.exclude_class", "true"},
      {"analyze.exclude_last_layers", "1"},
      {"analyze.renormalize_distance", "false"},
      {"analyze.scaling_stats", "true"},
      {"analyze.occlusion", "-1"},  // fraction; negative disables
      {"analyze.fgsm", "-1"},       // epsilon on the [0,1] pixel scale; negative disables
      {"sweep.heads", "2,4,8"},
      {"gradcheck.coords", "50"},
      {"gradcheck.tolerance", "1e-4"},
      {"gradcheck.trials", "10000"},
      {"gradcheck.eps", "1e-5"},
  };
  return kSchema;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw std::runtime_error("config: key '" + key + "' has invalid value '" + value +
                           "' (expected " + expected + ")");
}

}  // namespace

ConfigMap default_config() {
  ConfigMap cfg;
  for (const auto& [key, value] : schema()) cfg[key] = value;
  return cfg;
}

bool is_known_key(const std::string& key) {
  for (const auto& [k, v] : schema())
    if (k == key) return true;
  return false;
}

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> ks;
    for (const auto& [k, v] : schema()) ks.push_back(k);
    return ks;
  }();
  return keys;
}

ConfigMap parse_config_text(const std::string& text, const std::string& origin) {
  ConfigMap cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line.resize(comment);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!is_known_key(key))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": unknown config key '" +
                               key + "'");
    cfg[key] = value;
  }
  return cfg;
}

ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

ConfigMap resolve_config(ConfigMap file_values,
                         const std::vector<std::pair<std::string, std::string>>& overrides) {
  for (const auto& [key, value] : overrides) {
    if (!is_known_key(key)) throw std::runtime_error("config: unknown config key '" + key + "'");
    file_values[key] = value;
  }
  for (const auto& [key, value] : schema())
    if (file_values.find(key) == file_values.end()) file_values[key] = value;
  return file_values;
}

const std::string& cfg_str(const ConfigMap& cfg, const std::string& key) {
  const auto it = cfg.find(key);
  if (it == cfg.end()) throw std::runtime_error("config: missing key '" + key + "'");
  return it->second;
}

long cfg_int(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = cfg_str(cfg, key);
  try {
    std::size_t pos = 0;
    const long out = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    bad_value(key, v, "an integer");
  }
}

std::uint64_t cfg_u64(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = cfg_str(cfg, key);
  try {
    std::size_t pos = 0;
    const unsigned long long out = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    bad_value(key, v, "an unsigned integer");
  }
}

double cfg_double(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = cfg_str(cfg, key);
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    bad_value(key, v, "a number");
  }
}

bool cfg_bool(const ConfigMap& cfg, const std::string& key) {
  const std::string& v = cfg_str(cfg, key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

// ---- enum names -------------------------------------------------------------

std::string to_string(CbVariant v) {
  switch (v) {
    case CbVariant::none: return "none";
    case CbVariant::cb: return "cb";
    case CbVariant::cb_s: return "cb_s";
    case CbVariant::cb_gate: return "cb_gate";
    case CbVariant::cb_hybrid: return "cb_hybrid";
  }
  return "?";
}

std::string to_string(CbSite v) {
  switch (v) {
    case CbSite::mlp_front: return "mlp_front";
    case CbSite::mlp_mid: return "mlp_mid";
    case CbSite::mlp_end: return "mlp_end";
    case CbSite::msa: return "msa";
    case CbSite::both_mlp_msa: return "both_mlp_msa";
  }
  return "?";
}

std::string to_string(Aggregation v) {
  switch (v) {
    case Aggregation::mean: return "mean";
    case Aggregation::max: return "max";
    case Aggregation::class_token: return "class_token";
  }
  return "?";
}

std::string to_string(UniformHead v) {
  switch (v) {
    case UniformHead::none: return "none";
    case UniformHead::replace: return "replace";
    case UniformHead::append: return "append";
  }
  return "?";
}

std::string to_string(ExtraBlock v) {
  switch (v) {
    case ExtraBlock::none: return "none";
    case ExtraBlock::msa: return "msa";
    case ExtraBlock::mlp: return "mlp";
  }
  return "?";
}

std::string to_string(Precision v) { return v == Precision::f32 ? "f32" : "f64"; }

namespace {
template <typename E>
E enum_from(const std::string& s, const std::vector<std::pair<std::string, E>>& table,
            const std::string& what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  std::string expected;
  for (const auto& [name, value] : table) expected += (expected.empty() ? "" : "|") + name;
  throw std::runtime_error("config: invalid " + what + " '" + s + "' (expected " + expected + ")");
}
}  // namespace

CbVariant cb_variant_from(const std::string& s) {
  return enum_from<CbVariant>(s,
                              {{"none", CbVariant::none},
                               {"cb", CbVariant::cb},
                               {"cb_s", CbVariant::cb_s},
                               {"cb_gate", CbVariant::cb_gate},
                               {"cb_hybrid", CbVariant::cb_hybrid}},
                              "cb.variant");
}

CbSite cb_site_from(const std::string& s) {
  return enum_from<CbSite>(s,
                           {{"mlp_front", CbSite::mlp_front},
                            {"mlp_mid", CbSite::mlp_mid},
                            {"mlp_end", CbSite::mlp_end},
                            {"msa", CbSite::msa},
                            {"both_mlp_msa", CbSite::both_mlp_msa}},
                           "cb.site");
}

Aggregation aggregation_from(const std::string& s) {
  return enum_from<Aggregation>(s,
                                {{"mean", Aggregation::mean},
                                 {"max", Aggregation::max},
                                 {"class_token", Aggregation::class_token}},
                                "cb.aggregation");
}

UniformHead uniform_head_from(const std::string& s) {
  return enum_from<UniformHead>(s,
                                {{"none", UniformHead::none},
                                 {"replace", UniformHead::replace},
                                 {"append", UniformHead::append}},
                                "cb.msa_uniform_head");
}

ExtraBlock extra_block_from(const std::string& s) {
  return enum_from<ExtraBlock>(
      s, {{"none", ExtraBlock::none}, {"msa", ExtraBlock::msa}, {"mlp", ExtraBlock::mlp}},
      "model.extra_block");
}

Precision precision_from(const std::string& s) {
  return enum_from<Precision>(s, {{"f32", Precision::f32}, {"f64", Precision::f64}},
                              "train.precision");
}

std::set<int> parse_layer_mask(const std::string& spec, int depth) {
  std::set<int> mask;
  if (spec == "none" || spec.empty()) return mask;
  if (spec == "all") {
    for (int i = 0; i < depth; ++i) mask.insert(i);
    return mask;
  }
  if (spec == "upper_half") {
    for (int i = depth / 2; i < depth; ++i) mask.insert(i);
    return mask;
  }
  if (spec == "lower_half") {
    for (int i = 0; i < depth / 2; ++i) mask.insert(i);
    return mask;
  }
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    try {
      std::size_t pos = 0;
      const int layer = std::stoi(item, &pos);
      if (pos != item.size()) throw std::invalid_argument("trailing");
      if (layer < 0 || layer >= depth)
        throw std::runtime_error("config: cb.layers entry " + item + " outside [0," +
                                 std::to_string(depth) + ")");
      mask.insert(layer);
    } catch (const std::runtime_error&) {
      throw;
    } catch (const std::exception&) {
      bad_value("cb.layers", spec, "all|upper_half|lower_half|none|comma-separated indices");
    }
  }
  return mask;
}

ModelConfig make_model_config(const ConfigMap& cfg) {
  ModelConfig mc;
  mc.image_size = static_cast<int>(cfg_int(cfg, "model.image_size"));
  mc.patch_size = static_cast<int>(cfg_int(cfg, "model.patch_size"));
  mc.channels = static_cast<int>(cfg_int(cfg, "model.channels"));
  mc.depth = static_cast<int>(cfg_int(cfg, "model.depth"));
  mc.dim = static_cast<int>(cfg_int(cfg, "model.dim"));
  mc.heads = static_cast<int>(cfg_int(cfg, "model.heads"));
  mc.mlp_ratio = static_cast<int>(cfg_int(cfg, "model.mlp_ratio"));
  mc.num_classes = static_cast<int>(cfg_int(cfg, "model.num_classes"));
  mc.extra_block = extra_block_from(cfg_str(cfg, "model.extra_block"));
  mc.dropout = cfg_double(cfg, "model.dropout");
  mc.drop_path = cfg_double(cfg, "model.drop_path");
  mc.attn_scale = cfg_double(cfg, "model.attn_scale");
  mc.exclude_class_from_mean = cfg_bool(cfg, "model.exclude_class_from_mean");
  mc.cb.variant = cb_variant_from(cfg_str(cfg, "cb.variant"));
  mc.cb.site = cb_site_from(cfg_str(cfg, "cb.site"));
  mc.cb.layer_mask = parse_layer_mask(cfg_str(cfg, "cb.layers"), mc.depth);
  mc.cb.aggregation = aggregation_from(cfg_str(cfg, "cb.aggregation"));
  mc.cb.msa_uniform_head = uniform_head_from(cfg_str(cfg, "cb.msa_uniform_head"));
  mc.cb.lambda_init = cfg_double(cfg, "cb.lambda_init");
  mc.validate();
  return mc;
}

TrainConfig make_train_config(const ConfigMap& cfg) {
  TrainConfig tc;
  tc.epochs = static_cast<int>(cfg_int(cfg, "train.epochs"));
  tc.batch_size = static_cast<int>(cfg_int(cfg, "train.batch_size"));
  tc.base_lr = cfg_double(cfg, "train.base_lr");
  tc.min_lr = cfg_double(cfg, "train.min_lr");
  tc.beta1 = cfg_double(cfg, "train.beta1");
  tc.beta2 = cfg_double(cfg, "train.beta2");
  tc.weight_decay = cfg_double(cfg, "train.weight_decay");
  tc.warmup_epochs = static_cast<int>(cfg_int(cfg, "train.warmup_epochs"));
  tc.seed = cfg_u64(cfg, "seed");
  tc.label_smoothing = cfg_double(cfg, "train.label_smoothing");
  tc.precision = precision_from(cfg_str(cfg, "train.precision"));
  tc.validate();
  return tc;
}

std::string config_to_text(const ConfigMap& cfg) {
  std::string out;
  for (const auto& [key, value] : cfg) out += key + " = " + value + "\n";
  return out;
}

// ---- checkpoint manifest config block ----------------------------------------

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["image_size"] = cfg.image_size;
  j["patch_size"] = cfg.patch_size;
  j["channels"] = cfg.channels;
  j["depth"] = cfg.depth;
  j["dim"] = cfg.dim;
  j["heads"] = cfg.heads;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["num_classes"] = cfg.num_classes;
  j["extra_block"] = to_string(cfg.extra_block);
  j["dropout"] = cfg.dropout;
  j["drop_path"] = cfg.drop_path;
  j["attn_scale"] = cfg.attn_scale;
  j["exclude_class_from_mean"] = cfg.exclude_class_from_mean;
  j["cb"]["variant"] = to_string(cfg.cb.variant);
  j["cb"]["site"] = to_string(cfg.cb.site);
  j["cb"]["layer_mask"] = std::vector<int>(cfg.cb.layer_mask.begin(), cfg.cb.layer_mask.end());
  j["cb"]["aggregation"] = to_string(cfg.cb.aggregation);
  j["cb"]["msa_uniform_head"] = to_string(cfg.cb.msa_uniform_head);
  j["cb"]["lambda_init"] = cfg.cb.lambda_init;
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.image_size = j.at("image_size");
  cfg.patch_size = j.at("patch_size");
  cfg.channels = j.at("channels");
  cfg.depth = j.at("depth");
  cfg.dim = j.at("dim");
  cfg.heads = j.at("heads");
  cfg.mlp_ratio = j.at("mlp_ratio");
  cfg.num_classes = j.at("num_classes");
  cfg.extra_block = extra_block_from(j.at("extra_block"));
  cfg.dropout = j.at("dropout");
  cfg.drop_path = j.at("drop_path");
  cfg.attn_scale = j.at("attn_scale");
  cfg.exclude_class_from_mean = j.at("exclude_class_from_mean");
  const auto& cb = j.at("cb");
  cfg.cb.variant = cb_variant_from(cb.at("variant"));
  cfg.cb.site = cb_site_from(cb.at("site"));
  for (int layer : cb.at("layer_mask").get<std::vector<int>>()) cfg.cb.layer_mask.insert(layer);
  cfg.cb.aggregation = aggregation_from(cb.at("aggregation"));
  cfg.cb.msa_uniform_head = uniform_head_from(cb.at("msa_uniform_head"));
  cfg.cb.lambda_init = cb.at("lambda_init");
  cfg.validate();
  return cfg;
}

}  // namespace cbvit
