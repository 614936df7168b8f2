#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cbvit/model.hpp"
#include "cbvit/train.hpp"

namespace cbvit {

// Flat key=value configuration with dotted keys; override flags map 1:1 onto
// file keys. Every key must be declared in the schema — unknown keys are
// rejected by name, never ignored.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap default_config();
bool is_known_key(const std::string& key);
const std::vector<std::string>& known_keys();

// Parses `key = value` lines; '#' starts a comment. Unknown key -> error.
ConfigMap parse_config_text(const std::string& text, const std::string& origin);
ConfigMap load_config_file(const std::filesystem::path& path);

// Applies overrides on top (validating keys) and fills unset keys with
// defaults, returning the fully resolved map.
ConfigMap resolve_config(ConfigMap file_values,
                         const std::vector<std::pair<std::string, std::string>>& overrides);

// Typed getters; errors name the key and offending value.
long cfg_int(const ConfigMap& cfg, const std::string& key);
std::uint64_t cfg_u64(const ConfigMap& cfg, const std::string& key);
double cfg_double(const ConfigMap& cfg, const std::string& key);
bool cfg_bool(const ConfigMap& cfg, const std::string& key);
const std::string& cfg_str(const ConfigMap& cfg, const std::string& key);

ModelConfig make_model_config(const ConfigMap& cfg);
TrainConfig make_train_config(const ConfigMap& cfg);

// Enum <-> string, shared between the config schema and checkpoint manifests.
std::string to_string(CbVariant v);
std::string to_string(CbSite v);
std::string to_string(Aggregation v);
std::string to_string(UniformHead v);
std::string to_string(ExtraBlock v);
std::string to_string(Precision v);
CbVariant cb_variant_from(const std::string& s);
CbSite cb_site_from(const std::string& s);
Aggregation aggregation_from(const std::string& s);
UniformHead uniform_head_from(const std::string& s);
ExtraBlock extra_block_from(const std::string& s);
Precision precision_from(const std::string& s);

// "all", "upper_half", "lower_half", "none", or a comma list of layer indices.
std::set<int> parse_layer_mask(const std::string& spec, int depth);

// Serialize a resolved config as a loadable config file body.
std::string config_to_text(const ConfigMap& cfg);

}  // namespace cbvit
