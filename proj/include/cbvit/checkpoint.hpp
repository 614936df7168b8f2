#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cbvit/model.hpp"
#include "cbvit/util.hpp"

namespace cbvit {

// Checkpoints are a pair of files: <stem>.json (manifest) and <stem>.bin (one
// little-endian float32 blob). The manifest lists every named array with its
// shape and byte offset, plus the model configuration needed to rebuild it.
// save -> load -> save is byte-identical.

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

namespace detail_ckpt {

// float32 on the wire regardless of the in-memory precision; converting a
// loaded checkpoint back to float32 reproduces the same bytes.
template <typename T>
std::vector<float> to_f32(const Tensor<T>& t) {
  std::vector<float> out(t.numel());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

}  // namespace detail_ckpt

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& stem) {
  nlohmann::json manifest;
  manifest["format"] = "cbvit-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "f32";
  manifest["model"] = model_config_to_json(model.config());
  manifest["param_count"] = model.param_count();
  manifest["param_count_with_buffers"] = model.param_count(/*trainable_only=*/false);
  std::vector<char> blob;
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& p : model.params()) {
    const auto f32 = detail_ckpt::to_f32(p.value);
    nlohmann::json entry;
    entry["name"] = p.name;
    entry["shape"] = p.value.shape();
    entry["offset"] = blob.size();
    entry["trainable"] = p.trainable;
    arrays.push_back(entry);
    const auto* bytes = reinterpret_cast<const char*>(f32.data());
    blob.insert(blob.end(), bytes, bytes + f32.size() * sizeof(float));
  }
  manifest["arrays"] = arrays;
  manifest["blob_bytes"] = blob.size();
  manifest["blob_fnv1a64"] = to_hex(fnv1a64(blob.data(), blob.size()));

  std::filesystem::path bin = stem;
  bin += ".bin";
  std::filesystem::path json_path = stem;
  json_path += ".json";
  write_file_bytes(bin, blob.data(), blob.size());
  write_text_file(json_path, manifest.dump(2) + "\n");
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& stem) {
  std::filesystem::path json_path = stem;
  json_path += ".json";
  std::filesystem::path bin = stem;
  bin += ".bin";
  const auto text = read_file_bytes(json_path);
  nlohmann::json manifest = nlohmann::json::parse(text.begin(), text.end());
  if (manifest.value("format", "") != "cbvit-checkpoint")
    throw std::runtime_error("not a checkpoint manifest: " + json_path.string());
  const ModelConfig cfg = model_config_from_json(manifest.at("model"));
  Model<T> model(cfg, /*seed=*/0);

  const auto blob = read_file_bytes(bin);
  std::vector<std::string> mismatches;
  for (const auto& entry : manifest.at("arrays")) {
    const std::string name = entry.at("name");
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    Param<T>* param = nullptr;
    try {
      param = &model.param(name);
    } catch (const std::exception&) {
      mismatches.push_back(name + " (not in model)");
      continue;
    }
    if (param->value.shape() != shape) {
      mismatches.push_back(name + " (shape mismatch)");
      continue;
    }
    const std::size_t count = param->value.numel();
    if (offset + count * sizeof(float) > blob.size()) {
      mismatches.push_back(name + " (blob overrun)");
      continue;
    }
    const auto* f32 = reinterpret_cast<const float*>(blob.data() + offset);
    for (std::size_t i = 0; i < count; ++i) param->value[i] = static_cast<T>(f32[i]);
  }
  if (!mismatches.empty()) {
    std::string msg = "checkpoint/config mismatch:";
    for (const auto& m : mismatches) msg += " " + m;
    throw std::runtime_error(msg);
  }
  return model;
}

}  // namespace cbvit
