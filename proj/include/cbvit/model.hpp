#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cbvit/attention.hpp"
#include "cbvit/graph.hpp"
#include "cbvit/rng.hpp"
#include "cbvit/tensor.hpp"

namespace cbvit {

enum class CbVariant { none, cb, cb_s, cb_gate, cb_hybrid };
enum class CbSite { mlp_front, mlp_mid, mlp_end, msa, both_mlp_msa };
enum class ExtraBlock { none, msa, mlp };

struct CBPlacement {
  CbVariant variant = CbVariant::none;
  CbSite site = CbSite::mlp_end;
  std::set<int> layer_mask;  // layers where the module is active
  Aggregation aggregation = Aggregation::mean;
  UniformHead msa_uniform_head = UniformHead::none;
  double lambda_init = 1.0;  // initial value of the CB_S scaling weights

  bool active(int layer) const {
    return variant != CbVariant::none && layer_mask.count(layer) > 0;
  }
  bool at_mlp() const { return site != CbSite::msa; }
  bool at_msa() const { return site == CbSite::msa || site == CbSite::both_mlp_msa; }
};

struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int depth = 4;
  int dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int num_classes = 3;
  CBPlacement cb;
  ExtraBlock extra_block = ExtraBlock::none;
  double dropout = 0.0;
  double drop_path = 0.0;   // accepted but only rate 0 is supported
  double attn_scale = 0.0;  // 0 selects 1/sqrt(head_dim)
  bool exclude_class_from_mean = false;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid() + 1; }
  int head_dim() const { return dim / heads; }
  int hidden() const { return dim * mlp_ratio; }
  double scale() const {
    return attn_scale > 0.0 ? attn_scale : 1.0 / std::sqrt(static_cast<double>(head_dim()));
  }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw std::invalid_argument("model: image_size must be a positive multiple of patch_size");
    if (channels < 1) throw std::invalid_argument("model: channels must be positive");
    if (depth < 1) throw std::invalid_argument("model: depth must be positive");
    if (dim < 1 || heads < 1 || dim % heads != 0)
      throw std::invalid_argument("model: dim must be divisible by heads");
    if (mlp_ratio < 1) throw std::invalid_argument("model: mlp_ratio must be positive");
    if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
    if (cb.msa_uniform_head == UniformHead::replace && heads < 2)
      throw std::invalid_argument("model: replacing a head requires at least two heads");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("model: dropout out of range");
    if (drop_path != 0.0)
      throw std::invalid_argument("model: drop_path is accepted as a knob but only rate 0 is supported");
    for (int layer : cb.layer_mask)
      if (layer < 0 || layer >= depth)
        throw std::invalid_argument("model: cb layer mask entry outside [0, depth)");
  }
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // accumulated by the trainer
  bool trainable = true;
};

struct ForwardOptions {
  bool training = false;          // enables dropout
  bool param_grads = true;        // record gradients for trainable params
  bool image_grad = false;        // record gradients back to the input image
  bool record_attention = false;  // capture per-head attention matrices
  Rng* rng = nullptr;             // required when training with dropout > 0
};

template <typename T>
struct ForwardResult {
  typename Graph<T>::Id logits = -1;
  typename Graph<T>::Id images = -1;
  std::vector<typename Graph<T>::Id> param_ids;  // aligned with Model::params()
  std::vector<AttentionRecord> records;
};

// The ViT under study: patch embedding + class token + positional embedding,
// pre-norm MSA/MLP residual blocks with configurable context broadcasting, an
// optional extra trailing block, and a linear classifier on the class token.
template <typename T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    build_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  std::size_t param_count(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || p.trainable) n += p.value.numel();
    return n;
  }

  Param<T>& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p;
    throw std::runtime_error("model: no parameter named " + name);
  }

  void set_input_norm(const std::vector<T>& mean, const std::vector<T>& stdev) {
    param("input_norm.mean").value = Tensor<T>::row(std::vector<T>(mean));
    param("input_norm.std").value = Tensor<T>::row(std::vector<T>(stdev));
  }

  // images: [B, H, W, C] floats in [0, 1]
  ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& images, const ForwardOptions& opt = {}) const {
    if (images.ndim() != 4 || images.extent(1) != cfg_.image_size ||
        images.extent(2) != cfg_.image_size || images.extent(3) != cfg_.channels)
      throw std::invalid_argument("forward: image batch does not match the model config");
    if (images.extent(0) < 1) throw std::invalid_argument("forward: empty batch");
    const bool use_dropout = opt.training && cfg_.dropout > 0.0;
    if (use_dropout && opt.rng == nullptr)
      throw std::invalid_argument("forward: dropout needs an rng");

    ForwardResult<T> res;
    res.param_ids.reserve(params_.size());
    for (const auto& p : params_)
      res.param_ids.push_back(g.input(p.value, opt.param_grads && p.trainable));
    auto id = [&](const char* name) { return res.param_ids[index_of(name)]; };

    std::vector<T> nm(param_value("input_norm.mean").storage());
    std::vector<T> ns(param_value("input_norm.std").storage());

    res.images = g.input(images, opt.image_grad);
    auto x = g.normalize_channels(res.images, nm, ns);
    x = g.patchify(x, cfg_.patch_size);
    x = g.add_bias(g.matmul(x, id("patch_embed.weight")), id("patch_embed.bias"));
    x = g.concat_class(x, id("cls_token"));
    x = g.add_rows(x, id("pos_embed"));

    for (int layer = 0; layer < cfg_.depth; ++layer)
      x = block(g, x, res, layer, block_prefix(layer), /*block_type=*/layer_kind::full, opt);
    if (cfg_.extra_block == ExtraBlock::msa)
      x = block(g, x, res, cfg_.depth, "extra.", layer_kind::msa_only, opt);
    else if (cfg_.extra_block == ExtraBlock::mlp)
      x = block(g, x, res, cfg_.depth, "extra.", layer_kind::mlp_only, opt);

    x = g.layer_norm(x, id("norm.gamma"), id("norm.beta"), T(1e-6));
    auto cls = g.take_row(x, 0);
    res.logits = g.add_bias(g.matmul(cls, id("head.weight")), id("head.bias"));
    return res;
  }

  // Copy gradients recorded in the graph back into the parameter store.
  void pull_grads(const Graph<T>& g, const ForwardResult<T>& res) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].trainable) continue;
      params_[i].grad = g.grad_or_zero(res.param_ids[i]);
    }
  }

  // Per-layer CB_S scaling weights, for the dimension-scaling diagnostics.
  // With both_mlp_msa placements the MLP-site instance is reported.
  std::vector<std::pair<int, std::vector<double>>> lambda_vecs() const {
    std::vector<std::pair<int, std::vector<double>>> out;
    if (cfg_.cb.variant != CbVariant::cb_s) return out;
    for (int layer = 0; layer < cfg_.depth; ++layer) {
      if (!cfg_.cb.active(layer)) continue;
      const std::string name =
          block_prefix(layer) + (cfg_.cb.at_mlp() ? "cb_mlp.lambda" : "cb_msa.lambda");
      const Tensor<T>& v = param_value(name);
      std::vector<double> lam(v.numel());
      for (std::size_t i = 0; i < v.numel(); ++i) lam[i] = static_cast<double>(v[i]);
      out.emplace_back(layer, std::move(lam));
    }
    return out;
  }

 private:
  enum class layer_kind { full, msa_only, mlp_only };

  static std::string block_prefix(int layer) { return "blocks." + std::to_string(layer) + "."; }

  std::size_t index_of(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("model: no parameter named " + name);
    return it->second;
  }

  const Tensor<T>& param_value(const std::string& name) const {
    return params_[index_of(name)].value;
  }

  void add_param(const std::string& name, Tensor<T> value, bool trainable = true) {
    index_[name] = params_.size();
    params_.push_back(Param<T>{name, std::move(value), Tensor<T>(), trainable});
  }

  Tensor<T> trunc_normal(Rng& rng, std::vector<int> shape, double stdev = 0.02) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(rng.trunc_normal(stdev, 2.0));
    return t;
  }

  // Column counts of the attention projections per uniform-head mode; see
  // Graph::msa for the layout.
  void msa_dims(int& dq, int& dv) const {
    const int hd = cfg_.head_dim();
    switch (cfg_.cb.msa_uniform_head) {
      case UniformHead::none:
        dq = cfg_.dim;
        dv = cfg_.dim;
        break;
      case UniformHead::replace:
        dq = cfg_.dim - hd;
        dv = cfg_.dim;
        break;
      case UniformHead::append:
        dq = cfg_.dim;
        dv = cfg_.dim + hd;
        break;
    }
  }

  void build_params(Rng& rng) {
    const int d = cfg_.dim;
    const int ppc = cfg_.patch_size * cfg_.patch_size * cfg_.channels;
    add_param("patch_embed.weight", trunc_normal(rng, {ppc, d}));
    add_param("patch_embed.bias", Tensor<T>({d}));
    add_param("cls_token", trunc_normal(rng, {d}));
    add_param("pos_embed", trunc_normal(rng, {cfg_.tokens(), d}));
    int dq = 0, dv = 0;
    msa_dims(dq, dv);
    for (int layer = 0; layer < cfg_.depth; ++layer) {
      add_block_params(rng, block_prefix(layer), layer, layer_kind::full, dq, dv);
    }
    if (cfg_.extra_block == ExtraBlock::msa)
      add_block_params(rng, "extra.", cfg_.depth, layer_kind::msa_only, dq, dv);
    else if (cfg_.extra_block == ExtraBlock::mlp)
      add_block_params(rng, "extra.", cfg_.depth, layer_kind::mlp_only, dq, dv);
    add_param("norm.gamma", Tensor<T>::full({d}, T(1)));
    add_param("norm.beta", Tensor<T>({d}));
    add_param("head.weight", trunc_normal(rng, {d, cfg_.num_classes}));
    add_param("head.bias", Tensor<T>({cfg_.num_classes}));
    add_param("input_norm.mean", Tensor<T>({cfg_.channels}), /*trainable=*/false);
    add_param("input_norm.std", Tensor<T>::full({cfg_.channels}, T(1)), /*trainable=*/false);
  }

  void add_block_params(Rng& rng, const std::string& prefix, int layer, layer_kind kind,
                        int dq, int dv) {
    const int d = cfg_.dim;
    const bool cb_here = cfg_.cb.active(layer);
    if (kind != layer_kind::mlp_only) {
      add_param(prefix + "ln1.gamma", Tensor<T>::full({d}, T(1)));
      add_param(prefix + "ln1.beta", Tensor<T>({d}));
      add_param(prefix + "attn.wq", trunc_normal(rng, {d, dq}));
      add_param(prefix + "attn.bq", Tensor<T>({dq}));
      add_param(prefix + "attn.wk", trunc_normal(rng, {d, dq}));
      add_param(prefix + "attn.bk", Tensor<T>({dq}));
      add_param(prefix + "attn.wv", trunc_normal(rng, {d, dv}));
      add_param(prefix + "attn.bv", Tensor<T>({dv}));
      add_param(prefix + "attn.wo", trunc_normal(rng, {dv, d}));
      add_param(prefix + "attn.bo", Tensor<T>({d}));
      if (cb_here && cfg_.cb.variant == CbVariant::cb_s && cfg_.cb.at_msa())
        add_param(prefix + "cb_msa.lambda", Tensor<T>::full({d}, static_cast<T>(cfg_.cb.lambda_init)));
    }
    if (kind != layer_kind::msa_only) {
      add_param(prefix + "ln2.gamma", Tensor<T>::full({d}, T(1)));
      add_param(prefix + "ln2.beta", Tensor<T>({d}));
      add_param(prefix + "mlp.fc1.weight", trunc_normal(rng, {d, cfg_.hidden()}));
      add_param(prefix + "mlp.fc1.bias", Tensor<T>({cfg_.hidden()}));
      add_param(prefix + "mlp.fc2.weight", trunc_normal(rng, {cfg_.hidden(), d}));
      add_param(prefix + "mlp.fc2.bias", Tensor<T>({d}));
      if (cb_here && cfg_.cb.variant == CbVariant::cb_s && cfg_.cb.at_mlp()) {
        const int width = cfg_.cb.site == CbSite::mlp_mid ? cfg_.hidden() : d;
        add_param(prefix + "cb_mlp.lambda",
                  Tensor<T>::full({width}, static_cast<T>(cfg_.cb.lambda_init)));
      }
    }
  }

  using Id = typename Graph<T>::Id;

  Id apply_cb(Graph<T>& g, Id x, const ForwardResult<T>& res, const std::string& lambda_name) const {
    const bool excl = cfg_.exclude_class_from_mean;
    switch (cfg_.cb.variant) {
      case CbVariant::cb:
        return g.context_blend(x, cfg_.cb.aggregation, excl);
      case CbVariant::cb_s:
        return g.context_scaled(x, res.param_ids[index_of(lambda_name)], cfg_.cb.aggregation, excl);
      case CbVariant::cb_gate:
        return g.class_gate(x);
      case CbVariant::cb_hybrid:
        return g.class_hybrid(x, excl);
      case CbVariant::none:
        break;
    }
    return x;
  }

  Id block(Graph<T>& g, Id x, ForwardResult<T>& res, int layer, const std::string& prefix,
           layer_kind kind, const ForwardOptions& opt) const {
    auto id = [&](const std::string& name) { return res.param_ids[index_of(prefix + name)]; };
    const bool cb_here = cfg_.cb.active(layer);  // never true for the extra block
    if (kind != layer_kind::mlp_only) {
      const int batches = detail::token_view(g.value(x).shape()).batches;
      auto y = g.layer_norm(x, id("ln1.gamma"), id("ln1.beta"), T(1e-6));
      MsaSpec<T> spec{cfg_.heads, cfg_.head_dim(), static_cast<T>(cfg_.scale()),
                      cfg_.cb.msa_uniform_head};
      std::vector<Tensor<double>> sink;
      y = g.msa(y, id("attn.wq"), id("attn.bq"), id("attn.wk"), id("attn.bk"), id("attn.wv"),
                id("attn.bv"), id("attn.wo"), id("attn.bo"), spec,
                opt.record_attention ? &sink : nullptr);
      if (opt.record_attention && !sink.empty()) {
        const int total = static_cast<int>(sink.size()) / batches;  // heads per item
        for (std::size_t i = 0; i < sink.size(); ++i)
          res.records.push_back(
              AttentionRecord{layer, static_cast<int>(i % static_cast<std::size_t>(total)),
                              std::move(sink[i])});
      }
      if (use_dropout(opt)) y = g.dropout(y, static_cast<T>(cfg_.dropout), *opt.rng);
      if (cb_here && cfg_.cb.at_msa()) y = apply_cb(g, y, res, prefix + "cb_msa.lambda");
      x = g.add(x, y);
    }
    if (kind != layer_kind::msa_only) {
      auto z = g.layer_norm(x, id("ln2.gamma"), id("ln2.beta"), T(1e-6));
      if (cb_here && cfg_.cb.site == CbSite::mlp_front) z = apply_cb(g, z, res, prefix + "cb_mlp.lambda");
      z = g.add_bias(g.matmul(z, id("mlp.fc1.weight")), id("mlp.fc1.bias"));
      z = g.gelu(z);
      if (use_dropout(opt)) z = g.dropout(z, static_cast<T>(cfg_.dropout), *opt.rng);
      if (cb_here && cfg_.cb.site == CbSite::mlp_mid) z = apply_cb(g, z, res, prefix + "cb_mlp.lambda");
      z = g.add_bias(g.matmul(z, id("mlp.fc2.weight")), id("mlp.fc2.bias"));
      if (use_dropout(opt)) z = g.dropout(z, static_cast<T>(cfg_.dropout), *opt.rng);
      if (cb_here && (cfg_.cb.site == CbSite::mlp_end || cfg_.cb.site == CbSite::both_mlp_msa))
        z = apply_cb(g, z, res, prefix + "cb_mlp.lambda");
      x = g.add(x, z);
    }
    return x;
  }

  bool use_dropout(const ForwardOptions& opt) const { return opt.training && cfg_.dropout > 0.0; }

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace cbvit
