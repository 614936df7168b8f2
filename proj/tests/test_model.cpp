#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "cbvit/analysis.hpp"
#include "cbvit/checkpoint.hpp"
#include "cbvit/context.hpp"
#include "cbvit/gradcheck.hpp"
#include "cbvit/model.hpp"
#include "cbvit/ops.hpp"
#include "cbvit/util.hpp"

using namespace cbvit;

namespace {

ModelConfig tiny_config() {
  ModelConfig mc;
  mc.image_size = 8;
  mc.patch_size = 4;
  mc.depth = 2;
  mc.dim = 8;
  mc.heads = 2;
  mc.num_classes = 3;
  return mc;
}

template <typename T>
Tensor<T> random_images(int batch, const ModelConfig& mc, Rng& rng) {
  Tensor<T> images({batch, mc.image_size, mc.image_size, mc.channels});
  for (std::size_t i = 0; i < images.numel(); ++i) images[i] = static_cast<T>(rng.uniform());
  return images;
}

template <typename T>
Tensor<T> logits_of(const Model<T>& model, const Tensor<T>& images) {
  Graph<T> g;
  ForwardOptions opt;
  opt.param_grads = false;
  return g.value(model.forward(g, images, opt).logits);
}

}  // namespace

TEST_CASE("token counts from the patch grid") {
  ModelConfig vit;
  vit.image_size = 224;
  vit.patch_size = 16;
  vit.dim = 64;
  vit.heads = 4;
  vit.depth = 1;
  CHECK(vit.tokens() == 197);

  ModelConfig small;
  small.image_size = 32;
  small.patch_size = 16;
  small.dim = 8;
  small.heads = 2;
  small.depth = 1;
  CHECK(small.tokens() == 5);

  ModelConfig bad = tiny_config();
  bad.patch_size = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.drop_path = 0.1;  // knob exists, only rate 0 supported
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.cb.msa_uniform_head = UniformHead::replace;
  bad.heads = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny_config();
  bad.cb.layer_mask = {5};  // outside [0, depth)
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("zero patch projection leaves positional embedding plus class token") {
  auto mc = tiny_config();
  Model<double> model(mc, 42);
  model.param("patch_embed.weight").value.zero();
  model.param("patch_embed.bias").value.zero();

  // replicate the embedding pipeline on a zero image
  Graph<double> g;
  Tensor<double> zero_img({1, mc.image_size, mc.image_size, mc.channels});
  auto x = g.input(zero_img);
  x = g.patchify(x, mc.patch_size);
  x = g.add_bias(g.matmul(x, g.input(model.param("patch_embed.weight").value)),
                 g.input(model.param("patch_embed.bias").value));
  x = g.concat_class(x, g.input(model.param("cls_token").value));
  x = g.add_rows(x, g.input(model.param("pos_embed").value));
  const Tensor<double>& tokens = g.value(x);
  const Tensor<double>& pos = model.param("pos_embed").value;
  const Tensor<double>& cls = model.param("cls_token").value;
  REQUIRE(tokens.shape() == std::vector<int>{1, mc.tokens(), mc.dim});
  for (int c = 0; c < mc.dim; ++c)
    CHECK(tokens[static_cast<std::size_t>(c)] == cls[static_cast<std::size_t>(c)] + pos.at(0, c));
  for (int t = 1; t < mc.tokens(); ++t)
    for (int c = 0; c < mc.dim; ++c)
      CHECK(tokens[static_cast<std::size_t>(t * mc.dim + c)] == pos.at(t, c));
}

TEST_CASE("patchify preserves pixel placement") {
  // 4x4 image, patch 2: patch 0 holds rows 0-1 x cols 0-1 in row-major order
  Graph<double> g;
  Tensor<double> img({1, 4, 4, 1});
  for (std::size_t i = 0; i < img.numel(); ++i) img[i] = static_cast<double>(i);
  const auto& p = g.value(g.patchify(g.input(img), 2));
  REQUIRE(p.shape() == std::vector<int>{1, 4, 4});
  CHECK(p[0] == 0.0);
  CHECK(p[1] == 1.0);
  CHECK(p[2] == 4.0);
  CHECK(p[3] == 5.0);
  CHECK(p[4] == 2.0);  // patch 1 starts at column 2
}

TEST_CASE("msa: zero q/k weights give uniform attention and mean-pooled values") {
  Rng rng(7);
  const int n = 5, d = 6, heads = 2, hd = 3;
  Graph<double> g;
  Tensor<double> x({n, d});
  for (std::size_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-1.0, 1.0);

  Tensor<double> wv({d, d});
  for (std::size_t i = 0; i < wv.numel(); ++i) wv[i] = rng.uniform(-1.0, 1.0);
  Tensor<double> eye({d, d});
  for (int i = 0; i < d; ++i) eye.at(i, i) = 1.0;

  auto xid = g.input(x);
  MsaSpec<double> spec{heads, hd, 1.0, UniformHead::none};
  std::vector<Tensor<double>> sink;
  auto y = g.msa(xid, g.input(Tensor<double>({d, d})), g.input(Tensor<double>({d})),
                 g.input(Tensor<double>({d, d})), g.input(Tensor<double>({d})), g.input(wv),
                 g.input(Tensor<double>({d})), g.input(eye), g.input(Tensor<double>({d})), spec,
                 &sink);

  // all attention matrices are exactly uniform
  REQUIRE(sink.size() == 2);
  for (const auto& a : sink)
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(1.0 / n).epsilon(1e-15));

  // with wo = identity, each output row is the column mean of V = x wv
  Tensor<double> v({n, d});
  detail::gemm_acc(x.data(), wv.data(), v.data(), n, d, d);
  const Tensor<double>& out = g.value(y);
  for (int c = 0; c < d; ++c) {
    double mean = 0.0;
    for (int r = 0; r < n; ++r) mean += v.at(r, c);
    mean /= n;
    for (int r = 0; r < n; ++r) CHECK(out.at(r, c) == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("msa: recorded attention matches the standalone softmax oracle") {
  Rng rng(19);
  const int n = 5, d = 4;
  Tensor<double> x({n, d}), wq({d, d}), wk({d, d}), wv({d, d}), wo({d, d});
  for (auto* t : {&x, &wq, &wk, &wv, &wo})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1.0, 1.0);
  Tensor<double> bq({d}), bk({d}), bv({d}), bo({d});
  for (auto* t : {&bq, &bk, &bv, &bo})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-0.5, 0.5);

  const double scale = 0.5;
  Graph<double> g;
  MsaSpec<double> spec{1, d, scale, UniformHead::none};
  std::vector<Tensor<double>> sink;
  g.msa(g.input(x), g.input(wq), g.input(bq), g.input(wk), g.input(bk), g.input(wv), g.input(bv),
        g.input(wo), g.input(bo), spec, &sink);
  REQUIRE(sink.size() == 1);

  // recompute scores by hand and push them through the standalone softmax
  Tensor<double> q({n, d}), k({n, d});
  detail::gemm_acc(x.data(), wq.data(), q.data(), n, d, d);
  detail::gemm_acc(x.data(), wk.data(), k.data(), n, d, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) {
      q.at(r, c) += bq[static_cast<std::size_t>(c)];
      k.at(r, c) += bk[static_cast<std::size_t>(c)];
    }
  Tensor<double> scores({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int c = 0; c < d; ++c) acc += q.at(i, c) * k.at(j, c);
      scores.at(i, j) = acc;
    }
  auto expected = softmax_rows(scores, scale);
  for (std::size_t i = 0; i < expected.numel(); ++i)
    CHECK(sink[0][i] == doctest::Approx(expected[i]).epsilon(1e-12));

  // row-stochastic within 1e-12 in 64-bit
  for (int r = 0; r < n; ++r) {
    double sum = 0.0;
    for (int c = 0; c < n; ++c) {
      CHECK(sink[0].at(r, c) >= 0.0);
      sum += sink[0].at(r, c);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("msa uniform head: append with zero value slice contributes nothing") {
  Rng rng(23);
  const int n = 4, d = 4, heads = 2, hd = 2;
  Tensor<double> x({n, d}), wq({d, d}), wk({d, d}), bq({d}), bk({d});
  for (auto* t : {&x, &wq, &wk})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1.0, 1.0);
  for (auto* t : {&bq, &bk})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-0.5, 0.5);

  // append-mode weights with the uniform head's slices zeroed
  Tensor<double> wv_app({d, d + hd}), bv_app({d + hd}), wo_app({d + hd, d});
  Tensor<double> wv_none({d, d}), bv_none({d}), wo_none({d, d});
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) {
      const double v = rng.uniform(-1.0, 1.0);
      wv_app.at(r, c) = v;
      wv_none.at(r, c) = v;
    }
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) {
      const double v = rng.uniform(-1.0, 1.0);
      wo_app.at(r, c) = v;
      wo_none.at(r, c) = v;
    }
  Tensor<double> bo({d});

  Graph<double> g1, g2;
  MsaSpec<double> app{heads, hd, 1.0, UniformHead::append};
  MsaSpec<double> none{heads, hd, 1.0, UniformHead::none};
  auto y1 = g1.msa(g1.input(x), g1.input(wq), g1.input(bq), g1.input(wk), g1.input(bk),
                   g1.input(wv_app), g1.input(bv_app), g1.input(wo_app), g1.input(bo), app);
  auto y2 = g2.msa(g2.input(x), g2.input(wq), g2.input(bq), g2.input(wk), g2.input(bk),
                   g2.input(wv_none), g2.input(bv_none), g2.input(wo_none), g2.input(bo), none);
  const Tensor<double>& a = g1.value(y1);
  const Tensor<double>& b = g2.value(y2);
  CHECK(std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0);
}

TEST_CASE("msa uniform head: replace removes q/k parameters for head 0") {
  auto mc = tiny_config();
  mc.cb.msa_uniform_head = UniformHead::replace;
  Model<double> model(mc, 1);
  // q/k projections shrink by one head slice, values keep full width
  CHECK(model.param("blocks.0.attn.wq").value.shape() ==
        std::vector<int>{mc.dim, mc.dim - mc.head_dim()});
  CHECK(model.param("blocks.0.attn.wv").value.shape() == std::vector<int>{mc.dim, mc.dim});

  // the uniform head's record is exactly 1/N everywhere
  Graph<double> g;
  Rng rng(3);
  ForwardOptions opt;
  opt.param_grads = false;
  opt.record_attention = true;
  const auto res = model.forward(g, random_images<double>(1, mc, rng), opt);
  bool saw_uniform = false;
  for (const auto& rec : res.records) {
    if (rec.head != 0) continue;
    saw_uniform = true;
    for (std::size_t i = 0; i < rec.a.numel(); ++i)
      CHECK(rec.a[i] == doctest::Approx(1.0 / mc.tokens()).epsilon(1e-15));
  }
  CHECK(saw_uniform);
}

TEST_CASE("mlp placement: Mid and End are output-identical for cb") {
  auto base = tiny_config();
  base.cb.variant = CbVariant::cb;
  base.cb.layer_mask = {0, 1};

  auto mid_cfg = base;
  mid_cfg.cb.site = CbSite::mlp_mid;
  auto end_cfg = base;
  end_cfg.cb.site = CbSite::mlp_end;

  Rng rng(77);
  SUBCASE("64-bit: max abs gap < 1e-10 on 32 random inputs") {
    Model<double> mid(mid_cfg, 5);
    Model<double> end(end_cfg, 5);
    const auto images = random_images<double>(32, base, rng);
    const auto lm = logits_of(mid, images);
    const auto le = logits_of(end, images);
    double gap = 0.0;
    for (std::size_t i = 0; i < lm.numel(); ++i) gap = std::max(gap, std::abs(lm[i] - le[i]));
    CHECK(gap < 1e-10);
  }
  SUBCASE("32-bit: max abs gap < 1e-5 on 32 random inputs") {
    Model<float> mid(mid_cfg, 5);
    Model<float> end(end_cfg, 5);
    const auto images = random_images<float>(32, base, rng);
    const auto lm = logits_of(mid, images);
    const auto le = logits_of(end, images);
    float gap = 0.0f;
    for (std::size_t i = 0; i < lm.numel(); ++i) gap = std::max(gap, std::abs(lm[i] - le[i]));
    CHECK(gap < 1e-5f);
  }
}

TEST_CASE("cb at End equals cb applied to the plain MLP output") {
  Rng rng(31);
  const int n = 5, d = 4, h = 8;
  Tensor<double> x({n, d}), w1({d, h}), b1({h}), w2({h, d}), b2({d});
  for (auto* t : {&x, &w1, &w2})
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = rng.uniform(-1.0, 1.0);
  for (std::size_t i = 0; i < b1.numel(); ++i) b1[i] = rng.uniform(-0.2, 0.2);
  for (std::size_t i = 0; i < b2.numel(); ++i) b2[i] = rng.uniform(-0.2, 0.2);

  auto mlp = [&](Graph<double>& g, Graph<double>::Id in, bool with_cb) {
    auto z = g.add_bias(g.matmul(in, g.input(w1)), g.input(b1));
    z = g.gelu(z);
    z = g.add_bias(g.matmul(z, g.input(w2)), g.input(b2));
    if (with_cb) z = g.context_blend(z, Aggregation::mean);
    return z;
  };
  Graph<double> g1, g2;
  const auto plain = g1.value(mlp(g1, g1.input(x), false));
  const auto fused = g2.value(mlp(g2, g2.input(x), true));
  const auto composed = cb(plain);
  for (std::size_t i = 0; i < fused.numel(); ++i)
    CHECK(fused[i] == doctest::Approx(composed[i]).epsilon(1e-15));
}

TEST_CASE("vit_forward shape and empty-mask bit-identity") {
  auto mc = tiny_config();
  Rng rng(11);
  const auto images = random_images<double>(3, mc, rng);

  Model<double> vanilla(mc, 9);
  const auto l0 = logits_of(vanilla, images);
  CHECK(l0.shape() == std::vector<int>{3, mc.num_classes});

  auto masked = mc;
  masked.cb.variant = CbVariant::cb;
  masked.cb.layer_mask = {};  // cb configured but active nowhere
  Model<double> off(masked, 9);
  const auto l1 = logits_of(off, images);
  CHECK(std::memcmp(l0.data(), l1.data(), l0.numel() * sizeof(double)) == 0);
}

TEST_CASE("depth-1 model with zero weights records uniform attention, entropy ln N") {
  ModelConfig mc = tiny_config();
  mc.depth = 1;
  Model<double> model(mc, 3);
  for (auto& p : model.params())
    if (p.name != "input_norm.std") p.value.zero();
  model.param("input_norm.std").value.fill(1.0);

  Graph<double> g;
  Rng rng(2);
  ForwardOptions opt;
  opt.param_grads = false;
  opt.record_attention = true;
  const auto res = model.forward(g, random_images<double>(2, mc, rng), opt);
  REQUIRE(!res.records.empty());
  const auto profile =
      entropy_profile(res.records, {.class_token = false, .last_layers = 0}, "zero");
  REQUIRE(profile.per_layer.size() == 1);
  CHECK(profile.per_layer[0] == doctest::Approx(std::log(static_cast<double>(mc.tokens())))
                                    .epsilon(1e-12));
}

TEST_CASE("every recorded attention row is a probability distribution") {
  auto mc = tiny_config();
  mc.cb.variant = CbVariant::cb_s;
  mc.cb.site = CbSite::both_mlp_msa;
  mc.cb.layer_mask = {0, 1};
  mc.cb.msa_uniform_head = UniformHead::append;
  Model<double> model(mc, 21);
  Graph<double> g;
  Rng rng(4);
  ForwardOptions opt;
  opt.param_grads = false;
  opt.record_attention = true;
  const auto res = model.forward(g, random_images<double>(2, mc, rng), opt);
  // batch of 2, (heads + appended uniform) per layer, depth layers
  CHECK(res.records.size() ==
        static_cast<std::size_t>(2 * (mc.heads + 1) * mc.depth));
  for (const auto& rec : res.records) {
    for (int r = 0; r < rec.a.extent(0); ++r) {
      double sum = 0.0;
      for (int c = 0; c < rec.a.extent(1); ++c) {
        CHECK(rec.a.at(r, c) >= 0.0);
        sum += rec.a.at(r, c);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("32-bit forward still records near-stochastic attention rows") {
  auto mc = tiny_config();
  Model<float> model(mc, 8);
  Graph<float> g;
  Rng rng(6);
  ForwardOptions opt;
  opt.param_grads = false;
  opt.record_attention = true;
  const auto res = model.forward(g, random_images<float>(2, mc, rng), opt);
  REQUIRE(!res.records.empty());
  for (const auto& rec : res.records)
    for (int r = 0; r < rec.a.extent(0); ++r) {
      double sum = 0.0;
      for (int c = 0; c < rec.a.extent(1); ++c) sum += rec.a.at(r, c);
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("full-model gradients match finite differences across variants") {
  // tiny config keeps each check fast; acceptance runs the 50-coordinate pass
  auto run = [](ModelConfig mc, std::uint64_t seed) {
    Model<double> model(mc, seed);
    const auto report = model_gradcheck(model, seed + 1, /*coords_per_tensor=*/6);
    CAPTURE(report.worst_tensor);
    CHECK(report.worst_rel_error < 1e-4);
  };

  auto mc = tiny_config();
  run(mc, 100);

  mc = tiny_config();
  mc.cb.variant = CbVariant::cb;
  mc.cb.site = CbSite::mlp_end;
  mc.cb.layer_mask = {0, 1};
  run(mc, 101);

  mc.cb.variant = CbVariant::cb_s;
  mc.cb.site = CbSite::both_mlp_msa;
  run(mc, 102);

  mc = tiny_config();
  mc.cb.variant = CbVariant::cb_gate;
  mc.cb.site = CbSite::mlp_mid;
  mc.cb.layer_mask = {1};
  run(mc, 103);

  mc = tiny_config();
  mc.cb.variant = CbVariant::cb_hybrid;
  mc.cb.site = CbSite::msa;
  mc.cb.layer_mask = {0};
  run(mc, 104);

  mc = tiny_config();
  mc.cb.variant = CbVariant::cb;
  mc.cb.layer_mask = {0};
  mc.cb.aggregation = Aggregation::max;
  run(mc, 105);

  mc = tiny_config();
  mc.cb.msa_uniform_head = UniformHead::append;
  run(mc, 106);

  mc = tiny_config();
  mc.cb.msa_uniform_head = UniformHead::replace;
  run(mc, 107);

  mc = tiny_config();
  mc.extra_block = ExtraBlock::msa;
  run(mc, 108);

  mc = tiny_config();
  mc.extra_block = ExtraBlock::mlp;
  mc.exclude_class_from_mean = true;
  mc.cb.variant = CbVariant::cb;
  mc.cb.layer_mask = {0, 1};
  run(mc, 109);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "cbvit_ckpt_test";
  fs::create_directories(dir);

  auto mc = tiny_config();
  mc.cb.variant = CbVariant::cb_s;
  mc.cb.layer_mask = {0, 1};
  Model<float> model(mc, 55);
  save_checkpoint(model, dir / "a");
  Model<float> loaded = load_checkpoint<float>(dir / "a");
  save_checkpoint(loaded, dir / "b");

  const auto bytes_a = read_file_bytes(dir / "a.bin");
  const auto bytes_b = read_file_bytes(dir / "b.bin");
  REQUIRE(bytes_a.size() == bytes_b.size());
  CHECK(std::memcmp(bytes_a.data(), bytes_b.data(), bytes_a.size()) == 0);
  CHECK(read_file_bytes(dir / "a.json") == read_file_bytes(dir / "b.json"));

  // double-precision load then save reproduces the same float blob too
  Model<double> wide = load_checkpoint<double>(dir / "a");
  save_checkpoint(wide, dir / "c");
  CHECK(read_file_bytes(dir / "c.bin") == bytes_a);

  // tampered manifest: mismatching arrays are listed by name
  auto manifest = read_file_bytes(dir / "a.json");
  std::string text(manifest.begin(), manifest.end());
  const auto pos = text.find("\"dim\": 8");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 8, "\"dim\": 4");
  write_text_file(dir / "a.json", text);
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir / "a"),
                       doctest::Contains("patch_embed.weight"), std::runtime_error);
  fs::remove_all(dir);
}
