#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "cbvit/dataset.hpp"
#include "cbvit/model.hpp"
#include "cbvit/train.hpp"
#include "cbvit/util.hpp"
#include "oracles.hpp"

using namespace cbvit;

namespace {

ModelConfig micro_model() {
  ModelConfig mc;
  mc.image_size = 32;
  mc.patch_size = 8;
  mc.depth = 2;
  mc.dim = 16;
  mc.heads = 2;
  mc.num_classes = 3;
  return mc;
}

TrainConfig micro_train(int epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 32;
  tc.base_lr = 1e-3;
  tc.warmup_epochs = 0;
  tc.seed = 11;
  tc.precision = Precision::f64;
  return tc;
}

}  // namespace

TEST_CASE("synthetic dataset: determinism and balance") {
  const auto a = make_synthetic_dataset(123, 90, 32, 3);
  const auto b = make_synthetic_dataset(123, 90, 32, 3);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  const auto c = make_synthetic_dataset(124, 90, 32, 3);
  CHECK(a.pixels != c.pixels);

  const auto balanced = make_synthetic_dataset(7, 300, 32, 3);
  std::map<int, int> counts;
  for (int label : balanced.labels) ++counts[label];
  REQUIRE(counts.size() == 3);
  for (const auto& [label, count] : counts) CHECK(count == 100);

  // n not divisible by classes: counts within +-1
  const auto uneven = make_synthetic_dataset(7, 100, 32, 3);
  counts.clear();
  for (int label : uneven.labels) ++counts[label];
  int lo = 1000, hi = 0;
  for (const auto& [label, count] : counts) {
    lo = std::min(lo, count);
    hi = std::max(hi, count);
  }
  CHECK(hi - lo <= 1);

  CHECK_THROWS_AS(make_synthetic_dataset(1, 10, 32, 1), std::invalid_argument);
  CHECK_THROWS_AS(make_synthetic_dataset(1, 2, 32, 3), std::invalid_argument);
  CHECK_THROWS_AS(make_synthetic_dataset(1, 10, 8, 3), std::invalid_argument);
}

TEST_CASE("synthetic dataset: noise-free images classified at 100% by the mask rule") {
  const int side = 32;
  const auto ds = make_synthetic_dataset(5, 30, side, 3, /*noise_level=*/0);

  // enumerate the generator's own geometry grid once
  const int margin = static_cast<int>(synth::kCenterMarginFrac * side);
  const int smin = static_cast<int>(synth::kMinHalfSizeFrac * side);
  const int smax = static_cast<int>(synth::kMaxHalfSizeFrac * side);
  struct Candidate {
    int cls;
    std::vector<std::uint8_t> mask;
  };
  std::vector<Candidate> candidates;
  for (int cls = 0; cls < 3; ++cls)
    for (int cx = margin; cx <= side - 1 - margin; ++cx)
      for (int cy = margin; cy <= side - 1 - margin; ++cy)
        for (int s = smin; s <= smax; ++s)
          candidates.push_back({cls, synth::shape_mask(cls, side, cx, cy, s)});

  int correct = 0;
  for (int i = 0; i < ds.count(); ++i) {
    const std::uint8_t* img = ds.image(i);
    // channel 0 takes exactly two values: bg + tint and fg + tint
    std::uint8_t v1 = img[0], v2 = img[0];
    for (int p = 0; p < side * side; ++p) {
      v1 = std::min(v1, img[static_cast<std::size_t>(p) * 3]);
      v2 = std::max(v2, img[static_cast<std::size_t>(p) * 3]);
    }
    REQUIRE(v1 != v2);
    std::vector<std::uint8_t> hi_mask(static_cast<std::size_t>(side) * side);
    std::vector<std::uint8_t> lo_mask(static_cast<std::size_t>(side) * side);
    for (int p = 0; p < side * side; ++p) {
      hi_mask[static_cast<std::size_t>(p)] = img[static_cast<std::size_t>(p) * 3] == v2;
      lo_mask[static_cast<std::size_t>(p)] = img[static_cast<std::size_t>(p) * 3] == v1;
    }
    int predicted = -1;
    for (const auto& cand : candidates) {
      if (cand.mask == hi_mask || cand.mask == lo_mask) {
        predicted = cand.cls;
        break;
      }
    }
    correct += predicted == ds.labels[static_cast<std::size_t>(i)];
  }
  CHECK(correct == ds.count());
}

TEST_CASE("synthetic dataset: a linear probe stays at or below 70% held-out") {
  const auto train_set = make_synthetic_dataset(1001, 2000, 32, 3);
  const auto eval_set = make_synthetic_dataset(2002, 500, 32, 3);

  // multinomial logistic regression on raw pixels, full-batch gradient descent
  const int dim = 32 * 32 * 3;
  const int classes = 3;
  const int n = train_set.count();
  std::vector<double> w(static_cast<std::size_t>(dim) * classes, 0.0);
  std::vector<double> bias(classes, 0.0);

  std::vector<double> feats(static_cast<std::size_t>(n) * dim);
  for (int i = 0; i < n; ++i)
    for (int p = 0; p < dim; ++p)
      feats[static_cast<std::size_t>(i) * dim + p] = train_set.image(i)[p] / 255.0;

  std::vector<double> logits(static_cast<std::size_t>(n) * classes);
  std::vector<double> gw(w.size()), gb(bias.size());
  for (int iter = 0; iter < 200; ++iter) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      const double* x = &feats[static_cast<std::size_t>(i) * dim];
      double* z = &logits[static_cast<std::size_t>(i) * classes];
      for (int c = 0; c < classes; ++c) {
        double acc = bias[static_cast<std::size_t>(c)];
        for (int p = 0; p < dim; ++p) acc += x[p] * w[static_cast<std::size_t>(p) * classes + c];
        z[c] = acc;
      }
      const double m = std::max({z[0], z[1], z[2]});
      double sum = 0.0;
      for (int c = 0; c < classes; ++c) sum += std::exp(z[c] - m);
      for (int c = 0; c < classes; ++c) {
        const double p_c = std::exp(z[c] - m) / sum;
        const double delta = (p_c - (c == train_set.labels[static_cast<std::size_t>(i)])) / n;
        gb[static_cast<std::size_t>(c)] += delta;
        for (int p = 0; p < dim; ++p)
          gw[static_cast<std::size_t>(p) * classes + c] += delta * x[p];
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= 2.0 * gw[j];
    for (std::size_t j = 0; j < bias.size(); ++j) bias[j] -= 2.0 * gb[j];
  }

  int hits = 0;
  for (int i = 0; i < eval_set.count(); ++i) {
    double best = -1e300;
    int arg = 0;
    for (int c = 0; c < classes; ++c) {
      double acc = bias[static_cast<std::size_t>(c)];
      for (int p = 0; p < dim; ++p)
        acc += (eval_set.image(i)[p] / 255.0) * w[static_cast<std::size_t>(p) * classes + c];
      if (acc > best) {
        best = acc;
        arg = c;
      }
    }
    hits += arg == eval_set.labels[static_cast<std::size_t>(i)];
  }
  const double acc = static_cast<double>(hits) / eval_set.count();
  MESSAGE("linear probe held-out accuracy: ", acc);
  CHECK(acc <= 0.70);
}

TEST_CASE("dataset file round-trip") {
  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "cbvit_ds_test.cbds";
  const auto ds = make_synthetic_dataset(9, 24, 32, 4);
  save_dataset(ds, path);
  const auto loaded = load_dataset(path);
  CHECK(loaded.image_size == ds.image_size);
  CHECK(loaded.num_classes == ds.num_classes);
  CHECK(loaded.pixels == ds.pixels);
  CHECK(loaded.labels == ds.labels);
  // saving the loaded copy reproduces the same bytes
  const auto path2 = fs::temp_directory_path() / "cbvit_ds_test2.cbds";
  save_dataset(loaded, path2);
  CHECK(read_file_bytes(path) == read_file_bytes(path2));
  fs::remove(path);
  fs::remove(path2);

  CHECK_THROWS_AS(load_dataset("/nonexistent/nope.cbds"), std::runtime_error);
}

TEST_CASE("adamw_step examples") {
  // zero gradient, zero decay: parameters untouched
  {
    Tensor<double> p = Tensor<double>::row({1.0, -2.0, 3.0});
    Tensor<double> g({3}), m({3}), v({3});
    adamw_step(p, g, m, v, 1, 0.1, 0.9, 0.999, 0.0);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
    CHECK(p[2] == 3.0);
  }
  // zero gradient with decay: exact (1 - lr wd) shrink
  {
    Tensor<double> p = Tensor<double>::row({1.0, -2.0, 3.0});
    Tensor<double> g({3}), m({3}), v({3});
    adamw_step(p, g, m, v, 1, 0.1, 0.9, 0.999, 0.05);
    CHECK(p[0] == doctest::Approx(1.0 * (1 - 0.005)).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(-2.0 * (1 - 0.005)).epsilon(1e-15));
    CHECK(p[2] == doctest::Approx(3.0 * (1 - 0.005)).epsilon(1e-15));
  }
  // constant gradient: the update converges to -lr sign(g)
  {
    Tensor<double> p = Tensor<double>::row({0.0});
    Tensor<double> g = Tensor<double>::row({0.7});
    Tensor<double> m({1}), v({1});
    double prev = p[0];
    double step_size = 0.0;
    for (long t = 1; t <= 400; ++t) {
      adamw_step(p, g, m, v, t, 0.01, 0.9, 0.999, 0.0);
      step_size = prev - p[0];
      prev = p[0];
    }
    CHECK(step_size == doctest::Approx(0.01).epsilon(1e-4));  // -lr * sign(+)
  }
  // shape mismatch
  {
    Tensor<double> p({3}), g({2}), m({3}), v({3});
    CHECK_THROWS_AS(adamw_step(p, g, m, v, 1, 0.1, 0.9, 0.999, 0.0), std::invalid_argument);
  }
}

TEST_CASE("adamw with wd=0 tracks the straight-line Adam reference for 100 steps") {
  Rng rng(91);
  const int n = 16;
  std::vector<double> theta_ref(n);
  Tensor<double> theta({n});
  for (int i = 0; i < n; ++i) {
    theta_ref[static_cast<std::size_t>(i)] = rng.uniform(-1.0, 1.0);
    theta[static_cast<std::size_t>(i)] = theta_ref[static_cast<std::size_t>(i)];
  }
  Tensor<double> m({n}), v({n});
  oracle::ReferenceAdam ref;
  for (long t = 1; t <= 100; ++t) {
    std::vector<double> grad(n);
    for (int i = 0; i < n; ++i) grad[static_cast<std::size_t>(i)] = rng.uniform(-2.0, 2.0);
    Tensor<double> gt({n}, std::vector<double>(grad));
    adamw_step(theta, gt, m, v, t, 3e-3, 0.9, 0.999, 0.0);
    ref.step(theta_ref, grad, 3e-3, 0.9, 0.999);
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(theta[static_cast<std::size_t>(i)] - theta_ref[static_cast<std::size_t>(i)]) < 1e-10);
  }
}

TEST_CASE("cosine_lr examples") {
  CHECK(cosine_lr(100, 1000, 100, 2e-3, 1e-5) == doctest::Approx(2e-3).epsilon(1e-15));
  CHECK(cosine_lr(1000, 1000, 100, 2e-3, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(cosine_lr(550, 1000, 100, 2e-3, 1e-5) ==
        doctest::Approx((2e-3 + 1e-5) / 2).epsilon(1e-12));
  CHECK(cosine_lr(0, 1000, 100, 2e-3, 1e-5) == 0.0);
  CHECK(cosine_lr(50, 1000, 100, 2e-3, 1e-5) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(-1, 1000, 100, 2e-3), std::invalid_argument);
}

TEST_CASE("evaluate: tie-breaking and top-k semantics") {
  // one-hot logits at the truth: rank 0
  std::vector<double> onehot{0.0, 1.0, 0.0};
  CHECK(detail_train::label_rank(onehot.data(), 3, 1) == 0);
  // constant logits: ties resolve to the lowest class index
  std::vector<double> flat{0.5, 0.5, 0.5};
  CHECK(detail_train::label_rank(flat.data(), 3, 0) == 0);
  CHECK(detail_train::label_rank(flat.data(), 3, 1) == 1);
  CHECK(detail_train::label_rank(flat.data(), 3, 2) == 2);

  // constant-logit model on a balanced set: top1 = 1/3, top-k=classes -> 1
  auto mc = micro_model();
  Model<double> model(mc, 1);
  for (auto& p : model.params())
    if (p.name != "input_norm.std") p.value.zero();
  model.param("input_norm.std").value.fill(1.0);
  const auto ds = make_synthetic_dataset(3, 90, 32, 3);
  const auto ev = evaluate(model, ds);
  CHECK(ev.top1 == doctest::Approx(1.0 / 3).epsilon(1e-12));
  const auto ev3 = evaluate(model, ds, /*k=*/3);
  CHECK(ev3.topk == 1.0);
  // k larger than the class count clamps
  CHECK(evaluate(model, ds, 99).topk == 1.0);

  SyntheticDataset empty;
  empty.image_size = 32;
  empty.num_classes = 3;
  CHECK_THROWS_AS(evaluate(model, empty), std::invalid_argument);
}

TEST_CASE("fgsm_attack bounds") {
  auto mc = micro_model();
  Model<double> model(mc, 77);
  const auto ds = make_synthetic_dataset(13, 8, 32, 3);
  std::vector<double> mean, stdev;
  ds.channel_stats(mean, stdev);
  model.set_input_norm(mean, stdev);

  const auto batch = ds.batch<double>({0});
  Tensor<double> image({32, 32, 3}, std::vector<double>(batch.storage()));

  // epsilon 0: identical image
  const auto same = fgsm_attack(model, image, ds.labels[0], 0.0);
  CHECK(std::memcmp(same.data(), image.data(), image.numel() * sizeof(double)) == 0);

  const double eps = 4.0 / 255.0;
  const auto adv = fgsm_attack(model, image, ds.labels[0], eps);
  int exact = 0, clipped = 0, zero_grad = 0;
  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double delta = std::abs(adv[i] - image[i]);
    CHECK(delta <= eps + 1e-15);  // infinity-norm bound holds everywhere
    if (std::abs(delta - eps) < 1e-15) {
      ++exact;
    } else if (adv[i] == 0.0 || adv[i] == 1.0) {
      ++clipped;  // the clip boundary absorbed part of the step
    } else {
      ++zero_grad;  // sign(0) pixels stay put
      CHECK(delta == 0.0);
    }
  }
  CHECK(exact > 0);  // interior pixels with nonzero gradient move by exactly eps
}

TEST_CASE("fgsm is a first-order ascent direction in the majority of cases") {
  auto mc = micro_model();
  Model<double> model(mc, 99);
  const auto ds = make_synthetic_dataset(31, 100, 32, 3);
  std::vector<double> mean, stdev;
  ds.channel_stats(mean, stdev);
  model.set_input_norm(mean, stdev);

  auto loss_of = [&](const Tensor<double>& img, int label) {
    Tensor<double> batch({1, 32, 32, 3}, std::vector<double>(img.storage()));
    Graph<double> g;
    ForwardOptions opt;
    opt.param_grads = false;
    const auto res = model.forward(g, batch, opt);
    return static_cast<double>(g.value(g.cross_entropy(res.logits, {label}))[0]);
  };

  int ascended = 0;
  for (int i = 0; i < 100; ++i) {
    const auto batch = ds.batch<double>({i});
    Tensor<double> image({32, 32, 3}, std::vector<double>(batch.storage()));
    const int label = ds.labels[static_cast<std::size_t>(i)];
    const auto adv = fgsm_attack(model, image, label, 1e-3);
    if (loss_of(adv, label) >= loss_of(image, label)) ++ascended;
  }
  CHECK(ascended > 50);
}

TEST_CASE("center_occlusion examples") {
  Tensor<double> image({8, 8, 1});
  for (std::size_t i = 0; i < image.numel(); ++i) image[i] = 1.0 + static_cast<double>(i);

  const auto untouched = center_occlusion(image, 0.0);
  CHECK(std::memcmp(untouched.data(), image.data(), image.numel() * sizeof(double)) == 0);

  const auto blank = center_occlusion(image, 1.0);
  for (std::size_t i = 0; i < blank.numel(); ++i) CHECK(blank[i] == 0.0);

  // 32x32 at fraction 0.5: exactly the centered 16x16 block, nothing else
  Tensor<double> big({32, 32, 3});
  big.fill(7.0);
  const auto occluded = center_occlusion(big, 0.5);
  int zeroed = 0;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = occluded[(static_cast<std::size_t>(r) * 32 + c) * 3 + ch];
        const bool inside = r >= 8 && r < 24 && c >= 8 && c < 24;
        CHECK(v == (inside ? 0.0 : 7.0));
        zeroed += v == 0.0;
      }
  CHECK(zeroed == 16 * 16 * 3);
}

TEST_CASE("train: lr = 0 leaves weights bit-identical") {
  auto mc = micro_model();
  Model<double> model(mc, 5);
  const auto before = model.params();
  auto tc = micro_train(2);
  tc.base_lr = 0.0;
  tc.weight_decay = 0.05;
  const auto ds = make_synthetic_dataset(17, 60, 32, 3);
  train(model, tc, ds);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (!before[i].trainable) continue;
    const auto& now = model.params()[i].value;
    CHECK(std::memcmp(now.data(), before[i].value.data(), now.numel() * sizeof(double)) == 0);
  }
}

TEST_CASE("train: fixed seed reruns are bit-identical") {
  const auto ds = make_synthetic_dataset(29, 60, 32, 3);
  auto run = [&]() {
    Model<double> model(micro_model(), 5);
    auto out = train(model, micro_train(2), ds);
    std::pair<std::vector<MetricsRecord>, std::vector<Param<double>>> result{out.metrics,
                                                                             model.params()};
    return result;
  };
  const auto a = run();
  const auto b = run();
  REQUIRE(a.first.size() == b.first.size());
  for (std::size_t e = 0; e < a.first.size(); ++e) {
    CHECK(std::memcmp(&a.first[e].train_loss, &b.first[e].train_loss, sizeof(double)) == 0);
    CHECK(std::memcmp(&a.first[e].top1, &b.first[e].top1, sizeof(double)) == 0);
    CHECK(a.first[e].layer_entropy == b.first[e].layer_entropy);
    CHECK(a.first[e].layer_distance == b.first[e].layer_distance);
  }
  for (std::size_t i = 0; i < a.second.size(); ++i)
    CHECK(std::memcmp(a.second[i].value.data(), b.second[i].value.data(),
                      a.second[i].value.numel() * sizeof(double)) == 0);
}

TEST_CASE("train: non-finite loss aborts with a diagnostic") {
  auto mc = micro_model();
  Model<double> model(mc, 5);
  // weights large enough that the logit dot products overflow to +-inf
  auto& head = model.param("head.weight").value;
  for (std::size_t i = 0; i < head.numel(); ++i) head[i] = (i % 2 ? 1e308 : -1e308);
  const auto ds = make_synthetic_dataset(17, 60, 32, 3);
  try {
    train(model, micro_train(1), ds);
    FAIL("expected the NaN abort");
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    CHECK(what.find("non-finite loss") != std::string::npos);
    CHECK(what.find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("train: config validation") {
  TrainConfig tc;
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.beta1 = 1.0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), std::invalid_argument);
}
