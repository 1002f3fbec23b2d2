#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <string>
#include <vector>

#include "deltagan/nets.hpp"

using namespace deltagan;

namespace {

NetworkConfig small_config() {
  NetworkConfig cfg;
  cfg.image_size = 32;
  cfg.base_channels = 4;
  cfg.bottleneck_channels = 8;
  cfg.z_dim = 6;
  cfg.n_seen_categories = 5;
  return cfg;
}

Tensor<float> random_images(int n, int size, Rng& rng) {
  Tensor<float> t({n, 3, size, size});
  for (auto& v : t.data) v = static_cast<float>(rng.uniform() * 2.0 - 1.0);
  return t;
}

}  // namespace

TEST_CASE("config validation and derived sizes") {
  NetworkConfig cfg = small_config();
  cfg.validate();
  CHECK(cfg.feat_hw() == 2);
  CHECK(cfg.encoder_channels() == std::vector<int>{4, 8, 8, 8});
  CHECK(cfg.discriminator_channels() == std::vector<int>{4, 8, 16, 32});

  cfg.image_size = 20;
  CHECK_THROWS(cfg.validate());

  // 64px config with the reference channel ladder
  NetworkConfig big;
  big.image_size = 64;
  big.base_channels = 64;
  big.bottleneck_channels = 64;
  CHECK(big.feat_hw() == 4);
  CHECK(big.discriminator_channels() == std::vector<int>{64, 128, 256, 512});
}

TEST_CASE("encoder and decoder shapes compose") {
  NetworkConfig cfg = small_config();
  Rng rng(3);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);

  Rng data_rng(4);
  Tensor<float> x = random_images(2, cfg.image_size, data_rng);
  Graph<float> g(false, false);
  Var xi = g.input(x);
  Var f = gen.delta_features(g, xi, false);
  CHECK(g.val(f).shape == std::vector<int>{2, 8, 2, 2});
  Var c = gen.content_features(g, xi, false);
  CHECK(g.val(c).shape == std::vector<int>{2, 8, 2, 2});

  Var delta = gen.real_delta(g, f, c, false);
  CHECK(g.val(delta).shape == std::vector<int>{2, 8, 2, 2});
  Var y = gen.decode(g, delta, c, false);
  CHECK(g.val(y).shape == std::vector<int>{2, 3, 32, 32});
  for (float v : g.val(y).data) {
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }

  // wrong image size is rejected
  Tensor<float> bad({1, 3, 16, 16}, 0.f);
  CHECK_THROWS(gen.delta_features(g, g.input(bad), false));
}

TEST_CASE("delta and content encoders are independently parameterized") {
  NetworkConfig cfg = small_config();
  Rng rng(5);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  Rng data_rng(6);
  Tensor<float> x = random_images(1, cfg.image_size, data_rng);
  Graph<float> g(false, false);
  Var xi = g.input(x);
  const auto& fd = g.val(gen.delta_features(g, xi, false));
  const auto& fc = g.val(gen.content_features(g, xi, false));
  bool differ = false;
  for (std::int64_t i = 0; i < fd.numel(); ++i)
    if (fd[i] != fc[i]) differ = true;
  CHECK(differ);
}

TEST_CASE("forward passes are deterministic in eval mode") {
  NetworkConfig cfg = small_config();
  Rng rng(7);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  Rng data_rng(8);
  Tensor<float> x = random_images(2, cfg.image_size, data_rng);

  auto run = [&]() {
    Graph<float> g(false, false);
    Var xi = g.input(x);
    Var f = gen.delta_features(g, xi, false);
    Tensor<float> z({2, cfg.z_dim});
    Rng zr(9);
    for (auto& v : z.data) v = static_cast<float>(zr.normal());
    Var d = gen.fake_delta(g, g.input(z), f, false);
    return g.val(gen.decode(g, d, gen.content_features(g, xi, false), false));
  };
  Tensor<float> a = run(), b = run();
  CHECK(a.data == b.data);
}

TEST_CASE("real delta of identical features is input independent") {
  NetworkConfig cfg = small_config();
  Rng rng(10);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  Rng data_rng(11);
  Tensor<float> xa = random_images(1, cfg.image_size, data_rng);
  Tensor<float> xb = random_images(1, cfg.image_size, data_rng);

  Graph<float> g(false, false);
  Var fa = gen.delta_features(g, g.input(xa), false);
  Var fb = gen.delta_features(g, g.input(xb), false);
  const auto& da = g.val(gen.real_delta(g, fa, fa, false));
  const auto& db = g.val(gen.real_delta(g, fb, fb, false));
  CHECK(da.data == db.data);
}

TEST_CASE("fake delta responds to z and is reproducible") {
  NetworkConfig cfg = small_config();
  Rng rng(12);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  Rng data_rng(13);
  Tensor<float> x = random_images(1, cfg.image_size, data_rng);
  Tensor<float> z1({1, cfg.z_dim}), z2({1, cfg.z_dim});
  Rng zr(14);
  for (auto& v : z1.data) v = static_cast<float>(zr.normal());
  for (auto& v : z2.data) v = static_cast<float>(zr.normal());

  Graph<float> g(false, false);
  Var f = gen.delta_features(g, g.input(x), false);
  const auto& d1 = g.val(gen.fake_delta(g, g.input(z1), f, false));
  const auto& d1b = g.val(gen.fake_delta(g, g.input(z1), f, false));
  const auto& d2 = g.val(gen.fake_delta(g, g.input(z2), f, false));
  CHECK(d1.shape == std::vector<int>{1, 8, 2, 2});
  CHECK(d1.data == d1b.data);
  CHECK(d1.data != d2.data);

  Tensor<float> bad({1, cfg.z_dim + 1}, 0.f);
  CHECK_THROWS(gen.fake_delta(g, g.input(bad), f, false));
}

TEST_CASE("image discriminator exposes staged features and heads") {
  NetworkConfig cfg = small_config();
  Rng rng(15);
  DiscriminatorNets<float> disc;
  disc.init(cfg, DMatchInput::kTriplet, true, rng);
  Rng data_rng(16);
  Tensor<float> x = random_images(2, cfg.image_size, data_rng);

  Graph<float> g(false, false);
  auto out = disc.image_disc.fwd(g, g.input(x), false);
  REQUIRE(out.features.size() == 4);
  const std::vector<int> want_ch = cfg.discriminator_channels();
  int side = cfg.image_size;
  for (int l = 0; l < 4; ++l) {
    side /= 2;
    CHECK(g.val(out.features[static_cast<std::size_t>(l)]).shape ==
          std::vector<int>{2, want_ch[static_cast<std::size_t>(l)], side, side});
  }
  CHECK(g.val(out.score).shape == std::vector<int>{2, 1});
  CHECK(g.val(out.logits).shape == std::vector<int>{2, cfg.n_seen_categories});
}

TEST_CASE("delta matching discriminator scores triplets") {
  NetworkConfig cfg = small_config();
  Rng rng(17);
  DiscriminatorNets<float> disc;
  disc.init(cfg, DMatchInput::kTriplet, true, rng);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);

  Rng data_rng(18);
  Tensor<float> x1 = random_images(2, cfg.image_size, data_rng);
  Tensor<float> x2 = random_images(2, cfg.image_size, data_rng);

  Graph<float> g(false, false);
  auto o1 = disc.image_disc.fwd(g, g.input(x1), false);
  auto o2 = disc.image_disc.fwd(g, g.input(x2), false);
  Var f1 = gen.delta_features(g, g.input(x1), false);
  Var f2 = gen.delta_features(g, g.input(x2), false);
  Var delta = gen.real_delta(g, f1, f2, false);
  Var score = disc.delta_match.fwd(g, o1.pooled, o2.pooled, delta, false);
  CHECK(g.val(score).shape == std::vector<int>{2, 1});

  // perturbing only the delta moves the score
  Tensor<float> shifted = g.val(delta);
  for (auto& v : shifted.data) v += 0.25f;
  Var score2 = disc.delta_match.fwd(g, o1.pooled, o2.pooled, g.input(shifted), false);
  CHECK(g.val(score)[0] != g.val(score2)[0]);
}

TEST_CASE("batched evaluation equals per-item evaluation in eval mode") {
  NetworkConfig cfg = small_config();
  Rng rng(19);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  Rng data_rng(20);
  Tensor<float> batch = random_images(3, cfg.image_size, data_rng);

  Graph<float> gb(false, false);
  const Tensor<float> fb = gb.val(gen.delta_features(gb, gb.input(batch), false));

  for (int n = 0; n < 3; ++n) {
    Tensor<float> one({1, 3, cfg.image_size, cfg.image_size});
    std::copy_n(batch.ptr() + static_cast<std::size_t>(n) * one.numel(), one.numel(),
                one.ptr());
    Graph<float> g1(false, false);
    const Tensor<float> f1 = g1.val(gen.delta_features(g1, g1.input(one), false));
    for (std::int64_t i = 0; i < f1.numel(); ++i)
      CHECK(std::abs(f1[i] - fb[n * f1.numel() + i]) <= 1e-5f);
  }
}

TEST_CASE("parameter counting distinguishes the two phases") {
  NetworkConfig cfg = small_config();
  Rng rng(21);
  GeneratorNets<float> gen;
  gen.init(cfg, DeltaMode::kSampleSpecific, rng);
  DiscriminatorNets<float> disc;
  disc.init(cfg, DMatchInput::kTriplet, true, rng);

  auto counts = count_parameters(gen, disc);
  CHECK(counts.testing_phase < counts.training_phase);

  // the generation-time subset excludes the real-delta stack and both discriminators
  ParamList<float> test_set;
  gen.collect_generation_subset(test_set);
  for (const auto& p : test_set) {
    CHECK(p.name.find("real_delta_enc") == std::string::npos);
    CHECK(p.name.find("disc.") == std::string::npos);
  }

  // wider networks have more parameters
  NetworkConfig wide = cfg;
  wide.base_channels *= 2;
  wide.bottleneck_channels *= 2;
  GeneratorNets<float> gen2;
  gen2.init(wide, DeltaMode::kSampleSpecific, rng);
  DiscriminatorNets<float> disc2;
  disc2.init(wide, DMatchInput::kTriplet, true, rng);
  CHECK(count_parameters(gen2, disc2).training_phase > counts.training_phase);
}

TEST_CASE("ablation variants change network structure") {
  NetworkConfig cfg = small_config();
  Rng rng(22);

  GeneratorNets<float> linear;
  linear.init(cfg, DeltaMode::kLinear, rng);
  CHECK_FALSE(linear.has_real_delta_enc());

  GeneratorNets<float> prior;
  prior.init(cfg, DeltaMode::kPrior, rng);
  CHECK_FALSE(prior.has_fake_delta_enc());
  CHECK(prior.latent_dim() == cfg.bottleneck_channels * 4);

  GeneratorNets<float> global;
  global.init(cfg, DeltaMode::kGlobal, rng);
  Rng data_rng(23);
  Tensor<float> x = random_images(1, cfg.image_size, data_rng);
  Tensor<float> z({1, cfg.z_dim}, 0.5f);
  Graph<float> g(false, false);
  Var f = global.delta_features(g, g.input(x), false);
  // global mode ignores the conditional features entirely
  Var d1 = global.fake_delta(g, g.input(z), f, false);
  Var d2 = global.fake_delta(g, g.input(z), g.scale(f, 2.0f), false);
  CHECK(g.val(d1).data == g.val(d2).data);
}
