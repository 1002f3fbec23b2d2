#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "deltagan/graph.hpp"
#include "deltagan/rng.hpp"
#include "deltagan/tensor.hpp"

namespace deltagan {

/// How fake deltas are produced.
enum class DeltaMode {
  kSampleSpecific,  // from (z, conditional-image features)
  kPrior,           // real deltas pulled toward N(0,1); test-time deltas sampled from it
  kGlobal,          // from z alone
  kLinear,          // additive offsets entirely in feature space, no refinement stack
};

/// Input composition of the delta-matching discriminator.
enum class DMatchInput {
  kTriplet,     // (conditional features, output features, delta)
  kDeltaOnly,
  kCondDelta,   // (conditional features, delta)
  kOutputDelta, // (output features, delta)
};

struct NetworkConfig {
  int image_size = 32;
  int base_channels = 16;
  int bottleneck_channels = 32;  // channel count of encoder outputs and deltas
  int z_dim = 128;
  int n_seen_categories = 6;
  int n_feature_layers = 4;  // discriminator feature stages used by losses

  // Four downsampling stages fix the feature-map side length.
  int feat_hw() const { return image_size / 16; }

  void validate() const {
    if (image_size < 16 || image_size % 16 != 0)
      throw std::invalid_argument("image_size must be a positive multiple of 16");
    if (base_channels < 1 || bottleneck_channels < 1 || z_dim < 1 || n_seen_categories < 1)
      throw std::invalid_argument("network sizes must be positive");
    if (n_feature_layers < 1 || n_feature_layers > 4)
      throw std::invalid_argument("n_feature_layers must be in [1, 4]");
  }

  std::vector<int> encoder_channels() const {
    std::vector<int> out;
    for (int i = 0; i < 4; ++i)
      out.push_back(std::min(base_channels << i, bottleneck_channels));
    return out;
  }

  std::vector<int> discriminator_channels() const {
    std::vector<int> out;
    for (int g = 0; g < 4; ++g) out.push_back(base_channels << g);
    return out;
  }
};

/// Named reference to a parameter or persistent buffer (batch-norm statistics).
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
  bool is_buffer;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

namespace detail {

template <typename T>
void init_conv(Tensor<T>& w, Tensor<T>& b, Rng& rng) {
  const std::int64_t fan_in = w.numel() / w.dim(0);
  const T std = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.data) v = std * static_cast<T>(rng.normal());
  b.fill(T(0));
}

template <typename T>
void init_linear(Tensor<T>& w, Tensor<T>& b, Rng& rng) {
  const std::int64_t fan_in = w.dim(1);
  const T std = static_cast<T>(std::sqrt(1.0 / static_cast<double>(fan_in)));
  for (auto& v : w.data) v = std * static_cast<T>(rng.normal());
  b.fill(T(0));
}

}  // namespace detail

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  int pad = 1;

  void init(int cin, int cout, int k, Rng& rng) {
    w = Tensor<T>({cout, cin, k, k});
    b = Tensor<T>({cout});
    pad = (k - 1) / 2;
    detail::init_conv(w, b, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    return g.conv2d(x, g.param(w, trainable), g.param(b, trainable), pad);
  }
  void collect(const std::string& p, ParamList<T>& out) {
    out.push_back({p + ".w", &w, false});
    out.push_back({p + ".b", &b, false});
  }
};

template <typename T>
struct LinearLayer {
  Tensor<T> w, b;

  void init(int din, int dout, Rng& rng) {
    w = Tensor<T>({dout, din});
    b = Tensor<T>({dout});
    detail::init_linear(w, b, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    return g.linear(x, g.param(w, trainable), g.param(b, trainable));
  }
  void collect(const std::string& p, ParamList<T>& out) {
    out.push_back({p + ".w", &w, false});
    out.push_back({p + ".b", &b, false});
  }
};

template <typename T>
struct BatchNormLayer {
  Tensor<T> gamma, beta, running_mean, running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  void init(int ch) {
    gamma = Tensor<T>({ch}, T(1));
    beta = Tensor<T>({ch}, T(0));
    running_mean = Tensor<T>({ch}, T(0));
    running_var = Tensor<T>({ch}, T(1));
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    return g.batch_norm(x, g.param(gamma, trainable), g.param(beta, trainable),
                        running_mean, running_var, momentum, eps);
  }
  void collect(const std::string& p, ParamList<T>& out) {
    out.push_back({p + ".gamma", &gamma, false});
    out.push_back({p + ".beta", &beta, false});
    out.push_back({p + ".running_mean", &running_mean, true});
    out.push_back({p + ".running_var", &running_var, true});
  }
};

constexpr double kLeakySlope = 0.2;

/// Conv -> leaky ReLU -> batch norm, the unit cell of the encoder stacks.
template <typename T>
struct ConvUnit {
  Conv2dLayer<T> conv;
  BatchNormLayer<T> bn;

  void init(int cin, int cout, Rng& rng) {
    conv.init(cin, cout, 3, rng);
    bn.init(cout);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    return bn.fwd(g, g.leaky_relu(conv.fwd(g, x, trainable), static_cast<T>(kLeakySlope)),
                  trainable);
  }
  void collect(const std::string& p, ParamList<T>& out) {
    conv.collect(p + ".conv", out);
    bn.collect(p + ".bn", out);
  }
};

/// Residual block of three conv units with an optional resampling step.
/// `resample` < 0 halves the spatial size after the block, > 0 doubles it.
template <typename T>
struct ResBlock {
  ConvUnit<T> u1, u2, u3;
  Conv2dLayer<T> skip;  // 1x1 projection, used only when channels change
  bool has_skip = false;
  int resample = 0;

  void init(int cin, int cout, int resample_dir, Rng& rng) {
    u1.init(cin, cout, rng);
    u2.init(cout, cout, rng);
    u3.init(cout, cout, rng);
    has_skip = cin != cout;
    if (has_skip) skip.init(cin, cout, 1, rng);
    resample = resample_dir;
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    Var h = u3.fwd(g, u2.fwd(g, u1.fwd(g, x, trainable), trainable), trainable);
    Var s = has_skip ? skip.fwd(g, x, trainable) : x;
    Var y = g.add(h, s);
    if (resample < 0) y = g.avg_pool2(y);
    if (resample > 0) y = g.upsample2(y);
    return y;
  }
  void collect(const std::string& p, ParamList<T>& out) {
    u1.collect(p + ".u1", out);
    u2.collect(p + ".u2", out);
    u3.collect(p + ".u3", out);
    if (has_skip) skip.collect(p + ".skip", out);
  }
};

/// Image encoder: four downsampling residual blocks plus one intermediate
/// block at the bottleneck resolution. Maps (N,3,S,S) -> (N,C,S/16,S/16).
template <typename T>
struct Encoder {
  std::vector<ResBlock<T>> blocks;

  void init(const NetworkConfig& cfg, Rng& rng) {
    const auto ch = cfg.encoder_channels();
    blocks.resize(5);
    int cin = 3;
    for (int i = 0; i < 4; ++i) {
      blocks[static_cast<std::size_t>(i)].init(cin, ch[static_cast<std::size_t>(i)], -1, rng);
      cin = ch[static_cast<std::size_t>(i)];
    }
    blocks[4].init(cin, cfg.bottleneck_channels, 0, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    Var h = x;
    for (auto& b : blocks) h = b.fwd(g, h, trainable);
    return h;
  }
  void collect(const std::string& p, ParamList<T>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p + ".block" + std::to_string(i), out);
  }
};

/// Two conv units at the bottleneck resolution (the delta refinement stacks).
template <typename T>
struct ConvPair {
  ConvUnit<T> u1, u2;

  void init(int cin, int cout, Rng& rng) {
    u1.init(cin, cout, rng);
    u2.init(cout, cout, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    return u2.fwd(g, u1.fwd(g, x, trainable), trainable);
  }
  void collect(const std::string& p, ParamList<T>& out) {
    u1.collect(p + ".u1", out);
    u2.collect(p + ".u2", out);
  }
};

/// Decoder: four upsampling residual blocks and a tanh-terminated output conv.
template <typename T>
struct Decoder {
  std::vector<ResBlock<T>> blocks;
  Conv2dLayer<T> to_rgb;

  void init(const NetworkConfig& cfg, int in_channels, Rng& rng) {
    const auto enc = cfg.encoder_channels();
    const std::vector<int> ch = {enc[3], enc[2], enc[1], enc[0]};
    blocks.resize(4);
    int cin = in_channels;
    for (int i = 0; i < 4; ++i) {
      blocks[static_cast<std::size_t>(i)].init(cin, ch[static_cast<std::size_t>(i)], 1, rng);
      cin = ch[static_cast<std::size_t>(i)];
    }
    to_rgb.init(cin, 3, 3, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    Var h = x;
    for (auto& b : blocks) h = b.fwd(g, h, trainable);
    return g.tanh_(to_rgb.fwd(g, h, trainable));
  }
  void collect(const std::string& p, ParamList<T>& out) {
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p + ".block" + std::to_string(i), out);
    to_rgb.collect(p + ".to_rgb", out);
  }
};

/// ReLU-first residual block without normalization (discriminator cell).
template <typename T>
struct DiscResBlock {
  Conv2dLayer<T> c1, c2, skip;
  bool has_skip = false;

  void init(int cin, int cout, Rng& rng) {
    c1.init(cin, cout, 3, rng);
    c2.init(cout, cout, 3, rng);
    has_skip = cin != cout;
    if (has_skip) skip.init(cin, cout, 1, rng);
  }
  Var fwd(Graph<T>& g, Var x, bool trainable) {
    Var h = c2.fwd(g, g.relu(c1.fwd(g, g.relu(x), trainable)), trainable);
    Var s = has_skip ? skip.fwd(g, x, trainable) : x;
    return g.add(h, s);
  }
  void collect(const std::string& p, ParamList<T>& out) {
    c1.collect(p + ".c1", out);
    c2.collect(p + ".c2", out);
    if (has_skip) skip.collect(p + ".skip", out);
  }
};

template <typename T>
struct DiscOutputs {
  std::vector<Var> features;  // one per exposed stage, coarsest last
  Var pooled;                 // global average pool of the last stage
  Var score;                  // unbounded adversarial scalar per sample (N, 1)
  Var logits;                 // seen-category logits (N, K)
};

/// Image discriminator: stem conv, four two-block groups each followed by
/// 2x2 average pooling, then an adversarial head and a seen-category
/// classifier head sharing the extractor.
template <typename T>
struct ImageDiscriminator {
  Conv2dLayer<T> stem;
  std::vector<DiscResBlock<T>> blocks;  // two per group
  LinearLayer<T> adv_head, cls_head;
  int n_layers = 4;

  void init(const NetworkConfig& cfg, Rng& rng) {
    const auto ch = cfg.discriminator_channels();
    n_layers = cfg.n_feature_layers;
    stem.init(3, ch[0], 3, rng);
    blocks.resize(8);
    int cin = ch[0];
    for (int gidx = 0; gidx < 4; ++gidx) {
      blocks[static_cast<std::size_t>(2 * gidx)].init(cin, ch[static_cast<std::size_t>(gidx)], rng);
      blocks[static_cast<std::size_t>(2 * gidx + 1)].init(ch[static_cast<std::size_t>(gidx)],
                                                          ch[static_cast<std::size_t>(gidx)], rng);
      cin = ch[static_cast<std::size_t>(gidx)];
    }
    adv_head.init(cin, 1, rng);
    cls_head.init(cin, cfg.n_seen_categories, rng);
  }

  DiscOutputs<T> fwd(Graph<T>& g, Var x, bool trainable) {
    DiscOutputs<T> out;
    Var h = stem.fwd(g, x, trainable);
    for (int gidx = 0; gidx < 4; ++gidx) {
      h = blocks[static_cast<std::size_t>(2 * gidx)].fwd(g, h, trainable);
      h = blocks[static_cast<std::size_t>(2 * gidx + 1)].fwd(g, h, trainable);
      h = g.avg_pool2(h);
      if (gidx < n_layers) out.features.push_back(h);
    }
    out.pooled = g.gap(h);
    out.score = adv_head.fwd(g, out.pooled, trainable);
    out.logits = cls_head.fwd(g, out.pooled, trainable);
    return out;
  }

  void collect(const std::string& p, ParamList<T>& out) {
    stem.collect(p + ".stem", out);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(p + ".block" + std::to_string(i), out);
    adv_head.collect(p + ".adv_head", out);
    cls_head.collect(p + ".cls_head", out);
  }
};

/// Delta-matching discriminator: four fully connected layers over globally
/// pooled inputs assembled according to the configured input mode.
template <typename T>
struct DeltaMatchDiscriminator {
  LinearLayer<T> fc1, fc2, fc3, fc4;
  DMatchInput mode = DMatchInput::kTriplet;

  void init(const NetworkConfig& cfg, DMatchInput m, Rng& rng) {
    mode = m;
    const int d_top = cfg.discriminator_channels().back();
    const int c = cfg.bottleneck_channels;
    int din = 0;
    switch (mode) {
      case DMatchInput::kTriplet: din = 2 * d_top + c; break;
      case DMatchInput::kDeltaOnly: din = c; break;
      case DMatchInput::kCondDelta:
      case DMatchInput::kOutputDelta: din = d_top + c; break;
    }
    const int h1 = std::max(4, d_top);
    const int h2 = std::max(4, d_top / 2);
    const int h3 = std::max(4, d_top / 4);
    fc1.init(din, h1, rng);
    fc2.init(h1, h2, rng);
    fc3.init(h2, h3, rng);
    fc4.init(h3, 1, rng);
  }

  /// cond/output are pooled extractor features (N, D); delta is (N, C, h, w).
  Var fwd(Graph<T>& g, Var cond_pooled, Var output_pooled, Var delta, bool trainable) {
    Var d = g.gap(delta);
    Var in = d;
    switch (mode) {
      case DMatchInput::kTriplet:
        in = g.concat1(g.concat1(cond_pooled, output_pooled), d);
        break;
      case DMatchInput::kDeltaOnly: in = d; break;
      case DMatchInput::kCondDelta: in = g.concat1(cond_pooled, d); break;
      case DMatchInput::kOutputDelta: in = g.concat1(output_pooled, d); break;
    }
    Var h = g.relu(fc1.fwd(g, in, trainable));
    h = g.relu(fc2.fwd(g, h, trainable));
    h = g.relu(fc3.fwd(g, h, trainable));
    return fc4.fwd(g, h, trainable);
  }

  void collect(const std::string& p, ParamList<T>& out) {
    fc1.collect(p + ".fc1", out);
    fc2.collect(p + ".fc2", out);
    fc3.collect(p + ".fc3", out);
    fc4.collect(p + ".fc4", out);
  }
};

/// The generator side: delta/content encoders, the two delta heads, and the
/// decoder. Which pieces exist depends on the delta mode.
template <typename T>
struct GeneratorNets {
  NetworkConfig cfg;
  DeltaMode mode = DeltaMode::kSampleSpecific;
  Encoder<T> delta_enc;    // features the deltas are computed from
  Encoder<T> content_enc;  // structurally identical, independently parameterized
  ConvPair<T> real_delta_enc;
  ConvPair<T> fake_delta_enc;
  Decoder<T> decoder;

  bool has_real_delta_enc() const { return mode != DeltaMode::kLinear; }
  bool has_fake_delta_enc() const { return mode != DeltaMode::kPrior; }

  void init(const NetworkConfig& c, DeltaMode m, Rng& rng) {
    cfg = c;
    mode = m;
    const int ch = cfg.bottleneck_channels;
    delta_enc.init(cfg, rng);
    content_enc.init(cfg, rng);
    if (has_real_delta_enc()) real_delta_enc.init(ch, ch, rng);
    if (has_fake_delta_enc()) {
      const int zin = mode == DeltaMode::kGlobal ? cfg.z_dim : cfg.z_dim + ch;
      fake_delta_enc.init(zin, ch, rng);
    }
    const int dec_in = mode == DeltaMode::kLinear ? ch : 2 * ch;
    decoder.init(cfg, dec_in, rng);
  }

  Var delta_features(Graph<T>& g, Var x, bool trainable) {
    check_image(g, x);
    return delta_enc.fwd(g, x, trainable);
  }
  Var content_features(Graph<T>& g, Var x, bool trainable) {
    check_image(g, x);
    return content_enc.fwd(g, x, trainable);
  }

  /// Real delta from paired features; a learned nonlinear map of the
  /// difference except in linear mode, where it is the raw offset.
  Var real_delta(Graph<T>& g, Var f1, Var f2, bool trainable) {
    require_same_shape(g.val(f1), g.val(f2), "real_delta");
    Var diff = g.sub(f2, f1);
    if (mode == DeltaMode::kLinear) return diff;
    return real_delta_enc.fwd(g, diff, trainable);
  }

  /// Fake delta. In prior mode z must have length C*h*w and is itself the
  /// delta sample; otherwise z is tiled over the grid and refined.
  Var fake_delta(Graph<T>& g, Var z, Var f1, bool trainable) {
    const int hw = cfg.feat_hw();
    const int ch = cfg.bottleneck_channels;
    if (mode == DeltaMode::kPrior)
      return g.reshape(z, {g.val(z).dim(0), ch, hw, hw});
    if (g.val(z).ndim() != 2 || g.val(z).dim(1) != cfg.z_dim)
      throw std::invalid_argument("fake_delta: z dimension mismatch");
    Var zt = g.tile_vec(z, hw, hw);
    Var in = mode == DeltaMode::kGlobal ? zt : g.concat1(zt, f1);
    return fake_delta_enc.fwd(g, in, trainable);
  }

  /// Decode a delta plus content features into an image in [-1, 1].
  Var decode(Graph<T>& g, Var delta, Var content, bool trainable) {
    require_same_shape(g.val(delta), g.val(content), "decode");
    Var in = mode == DeltaMode::kLinear ? g.add(delta, content) : g.concat1(delta, content);
    return decoder.fwd(g, in, trainable);
  }

  /// Length of the latent draw feeding fake_delta.
  int latent_dim() const {
    return mode == DeltaMode::kPrior
               ? cfg.bottleneck_channels * cfg.feat_hw() * cfg.feat_hw()
               : cfg.z_dim;
  }

  void collect(ParamList<T>& out) {
    delta_enc.collect("gen.delta_enc", out);
    content_enc.collect("gen.content_enc", out);
    if (has_real_delta_enc()) real_delta_enc.collect("gen.real_delta_enc", out);
    if (has_fake_delta_enc()) fake_delta_enc.collect("gen.fake_delta_enc", out);
    decoder.collect("gen.decoder", out);
  }

  /// Parameters needed at generation time only (no real-delta stack).
  void collect_generation_subset(ParamList<T>& out) {
    delta_enc.collect("gen.delta_enc", out);
    content_enc.collect("gen.content_enc", out);
    if (has_fake_delta_enc()) fake_delta_enc.collect("gen.fake_delta_enc", out);
    decoder.collect("gen.decoder", out);
  }

 private:
  void check_image(Graph<T>& g, Var x) const {
    const auto& v = g.val(x);
    if (v.ndim() != 4 || v.dim(1) != 3 || v.dim(2) != cfg.image_size ||
        v.dim(3) != cfg.image_size)
      throw std::invalid_argument("expected (N, 3, " + std::to_string(cfg.image_size) + ", " +
                                  std::to_string(cfg.image_size) + ") image batch, got " +
                                  shape_str(v.shape));
  }
};

template <typename T>
struct DiscriminatorNets {
  ImageDiscriminator<T> image_disc;
  DeltaMatchDiscriminator<T> delta_match;
  bool has_delta_match = true;

  void init(const NetworkConfig& cfg, DMatchInput dm_mode, bool with_delta_match, Rng& rng) {
    image_disc.init(cfg, rng);
    has_delta_match = with_delta_match;
    if (has_delta_match) delta_match.init(cfg, dm_mode, rng);
  }
  void collect(ParamList<T>& out) {
    image_disc.collect("disc.image", out);
    if (has_delta_match) delta_match.collect("disc.delta_match", out);
  }
};

/// Count trainable scalars (buffers excluded).
template <typename T>
std::int64_t count_trainable(const ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto& p : params)
    if (!p.is_buffer) n += p.tensor->numel();
  return n;
}

/// Parameter totals for the two phases of the method's lifecycle: training
/// uses everything; generation drops the real-delta stack and both
/// discriminators.
template <typename T>
struct ParameterCounts {
  std::int64_t training_phase;
  std::int64_t testing_phase;
};

template <typename T>
ParameterCounts<T> count_parameters(GeneratorNets<T>& gen, DiscriminatorNets<T>& disc) {
  ParamList<T> all, test_only;
  gen.collect(all);
  disc.collect(all);
  gen.collect_generation_subset(test_only);
  return {count_trainable(all), count_trainable(test_only)};
}

}  // namespace deltagan
