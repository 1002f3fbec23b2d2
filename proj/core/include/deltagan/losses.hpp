#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "deltagan/graph.hpp"

namespace deltagan {

struct LossWeights {
  double lambda_l1 = 10.0;
  double lambda_fm = 0.1;
  double lambda_ms = 10.0;
  double lambda_prior_kl = 1.0;  // only active in prior-delta mode

  void validate() const {
    if (lambda_l1 < 0 || lambda_fm < 0 || lambda_ms < 0 || lambda_prior_kl < 0)
      throw std::invalid_argument("loss weights must be nonnegative");
  }
};

constexpr double kModeSeekingEps = 1e-5;

/// Mean absolute difference over all elements.
template <typename T>
Var reconstruction_loss(Graph<T>& g, Var reconstructed, Var target) {
  require_same_shape(g.val(reconstructed), g.val(target), "reconstruction_loss");
  return g.mean_all(g.abs_(g.sub(reconstructed, target)));
}

/// Per-layer mean absolute difference, averaged over layers.
template <typename T>
Var feature_matching_loss(Graph<T>& g, const std::vector<Var>& generated_feats,
                          const std::vector<Var>& real_feats) {
  if (generated_feats.empty() || generated_feats.size() != real_feats.size())
    throw std::invalid_argument("feature_matching_loss: layer count mismatch");
  Var acc = -1;
  for (std::size_t l = 0; l < generated_feats.size(); ++l) {
    Var term = g.mean_all(g.abs_(g.sub(real_feats[l], generated_feats[l])));
    acc = l == 0 ? term : g.add(acc, term);
  }
  return g.scale(acc, static_cast<T>(1.0 / static_cast<double>(generated_feats.size())));
}

struct HingePair {
  Var d_loss;
  Var g_loss;
};

/// Hinge adversarial objective on raw scores. The same pure function serves
/// both the image discriminator and the delta-matching discriminator.
template <typename T>
HingePair hinge_adversarial(Graph<T>& g, Var real_scores, Var fake_scores) {
  if (g.val(real_scores).numel() == 0 || g.val(fake_scores).numel() == 0)
    throw std::invalid_argument("hinge_adversarial: empty score batch");
  Var d_real = g.mean_all(g.relu(g.add_const(g.scale(real_scores, T(-1)), T(1))));
  Var d_fake = g.mean_all(g.relu(g.add_const(fake_scores, T(1))));
  Var d = g.add(d_real, d_fake);
  Var gl = g.scale(g.mean_all(fake_scores), T(-1));
  return {d, gl};
}

/// Batch-averaged cross entropy of category logits.
template <typename T>
Var classification_loss(Graph<T>& g, Var logits, const std::vector<int>& categories) {
  return g.softmax_cross_entropy(logits, categories);
}

/// Ratio of latent distance to generated-feature distance, averaged over the
/// extractor layers. Distances are mean absolute differences; the epsilon
/// keeps the ratio finite when the generator collapses.
template <typename T>
Var mode_seeking_loss(Graph<T>& g, Var z1, Var z2, const std::vector<Var>& feats1,
                      const std::vector<Var>& feats2, T eps = static_cast<T>(kModeSeekingEps)) {
  require_same_shape(g.val(z1), g.val(z2), "mode_seeking_loss");
  if (feats1.empty() || feats1.size() != feats2.size())
    throw std::invalid_argument("mode_seeking_loss: layer count mismatch");
  Var z_dist = g.mean_all(g.abs_(g.sub(z1, z2)));
  Var acc = -1;
  for (std::size_t l = 0; l < feats1.size(); ++l) {
    Var f_dist = g.mean_all(g.abs_(g.sub(feats1[l], feats2[l])));
    Var term = g.div(z_dist, g.add_const(f_dist, eps));
    acc = l == 0 ? term : g.add(acc, term);
  }
  return g.scale(acc, static_cast<T>(1.0 / static_cast<double>(feats1.size())));
}

/// Unit-Gaussian pull on real deltas (prior-delta variant): 0.5 * mean(delta^2).
template <typename T>
Var prior_kl_loss(Graph<T>& g, Var real_delta) {
  return g.scale(g.mean_all(g.square(real_delta)), T(0.5));
}

/// Graph handles for the per-step objective terms; -1 marks a term that is
/// not part of the configured objective.
struct LossTerms {
  Var l1 = -1;
  Var fm = -1;
  Var adv_image_d = -1;
  Var adv_image_g = -1;
  Var cls_d = -1;
  Var cls_g = -1;
  Var adv_delta_d = -1;
  Var adv_delta_g = -1;
  Var ms = -1;
  Var prior_kl = -1;
};

template <typename T>
Var total_generator_loss(Graph<T>& g, const LossTerms& t, const LossWeights& w) {
  Var total = -1;
  auto accumulate = [&](Var term, double weight) {
    if (term < 0 || weight == 0.0) return;
    Var scaled = weight == 1.0 ? term : g.scale(term, static_cast<T>(weight));
    total = total < 0 ? scaled : g.add(total, scaled);
  };
  accumulate(t.adv_image_g, 1.0);
  accumulate(t.adv_delta_g, 1.0);
  accumulate(t.l1, w.lambda_l1);
  accumulate(t.cls_g, 1.0);
  accumulate(t.fm, w.lambda_fm);
  accumulate(t.ms, w.lambda_ms);
  accumulate(t.prior_kl, w.lambda_prior_kl);
  if (total < 0) throw std::invalid_argument("total_generator_loss: no active terms");
  return total;
}

template <typename T>
Var total_discriminator_loss(Graph<T>& g, const LossTerms& t) {
  Var total = -1;
  for (Var term : {t.adv_image_d, t.adv_delta_d, t.cls_d}) {
    if (term < 0) continue;
    total = total < 0 ? term : g.add(total, term);
  }
  if (total < 0) throw std::invalid_argument("total_discriminator_loss: no active terms");
  return total;
}

/// Scalar record of one optimization step. Inactive terms are NaN and render
/// as empty CSV cells.
struct LossReport {
  long step = 0;
  double l1 = nan_();
  double fm = nan_();
  double adv_image_d = nan_();
  double adv_image_g = nan_();
  double cls_d = nan_();
  double cls_g = nan_();
  double adv_delta_d = nan_();
  double adv_delta_g = nan_();
  double ms = nan_();
  double prior_kl = nan_();
  double total_d = nan_();
  double total_g = nan_();

  static double nan_() { return std::numeric_limits<double>::quiet_NaN(); }

  static std::string csv_header() {
    return "step,l1,fm,adv_image_d,adv_image_g,cls_d,cls_g,adv_delta_d,adv_delta_g,ms,"
           "prior_kl,total_d,total_g";
  }

  std::string csv_row() const {
    auto cell = [](double v) {
      if (std::isnan(v)) return std::string();
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.9g", v);
      return std::string(buf);
    };
    std::string row = std::to_string(step);
    for (double v : {l1, fm, adv_image_d, adv_image_g, cls_d, cls_g, adv_delta_d, adv_delta_g,
                     ms, prior_kl, total_d, total_g})
      row += "," + cell(v);
    return row;
  }

  bool finite_terms() const {
    for (double v : {l1, fm, adv_image_d, adv_image_g, cls_d, cls_g, adv_delta_d, adv_delta_g,
                     ms, prior_kl, total_d, total_g})
      if (!std::isnan(v) && !std::isfinite(v)) return false;
    return std::isfinite(total_d) && std::isfinite(total_g);
  }
};

}  // namespace deltagan
