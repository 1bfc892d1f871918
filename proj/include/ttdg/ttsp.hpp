#pragma once

// Test-time style projection: a sample's channel statistics are compared to
// every style basis by cosine similarity, the similarities are softmaxed
// into weights, and the sample is restylized with the weighted basis style.

#include <algorithm>
#include <string>
#include <vector>

#include "ttdg/autodiff.hpp"
#include "ttdg/style_bases.hpp"
#include "ttdg/style_stats.hpp"

namespace ttdg {

/// Which basis vector the sample's sigma is compared against.
enum class SimilarityVariant {
  kSigmaToSigma,  // cos(sigma_t, sigma_b)
  kSigmaToMu,     // cos(sigma_t, mu_b)
};

enum class Shifting {
  kWeighted,  // softmax over similarities
  kNearest,   // one-hot argmax of similarities
  kNone,      // features pass through unchanged
};

struct ProjectionOptions {
  SimilarityVariant variant = SimilarityVariant::kSigmaToSigma;
  Shifting shifting = Shifting::kWeighted;
  double temperature = 1.0;
};

struct ProjectionWeights {
  std::vector<double> distances;
  std::vector<double> weights;
};

/// [M,C] style against [N,C] bank -> [M,N] summed cosines.
inline Var style_distances(const StyleVars& style, const BankVars& bank,
                           SimilarityVariant variant = SimilarityVariant::kSigmaToSigma) {
  const auto& sm = style.mu.shape();
  const auto& sb = bank.mu.shape();
  if (sm.size() != 2 || sb.size() != 2 || sm[1] != sb[1]) {
    throw ShapeError("style_distances: style " + to_string(sm) +
                     " does not match bank " + to_string(sb));
  }
  const Var& sigma_ref = variant == SimilarityVariant::kSigmaToSigma ? bank.sigma : bank.mu;
  return add(cosine_matrix(style.mu, bank.mu), cosine_matrix(style.sigma, sigma_ref));
}

/// Row-wise projection weights from [M,N] distances.
inline Var projection_weights(const Var& distances, const ProjectionOptions& opt = {}) {
  if (opt.shifting == Shifting::kNearest) {
    const auto& d = distances.value();
    const std::size_t n = d.shape.back();
    Tensor onehot(d.shape);
    for (std::size_t r = 0; r < d.size() / n; ++r) {
      const auto first = d.data.begin() + std::ptrdiff_t(r * n);
      const std::size_t best = std::size_t(std::max_element(first, first + std::ptrdiff_t(n)) - first);
      onehot[r * n + best] = 1.0;
    }
    return distances.graph()->constant(std::move(onehot));
  }
  if (!(opt.temperature > 0.0)) throw ConfigError("projection temperature must be > 0");
  return softmax(opt.temperature == 1.0 ? distances : scale(distances, 1.0 / opt.temperature));
}

/// Weighted combination of bases: [M,N] weights -> [M,C] style.
inline StyleVars project_style(const Var& weights, const BankVars& bank) {
  return {matmul(weights, bank.mu), matmul(weights, bank.sigma)};
}

struct ProjectionVars {
  StyleVars source;     // mined from the input
  Var distances;        // [M,N]
  Var weights;          // [M,N]
  StyleVars projected;  // [M,C]
  Var features;         // [M,C,H,W]
};

/// Mine, weigh, combine and restylize a [M,C,H,W] batch. With
/// Shifting::kNone only the mined statistics are filled in.
inline ProjectionVars project_features(const Var& features, const BankVars& bank,
                                       const ProjectionOptions& opt = {}) {
  ProjectionVars p;
  p.source = mine_style(features);
  if (opt.shifting == Shifting::kNone) {
    p.features = features;
    return p;
  }
  p.distances = style_distances(p.source, bank, opt.variant);
  p.weights = projection_weights(p.distances, opt);
  p.projected = project_style(p.weights, bank);
  p.features = restylize(features, p.source, p.projected);
  return p;
}

// ---------------------------------------------------------------------------
// Single-sample value API

inline ProjectionWeights similarity_weights(const StyleStats& style,
                                            const StyleBasisBank& bank,
                                            const ProjectionOptions& opt = {}) {
  bank.validate();
  detail::check_style(style, bank.channels, "similarity_weights");
  Graph g(Mode::kInference);
  const StyleVars s{g.constant(detail::stat_tensor(style.mu)),
                    g.constant(detail::stat_tensor(style.sigma))};
  const Var d = style_distances(s, bind_bank(g, bank, false), opt.variant);
  const Var w = projection_weights(d, opt);
  return {d.value().data, w.value().data};
}

inline StyleStats project_style(const ProjectionWeights& weights, const StyleBasisBank& bank) {
  bank.validate();
  if (weights.weights.size() != bank.n_bases) {
    throw ShapeError("project_style: " + std::to_string(weights.weights.size()) +
                     " weights for " + std::to_string(bank.n_bases) + " bases");
  }
  Graph g(Mode::kInference);
  const Var w = g.constant(Tensor({1, bank.n_bases}, weights.weights));
  const auto st = project_style(w, bind_bank(g, bank, false));
  return {st.mu.value().data, st.sigma.value().data};
}

inline FeatureMap project_feature(const FeatureMap& f, const StyleBasisBank& bank,
                                  const ProjectionOptions& opt = {}) {
  f.validate();
  bank.validate();
  if (f.channels != bank.channels) {
    throw ShapeError("project_feature: feature has " + std::to_string(f.channels) +
                     " channels, bank has " + std::to_string(bank.channels));
  }
  Graph g(Mode::kInference);
  const auto p = project_features(g.constant(detail::feature_tensor(f)),
                                  bind_bank(g, bank, false), opt);
  return FeatureMap(f.channels, f.height, f.width, p.features.value().data);
}

}  // namespace ttdg
