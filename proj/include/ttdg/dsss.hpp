#pragma once

// Diverse style shift simulation: each sample is restylized with one
// randomly chosen basis, and a batch-contrastive loss keeps every
// reassembled feature closest to its own content feature.

#include <cstdint>
#include <random>
#include <vector>

#include "ttdg/autodiff.hpp"
#include "ttdg/random.hpp"
#include "ttdg/style_bases.hpp"
#include "ttdg/style_stats.hpp"

namespace ttdg {

struct ReassembledBatch {
  std::vector<FeatureMap> originals;
  std::vector<FeatureMap> reassembled;
  std::vector<std::size_t> chosen_basis;
};

/// One uniform basis index per sample; sample m draws from its own stream
/// derived from the batch seed.
inline std::vector<std::size_t> draw_basis_indices(std::size_t batch, std::size_t n_bases,
                                                   std::uint64_t seed) {
  if (n_bases == 0) throw ConfigError("draw_basis_indices: empty bank");
  std::vector<std::size_t> idx(batch);
  for (std::size_t m = 0; m < batch; ++m) {
    std::mt19937_64 rng(derive_seed(seed, {m}));
    idx[m] = std::uniform_int_distribution<std::size_t>(0, n_bases - 1)(rng);
  }
  return idx;
}

inline Tensor one_hot(const std::vector<std::size_t>& idx, std::size_t n) {
  Tensor t({idx.size(), n});
  for (std::size_t m = 0; m < idx.size(); ++m) t[m * n + idx[m]] = 1.0;
  return t;
}

/// Restylize each sample of a [M,C,H,W] batch with the basis at indices[m].
inline Var reassemble(const Var& features, const StyleVars& source, const BankVars& bank,
                      const std::vector<std::size_t>& indices) {
  const std::size_t n = bank.mu.shape()[0];
  if (indices.size() != features.shape()[0]) {
    throw ShapeError("reassemble: " + std::to_string(indices.size()) +
                     " indices for batch " + to_string(features.shape()));
  }
  for (std::size_t i : indices) {
    if (i >= n) throw ShapeError("reassemble: basis index out of range");
  }
  const Var select = features.graph()->constant(one_hot(indices, n));
  const StyleVars target{matmul(select, bank.mu), matmul(select, bank.sigma)};
  return restylize(features, source, target);
}

/// Batch contrastive consistency. z[m][t] = cos(flat(reassembled_t),
/// flat(original_m)); each column t is softmaxed over m and the diagonal
/// log-probability is averaged.
inline Var content_consistency_loss(const Var& originals, const Var& reassembled) {
  if (originals.shape() != reassembled.shape() || originals.shape().empty()) {
    throw ShapeError("content_consistency_loss: shapes " + to_string(originals.shape()) +
                     " and " + to_string(reassembled.shape()));
  }
  const std::size_t m = originals.shape()[0];
  const std::size_t d = originals.size() / m;
  const Var z = cosine_matrix(reshape(reassembled, {m, d}), reshape(originals, {m, d}));
  // z rows are indexed by t here, so the softmax over m runs along the last axis.
  const Var logp = log_softmax(z);
  Tensor eye({m, m});
  for (std::size_t i = 0; i < m; ++i) eye[i * m + i] = 1.0;
  return scale(sum(mul(logp, originals.graph()->constant(std::move(eye)))), -1.0 / double(m));
}

// ---------------------------------------------------------------------------
// Value API

namespace detail {

inline Tensor stack_features(const std::vector<FeatureMap>& maps, const char* op) {
  if (maps.empty()) throw DataError(std::string(op) + ": empty batch");
  const FeatureMap& f0 = maps.front();
  Tensor t({maps.size(), f0.channels, f0.height, f0.width});
  for (std::size_t m = 0; m < maps.size(); ++m) {
    maps[m].validate();
    if (maps[m].shape() != f0.shape()) {
      throw ShapeError(std::string(op) + ": mixed feature shapes " +
                       to_string(maps[m].shape()) + " and " + to_string(f0.shape()));
    }
    std::copy(maps[m].data.begin(), maps[m].data.end(),
              t.data.begin() + std::ptrdiff_t(m * f0.data.size()));
  }
  return t;
}

inline std::vector<FeatureMap> unstack_features(const Tensor& t) {
  const std::size_t m = t.shape[0], c = t.shape[1], h = t.shape[2], w = t.shape[3];
  std::vector<FeatureMap> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto first = t.data.begin() + std::ptrdiff_t(i * c * h * w);
    out.emplace_back(c, h, w, std::vector<double>(first, first + std::ptrdiff_t(c * h * w)));
  }
  return out;
}

}  // namespace detail

inline ReassembledBatch reassemble_batch(const std::vector<FeatureMap>& batch,
                                         const StyleBasisBank& bank, std::uint64_t seed) {
  const Tensor stacked = detail::stack_features(batch, "reassemble_batch");
  bank.validate();
  if (stacked.shape[1] != bank.channels) {
    throw ShapeError("reassemble_batch: features have " + std::to_string(stacked.shape[1]) +
                     " channels, bank has " + std::to_string(bank.channels));
  }
  ReassembledBatch r;
  r.originals = batch;
  r.chosen_basis = draw_basis_indices(batch.size(), bank.n_bases, seed);
  Graph g(Mode::kInference);
  const Var f = g.constant(stacked);
  const Var out = reassemble(f, mine_style(f), bind_bank(g, bank, false), r.chosen_basis);
  r.reassembled = detail::unstack_features(out.value());
  return r;
}

inline double content_consistency_loss(const ReassembledBatch& r) {
  if (r.originals.size() != r.reassembled.size()) {
    throw ShapeError("content_consistency_loss: batch halves differ in size");
  }
  Graph g(Mode::kInference);
  const Var a = g.constant(detail::stack_features(r.originals, "content_consistency_loss"));
  const Var b = g.constant(detail::stack_features(r.reassembled, "content_consistency_loss"));
  return content_consistency_loss(a, b).item();
}

}  // namespace ttdg
