#pragma once

// Desk-scale trainable pipeline: a two-layer convolutional feature
// extractor, a liveness classifier and a depth estimator, the supervised
// losses, and the composite training objective.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ttdg/autodiff.hpp"
#include "ttdg/datagen.hpp"
#include "ttdg/dsss.hpp"
#include "ttdg/random.hpp"
#include "ttdg/style_bases.hpp"
#include "ttdg/ttsp.hpp"

namespace ttdg {

struct ModelShape {
  std::size_t image_size = 16;       // input is 3 x S x S
  std::size_t hidden_channels = 8;   // first conv width
  std::size_t feature_channels = 16; // C of the style space
  std::size_t head_channels = 8;     // classifier conv width
  std::size_t n_bases = 8;           // N

  std::size_t feature_size() const { return image_size / 2; }

  void validate() const {
    if (image_size < 4 || image_size % 2) throw ConfigError("image_size must be even and >= 4");
    if (hidden_channels == 0 || feature_channels == 0 || head_channels == 0 || n_bases == 0) {
      throw ConfigError("model widths and n_bases must be >= 1");
    }
  }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

enum class ParamGroup { kBackbone, kHeads, kBank };

struct Model {
  ModelShape shape;
  // backbone
  Tensor conv1_w, conv1_b, conv2_w, conv2_b;
  // heads
  Tensor cls_conv_w, cls_conv_b, cls_fc_w, cls_fc_b, depth_w, depth_b;
  StyleBasisBank bank;

  struct Entry {
    const char* name;
    ParamGroup group;
    Tensor* tensor;
  };

  /// Every trainable array in a fixed order.
  std::vector<Entry> parameters() {
    return {{"conv1_w", ParamGroup::kBackbone, &conv1_w},
            {"conv1_b", ParamGroup::kBackbone, &conv1_b},
            {"conv2_w", ParamGroup::kBackbone, &conv2_w},
            {"conv2_b", ParamGroup::kBackbone, &conv2_b},
            {"cls_conv_w", ParamGroup::kHeads, &cls_conv_w},
            {"cls_conv_b", ParamGroup::kHeads, &cls_conv_b},
            {"cls_fc_w", ParamGroup::kHeads, &cls_fc_w},
            {"cls_fc_b", ParamGroup::kHeads, &cls_fc_b},
            {"depth_w", ParamGroup::kHeads, &depth_w},
            {"depth_b", ParamGroup::kHeads, &depth_b},
            {"bank_mu", ParamGroup::kBank, &bank.mu},
            {"bank_sigma_raw", ParamGroup::kBank, &bank.sigma_raw}};
  }

  struct ConstEntry {
    const char* name;
    ParamGroup group;
    const Tensor* tensor;
  };

  std::vector<ConstEntry> parameters() const {
    std::vector<ConstEntry> out;
    for (const auto& e : const_cast<Model*>(this)->parameters()) {
      out.push_back({e.name, e.group, e.tensor});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor->size();
    return n;
  }

  void validate() const {
    shape.validate();
    bank.validate();
    if (bank.channels != shape.feature_channels || bank.n_bases != shape.n_bases) {
      throw ShapeError("model: bank is " + std::to_string(bank.n_bases) + "x" +
                       std::to_string(bank.channels) + " but backbone emits " +
                       std::to_string(shape.feature_channels) + " channels");
    }
    const auto& s = shape;
    const std::size_t K1 = s.hidden_channels, C = s.feature_channels, K2 = s.head_channels;
    auto expect = [](const Tensor& t, const Shape& sh, const char* name) {
      if (t.shape != sh) {
        throw ShapeError(std::string("model: ") + name + " is " + to_string(t.shape) +
                         ", expected " + to_string(sh));
      }
    };
    expect(conv1_w, {K1, 3, 3, 3}, "conv1_w");
    expect(conv1_b, {K1}, "conv1_b");
    expect(conv2_w, {C, K1, 3, 3}, "conv2_w");
    expect(conv2_b, {C}, "conv2_b");
    expect(cls_conv_w, {K2, C, 3, 3}, "cls_conv_w");
    expect(cls_conv_b, {K2}, "cls_conv_b");
    expect(cls_fc_w, {K2, 2}, "cls_fc_w");
    expect(cls_fc_b, {2}, "cls_fc_b");
    expect(depth_w, {1, C, 1, 1}, "depth_w");
    expect(depth_b, {1}, "depth_b");
  }
};

inline Model init_model(const ModelShape& shape, std::uint64_t seed) {
  shape.validate();
  std::mt19937_64 rng(derive_seed(seed, {0x1417}));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto he = [&](Shape s, std::size_t fan_in) {
    Tensor t(std::move(s));
    const double std = std::sqrt(2.0 / double(fan_in));
    for (double& v : t.data) v = std * normal(rng);
    return t;
  };
  const std::size_t K1 = shape.hidden_channels, C = shape.feature_channels,
                    K2 = shape.head_channels;
  Model m;
  m.shape = shape;
  m.conv1_w = he({K1, 3, 3, 3}, 27);
  m.conv1_b = Tensor({K1});
  m.conv2_w = he({C, K1, 3, 3}, K1 * 9);
  m.conv2_b = Tensor({C});
  m.cls_conv_w = he({K2, C, 3, 3}, C * 9);
  m.cls_conv_b = Tensor({K2});
  m.cls_fc_w = he({K2, 2}, K2);
  m.cls_fc_b = Tensor({2});
  m.depth_w = he({1, C, 1, 1}, C);
  m.depth_b = Tensor({1});
  m.bank = init_bank(shape.n_bases, C, derive_seed(seed, {0xBA4C}));
  return m;
}

struct TrainableGroups {
  bool backbone = true;
  bool heads = true;
  bool bank = true;

  bool operator()(ParamGroup g) const {
    return g == ParamGroup::kBackbone ? backbone : g == ParamGroup::kHeads ? heads : bank;
  }
};

/// Model parameters bound into a graph, in Model::parameters() order.
struct ModelVars {
  std::vector<Var> params;
  BankVars bank;

  const Var& operator[](std::size_t i) const { return params[i]; }
};

inline ModelVars bind_model(Graph& g, const Model& model, TrainableGroups trainable = {}) {
  ModelVars mv;
  for (const auto& p : model.parameters()) {
    mv.params.push_back(trainable(p.group) ? g.input(*p.tensor) : g.constant(*p.tensor));
  }
  mv.bank = {mv.params[10], mv.params[11], softplus(mv.params[11])};
  return mv;
}

/// [M,3,S,S] images -> [M,C,S/2,S/2] features.
inline Var extract_features(const ModelVars& mv, const Var& images) {
  const Var h = avg_pool2(relu(conv2d(images, mv[0], mv[1])));
  return conv2d(h, mv[2], mv[3]);
}

/// [M,C,H,W] features -> [M,2] logits (index 1 = live).
inline Var classify(const ModelVars& mv, const Var& features) {
  const Var h = relu(conv2d(features, mv[4], mv[5]));
  const auto& s = h.shape();
  const Var pooled = reshape(mean_axis(reshape(h, {s[0], s[1], s[2] * s[3]}), 2), {s[0], s[1]});
  return add(matmul(pooled, mv[6]), mv[7]);
}

/// [M,C,H,W] features -> [M,H,W] depth map.
inline Var estimate_depth(const ModelVars& mv, const Var& features) {
  const Var d = conv2d(features, mv[8], mv[9]);
  const auto& s = d.shape();
  return reshape(d, {s[0], s[2], s[3]});
}

// ---------------------------------------------------------------------------
// Supervised losses

inline void check_labels(const std::vector<int>& labels, std::size_t m) {
  if (labels.size() != m) throw ShapeError("classification_loss: label count mismatch");
  for (int l : labels) {
    if (l != 0 && l != 1) throw DataError("classification_loss: label out of range");
  }
}

/// Mean two-way cross-entropy.
inline Var classification_loss(const Var& logits, const std::vector<int>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[1] != 2) {
    throw ShapeError("classification_loss: logits must be [M,2], got " + to_string(s));
  }
  check_labels(labels, s[0]);
  Tensor pick({s[0], 2});
  for (std::size_t m = 0; m < s[0]; ++m) pick[m * 2 + std::size_t(labels[m])] = 1.0;
  const Var nll = sum(mul(log_softmax(logits), logits.graph()->constant(std::move(pick))));
  return scale(nll, -1.0 / double(s[0]));
}

inline double classification_loss(const Tensor& logits, const std::vector<int>& labels) {
  Graph g(Mode::kInference);
  return classification_loss(g.constant(logits), labels).item();
}

/// Batch mean of ||pred - label||^2 / (H*W).
inline Var depth_loss(const Var& pred, const Var& label) {
  if (pred.shape() != label.shape() || pred.shape().size() != 3) {
    throw ShapeError("depth_loss: prediction " + to_string(pred.shape()) + " vs label " +
                     to_string(label.shape()));
  }
  return mean(square(sub(pred, label)));
}

inline double depth_loss(const Tensor& pred, const Tensor& label) {
  Graph g(Mode::kInference);
  return depth_loss(g.constant(pred), g.constant(label)).item();
}

// ---------------------------------------------------------------------------
// Composite objective

struct LossWeights {
  double lambda_d = 0.1;  // depth
  double lambda_c = 0.4;  // content consistency
  double lambda_s = 1.0;  // style diversity

  void validate() const {
    if (!(lambda_d >= 0.0) || !(lambda_c >= 0.0) || !(lambda_s >= 0.0)) {
      throw ConfigError("loss weights must be >= 0");
    }
  }
};

struct ForwardOptions {
  ProjectionOptions projection;
  bool heads_on_projected = true;      // heads read F' during training
  bool content_stop_gradient = false;  // detach features inside L_con
};

struct TrainBatch {
  Tensor images;                // [M,3,S,S]
  std::vector<int> cls_labels;  // M
  Tensor depth_labels;          // [M,H,W]
  std::vector<std::uint32_t> domain_tags;

  std::size_t size() const { return cls_labels.size(); }
};

inline TrainBatch make_batch(const std::vector<SampleRecord>& samples,
                             std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("make_batch: empty batch");
  const auto& first = samples.at(indices[0]);
  const std::size_t S = first.image.shape[1];
  const std::size_t D = first.depth.shape[0];
  TrainBatch b;
  b.images = Tensor({indices.size(), 3, S, S});
  b.depth_labels = Tensor({indices.size(), D, D});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& r = samples.at(indices[k]);
    std::copy(r.image.data.begin(), r.image.data.end(),
              b.images.data.begin() + std::ptrdiff_t(k * 3 * S * S));
    std::copy(r.depth.data.begin(), r.depth.data.end(),
              b.depth_labels.data.begin() + std::ptrdiff_t(k * D * D));
    b.cls_labels.push_back(r.cls_label);
    b.domain_tags.push_back(r.domain);
  }
  return b;
}

struct LossTerms {
  Var total;           // graph node; valid while the graph lives
  double value = 0.0;  // total.item()
  double cls = 0.0;
  double dep = 0.0;
  double sty = 0.0;
  double con = 0.0;
  LossWeights weights;

  double weighted_sum() const {
    return cls + weights.lambda_d * dep + weights.lambda_s * sty + weights.lambda_c * con;
  }
};

struct LossCounters {
  std::uint64_t dsss_invocations = 0;
};

/// L_cls + lambda_d L_dep + lambda_s L_sty + lambda_c L_con. Terms whose
/// weight is zero are not placed in the graph; L_sty is still reported.
inline LossTerms total_loss(Graph& g, const ModelVars& mv, const TrainBatch& batch,
                            const LossWeights& w, const ForwardOptions& opt,
                            std::uint64_t seed, LossCounters* counters = nullptr) {
  w.validate();
  const Var images = g.constant(batch.images);
  const Var feats = extract_features(mv, images);
  if (feats.shape()[1] != mv.bank.mu.shape()[1]) {
    throw ShapeError("total_loss: backbone emits " + std::to_string(feats.shape()[1]) +
                     " channels, bank has " + std::to_string(mv.bank.mu.shape()[1]));
  }
  const auto proj = project_features(feats, mv.bank, opt.projection);
  const Var head_in = opt.heads_on_projected ? proj.features : feats;

  LossTerms t;
  t.weights = w;
  const Var l_cls = classification_loss(classify(mv, head_in), batch.cls_labels);
  const Var l_dep = depth_loss(estimate_depth(mv, head_in), g.constant(batch.depth_labels));
  t.cls = l_cls.item();
  t.dep = l_dep.item();
  Var total = add(l_cls, scale(l_dep, w.lambda_d));

  if (mv.bank.mu.shape()[0] >= 2) {
    if (w.lambda_s > 0.0) {
      const Var l_sty = style_diversity_loss(mv.bank);
      t.sty = l_sty.item();
      total = add(total, scale(l_sty, w.lambda_s));
    } else {
      Graph side(Mode::kInference);
      BankVars b{side.constant(mv.bank.mu.value()), side.constant(mv.bank.sigma_raw.value()), {}};
      b.sigma = softplus(b.sigma_raw);
      t.sty = style_diversity_loss(b).item();
    }
  }

  if (w.lambda_c > 0.0) {
    if (counters) ++counters->dsss_invocations;
    const Var content = opt.content_stop_gradient ? g.constant(feats.value()) : feats;
    const StyleVars src = opt.content_stop_gradient ? mine_style(content) : proj.source;
    const auto idx = draw_basis_indices(batch.size(), mv.bank.mu.shape()[0], seed);
    const Var reassembled = reassemble(content, src, mv.bank, idx);
    const Var l_con = content_consistency_loss(content, reassembled);
    t.con = l_con.item();
    total = add(total, scale(l_con, w.lambda_c));
  }
  t.total = total;
  t.value = total.item();
  return t;
}

// ---------------------------------------------------------------------------
// Inference

struct Prediction {
  std::vector<double> live_prob;
  std::vector<std::vector<double>> logits;
};

/// Frozen forward pass with test-time projection; never writes to `model`.
inline Prediction predict(const Model& model, const ProjectionOptions& projection,
                          const std::vector<SampleRecord>& samples, std::size_t chunk = 128) {
  Prediction p;
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const auto batch = make_batch(samples, std::span(idx).subspan(start, end - start));
    Graph g(Mode::kInference);
    const auto mv = bind_model(g, model, {false, false, false});
    const Var feats = extract_features(mv, g.constant(batch.images));
    const auto proj = project_features(feats, mv.bank, projection);
    const Tensor logits = classify(mv, proj.features).value();
    for (std::size_t m = 0; m < batch.size(); ++m) {
      const double a = logits[m * 2], b = logits[m * 2 + 1];
      p.logits.push_back({a, b});
      p.live_prob.push_back(sigmoid(b - a));
    }
  }
  return p;
}

}  // namespace ttdg
