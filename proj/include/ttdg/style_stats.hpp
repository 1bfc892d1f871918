#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ttdg/autodiff.hpp"

namespace ttdg {

/// C x H x W activation map of one sample.
struct FeatureMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), data(c * h * w, 0.0) {}
  FeatureMap(std::size_t c, std::size_t h, std::size_t w, std::vector<double> values)
      : channels(c), height(h), width(w), data(std::move(values)) {
    validate();
  }

  double& at(std::size_t c, std::size_t h, std::size_t w) {
    return data[(c * height + h) * width + w];
  }
  double at(std::size_t c, std::size_t h, std::size_t w) const {
    return data[(c * height + h) * width + w];
  }

  Shape shape() const { return {channels, height, width}; }

  void validate() const {
    if (channels == 0 || height == 0 || width == 0) {
      throw ShapeError("FeatureMap: extents must be >= 1, got " +
                       to_string(shape()));
    }
    if (data.size() != channels * height * width) {
      throw ShapeError("FeatureMap: " + std::to_string(data.size()) +
                       " values for shape " + to_string(shape()));
    }
    for (double v : data) {
      if (!std::isfinite(v)) throw DataError("FeatureMap: non-finite entry");
    }
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Per-channel mean and standard deviation describing a style.
struct StyleStats {
  std::vector<double> mu;
  std::vector<double> sigma;

  std::size_t channels() const { return mu.size(); }
};

/// Batched, differentiable style statistics; both members are [M,C].
struct StyleVars {
  Var mu;
  Var sigma;
};

/// Mine channel statistics from a [M,C,H,W] batch. Population variance with
/// kGuardEps under the square root.
inline StyleVars mine_style(const Var& features) {
  const auto& s = features.shape();
  if (s.size() != 4) {
    throw ShapeError("mine_style: expected [M,C,H,W], got " + to_string(s));
  }
  const Var flat = reshape(features, {s[0], s[1], s[2] * s[3]});
  const Var mu = mean_axis(flat, 2);
  const Var var = mean_axis(square(sub(flat, mu)), 2);
  const Var sigma = sqrt(add_scalar(var, kGuardEps));
  return {reshape(mu, {s[0], s[1]}), reshape(sigma, {s[0], s[1]})};
}

/// Replace the style of a [M,C,H,W] batch: target.sigma * (f - source.mu) /
/// source.sigma + target.mu, channel-wise.
inline Var restylize(const Var& features, const StyleVars& source,
                     const StyleVars& target) {
  const auto& s = features.shape();
  if (s.size() != 4) {
    throw ShapeError("restylize: expected [M,C,H,W], got " + to_string(s));
  }
  const Shape stat{s[0], s[1]};
  for (const Var* v : {&source.mu, &source.sigma, &target.mu, &target.sigma}) {
    if (v->shape() != stat) {
      throw ShapeError("restylize: style statistics " + to_string(v->shape()) +
                       " do not match features " + to_string(s));
    }
  }
  const Shape col{s[0], s[1], 1};
  const Var flat = reshape(features, {s[0], s[1], s[2] * s[3]});
  const Var normed = div(sub(flat, reshape(source.mu, col)), reshape(source.sigma, col));
  const Var out = add(mul(normed, reshape(target.sigma, col)), reshape(target.mu, col));
  return reshape(out, s);
}

namespace detail {

inline Tensor feature_tensor(const FeatureMap& f) {
  return Tensor({1, f.channels, f.height, f.width}, f.data);
}

inline Tensor stat_tensor(const std::vector<double>& v) {
  return Tensor({1, v.size()}, v);
}

inline void check_style(const StyleStats& s, std::size_t channels, const char* op) {
  if (s.mu.size() != channels || s.sigma.size() != channels) {
    throw ShapeError(std::string(op) + ": style has " + std::to_string(s.mu.size()) +
                     "/" + std::to_string(s.sigma.size()) +
                     " channels, feature map has " + std::to_string(channels));
  }
}

}  // namespace detail

inline StyleStats mine_style(const FeatureMap& f) {
  f.validate();
  Graph g(Mode::kInference);
  const auto st = mine_style(g.constant(detail::feature_tensor(f)));
  return {st.mu.value().data, st.sigma.value().data};
}

inline FeatureMap restylize(const FeatureMap& f, const StyleStats& source,
                            const StyleStats& target) {
  f.validate();
  detail::check_style(source, f.channels, "restylize(source)");
  detail::check_style(target, f.channels, "restylize(target)");
  for (double s : target.sigma) {
    if (!(s >= 0.0)) throw DataError("restylize: negative target sigma");
  }
  Graph g(Mode::kInference);
  const StyleVars src{g.constant(detail::stat_tensor(source.mu)),
                      g.constant(detail::stat_tensor(source.sigma))};
  const StyleVars tgt{g.constant(detail::stat_tensor(target.mu)),
                      g.constant(detail::stat_tensor(target.sigma))};
  const Var out = restylize(g.constant(detail::feature_tensor(f)), src, tgt);
  return FeatureMap(f.channels, f.height, f.width, out.value().data);
}

}  // namespace ttdg
