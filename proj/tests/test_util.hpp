#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "oracles.hpp"
#include "ttdg/ttdg.hpp"

namespace ttdg::testkit {

inline Tensor random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s);
  for (double& v : t.data) v = u(rng);
  return t;
}

inline FeatureMap random_feature(std::size_t c, std::size_t h, std::size_t w,
                                 std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  FeatureMap f(c, h, w);
  for (double& v : f.data) v = u(rng);
  return f;
}

/// Bank with random means and sigma_raw in [-1, 1].
inline StyleBasisBank random_bank(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  StyleBasisBank b{n, c, random_tensor({n, c}, rng), random_tensor({n, c}, rng)};
  return b;
}

inline oracle::Bank to_oracle(const StyleBasisBank& b) {
  return {b.n_bases, b.channels, b.mu.data, b.effective_sigma().data};
}

inline oracle::Style to_oracle(const StyleStats& s) { return {s.mu, s.sigma}; }

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ttdg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Sigma that mine_style reports after restylizing a channel whose mined
/// sigma was `source` to `target`. The guard epsilon enters twice, so this
/// differs from `target` by O(eps).
inline std::vector<double> remined_sigma(const std::vector<double>& target,
                                         const std::vector<double>& source) {
  std::vector<double> out(target.size());
  for (std::size_t c = 0; c < target.size(); ++c) {
    const double var = source[c] * source[c] - kGuardEps;
    out[c] = std::sqrt(target[c] * target[c] * var / (var + kGuardEps) + kGuardEps);
  }
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

inline std::string read_text(const std::filesystem::path& p) {
  const auto bytes = io::read_file(p);
  return {bytes.begin(), bytes.end()};
}

}  // namespace ttdg::testkit
