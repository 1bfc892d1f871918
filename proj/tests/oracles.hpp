#pragma once

// Naive reference implementations used as test oracles. Plain loops over
// std::vector, deliberately sharing no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;

inline constexpr double kEps = 1e-6;

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double cosine(const double* a, const double* b, std::size_t n) {
  const double na = std::max(std::sqrt(dot(a, a, n)), kEps);
  const double nb = std::max(std::sqrt(dot(b, b, n)), kEps);
  return dot(a, b, n) / (na * nb);
}

inline double softplus(double x) { return std::log(1.0 + std::exp(x)); }

struct Style {
  Vec mu;
  Vec sigma;
};

/// f is C x HW, row-major.
inline Style mine(const Vec& f, std::size_t C, std::size_t HW) {
  Style s{Vec(C), Vec(C)};
  for (std::size_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (std::size_t p = 0; p < HW; ++p) m += f[c * HW + p];
    m /= double(HW);
    double v = 0.0;
    for (std::size_t p = 0; p < HW; ++p) v += (f[c * HW + p] - m) * (f[c * HW + p] - m);
    v /= double(HW);
    s.mu[c] = m;
    s.sigma[c] = std::sqrt(v + kEps);
  }
  return s;
}

inline Vec restylize(const Vec& f, std::size_t C, std::size_t HW, const Style& src,
                     const Style& tgt) {
  Vec out(f.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t p = 0; p < HW; ++p) {
      out[c * HW + p] = tgt.sigma[c] * (f[c * HW + p] - src.mu[c]) / src.sigma[c] + tgt.mu[c];
    }
  }
  return out;
}

inline Vec softmax(const Vec& x, double temperature = 1.0) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v / temperature);
  Vec e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(x[i] / temperature - mx);
    s += e[i];
  }
  for (double& v : e) v /= s;
  return e;
}

/// Bank with already-effective (positive) sigma; rows are bases.
struct Bank {
  std::size_t n = 0;
  std::size_t c = 0;
  Vec mu;     // n * c
  Vec sigma;  // n * c
};

/// d_n = cos(mu_t, mu_n) + cos(sigma_t, ref_n) with ref = sigma (default)
/// or mu (literal variant).
inline Vec distances(const Style& t, const Bank& b, bool sigma_to_mu = false) {
  Vec d(b.n);
  for (std::size_t k = 0; k < b.n; ++k) {
    const double* ref = sigma_to_mu ? &b.mu[k * b.c] : &b.sigma[k * b.c];
    d[k] = cosine(t.mu.data(), &b.mu[k * b.c], b.c) + cosine(t.sigma.data(), ref, b.c);
  }
  return d;
}

inline Vec weights(const Style& t, const Bank& b, double temperature = 1.0) {
  return softmax(distances(t, b), temperature);
}

inline Style combine(const Vec& w, const Bank& b) {
  Style s{Vec(b.c, 0.0), Vec(b.c, 0.0)};
  for (std::size_t k = 0; k < b.n; ++k) {
    for (std::size_t c = 0; c < b.c; ++c) {
      s.mu[c] += w[k] * b.mu[k * b.c + c];
      s.sigma[c] += w[k] * b.sigma[k * b.c + c];
    }
  }
  return s;
}

/// Sum over ordered pairs i != k of |cos mu| + |cos sigma|.
inline double style_diversity(const Bank& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < b.n; ++i) {
    for (std::size_t k = 0; k < b.n; ++k) {
      if (i == k) continue;
      s += std::abs(cosine(&b.mu[i * b.c], &b.mu[k * b.c], b.c));
      s += std::abs(cosine(&b.sigma[i * b.c], &b.sigma[k * b.c], b.c));
    }
  }
  return s;
}

/// originals and reassembled are M rows of length D.
inline double content_consistency(const Vec& originals, const Vec& reassembled, std::size_t M,
                                  std::size_t D) {
  double loss = 0.0;
  for (std::size_t t = 0; t < M; ++t) {
    Vec z(M);
    for (std::size_t m = 0; m < M; ++m) z[m] = cosine(&reassembled[t * D], &originals[m * D], D);
    double denom = 0.0;
    for (double v : z) denom += std::exp(v);
    loss += -(z[t] - std::log(denom));
  }
  return loss / double(M);
}

inline double auc_pairwise(const Vec& scores, const std::vector<int>& labels) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

struct Confusion {
  double far = 0.0;
  double frr = 0.0;
};

inline Confusion confusion(const Vec& scores, const std::vector<int>& labels, double thr) {
  double tp = 0, fn = 0, fp = 0, tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool live_pred = scores[i] > thr;
    if (labels[i] == 1) (live_pred ? tp : fn) += 1;
    else (live_pred ? fp : tn) += 1;
  }
  return {fp / (fp + tn), fn / (fn + tp)};
}

inline double hter(const Vec& scores, const std::vector<int>& labels, double thr) {
  const auto c = confusion(scores, labels, thr);
  return 0.5 * (c.far + c.frr);
}

struct Eer {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

/// Exhaustive scan over midpoints of distinct sorted scores; first (lowest)
/// threshold with the minimal |FAR - FRR| wins.
inline Eer eer_scan(const Vec& scores, const std::vector<int>& labels) {
  Vec u = scores;
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  Vec cand;
  for (std::size_t i = 0; i + 1 < u.size(); ++i) cand.push_back((u[i] + u[i + 1]) / 2.0);
  if (cand.empty()) cand.push_back(u[0]);
  Eer best;
  double gap = std::numeric_limits<double>::infinity();
  for (double t : cand) {
    const auto c = confusion(scores, labels, t);
    if (std::abs(c.far - c.frr) < gap) {
      gap = std::abs(c.far - c.frr);
      best = {t, c.far, c.frr};
    }
  }
  return best;
}

/// x: M x Ci x H x W, w: Co x Ci x K x K, zero same-padding.
inline Vec conv2d(const Vec& x, const Vec& w, const Vec& b, std::size_t M, std::size_t Ci,
                  std::size_t H, std::size_t W, std::size_t Co, std::size_t K) {
  Vec out(M * Co * H * W);
  const long pad = long(K / 2);
  for (std::size_t m = 0; m < M; ++m)
    for (std::size_t o = 0; o < Co; ++o)
      for (long y = 0; y < long(H); ++y)
        for (long xx = 0; xx < long(W); ++xx) {
          double s = b[o];
          for (std::size_t c = 0; c < Ci; ++c)
            for (long ky = 0; ky < long(K); ++ky)
              for (long kx = 0; kx < long(K); ++kx) {
                const long iy = y + ky - pad, ix = xx + kx - pad;
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                s += w[((o * Ci + c) * K + std::size_t(ky)) * K + std::size_t(kx)] *
                     x[((m * Ci + c) * H + std::size_t(iy)) * W + std::size_t(ix)];
              }
          out[((m * Co + o) * H + std::size_t(y)) * W + std::size_t(xx)] = s;
        }
  return out;
}

inline Vec matmul(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

/// Mean cross-entropy of [M,2] logits.
inline double cross_entropy(const Vec& logits, const std::vector<int>& labels) {
  double s = 0.0;
  for (std::size_t m = 0; m < labels.size(); ++m) {
    const double a = logits[2 * m], b = logits[2 * m + 1];
    const double lse = std::log(std::exp(a) + std::exp(b));
    s += lse - (labels[m] == 1 ? b : a);
  }
  return s / double(labels.size());
}

}  // namespace oracle
