#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "ttdg/autodiff.hpp"
#include "ttdg/binary_io.hpp"
#include "ttdg/style_stats.hpp"

namespace ttdg {

/// N learnable (mu, sigma) style bases. Sigma is stored unconstrained and
/// read through softplus, so the effective scale is always positive.
struct StyleBasisBank {
  static constexpr std::uint16_t kFormatVersion = 1;
  static constexpr std::string_view kMagic = "TTDGBANK";

  std::size_t n_bases = 0;
  std::size_t channels = 0;
  Tensor mu;         // [N,C]
  Tensor sigma_raw;  // [N,C]

  Tensor effective_sigma() const {
    Tensor s = sigma_raw;
    for (double& v : s.data) v = softplus(v);
    return s;
  }

  StyleStats basis(std::size_t n) const {
    StyleStats s;
    s.mu.assign(mu.data.begin() + n * channels, mu.data.begin() + (n + 1) * channels);
    s.sigma.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
      s.sigma[c] = softplus(sigma_raw[n * channels + c]);
    }
    return s;
  }

  /// Overwrite basis `n` with an explicit style (sigma entries must be > 0).
  void set_basis(std::size_t n, const StyleStats& s) {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[n * channels + c] = s.mu[c];
      sigma_raw[n * channels + c] = softplus_inverse(s.sigma[c]);
    }
  }

  void validate() const {
    if (n_bases == 0 || channels == 0) {
      throw ShapeError("StyleBasisBank: N and C must be >= 1");
    }
    const Shape s{n_bases, channels};
    if (mu.shape != s || sigma_raw.shape != s) {
      throw ShapeError("StyleBasisBank: arrays " + to_string(mu.shape) + "/" +
                       to_string(sigma_raw.shape) + " do not match " + to_string(s));
    }
    if (!mu.all_finite() || !sigma_raw.all_finite()) {
      throw DataError("StyleBasisBank: non-finite entry");
    }
    for (std::size_t n = 0; n < n_bases; ++n) {
      double ss = 0.0;
      for (std::size_t c = 0; c < channels; ++c) ss += mu[n * channels + c] * mu[n * channels + c];
      if (std::sqrt(ss) < kGuardEps) {
        throw DataError("StyleBasisBank: basis " + std::to_string(n) + " has a degenerate mean");
      }
    }
  }

  friend bool operator==(const StyleBasisBank&, const StyleBasisBank&) = default;
};

/// Unit-norm Gaussian means, unit effective sigma.
inline StyleBasisBank init_bank(std::size_t n_bases, std::size_t channels,
                                std::uint64_t seed) {
  if (n_bases == 0 || channels == 0) {
    throw ConfigError("init_bank: N and C must be >= 1");
  }
  StyleBasisBank bank{n_bases, channels, Tensor({n_bases, channels}),
                      Tensor::filled({n_bases, channels}, softplus_inverse(1.0))};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t n = 0; n < n_bases; ++n) {
    double ss = 0.0;
    do {
      ss = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        const double v = normal(rng);
        bank.mu[n * channels + c] = v;
        ss += v * v;
      }
    } while (ss == 0.0);
    const double norm = std::sqrt(ss);
    for (std::size_t c = 0; c < channels; ++c) bank.mu[n * channels + c] /= norm;
  }
  return bank;
}

/// A bank bound into a graph. `sigma` is the effective (softplus) scale.
struct BankVars {
  Var mu;         // [N,C]
  Var sigma_raw;  // [N,C]
  Var sigma;      // [N,C]
};

inline BankVars bind_bank(Graph& g, const StyleBasisBank& bank, bool trainable) {
  BankVars b;
  b.mu = trainable ? g.input(bank.mu) : g.constant(bank.mu);
  b.sigma_raw = trainable ? g.input(bank.sigma_raw) : g.constant(bank.sigma_raw);
  b.sigma = softplus(b.sigma_raw);
  return b;
}

/// Sum over ordered pairs i != k of |cos(mu_i, mu_k)| + |cos(sigma_i, sigma_k)|.
inline Var style_diversity_loss(const BankVars& bank) {
  const std::size_t n = bank.mu.shape()[0];
  if (n < 2) throw ConfigError("style_diversity_loss: needs at least 2 bases");
  Tensor off = Tensor::filled({n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
  const Var mask = bank.mu.graph()->constant(std::move(off));
  const Var mu_term = sum(mul(abs(cosine_matrix(bank.mu, bank.mu)), mask));
  const Var sigma_term = sum(mul(abs(cosine_matrix(bank.sigma, bank.sigma)), mask));
  return add(mu_term, sigma_term);
}

inline double style_diversity_loss(const StyleBasisBank& bank) {
  bank.validate();
  Graph g(Mode::kInference);
  return style_diversity_loss(bind_bank(g, bank, false)).item();
}

/// Mean pairwise |cos| between distinct mean rows.
inline double mean_abs_mu_cosine(const StyleBasisBank& bank) {
  if (bank.n_bases < 2) return 0.0;
  Graph g(Mode::kInference);
  const Var m = g.constant(bank.mu);
  const Tensor cos = cosine_matrix(m, m).value();
  double s = 0.0;
  for (std::size_t i = 0; i < bank.n_bases; ++i) {
    for (std::size_t k = 0; k < bank.n_bases; ++k) {
      if (i != k) s += std::abs(cos[i * bank.n_bases + k]);
    }
  }
  return s / double(bank.n_bases * (bank.n_bases - 1));
}

// ---------------------------------------------------------------------------
// Serialization: magic, u16 version, u32 N, u32 C, N*C mu, N*C sigma_raw,
// u64 checksum of the value payload.

inline void encode_bank(io::Writer& w, const StyleBasisBank& bank) {
  bank.validate();
  w.magic(StyleBasisBank::kMagic);
  w.u16(StyleBasisBank::kFormatVersion);
  w.u32(static_cast<std::uint32_t>(bank.n_bases));
  w.u32(static_cast<std::uint32_t>(bank.channels));
  const std::size_t start = w.size();
  w.f64s(bank.mu.data);
  w.f64s(bank.sigma_raw.data);
  io::seal(w, start);
}

inline StyleBasisBank decode_bank(io::Reader& r) {
  r.expect_magic(StyleBasisBank::kMagic);
  const std::uint16_t version = r.u16();
  if (version != StyleBasisBank::kFormatVersion) {
    throw VersionError(r.what() + ": bank format version " + std::to_string(version) +
                       ", expected " + std::to_string(StyleBasisBank::kFormatVersion));
  }
  const std::size_t n = r.u32();
  const std::size_t c = r.u32();
  if (n == 0 || c == 0) throw CorruptFileError(r.what() + ": empty bank header");
  if (n * c > r.remaining() / 16) throw CorruptFileError(r.what() + ": truncated bank payload");
  StyleBasisBank bank{n, c, Tensor({n, c}), Tensor({n, c})};
  const std::size_t start = r.position();
  r.f64s(bank.mu.data);
  r.f64s(bank.sigma_raw.data);
  io::verify_seal(r, start);
  try {
    bank.validate();
  } catch (const Error& e) {
    throw CorruptFileError(r.what() + ": " + e.what());
  }
  return bank;
}

inline void save_bank(const StyleBasisBank& bank, const std::filesystem::path& path) {
  io::Writer w;
  encode_bank(w, bank);
  io::write_file_atomic(path, w.buffer());
}

inline StyleBasisBank load_bank(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::Reader r(bytes, path.string());
  auto bank = decode_bank(r);
  if (r.remaining() != 0) throw CorruptFileError(path.string() + ": trailing bytes");
  return bank;
}

}  // namespace ttdg
