#pragma once

// Synthetic face-anti-spoofing surrogate. Class is carried by content
// structure (spoofs carry a high-frequency moire texture), domain is carried
// by a photometric style transform (per-channel gain and bias, an
// illumination ramp, sensor noise) applied identically to both classes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ttdg/binary_io.hpp"
#include "ttdg/random.hpp"
#include "ttdg/tensor.hpp"

namespace ttdg {

inline constexpr int kLabelSpoof = 0;
inline constexpr int kLabelLive = 1;
inline constexpr double kPixelClamp = 3.0;

struct DomainSpec {
  std::uint32_t id = 0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  double illumination = 0.0;  // peak-to-peak strength of the lighting ramp
  double noise = 0.0;         // additive Gaussian std

  void validate() const {
    for (double g : gain) {
      if (!(g > 0.0)) throw ConfigError("domain " + std::to_string(id) + ": gains must be positive");
    }
    if (!(noise >= 0.0)) throw ConfigError("domain " + std::to_string(id) + ": noise must be >= 0");
    if (!std::isfinite(illumination)) throw ConfigError("domain " + std::to_string(id) + ": bad illumination");
  }
};

/// Four photometrically distinct capture conditions.
inline std::vector<DomainSpec> default_domains() {
  return {
      {0, {1.00, 1.00, 1.00}, {0.00, 0.00, 0.00}, 0.3, 0.04},
      {1, {1.35, 0.95, 0.75}, {0.25, -0.10, -0.20}, 0.5, 0.05},
      {2, {0.75, 1.10, 1.30}, {-0.25, 0.15, 0.10}, 0.4, 0.06},
      {3, {1.70, 0.60, 1.45}, {0.45, -0.35, 0.30}, 0.8, 0.08},
  };
}

struct SampleRecord {
  std::uint32_t sample_id = 0;
  int cls_label = kLabelSpoof;
  std::uint32_t domain = 0;
  Tensor image;  // [3,S,S]
  Tensor depth;  // [S/2,S/2]

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct GeneratorOptions {
  std::size_t image_size = 16;
  std::size_t depth_size() const { return image_size / 2; }
};

/// Radial live-face depth template on a size x size grid, peak 1.
inline Tensor depth_template(std::size_t size) {
  Tensor t({size, size});
  double peak = 0.0;
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (double(x) + 0.5) / double(size) - 0.5;
      const double v = (double(y) + 0.5) / double(size) - 0.5;
      const double d = std::max(0.0, 1.0 - (u * u + v * v) / 0.2);
      t[y * size + x] = d;
      peak = std::max(peak, d);
    }
  }
  for (double& d : t.data) d /= peak;
  return t;
}

/// Class-conditional content before any domain style is applied. Depends
/// only on (seed, label, index).
inline Tensor render_content(int label, std::size_t index, std::uint64_t seed,
                             std::size_t size) {
  std::mt19937_64 rng(derive_seed(seed, {std::uint64_t(label), index, 0}));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * U(rng); };
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  struct Blob { double cx, cy, s, a; };
  std::array<Blob, 3> blobs{};
  for (auto& b : blobs) b = {uni(0.3, 0.7), uni(0.3, 0.7), uni(0.12, 0.25), uni(0.5, 1.0)};
  std::array<double, 3> tint{uni(0.8, 1.2), uni(0.8, 1.2), uni(0.8, 1.2)};

  // Live: faint low-frequency shading. Spoof: moire grating near 0.25-0.35
  // cycles per pixel at a random orientation.
  const double freq = label == kLabelLive ? uni(0.03, 0.08) : uni(0.22, 0.32);
  const double amp = label == kLabelLive ? uni(0.03, 0.08) : uni(0.15, 0.30);
  const double theta = uni(0.0, std::numbers::pi);
  const double phase = uni(0.0, kTwoPi);

  Tensor img({3, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (double(x) + 0.5) / double(size);
      const double v = (double(y) + 0.5) / double(size);
      double base = 0.0;
      for (const auto& b : blobs) {
        const double r2 = (u - b.cx) * (u - b.cx) + (v - b.cy) * (v - b.cy);
        base += b.a * std::exp(-r2 / (2.0 * b.s * b.s));
      }
      const double texture =
          amp * std::sin(kTwoPi * freq * (double(x) * std::cos(theta) + double(y) * std::sin(theta)) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        img[(c * size + y) * size + x] = tint[c] * base + texture;
      }
    }
  }
  return img;
}

/// Apply a domain's photometric transform in place. Draws come from a
/// stream keyed by (seed, label, index) so both classes see the same
/// distribution of per-sample lighting.
inline void apply_domain_style(Tensor& img, const DomainSpec& spec, int label,
                               std::size_t index, std::uint64_t seed) {
  const std::size_t size = img.shape[1];
  std::mt19937_64 rng(derive_seed(seed, {std::uint64_t(label), index, 1}));
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::normal_distribution<double> N(0.0, 1.0);
  const double angle = 2.0 * std::numbers::pi * U(rng);
  const double strength = spec.illumination * (0.5 + U(rng));
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double u = (double(x) + 0.5) / double(size) - 0.5;
        const double v = (double(y) + 0.5) / double(size) - 0.5;
        const double ramp = strength * (u * std::cos(angle) + v * std::sin(angle));
        double& p = img[(c * size + y) * size + x];
        p = spec.gain[c] * p + spec.bias[c] + ramp + spec.noise * N(rng);
        p = std::clamp(p, -kPixelClamp, kPixelClamp);
      }
    }
  }
}

/// n_per_class live samples followed by n_per_class spoof samples.
inline std::vector<SampleRecord> generate_domain(const DomainSpec& spec, std::size_t n_per_class,
                                                 std::uint64_t seed,
                                                 const GeneratorOptions& opt = {}) {
  spec.validate();
  if (n_per_class == 0) throw ConfigError("generate_domain: n_per_class must be >= 1");
  if (opt.image_size < 4 || opt.image_size % 2) {
    throw ConfigError("generate_domain: image_size must be even and >= 4");
  }
  const Tensor live_depth = depth_template(opt.depth_size());
  const Tensor spoof_depth({opt.depth_size(), opt.depth_size()});
  std::vector<SampleRecord> out;
  out.reserve(2 * n_per_class);
  for (int label : {kLabelLive, kLabelSpoof}) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      SampleRecord r;
      r.sample_id = static_cast<std::uint32_t>((spec.id << 20) | (out.size() & 0xFFFFF));
      r.cls_label = label;
      r.domain = spec.id;
      r.image = render_content(label, i, seed, opt.image_size);
      apply_domain_style(r.image, spec, label, i, seed);
      r.depth = label == kLabelLive ? live_depth : spoof_depth;
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Per-domain seed used by the benchmark so domains do not share content.
inline std::uint64_t domain_seed(std::uint64_t data_seed, std::uint32_t domain_id) {
  return derive_seed(data_seed, {0xD0A1u, domain_id});
}

inline std::vector<SampleRecord> generate_benchmark(const std::vector<DomainSpec>& domains,
                                                    std::size_t n_per_class,
                                                    std::uint64_t data_seed,
                                                    const GeneratorOptions& opt = {}) {
  std::set<std::uint32_t> ids;
  std::vector<SampleRecord> all;
  for (const auto& d : domains) {
    if (!ids.insert(d.id).second) throw ConfigError("duplicate domain id " + std::to_string(d.id));
    auto part = generate_domain(d, n_per_class, domain_seed(data_seed, d.id), opt);
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return all;
}

struct DomainSplit {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> test;
};

inline DomainSplit leave_one_out_split(const std::vector<SampleRecord>& samples,
                                       std::uint32_t held_out) {
  DomainSplit s;
  for (const auto& r : samples) (r.domain == held_out ? s.test : s.train).push_back(r);
  if (s.test.empty()) {
    throw ConfigError("leave_one_out_split: held-out domain " + std::to_string(held_out) +
                      " not present");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Dataset files: magic, u16 version, u32 count, u32 image size, u32 depth
// size, then per sample {u32 id, u32 domain, u8 label, image, depth}, then
// the payload checksum.

inline constexpr std::string_view kDatasetMagic = "TTDGDATA";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const std::vector<SampleRecord>& samples,
                                                std::size_t image_size) {
  const std::size_t depth = image_size / 2;
  io::Writer w;
  w.magic(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(samples.size()));
  w.u32(static_cast<std::uint32_t>(image_size));
  w.u32(static_cast<std::uint32_t>(depth));
  const std::size_t start = w.size();
  for (const auto& r : samples) {
    if (r.image.shape != Shape{3, image_size, image_size} || r.depth.shape != Shape{depth, depth}) {
      throw ShapeError("encode_dataset: sample " + std::to_string(r.sample_id) + " has wrong extents");
    }
    w.u32(r.sample_id);
    w.u32(r.domain);
    w.u8(static_cast<std::uint8_t>(r.cls_label));
    w.f64s(r.image.data);
    w.f64s(r.depth.data);
  }
  io::seal(w, start);
  return std::move(w.buffer());
}

struct LoadedDataset {
  std::size_t image_size = 0;
  std::vector<SampleRecord> samples;
};

inline LoadedDataset decode_dataset(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::Reader r(bytes, what);
  r.expect_magic(kDatasetMagic);
  const auto version = r.u16();
  if (version != kDatasetVersion) {
    throw VersionError(what + ": dataset format version " + std::to_string(version));
  }
  LoadedDataset d;
  const std::size_t count = r.u32();
  d.image_size = r.u32();
  const std::size_t depth = r.u32();
  if (d.image_size == 0 || depth * 2 != d.image_size) {
    throw CorruptFileError(what + ": inconsistent geometry");
  }
  const std::size_t per = 9 + 8 * (3 * d.image_size * d.image_size + depth * depth);
  if (count > r.remaining() / per) throw CorruptFileError(what + ": truncated sample payload");
  const std::size_t start = r.position();
  d.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    SampleRecord s;
    s.sample_id = r.u32();
    s.domain = r.u32();
    s.cls_label = r.u8();
    if (s.cls_label != kLabelLive && s.cls_label != kLabelSpoof) {
      throw CorruptFileError(what + ": invalid label");
    }
    s.image = Tensor({3, d.image_size, d.image_size});
    s.depth = Tensor({depth, depth});
    r.f64s(s.image.data);
    r.f64s(s.depth.data);
    d.samples.push_back(std::move(s));
  }
  io::verify_seal(r, start);
  if (r.remaining() != 0) throw CorruptFileError(what + ": trailing bytes");
  return d;
}

inline void save_dataset(const std::vector<SampleRecord>& samples, std::size_t image_size,
                         const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_dataset(samples, image_size));
}

inline LoadedDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path), path.string());
}

inline std::string manifest_csv(const std::vector<SampleRecord>& samples) {
  std::ostringstream os;
  os << "sample_id,class,domain\n";
  for (const auto& r : samples) {
    os << r.sample_id << ',' << (r.cls_label == kLabelLive ? "live" : "spoof") << ','
       << r.domain << '\n';
  }
  return os.str();
}

inline std::string domain_file_name(std::uint32_t id) {
  return "domain_" + std::to_string(id) + ".ttdgdata";
}

/// Load every domain file found in a directory, ordered by domain id.
inline LoadedDataset load_dataset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.path().extension() == ".ttdgdata") files.push_back(e.path());
  }
  if (files.empty()) throw DataError("no .ttdgdata files in " + dir.string());
  std::sort(files.begin(), files.end());
  LoadedDataset all;
  for (const auto& f : files) {
    auto part = load_dataset(f);
    if (all.image_size != 0 && part.image_size != all.image_size) {
      throw DataError("mixed image sizes in " + dir.string());
    }
    all.image_size = part.image_size;
    all.samples.insert(all.samples.end(), std::make_move_iterator(part.samples.begin()),
                       std::make_move_iterator(part.samples.end()));
  }
  std::stable_sort(all.samples.begin(), all.samples.end(),
                   [](const SampleRecord& a, const SampleRecord& b) { return a.domain < b.domain; });
  return all;
}

}  // namespace ttdg
