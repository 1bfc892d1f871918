#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ttdg/binary_io.hpp"
#include "ttdg/model.hpp"
#include "ttdg/random.hpp"

namespace ttdg {

/// How the style bases evolve during training.
enum class BankMode {
  kLearnable,              // updated by gradients
  kFrozen,                 // never updated
  kRandomFromSource,       // re-drawn from mined training styles every epoch
  kFarthestPointFromSource // farthest-point sampled from mined styles every epoch
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  ModelShape shape;
  LossWeights loss;
  ForwardOptions forward;
  BankMode bank_mode = BankMode::kLearnable;
  AdamOptions adam;
  std::size_t epochs = 64;
  std::size_t batch_size = 32;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
};

inline AdamState init_adam(const Model& model) {
  AdamState s;
  for (const auto& p : model.parameters()) {
    s.m.emplace_back(p.tensor->shape);
    s.v.emplace_back(p.tensor->shape);
  }
  return s;
}

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  double cls = 0.0;
  double dep = 0.0;
  double sty = 0.0;
  double con = 0.0;
};

// ---------------------------------------------------------------------------
// Basis selection from mined source styles

/// Mined (mu, sigma) of every sample's features, as [S,C] arrays.
struct MinedStyles {
  Tensor mu;
  Tensor sigma;
};

inline MinedStyles mine_sample_styles(const Model& model,
                                      const std::vector<SampleRecord>& samples,
                                      std::size_t chunk = 128) {
  const std::size_t C = model.shape.feature_channels;
  MinedStyles out{Tensor({samples.size(), C}), Tensor({samples.size(), C})};
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const auto batch = make_batch(samples, std::span(idx).subspan(start, end - start));
    Graph g(Mode::kInference);
    const auto mv = bind_model(g, model, {false, false, false});
    const auto st = mine_style(extract_features(mv, g.constant(batch.images)));
    std::copy(st.mu.value().data.begin(), st.mu.value().data.end(),
              out.mu.data.begin() + std::ptrdiff_t(start * C));
    std::copy(st.sigma.value().data.begin(), st.sigma.value().data.end(),
              out.sigma.data.begin() + std::ptrdiff_t(start * C));
  }
  return out;
}

/// Farthest-point sampling of `count` rows of `points` [S,C] under cosine
/// distance 1 - cos, starting from `first`.
inline std::vector<std::size_t> farthest_point_sample(const Tensor& points, std::size_t count,
                                                      std::size_t first) {
  const std::size_t S = points.shape[0], C = points.shape[1];
  if (count > S) throw ConfigError("farthest_point_sample: asked for more points than exist");
  std::vector<double> norms(S);
  for (std::size_t i = 0; i < S; ++i) {
    double ss = 0.0;
    for (std::size_t c = 0; c < C; ++c) ss += points[i * C + c] * points[i * C + c];
    norms[i] = std::max(std::sqrt(ss), kGuardEps);
  }
  auto dist = [&](std::size_t a, std::size_t b) {
    double dot = 0.0;
    for (std::size_t c = 0; c < C; ++c) dot += points[a * C + c] * points[b * C + c];
    return 1.0 - dot / (norms[a] * norms[b]);
  };
  std::vector<std::size_t> chosen{first};
  std::vector<double> nearest(S);
  for (std::size_t i = 0; i < S; ++i) nearest[i] = dist(i, first);
  while (chosen.size() < count) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < S; ++i) {
      if (nearest[i] > nearest[best]) best = i;
    }
    chosen.push_back(best);
    for (std::size_t i = 0; i < S; ++i) nearest[i] = std::min(nearest[i], dist(i, best));
  }
  return chosen;
}

inline void reselect_bank(Model& model, BankMode mode, const std::vector<SampleRecord>& train,
                          std::uint64_t seed) {
  const auto styles = mine_sample_styles(model, train);
  const std::size_t S = train.size(), N = model.shape.n_bases, C = model.shape.feature_channels;
  if (S < N) throw ConfigError("basis selection: fewer training samples than bases");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picks;
  if (mode == BankMode::kRandomFromSource) {
    std::vector<std::size_t> all(S);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    picks.assign(all.begin(), all.begin() + std::ptrdiff_t(N));
  } else {
    const std::size_t first = std::uniform_int_distribution<std::size_t>(0, S - 1)(rng);
    picks = farthest_point_sample(styles.mu, N, first);
  }
  for (std::size_t n = 0; n < N; ++n) {
    StyleStats s;
    s.mu.assign(styles.mu.data.begin() + std::ptrdiff_t(picks[n] * C),
                styles.mu.data.begin() + std::ptrdiff_t((picks[n] + 1) * C));
    s.sigma.assign(styles.sigma.data.begin() + std::ptrdiff_t(picks[n] * C),
                   styles.sigma.data.begin() + std::ptrdiff_t((picks[n] + 1) * C));
    model.bank.set_basis(n, s);
  }
}

// ---------------------------------------------------------------------------

/// Single-writer training loop. Every random draw is keyed by (seed, epoch,
/// batch), so a run resumed from a checkpoint replays the remaining epochs
/// exactly.
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)), seed_(seed), model_(init_model(cfg_.shape, seed)),
        adam_(init_adam(model_)) {}

  Trainer(TrainConfig cfg, std::uint64_t seed, Model model, AdamState adam,
          std::size_t epochs_done)
      : cfg_(std::move(cfg)), seed_(seed), model_(std::move(model)), adam_(std::move(adam)),
        epochs_done_(epochs_done) {
    model_.validate();
    if (model_.shape != cfg_.shape) throw ConfigError("resume: model shape differs from config");
  }

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const AdamState& adam() const { return adam_; }
  const TrainConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t epochs_done() const { return epochs_done_; }
  const LossCounters& counters() const { return counters_; }

  TrainableGroups trainable() const {
    return {true, true, cfg_.bank_mode == BankMode::kLearnable};
  }

  EpochLog train_epoch(const std::vector<SampleRecord>& train) {
    if (train.empty()) throw DataError("train_epoch: no training samples");
    const std::size_t epoch = epochs_done_ + 1;
    if (cfg_.bank_mode == BankMode::kRandomFromSource ||
        cfg_.bank_mode == BankMode::kFarthestPointFromSource) {
      reselect_bank(model_, cfg_.bank_mode, train, derive_seed(seed_, {epoch, 0x5E1}));
    }
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed_, {epoch, 0x5AF}));
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog log;
    log.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      const auto batch = make_batch(train, std::span(order).subspan(start, end - start));
      const auto t = step(batch, derive_seed(seed_, {epoch, batches, 0xD55}));
      log.total += t.value;
      log.cls += t.cls;
      log.dep += t.dep;
      log.sty += t.sty;
      log.con += t.con;
      ++batches;
    }
    for (double* v : {&log.total, &log.cls, &log.dep, &log.sty, &log.con}) *v /= double(batches);
    epochs_done_ = epoch;
    return log;
  }

  std::vector<EpochLog> train(const std::vector<SampleRecord>& data) {
    std::vector<EpochLog> logs;
    while (epochs_done_ < cfg_.epochs) logs.push_back(train_epoch(data));
    return logs;
  }

 private:
  LossTerms step(const TrainBatch& batch, std::uint64_t batch_seed) {
    Graph g(Mode::kTraining);
    const auto groups = trainable();
    const auto mv = bind_model(g, model_, groups);
    auto terms = total_loss(g, mv, batch, cfg_.loss, cfg_.forward, batch_seed, &counters_);
    if (!std::isfinite(terms.value)) {
      throw NumericalError("non-finite training loss at epoch " +
                           std::to_string(epochs_done_ + 1));
    }
    g.backward(terms.total);
    apply_adam(g, mv, groups);
    terms.total = Var();
    return terms;
  }

  void apply_adam(const Graph& g, const ModelVars& mv, const TrainableGroups& groups) {
    ++adam_.step;
    const auto& o = cfg_.adam;
    const double bc1 = 1.0 - std::pow(o.beta1, double(adam_.step));
    const double bc2 = 1.0 - std::pow(o.beta2, double(adam_.step));
    auto params = model_.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!groups(params[i].group)) continue;
      const Tensor grad = g.grad(mv[i]);
      Tensor& p = *params[i].tensor;
      Tensor& m = adam_.m[i];
      Tensor& v = adam_.v[i];
      for (std::size_t k = 0; k < p.size(); ++k) {
        m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * grad[k];
        v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * grad[k] * grad[k];
        p[k] -= o.learning_rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + o.eps);
      }
      if (!p.all_finite()) {
        throw NumericalError(std::string("non-finite parameter ") + params[i].name);
      }
    }
  }

  TrainConfig cfg_;
  std::uint64_t seed_;
  Model model_;
  AdamState adam_;
  std::size_t epochs_done_ = 0;
  LossCounters counters_;
};

// ---------------------------------------------------------------------------
// Checkpoints: a bank block in the bank file format, then a parameter blob:
// magic, u16 version, u32 image size, u32 epochs done, u64 seed, u64 Adam
// step, u32 tensor count; payload = config text + named tensors; checksum.

inline constexpr std::string_view kCheckpointMagic = "TTDGPARM";
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config_text;
  Model model;
  AdamState adam;
  std::size_t epochs_done = 0;
  std::uint64_t seed = 0;
};

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ck.model.validate();
  io::Writer w;
  encode_bank(w, ck.model.bank);
  const auto params = ck.model.parameters();
  // Backbone/head tensors plus both Adam moments for every parameter.
  std::vector<std::pair<std::string, const Tensor*>> named;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].group != ParamGroup::kBank) named.emplace_back(params[i].name, params[i].tensor);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    named.emplace_back(std::string("adam_m.") + params[i].name, &ck.adam.m.at(i));
    named.emplace_back(std::string("adam_v.") + params[i].name, &ck.adam.v.at(i));
  }
  w.magic(kCheckpointMagic);
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.model.shape.image_size));
  w.u32(static_cast<std::uint32_t>(ck.epochs_done));
  w.u64(ck.seed);
  w.u64(ck.adam.step);
  w.u32(static_cast<std::uint32_t>(named.size()));
  const std::size_t start = w.size();
  w.str(ck.config_text);
  for (const auto& [name, t] : named) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t->shape.size()));
    for (std::size_t d : t->shape) w.u32(static_cast<std::uint32_t>(d));
    w.f64s(t->data);
  }
  io::seal(w, start);
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& what) {
  io::Reader r(bytes, what);
  Checkpoint ck;
  ck.model.bank = decode_bank(r);
  r.expect_magic(kCheckpointMagic);
  const auto version = r.u16();
  if (version != kCheckpointVersion) {
    throw VersionError(what + ": checkpoint format version " + std::to_string(version));
  }
  ck.model.shape.image_size = r.u32();
  ck.epochs_done = r.u32();
  ck.seed = r.u64();
  ck.adam.step = r.u64();
  const std::size_t count = r.u32();
  const std::size_t start = r.position();
  ck.config_text = r.str();
  std::vector<std::pair<std::string, Tensor>> named;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::size_t rank = r.u32();
    if (rank > 8) throw CorruptFileError(what + ": implausible tensor rank");
    Shape s(rank);
    for (auto& d : s) d = r.u32();
    if (numel(s) > r.remaining() / 8) throw CorruptFileError(what + ": truncated tensor " + name);
    Tensor t(s);
    r.f64s(t.data);
    named.emplace_back(std::move(name), std::move(t));
  }
  io::verify_seal(r, start);
  if (r.remaining() != 0) throw CorruptFileError(what + ": trailing bytes");

  auto find = [&](const std::string& name) -> Tensor& {
    for (auto& [n, t] : named) {
      if (n == name) return t;
    }
    throw CorruptFileError(what + ": missing tensor " + name);
  };
  auto params = ck.model.parameters();
  for (auto& p : params) {
    if (p.group != ParamGroup::kBank) *p.tensor = find(p.name);
    ck.adam.m.push_back(find(std::string("adam_m.") + p.name));
    ck.adam.v.push_back(find(std::string("adam_v.") + p.name));
  }
  auto& s = ck.model.shape;
  s.hidden_channels = ck.model.conv1_w.shape.at(0);
  s.feature_channels = ck.model.conv2_w.shape.at(0);
  s.head_channels = ck.model.cls_conv_w.shape.at(0);
  s.n_bases = ck.model.bank.n_bases;
  try {
    ck.model.validate();
  } catch (const Error& e) {
    throw CorruptFileError(what + ": " + e.what());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.adam.m[i].shape != params[i].tensor->shape || ck.adam.v[i].shape != params[i].tensor->shape) {
      throw CorruptFileError(what + ": optimizer state does not match parameters");
    }
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
  return decode_checkpoint(io::read_file(path), path.string());
}

}  // namespace ttdg
