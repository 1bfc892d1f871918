#pragma once

// Leave-one-domain-out experiment driver: trains every (arm, seed) pair,
// scores the held-out domain and writes one self-contained directory per run.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ttdg/config.hpp"
#include "ttdg/metrics.hpp"
#include "ttdg/trainer.hpp"

namespace ttdg {

/// Worker count from TTDG_THREADS (default 1, never more than `jobs`).
inline std::size_t thread_budget(std::size_t jobs) {
  std::size_t n = 1;
  if (const char* env = std::getenv("TTDG_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw ConfigError("TTDG_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    n = std::size_t(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs fn(i) for i in [0, jobs) on up to `threads` workers. The first
/// exception (lowest job index) is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t jobs, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(jobs);
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < jobs && !failed; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
            failed = true;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

inline MeanStd mean_std(const std::vector<double>& v) {
  if (v.empty()) throw DataError("mean_std: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / double(v.size());
  if (v.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / double(v.size() - 1))};
}

struct SeedResult {
  std::uint64_t seed = 0;
  MetricsReport metrics;
  std::vector<EpochLog> log;
  double mu_cos_init = 0.0;
  double mu_cos_final = 0.0;
  std::size_t dsss_invocations = 0;
  double seconds = 0.0;
};

struct ArmResult {
  std::string arm;
  std::vector<SeedResult> seeds;
  MeanStd hter;
  MeanStd auc;
};

inline std::vector<SampleRecord> make_benchmark(const RunConfig& cfg) {
  GeneratorOptions opt;
  opt.image_size = cfg.shape.image_size;
  return generate_benchmark(cfg.domains, cfg.n_per_class, cfg.data_seed, opt);
}

// ---------------------------------------------------------------------------
// CSV writers

inline std::string loss_log_csv(const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os << "epoch,total,cls,dep,sty,con\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << format_double(l.total) << ',' << format_double(l.cls) << ','
       << format_double(l.dep) << ',' << format_double(l.sty) << ',' << format_double(l.con)
       << '\n';
  }
  return os.str();
}

inline std::string metrics_csv(const MetricsReport& r) {
  return metrics_csv_header() + "\n" + metrics_csv_row(r) + "\n";
}

struct FeatureDump {
  std::string pre;
  std::string post;
  std::size_t rows = 0;  // per file
};

/// Pooled per-channel spatial mean and std of the features of every sample,
/// before and after style projection.
inline FeatureDump export_features(const Model& model, const ProjectionOptions& projection,
                                   const std::vector<SampleRecord>& samples,
                                   std::size_t chunk = 128) {
  if (samples.empty()) throw DataError("export_features: no samples");
  const std::size_t C = model.shape.feature_channels;
  std::ostringstream pre, post;
  for (auto* os : {&pre, &post}) {
    *os << "sample_id,label,domain";
    for (std::size_t c = 0; c < C; ++c) *os << ",mean_" << c;
    for (std::size_t c = 0; c < C; ++c) *os << ",std_" << c;
    *os << '\n';
  }
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    const auto batch = make_batch(samples, std::span(idx).subspan(start, end - start));
    Graph g(Mode::kInference);
    const auto mv = bind_model(g, model, {false, false, false});
    const Var feats = extract_features(mv, g.constant(batch.images));
    const auto proj = project_features(feats, mv.bank, projection);
    const auto after = mine_style(proj.features);
    auto emit = [&](std::ostringstream& os, const StyleVars& st, std::size_t m) {
      const auto& r = samples[start + m];
      os << r.sample_id << ',' << r.cls_label << ',' << r.domain;
      for (std::size_t c = 0; c < C; ++c) os << ',' << format_double(st.mu.value()[m * C + c]);
      for (std::size_t c = 0; c < C; ++c) os << ',' << format_double(st.sigma.value()[m * C + c]);
      os << '\n';
    };
    for (std::size_t m = 0; m < batch.size(); ++m) {
      emit(pre, proj.source, m);
      emit(post, after, m);
    }
  }
  return {pre.str(), post.str(), samples.size()};
}

inline ScoreSet score_samples(const Model& model, const ProjectionOptions& projection,
                              const std::vector<SampleRecord>& samples) {
  ScoreSet s;
  s.scores = predict(model, projection, samples).live_prob;
  for (const auto& r : samples) s.labels.push_back(r.cls_label);
  return s;
}

// ---------------------------------------------------------------------------
// Runs

/// A trained model before evaluation; shared by arms that train identically.
struct TrainedSeed {
  Model model;
  AdamState adam;
  std::size_t epochs_done = 0;
  std::vector<EpochLog> log;
  double mu_cos_init = 0.0;
  double mu_cos_final = 0.0;
  std::size_t dsss_invocations = 0;
  double seconds = 0.0;
};

inline TrainedSeed train_seed(const RunConfig& cfg, const DomainSplit& split, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  Trainer trainer(cfg.train_config(), seed);
  TrainedSeed t;
  t.mu_cos_init = mean_abs_mu_cosine(trainer.model().bank);
  t.log = trainer.train(split.train);
  t.mu_cos_final = mean_abs_mu_cosine(trainer.model().bank);
  t.dsss_invocations = trainer.counters().dsss_invocations;
  t.model = trainer.model();
  t.adam = trainer.adam();
  t.epochs_done = trainer.epochs_done();
  t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return t;
}

/// Scores the held-out domain with the arm's test-time projection. When
/// `out` is non-empty the run directory is filled with metrics, bank,
/// checkpoint, feature dumps, loss log and config snapshot.
inline SeedResult finish_seed(const RunConfig& cfg, const TrainedSeed& t,
                              const DomainSplit& split, std::uint64_t seed,
                              const std::filesystem::path& out = {}) {
  SeedResult r;
  r.seed = seed;
  r.log = t.log;
  r.mu_cos_init = t.mu_cos_init;
  r.mu_cos_final = t.mu_cos_final;
  r.dsss_invocations = t.dsss_invocations;
  r.seconds = t.seconds;
  r.metrics = evaluate_scores(score_samples(t.model, cfg.projection(), split.test));
  if (!out.empty()) {
    std::filesystem::create_directories(out);
    const std::string snapshot =
        config_snapshot(cfg, {{"command", "run-ablation"}, {"seed", seed}});
    io::write_text_atomic(out / "metrics.csv", metrics_csv(r.metrics));
    io::write_text_atomic(out / "loss_log.csv", loss_log_csv(r.log));
    save_bank(t.model.bank, out / "bank.ttdg");
    save_checkpoint({snapshot, t.model, t.adam, t.epochs_done, seed}, out / "checkpoint.ttdg");
    const auto dump = export_features(t.model, cfg.projection(), split.test);
    io::write_text_atomic(out / "features_pre.csv", dump.pre);
    io::write_text_atomic(out / "features_post.csv", dump.post);
    io::write_text_atomic(out / "config.snapshot", snapshot);
  }
  return r;
}

inline SeedResult run_seed(const RunConfig& cfg, const DomainSplit& split, std::uint64_t seed,
                           const std::filesystem::path& out = {}) {
  return finish_seed(cfg, train_seed(cfg, split, seed), split, seed, out);
}

/// Everything that influences training, as canonical text. Arms with equal
/// signatures produce bit-identical models for a given seed.
inline std::string training_signature(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.arm.clear();
  c.arms.clear();
  c.shifting = cfg.train_shifting();
  return to_json(c).dump();
}

inline ArmResult summarize_arm(const std::string& arm, std::vector<SeedResult> seeds) {
  ArmResult a;
  a.arm = arm;
  a.seeds = std::move(seeds);
  std::vector<double> h, u;
  for (const auto& s : a.seeds) {
    h.push_back(s.metrics.hter);
    u.push_back(s.metrics.auc);
  }
  a.hter = mean_std(h);
  a.auc = mean_std(u);
  return a;
}

inline std::string arm_summary_csv(const ArmResult& a) {
  std::ostringstream os;
  os << "seed,hter,auc\n";
  for (const auto& s : a.seeds) {
    os << s.seed << ',' << format_double(s.metrics.hter) << ',' << format_double(s.metrics.auc)
       << '\n';
  }
  os << "mean," << format_double(a.hter.mean) << ',' << format_double(a.auc.mean) << '\n';
  os << "std," << format_double(a.hter.std) << ',' << format_double(a.auc.std) << '\n';
  return os.str();
}

inline std::string ablation_summary_csv(const std::vector<ArmResult>& arms) {
  std::ostringstream os;
  os << "arm,seeds,hter_mean,hter_std,auc_mean,auc_std\n";
  for (const auto& a : arms) {
    os << a.arm << ',' << a.seeds.size() << ',' << format_double(a.hter.mean) << ','
       << format_double(a.hter.std) << ',' << format_double(a.auc.mean) << ','
       << format_double(a.auc.std) << '\n';
  }
  return os.str();
}

/// Fields an arm is allowed to change relative to the base config.
inline bool is_arm_dimension(const std::string& path) {
  return path == "/experiment/arm" || path == "/experiment/selection" ||
         path == "/experiment/shifting" || path == "/loss/lambda_c" || path == "/loss/lambda_s";
}

/// Arm-resolved configs built from one base; throws if any arm would differ
/// from the base outside the arm dimensions.
inline std::vector<RunConfig> build_arms(const RunConfig& base,
                                         const std::vector<std::string>& names = {}) {
  std::vector<RunConfig> out;
  for (const auto& a : base.arms) {
    if (!names.empty() && std::find(names.begin(), names.end(), a.name) == names.end()) continue;
    RunConfig r = base.with_arm(a);
    for (const auto& path : config_diff(base, r)) {
      if (!is_arm_dimension(path)) {
        throw ConfigError("arm '" + a.name + "' differs from the base config at " + path);
      }
    }
    out.push_back(std::move(r));
  }
  for (const auto& n : names) base.find_arm(n);
  if (out.empty()) throw ConfigError("no arms selected");
  return out;
}

inline std::filesystem::path run_dir(const std::filesystem::path& root, const std::string& arm,
                                     std::uint64_t seed) {
  return root / "runs" / arm / std::to_string(seed);
}

/// Every (arm, seed) pair of the selected arms, spread over TTDG_THREADS
/// workers. Arms that train identically share one training run per seed.
/// Results are ordered as in the config regardless of scheduling.
inline std::vector<ArmResult> run_ablation(const RunConfig& base,
                                           const std::filesystem::path& root,
                                           const std::vector<std::string>& names = {}) {
  const auto arms = build_arms(base, names);
  const auto all = make_benchmark(base);
  const auto split = leave_one_out_split(all, base.held_out);
  const std::size_t S = base.seeds.size();

  std::vector<std::string> signatures;
  std::vector<std::vector<std::size_t>> groups;  // arm indices per signature
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const std::string sig = training_signature(arms[a]);
    const auto it = std::find(signatures.begin(), signatures.end(), sig);
    if (it == signatures.end()) {
      signatures.push_back(sig);
      groups.push_back({a});
    } else {
      groups[std::size_t(it - signatures.begin())].push_back(a);
    }
  }

  std::vector<std::vector<SeedResult>> results(arms.size(), std::vector<SeedResult>(S));
  const std::size_t jobs = groups.size() * S;
  parallel_for(jobs, thread_budget(jobs), [&](std::size_t job) {
    const auto& group = groups[job / S];
    const std::uint64_t seed = base.seeds[job % S];
    const auto trained = train_seed(arms[group.front()], split, seed);
    for (std::size_t a : group) {
      const auto out = root.empty() ? std::filesystem::path{} : run_dir(root, arms[a].arm, seed);
      results[a][job % S] = finish_seed(arms[a], trained, split, seed, out);
    }
  });
  std::vector<ArmResult> out;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    out.push_back(summarize_arm(arms[a].arm, std::move(results[a])));
    if (!root.empty()) {
      io::write_text_atomic(root / "runs" / arms[a].arm / "summary.csv",
                            arm_summary_csv(out.back()));
    }
  }
  if (!root.empty()) io::write_text_atomic(root / "ablation_summary.csv", ablation_summary_csv(out));
  return out;
}

}  // namespace ttdg
