#pragma once

// Command implementations behind the ttdg executable. Each returns a process
// exit code: 0 success, 2 config error, 3 data error, 4 numerical failure.

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ttdg/harness.hpp"

namespace ttdg {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumerical = 4,
};

inline int guarded(std::ostream& err, const std::function<void()>& body) {
  try {
    body();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInternal;
  }
}

namespace detail {

inline RunConfig config_or_default(const std::optional<std::filesystem::path>& path) {
  return path ? load_config(*path) : RunConfig{};
}

inline std::string path_text(const std::optional<std::filesystem::path>& p) {
  return p ? p->string() : std::string();
}

inline RunConfig checkpoint_config(const Checkpoint& ck, const std::string& what) {
  RunConfig cfg = parse_config(ck.config_text, what + " (embedded config)");
  if (cfg.shape != ck.model.shape) throw DataError(what + ": embedded config disagrees with tensors");
  return cfg;
}

inline std::vector<SampleRecord> select_domain(std::vector<SampleRecord> all,
                                               std::optional<std::uint32_t> domain) {
  if (!domain) return all;
  std::vector<SampleRecord> out;
  for (auto& r : all) {
    if (r.domain == *domain) out.push_back(std::move(r));
  }
  if (out.empty()) throw DataError("no samples for domain " + std::to_string(*domain));
  return out;
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: " + dir.string());
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string digest(const std::vector<double>& v) {
  std::vector<std::uint8_t> bytes(v.size() * sizeof(double));
  std::memcpy(bytes.data(), v.data(), bytes.size());
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= double(v.size());
  char buf[64];
  std::snprintf(buf, sizeof buf, "mean %.6f fnv1a %s", mean, hex64(io::fnv1a64(bytes)).c_str());
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;  // overrides data.seed
};

inline int cmd_generate(const GenerateArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = detail::config_or_default(a.config);
    if (a.seed) cfg.data_seed = *a.seed;
    // Everything is rendered before the first write so a failure leaves no
    // partial dataset behind.
    const auto all = make_benchmark(cfg);
    std::vector<std::pair<std::filesystem::path, std::vector<std::uint8_t>>> files;
    for (const auto& d : cfg.domains) {
      std::vector<SampleRecord> part;
      for (const auto& r : all) {
        if (r.domain == d.id) part.push_back(r);
      }
      files.emplace_back(a.out / domain_file_name(d.id),
                         encode_dataset(part, cfg.shape.image_size));
    }
    detail::ensure_dir(a.out);
    for (const auto& [path, bytes] : files) io::write_file_atomic(path, bytes);
    io::write_text_atomic(a.out / "manifest.csv", manifest_csv(all));
    io::write_text_atomic(a.out / "config.snapshot",
                          config_snapshot(cfg, {{"command", "generate"},
                                                {"config", detail::path_text(a.config)},
                                                {"out", a.out.string()}}));
    for (const auto& [path, bytes] : files) {
      out << path.filename().string() << "  fnv1a " << detail::hex64(io::fnv1a64(bytes)) << '\n';
    }
    out << all.size() << " samples in " << files.size() << " domains\n";
  });
}

struct TrainArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> arm;
  std::optional<std::filesystem::path> resume;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = detail::config_or_default(a.config);
    if (a.arm) cfg = cfg.with_arm(cfg.find_arm(*a.arm));
    const auto data = load_dataset_dir(a.data);
    if (data.image_size != cfg.shape.image_size) {
      throw DataError("dataset image size " + std::to_string(data.image_size) +
                      " differs from model.image_size");
    }
    const auto split = leave_one_out_split(data.samples, cfg.held_out);
    if (split.train.empty()) throw DataError("no training domains besides the held-out one");

    std::optional<Trainer> trainer;
    if (a.resume) {
      Checkpoint ck = load_checkpoint(*a.resume);
      if (a.seed && *a.seed != ck.seed) {
        throw ConfigError("--seed differs from the seed stored in the resumed checkpoint");
      }
      trainer.emplace(cfg.train_config(), ck.seed, std::move(ck.model), std::move(ck.adam),
                      ck.epochs_done);
    } else {
      trainer.emplace(cfg.train_config(), a.seed.value_or(cfg.seeds.front()));
    }
    const std::string snapshot =
        config_snapshot(cfg, {{"command", "train"},
                              {"config", detail::path_text(a.config)},
                              {"data", a.data.string()},
                              {"out", a.out.string()},
                              {"seed", trainer->seed()},
                              {"resume", detail::path_text(a.resume)}});
    std::vector<EpochLog> logs;
    while (trainer->epochs_done() < cfg.epochs) {
      logs.push_back(trainer->train_epoch(split.train));
      const auto& l = logs.back();
      out << "epoch " << l.epoch << "  total " << format_double(l.total) << "  cls "
          << format_double(l.cls) << "  sty " << format_double(l.sty) << "  con "
          << format_double(l.con) << '\n';
    }
    detail::ensure_dir(a.out);
    save_checkpoint({snapshot, trainer->model(), trainer->adam(), trainer->epochs_done(),
                     trainer->seed()},
                    a.out / "checkpoint.ttdg");
    save_bank(trainer->model().bank, a.out / "bank.ttdg");
    io::write_text_atomic(a.out / "loss_log.csv", loss_log_csv(logs));
    io::write_text_atomic(a.out / "config.snapshot", snapshot);
    out << "dsss invocations " << trainer->counters().dsss_invocations << '\n';
  });
}

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint32_t> domain;  // default: the held-out domain
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const RunConfig cfg = detail::checkpoint_config(ck, a.checkpoint.string());
    const auto samples =
        detail::select_domain(load_dataset_dir(a.data).samples, a.domain.value_or(cfg.held_out));
    const auto report = evaluate_scores(score_samples(ck.model, cfg.projection(), samples));
    detail::ensure_dir(a.out);
    io::write_text_atomic(a.out / "metrics.csv", metrics_csv(report));
    io::write_text_atomic(a.out / "report.txt", metrics_table(report));
    io::write_text_atomic(a.out / "config.snapshot",
                          config_snapshot(cfg, {{"command", "eval"},
                                                {"checkpoint", a.checkpoint.string()},
                                                {"data", a.data.string()},
                                                {"domain", a.domain.value_or(cfg.held_out)},
                                                {"out", a.out.string()}}));
    out << metrics_table(report);
  });
}

struct ProjectArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path sample_file;
  std::size_t index = 0;
  std::filesystem::path out;
};

/// Per-sample report: style distances and weights per basis, the projected
/// style digest and the classifier logits.
inline std::string projection_report(const Model& model, const ProjectionOptions& opt,
                                     const SampleRecord& r) {
  Graph g(Mode::kInference);
  const auto mv = bind_model(g, model, {false, false, false});
  const auto batch = make_batch(std::vector<SampleRecord>{r}, std::vector<std::size_t>{0});
  const Var feats = extract_features(mv, g.constant(batch.images));
  const auto proj = project_features(feats, mv.bank, opt);
  // With shifting disabled the pipeline skips the weights; report the softmax
  // ones anyway so the diagnostic stays comparable.
  ProjectionOptions shown = opt;
  if (opt.shifting == Shifting::kNone) shown.shifting = Shifting::kWeighted;
  const Var d = style_distances(proj.source, mv.bank, opt.variant);
  const Var w = projection_weights(d, shown);
  const auto projected = project_style(w, mv.bank);
  const Tensor logits = classify(mv, proj.features).value();

  std::ostringstream os;
  os << std::fixed << std::setprecision(6);
  os << "sample " << r.sample_id << "  label " << (r.cls_label == kLabelLive ? "live" : "spoof")
     << "  domain " << r.domain << "  shifting " << to_string(opt.shifting) << '\n';
  os << "basis  d_n  w_n\n";
  double sum = 0.0;
  for (std::size_t n = 0; n < d.size(); ++n) {
    os << n << "  " << d.value()[n] << "  " << w.value()[n] << '\n';
    sum += w.value()[n];
  }
  os << "sum w_n = " << sum << '\n';
  os << "projected mu    " << detail::digest(projected.mu.value().data) << '\n';
  os << "projected sigma " << detail::digest(projected.sigma.value().data) << '\n';
  os << "logits spoof " << logits[0] << "  live " << logits[1] << '\n';
  os << "live probability " << sigmoid(logits[1] - logits[0]) << '\n';
  return os.str();
}

inline int cmd_project(const ProjectArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const RunConfig cfg = detail::checkpoint_config(ck, a.checkpoint.string());
    const auto data = load_dataset(a.sample_file);
    if (a.index >= data.samples.size()) {
      throw DataError("sample index " + std::to_string(a.index) + " out of range (" +
                      std::to_string(data.samples.size()) + " samples)");
    }
    if (data.image_size != ck.model.shape.image_size) {
      throw DataError("sample image size differs from the checkpoint");
    }
    const std::string text = projection_report(ck.model, cfg.projection(), data.samples[a.index]);
    detail::ensure_dir(a.out);
    io::write_text_atomic(a.out / "projection.txt", text);
    io::write_text_atomic(a.out / "config.snapshot",
                          config_snapshot(cfg, {{"command", "project"},
                                                {"checkpoint", a.checkpoint.string()},
                                                {"sample_file", a.sample_file.string()},
                                                {"index", a.index},
                                                {"out", a.out.string()}}));
    out << text;
  });
}

struct ExportArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint32_t> domain;  // default: every domain
};

inline int cmd_export_features(const ExportArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const RunConfig cfg = detail::checkpoint_config(ck, a.checkpoint.string());
    const auto samples = detail::select_domain(load_dataset_dir(a.data).samples, a.domain);
    const auto dump = export_features(ck.model, cfg.projection(), samples);
    detail::ensure_dir(a.out);
    io::write_text_atomic(a.out / "features_pre.csv", dump.pre);
    io::write_text_atomic(a.out / "features_post.csv", dump.post);
    nlohmann::ordered_json inv = {{"command", "export-features"},
                                  {"checkpoint", a.checkpoint.string()},
                                  {"data", a.data.string()},
                                  {"out", a.out.string()}};
    if (a.domain) inv["domain"] = *a.domain;
    io::write_text_atomic(a.out / "config.snapshot", config_snapshot(cfg, inv));
    out << dump.rows << " rows each in features_pre.csv and features_post.csv\n";
  });
}

struct AblationArgs {
  std::optional<std::filesystem::path> config;
  std::filesystem::path out;
  std::vector<std::string> arms;        // empty: every configured arm
  std::vector<std::uint64_t> seeds;     // empty: experiment.seeds
};

inline std::string ablation_table(const std::vector<ArmResult>& arms) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %5s %18s %18s  %s\n", "arm", "seeds", "HTER % (mean/std)",
                "AUC % (mean/std)", "per-seed HTER %");
  os << buf;
  for (const auto& a : arms) {
    std::snprintf(buf, sizeof buf, "%-20s %5zu %9.3f %8.3f %9.3f %8.3f ", a.arm.c_str(),
                  a.seeds.size(), 100 * a.hter.mean, 100 * a.hter.std, 100 * a.auc.mean,
                  100 * a.auc.std);
    os << buf;
    for (const auto& s : a.seeds) {
      std::snprintf(buf, sizeof buf, " %.3f", 100 * s.metrics.hter);
      os << buf;
    }
    os << '\n';
  }
  os << "note: " << kThresholdCaveat << '\n';
  return os.str();
}

inline int cmd_run_ablation(const AblationArgs& a, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = detail::config_or_default(a.config);
    if (!a.seeds.empty()) cfg.seeds = a.seeds;
    cfg.validate();
    detail::ensure_dir(a.out);
    nlohmann::ordered_json inv = {{"command", "run-ablation"},
                                  {"config", detail::path_text(a.config)},
                                  {"out", a.out.string()},
                                  {"arms", a.arms}};
    io::write_text_atomic(a.out / "config.snapshot", config_snapshot(cfg, inv));
    const auto results = run_ablation(cfg, a.out, a.arms);
    out << ablation_table(results);
  });
}

}  // namespace ttdg
