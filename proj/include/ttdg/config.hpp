#pragma once

// Declarative run configuration. Every key is optional; missing keys take
// the defaults below, unknown keys are rejected, and to_json() writes the
// fully materialized document used as the replay snapshot.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ttdg/datagen.hpp"
#include "ttdg/model.hpp"
#include "ttdg/trainer.hpp"

namespace ttdg {

using json = nlohmann::ordered_json;

enum class BasisSelection {
  kLearnableDsss,
  kLearnableNoDsss,
  kRandomFromSource,
  kFarthestPointFromSource,
};

inline std::string to_string(BasisSelection s) {
  switch (s) {
    case BasisSelection::kLearnableDsss: return "learnable+dsss";
    case BasisSelection::kLearnableNoDsss: return "learnable-no-dsss";
    case BasisSelection::kRandomFromSource: return "random-from-source";
    case BasisSelection::kFarthestPointFromSource: return "farthest-point-from-source";
  }
  return "?";
}

inline std::string to_string(Shifting s) {
  switch (s) {
    case Shifting::kWeighted: return "weighted-softmax";
    case Shifting::kNearest: return "nearest-basis";
    case Shifting::kNone: return "none";
  }
  return "?";
}

inline std::string to_string(SimilarityVariant v) {
  return v == SimilarityVariant::kSigmaToSigma ? "sigma-sigma" : "sigma-mu";
}

inline BasisSelection parse_selection(const std::string& s) {
  for (auto v : {BasisSelection::kLearnableDsss, BasisSelection::kLearnableNoDsss,
                 BasisSelection::kRandomFromSource, BasisSelection::kFarthestPointFromSource}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown basis selection '" + s + "'");
}

inline Shifting parse_shifting(const std::string& s) {
  for (auto v : {Shifting::kWeighted, Shifting::kNearest, Shifting::kNone}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown shifting strategy '" + s + "'");
}

inline SimilarityVariant parse_similarity(const std::string& s) {
  for (auto v : {SimilarityVariant::kSigmaToSigma, SimilarityVariant::kSigmaToMu}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown similarity variant '" + s + "'");
}

/// One ablation arm: a named override of the base experiment.
struct ArmSpec {
  std::string name;
  BasisSelection selection = BasisSelection::kLearnableDsss;
  Shifting shifting = Shifting::kWeighted;
  std::optional<double> lambda_c;
  std::optional<double> lambda_s;
};

inline std::vector<ArmSpec> default_arms() {
  return {
      {"baseline", BasisSelection::kLearnableNoDsss, Shifting::kNone, {}, {}},
      {"ttsp-no-dsss", BasisSelection::kLearnableNoDsss, Shifting::kWeighted, {}, {}},
      {"ttsp-dsss", BasisSelection::kLearnableDsss, Shifting::kWeighted, {}, {}},
      {"nearest-basis", BasisSelection::kLearnableDsss, Shifting::kNearest, {}, {}},
      {"random-selection", BasisSelection::kRandomFromSource, Shifting::kWeighted, {}, {}},
      {"fps-selection", BasisSelection::kFarthestPointFromSource, Shifting::kWeighted, {}, {}},
      {"style-loss-only", BasisSelection::kLearnableDsss, Shifting::kWeighted, 0.0, {}},
      {"content-loss-only", BasisSelection::kLearnableDsss, Shifting::kWeighted, {}, 0.0},
  };
}

struct RunConfig {
  ModelShape shape;
  SimilarityVariant similarity = SimilarityVariant::kSigmaToSigma;
  double temperature = 1.0;
  bool heads_on_projected = true;

  LossWeights loss;
  bool content_stop_gradient = false;

  AdamOptions adam;
  std::size_t epochs = 64;
  std::size_t batch_size = 32;

  std::uint64_t data_seed = 1234;
  std::size_t n_per_class = 256;
  std::vector<DomainSpec> domains = default_domains();

  std::string arm = "ttsp-dsss";
  std::uint32_t held_out = 3;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  BasisSelection selection = BasisSelection::kLearnableDsss;
  Shifting shifting = Shifting::kWeighted;

  std::vector<ArmSpec> arms = default_arms();

  ProjectionOptions projection() const { return {similarity, shifting, temperature}; }

  void validate() const {
    shape.validate();
    loss.validate();
    if (!(temperature > 0.0)) throw ConfigError("model.temperature must be > 0");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("optimizer.learning_rate must be > 0");
    if (batch_size == 0) throw ConfigError("optimizer.batch_size must be >= 1");
    if (n_per_class == 0) throw ConfigError("data.n_per_class must be >= 1");
    if (seeds.empty()) throw ConfigError("experiment.seeds must be non-empty");
    if (shape.image_size % 2) throw ConfigError("model.image_size must be even");
    std::set<std::uint32_t> ids;
    for (const auto& d : domains) {
      d.validate();
      if (!ids.insert(d.id).second) throw ConfigError("duplicate domain id " + std::to_string(d.id));
    }
    if (!ids.count(held_out)) {
      throw ConfigError("experiment.held_out " + std::to_string(held_out) + " is not a domain id");
    }
    std::set<std::string> names;
    for (const auto& a : arms) {
      if (a.name.empty()) throw ConfigError("arm names must be non-empty");
      if (!names.insert(a.name).second) throw ConfigError("duplicate arm name '" + a.name + "'");
      for (auto l : {a.lambda_c, a.lambda_s}) {
        if (l && !(*l >= 0.0)) throw ConfigError("arm '" + a.name + "': loss weights must be >= 0");
      }
    }
  }

  /// Shifting used while training. `shifting` names the test-time strategy;
  /// every projecting arm trains with the softmax projection so arms that
  /// differ only at test time share the same trained model.
  Shifting train_shifting() const {
    return shifting == Shifting::kNone ? Shifting::kNone : Shifting::kWeighted;
  }

  /// Training settings implied by the selection strategy and loss weights.
  TrainConfig train_config() const {
    TrainConfig t;
    t.shape = shape;
    t.loss = loss;
    t.forward = {{similarity, train_shifting(), temperature}, heads_on_projected,
                 content_stop_gradient};
    t.adam = adam;
    t.epochs = epochs;
    t.batch_size = batch_size;
    switch (selection) {
      case BasisSelection::kLearnableDsss:
        t.bank_mode = BankMode::kLearnable;
        break;
      case BasisSelection::kLearnableNoDsss:
        t.bank_mode = BankMode::kLearnable;
        t.loss.lambda_s = 0.0;
        t.loss.lambda_c = 0.0;
        break;
      case BasisSelection::kRandomFromSource:
        t.bank_mode = BankMode::kRandomFromSource;
        t.loss.lambda_s = 0.0;
        t.loss.lambda_c = 0.0;
        break;
      case BasisSelection::kFarthestPointFromSource:
        t.bank_mode = BankMode::kFarthestPointFromSource;
        t.loss.lambda_s = 0.0;
        t.loss.lambda_c = 0.0;
        break;
    }
    return t;
  }

  /// This config with one arm's overrides applied.
  RunConfig with_arm(const ArmSpec& a) const {
    RunConfig r = *this;
    r.arm = a.name;
    r.selection = a.selection;
    r.shifting = a.shifting;
    if (a.lambda_c) r.loss.lambda_c = *a.lambda_c;
    if (a.lambda_s) r.loss.lambda_s = *a.lambda_s;
    return r;
  }

  const ArmSpec& find_arm(const std::string& name) const {
    for (const auto& a : arms) {
      if (a.name == name) return a;
    }
    throw ConfigError("no arm named '" + name + "'");
  }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find_if(allowed.begin(), allowed.end(),
                     [&](const char* k) { return it.key() == k; }) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

template <class T>
void read(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline json arm_to_json(const ArmSpec& a) {
  json j;
  j["name"] = a.name;
  j["selection"] = to_string(a.selection);
  j["shifting"] = to_string(a.shifting);
  if (a.lambda_c) j["lambda_c"] = *a.lambda_c;
  if (a.lambda_s) j["lambda_s"] = *a.lambda_s;
  return j;
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"image_size", c.shape.image_size},
                {"hidden_channels", c.shape.hidden_channels},
                {"feature_channels", c.shape.feature_channels},
                {"head_channels", c.shape.head_channels},
                {"n_bases", c.shape.n_bases},
                {"similarity", to_string(c.similarity)},
                {"temperature", c.temperature},
                {"heads_on_projected", c.heads_on_projected}};
  j["loss"] = {{"lambda_d", c.loss.lambda_d},
               {"lambda_c", c.loss.lambda_c},
               {"lambda_s", c.loss.lambda_s},
               {"content_stop_gradient", c.content_stop_gradient}};
  j["optimizer"] = {{"learning_rate", c.adam.learning_rate},
                    {"beta1", c.adam.beta1},
                    {"beta2", c.adam.beta2},
                    {"eps", c.adam.eps},
                    {"epochs", c.epochs},
                    {"batch_size", c.batch_size}};
  json domains = json::array();
  for (const auto& d : c.domains) {
    domains.push_back({{"id", d.id},
                       {"gain", d.gain},
                       {"bias", d.bias},
                       {"illumination", d.illumination},
                       {"noise", d.noise}});
  }
  j["data"] = {{"seed", c.data_seed}, {"n_per_class", c.n_per_class}, {"domains", domains}};
  j["experiment"] = {{"arm", c.arm},
                     {"held_out", c.held_out},
                     {"seeds", c.seeds},
                     {"selection", to_string(c.selection)},
                     {"shifting", to_string(c.shifting)}};
  json arms = json::array();
  for (const auto& a : c.arms) arms.push_back(detail::arm_to_json(a));
  j["arms"] = arms;
  return j;
}

inline RunConfig config_from_json(const json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, "config",
                 {"model", "loss", "optimizer", "data", "experiment", "arms", "invocation"});
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, "model",
                   {"image_size", "hidden_channels", "feature_channels", "head_channels",
                    "n_bases", "similarity", "temperature", "heads_on_projected"});
    read(m, "image_size", c.shape.image_size, "model");
    read(m, "hidden_channels", c.shape.hidden_channels, "model");
    read(m, "feature_channels", c.shape.feature_channels, "model");
    read(m, "head_channels", c.shape.head_channels, "model");
    read(m, "n_bases", c.shape.n_bases, "model");
    std::string sim = to_string(c.similarity);
    read(m, "similarity", sim, "model");
    c.similarity = parse_similarity(sim);
    read(m, "temperature", c.temperature, "model");
    read(m, "heads_on_projected", c.heads_on_projected, "model");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    reject_unknown(l, "loss", {"lambda_d", "lambda_c", "lambda_s", "content_stop_gradient"});
    read(l, "lambda_d", c.loss.lambda_d, "loss");
    read(l, "lambda_c", c.loss.lambda_c, "loss");
    read(l, "lambda_s", c.loss.lambda_s, "loss");
    read(l, "content_stop_gradient", c.content_stop_gradient, "loss");
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    reject_unknown(o, "optimizer",
                   {"learning_rate", "beta1", "beta2", "eps", "epochs", "batch_size"});
    read(o, "learning_rate", c.adam.learning_rate, "optimizer");
    read(o, "beta1", c.adam.beta1, "optimizer");
    read(o, "beta2", c.adam.beta2, "optimizer");
    read(o, "eps", c.adam.eps, "optimizer");
    read(o, "epochs", c.epochs, "optimizer");
    read(o, "batch_size", c.batch_size, "optimizer");
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    reject_unknown(d, "data", {"seed", "n_per_class", "domains"});
    read(d, "seed", c.data_seed, "data");
    read(d, "n_per_class", c.n_per_class, "data");
    if (d.contains("domains")) {
      if (!d["domains"].is_array()) throw ConfigError("data.domains: expected an array");
      c.domains.clear();
      for (const auto& e : d["domains"]) {
        reject_unknown(e, "data.domains[]", {"id", "gain", "bias", "illumination", "noise"});
        DomainSpec s;
        if (!e.contains("id")) throw ConfigError("data.domains[]: missing id");
        read(e, "id", s.id, "data.domains[]");
        read(e, "gain", s.gain, "data.domains[]");
        read(e, "bias", s.bias, "data.domains[]");
        read(e, "illumination", s.illumination, "data.domains[]");
        read(e, "noise", s.noise, "data.domains[]");
        c.domains.push_back(s);
      }
    }
  }
  if (j.contains("experiment")) {
    const auto& e = j["experiment"];
    reject_unknown(e, "experiment", {"arm", "held_out", "seeds", "selection", "shifting"});
    read(e, "arm", c.arm, "experiment");
    read(e, "held_out", c.held_out, "experiment");
    read(e, "seeds", c.seeds, "experiment");
    std::string sel = to_string(c.selection), sh = to_string(c.shifting);
    read(e, "selection", sel, "experiment");
    read(e, "shifting", sh, "experiment");
    c.selection = parse_selection(sel);
    c.shifting = parse_shifting(sh);
  }
  if (j.contains("arms")) {
    if (!j["arms"].is_array()) throw ConfigError("arms: expected an array");
    c.arms.clear();
    for (const auto& e : j["arms"]) {
      reject_unknown(e, "arms[]", {"name", "selection", "shifting", "lambda_c", "lambda_s"});
      ArmSpec a;
      std::string sel = to_string(a.selection), sh = to_string(a.shifting);
      read(e, "name", a.name, "arms[]");
      read(e, "selection", sel, "arms[]");
      read(e, "shifting", sh, "arms[]");
      a.selection = parse_selection(sel);
      a.shifting = parse_shifting(sh);
      if (e.contains("lambda_c")) {
        double v = 0;
        read(e, "lambda_c", v, "arms[]");
        a.lambda_c = v;
      }
      if (e.contains("lambda_s")) {
        double v = 0;
        read(e, "lambda_s", v, "arms[]");
        a.lambda_s = v;
      }
      c.arms.push_back(a);
    }
  }
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text, const std::string& what = "config") {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(what + ": " + e.what());
  }
  return config_from_json(j);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Materialized snapshot text; `invocation` records how the command ran.
inline std::string config_snapshot(const RunConfig& c, const json& invocation = json::object()) {
  json j = to_json(c);
  if (!invocation.empty()) j["invocation"] = invocation;
  return j.dump(2) + "\n";
}

/// JSON-pointer paths of every leaf value that differs between two configs.
inline std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  const json flat_a = to_json(a).flatten();
  const json flat_b = to_json(b).flatten();
  for (auto it = flat_a.begin(); it != flat_a.end(); ++it) {
    if (!flat_b.contains(it.key()) || flat_b[it.key()] != it.value()) out.push_back(it.key());
  }
  for (auto it = flat_b.begin(); it != flat_b.end(); ++it) {
    if (!flat_a.contains(it.key())) out.push_back(it.key());
  }
  return out;
}

}  // namespace ttdg
