// ttdg command-line entry point.

#include <iostream>

#include <CLI11.hpp>

#include "ttdg/commands.hpp"

int main(int argc, char** argv) {
  using namespace ttdg;
  CLI::App app{"Test-time style projection for face anti-spoofing on a synthetic benchmark"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Render the synthetic domains to disk");
  generate->add_option("--config", gen.config, "Run config (JSON)")->check(CLI::ExistingFile);
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--seed", gen.seed, "Data seed (overrides data.seed)");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train on every domain except the held-out one");
  train->add_option("--config", tr.config, "Run config (JSON)")->check(CLI::ExistingFile);
  train->add_option("--data", tr.data, "Directory written by generate")->required();
  train->add_option("--out", tr.out, "Output directory")->required();
  train->add_option("--seed", tr.seed, "Training seed (default: first experiment seed)");
  train->add_option("--arm", tr.arm, "Apply the overrides of a configured arm");
  train->add_option("--resume", tr.resume, "Continue from a checkpoint");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score a domain with a trained checkpoint");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint.ttdg")->required();
  eval->add_option("--data", ev.data, "Directory written by generate")->required();
  eval->add_option("--out", ev.out, "Output directory")->required();
  eval->add_option("--domain", ev.domain, "Domain id (default: held-out domain)");

  ProjectArgs pj;
  auto* project = app.add_subcommand("project", "Per-sample style projection diagnostic");
  project->add_option("--checkpoint", pj.checkpoint, "checkpoint.ttdg")->required();
  project->add_option("--sample-file", pj.sample_file, "Dataset file")->required();
  project->add_option("--index", pj.index, "Sample index within the file");
  project->add_option("--out", pj.out, "Output directory")->required();

  ExportArgs ex;
  auto* exp = app.add_subcommand("export-features", "Dump pooled features before/after projection");
  exp->add_option("--checkpoint", ex.checkpoint, "checkpoint.ttdg")->required();
  exp->add_option("--data", ex.data, "Directory written by generate")->required();
  exp->add_option("--out", ex.out, "Output directory")->required();
  exp->add_option("--domain", ex.domain, "Restrict to one domain id");

  AblationArgs ab;
  auto* abl = app.add_subcommand("run-ablation", "Train and score every arm over every seed");
  abl->add_option("--config", ab.config, "Run config (JSON)")->check(CLI::ExistingFile);
  abl->add_option("--out", ab.out, "Output root (runs/<arm>/<seed>/ is created below it)")
      ->required();
  abl->add_option("--arms", ab.arms, "Subset of arm names");
  abl->add_option("--seeds", ab.seeds, "Override experiment.seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*generate) return cmd_generate(gen, std::cout, std::cerr);
  if (*train) return cmd_train(tr, std::cout, std::cerr);
  if (*eval) return cmd_eval(ev, std::cout, std::cerr);
  if (*project) return cmd_project(pj, std::cout, std::cerr);
  if (*exp) return cmd_export_features(ex, std::cout, std::cerr);
  return cmd_run_ablation(ab, std::cout, std::cerr);
}
