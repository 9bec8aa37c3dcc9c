#include <CLI11.hpp>

#include <optional>
#include <string>

#include "showcase/pipeline.hpp"

namespace sp = showcase::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"Personalized visual showcase pipeline: image selection, explanation generation, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  app.add_option("--config", config_path, "Pipeline config (INI)");
  app.add_option("--seed", seed, "Override run.seed");
  app.add_option("--out", out, "Artifact directory")->capture_default_str();

  sp::CommandOptions opt;
  std::string loss_mode, checkpoint, showcases, generations;

  auto* fixture = app.add_subcommand("fixture", "Write the seeded synthetic dataset and a matching config");
  auto* distill = app.add_subcommand("distill", "Train the alignment classifier and distill explanations");
  auto* select_train = app.add_subcommand("select-train", "Train the relevance towers of the selector");
  auto* select = app.add_subcommand("select", "Select a showcase image set per user and business");
  select->add_flag("--random", opt.random, "Emit random selections instead of DPP selections");
  auto* train = app.add_subcommand("train", "Train the explanation generator");
  train->add_option("--loss-mode", loss_mode, "ce | ce+cl | ce+ccl | ce+pcl | ce+ccl+pcl (overrides train.loss_mode)");
  auto* generate = app.add_subcommand("generate", "Generate explanations for showcases");
  generate->add_option("--checkpoint", checkpoint, "Model checkpoint (default: <out>/model.json)");
  generate->add_option("--showcases", showcases, "Showcase list (default: <out>/showcases.jsonl)");
  auto* evaluate = app.add_subcommand("evaluate", "Score generations against references");
  evaluate->add_option("--generations", generations, "Generations (default: <out>/generations.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(showcase::ExitCode::kUsage);
  }

  opt.out = out;
  if (!checkpoint.empty()) opt.checkpoint = checkpoint;
  if (!showcases.empty()) opt.showcases = showcases;
  if (!generations.empty()) opt.generations = generations;

  return sp::run_command([&] {
    if (fixture->parsed()) {
      sp::cmd_fixture(opt.out, seed.value_or(0));
      return;
    }
    if (config_path.empty()) throw showcase::UsageError("--config is required for this command");
    auto cfg = sp::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!loss_mode.empty()) opt.loss_mode = showcase::pc2l::parse_loss_mode(loss_mode);
    if (distill->parsed()) sp::cmd_distill(cfg, opt);
    if (select_train->parsed()) sp::cmd_select_train(cfg, opt);
    if (select->parsed()) sp::cmd_select(cfg, opt);
    if (train->parsed()) sp::cmd_train(cfg, opt);
    if (generate->parsed()) sp::cmd_generate(cfg, opt);
    if (evaluate->parsed()) sp::cmd_evaluate(cfg, opt);
  });
}
