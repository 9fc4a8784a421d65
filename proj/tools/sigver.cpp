// Command-line driver for the signature verification pipeline.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sigver/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::string preset = "desk";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<unsigned> threads;
  std::optional<std::string> features;
  std::optional<std::size_t> r;
  bool quiet = false;
};

sigver::ExperimentConfig resolve(const Common& c) {
  sigver::ExperimentConfig base;
  if (c.preset == "desk") base = sigver::ExperimentConfig::desk();
  else if (c.preset == "full") base = sigver::ExperimentConfig::full();
  else sigver::fail(sigver::Errc::InvalidArgument, "unknown preset '" + c.preset + "'");
  sigver::ExperimentConfig cfg = c.config.empty() ? base : sigver::load_config(c.config, base);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out_dir) cfg.out_dir = *c.out_dir;
  if (c.threads) cfg.threads = *c.threads;
  if (c.features) cfg.wd.features = *c.features;
  if (c.r) cfg.wd.r = *c.r;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sigver: writer-independent feature learning and writer-dependent verification"};
  app.require_subcommand(1);
  app.allow_extras(false);

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON experiment config (overlays the preset)")->check(CLI::ExistingFile);
    sub->add_option("--preset", common.preset, "base preset: desk or full")->check(CLI::IsMember({"desk", "full"}));
    sub->add_option("--seed", common.seed, "master seed");
    sub->add_option("--out-dir", common.out_dir, "artifact directory");
    sub->add_option("--threads", common.threads, "worker cap")->check(CLI::PositiveNumber);
    sub->add_option("--features", common.features, "WD features: cnn or raw_pixels")
        ->check(CLI::IsMember({"cnn", "raw_pixels"}));
    sub->add_option("-r,--references", common.r, "genuine references per user for WD training");
    sub->add_flag("-q,--quiet", common.quiet, "suppress progress output");
  };

  struct Cmd {
    const char* name;
    const char* help;
  };
  const Cmd cmds[] = {{"synth", "emit the synthetic corpus tree"},
                      {"preprocess", "binarise, centre and resize every image"},
                      {"train-cnn", "train the writer-classification CNN on dev_train"},
                      {"extract", "extract features for every user"},
                      {"train-wd", "train per-user WD classifiers for every run"},
                      {"evaluate", "score test sets and write the evaluation report"},
                      {"analyze", "distance curves and t-SNE CSVs"},
                      {"report", "summary text and artifact manifest"},
                      {"run", "all stages in order"},
                      {"config", "print the resolved configuration as JSON"}};
  for (const auto& c : cmds) add_common(app.add_subcommand(c.name, c.help));

  CLI11_PARSE(app, argc, argv);

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const sigver::ExperimentConfig cfg = resolve(common);
    if (cmd == "config") {
      std::cout << sigver::to_json(cfg).dump(2) << '\n';
      return 0;
    }
    sigver::Pipeline p(cfg, common.quiet ? nullptr : &std::cerr);
    if (cmd == "synth") p.synth();
    else if (cmd == "preprocess") p.preprocess();
    else if (cmd == "train-cnn") p.train_cnn();
    else if (cmd == "extract") p.extract();
    else if (cmd == "train-wd") p.train_wd();
    else if (cmd == "evaluate") p.evaluate();
    else if (cmd == "analyze") p.analyze();
    else if (cmd == "report") p.report();
    else if (cmd == "run") p.run_all();
  } catch (const sigver::StageError& e) {
    std::cerr << "sigver " << cmd << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "sigver " << cmd << ": [config] " << e.what() << '\n';
    return 2;
  }
  return 0;
}
