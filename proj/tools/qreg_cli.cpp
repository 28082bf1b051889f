// qreg: experiment front end.
//
//   qreg train           --config run.cfg [--out DIR] [--seeds 1,2,3] [--quiet]
//   qreg noise-sweep     --config sweep.cfg ...
//   qreg stability-sweep --config stability.cfg ...
//   qreg multitask       --config multitask.cfg ...
//
// Exit codes: 0 success, 2 config error, 3 runtime or training error.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qreg/experiment.hpp"

namespace {

struct Command {
  const char* name;
  const char* help;
  int (*run)(const qreg::CommandOptions&, std::ostream&, std::ostream&);
};

constexpr Command kCommands[] = {
    {"train", "Train one model per seed and write its run CSV and checkpoint", qreg::cmd_train},
    {"noise-sweep", "Cross modes x noise levels x seeds; write sweep.csv and sweep_mean.csv",
     qreg::cmd_noise_sweep},
    {"stability-sweep", "Sweep one mode's hyper-parameter grid; write stability.csv",
     qreg::cmd_stability_sweep},
    {"multitask", "Compare modes on multi-task data with early stopping; write multitask.csv",
     qreg::cmd_multitask},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robustness experiments for quantization-aware training"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  bool quiet = false;
  const Command* chosen = nullptr;

  for (const auto& cmd : kCommands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config, "Experiment config file")->required();
    sub->add_option("--out", out, "Output directory (overrides experiment.output_dir)");
    sub->add_option("--seeds", seeds, "Comma-separated seed list (overrides experiment.seeds)")
        ->delimiter(',');
    sub->add_flag("--quiet", quiet, "Suppress progress output");
    sub->callback([&chosen, &cmd] { chosen = &cmd; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  qreg::CommandOptions opts;
  opts.config = config;
  if (!out.empty()) opts.out = out;
  if (!seeds.empty()) opts.seeds = seeds;
  opts.quiet = quiet;
  return chosen->run(opts, std::cout, std::cerr);
}
