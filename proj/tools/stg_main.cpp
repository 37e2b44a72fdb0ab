// Command-line front end. Verbs share three flags: --config points at the JSON
// run configuration, --seed and --out override the config's seed and out_dir.
// Exit codes: 0 ok, 1 bad usage or invalid configuration, 2 runtime fault
// (unreadable checkpoint, non-finite state, I/O failure).

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stg/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"guided video-diffusion sampling engine (toy scale)"};
  app.require_subcommand(1);

  std::string config_path, out_path;
  std::uint64_t seed_val = 0;

  const struct {
    const char* name;
    const char* help;
  } verbs[] = {
      {"train", "train the toy video denoiser, writing a checkpoint and loss curve"},
      {"sample", "run the guided reverse chain and write samples plus a trace summary"},
      {"sweep", "score a list of guidance settings and write metrics.csv / metrics.json"},
      {"visualize", "render one-step denoised grids per guidance branch at chosen steps"},
      {"gradcheck", "finite-difference check of the denoiser's analytic gradients"},
      {"oracle-demo", "run the analytic-mixture consistency experiments"},
  };
  for (const auto& v : verbs) {
    CLI::App* sub = app.add_subcommand(v.name, v.help);
    sub->add_option("--config", config_path, "JSON run configuration")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out_path, "output directory (overrides config out_dir)");
    sub->add_option("--seed", seed_val, "seed override");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    stg::RunConfig rc = stg::load_run_config(config_path);
    if (sub->count("--seed") > 0) rc.seed = seed_val;
    const std::string out = out_path.empty() ? rc.out_dir : out_path;

    const std::string verb = sub->get_name();
    if (verb == "train") stg::cmd_train(rc, out, std::cout);
    else if (verb == "sample") stg::cmd_sample(rc, out, std::cout);
    else if (verb == "sweep") stg::cmd_sweep(rc, out, std::cout);
    else if (verb == "visualize") stg::cmd_visualize(rc, out, std::cout);
    else if (verb == "gradcheck") stg::cmd_gradcheck(rc, out, std::cout);
    else if (verb == "oracle-demo") stg::cmd_oracle_demo(rc, out, std::cout);
    else throw stg::ValidationError("unknown verb " + verb);
  } catch (const stg::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fault: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
