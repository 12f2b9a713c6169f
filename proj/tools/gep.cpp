// gep: command-line driver for the synthetic align -> pretrain pipeline.
//
//   gep <stage> [--config FILE] [--seed N] [--out DIR]
//
// Exit codes: 0 ok, 1 internal, 2 config, 3 io, 4 stage order, 5 shape,
// 6 range, 7 domain, 8 parameter, 9 divergence.

#include <CLI11.hpp>

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "gep/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generative event pretraining at desk scale"};
  app.require_subcommand(1);
  std::string config_path, out_dir = "run";
  std::optional<std::uint64_t> seed;

  for (const auto& [name, stage] : gep::stage_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " stage");
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out_dir, "run directory")->capture_default_str();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(gep::ErrorKind::kConfig);
  }

  try {
    gep::RunConfig cfg = config_path.empty() ? gep::RunConfig{} : gep::RunConfig::load(config_path);
    if (seed) cfg.seed = *seed;
    cfg.validate();
    const gep::Stage stage = gep::parse_stage(app.get_subcommands().front()->get_name());
    const gep::StageResult res = gep::run_pipeline(cfg, stage, out_dir);
    std::cout << res.report.to_text();
    std::cerr << "report written to " << res.report_path.string() << "\n";
    if (stage == gep::Stage::kGradcheck && res.report.get("gradcheck.all_passed") != 1.0) {
      std::cerr << "error: gradient check failed\n";
      return static_cast<int>(gep::ErrorKind::kInternal);
    }
    return 0;
  } catch (const gep::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(gep::ErrorKind::kIo);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(gep::ErrorKind::kInternal);
  }
}
