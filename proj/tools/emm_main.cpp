// Command line front end: run the estimation pipeline, generate synthetic
// datasets, print descriptive summaries, and re-export report artifacts.
//
// Exit codes: 0 on success, 1 when an estimation stage failed (a partial
// report is still written), 2 for configuration errors caught before any
// estimation work starts.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "emm/pipeline.hpp"

namespace {

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            std::optional<std::string> out_dir, bool parallel) {
  emm::PipelineConfig cfg;
  try {
    cfg = emm::load_pipeline_config(config_path, seed, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  const emm::PipelineOutcome out = emm::run_pipeline(cfg, parallel);
  try {
    emm::write_outputs(out, cfg);
  } catch (const std::exception& e) {
    std::cerr << "error writing outputs: " << e.what() << "\n";
    return 1;
  }

  std::cout << emm::render_text(out.report);
  std::cout << "\nreport written to " << (std::filesystem::path(cfg.output_dir) / "report.txt").string()
            << "\n";
  return out.ok ? 0 : 1;
}

int cmd_synth(const std::string& config_path, std::optional<std::uint64_t> seed,
              const std::string& out_file) {
  emm::PipelineConfig cfg;
  try {
    cfg = emm::load_pipeline_config(config_path, seed, std::nullopt);
    emm::require(cfg.synthetic, "synth needs a config with a synth.* data source");
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    emm::SyntheticSpec spec = cfg.synth;
    spec.seed = cfg.seed;
    const emm::SyntheticResult res = emm::generate_synthetic(spec);
    emm::write_csv(res.data, out_file);
    std::cout << "wrote " << res.data.n() << " rows to " << out_file << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cmd_summarize(const std::string& config_path, std::optional<std::uint64_t> seed) {
  emm::PipelineConfig cfg;
  try {
    cfg = emm::load_pipeline_config(config_path, seed, std::nullopt);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    emm::ObservationalDataset data;
    if (cfg.synthetic) {
      emm::SyntheticSpec spec = cfg.synth;
      spec.seed = cfg.seed;
      data = emm::generate_synthetic(spec).data;
    } else {
      data = emm::load_csv(cfg.data_csv, cfg.schema);
    }
    std::cout << emm::descriptive_summary(data).render();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cmd_export(const std::string& report_path, const std::string& out_dir,
               const std::vector<std::string>& formats) {
  nlohmann::ordered_json report;
  try {
    std::ifstream in(report_path);
    if (!in) throw emm::Error("cannot open report: " + report_path);
    report = nlohmann::ordered_json::parse(in);
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const std::set<std::string> fs(formats.begin(), formats.end());
    emm::export_artifacts(report, fs, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"heterogeneous exposure effect estimation"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  bool parallel = false;
  std::string report_path;
  std::vector<std::string> formats = {"dot", "tree-doc", "plotdata"};

  CLI::App* run = app.add_subcommand("run", "estimate effects and write the report");
  run->add_option("--config", config_path, "pipeline config file")->required();
  CLI::Option* run_seed = run->add_option("--seed", seed, "override the config seed");
  CLI::Option* run_out = run->add_option("--out", out, "output directory (default from config)");
  run->add_flag("--parallel-methods", parallel, "run the requested methods in separate threads");

  CLI::App* synth = app.add_subcommand("synth", "emit a synthetic dataset to csv");
  synth->add_option("--config", config_path, "pipeline config file with a synth.* source")->required();
  CLI::Option* synth_seed = synth->add_option("--seed", seed, "override the config seed");
  std::string synth_out = "synthetic.csv";
  synth->add_option("--out", synth_out, "destination csv path");

  CLI::App* summarize = app.add_subcommand("summarize", "print a descriptive summary table");
  summarize->add_option("--config", config_path, "pipeline config file")->required();
  CLI::Option* summarize_seed = summarize->add_option("--seed", seed, "override the config seed");

  CLI::App* exp = app.add_subcommand("export", "re-emit artifacts from an existing report.json");
  exp->add_option("--report", report_path, "path to report.json")->required();
  std::string exp_out = ".";
  exp->add_option("--out", exp_out, "output directory");
  exp->add_option("--format", formats, "artifact formats: dot, tree-doc, plotdata")
      ->check(CLI::IsMember({"dot", "tree-doc", "plotdata"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (app.got_subcommand(run))
    return cmd_run(config_path,
                   run_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                   run_out->count() ? std::optional<std::string>(out) : std::nullopt, parallel);
  if (app.got_subcommand(synth))
    return cmd_synth(config_path,
                     synth_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                     synth_out);
  if (app.got_subcommand(summarize))
    return cmd_summarize(config_path,
                         summarize_seed->count() ? std::optional<std::uint64_t>(seed) : std::nullopt);
  return cmd_export(report_path, exp_out, formats);
}
