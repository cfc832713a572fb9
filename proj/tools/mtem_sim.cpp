// mtem-sim: run, validate and list slow-fast SDE experiments.
//
// Exit codes: 0 success, 1 validation failure, 2 runtime failure.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include <mtem/experiment.hpp>

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

int cmd_validate(const std::string &path) {
  const mtem::ValidationResult v = mtem::validate_config_file(path);
  if (!v.ok()) {
    std::cerr << path << ": invalid configuration\n" << v.message();
    return kInvalid;
  }
  std::cout << path << ": ok (" << mtem::experiment_name(v.config->kind)
            << ")\n";
  return kOk;
}

int cmd_run(const std::string &path, const std::string &output_override) {
  const mtem::ValidationResult v = mtem::validate_config_file(path);
  if (!v.ok()) {
    std::cerr << path << ": invalid configuration\n" << v.message();
    return kInvalid;
  }
  const mtem::ExperimentConfig &cfg = *v.config;
  const std::filesystem::path out =
      output_override.empty() ? cfg.output_dir : std::filesystem::path(output_override);
  try {
    const mtem::ResultBundle b = mtem::run_experiment(cfg);
    mtem::write_bundle(b, out);
    std::cout << mtem::experiment_name(cfg.kind) << " (seed " << cfg.seed
              << ", " << cfg.threads << " thread"
              << (cfg.threads == 1 ? "" : "s") << ")\n"
              << b.summary << "wrote " << b.tables.size() + 1 << " files to "
              << out.string() << "\n";
  } catch (const mtem::ConfigError &e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception &e) {
    std::cerr << "run failed: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

int cmd_list() {
  std::cout << "built-in systems:\n";
  for (const auto &e : mtem::builtin_systems()) {
    std::cout << "  " << e.name << "\n      " << e.description << "\n";
  }
  std::cout << "coefficient families:\n";
  for (const auto &f : mtem::coefficient_families()) {
    std::cout << "  " << f.name << "\n      " << f.description << "\n";
  }
  std::cout << "experiments:\n";
  for (const auto &[kind, name] : mtem::kExperimentNames) {
    std::cout << "  " << name << "\n";
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Multiscale truncated Euler-Maruyama experiments"};
  app.set_version_flag("--version", std::string(MTEM_VERSION));
  app.require_subcommand(1);

  std::string config;
  std::string output_dir;
  auto *run = app.add_subcommand("run", "run the experiment described by a config");
  run->add_option("config", config, "JSON config file")->required();
  run->add_option("-o,--output-dir", output_dir,
                  "write results here instead of the config's output_dir");
  auto *validate =
      app.add_subcommand("validate", "check a config without running it");
  validate->add_option("config", config, "JSON config file")->required();
  auto *list = app.add_subcommand("list-systems",
                                  "list built-in systems and coefficient families");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kInvalid;
  }
  if (run->parsed()) {
    return cmd_run(config, output_dir);
  }
  if (validate->parsed()) {
    return cmd_validate(config);
  }
  if (list->parsed()) {
    return cmd_list();
  }
  return kInvalid;
}
