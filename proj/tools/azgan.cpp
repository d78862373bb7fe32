#include "azgan/errors.hpp"
#include "azgan/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>

namespace {

enum ExitCode { kOk = 0, kValidation = 2, kDependency = 3, kNumerical = 4, kFailure = 1 };

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Azimuth-controllable SAR image generation pipeline"};
  app.require_subcommand(1);
  Options opt;

  using Stage = std::function<azgan::StageOutput(const azgan::RunConfig&)>;
  const std::vector<std::tuple<std::string, std::string, Stage>> stages = {
      {"synth-data", "render the synthetic dataset, split it and write manifests", azgan::run_synth_data},
      {"pairs", "form combinations for every configured interval", azgan::run_pairs},
      {"train", "train generator, discriminator and predictor", azgan::run_train},
      {"generate", "write generated images and triptych sheets", azgan::run_generate},
      {"eval", "image-quality and azimuth metrics of generated test images", azgan::run_eval},
      {"atr", "primitive vs evolved recognition experiment", azgan::run_atr},
      {"gradcheck", "finite-difference gradient suite", azgan::run_gradcheck},
  };
  std::map<CLI::App*, std::pair<std::string, Stage>> by_app;
  for (const auto& [name, help, fn] : stages) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", opt.config_path, "JSON run configuration (defaults apply when omitted)");
    sub->add_option("--set", opt.overrides, "override, e.g. --set training.batch_size=4")->take_all();
    sub->add_option("-o,--output", opt.output_dir, "output directory (overrides output_dir)");
    by_app[sub] = {name, fn};
  }
  CLI::App* show = app.add_subcommand("show-config", "print the effective configuration and its hash");
  show->add_option("-c,--config", opt.config_path, "JSON run configuration");
  show->add_option("--set", opt.overrides, "override")->take_all();

  CLI11_PARSE(app, argc, argv);

  try {
    auto overrides = opt.overrides;
    if (!opt.output_dir.empty()) overrides.push_back("output_dir=" + opt.output_dir);
    const azgan::RunConfig config = opt.config_path.empty() ? azgan::parse_config("{}", overrides)
                                                            : azgan::load_config(opt.config_path, overrides);
    CLI::App* chosen = app.get_subcommands().front();
    if (chosen == show) {
      std::printf("%s\nconfig hash %s\n", azgan::config_to_json(config).c_str(), azgan::config_hash(config).c_str());
      return kOk;
    }
    const auto& [name, fn] = by_app.at(chosen);
    const auto start = std::chrono::steady_clock::now();
    const azgan::StageOutput out = fn(config);
    azgan::write_run_manifest(config, name, out);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& line : out.summary) std::printf("%s\n", line.c_str());
    std::printf("%s: %zu artifacts in %s (%.1f s, config %s)\n", name.c_str(), out.artifacts.size(),
                config.output_dir.string().c_str(), seconds, azgan::config_hash(config).c_str());
    return out.passed ? kOk : kFailure;
  } catch (const azgan::ValidationError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kValidation;
  } catch (const azgan::InsufficientDataError& e) {
    std::fprintf(stderr, "validation error: %s\n", e.what());
    return kValidation;
  } catch (const azgan::DependencyError& e) {
    std::fprintf(stderr, "dependency error: %s\n", e.what());
    return kDependency;
  } catch (const azgan::NumericalAbort& e) {
    std::fprintf(stderr, "numerical abort: %s\n", e.what());
    return kNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}
