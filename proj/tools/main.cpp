#include "corevi/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace {

using corevi::ExperimentConfig;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

// Options shared by the config-driven subcommands; flags override file keys.
struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::vector<std::uint64_t> seeds;
  std::vector<int> coreset_sizes;
  std::string method;
  std::string out;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config file (key = value lines)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--override,-D", overrides, "override a config key, as key=value")
        ->take_all();
    cmd->add_option("--seed", seeds, "replace the seeds list")->take_all();
    cmd->add_option("--coreset-size", coreset_sizes, "replace the coreset size list")
        ->take_all();
    cmd->add_option("--method", method, "replace the method");
    cmd->add_option("--out", out, "replace the output directory");
  }

  ExperimentConfig build() const {
    std::map<std::string, std::string> pairs;
    if (!config_path.empty()) pairs = corevi::parse_key_values(read_text(config_path));
    for (const auto& entry : overrides) {
      const auto eq = entry.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("override '" + entry + "' is not key=value");
      const std::string key = trim(entry.substr(0, eq));
      if (key.empty()) throw std::runtime_error("override '" + entry + "' has an empty key");
      pairs[key] = trim(entry.substr(eq + 1));
    }
    const auto join = [](const auto& values) {
      std::string text;
      for (size_t i = 0; i < values.size(); ++i)
        text += (i ? "," : "") + std::to_string(values[i]);
      return text;
    };
    if (!seeds.empty()) pairs["seeds"] = join(seeds);
    if (!coreset_sizes.empty()) pairs["coreset.sizes"] = join(coreset_sizes);
    if (!method.empty()) pairs["method"] = method;
    if (!out.empty()) pairs["out"] = out;
    return corevi::config_from_pairs(pairs);
  }
};

void print_outcome(const corevi::ExperimentOutcome& outcome) {
  std::cout << "results: " << outcome.dir.string() << "\n" << outcome.aggregate_csv;
}

int cmd_fetch_data(const std::string& only, bool check) {
  struct Entry {
    const char* name;
    const char* url;
    int rows;
    int dims;
  };
  // Shapes refer to the preprocessed files the reference runs used; the
  // loader accepts whatever shape the file has and warns on mismatch.
  const Entry entries[] = {
      {"phishing", "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/phishing",
       11054, 11},
      {"adult", "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/a9a", 30162, 11},
      {"webspam",
       "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/"
       "webspam_wc_normalized_unigram.svm.bz2",
       126185, 128},
  };
  const auto dir = corevi::dataset_dir();
  std::cout << "data directory: " << dir.string() << " (set COREVI_DATA_DIR to change)\n\n";
  bool all_present = true;
  for (const auto& e : entries) {
    if (!only.empty() && only != e.name) continue;
    const auto target = dir / (std::string(e.name) + ".libsvm");
    const bool present = std::filesystem::exists(target);
    all_present = all_present && present;
    std::cout << e.name << ": " << (present ? "present" : "missing") << "\n"
              << "  source:   " << e.url << "\n"
              << "  save to:  " << target.string() << "\n"
              << "  expected: " << e.rows << " rows x " << e.dims
              << " features (sparse index:value text; decompress first if archived)\n"
              << "  fetch:    curl -L --create-dirs -o " << target.string() << " " << e.url
              << "\n\n";
  }
  std::cout << "Row/dim counts are validated when a file is first loaded; a mismatch\n"
               "prints a warning and the run continues with the file as-is.\n";
  if (check && !all_present) return 1;
  return 0;
}

int cmd_entropy_grid(const std::string& trial_path, const std::string& out_path, double x1_min,
                     double x1_max, double x2_min, double x2_max, int res_x, int res_y,
                     int samples, std::uint64_t seed) {
  const std::string text = read_text(trial_path);
  const corevi::StoredTrial stored = corevi::trial_from_json(text);
  const corevi::Model model(stored.spec);
  std::string csv = corevi::entropy_grid_csv(model, stored.psi, stored.coreset, x1_min, x1_max,
                                             x2_min, x2_max, res_x, res_y, samples, seed);
  const auto parsed = nlohmann::json::parse(text);
  if (parsed.contains("config_hash"))
    csv = "# config " + parsed.at("config_hash").get<std::string>() + "\n" + csv;
  if (out_path.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << csv;
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_sweep(const ConfigArgs& args, const std::string& methods_csv) {
  std::vector<std::string> methods;
  std::stringstream ss(methods_csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) methods.push_back(item);
  }
  if (methods.empty()) throw std::runtime_error("sweep needs at least one method");

  std::string combined;
  std::string hash_blob;
  std::string name = "sweep";
  std::string out_dir = "runs";
  for (size_t i = 0; i < methods.size(); ++i) {
    ConfigArgs per = args;
    per.method = methods[i];
    const ExperimentConfig cfg = per.build();
    name = cfg.name.empty() ? cfg.method + "-" + cfg.dataset : cfg.name;
    out_dir = cfg.out_dir;
    std::cout << "[" << i + 1 << "/" << methods.size() << "] " << methods[i] << "\n";
    const auto outcome = corevi::run_experiment(cfg);
    print_outcome(outcome);
    hash_blob += corevi::config_hash_hex(cfg) + "\n";
    std::stringstream rows(outcome.aggregate_csv);
    std::string line;
    int n = 0;
    while (std::getline(rows, line)) {
      if (i > 0 && (line.rfind("method,", 0) == 0)) continue;  // header once
      if (!line.empty()) combined += line + "\n";
      ++n;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(corevi::Rng::fnv1a(hash_blob)));
  const auto path = std::filesystem::path(out_dir) / ("sweep-" + name + "-" + hex + ".csv");
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << combined;
  std::cout << "sweep summary: " << path.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"black-box variational inference with learned Bayesian coresets"};
  app.require_subcommand(1);

  ConfigArgs run_args;
  auto* run = app.add_subcommand("run", "train and evaluate one experiment config");
  run_args.attach(run);

  ConfigArgs cont_args;
  auto* cont = app.add_subcommand("continual", "class-incremental protocol with coreset replay");
  cont_args.attach(cont);

  ConfigArgs sweep_args;
  std::string sweep_methods =
      "bb-psvi,bb-sparse-batch,sparse-vi,random-coreset,subset-laplace,full-mfvi";
  auto* sweep = app.add_subcommand("sweep", "run several methods on one config");
  sweep_args.attach(sweep);
  sweep->add_option("--methods", sweep_methods, "comma-separated method list");

  std::string fetch_only;
  bool fetch_check = false;
  auto* fetch = app.add_subcommand("fetch-data", "show dataset sources and local status");
  fetch->add_option("--name", fetch_only, "limit to one dataset");
  fetch->add_flag("--check", fetch_check, "exit nonzero if any listed file is missing");

  std::string grid_trial, grid_out;
  double x1_min = -3, x1_max = 3, x2_min = -3, x2_max = 3;
  int res_x = 60, res_y = 60, grid_samples = 10;
  std::uint64_t grid_seed = 1;
  auto* grid = app.add_subcommand("entropy-grid",
                                  "predictive entropy over a 2-d box from a stored trial");
  grid->add_option("--trial", grid_trial, "trial JSON written by run/continual")
      ->required()
      ->check(CLI::ExistingFile);
  grid->add_option("--out", grid_out, "output CSV path (stdout when omitted)");
  grid->add_option("--x1-min", x1_min);
  grid->add_option("--x1-max", x1_max);
  grid->add_option("--x2-min", x2_min);
  grid->add_option("--x2-max", x2_max);
  grid->add_option("--res-x", res_x, "grid columns");
  grid->add_option("--res-y", res_y, "grid rows");
  grid->add_option("--samples", grid_samples, "Monte Carlo samples per point");
  grid->add_option("--seed", grid_seed);

  try {
    app.parse(argc, argv);
    if (*run) {
      print_outcome(corevi::run_experiment(run_args.build()));
      return 0;
    }
    if (*cont) {
      print_outcome(corevi::run_continual(cont_args.build()));
      return 0;
    }
    if (*sweep) return cmd_sweep(sweep_args, sweep_methods);
    if (*fetch) return cmd_fetch_data(fetch_only, fetch_check);
    if (*grid)
      return cmd_entropy_grid(grid_trial, grid_out, x1_min, x1_max, x2_min, x2_max, res_x, res_y,
                              grid_samples, grid_seed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << nlohmann::json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
