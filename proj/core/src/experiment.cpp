#include "corevi/experiment.hpp"

#include "corevi/objectives.hpp"
#include "corevi/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <set>
#include <sstream>
#include <stdexcept>

namespace corevi {

namespace {

using nlohmann::json;

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::string strip_quotes(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// Reads typed values out of the raw pairs and remembers which keys were
// consumed so leftovers can be reported as unknown.
struct Reader {
  const std::map<std::string, std::string>& pairs;
  std::set<std::string> seen;

  const std::string* find(const std::string& key) {
    seen.insert(key);
    const auto it = pairs.find(key);
    return it == pairs.end() ? nullptr : &it->second;
  }
  void str(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) out = strip_quotes(*v);
  }
  void integer(const std::string& key, int& out) {
    if (const auto* v = find(key)) {
      try {
        size_t used = 0;
        out = std::stoi(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
      } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' needs an integer, got '" + *v + "'");
      }
    }
  }
  void real(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      try {
        size_t used = 0;
        out = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument(*v);
      } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' needs a number, got '" + *v + "'");
      }
    }
  }
  void boolean(const std::string& key, bool& out) {
    if (const auto* v = find(key)) {
      if (*v == "true") {
        out = true;
      } else if (*v == "false") {
        out = false;
      } else {
        throw std::runtime_error("config: key '" + key + "' needs true/false, got '" + *v + "'");
      }
    }
  }
  void int_list(const std::string& key, std::vector<int>& out) {
    if (const auto* v = find(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) {
        try {
          out.push_back(std::stoi(item));
        } catch (const std::exception&) {
          throw std::runtime_error("config: key '" + key + "' has a non-integer item '" + item +
                                   "'");
        }
      }
    }
  }
  void u64_list(const std::string& key, std::vector<std::uint64_t>& out) {
    if (const auto* v = find(key)) {
      out.clear();
      for (const auto& item : split_list(*v)) {
        try {
          out.push_back(std::stoull(item));
        } catch (const std::exception&) {
          throw std::runtime_error("config: key '" + key + "' has a bad seed '" + item + "'");
        }
      }
    }
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const auto* v = find(key)) {
      try {
        out = std::stoull(*v);
      } catch (const std::exception&) {
        throw std::runtime_error("config: key '" + key + "' needs an integer, got '" + *v + "'");
      }
    }
  }
};

const char* to_string(InitStrategy s) {
  return s == InitStrategy::kSubset ? "subset" : "gaussian";
}

InitStrategy init_from_string(const std::string& s) {
  if (s == "subset") return InitStrategy::kSubset;
  if (s == "gaussian") return InitStrategy::kGaussian;
  throw std::runtime_error("config: unknown init strategy '" + s + "'");
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

const std::set<std::string>& known_methods() {
  static const std::set<std::string> methods = {
      "bb-psvi",   "bb-sparse-incremental", "bb-sparse-batch", "bb-sparse-prune",
      "sparse-vi", "random-coreset",        "subset-laplace",  "full-mfvi"};
  return methods;
}

json model_spec_to_json(const ModelSpec& spec) {
  json j;
  j["kind"] = spec.kind == ModelKind::kLogistic ? "logistic" : "bnn";
  j["input_dim"] = spec.input_dim;
  j["classes"] = spec.classes;
  j["hidden"] = spec.hidden;
  j["activation"] = spec.activation == Activation::kTanh ? "tanh" : "relu";
  j["prior_std"] = spec.prior_std;
  j["prior_std_layers"] = spec.prior_std_layers;
  return j;
}

ModelSpec model_spec_from_json(const json& j) {
  ModelSpec spec;
  spec.kind = j.at("kind").get<std::string>() == "logistic" ? ModelKind::kLogistic
                                                            : ModelKind::kBnn;
  spec.input_dim = j.at("input_dim").get<int>();
  spec.classes = j.at("classes").get<int>();
  spec.hidden = j.at("hidden").get<std::vector<int>>();
  spec.activation = j.at("activation").get<std::string>() == "tanh" ? Activation::kTanh
                                                                    : Activation::kRelu;
  spec.prior_std = j.at("prior_std").get<double>();
  spec.prior_std_layers = j.at("prior_std_layers").get<std::vector<double>>();
  return spec;
}

json mat_rows(const ad::Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

ad::Mat mat_from_rows(const json& rows) {
  const int r = static_cast<int>(rows.size());
  const int c = r == 0 ? 0 : static_cast<int>(rows.at(0).size());
  ad::Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rows.at(i).at(j).get<double>();
  return m;
}

Dataset load_public_dataset(const std::string& name) {
  const auto dir = dataset_dir();
  for (const char* ext : {".libsvm", ".txt", ""}) {
    const auto candidate = dir / (name + ext);
    if (std::filesystem::exists(candidate)) {
      Dataset d = load_libsvm(candidate.string());
      check_known_counts(d, name);
      return d;
    }
  }
  throw std::runtime_error("dataset '" + name + "' not found under " + dir.string() +
                           "; run the fetch-data command for download instructions");
}

int label_classes(const Dataset& train_set, const Dataset& test_set) {
  return std::max(train_set.classes(), test_set.classes());
}

Model build_model(const ExperimentConfig& cfg, int input_dim, int classes) {
  if (cfg.model_name == "logistic") {
    if (classes != 2) throw std::runtime_error("logistic model needs exactly two classes");
    return Model(ModelSpec::logistic(input_dim, cfg.prior_std));
  }
  if (cfg.model_name == "bnn")
    return Model(ModelSpec::bnn(input_dim, classes, cfg.hidden_units, Activation::kTanh,
                                cfg.prior_std));
  throw std::runtime_error("unknown model '" + cfg.model_name + "'");
}

IwForm eval_form(const ExperimentConfig& cfg) {
  // Without a coreset term the joint ratio would correct psi toward the
  // prior; the divergence form keeps plain Monte Carlo weights instead.
  return cfg.method == "full-mfvi" ? IwForm::kKlDiff : cfg.train.bilevel.iw_form;
}

std::string aggregate_csv_text(const ExperimentConfig& cfg,
                               const std::vector<TrialResult>& trials) {
  std::string out = "# config " + config_hash_hex(cfg) + "\n";
  out +=
      "method,coreset_size,seeds,accuracy_mean,accuracy_stderr,nll_mean,nll_stderr,ess_mean,"
      "ess_stderr\n";
  std::vector<int> sizes;
  for (const auto& t : trials)
    if (std::find(sizes.begin(), sizes.end(), t.coreset_size) == sizes.end())
      sizes.push_back(t.coreset_size);
  for (const int m : sizes) {
    std::vector<double> acc, nll, ess;
    for (const auto& t : trials) {
      if (t.coreset_size != m) continue;
      acc.push_back(t.report.accuracy);
      nll.push_back(t.report.nll);
      ess.push_back(t.report.ess);
    }
    const auto a = mean_stderr(acc);
    const auto l = mean_stderr(nll);
    const auto e = mean_stderr(ess);
    out += cfg.method + "," + std::to_string(m) + "," + std::to_string(acc.size()) + "," +
           fmt_double(a.mean) + "," + fmt_double(a.stderr_) + "," + fmt_double(l.mean) + "," +
           fmt_double(l.stderr_) + "," + fmt_double(e.mean) + "," + fmt_double(e.stderr_) + "\n";
  }
  return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::filesystem::path prepare_out_dir(const ExperimentConfig& cfg) {
  const std::string stem = cfg.name.empty() ? cfg.method + "-" + cfg.dataset : cfg.name;
  const auto dir = std::filesystem::path(cfg.out_dir) / (stem + "-" + config_hash_hex(cfg));
  std::filesystem::create_directories(dir);
  write_file(dir / "config.txt", "# hash " + config_hash_hex(cfg) + "\n" + cfg.canonical());
  return dir;
}

json trace_to_json(const TrainTrace& trace) {
  json steps = json::array();
  for (const auto& s : trace.steps)
    steps.push_back({s.iter, s.outer_loss, s.inner_last, s.ess, s.wall_ms});
  json evals = json::array();
  for (const auto& e : trace.evals) evals.push_back({e.iter, e.accuracy, e.nll, e.coreset_size});
  return json{{"steps", std::move(steps)}, {"evals", std::move(evals)}};
}

// Random data subset as a softmax-weighted trainable coreset; used by the
// continual protocol where class-stratified initialization is impossible
// (new tasks carry a single class).
Coreset subset_coreset_any_labels(const ad::Mat& x, const std::vector<int>& y, int m,
                                  std::uint64_t seed) {
  if (m < 1 || m > static_cast<int>(x.rows()))
    throw std::runtime_error("coreset size must be in [1, rows]");
  Rng rng = Rng::stream(seed, "init");
  const auto idx = rng.sample_without_replacement(static_cast<size_t>(x.rows()),
                                                  static_cast<size_t>(m));
  Coreset c;
  c.u = ad::Mat(m, x.cols());
  c.z.resize(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    c.u.row(i) = x.row(static_cast<Eigen::Index>(idx[static_cast<size_t>(i)]));
    c.z[static_cast<size_t>(i)] = y[idx[static_cast<size_t>(i)]];
  }
  c.mode = WeightMode::kSoftmax;
  c.beta = ad::Mat::Zero(1, m);
  c.v_raw = ad::Mat::Constant(1, m, static_cast<double>(x.rows()) / m);
  c.n_data = static_cast<double>(x.rows());
  c.seed = seed;
  c.train_u = true;
  c.train_z = false;
  c.train_weights = true;
  c.train_alpha = false;
  return c;
}

double log_sum_exp_row(const ad::Mat& row) {
  const double m = row.maxCoeff();
  return m + std::log((row.array() - m).exp().sum());
}

}  // namespace

MeanStderr mean_stderr(const std::vector<double>& values) {
  MeanStderr out;
  if (values.empty()) return out;
  double sum = 0.0;
  for (const double v : values) sum += v;
  out.mean = sum / static_cast<double>(values.size());
  if (values.size() < 2) return out;
  double ss = 0.0;
  for (const double v : values) ss += (v - out.mean) * (v - out.mean);
  out.stderr_ = std::sqrt(ss / static_cast<double>(values.size() - 1)) /
                std::sqrt(static_cast<double>(values.size()));
  return out;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> pairs;
  std::stringstream ss(text);
  std::string line;
  int line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    // Comments start at '#' outside quotes.
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line = line.substr(0, i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error("config line " + std::to_string(line_no) + ": empty key");
    if (pairs.count(key))
      throw std::runtime_error("config line " + std::to_string(line_no) + ": duplicate key '" +
                               key + "'");
    pairs[key] = value;
  }
  return pairs;
}

ExperimentConfig config_from_pairs(const std::map<std::string, std::string>& pairs) {
  ExperimentConfig cfg;
  Reader r{pairs, {}};

  r.str("name", cfg.name);
  r.str("dataset", cfg.dataset);
  r.str("method", cfg.method);
  r.str("out", cfg.out_dir);
  r.integer("jobs", cfg.jobs);

  r.integer("data.n", cfg.data_n);
  r.real("data.noise", cfg.data_noise);
  r.integer("data.dim", cfg.data_dim);
  r.u64("data.seed", cfg.data_seed);
  r.real("data.test_fraction", cfg.test_fraction);
  r.boolean("data.standardize", cfg.standardize_features);

  r.str("model", cfg.model_name);
  r.integer("model.hidden", cfg.hidden_units);
  r.real("model.prior_std", cfg.prior_std);

  r.int_list("coreset.sizes", cfg.coreset_sizes);
  if (const auto* v = r.find("coreset.weight_mode")) cfg.train.mode = weight_mode_from_string(*v);
  if (const auto* v = r.find("coreset.init")) cfg.train.init = init_from_string(*v);
  r.boolean("coreset.soft_labels", cfg.train.soft_labels);
  r.real("coreset.soft_init_logit", cfg.train.soft_init_logit);
  r.int_list("prune.schedule", cfg.prune_schedule);

  r.u64_list("seeds", cfg.seeds);
  r.integer("eval.every", cfg.train.eval_every);
  r.integer("eval.samples", cfg.eval_samples);

  r.real("train.psi_init_std", cfg.train.psi_init_std);
  r.integer("train.rounds", cfg.train.rounds);
  r.integer("train.psi_fit_steps", cfg.train.psi_fit_steps);
  r.real("train.psi_fit_lr", cfg.train.psi_fit_lr);
  r.integer("train.psi_fit_stages", cfg.train.psi_fit_stages);
  r.integer("train.v_steps", cfg.train.v_steps);
  r.integer("train.map_steps", cfg.train.map_steps);
  r.real("train.map_lr", cfg.train.map_lr);
  r.integer("train.steps_per_round", cfg.train.steps_per_round);

  BilevelConfig& b = cfg.train.bilevel;
  r.integer("bilevel.inner_steps", b.inner_steps);
  r.real("bilevel.inner_lr", b.inner_adam.lr);
  r.real("bilevel.outer_lr", b.outer_adam.lr);
  r.real("bilevel.lr_u", b.lr_u);
  r.real("bilevel.lr_z", b.lr_z);
  r.real("bilevel.lr_weights", b.lr_weights);
  r.real("bilevel.lr_alpha", b.lr_alpha);
  r.real("bilevel.lr_psi", b.lr_psi);
  r.integer("bilevel.outer_iters", b.outer_iters);
  r.integer("bilevel.batch", b.batch_size);
  r.integer("bilevel.mc_samples", b.mc_samples);
  r.boolean("bilevel.warm_start", b.warm_start);
  r.boolean("bilevel.joint_psi", b.joint_psi);
  r.boolean("bilevel.force_uniform_weights", b.force_uniform_weights);
  if (const auto* v = r.find("bilevel.iw_form")) b.iw_form = iw_form_from_string(*v);

  r.integer("continual.tasks", cfg.continual_tasks);
  r.int_list("continual.sizes", cfg.continual_sizes);
  r.boolean("continual.fresh_only", cfg.continual_fresh_only);

  for (const auto& [key, value] : pairs) {
    (void)value;
    if (!r.seen.count(key)) throw std::runtime_error("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig parse_config(const std::string& text) {
  return config_from_pairs(parse_key_values(text));
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw std::runtime_error("config: seeds must be nonempty");
  if (!known_methods().count(method)) throw std::runtime_error("config: unknown method '" + method + "'");
  if (coreset_sizes.empty()) throw std::runtime_error("config: coreset.sizes must be nonempty");
  for (const int m : coreset_sizes)
    if (m < 1) throw std::runtime_error("config: coreset sizes must be positive");
  if (eval_samples < 1) throw std::runtime_error("config: eval.samples must be >= 1");
  if (jobs < 1) throw std::runtime_error("config: jobs must be >= 1");
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw std::runtime_error("config: data.test_fraction must be in (0, 1)");
  if (method == "bb-sparse-prune" && !prune_schedule.empty() && coreset_sizes.size() > 1)
    throw std::runtime_error("config: prune.schedule and multiple coreset sizes conflict");
  if (continual_tasks < 1 || continual_tasks > 3)
    throw std::runtime_error("config: continual.tasks must be in [1, 3]");
  if (static_cast<int>(continual_sizes.size()) < continual_tasks)
    throw std::runtime_error("config: continual.sizes must list one size per task");
  for (size_t i = 1; i < continual_sizes.size(); ++i)
    if (continual_sizes[i] < continual_sizes[i - 1])
      throw std::runtime_error("config: continual.sizes must be non-decreasing");
}

std::string ExperimentConfig::canonical() const {
  std::map<std::string, std::string> kv;
  kv["name"] = name;
  kv["dataset"] = dataset;
  kv["method"] = method;
  kv["out"] = out_dir;
  kv["jobs"] = std::to_string(jobs);
  kv["data.n"] = std::to_string(data_n);
  kv["data.noise"] = fmt_double(data_noise);
  kv["data.dim"] = std::to_string(data_dim);
  kv["data.seed"] = std::to_string(data_seed);
  kv["data.test_fraction"] = fmt_double(test_fraction);
  kv["data.standardize"] = standardize_features ? "true" : "false";
  kv["model"] = model_name;
  kv["model.hidden"] = std::to_string(hidden_units);
  kv["model.prior_std"] = fmt_double(prior_std);
  kv["coreset.sizes"] = join(coreset_sizes);
  kv["coreset.weight_mode"] = to_string(train.mode);
  kv["coreset.init"] = to_string(train.init);
  kv["coreset.soft_labels"] = train.soft_labels ? "true" : "false";
  kv["coreset.soft_init_logit"] = fmt_double(train.soft_init_logit);
  kv["prune.schedule"] = join(prune_schedule);
  kv["seeds"] = join(seeds);
  kv["eval.every"] = std::to_string(train.eval_every);
  kv["eval.samples"] = std::to_string(eval_samples);
  kv["train.psi_init_std"] = fmt_double(train.psi_init_std);
  kv["train.rounds"] = std::to_string(train.rounds);
  kv["train.psi_fit_steps"] = std::to_string(train.psi_fit_steps);
  kv["train.psi_fit_lr"] = fmt_double(train.psi_fit_lr);
  kv["train.psi_fit_stages"] = std::to_string(train.psi_fit_stages);
  kv["train.v_steps"] = std::to_string(train.v_steps);
  kv["train.map_steps"] = std::to_string(train.map_steps);
  kv["train.map_lr"] = fmt_double(train.map_lr);
  kv["train.steps_per_round"] = std::to_string(train.steps_per_round);
  const BilevelConfig& b = train.bilevel;
  kv["bilevel.inner_steps"] = std::to_string(b.inner_steps);
  kv["bilevel.inner_lr"] = fmt_double(b.inner_adam.lr);
  kv["bilevel.outer_lr"] = fmt_double(b.outer_adam.lr);
  kv["bilevel.lr_u"] = fmt_double(b.lr_u);
  kv["bilevel.lr_z"] = fmt_double(b.lr_z);
  kv["bilevel.lr_weights"] = fmt_double(b.lr_weights);
  kv["bilevel.lr_alpha"] = fmt_double(b.lr_alpha);
  kv["bilevel.lr_psi"] = fmt_double(b.lr_psi);
  kv["bilevel.outer_iters"] = std::to_string(b.outer_iters);
  kv["bilevel.batch"] = std::to_string(b.batch_size);
  kv["bilevel.mc_samples"] = std::to_string(b.mc_samples);
  kv["bilevel.warm_start"] = b.warm_start ? "true" : "false";
  kv["bilevel.joint_psi"] = b.joint_psi ? "true" : "false";
  kv["bilevel.force_uniform_weights"] = b.force_uniform_weights ? "true" : "false";
  kv["bilevel.iw_form"] = to_string(b.iw_form);
  kv["continual.tasks"] = std::to_string(continual_tasks);
  kv["continual.sizes"] = join(continual_sizes);
  kv["continual.fresh_only"] = continual_fresh_only ? "true" : "false";

  std::string out;
  for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
  return out;
}

std::uint64_t ExperimentConfig::hash() const { return Rng::fnv1a(canonical()); }

std::filesystem::path dataset_dir() {
  if (const char* env = std::getenv("COREVI_DATA_DIR")) return env;
  return "data";
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(cfg.hash()));
  return buf;
}

std::pair<Dataset, Dataset> resolve_dataset(const ExperimentConfig& cfg) {
  Dataset full;
  if (cfg.dataset == "half-moon") {
    full = gen_half_moon(cfg.data_n, cfg.data_noise, cfg.data_seed);
  } else if (cfg.dataset == "four-class") {
    full = gen_four_class(cfg.data_n, cfg.data_seed);
  } else if (cfg.dataset == "synthetic-logreg") {
    full = gen_synthetic_logreg(cfg.data_n, cfg.data_dim, cfg.data_seed);
  } else if (cfg.dataset == "phishing" || cfg.dataset == "adult" || cfg.dataset == "webspam") {
    full = load_public_dataset(cfg.dataset);
  } else if (cfg.dataset.size() > 4 && cfg.dataset.substr(cfg.dataset.size() - 4) == ".csv") {
    full = load_csv(cfg.dataset);
  } else if (std::filesystem::exists(cfg.dataset)) {
    full = load_libsvm(cfg.dataset);
  } else {
    throw std::runtime_error("unknown dataset '" + cfg.dataset + "'");
  }
  auto [train_set, test_set] = split(full, cfg.test_fraction, cfg.data_seed);
  if (cfg.standardize_features) standardize(train_set, {&test_set});
  return {std::move(train_set), std::move(test_set)};
}

TrialResult run_trial(const ExperimentConfig& cfg, const Dataset& train_set,
                      const Dataset& test_set, int coreset_size, std::uint64_t seed) {
  const int classes = label_classes(train_set, test_set);
  const Model model = build_model(cfg, train_set.dim(), classes);

  TrainConfig tc = cfg.train;
  tc.coreset_size = coreset_size;
  tc.seed = seed;

  TrialResult trial;
  trial.coreset_size = coreset_size;
  trial.seed = seed;
  if (cfg.method == "bb-psvi") {
    trial.train = train_bb_psvi(model, train_set.X, train_set.y, tc);
  } else if (cfg.method == "bb-sparse-batch") {
    trial.train = train_bb_sparse_batch(model, train_set.X, train_set.y, tc);
  } else if (cfg.method == "bb-sparse-incremental") {
    tc.rounds = coreset_size;  // the support grows by at most one per round
    trial.train = train_bb_sparse_incremental(model, train_set.X, train_set.y, tc);
  } else if (cfg.method == "bb-sparse-prune") {
    std::vector<int> schedule = cfg.prune_schedule;
    if (schedule.empty()) schedule = {coreset_size};
    trial.coreset_size = schedule.back();
    trial.train = prune(model, train_set.X, train_set.y, schedule, tc);
  } else if (cfg.method == "sparse-vi") {
    tc.rounds = coreset_size;
    trial.train = train_sparse_vi_baseline(model, train_set.X, train_set.y, tc);
  } else if (cfg.method == "random-coreset") {
    trial.train = train_random_coreset_baseline(model, train_set.X, train_set.y, coreset_size, tc);
  } else if (cfg.method == "subset-laplace") {
    trial.train = train_subset_laplace_baseline(model, train_set.X, train_set.y, coreset_size, tc);
  } else if (cfg.method == "full-mfvi") {
    trial.coreset_size = 0;
    trial.train = train_full_mfvi(model, train_set.X, train_set.y, tc);
  } else {
    throw std::runtime_error("unknown method '" + cfg.method + "'");
  }

  trial.report = evaluate(model, trial.train.psi, trial.train.coreset, test_set.X, test_set.y,
                          cfg.eval_samples, seed, eval_form(cfg));
  return trial;
}

std::string trial_to_json(const ExperimentConfig& cfg, const TrialResult& trial,
                          const ModelSpec& spec) {
  json j;
  j["config_hash"] = config_hash_hex(cfg);
  j["method"] = cfg.method;
  j["dataset"] = cfg.dataset;
  j["coreset_size"] = trial.coreset_size;
  j["seed"] = trial.seed;
  j["model"] = model_spec_to_json(spec);
  j["eval"] = json::parse(eval_report_to_json(trial.report));
  j["coreset"] = json::parse(coreset_to_json(trial.train.coreset));
  j["psi"] = {{"means", mat_rows(trial.train.psi.means)},
              {"log_stds", mat_rows(trial.train.psi.log_stds)}};
  j["trace"] = trace_to_json(trial.train.trace);
  return j.dump(2);
}

StoredTrial trial_from_json(const std::string& text) {
  const json j = json::parse(text);
  StoredTrial out;
  out.spec = model_spec_from_json(j.at("model"));
  out.psi.means = mat_from_rows(j.at("psi").at("means"));
  out.psi.log_stds = mat_from_rows(j.at("psi").at("log_stds"));
  out.coreset = coreset_from_json(j.at("coreset").dump());
  out.report = eval_report_from_json(j.at("eval").dump());
  return out;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto [train_set, test_set] = resolve_dataset(cfg);
  const int classes = label_classes(train_set, test_set);
  const ModelSpec spec = build_model(cfg, train_set.dim(), classes).spec();

  std::vector<int> sizes = cfg.coreset_sizes;
  if (cfg.method == "full-mfvi") sizes = {0};
  if (cfg.method == "bb-sparse-prune" && !cfg.prune_schedule.empty())
    sizes = {cfg.prune_schedule.front()};

  struct Job {
    int size;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const int m : sizes)
    for (const auto seed : cfg.seeds) jobs.push_back({m, seed});

  ExperimentOutcome outcome;
  outcome.trials.resize(jobs.size());
  const auto worker = [&](size_t i) {
    outcome.trials[i] = run_trial(cfg, train_set, test_set, jobs[i].size, jobs[i].seed);
  };
  if (cfg.jobs <= 1) {
    for (size_t i = 0; i < jobs.size(); ++i) worker(i);
  } else {
    size_t next = 0;
    while (next < jobs.size()) {
      std::vector<std::future<void>> batch;
      for (int k = 0; k < cfg.jobs && next < jobs.size(); ++k, ++next)
        batch.push_back(std::async(std::launch::async, worker, next));
      for (auto& f : batch) f.get();
    }
  }

  outcome.dir = prepare_out_dir(cfg);
  for (const auto& trial : outcome.trials) {
    const std::string file = "trial-M" + std::to_string(trial.coreset_size) + "-seed" +
                             std::to_string(trial.seed) + ".json";
    write_file(outcome.dir / file, trial_to_json(cfg, trial, spec));
  }
  outcome.aggregate_csv = aggregate_csv_text(cfg, outcome.trials);
  write_file(outcome.dir / "aggregate.csv", outcome.aggregate_csv);
  return outcome;
}

ExperimentOutcome run_continual(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.dataset != "four-class")
    throw std::runtime_error("continual protocol runs on the four-class dataset");
  if (cfg.model_name != "bnn")
    throw std::runtime_error("continual protocol needs the bnn model (output layer widens)");

  const Dataset full = gen_four_class(cfg.data_n, cfg.data_seed);
  auto [train_set, test_set] = split(full, cfg.test_fraction, cfg.data_seed);
  if (cfg.standardize_features) standardize(train_set, {&test_set});

  const int tasks = cfg.continual_tasks;
  // Task t sees classes [0, task_top[t]].
  std::vector<int> task_top(static_cast<size_t>(tasks));
  for (int t = 0; t < tasks; ++t) task_top[static_cast<size_t>(t)] = t + 1;

  const auto rows_with_labels = [](const Dataset& d, int lo, int hi) {
    std::vector<size_t> idx;
    for (int i = 0; i < d.n(); ++i) {
      const int label = d.y[static_cast<size_t>(i)];
      if (label >= lo && label <= hi) idx.push_back(static_cast<size_t>(i));
    }
    return idx;
  };
  const auto gather = [](const Dataset& d, const std::vector<size_t>& idx) {
    std::pair<ad::Mat, std::vector<int>> out;
    out.first = ad::Mat(static_cast<int>(idx.size()), d.dim());
    out.second.reserve(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) {
      out.first.row(static_cast<Eigen::Index>(i)) = d.X.row(static_cast<Eigen::Index>(idx[i]));
      out.second.push_back(d.y[idx[i]]);
    }
    return out;
  };

  ExperimentOutcome outcome;
  for (const auto seed : cfg.seeds) {
    Coreset carried;
    TrainTrace combined;
    VariationalGaussian psi_final = VariationalGaussian::init(1, 1.0);
    double true_rows_seen = 0.0;
    EvalReport final_report;

    for (int t = 0; t < tasks; ++t) {
      const int top = task_top[static_cast<size_t>(t)];
      const int classes_t = top + 1;
      const Model model_t(ModelSpec::bnn(train_set.dim(), classes_t, cfg.hidden_units,
                                         Activation::kTanh, cfg.prior_std));
      const std::uint64_t task_seed = seed ^ Rng::fnv1a("task" + std::to_string(t));

      const auto fresh_idx = t == 0 ? rows_with_labels(train_set, 0, 1)
                                    : rows_with_labels(train_set, top, top);
      auto [fresh_x, fresh_y] = gather(train_set, fresh_idx);
      if (fresh_x.rows() == 0) throw std::runtime_error("continual: task has no fresh data");

      const int m_t = cfg.continual_sizes[static_cast<size_t>(t)];
      TrainConfig tc = cfg.train;
      tc.mode = WeightMode::kSoftmax;
      tc.coreset_size = m_t;
      tc.seed = task_seed;

      TrainResult res;
      if (t == 0) {
        // The first task is an ordinary run; with a single task the whole
        // protocol reduces to plain nested training.
        res = train_bb_psvi(model_t, fresh_x, fresh_y, tc);
      } else if (cfg.continual_fresh_only) {
        // Forgetting ablation: new-class data only, nothing carried over.
        // Stratified init is impossible here (one class), so the start
        // support is a plain random subset.
        Coreset start = subset_coreset_any_labels(
            fresh_x, fresh_y, std::min(m_t, static_cast<int>(fresh_x.rows())), task_seed);
        res = train_bb_psvi_from(model_t, fresh_x, fresh_y, std::move(start), tc);
      } else {
        // Replace every true row seen so far by multinomial draws from the
        // carried support, then append the new class's fresh data.
        const ad::Mat weights = carried.weights_value();
        std::vector<double> probs(static_cast<size_t>(weights.cols()));
        for (int i = 0; i < weights.cols(); ++i) probs[static_cast<size_t>(i)] = weights(0, i);
        Rng replay_rng = Rng::stream(task_seed, "replay");
        const int n_replay = static_cast<int>(true_rows_seen);
        ad::Mat train_x(n_replay + fresh_x.rows(), train_set.dim());
        std::vector<int> train_y;
        train_y.reserve(static_cast<size_t>(train_x.rows()));
        for (int i = 0; i < n_replay; ++i) {
          const auto pick = replay_rng.categorical(probs);
          train_x.row(i) = carried.u.row(static_cast<Eigen::Index>(pick));
          train_y.push_back(carried.z[pick]);
        }
        train_x.bottomRows(fresh_x.rows()) = fresh_x;
        train_y.insert(train_y.end(), fresh_y.begin(), fresh_y.end());

        // Augment the support from the new class, giving the newcomers a
        // total softmax mass proportional to their class share.
        Coreset start = carried;
        const int delta = m_t - start.size();
        if (delta > 0) {
          Rng pick_rng = Rng::stream(task_seed, "init");
          const auto new_idx = pick_rng.sample_without_replacement(
              static_cast<size_t>(fresh_x.rows()),
              static_cast<size_t>(std::min<int>(delta, fresh_x.rows())));
          const double old_lse = log_sum_exp_row(start.beta);
          const double beta_new = std::log(static_cast<double>(fresh_x.rows())) -
                                  std::log(std::max(1.0, true_rows_seen)) + old_lse -
                                  std::log(static_cast<double>(new_idx.size()));
          for (const auto idx : new_idx) {
            const int m = start.size();
            start.u.conservativeResize(m + 1, Eigen::NoChange);
            start.u.row(m) = fresh_x.row(static_cast<Eigen::Index>(idx));
            start.z.push_back(fresh_y[idx]);
            start.beta.conservativeResize(1, m + 1);
            start.beta(0, m) = beta_new;
            start.v_raw.conservativeResize(1, m + 1);
            start.v_raw(0, m) = 0.0;
          }
        }
        start.n_data = static_cast<double>(train_x.rows());
        start.mode = WeightMode::kSoftmax;
        start.train_u = true;
        start.train_weights = true;
        start.train_alpha = false;
        res = train_bb_psvi_from(model_t, train_x, train_y, std::move(start), tc);
      }
      carried = res.coreset;
      psi_final = res.psi;
      true_rows_seen += static_cast<double>(fresh_x.rows());

      for (const auto& s : res.trace.steps) combined.steps.push_back(s);

      const auto seen_idx = rows_with_labels(test_set, 0, top);
      const auto [seen_x, seen_y] = gather(test_set, seen_idx);
      const EvalReport task_report = evaluate(model_t, res.psi, res.coreset, seen_x, seen_y,
                                              cfg.eval_samples, task_seed,
                                              cfg.train.bilevel.iw_form);
      combined.evals.push_back({t, task_report.accuracy, task_report.nll, res.coreset.size()});
      if (t == tasks - 1) final_report = task_report;
    }

    TrialResult trial;
    trial.coreset_size = cfg.continual_sizes[static_cast<size_t>(tasks - 1)];
    trial.seed = seed;
    trial.report = final_report;
    trial.train = {carried, psi_final, std::move(combined)};
    outcome.trials.push_back(std::move(trial));
  }

  outcome.dir = prepare_out_dir(cfg);
  const ModelSpec final_spec = ModelSpec::bnn(train_set.dim(), task_top.back() + 1,
                                              cfg.hidden_units, Activation::kTanh, cfg.prior_std);
  for (const auto& trial : outcome.trials) {
    const std::string file = "continual-seed" + std::to_string(trial.seed) + ".json";
    write_file(outcome.dir / file, trial_to_json(cfg, trial, final_spec));
  }

  // Aggregate over seeds per task.
  std::string csv = "# config " + config_hash_hex(cfg) + "\n";
  csv += "task,coreset_size,seeds,accuracy_mean,accuracy_stderr,nll_mean,nll_stderr\n";
  for (int t = 0; t < tasks; ++t) {
    std::vector<double> acc, nll;
    int m_t = 0;
    for (const auto& trial : outcome.trials) {
      for (const auto& row : trial.train.trace.evals) {
        if (row.iter != t) continue;
        acc.push_back(row.accuracy);
        nll.push_back(row.nll);
        m_t = row.coreset_size;
      }
    }
    const auto a = mean_stderr(acc);
    const auto l = mean_stderr(nll);
    csv += std::to_string(t) + "," + std::to_string(m_t) + "," + std::to_string(acc.size()) + "," +
           fmt_double(a.mean) + "," + fmt_double(a.stderr_) + "," + fmt_double(l.mean) + "," +
           fmt_double(l.stderr_) + "\n";
  }
  outcome.aggregate_csv = csv;
  write_file(outcome.dir / "aggregate.csv", csv);
  return outcome;
}

std::string entropy_grid_csv(const Model& model, const VariationalGaussian& psi, const Coreset& c,
                             double x1_min, double x1_max, double x2_min, double x2_max, int res_x,
                             int res_y, int mc_samples, std::uint64_t seed) {
  if (model.spec().input_dim != 2)
    throw std::runtime_error("entropy grid needs a two-dimensional input space");
  if (res_x < 1 || res_y < 1) throw std::runtime_error("grid resolution must be >= 1");
  if (x1_max < x1_min || x2_max < x2_min) throw std::runtime_error("bad grid bounds");

  const auto coord = [](double lo, double hi, int i, int res) {
    return res == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * i / (res - 1);
  };
  ad::Mat grid(res_x * res_y, 2);
  int row = 0;
  for (int iy = 0; iy < res_y; ++iy)
    for (int ix = 0; ix < res_x; ++ix, ++row) {
      grid(row, 0) = coord(x1_min, x1_max, ix, res_x);
      grid(row, 1) = coord(x2_min, x2_max, iy, res_y);
    }

  Rng rng = Rng::stream(seed, "eval");
  const ad::Mat noise = noise_matrix(rng, mc_samples, model.param_count());
  const ad::Mat probs = posterior_predictive(model, psi, c, grid, noise);

  std::string out = "kind,x1,x2,value\n";
  for (int i = 0; i < probs.rows(); ++i) {
    double entropy = 0.0;
    for (int j = 0; j < probs.cols(); ++j) {
      const double p = probs(i, j);
      if (p > 0.0) entropy -= p * std::log(p);
    }
    out += "grid," + fmt_double(grid(i, 0)) + "," + fmt_double(grid(i, 1)) + "," +
           fmt_double(entropy) + "\n";
  }
  const ad::Mat weights = c.weights_value();
  for (int i = 0; i < c.size(); ++i)
    out += "coreset," + fmt_double(c.u(i, 0)) + "," + fmt_double(c.u(i, 1)) + "," +
           fmt_double(weights(0, i)) + "\n";
  return out;
}

}  // namespace corevi
