#include "corevi/data.hpp"

#include "corevi/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace corevi {

namespace {

[[noreturn]] void line_error(const std::string& path, int line_no, const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + what);
}

// Accepts "+1", "-1", "3", "2.0"; rejects fractions and negatives other
// than -1. The -1/+1 convention maps onto classes 0/1.
int parse_label(const std::string& token, const std::string& path, int line_no) {
  double value = 0.0;
  size_t used = 0;
  try {
    value = std::stod(token, &used);
  } catch (const std::exception&) {
    line_error(path, line_no, "unreadable label '" + token + "'");
  }
  if (used != token.size()) line_error(path, line_no, "unreadable label '" + token + "'");
  if (value != std::floor(value)) line_error(path, line_no, "non-integer label '" + token + "'");
  if (value == -1.0) return 0;
  if (value < 0.0) line_error(path, line_no, "negative label '" + token + "'");
  return static_cast<int>(value);
}

struct SparseRow {
  int label = 0;
  std::vector<std::pair<int, double>> entries;  // 0-based index, value
};

double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }

}  // namespace

int Dataset::classes() const {
  int c = 0;
  for (int label : y) c = std::max(c, label + 1);
  return c;
}

void Dataset::validate() const {
  if (static_cast<int>(y.size()) != n())
    throw std::runtime_error("dataset: label count != row count");
  if (!X.allFinite()) throw std::runtime_error("dataset: non-finite feature value");
  for (int label : y)
    if (label < 0) throw std::runtime_error("dataset: negative label");
  if (!feature_names.empty() && static_cast<int>(feature_names.size()) != dim())
    throw std::runtime_error("dataset: feature name count != dimension");
}

Dataset load_libsvm(const std::string& path, int declared_dim) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);

  std::vector<SparseRow> rows;
  int max_index = 0;  // 1-based
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ss(line);
    std::string token;
    if (!(ss >> token)) continue;  // blank line
    SparseRow row;
    row.label = parse_label(token, path, line_no);
    while (ss >> token) {
      const size_t colon = token.find(':');
      if (colon == std::string::npos || colon == 0 || colon + 1 == token.size())
        line_error(path, line_no, "malformed feature '" + token + "'");
      int index = 0;
      double value = 0.0;
      try {
        size_t used = 0;
        index = std::stoi(token.substr(0, colon), &used);
        if (used != colon) throw std::invalid_argument(token);
        value = std::stod(token.substr(colon + 1), &used);
        if (used != token.size() - colon - 1) throw std::invalid_argument(token);
      } catch (const std::exception&) {
        line_error(path, line_no, "malformed feature '" + token + "'");
      }
      if (index < 1) line_error(path, line_no, "feature index must be >= 1");
      if (!std::isfinite(value)) line_error(path, line_no, "non-finite feature value");
      max_index = std::max(max_index, index);
      row.entries.emplace_back(index - 1, value);
    }
    rows.push_back(std::move(row));
  }

  if (declared_dim > 0 && max_index > declared_dim)
    throw std::runtime_error(path + ": feature index " + std::to_string(max_index) +
                             " exceeds declared dimension " + std::to_string(declared_dim));
  const int d = declared_dim > 0 ? declared_dim : max_index;

  Dataset out;
  out.X = ad::Mat::Zero(static_cast<int>(rows.size()), d);
  out.y.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    out.y.push_back(rows[i].label);
    for (const auto& [j, value] : rows[i].entries) out.X(static_cast<int>(i), j) = value;
  }
  out.validate();
  return out;
}

Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": missing header row");
  std::vector<std::string> columns;
  {
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) columns.push_back(cell);
  }
  int label_col = -1;
  std::vector<std::string> names;
  for (size_t j = 0; j < columns.size(); ++j) {
    if (columns[j] == "label") {
      if (label_col >= 0) throw std::runtime_error(path + ": duplicate 'label' column");
      label_col = static_cast<int>(j);
    } else {
      names.push_back(columns[j]);
    }
  }
  if (label_col < 0) throw std::runtime_error(path + ": no column named 'label'");
  const int d = static_cast<int>(columns.size()) - 1;

  std::vector<std::vector<double>> feature_rows;
  std::vector<int> labels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<double> row;
    row.reserve(static_cast<size_t>(d));
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col >= static_cast<int>(columns.size()))
        line_error(path, line_no, "more cells than header columns");
      if (col == label_col) {
        labels.push_back(parse_label(cell, path, line_no));
      } else {
        try {
          size_t used = 0;
          const double value = std::stod(cell, &used);
          if (used != cell.size()) throw std::invalid_argument(cell);
          row.push_back(value);
        } catch (const std::exception&) {
          line_error(path, line_no, "unreadable value '" + cell + "'");
        }
      }
      ++col;
    }
    if (col != static_cast<int>(columns.size()))
      line_error(path, line_no, "fewer cells than header columns");
    feature_rows.push_back(std::move(row));
  }

  Dataset out;
  out.X = ad::Mat(static_cast<int>(feature_rows.size()), d);
  for (size_t i = 0; i < feature_rows.size(); ++i)
    for (int j = 0; j < d; ++j) out.X(static_cast<int>(i), j) = feature_rows[i][static_cast<size_t>(j)];
  out.y = std::move(labels);
  out.feature_names = std::move(names);
  out.validate();
  return out;
}

Dataset gen_half_moon(int n, double noise_std, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("gen_half_moon: need at least two points");
  if (noise_std < 0.0) throw std::invalid_argument("gen_half_moon: negative noise");
  Rng rng = Rng::stream(seed, "data");

  const int n_outer = n / 2;
  const int n_inner = n - n_outer;
  Dataset out;
  out.X = ad::Mat(n, 2);
  out.y.resize(static_cast<size_t>(n));
  for (int i = 0; i < n_outer; ++i) {
    const double t = std::numbers::pi * i / std::max(1, n_outer - 1);
    out.X(i, 0) = std::cos(t) + noise_std * rng.normal();
    out.X(i, 1) = std::sin(t) + noise_std * rng.normal();
    out.y[static_cast<size_t>(i)] = 0;
  }
  for (int i = 0; i < n_inner; ++i) {
    const double t = std::numbers::pi * i / std::max(1, n_inner - 1);
    const int r = n_outer + i;
    out.X(r, 0) = 1.0 - std::cos(t) + noise_std * rng.normal();
    out.X(r, 1) = 0.5 - std::sin(t) + noise_std * rng.normal();
    out.y[static_cast<size_t>(r)] = 1;
  }
  out.feature_names = {"x0", "x1"};
  return out;
}

Dataset gen_four_class(int n, std::uint64_t seed, double center_scale, double blob_std) {
  if (n < 4) throw std::invalid_argument("gen_four_class: need at least four points");
  Rng rng = Rng::stream(seed, "data");

  const double c = center_scale;
  const double centers[4][2] = {{-c, -c}, {-c, c}, {c, -c}, {c, c}};
  Dataset out;
  out.X = ad::Mat(n, 2);
  out.y.resize(static_cast<size_t>(n));
  int row = 0;
  for (int k = 0; k < 4; ++k) {
    const int count = n / 4 + (k < n % 4 ? 1 : 0);
    for (int i = 0; i < count; ++i, ++row) {
      out.X(row, 0) = centers[k][0] + blob_std * rng.normal();
      out.X(row, 1) = centers[k][1] + blob_std * rng.normal();
      out.y[static_cast<size_t>(row)] = k;
    }
  }
  out.feature_names = {"x0", "x1"};
  return out;
}

Dataset gen_synthetic_logreg(int n, int d, std::uint64_t seed) {
  if (n < 1 || d < 1) throw std::invalid_argument("gen_synthetic_logreg: need n >= 1, d >= 1");
  Rng rng = Rng::stream(seed, "data");

  Dataset out;
  out.X = ad::Mat(n, d);
  out.y.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    double logit = 0.0;
    for (int j = 0; j < d; ++j) {
      out.X(i, j) = rng.normal();
      logit += 5.0 * out.X(i, j);
    }
    out.y[static_cast<size_t>(i)] = rng.uniform() < sigmoid(logit) ? 1 : 0;
  }
  return out;
}

std::pair<Dataset, Dataset> split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (test_fraction < 0.0 || test_fraction > 1.0)
    throw std::invalid_argument("split: test_fraction must be in [0, 1]");
  const int n = data.n();
  const int n_test = static_cast<int>(std::lround(n * test_fraction));
  Rng rng = Rng::stream(seed, "split");
  const std::vector<size_t> order = rng.permutation(static_cast<size_t>(n));

  auto take = [&](int begin, int count, const std::string& tag) {
    Dataset part;
    part.X = ad::Mat(count, data.dim());
    part.y.resize(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
      const size_t src = order[static_cast<size_t>(begin + i)];
      part.X.row(i) = data.X.row(static_cast<Eigen::Index>(src));
      part.y[static_cast<size_t>(i)] = data.y[src];
    }
    part.feature_names = data.feature_names;
    part.split = tag;
    return part;
  };
  return {take(n_test, n - n_test, "train"), take(0, n_test, "test")};
}

Scaler fit_scaler(const ad::Mat& X) {
  if (X.rows() == 0) throw std::invalid_argument("fit_scaler: empty matrix");
  Scaler s;
  s.mean = X.colwise().mean();
  ad::Mat centered = X.rowwise() - s.mean.row(0);
  s.std = (centered.array().square().colwise().sum() / X.rows()).sqrt();
  for (int j = 0; j < s.std.cols(); ++j) {
    if (s.std(0, j) <= 1e-12) {
      s.mean(0, j) = 0.0;
      s.std(0, j) = 1.0;
    }
  }
  return s;
}

ad::Mat apply_scaler(const Scaler& s, const ad::Mat& X) {
  if (X.cols() != s.mean.cols()) throw std::invalid_argument("apply_scaler: dimension mismatch");
  return (X.rowwise() - s.mean.row(0)).array().rowwise() / s.std.row(0).array();
}

ad::Mat invert_scaler(const Scaler& s, const ad::Mat& X) {
  if (X.cols() != s.mean.cols()) throw std::invalid_argument("invert_scaler: dimension mismatch");
  return (X.array().rowwise() * s.std.row(0).array()).rowwise() + s.mean.row(0).array();
}

Scaler standardize(Dataset& train, const std::vector<Dataset*>& others) {
  const Scaler s = fit_scaler(train.X);
  train.X = apply_scaler(s, train.X);
  for (Dataset* d : others) {
    if (d == nullptr) throw std::invalid_argument("standardize: null dataset");
    d->X = apply_scaler(s, d->X);
  }
  return s;
}

bool check_known_counts(const Dataset& d, const std::string& name) {
  struct Known {
    const char* name;
    int rows;
    int dims;
  };
  // Published row/dimension statistics (train + test combined).
  static constexpr Known table[] = {
      {"phishing", 8844 + 2210, 11},
      {"adult", 24130 + 6032, 11},
      {"webspam", 100948 + 25237, 128},
  };
  for (const Known& k : table) {
    if (name != k.name) continue;
    if (d.n() == k.rows && d.dim() == k.dims) return true;
    std::cerr << "warning: " << name << " has " << d.n() << " rows x " << d.dim()
              << " features; expected " << k.rows << " x " << k.dims
              << " (upstream file may have drifted)\n";
    return false;
  }
  return true;
}

}  // namespace corevi
