#include "sharpopt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "sharpopt/format.hpp"

namespace sharpopt {
namespace {

// Stream ids: shared structure (centers, maps) vs per-split sampling.
constexpr std::uint64_t kSharedStream = 0x5EED;

std::uint64_t split_stream(Split s) { return s == Split::train ? 1 : 2; }

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

FeatureStats feature_stats(const Tensor& x) {
  const std::size_t m = x.rows(), d = x.cols();
  FeatureStats st{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) st.mean[j] += x.at(i, j);
  for (double& v : st.mean) v /= static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x.at(i, j) - st.mean[j];
      st.stddev[j] += c * c;
    }
  for (double& v : st.stddev) {
    v = std::sqrt(v / static_cast<double>(m));
    if (v == 0.0) v = 1.0;
  }
  return st;
}

void standardize(Tensor& x, const FeatureStats& st) {
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x.at(i, j) = (x.at(i, j) - st.mean[j]) / st.stddev[j];
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && s[start] == ' ') ++start;
  return s.substr(start);
}

}  // namespace

std::string to_string(Task t) { return t == Task::classification ? "classification" : "regression"; }
std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

std::size_t Dataset::output_dim() const {
  if (task == Task::classification) return num_classes;
  return targets.rank() == 1 ? 1 : targets.extent(1);
}

Batch Dataset::batch(std::span<const std::size_t> rows) const {
  Batch b;
  b.inputs = inputs.rows_slice(rows);
  b.targets = targets.rows_slice(rows);
  b.instance_ids.assign(rows.begin(), rows.end());
  return b;
}

Batch Dataset::all() const {
  std::vector<std::size_t> rows(size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return batch(rows);
}

Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed, Split split,
                       bool standardize_features) {
  if (n < 2) throw ParameterError("make_two_moons needs n >= 2");
  if (!(noise >= 0.0)) throw ParameterError("make_two_moons: noise must be nonnegative");
  Rng rng(seed, split_stream(split));
  Tensor x(Shape{n, 2});
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    const double t = std::numbers::pi * rng.uniform();
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    if (noise > 0.0) {
      px += noise * rng.normal();
      py += noise * rng.normal();
    }
    x.at(i, 0) = px;
    x.at(i, 1) = py;
    y[i] = static_cast<double>(label);
  }
  if (standardize_features) standardize(x, feature_stats(x));
  Dataset d;
  d.inputs = std::move(x);
  d.targets = std::move(y);
  d.task = Task::classification;
  d.split = split;
  d.num_classes = 2;
  d.provenance = "two-moons(n=" + std::to_string(n) + ", noise=" + format_double(noise) +
                 ", seed=" + std::to_string(seed) + ")";
  return d;
}

Dataset make_blobs(std::size_t n, std::size_t dims, std::size_t classes, double separation,
                   std::uint64_t seed, Split split) {
  if (n < 1 || classes < 2 || dims + 1 < classes) {
    throw ParameterError("make_blobs needs n >= 1, classes >= 2 and dims >= classes - 1");
  }
  Rng rng(seed, split_stream(split));
  Tensor x(Shape{n, dims});
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % classes;
    for (std::size_t j = 0; j < dims; ++j) {
      const double center = (label > 0 && j == label - 1) ? separation : 0.0;
      x.at(i, j) = center + rng.normal();
    }
    y[i] = static_cast<double>(label);
  }
  Dataset d;
  d.inputs = std::move(x);
  d.targets = std::move(y);
  d.task = Task::classification;
  d.split = split;
  d.num_classes = classes;
  d.provenance = "blobs(n=" + std::to_string(n) + ", seed=" + std::to_string(seed) + ")";
  return d;
}

Dataset make_linreg(std::size_t n, std::size_t d_in, std::size_t d_out, double noise,
                    std::uint64_t seed, Split split) {
  if (n < 1 || d_in < 1 || d_out < 1) throw ParameterError("make_linreg: sizes must be positive");
  if (!(noise >= 0.0)) throw ParameterError("make_linreg: noise must be nonnegative");
  Rng shared(seed, kSharedStream);
  Tensor a(Shape{d_out, d_in});
  for (double& v : a.data()) v = shared.normal();
  Rng rng(seed, split_stream(split));
  Tensor x(Shape{n, d_in});
  Tensor y(Shape{n, d_out});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d_in; ++j) x.at(i, j) = rng.normal();
    for (std::size_t k = 0; k < d_out; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d_in; ++j) acc += a.at(k, j) * x.at(i, j);
      y.at(i, k) = acc + (noise > 0.0 ? noise * rng.normal() : 0.0);
    }
  }
  Dataset d;
  d.inputs = std::move(x);
  d.targets = std::move(y);
  d.task = Task::regression;
  d.split = split;
  d.true_map = std::move(a);
  d.provenance = "linreg(n=" + std::to_string(n) + ", noise=" + format_double(noise) +
                 ", seed=" + std::to_string(seed) + ")";
  return d;
}

DataSplit two_moons_split(std::size_t n_train, std::size_t n_test, double noise,
                          std::uint64_t seed) {
  DataSplit s{make_two_moons(n_train, noise, seed, Split::train, false),
              make_two_moons(n_test, noise, seed, Split::test, false)};
  const FeatureStats st = feature_stats(s.train.inputs);
  standardize(s.train.inputs, st);
  standardize(s.test.inputs, st);
  return s;
}

DataSplit blobs_split(std::size_t n_train, std::size_t n_test, std::size_t dims,
                      std::size_t classes, double separation, std::uint64_t seed) {
  return {make_blobs(n_train, dims, classes, separation, seed, Split::train),
          make_blobs(n_test, dims, classes, separation, seed, Split::test)};
}

DataSplit linreg_split(std::size_t n_train, std::size_t n_test, std::size_t d_in,
                       std::size_t d_out, double noise, std::uint64_t seed) {
  return {make_linreg(n_train, d_in, d_out, noise, seed, Split::train),
          make_linreg(n_test, d_in, d_out, noise, seed, Split::test)};
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw ParseError(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ":1: missing header row");
  std::vector<std::string> header = split_commas(line);
  for (auto& h : header) h = trim(h);
  const auto target_it = std::find(header.begin(), header.end(), schema.target_column);
  if (target_it == header.end()) {
    throw ParseError(path + ":1: target column '" + schema.target_column + "' not found in header");
  }
  const std::size_t target_col = static_cast<std::size_t>(target_it - header.begin());
  const std::size_t ncols = header.size();
  const std::size_t nfeat = ncols - 1;

  std::vector<double> features;
  std::vector<double> targets;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_commas(line);
    if (cells.size() != ncols) {
      throw ParseError(path + ":" + std::to_string(line_no) + ": expected " + std::to_string(ncols) +
                       " cells, found " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < ncols; ++c) {
      double v = 0.0;
      if (!parse_double(cells[c], v)) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": column '" + header[c] +
                         "' is not a number: '" + cells[c] + "'");
      }
      if (c == target_col) {
        if (schema.task == Task::classification && (v < 0.0 || v != std::floor(v))) {
          throw ParseError(path + ":" + std::to_string(line_no) + ": class label '" + cells[c] +
                           "' is not a nonnegative integer");
        }
        targets.push_back(v);
      } else {
        features.push_back(v);
      }
    }
  }
  const std::size_t m = targets.size();
  if (m == 0) throw ParseError(path + ": no data rows");
  Dataset d;
  d.inputs = Tensor(Shape{m, nfeat}, std::move(features));
  d.task = schema.task;
  d.provenance = path;
  if (schema.task == Task::classification) {
    d.num_classes = static_cast<std::size_t>(*std::max_element(targets.begin(), targets.end())) + 1;
    d.targets = Tensor(Shape{m}, std::move(targets));
  } else {
    d.targets = Tensor(Shape{m, 1}, std::move(targets));
  }
  return d;
}

void save_csv(const std::string& path, const Dataset& data, const std::string& target_column) {
  if (data.task == Task::regression && data.output_dim() != 1) {
    throw ParameterError("save_csv supports a single target column");
  }
  std::ofstream out(path);
  if (!out) throw ParseError(path + ": cannot open for writing");
  const std::size_t d = data.input_dim();
  for (std::size_t j = 0; j < d; ++j) out << "x" << j << ",";
  out << target_column << "\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < d; ++j) out << format_double(data.inputs.at(i, j)) << ",";
    out << format_double(data.targets[i]) << "\n";
  }
  if (!out) throw ParseError(path + ": write failed");
}

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, Rng& rng, bool shuffle) {
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle) rng.shuffle(std::span<std::size_t>(order));
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, order.size() - start);
    out.push_back(data.batch(std::span<const std::size_t>(order).subspan(start, len)));
  }
  return out;
}

}  // namespace sharpopt
