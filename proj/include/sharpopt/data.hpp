#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sharpopt/models.hpp"
#include "sharpopt/rng.hpp"
#include "sharpopt/tensor.hpp"

namespace sharpopt {

enum class Task { classification, regression };
enum class Split { train, test };

std::string to_string(Task t);
std::string to_string(Split s);

/// Malformed CSV input; the message carries the 1-based line number.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dataset {
  Tensor inputs;   // (M, d_in)
  Tensor targets;  // (M) class ids, or (M, d_out)
  Task task = Task::classification;
  Split split = Split::train;
  std::string provenance;
  std::size_t num_classes = 0;
  /// Linear map used by make_linreg, shape (d_out, d_in).
  std::optional<Tensor> true_map;

  std::size_t size() const { return inputs.rank() ? inputs.extent(0) : 0; }
  std::size_t input_dim() const { return inputs.extent(1); }
  std::size_t output_dim() const;
  Batch batch(std::span<const std::size_t> rows) const;
  Batch all() const;
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Two interleaved unit half-circles, balanced classes, Gaussian noise, then
/// per-feature standardization (skipped when `standardize` is false).
Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed, Split split = Split::train,
                       bool standardize = true);

/// Isotropic Gaussian blobs (unit std) with centers spaced `separation` apart
/// along distinct axes (class k at separation * e_k, class 0 at the origin).
Dataset make_blobs(std::size_t n, std::size_t dims, std::size_t classes, double separation,
                   std::uint64_t seed, Split split = Split::train);

/// y = A x + noise with x ~ N(0, I); A ~ N(0, 1) is shared by both splits and stored.
Dataset make_linreg(std::size_t n, std::size_t d_in, std::size_t d_out, double noise,
                    std::uint64_t seed, Split split = Split::train);

/// Train and test sets drawn from disjoint seed streams. Two-moons test data is
/// standardized with the training statistics.
DataSplit two_moons_split(std::size_t n_train, std::size_t n_test, double noise,
                          std::uint64_t seed);
DataSplit blobs_split(std::size_t n_train, std::size_t n_test, std::size_t dims,
                      std::size_t classes, double separation, std::uint64_t seed);
DataSplit linreg_split(std::size_t n_train, std::size_t n_test, std::size_t d_in,
                       std::size_t d_out, double noise, std::uint64_t seed);

struct CsvSchema {
  std::string target_column = "target";
  Task task = Task::classification;
};

/// Every non-target column is a feature. Throws ParseError on ragged rows,
/// non-numeric cells or a missing target column.
Dataset load_csv(const std::string& path, const CsvSchema& schema);
/// Shortest round-trip decimal formatting; load_csv reads back identical doubles.
void save_csv(const std::string& path, const Dataset& data,
              const std::string& target_column = "target");

/// One epoch of batches. Every row appears exactly once; the final short batch is kept.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, Rng& rng, bool shuffle);

}  // namespace sharpopt
