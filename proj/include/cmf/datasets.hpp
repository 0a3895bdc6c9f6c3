#pragma once

// Synthetic manifold samplers and CSV ingestion.

#include <string>
#include <vector>

#include "cmf/linalg.hpp"

namespace cmf::datasets {

using linalg::Matrix;
using linalg::Vector;

enum class DatasetKind { FuzzyLine, Sphere, Moebius, Csv };

const char* to_string(DatasetKind kind);
DatasetKind kind_from_string(const std::string& s);

struct DatasetSpec {
  DatasetKind kind = DatasetKind::FuzzyLine;
  int n = 1000;  // total rows for synthetic kinds; row cap for csv (0 = all)
  std::uint64_t seed = 0;
  double train_frac = 0.8;
  double valid_frac = 0.1;
  double test_frac = 0.1;
  std::string csv_path;
  bool standardize = true;
  double moebius_half_width = 0.5;
};

std::vector<std::string> validate(const DatasetSpec& spec);

/// Data dimension the spec produces (csv: number of header columns).
int data_dim(const DatasetSpec& spec);

struct Splits {
  Matrix train, valid, test;
  std::vector<std::string> columns;
  Vector mean, scale;  // standardization fitted on train (empty if off)
};

/// x1 ~ U(-2.5, 2.5), x2 = x1 + U(-0.5, 0.5).
Matrix sample_fuzzy_line(Eigen::Index n, linalg::Rng& rng);

/// Uniform on the unit sphere in R^3.
Matrix sample_sphere(Eigen::Index n, linalg::Rng& rng);

/// Moebius band (u, v) -> ((1 + v/2 cos(u/2)) cos u, (1 + v/2 cos(u/2)) sin u, v/2 sin(u/2)),
/// u in [0, 2pi), v in [-w, w], sampled uniformly in area by rejection.
struct MoebiusStats {
  long proposals = 0;
  long accepted = 0;
};
Matrix sample_moebius(Eigen::Index n, linalg::Rng& rng, double half_width = 0.5,
                      MoebiusStats* stats = nullptr);
double moebius_area_element(double u, double v);

struct CsvTable {
  std::vector<std::string> header;
  Matrix data;
};

/// Numeric CSV with one header row. Parse errors name the row and column.
CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const std::vector<std::string>& header, const Matrix& data);

/// Seeded train/valid/test split of the rows of `data`.
Splits split_rows(const Matrix& data, const DatasetSpec& spec);

/// Per-column standardization fitted on train and applied to all splits.
/// Throws ZeroVariance for a constant train column.
void standardize(Splits& s);

/// Samples or loads, splits and (csv only, if enabled) standardizes.
Splits load(const DatasetSpec& spec);

}  // namespace cmf::datasets
