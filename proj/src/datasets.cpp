#include "cmf/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include "cmf/error.hpp"

namespace cmf::datasets {

const char* to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::FuzzyLine: return "fuzzy_line";
    case DatasetKind::Sphere: return "sphere";
    case DatasetKind::Moebius: return "moebius";
    case DatasetKind::Csv: return "csv";
  }
  return "?";
}

DatasetKind kind_from_string(const std::string& s) {
  if (s == "fuzzy_line") return DatasetKind::FuzzyLine;
  if (s == "sphere") return DatasetKind::Sphere;
  if (s == "moebius") return DatasetKind::Moebius;
  if (s == "csv") return DatasetKind::Csv;
  throw Error(ErrorCode::Config, "unknown dataset kind '" + s + "' (expected fuzzy_line|sphere|moebius|csv)");
}

std::vector<std::string> validate(const DatasetSpec& spec) {
  std::vector<std::string> errs;
  if (spec.kind != DatasetKind::Csv && spec.n < 1) errs.push_back("dataset.n must be >= 1");
  if (spec.kind == DatasetKind::Csv && spec.n < 0) errs.push_back("dataset.n must be >= 0 for csv");
  if (spec.train_frac <= 0.0 || spec.valid_frac < 0.0 || spec.test_frac < 0.0) {
    errs.push_back("dataset split fractions must be non-negative with train > 0");
  }
  if (std::abs(spec.train_frac + spec.valid_frac + spec.test_frac - 1.0) > 1e-9) {
    errs.push_back("dataset split fractions must sum to 1");
  }
  if (spec.kind == DatasetKind::Csv && spec.csv_path.empty()) errs.push_back("dataset.csv_path is required for csv");
  if (spec.kind == DatasetKind::Moebius && !(spec.moebius_half_width > 0.0 && spec.moebius_half_width < 2.0)) {
    errs.push_back("dataset.moebius_half_width must be in (0, 2)");
  }
  return errs;
}

int data_dim(const DatasetSpec& spec) {
  switch (spec.kind) {
    case DatasetKind::FuzzyLine: return 2;
    case DatasetKind::Sphere:
    case DatasetKind::Moebius: return 3;
    case DatasetKind::Csv: {
      std::ifstream in(spec.csv_path);
      if (!in) throw Error(ErrorCode::Io, "cannot open " + spec.csv_path);
      std::string line;
      std::getline(in, line);
      return static_cast<int>(std::count(line.begin(), line.end(), ',') + 1);
    }
  }
  return 0;
}

Matrix sample_fuzzy_line(Eigen::Index n, linalg::Rng& rng) {
  Matrix x(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = rng.uniform(-2.5, 2.5);
    x(i, 1) = x(i, 0) + rng.uniform(-0.5, 0.5);
  }
  return x;
}

Matrix sample_sphere(Eigen::Index n, linalg::Rng& rng) {
  Matrix x(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Vector3d g;
    do {
      g << rng.normal(), rng.normal(), rng.normal();
    } while (g.norm() < 1e-12);
    x.row(i) = (g / g.norm()).transpose();
  }
  return x;
}

double moebius_area_element(double u, double v) {
  const double r = 1.0 + 0.5 * v * std::cos(0.5 * u);
  return 0.5 * std::sqrt(r * r + v * v / 16.0);
}

Matrix sample_moebius(Eigen::Index n, linalg::Rng& rng, double half_width, MoebiusStats* stats) {
  const double w = half_width;
  const double bound = 0.5 * std::sqrt((1.0 + 0.5 * w) * (1.0 + 0.5 * w) + w * w / 16.0);
  Matrix x(n, 3);
  MoebiusStats local;
  for (Eigen::Index i = 0; i < n;) {
    const double u = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double v = rng.uniform(-w, w);
    ++local.proposals;
    if (rng.uniform() * bound >= moebius_area_element(u, v)) continue;
    ++local.accepted;
    const double r = 1.0 + 0.5 * v * std::cos(0.5 * u);
    x(i, 0) = r * std::cos(u);
    x(i, 1) = r * std::sin(u);
    x(i, 2) = 0.5 * v * std::sin(0.5 * u);
    ++i;
  }
  if (stats) *stats = local;
  return x;
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::Parse, path + ": empty file, expected a header row");
  for (const auto& f : split_fields(line)) t.header.push_back(trim(f));
  const std::size_t cols = t.header.size();

  std::vector<double> values;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != cols) {
      throw Error(ErrorCode::Parse, path + ": row " + std::to_string(row) + ": expected " + std::to_string(cols) +
                                        " columns, found " + std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const std::string f = trim(fields[c]);
      double v = 0.0;
      const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v)) {
        throw Error(ErrorCode::Parse, path + ": row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                                          " ('" + t.header[c] + "'): not a finite number: '" + f + "'");
      }
      values.push_back(v);
    }
  }
  const Eigen::Index n = static_cast<Eigen::Index>(values.size() / std::max<std::size_t>(cols, 1));
  t.data = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), n, static_cast<Eigen::Index>(cols));
  return t;
}

void write_csv(const std::string& path, const std::vector<std::string>& header, const Matrix& data) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n' << std::setprecision(17);
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) out << (c ? "," : "") << data(r, c);
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "write failed: " + path);
}

Splits split_rows(const Matrix& data, const DatasetSpec& spec) {
  const Eigen::Index n = data.rows();
  std::vector<Eigen::Index> order(n);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  linalg::Rng rng = linalg::Rng(spec.seed).split(2);
  rng.shuffle(order);

  const auto n_train = static_cast<Eigen::Index>(std::llround(spec.train_frac * n));
  const auto n_valid = std::min(n - n_train, static_cast<Eigen::Index>(std::llround(spec.valid_frac * n)));
  auto take = [&](Eigen::Index from, Eigen::Index count) {
    const std::vector<Eigen::Index> idx(order.begin() + from, order.begin() + from + count);
    return Matrix(data(idx, Eigen::all));
  };
  Splits s;
  s.train = take(0, n_train);
  s.valid = take(n_train, n_valid);
  s.test = take(n_train + n_valid, n - n_train - n_valid);
  return s;
}

void standardize(Splits& s) {
  if (s.train.rows() == 0) throw Error(ErrorCode::InvalidArgument, "standardize: empty train split");
  s.mean = s.train.colwise().mean().transpose();
  s.scale.resize(s.train.cols());
  for (Eigen::Index c = 0; c < s.train.cols(); ++c) {
    const double var = (s.train.col(c).array() - s.mean[c]).square().mean();
    if (!(var > 0.0)) {
      const std::string name = c < static_cast<Eigen::Index>(s.columns.size()) ? s.columns[c] : std::to_string(c);
      throw Error(ErrorCode::ZeroVariance, "column '" + name + "' has zero variance in the train split");
    }
    s.scale[c] = std::sqrt(var);
  }
  for (Matrix* m : {&s.train, &s.valid, &s.test}) {
    *m = (m->rowwise() - s.mean.transpose()).array().rowwise() / s.scale.transpose().array();
  }
}

Splits load(const DatasetSpec& spec) {
  const auto errs = validate(spec);
  if (!errs.empty()) {
    std::string msg = "invalid dataset spec:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw Error(ErrorCode::Config, msg);
  }
  linalg::Rng rng = linalg::Rng(spec.seed).split(1);
  Matrix data;
  std::vector<std::string> columns;
  switch (spec.kind) {
    case DatasetKind::FuzzyLine: data = sample_fuzzy_line(spec.n, rng); break;
    case DatasetKind::Sphere: data = sample_sphere(spec.n, rng); break;
    case DatasetKind::Moebius: data = sample_moebius(spec.n, rng, spec.moebius_half_width); break;
    case DatasetKind::Csv: {
      CsvTable t = read_csv(spec.csv_path);
      columns = t.header;
      data = std::move(t.data);
      if (spec.n > 0 && spec.n < data.rows()) {
        std::vector<Eigen::Index> idx(data.rows());
        std::iota(idx.begin(), idx.end(), Eigen::Index{0});
        rng.shuffle(idx);
        idx.resize(spec.n);
        std::sort(idx.begin(), idx.end());
        data = Matrix(data(idx, Eigen::all));
      }
      break;
    }
  }
  if (columns.empty()) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) columns.push_back("x" + std::to_string(c));
  }
  Splits s = split_rows(data, spec);
  s.columns = columns;
  if (spec.kind == DatasetKind::Csv && spec.standardize) standardize(s);
  return s;
}

}  // namespace cmf::datasets
