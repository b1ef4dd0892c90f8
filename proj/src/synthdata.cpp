#include "mtl/synthdata.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

#include "mtl/binary_io.hpp"
#include "mtl/error.hpp"
#include "mtl/file_io.hpp"

namespace mtl {

namespace {
// Substream indices for the generator's independent random components.
constexpr std::uint64_t kMapStream = 0x6d61700000000000ULL;
constexpr std::uint64_t kSampleStream = 0x73616d0000000000ULL;
}  // namespace

namespace {

// Loadings L (C x C) with L L^T = R, from the eigendecomposition so that
// semidefinite (rank-deficient) correlations are accepted.
Eigen::MatrixXd correlation_factor(const GeneratorConfig& cfg) {
  const auto c = static_cast<Eigen::Index>(cfg.task_count);
  if (cfg.task_correlation.empty()) return Eigen::MatrixXd::Identity(c, c);
  Eigen::MatrixXd r(c, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index k = 0; k < c; ++k) r(j, k) = cfg.task_correlation(j, k);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r);
  if (eig.info() != Eigen::Success) throw ConfigError("generator: eigendecomposition failed");
  if (eig.eigenvalues().minCoeff() < -1e-9) {
    throw ConfigError("generator: task_correlation is not positive semidefinite");
  }
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

}  // namespace

void GeneratorConfig::validate() const {
  if (task_count == 0 || input_dim == 0 || sample_count == 0) {
    throw ConfigError("generator: task_count, input_dim and sample_count must be positive");
  }
  if (latent_dim < task_count) {
    throw ConfigError("generator: latent_dim must be >= task_count");
  }
  if (positive_rates.size() != task_count) {
    throw ConfigError("generator: need one positive rate per task");
  }
  for (double r : positive_rates) {
    if (!(r > 0.0 && r < 1.0)) throw ConfigError("generator: positive rates must lie in (0,1)");
  }
  if (!(feature_noise_std >= 0.0)) throw ConfigError("generator: feature_noise_std must be >= 0");
  if (!task_correlation.empty()) {
    if (task_correlation.rows() != task_count || task_correlation.cols() != task_count) {
      throw ConfigError("generator: task_correlation must be C x C");
    }
    for (std::size_t j = 0; j < task_count; ++j) {
      if (task_correlation(j, j) != 1.0) throw ConfigError("generator: correlation diagonal must be 1");
      for (std::size_t k = 0; k < task_count; ++k) {
        const double v = task_correlation(j, k);
        if (!(v >= -1.0 && v <= 1.0)) throw ConfigError("generator: correlation outside [-1,1]");
        if (v != task_correlation(k, j)) throw ConfigError("generator: correlation not symmetric");
      }
    }
    correlation_factor(*this);
  }
}

RealMatrix banded_correlation(std::size_t tasks, double rho) {
  RealMatrix r(tasks, tasks);
  for (std::size_t j = 0; j < tasks; ++j)
    for (std::size_t k = 0; k < tasks; ++k)
      r(j, k) = std::pow(rho, static_cast<double>(j > k ? j - k : k - j));
  return r;
}

void LabeledDataset::validate() const {
  if (labels.rows() != features.rows()) throw ShapeError("dataset: labels rows != feature rows");
  require_same_shape(labels, mask, "dataset mask");
  if (noisy_labels) require_same_shape(labels, *noisy_labels, "dataset noisy labels");
}

LabeledDataset generate(const GeneratorConfig& cfg) {
  cfg.validate();
  const std::size_t n_rows = cfg.sample_count;
  const std::size_t tasks = cfg.task_count;
  const std::size_t latent = cfg.latent_dim;
  const std::size_t in_dim = cfg.input_dim;
  const Eigen::MatrixXd loading = correlation_factor(cfg);

  // Affine map latent -> features.
  RealMatrix map(in_dim, latent);
  std::vector<double> offset(in_dim);
  {
    CounterRng rng = CounterRng::substream(cfg.seed, kMapStream);
    const double scale = 1.0 / std::sqrt(static_cast<double>(latent));
    for (double& a : map.data()) a = scale * rng.normal();
    for (double& o : offset) o = 0.5 * rng.normal();
  }

  LabeledDataset ds;
  ds.features = RealMatrix(n_rows, in_dim);
  RealMatrix scores(n_rows, tasks);

  const auto rows = static_cast<std::ptrdiff_t>(n_rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < rows; ++n) {
    CounterRng rng = CounterRng::substream(cfg.seed, kSampleStream + static_cast<std::uint64_t>(n));
    std::vector<double> z(latent);
    for (double& v : z) v = rng.normal();
    for (std::size_t j = 0; j < tasks; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < tasks; ++k) {
        s += loading(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) * z[k];
      }
      scores(n, j) = s;
    }
    for (std::size_t i = 0; i < in_dim; ++i) {
      double x = offset[i];
      for (std::size_t k = 0; k < latent; ++k) x += map(i, k) * z[k];
      ds.features(n, i) = x + cfg.feature_noise_std * rng.normal();
    }
  }

  ds.labels = BitMatrix(n_rows, tasks);
  std::vector<double> column(n_rows);
  for (std::size_t j = 0; j < tasks; ++j) {
    for (std::size_t n = 0; n < n_rows; ++n) column[n] = scores(n, j);
    const auto positives = static_cast<std::size_t>(
        std::llround(cfg.positive_rates[j] * static_cast<double>(n_rows)));
    double tau = 0.0;
    if (positives == 0) {
      tau = *std::max_element(column.begin(), column.end());
    } else if (positives >= n_rows) {
      tau = -INFINITY;
    } else {
      // tau is the (positives+1)-th largest score; labels are s > tau.
      std::nth_element(column.begin(), column.begin() + static_cast<std::ptrdiff_t>(positives),
                       column.end(), std::greater<>());
      tau = column[positives];
    }
    for (std::size_t n = 0; n < n_rows; ++n) ds.labels(n, j) = scores(n, j) > tau ? 1 : 0;
  }
  ds.mask = BitMatrix(n_rows, tasks, 1);
  return ds;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t rows, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("split: fraction must lie in (0,1)");
  }
  // The small slack keeps e.g. 0.7 * 10 from rounding up to 8.
  const auto first = static_cast<std::size_t>(
      std::ceil(train_fraction * static_cast<double>(rows) - 1e-9));
  if (first == 0 || first >= rows) throw InvalidArgument("split: one side would be empty");
  std::vector<std::size_t> perm(rows);
  std::iota(perm.begin(), perm.end(), 0);
  CounterRng rng(seed);
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(first), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {std::move(a), std::move(b)};
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds, double train_fraction,
                                                std::uint64_t seed) {
  const auto [a, b] = split_indices(ds.size(), train_fraction, seed);
  return {take_rows(ds, a), take_rows(ds, b)};
}

LabeledDataset corrupt_labels(const LabeledDataset& ds, double flip_rate, std::uint64_t seed) {
  if (!(flip_rate >= 0.0 && flip_rate < 0.5)) {
    throw InvalidArgument("corrupt_labels: flip_rate must lie in [0, 0.5)");
  }
  LabeledDataset out = ds;
  BitMatrix noisy = ds.labels;
  const auto rows = static_cast<std::ptrdiff_t>(ds.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t n = 0; n < rows; ++n) {
    CounterRng rng = CounterRng::substream(seed, static_cast<std::uint64_t>(n));
    for (auto& y : noisy.row(static_cast<std::size_t>(n))) {
      if (rng.bernoulli(flip_rate)) y ^= 1;
    }
  }
  out.noisy_labels = std::move(noisy);
  return out;
}

namespace {
template <typename T>
Matrix<T> gather_rows(const Matrix<T>& m, std::span<const std::size_t> rows) {
  Matrix<T> out(rows.size(), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= m.rows()) throw ShapeError("row index out of range");
    std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
  }
  return out;
}

template <typename T>
Matrix<T> gather_cols(const Matrix<T>& m, std::span<const std::size_t> cols) {
  Matrix<T> out(m.rows(), cols.size());
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c] >= m.cols()) throw ShapeError("task index out of range");
    for (std::size_t r = 0; r < m.rows(); ++r) out(r, c) = m(r, cols[c]);
  }
  return out;
}

template <typename T>
Matrix<T> stack(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) throw ShapeError("concat: column mismatch");
  std::vector<T> data = a.data();
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Matrix<T>(a.rows() + b.rows(), a.cols(), std::move(data));
}
}  // namespace

LabeledDataset take_rows(const LabeledDataset& ds, std::span<const std::size_t> rows) {
  LabeledDataset out;
  out.features = gather_rows(ds.features, rows);
  out.labels = gather_rows(ds.labels, rows);
  out.mask = gather_rows(ds.mask, rows);
  if (ds.noisy_labels) out.noisy_labels = gather_rows(*ds.noisy_labels, rows);
  return out;
}

LabeledDataset select_tasks(const LabeledDataset& ds, std::span<const std::size_t> tasks) {
  if (tasks.empty()) throw InvalidArgument("select_tasks: empty task list");
  LabeledDataset out;
  out.features = ds.features;
  out.labels = gather_cols(ds.labels, tasks);
  out.mask = gather_cols(ds.mask, tasks);
  if (ds.noisy_labels) out.noisy_labels = gather_cols(*ds.noisy_labels, tasks);
  return out;
}

LabeledDataset concat(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.size() == 0) return b;
  if (b.size() == 0) return a;
  if (a.task_count() != b.task_count()) throw ShapeError("concat: task count mismatch");
  LabeledDataset out;
  out.features = stack(a.features, b.features);
  out.labels = stack(a.labels, b.labels);
  out.mask = stack(a.mask, b.mask);
  if (a.noisy_labels && b.noisy_labels) out.noisy_labels = stack(*a.noisy_labels, *b.noisy_labels);
  return out;
}

BalanceSelection batch_balance(std::span<const std::uint8_t> labels, double alpha, CounterRng& rng) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidArgument("batch_balance: alpha must lie in (0,1]");
  BalanceSelection sel;
  sel.alpha = alpha;
  std::vector<std::size_t> negatives;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      sel.kept.push_back(i);
    } else {
      negatives.push_back(i);
    }
  }
  sel.positives = sel.kept.size();
  const double budget = alpha * static_cast<double>(negatives.size());
  std::size_t keep = negatives.size();
  if (budget > static_cast<double>(sel.positives)) {
    // nearbyint rounds half to even under the default rounding mode.
    keep = static_cast<std::size_t>(std::nearbyint(budget));
    for (std::size_t i = 0; i < keep; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.below(negatives.size() - i));
      std::swap(negatives[i], negatives[j]);
    }
  }
  sel.kept.insert(sel.kept.end(), negatives.begin(),
                  negatives.begin() + static_cast<std::ptrdiff_t>(keep));
  sel.negatives_kept = keep;
  std::sort(sel.kept.begin(), sel.kept.end());
  return sel;
}

BitMatrix balance_mask(const BitMatrix& labels, const BitMatrix& valid, double alpha,
                       std::uint64_t seed, std::span<const std::size_t> task_ids) {
  require_same_shape(labels, valid, "balance_mask");
  if (!task_ids.empty() && task_ids.size() != labels.cols()) {
    throw ShapeError("balance_mask: one task id per column required");
  }
  BitMatrix out(labels.rows(), labels.cols(), 0);
  std::vector<std::size_t> rows;
  std::vector<std::uint8_t> column;
  for (std::size_t j = 0; j < labels.cols(); ++j) {
    rows.clear();
    column.clear();
    for (std::size_t n = 0; n < labels.rows(); ++n) {
      if (valid(n, j)) {
        rows.push_back(n);
        column.push_back(labels(n, j));
      }
    }
    if (rows.empty()) continue;
    CounterRng rng = CounterRng::substream(seed, task_ids.empty() ? j : task_ids[j]);
    for (auto k : batch_balance(column, alpha, rng).kept) out(rows[k], j) = 1;
  }
  return out;
}

namespace {
constexpr std::string_view kDatasetMagic = "MTLD";
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

// "MTLD", u32 version, u64 N, u64 C, u64 input_dim, u8 has_noisy, f64 features
// (row-major), u8 labels, [u8 noisy labels], u8 mask.
std::vector<std::uint8_t> encode_dataset(const LabeledDataset& ds) {
  ds.validate();
  ByteWriter out;
  out.magic(kDatasetMagic);
  out.u32(kDatasetVersion);
  out.u64(ds.size());
  out.u64(ds.task_count());
  out.u64(ds.input_dim());
  out.u8(ds.noisy_labels ? 1 : 0);
  out.f64s(ds.features.data());
  out.bytes(ds.labels.data());
  if (ds.noisy_labels) out.bytes(ds.noisy_labels->data());
  out.bytes(ds.mask.data());
  return std::move(out.buffer());
}

LabeledDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  in.expect_magic(kDatasetMagic);
  if (const auto v = in.u32(); v != kDatasetVersion) {
    throw ParseError("unsupported dataset version " + std::to_string(v));
  }
  const auto rows = in.count(1ull << 32, "row count");
  const auto tasks = in.count(1u << 20, "task count");
  const auto dim = in.count(1u << 20, "input dim");
  const auto has_noisy = in.u8();
  if (has_noisy > 1) throw ParseError("bad noisy flag");
  const std::uint64_t cells = rows * tasks;
  const std::uint64_t expect = rows * dim * 8 + cells * (has_noisy ? 3 : 2);
  if (in.remaining() != expect) throw ParseError("dataset payload has wrong size");

  LabeledDataset ds;
  ds.features = RealMatrix(rows, dim);
  in.f64s(ds.features.data());
  ds.labels = BitMatrix(rows, tasks);
  in.bytes(ds.labels.data());
  if (has_noisy) {
    ds.noisy_labels = BitMatrix(rows, tasks);
    in.bytes(ds.noisy_labels->data());
  }
  ds.mask = BitMatrix(rows, tasks);
  in.bytes(ds.mask.data());
  auto binary = [](const BitMatrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](auto v) { return v <= 1; });
  };
  if (!binary(ds.labels) || !binary(ds.mask) || (ds.noisy_labels && !binary(*ds.noisy_labels))) {
    throw ParseError("label bytes must be 0 or 1");
  }
  return ds;
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds) {
  write_file_atomic(path, encode_dataset(ds));
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(read_file(path));
}

std::string dataset_csv(const LabeledDataset& ds) {
  std::string out;
  for (std::size_t i = 0; i < ds.input_dim(); ++i) out += "features_" + std::to_string(i) + ",";
  for (const char* prefix : {"label_", "noisy_", "mask_"}) {
    for (std::size_t j = 0; j < ds.task_count(); ++j) out += prefix + std::to_string(j) + ",";
  }
  out.back() = '\n';
  char buf[32];
  for (std::size_t n = 0; n < ds.size(); ++n) {
    for (double x : ds.features.row(n)) {
      std::snprintf(buf, sizeof buf, "%.17g,", x);
      out += buf;
    }
    for (auto y : ds.labels.row(n)) out += y ? "1," : "0,";
    for (std::size_t j = 0; j < ds.task_count(); ++j) {
      if (ds.noisy_labels) out += (*ds.noisy_labels)(n, j) ? "1" : "0";
      out += ",";
    }
    for (auto m : ds.mask.row(n)) out += m ? "1," : "0,";
    out.back() = '\n';
  }
  return out;
}

}  // namespace mtl
