#include "looplens/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace looplens {

namespace {

constexpr double kNormEps = 1e-6;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative radix-2 FFT; a.size() must be a power of two.
void fft_pow2(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        std::complex<double> u = a[i + j];
        std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

// Bluestein chirp-z: exact n-point DFT for arbitrary n via one padded
// power-of-two convolution.
std::vector<std::complex<double>> dft_bluestein(const std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> chirp(n);
  for (std::size_t j = 0; j < n; ++j) {
    // j^2 mod 2n keeps the trig argument small for long series
    const std::uint64_t q = (static_cast<std::uint64_t>(j) * j) % (2 * n);
    const double ang = std::numbers::pi * static_cast<double>(q) / static_cast<double>(n);
    chirp[j] = std::complex<double>(std::cos(ang), -std::sin(ang));
  }
  const std::size_t m = next_pow2(2 * n - 1);
  std::vector<std::complex<double>> a(m, {0.0, 0.0}), b(m, {0.0, 0.0});
  for (std::size_t j = 0; j < n; ++j) a[j] = x[j] * chirp[j];
  b[0] = std::conj(chirp[0]);
  for (std::size_t j = 1; j < n; ++j) b[j] = b[m - j] = std::conj(chirp[j]);
  fft_pow2(a, false);
  fft_pow2(b, false);
  for (std::size_t j = 0; j < m; ++j) a[j] *= b[j];
  fft_pow2(a, true);
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k] * chirp[k];
  return out;
}

}  // namespace

MatrixXd row_softmax(const Eigen::Ref<const MatrixXd>& logits, bool causal) {
  if (!logits.allFinite()) throw std::invalid_argument("row_softmax: non-finite input");
  if (causal && logits.rows() != logits.cols())
    throw std::invalid_argument("row_softmax: causal mask requires a square matrix");
  MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Eigen::Index valid = causal ? i + 1 : logits.cols();
    const double m = logits.row(i).head(valid).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < valid; ++j) {
      const double e = std::exp(logits(i, j) - m);
      out(i, j) = e;
      sum += e;
    }
    out.row(i).head(valid) /= sum;
    out.row(i).tail(logits.cols() - valid).setZero();
  }
  return out;
}

static MatrixXd scaled_rows(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain,
                            bool center) {
  if (gain.size() != x.cols()) throw std::invalid_argument("norm: gain length must equal column count");
  MatrixXd out(x.rows(), x.cols());
  const double inv_cols = 1.0 / static_cast<double>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    VectorXd row = x.row(i);
    if (center) row.array() -= row.mean();
    const double ms = row.squaredNorm() * inv_cols;
    const double scale = 1.0 / std::sqrt(ms + kNormEps);
    out.row(i) = (row.array() * scale * gain.array()).transpose();
  }
  return out;
}

MatrixXd rms_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain) {
  return scaled_rows(x, gain, false);
}

MatrixXd layer_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain) {
  return scaled_rows(x, gain, true);
}

std::vector<std::complex<double>> real_dft(const std::vector<double>& series) {
  std::vector<std::complex<double>> x(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) x[i] = {series[i], 0.0};
  if (is_pow2(x.size())) {
    fft_pow2(x, false);
    return x;
  }
  return dft_bluestein(x);
}

Spectrum real_fft_magnitudes(const std::vector<double>& series) {
  const int n = static_cast<int>(series.size());
  if (n < 4) throw std::invalid_argument("real_fft_magnitudes: series too short (need >= 4)");
  for (double v : series)
    if (!std::isfinite(v)) throw std::invalid_argument("real_fft_magnitudes: non-finite input");
  const auto bins = real_dft(series);
  Spectrum spec;
  spec.n = n;
  spec.magnitudes.resize(n / 2);
  for (int k = 1; k <= n / 2; ++k) spec.magnitudes[k - 1] = std::abs(bins[k]);
  return spec;
}

VectorXd symmetric_eigenvalues(const Eigen::Ref<const MatrixXd>& m) {
  if (m.rows() != m.cols()) throw std::invalid_argument("symmetric_eigenvalues: matrix not square");
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-9) throw std::invalid_argument("symmetric_eigenvalues: matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw std::runtime_error("symmetric_eigenvalues: solver failed");
  return es.eigenvalues().reverse();
}

Pca2d pca_2d(const Eigen::Ref<const MatrixXd>& points) {
  if (points.rows() < 3) throw std::invalid_argument("pca_2d: need at least 3 points");
  const Eigen::Index n = points.rows();
  MatrixXd centered = points.rowwise() - points.colwise().mean();
  MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw std::runtime_error("pca_2d: eigensolver failed");

  Pca2d result;
  result.axes.resize(points.cols(), 2);
  const Eigen::Index last = cov.rows() - 1;
  for (int c = 0; c < 2; ++c) {
    const Eigen::Index src = (cov.rows() >= 2) ? last - c : last;
    VectorXd axis = es.eigenvectors().col(src);
    Eigen::Index imax = 0;
    axis.cwiseAbs().maxCoeff(&imax);
    if (axis(imax) < 0.0) axis = -axis;
    result.axes.col(c) = axis;
    result.variances(c) = (cov.rows() >= 2 || c == 0) ? es.eigenvalues()(src) : 0.0;
  }
  if (points.cols() < 2) result.variances(1) = 0.0;

  result.rank_deficient =
      result.variances(1) <= 1e-12 * std::max(result.variances(0), 0.0) || result.variances(0) <= 0.0;
  result.coords = centered * result.axes;
  if (result.rank_deficient) {
    result.coords.col(1).setZero();
    result.variances(1) = std::max(result.variances(1), 0.0);
  }
  return result;
}

double frobenius_distance(const Eigen::Ref<const MatrixXd>& a, const Eigen::Ref<const MatrixXd>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("frobenius_distance: shape mismatch");
  return (a - b).norm();
}

double cosine_similarity(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b,
                         bool* zero_flag) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) {
    if (zero_flag) *zero_flag = true;
    return 0.0;
  }
  return a.dot(b) / (na * nb);
}

double mean_row_cosine(const Eigen::Ref<const MatrixXd>& a, const Eigen::Ref<const MatrixXd>& b,
                       bool* zero_flag) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mean_row_cosine: shape mismatch");
  if (a.rows() == 0) throw std::invalid_argument("mean_row_cosine: empty input");
  double acc = 0.0;
  for (Eigen::Index t = 0; t < a.rows(); ++t)
    acc += cosine_similarity(a.row(t).transpose(), b.row(t).transpose(), zero_flag);
  return acc / static_cast<double>(a.rows());
}

std::uint64_t GaussianRng::next_u64() {
  // splitmix64
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double GaussianRng::next() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  // (0,1] uniforms so log() stays finite
  const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double u2 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double ang = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(ang);
  have_spare_ = true;
  return r * std::cos(ang);
}

MatrixXd GaussianRng::matrix(int rows, int cols, double scale) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = scale * next();
  return m;
}

}  // namespace looplens
