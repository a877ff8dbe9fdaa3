#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <vector>

namespace looplens {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Magnitude spectrum of a real series. Bin b (0-based) holds the modulus of
/// DFT bin b+1, i.e. the DC bin is excluded; length is floor(n/2).
struct Spectrum {
  std::vector<double> magnitudes;
  int n = 0;  // original series length
};

/// Result of a 2-component PCA. `coords` are the projections (rows x 2),
/// `axes` the unit principal directions (cols x 2). When the input has rank
/// below 2 the second component is zeroed and `rank_deficient` is set.
struct Pca2d {
  MatrixXd coords;
  MatrixXd axes;
  Eigen::Vector2d variances = Eigen::Vector2d::Zero();
  bool rank_deficient = false;
};

// Row-wise softmax. With `causal` set the input must be square and entries
// with column > row are forced to exactly zero before normalization.
MatrixXd row_softmax(const Eigen::Ref<const MatrixXd>& logits, bool causal = false);

// RMS normalization per row with learnable per-channel gain. An epsilon of
// 1e-6 inside the mean square keeps all-zero rows finite.
MatrixXd rms_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain);

// Mean-centered variant (LayerNorm without bias), same epsilon policy.
MatrixXd layer_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain);

// Exact n-point complex DFT of a real series. Radix-2 for power-of-two
// lengths, Bluestein otherwise, so any length matches the O(n^2) definition
// to roundoff.
std::vector<std::complex<double>> real_dft(const std::vector<double>& series);

// Magnitudes of DFT bins 1..floor(n/2). Throws for series shorter than 4.
Spectrum real_fft_magnitudes(const std::vector<double>& series);

// Eigenvalues of a symmetric matrix in descending order. The input must be
// symmetric within 1e-9 (max absolute asymmetry).
VectorXd symmetric_eigenvalues(const Eigen::Ref<const MatrixXd>& m);

// Projection of `points` (rows = observations) onto the top-2 eigenvectors of
// the centered covariance. Sign convention: the largest-magnitude entry of
// each axis is positive. Requires at least 3 rows.
Pca2d pca_2d(const Eigen::Ref<const MatrixXd>& points);

double frobenius_distance(const Eigen::Ref<const MatrixXd>& a, const Eigen::Ref<const MatrixXd>& b);

// Cosine similarity of two vectors; a zero vector yields 0 and sets
// *zero_flag when provided.
double cosine_similarity(const Eigen::Ref<const VectorXd>& a, const Eigen::Ref<const VectorXd>& b,
                         bool* zero_flag = nullptr);

// Mean over rows of the per-token cosine between two equally shaped state
// matrices. Zero rows contribute 0 and set *zero_flag.
double mean_row_cosine(const Eigen::Ref<const MatrixXd>& a, const Eigen::Ref<const MatrixXd>& b,
                       bool* zero_flag = nullptr);

/// Deterministic standard-normal stream (mt19937_64 + Box-Muller). The same
/// seed yields the same sequence on every platform we target.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : state_(seed) {}

  double next();

  // Fills row-major, one draw per entry.
  MatrixXd matrix(int rows, int cols, double scale = 1.0);

 private:
  std::uint64_t next_u64();

  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace looplens
