#pragma once

#include "looplens/metrics.hpp"
#include "looplens/model.hpp"

#include <string>
#include <vector>

namespace looplens {

struct ConvergenceParams {
  // Converged: mean Frobenius distance to the reference over the last
  // `window` recurrences before it, relative to the mean state norm there.
  double rel_threshold = 1e-4;
  int window = 8;
  // Degenerate: min over layer pairs of fixed-point cosine >= 1 - eps.
  double degeneracy_eps = 1e-3;
};

/// Per-layer distance/cosine series to the approximate fixed point (the state
/// at the reference recurrence) plus convergence and degeneracy verdicts.
struct FixedPointReport {
  int reference = 0;  // 1-based recurrence used as the fixed point
  std::vector<std::vector<double>> distances;  // [layer_in_block][recurrence]
  std::vector<std::vector<double>> cosines;
  std::vector<bool> converged;
  bool degenerate = false;
  double min_pair_cosine = 1.0;
};

enum class SimilarityKind { AttentionFrobenius, ResidualCosine };

std::string to_string(SimilarityKind k);

struct SimilarityMatrix {
  SimilarityKind kind = SimilarityKind::AttentionFrobenius;
  MatrixXd values;  // realized-depth x realized-depth
};

struct SuccessiveDiffs {
  MetricSeries frobenius;
  MetricSeries cosine;
};

// Per recurrent layer: || X_{l,t} - X_{l,t-1} ||_F and the mean per-token
// cosine between successive recurrences. Needs at least 2 loops.
SuccessiveDiffs successive_differences(const Trace& trace);

FixedPointReport fixed_point_report(const Trace& trace, int reference,
                                    const ConvergenceParams& params = {});

// Head-averaged Frobenius distance between attention patterns, or mean
// per-token cosine between residual states, for every pair of realized
// blocks.
SimilarityMatrix pairwise_similarity(const Trace& trace, SimilarityKind kind);

struct Prop2Record {
  int recurrence = 0;  // compared against recurrence-1
  double lhs = 0.0;    // worst head by margin
  double rhs = 0.0;
  bool holds = true;   // all heads
};

// Verifies, per recurrence step, that the softmaxed score matrices built from
// the captured attention inputs move no faster than
// 0.5 * (2 * B * kappa / sqrt(d)) * ||dX||_F, per head with
// kappa = ||Wq_h Wk_h^T||_F and B the max observed input norm at this layer.
std::vector<Prop2Record> prop2_bound_check(const Trace& trace, const ModelWeights& weights,
                                           int layer_in_block);

struct PcaTrajectory {
  MatrixXd coords;  // realized blocks x 2
  std::vector<int> recurrence;
  std::vector<int> layer;
  bool rank_deficient = false;
};

// Two-component PCA over one token's residual vector at every realized block.
// token = -1 selects the final sequence position.
PcaTrajectory pca_trajectory(const Trace& trace, int token = -1);

// Cyclic fixed-point check: residual of one full recurrent pass at the final
// state, and the same residual for the cycle shifted to start after block 1.
struct CyclicShiftCheck {
  double unshifted_residual = 0.0;
  double shifted_residual = 0.0;
};

CyclicShiftCheck cyclic_shift_check(const Trace& trace, const ModelWeights& weights);

// Serialization (long-format CSV and JSON).
void write_similarity_csv(std::ostream& os, const SimilarityMatrix& m);
std::string similarity_to_json(const SimilarityMatrix& m);
void write_fixed_point_csv(std::ostream& os, const FixedPointReport& r);
std::string fixed_point_to_json(const FixedPointReport& r);

}  // namespace looplens
