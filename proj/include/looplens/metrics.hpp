#pragma once

#include "looplens/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace looplens {

enum class Grouping { NoGrouping, ByRecurrence, ByLayer };
enum class MetricKind { ColSumConcentration, SinkRate, MixingScore, MatrixEntropy, ResidualNorm };

std::string to_string(Grouping g);
std::string to_string(MetricKind m);

/// A named scalar sequence indexed by (recurrence, layer) with a grouping
/// layout and optional batch dispersion (population std).
struct MetricSeries {
  std::string name;
  Grouping grouping = Grouping::NoGrouping;
  std::vector<std::pair<int, int>> index;  // (recurrence, layer)
  std::vector<double> pct_depth;
  std::vector<double> values;
  std::vector<double> dispersion;  // empty when absent
};

// 1 - normalized entropy of the attention column-sum distribution. Input must
// be row-stochastic (rows sum to 1 within 1e-6) with at least 2 tokens.
double colsum_concentration(const Eigen::Ref<const MatrixXd>& attn);

// Mean attention mass received by token k.
double sink_score(const Eigen::Ref<const MatrixXd>& attn, int k);

// Fraction of heads whose sink score reaches tau.
double sink_rate(const std::vector<double>& per_head_scores, double tau = 0.3);

// Mean row entropy (nats) of a row-stochastic attention matrix.
double mixing_score(const Eigen::Ref<const MatrixXd>& attn);

// Spectral entropy of the trace-normalized cosine Gram matrix of the rows,
// normalized by log(rows). Zero rows are dropped (sets *dropped when given);
// fewer than 2 nonzero rows is an error.
double matrix_entropy(const Eigen::Ref<const MatrixXd>& residual, bool* dropped = nullptr);

// Mean over tokens of the per-token L2 norm, per realized block.
MetricSeries residual_norms(const Trace& trace);

struct SinkMode {
  bool fixed_k = false;  // default: per-head argmax over token positions
  int k = 0;
};

// One value per realized block, per-head metrics averaged over heads, laid
// out per the requested grouping.
MetricSeries metric_over_trace(const Trace& trace, MetricKind metric, Grouping grouping,
                               const SinkMode& sink = {});

// Pointwise mean and population std over traces of the same layout.
MetricSeries aggregate_series(const std::vector<MetricSeries>& batch);

// CSV columns: name,grouping,recurrence,layer,pct_depth,value,std
void write_series_csv(std::ostream& os, const std::vector<MetricSeries>& series);
std::string series_to_json(const std::vector<MetricSeries>& series);

}  // namespace looplens
