#include "looplens/metrics.hpp"

#include "looplens/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace looplens {

namespace {

double xlogx(double x) { return x > 0.0 ? x * std::log(x) : 0.0; }

void require_row_stochastic(const Eigen::Ref<const MatrixXd>& attn) {
  if (attn.rows() != attn.cols()) throw std::invalid_argument("attention matrix must be square");
  for (Eigen::Index i = 0; i < attn.rows(); ++i) {
    if (std::abs(attn.row(i).sum() - 1.0) > 1e-6)
      throw std::invalid_argument("attention matrix row " + std::to_string(i) + " does not sum to 1");
  }
}

}  // namespace

std::string to_string(Grouping g) {
  switch (g) {
    case Grouping::NoGrouping: return "no_grouping";
    case Grouping::ByRecurrence: return "by_recurrence";
    case Grouping::ByLayer: return "by_layer";
  }
  return "?";
}

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::ColSumConcentration: return "colsum_concentration";
    case MetricKind::SinkRate: return "sink_rate";
    case MetricKind::MixingScore: return "mixing_score";
    case MetricKind::MatrixEntropy: return "matrix_entropy";
    case MetricKind::ResidualNorm: return "residual_norm";
  }
  return "?";
}

double colsum_concentration(const Eigen::Ref<const MatrixXd>& attn) {
  const Eigen::Index t = attn.rows();
  if (t < 2) throw std::invalid_argument("colsum_concentration: undefined for a single token");
  require_row_stochastic(attn);
  double entropy = 0.0;
  for (Eigen::Index j = 0; j < t; ++j) {
    const double c_hat = attn.col(j).sum() / static_cast<double>(t);
    entropy += xlogx(c_hat);
  }
  return 1.0 + entropy / std::log(static_cast<double>(t));
}

double sink_score(const Eigen::Ref<const MatrixXd>& attn, int k) {
  if (k < 0 || k >= attn.cols()) throw std::out_of_range("sink_score: token index out of range");
  return attn.col(k).mean();
}

double sink_rate(const std::vector<double>& per_head_scores, double tau) {
  if (per_head_scores.empty()) throw std::invalid_argument("sink_rate: empty head list");
  int hits = 0;
  for (double s : per_head_scores)
    if (s >= tau) ++hits;
  return static_cast<double>(hits) / static_cast<double>(per_head_scores.size());
}

double mixing_score(const Eigen::Ref<const MatrixXd>& attn) {
  require_row_stochastic(attn);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < attn.rows(); ++i) {
    double h = 0.0;
    for (Eigen::Index j = 0; j < attn.cols(); ++j) h -= xlogx(attn(i, j));
    acc += h;
  }
  return acc / static_cast<double>(attn.rows());
}

double matrix_entropy(const Eigen::Ref<const MatrixXd>& residual, bool* dropped) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index t = 0; t < residual.rows(); ++t) {
    if (residual.row(t).norm() > 0.0)
      keep.push_back(t);
    else if (dropped)
      *dropped = true;
  }
  const Eigen::Index t = static_cast<Eigen::Index>(keep.size());
  if (t < 2) throw std::invalid_argument("matrix_entropy: fewer than 2 nonzero rows");

  MatrixXd unit(t, residual.cols());
  for (Eigen::Index i = 0; i < t; ++i) unit.row(i) = residual.row(keep[static_cast<std::size_t>(i)]).normalized();
  MatrixXd gram = unit * unit.transpose();
  gram /= gram.trace();

  const VectorXd lambda = symmetric_eigenvalues(gram);
  double entropy = 0.0;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) entropy -= xlogx(std::max(lambda(i), 0.0));
  return entropy / std::log(static_cast<double>(t));
}

namespace {

struct SlotValue {
  int recurrence;
  int layer;
  double pct;
  double value;
};

MetricSeries lay_out(std::string name, Grouping grouping, std::vector<SlotValue> slots) {
  if (grouping == Grouping::ByLayer) {
    std::stable_sort(slots.begin(), slots.end(), [](const SlotValue& a, const SlotValue& b) {
      if (a.layer != b.layer) return a.layer < b.layer;
      return a.recurrence < b.recurrence;
    });
  }
  MetricSeries s;
  s.name = std::move(name);
  s.grouping = grouping;
  s.index.reserve(slots.size());
  for (const auto& sv : slots) {
    s.index.emplace_back(sv.recurrence, sv.layer);
    s.pct_depth.push_back(sv.pct);
    s.values.push_back(sv.value);
  }
  return s;
}

}  // namespace

MetricSeries residual_norms(const Trace& trace) {
  if (!trace.capture.residuals || trace.residuals.empty())
    throw CaptureFlagError("residual_norms: trace has no residual captures");
  std::vector<SlotValue> slots;
  for (int s = 0; s < trace.n_blocks(); ++s) {
    const MatrixXd& x = trace.residuals[static_cast<std::size_t>(s)];
    slots.push_back({trace.slot_recurrence(s), trace.slot_layer(s), trace.slot_pct_depth(s),
                     x.rowwise().norm().mean()});
  }
  return lay_out("residual_norm", Grouping::NoGrouping, std::move(slots));
}

MetricSeries metric_over_trace(const Trace& trace, MetricKind metric, Grouping grouping,
                               const SinkMode& sink) {
  const bool needs_attn = metric == MetricKind::ColSumConcentration || metric == MetricKind::SinkRate ||
                          metric == MetricKind::MixingScore;
  if (needs_attn && (!trace.capture.attentions || trace.attentions.empty()))
    throw CaptureFlagError("metric_over_trace: " + to_string(metric) + " requires attention captures");
  if (!needs_attn && (!trace.capture.residuals || trace.residuals.empty()))
    throw CaptureFlagError("metric_over_trace: " + to_string(metric) + " requires residual captures");

  std::vector<SlotValue> slots;
  for (int s = 0; s < trace.n_blocks(); ++s) {
    double value = 0.0;
    switch (metric) {
      case MetricKind::ColSumConcentration:
      case MetricKind::MixingScore: {
        const auto& heads = trace.attentions[static_cast<std::size_t>(s)];
        double acc = 0.0;
        for (const auto& a : heads)
          acc += metric == MetricKind::ColSumConcentration ? colsum_concentration(a) : mixing_score(a);
        value = acc / static_cast<double>(heads.size());
        break;
      }
      case MetricKind::SinkRate: {
        const auto& heads = trace.attentions[static_cast<std::size_t>(s)];
        std::vector<double> scores;
        scores.reserve(heads.size());
        for (const auto& a : heads) {
          if (sink.fixed_k) {
            scores.push_back(sink_score(a, sink.k));
          } else {
            double best = 0.0;
            for (int k = 0; k < a.cols(); ++k) best = std::max(best, sink_score(a, k));
            scores.push_back(best);
          }
        }
        value = sink_rate(scores);
        break;
      }
      case MetricKind::MatrixEntropy:
        value = matrix_entropy(trace.residuals[static_cast<std::size_t>(s)]);
        break;
      case MetricKind::ResidualNorm:
        value = trace.residuals[static_cast<std::size_t>(s)].rowwise().norm().mean();
        break;
    }
    slots.push_back({trace.slot_recurrence(s), trace.slot_layer(s), trace.slot_pct_depth(s), value});
  }
  return lay_out(to_string(metric), grouping, std::move(slots));
}

MetricSeries aggregate_series(const std::vector<MetricSeries>& batch) {
  if (batch.empty()) throw std::invalid_argument("aggregate_series: empty batch");
  MetricSeries out = batch.front();
  const std::size_t n = out.values.size();
  for (const auto& s : batch) {
    if (s.values.size() != n || s.index != out.index)
      throw std::invalid_argument("aggregate_series: mismatched series layout");
  }
  out.dispersion.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (const auto& s : batch) mean += s.values[i];
    mean /= static_cast<double>(batch.size());
    double var = 0.0;
    for (const auto& s : batch) var += (s.values[i] - mean) * (s.values[i] - mean);
    var /= static_cast<double>(batch.size());
    out.values[i] = mean;
    out.dispersion[i] = std::sqrt(var);
  }
  return out;
}

void write_series_csv(std::ostream& os, const std::vector<MetricSeries>& series) {
  CsvWriter csv(os, {"name", "grouping", "recurrence", "layer", "pct_depth", "value", "std"});
  for (const auto& s : series) {
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      csv.row({s.name, to_string(s.grouping), std::to_string(s.index[i].first),
               std::to_string(s.index[i].second), format_g17(s.pct_depth[i]), format_g17(s.values[i]),
               s.dispersion.empty() ? std::string() : format_g17(s.dispersion[i])});
    }
  }
}

std::string series_to_json(const std::vector<MetricSeries>& series) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : series) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      nlohmann::json row{{"name", s.name},          {"grouping", to_string(s.grouping)},
                         {"recurrence", s.index[i].first}, {"layer", s.index[i].second},
                         {"pct_depth", s.pct_depth[i]},    {"value", s.values[i]}};
      if (!s.dispersion.empty()) row["std"] = s.dispersion[i];
      rows.push_back(std::move(row));
    }
    arr.push_back(std::move(rows));
  }
  return arr.dump(2);
}

}  // namespace looplens
