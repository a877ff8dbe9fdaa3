#include "looplens/dynamics.hpp"

#include "looplens/io.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>

namespace looplens {

std::string to_string(SimilarityKind k) {
  return k == SimilarityKind::AttentionFrobenius ? "attention_frobenius" : "residual_cosine";
}

namespace {

void require_residuals(const Trace& tr, const char* who) {
  if (!tr.capture.residuals || tr.residuals.empty())
    throw CaptureFlagError(std::string(who) + ": trace has no residual captures");
}

}  // namespace

SuccessiveDiffs successive_differences(const Trace& trace) {
  require_residuals(trace, "successive_differences");
  if (trace.loops < 2) throw std::invalid_argument("successive_differences: need at least 2 recurrences");
  const int p = trace.config.prelude_layers;
  const int k = trace.config.recurrent_layers;

  SuccessiveDiffs out;
  out.frobenius.name = "successive_diff_frobenius";
  out.cosine.name = "successive_cosine";
  out.frobenius.grouping = out.cosine.grouping = Grouping::ByLayer;
  for (int j = 0; j < k; ++j) {
    for (int t = 1; t < trace.loops; ++t) {
      const MatrixXd& cur = trace.recurrent_state(j, t);
      const MatrixXd& prev = trace.recurrent_state(j, t - 1);
      const double pct = trace.slot_pct_depth(trace.recurrent_slot(j, t));
      out.frobenius.index.emplace_back(t, p + j);
      out.frobenius.pct_depth.push_back(pct);
      out.frobenius.values.push_back(frobenius_distance(cur, prev));
      out.cosine.index.emplace_back(t, p + j);
      out.cosine.pct_depth.push_back(pct);
      out.cosine.values.push_back(mean_row_cosine(cur, prev));
    }
  }
  return out;
}

FixedPointReport fixed_point_report(const Trace& trace, int reference, const ConvergenceParams& params) {
  require_residuals(trace, "fixed_point_report");
  if (reference < 1 || reference > trace.loops)
    throw std::out_of_range("fixed_point_report: reference recurrence exceeds captured recurrences");
  const int k = trace.config.recurrent_layers;

  FixedPointReport report;
  report.reference = reference;
  report.distances.resize(static_cast<std::size_t>(k));
  report.cosines.resize(static_cast<std::size_t>(k));
  report.converged.resize(static_cast<std::size_t>(k), false);

  for (int j = 0; j < k; ++j) {
    const MatrixXd& fp = trace.recurrent_state(j, reference - 1);
    auto& dist = report.distances[static_cast<std::size_t>(j)];
    auto& cos = report.cosines[static_cast<std::size_t>(j)];
    dist.reserve(static_cast<std::size_t>(trace.loops));
    cos.reserve(static_cast<std::size_t>(trace.loops));
    for (int t = 0; t < trace.loops; ++t) {
      const MatrixXd& x = trace.recurrent_state(j, t);
      dist.push_back(frobenius_distance(x, fp));
      cos.push_back(mean_row_cosine(x, fp));
    }
    const int window = std::min(params.window, reference - 1);
    if (window <= 0) {
      report.converged[static_cast<std::size_t>(j)] = false;
      continue;
    }
    double mean_dist = 0.0;
    double mean_norm = 0.0;
    for (int t = reference - 1 - window; t < reference - 1; ++t) {
      mean_dist += dist[static_cast<std::size_t>(t)];
      mean_norm += trace.recurrent_state(j, t).norm();
    }
    mean_dist /= window;
    mean_norm /= window;
    report.converged[static_cast<std::size_t>(j)] =
        mean_norm > 0.0 ? (mean_dist <= params.rel_threshold * mean_norm) : (mean_dist == 0.0);
  }

  for (int a = 0; a < k; ++a) {
    for (int b = a + 1; b < k; ++b) {
      const double c =
          mean_row_cosine(trace.recurrent_state(a, reference - 1), trace.recurrent_state(b, reference - 1));
      report.min_pair_cosine = std::min(report.min_pair_cosine, c);
    }
  }
  report.degenerate = report.min_pair_cosine >= 1.0 - params.degeneracy_eps;
  return report;
}

SimilarityMatrix pairwise_similarity(const Trace& trace, SimilarityKind kind) {
  const int n = trace.n_blocks();
  if (kind == SimilarityKind::AttentionFrobenius) {
    if (!trace.capture.attentions || trace.attentions.empty())
      throw CaptureFlagError("pairwise_similarity: attention captures required");
  } else {
    require_residuals(trace, "pairwise_similarity");
  }

  SimilarityMatrix out;
  out.kind = kind;
  out.values = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    out.values(i, i) = kind == SimilarityKind::AttentionFrobenius ? 0.0 : 1.0;
    for (int j = i + 1; j < n; ++j) {
      double v;
      if (kind == SimilarityKind::AttentionFrobenius) {
        const auto& a = trace.attentions[static_cast<std::size_t>(i)];
        const auto& b = trace.attentions[static_cast<std::size_t>(j)];
        double acc = 0.0;
        for (std::size_t h = 0; h < a.size(); ++h) acc += frobenius_distance(a[h], b[h]);
        v = acc / static_cast<double>(a.size());
      } else {
        v = mean_row_cosine(trace.residuals[static_cast<std::size_t>(i)],
                            trace.residuals[static_cast<std::size_t>(j)]);
      }
      out.values(i, j) = out.values(j, i) = v;
    }
  }
  return out;
}

std::vector<Prop2Record> prop2_bound_check(const Trace& trace, const ModelWeights& weights,
                                           int layer_in_block) {
  if (!trace.capture.attention_inputs || trace.attention_inputs.empty())
    throw CaptureFlagError("prop2_bound_check: attention-input captures required");
  const ModelConfig& cfg = trace.config;
  if (layer_in_block < 0 || layer_in_block >= cfg.recurrent_layers)
    throw std::out_of_range("prop2_bound_check: layer outside the recurrent block");
  if (trace.loops < 2) throw std::invalid_argument("prop2_bound_check: need at least 2 recurrences");

  const int d = cfg.d_head;
  const int heads = cfg.n_heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const LayerWeights& lw = weights.layers[static_cast<std::size_t>(cfg.prelude_layers + layer_in_block)];

  std::vector<MatrixXd> score_map(static_cast<std::size_t>(heads));
  std::vector<double> kappa(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    score_map[static_cast<std::size_t>(h)] =
        lw.wq.middleCols(h * d, d) * lw.wk.middleCols(h * d, d).transpose();
    kappa[static_cast<std::size_t>(h)] = score_map[static_cast<std::size_t>(h)].norm();
  }

  auto input_at = [&](int t) -> const MatrixXd& {
    return trace.attention_inputs[static_cast<std::size_t>(trace.recurrent_slot(layer_in_block, t))];
  };
  double bound_b = 0.0;
  for (int t = 0; t < trace.loops; ++t) bound_b = std::max(bound_b, input_at(t).norm());

  auto softmax_scores = [&](const MatrixXd& x, int h) {
    return row_softmax(x * score_map[static_cast<std::size_t>(h)] * x.transpose() * inv_sqrt_d,
                       /*causal=*/true);
  };

  std::vector<MatrixXd> prev(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) prev[static_cast<std::size_t>(h)] = softmax_scores(input_at(0), h);

  std::vector<Prop2Record> records;
  records.reserve(static_cast<std::size_t>(trace.loops - 1));
  for (int t = 1; t < trace.loops; ++t) {
    const double dx = frobenius_distance(input_at(t), input_at(t - 1));
    Prop2Record rec;
    rec.recurrence = t;
    double worst_margin = std::numeric_limits<double>::infinity();
    for (int h = 0; h < heads; ++h) {
      MatrixXd cur = softmax_scores(input_at(t), h);
      const double lhs = frobenius_distance(cur, prev[static_cast<std::size_t>(h)]);
      const double rhs = 0.5 * (2.0 * bound_b * kappa[static_cast<std::size_t>(h)] * inv_sqrt_d) * dx;
      if (lhs > rhs + 1e-9) rec.holds = false;
      if (rhs - lhs < worst_margin) {
        worst_margin = rhs - lhs;
        rec.lhs = lhs;
        rec.rhs = rhs;
      }
      prev[static_cast<std::size_t>(h)] = std::move(cur);
    }
    records.push_back(rec);
  }
  return records;
}

PcaTrajectory pca_trajectory(const Trace& trace, int token) {
  require_residuals(trace, "pca_trajectory");
  const int t = token < 0 ? trace.tokens() - 1 : token;
  if (t < 0 || t >= trace.tokens()) throw std::out_of_range("pca_trajectory: token out of range");
  const int n = trace.n_blocks();
  MatrixXd states(n, trace.config.d_model);
  PcaTrajectory out;
  out.recurrence.reserve(static_cast<std::size_t>(n));
  out.layer.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    states.row(s) = trace.residuals[static_cast<std::size_t>(s)].row(t);
    out.recurrence.push_back(trace.slot_recurrence(s));
    out.layer.push_back(trace.slot_layer(s));
  }
  Pca2d pca = pca_2d(states);
  out.coords = std::move(pca.coords);
  out.rank_deficient = pca.rank_deficient;
  return out;
}

CyclicShiftCheck cyclic_shift_check(const Trace& trace, const ModelWeights& weights) {
  require_residuals(trace, "cyclic_shift_check");
  const ModelConfig& cfg = trace.config;
  const int p = cfg.prelude_layers;
  const int k = cfg.recurrent_layers;

  const MatrixXd prelude_out = p > 0 ? trace.residuals[static_cast<std::size_t>(p - 1)] : trace.embedding_state;
  const MatrixXd final_state = trace.recurrent_state(k - 1, trace.loops - 1);

  // Stages of one recurrence, in application order.
  std::vector<std::function<MatrixXd(const MatrixXd&)>> stages;
  if (cfg.input_injection) {
    stages.emplace_back([&](const MatrixXd& z) {
      MatrixXd concat(z.rows(), 2 * cfg.d_model);
      concat << prelude_out, z;
      return MatrixXd(concat * (*weights.w_inject));
    });
  }
  for (int j = 0; j < k; ++j)
    stages.emplace_back([&weights, p, j](const MatrixXd& x) { return block_forward(x, p + j, weights).output; });
  if (cfg.norm_scheme == NormScheme::OuroSandwich)
    stages.emplace_back(
        [&](const MatrixXd& x) { return apply_norm(x, weights.loop_norm_gain, cfg.norm_kind); });

  auto run_from = [&](const MatrixXd& start, std::size_t first) {
    MatrixXd x = start;
    for (std::size_t i = 0; i < stages.size(); ++i) x = stages[(first + i) % stages.size()](x);
    return x;
  };

  CyclicShiftCheck check;
  check.unshifted_residual = (run_from(final_state, 0) - final_state).norm();

  // Shift the cycle to start right after block 1 (the injection, when
  // present, travels with block 1).
  const std::size_t shift = cfg.input_injection ? 2 : 1;
  MatrixXd y = final_state;
  for (std::size_t i = 0; i < shift; ++i) y = stages[i](y);
  check.shifted_residual = (run_from(y, shift) - y).norm();
  return check;
}

void write_similarity_csv(std::ostream& os, const SimilarityMatrix& m) {
  CsvWriter csv(os, {"kind", "i", "j", "value"});
  for (Eigen::Index i = 0; i < m.values.rows(); ++i)
    for (Eigen::Index j = 0; j < m.values.cols(); ++j)
      csv.row({to_string(m.kind), std::to_string(i), std::to_string(j), format_g17(m.values(i, j))});
}

std::string similarity_to_json(const SimilarityMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.values.cols(); ++j) row.push_back(m.values(i, j));
    rows.push_back(std::move(row));
  }
  return nlohmann::json{{"kind", to_string(m.kind)}, {"n", m.values.rows()}, {"values", rows}}.dump(2);
}

void write_fixed_point_csv(std::ostream& os, const FixedPointReport& r) {
  CsvWriter csv(os, {"layer", "recurrence", "distance", "cosine"});
  for (std::size_t j = 0; j < r.distances.size(); ++j)
    for (std::size_t t = 0; t < r.distances[j].size(); ++t)
      csv.row({std::to_string(j), std::to_string(t + 1), format_g17(r.distances[j][t]),
               format_g17(r.cosines[j][t])});
}

std::string fixed_point_to_json(const FixedPointReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t j = 0; j < r.distances.size(); ++j) {
    layers.push_back(nlohmann::json{{"layer", j},
                                    {"converged", static_cast<bool>(r.converged[j])},
                                    {"distances", r.distances[j]},
                                    {"cosines", r.cosines[j]}});
  }
  return nlohmann::json{{"reference", r.reference},
                        {"degenerate", r.degenerate},
                        {"min_pair_cosine", r.min_pair_cosine},
                        {"layers", layers}}
      .dump(2);
}

}  // namespace looplens
