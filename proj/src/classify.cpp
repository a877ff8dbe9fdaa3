#include "looplens/classify.hpp"

#include "looplens/io.hpp"
#include "looplens/linalg.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

namespace looplens {

std::string to_string(LabelKind k) {
  switch (k) {
    case LabelKind::FixedPoint: return "fixed_point";
    case LabelKind::Orbit: return "orbit";
    case LabelKind::Slider: return "slider";
    case LabelKind::Unknown: return "unknown";
  }
  return "?";
}

std::string to_string(SeriesKind k) { return k == SeriesKind::Similarity ? "similarity" : "norm"; }

SeriesKind series_kind_from_string(const std::string& s) {
  if (s == "similarity") return SeriesKind::Similarity;
  if (s == "norm") return SeriesKind::Norm;
  throw std::invalid_argument("unknown series_kind: " + s);
}

void ClassifierParams::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("classifier: tau must be in (0,1)");
  if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("classifier: rho must be in (0,1]");
}

Detrended detrend_linear(const std::vector<double>& s) {
  const std::size_t n = s.size();
  if (n < 2) throw std::invalid_argument("detrend_linear: need at least 2 points");
  const double mean_t = static_cast<double>(n - 1) / 2.0;
  double mean_s = 0.0;
  for (double v : s) mean_s += v;
  mean_s /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dt = static_cast<double>(i) - mean_t;
    sxx += dt * dt;
    sxy += dt * (s[i] - mean_s);
  }
  Detrended out;
  out.slope = sxy / sxx;
  out.intercept = mean_s - out.slope * mean_t;
  out.residual.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    out.residual[i] = s[i] - (out.slope * static_cast<double>(i) + out.intercept);
  return out;
}

std::vector<double> hann_window(int n) {
  if (n < 2) throw std::invalid_argument("hann_window: need n >= 2");
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] =
        0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1)));
  return w;
}

SeriesLabel classify_series(const std::vector<double>& s, const ClassifierParams& params) {
  params.validate();
  const std::size_t n = s.size();
  if (n < 8) throw std::invalid_argument("classify_series: series too short (need >= 8)");
  for (double v : s)
    if (!std::isfinite(v)) throw std::invalid_argument("classify_series: non-finite value");

  const bool norm_kind = params.series_kind == SeriesKind::Norm;

  // 1. Fixed point: enough points already at the limit.
  std::size_t n_close = 0;
  for (double v : s) {
    if (norm_kind ? (v <= params.tau) : (v >= 1.0 - params.tau)) ++n_close;
  }
  if (static_cast<double>(n_close) >= params.rho * static_cast<double>(n))
    return SeriesLabel{LabelKind::FixedPoint, {}, {}, {}};

  // 2. Orbit: dominant spectral bin of the detrended, Hann-windowed series.
  const Detrended trend = detrend_linear(s);
  const std::vector<double> window = hann_window(static_cast<int>(n));
  std::vector<double> windowed(n);
  for (std::size_t i = 0; i < n; ++i) windowed[i] = trend.residual[i] * window[i];
  const Spectrum spec = real_fft_magnitudes(windowed);
  std::size_t k_star = 0;  // ties resolve to the lowest bin
  for (std::size_t k = 1; k < spec.magnitudes.size(); ++k)
    if (spec.magnitudes[k] > spec.magnitudes[k_star]) k_star = k;
  const double amp = 4.0 * spec.magnitudes[k_star] / static_cast<double>(n);
  const double freq = static_cast<double>(k_star + 1) / static_cast<double>(n);
  if (amp >= params.tau / 2.0 && k_star + 1 >= 2)
    return SeriesLabel{LabelKind::Orbit, freq, amp, {}};

  // 3. Slider: sustained drift toward the limit.
  const double g = norm_kind ? -trend.slope : trend.slope;
  if (g > params.tau / static_cast<double>(n)) return SeriesLabel{LabelKind::Slider, {}, {}, g};

  return SeriesLabel{LabelKind::Unknown, {}, {}, {}};
}

std::vector<double> token_series_at_layer(const Trace& trace, int token, int layer_in_block) {
  if (!trace.capture.residuals || trace.residuals.empty())
    throw CaptureFlagError("token_series: trace has no residual captures");
  if (trace.loops < 9) throw std::invalid_argument("token_series: need at least 9 recurrences");
  if (token < 0 || token >= trace.tokens()) throw std::out_of_range("token_series: token out of range");
  const VectorXd final_state =
      trace.recurrent_state(layer_in_block, trace.loops - 1).row(token).transpose();
  std::vector<double> series;
  series.reserve(static_cast<std::size_t>(trace.loops - 1));
  for (int r = 0; r < trace.loops - 1; ++r) {
    const VectorXd state = trace.recurrent_state(layer_in_block, r).row(token).transpose();
    series.push_back(cosine_similarity(state, final_state));
  }
  return series;
}

std::vector<double> build_token_series(const Trace& trace, int token) {
  return token_series_at_layer(trace, token, trace.config.recurrent_layers - 1);
}

namespace {

constexpr std::array<LabelKind, 4> kKinds{LabelKind::FixedPoint, LabelKind::Orbit, LabelKind::Slider,
                                          LabelKind::Unknown};

std::size_t kind_index(LabelKind k) { return static_cast<std::size_t>(k); }

}  // namespace

LabelStatistics label_statistics(const LabelGrid& labels) {
  LabelStatistics stats;
  std::array<std::size_t, 4> token_counts{};
  std::array<std::size_t, 4> example_hits{};
  std::array<std::size_t, 4> any_layer_counts{};
  std::array<std::array<std::size_t, 4>, 4> joint{};

  for (const auto& example : labels) {
    std::array<bool, 4> example_kind{};
    for (const auto& token : example) {
      if (token.empty()) throw std::invalid_argument("label_statistics: token with no layer labels");
      ++stats.tokens;
      const LabelKind final_kind = token.back().kind;
      ++token_counts[kind_index(final_kind)];
      example_kind[kind_index(final_kind)] = true;

      std::array<bool, 4> present{};
      for (const auto& l : token) present[kind_index(l.kind)] = true;
      for (std::size_t a = 0; a < 4; ++a) {
        if (!present[a]) continue;
        ++any_layer_counts[a];
        for (std::size_t b = 0; b < 4; ++b)
          if (present[b]) ++joint[a][b];
      }
    }
    ++stats.examples;
    for (std::size_t a = 0; a < 4; ++a)
      if (example_kind[a]) ++example_hits[a];
  }
  if (stats.tokens == 0) throw std::invalid_argument("label_statistics: empty label set");

  for (std::size_t a = 0; a < 4; ++a) {
    stats.kind_fraction[a] = static_cast<double>(token_counts[a]) / static_cast<double>(stats.tokens);
    stats.example_incidence[a] =
        stats.examples > 0 ? static_cast<double>(example_hits[a]) / static_cast<double>(stats.examples) : 0.0;
    for (std::size_t b = 0; b < 4; ++b) {
      stats.co_occurrence_defined[a][b] = any_layer_counts[b] > 0;
      stats.co_occurrence[a][b] = any_layer_counts[b] > 0
                                      ? static_cast<double>(joint[a][b]) / static_cast<double>(any_layer_counts[b])
                                      : 0.0;
    }
  }
  stats.non_fixed_point_fraction = 1.0 - stats.kind_fraction[kind_index(LabelKind::FixedPoint)];
  return stats;
}

void write_labels_csv(std::ostream& os, const LabelGrid& labels) {
  CsvWriter csv(os, {"example", "token", "layer", "kind", "freq", "amp", "slope"});
  for (std::size_t e = 0; e < labels.size(); ++e) {
    for (std::size_t t = 0; t < labels[e].size(); ++t) {
      for (std::size_t l = 0; l < labels[e][t].size(); ++l) {
        const SeriesLabel& lab = labels[e][t][l];
        csv.row({std::to_string(e), std::to_string(t), std::to_string(l), to_string(lab.kind),
                 lab.freq ? format_g17(*lab.freq) : std::string(),
                 lab.amp ? format_g17(*lab.amp) : std::string(),
                 lab.slope ? format_g17(*lab.slope) : std::string()});
      }
    }
  }
}

std::string statistics_to_json(const LabelStatistics& stats) {
  nlohmann::json co = nlohmann::json::object();
  for (LabelKind a : kKinds) {
    nlohmann::json row = nlohmann::json::object();
    for (LabelKind b : kKinds) {
      if (stats.co_occurrence_defined[kind_index(a)][kind_index(b)])
        row[to_string(b)] = stats.co_occurrence[kind_index(a)][kind_index(b)];
    }
    co[to_string(a)] = std::move(row);
  }
  nlohmann::json incidence = nlohmann::json::object();
  for (LabelKind k : kKinds) incidence[to_string(k)] = 100.0 * stats.example_incidence[kind_index(k)];
  return nlohmann::json{{"Non-Fixed-Point %", 100.0 * stats.non_fixed_point_fraction},
                        {"Orbit %", 100.0 * stats.kind_fraction[kind_index(LabelKind::Orbit)]},
                        {"Slider %", 100.0 * stats.kind_fraction[kind_index(LabelKind::Slider)]},
                        {"Unknown %", 100.0 * stats.kind_fraction[kind_index(LabelKind::Unknown)]},
                        {"FixedPoint %", 100.0 * stats.kind_fraction[kind_index(LabelKind::FixedPoint)]},
                        {"tokens", stats.tokens},
                        {"examples", stats.examples},
                        {"example_incidence_pct", incidence},
                        {"co_occurrence", co}}
      .dump(2);
}

}  // namespace looplens
