#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "looplens/metrics.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

using namespace looplens;

namespace {

// Hand-built trace: p = 0, c = 0, residuals/attentions filled directly.
Trace synthetic_trace(int layers, int loops, int tokens, int d_model) {
  Trace tr;
  tr.config.d_model = d_model;
  tr.config.n_heads = 1;
  tr.config.d_head = d_model;
  tr.config.recurrent_layers = layers;
  tr.loops = loops;
  tr.capture = CaptureFlags{true, true, false};
  tr.embedding_state = MatrixXd::Zero(tokens, d_model);
  tr.residuals.resize(static_cast<std::size_t>(layers * loops));
  tr.attentions.resize(static_cast<std::size_t>(layers * loops));
  return tr;
}

}  // namespace

TEST_CASE("colsum_concentration examples") {
  const int t = 8;
  MatrixXd uniform = MatrixXd::Constant(t, t, 1.0 / t);
  CHECK(colsum_concentration(uniform) == doctest::Approx(0.0).epsilon(1e-12));

  MatrixXd onehot = MatrixXd::Zero(4, 4);
  onehot.col(0).setOnes();
  CHECK(colsum_concentration(onehot) == doctest::Approx(1.0).epsilon(1e-12));

  MatrixXd causal(2, 2);
  causal << 1.0, 0.0, 0.5, 0.5;
  CHECK(colsum_concentration(causal) == doctest::Approx(0.18872187554086717).epsilon(1e-9));

  CHECK_THROWS_AS(colsum_concentration(MatrixXd::Ones(1, 1)), std::invalid_argument);
  MatrixXd bad = MatrixXd::Constant(3, 3, 0.5);
  CHECK_THROWS_AS(colsum_concentration(bad), std::invalid_argument);
}

TEST_CASE("sink_score examples") {
  MatrixXd onehot = MatrixXd::Zero(4, 4);
  onehot.col(0).setOnes();
  CHECK(sink_score(onehot, 0) == 1.0);
  CHECK(sink_score(MatrixXd::Identity(4, 4), 2) == doctest::Approx(0.25));
  MatrixXd causal(2, 2);
  causal << 1.0, 0.0, 0.5, 0.5;
  CHECK(sink_score(causal, 0) == doctest::Approx(0.75));
  CHECK_THROWS_AS(sink_score(causal, 2), std::out_of_range);
}

TEST_CASE("sink_rate examples") {
  CHECK(sink_rate({0.9, 0.9, 0.9}) == 1.0);
  CHECK(sink_rate({0.1, 0.1}) == 0.0);
  CHECK(sink_rate({0.9, 0.1, 0.35, 0.29}, 0.3) == doctest::Approx(0.5));
  CHECK_THROWS_AS(sink_rate({}), std::invalid_argument);
}

TEST_CASE("mixing_score examples") {
  CHECK(mixing_score(MatrixXd::Identity(5, 5)) == 0.0);
  CHECK(mixing_score(MatrixXd::Constant(4, 4, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  MatrixXd causal(2, 2);
  causal << 1.0, 0.0, 0.5, 0.5;
  CHECK(mixing_score(causal) == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("matrix_entropy examples") {
  MatrixXd same(4, 3);
  for (int i = 0; i < 4; ++i) same.row(i) << 1.0, 2.0, 3.0;
  CHECK(matrix_entropy(same) == doctest::Approx(0.0).epsilon(1e-9));

  CHECK(matrix_entropy(MatrixXd::Identity(6, 6)) == doctest::Approx(1.0).epsilon(1e-12));

  // two rows at 60 degrees: eigenvalues (0.75, 0.25)
  MatrixXd pair(2, 2);
  pair << 1.0, 0.0, 0.5, std::sqrt(3.0) / 2.0;
  const double h2 = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)) / std::log(2.0);
  CHECK(matrix_entropy(pair) == doctest::Approx(h2).epsilon(1e-12));

  bool dropped = false;
  MatrixXd with_zero(3, 2);
  with_zero << 1, 0, 0, 0, 0, 1;
  CHECK(matrix_entropy(with_zero, &dropped) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(dropped);

  MatrixXd degenerate = MatrixXd::Zero(3, 2);
  degenerate(0, 0) = 1.0;
  CHECK_THROWS_AS(matrix_entropy(degenerate), std::invalid_argument);
}

TEST_CASE("matrix_entropy is scale-invariant per row") {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 10; ++rep) {
    MatrixXd x = oracles::random_matrix(rng, 6, 9, 2.0);
    MatrixXd scaled = x;
    scaled.row(2) *= 37.5;
    scaled.row(4) *= 0.003;
    CHECK(matrix_entropy(x) == doctest::Approx(matrix_entropy(scaled)).epsilon(1e-10));
  }
}

TEST_CASE("attention metrics match naive double-loop oracles") {
  std::mt19937_64 rng(31);
  for (int rep = 0; rep < 200; ++rep) {
    const int t = 2 + static_cast<int>(rng() % 30);
    const MatrixXd a = oracles::random_row_stochastic(rng, t, rep % 2 == 0);
    CHECK(std::abs(colsum_concentration(a) - oracles::naive_colsum_concentration(a)) <= 1e-12);
    CHECK(std::abs(mixing_score(a) - oracles::naive_mixing_score(a)) <= 1e-12);
    const int k = static_cast<int>(rng() % t);
    CHECK(std::abs(sink_score(a, k) - oracles::naive_sink_score(a, k)) <= 1e-12);
    const double c = colsum_concentration(a);
    CHECK(c >= -1e-9);
    CHECK(c <= 1.0 + 1e-9);
    const double mix = mixing_score(a);
    CHECK(mix >= 0.0);
    CHECK(mix <= std::log(static_cast<double>(t)) + 1e-12);
  }
}

TEST_CASE("metrics are functions of the right attention structure") {
  std::mt19937_64 rng(33);
  const int t = 9;
  const MatrixXd a = oracles::random_row_stochastic(rng, t, false);
  // permuting rows leaves column sums, row entropies and column means alone
  MatrixXd perm = MatrixXd::Zero(t, t);
  std::vector<int> order(t);
  for (int i = 0; i < t; ++i) order[i] = (i * 4 + 3) % t;
  for (int i = 0; i < t; ++i) perm.row(i) = a.row(order[i]);
  CHECK(colsum_concentration(perm) == doctest::Approx(colsum_concentration(a)).epsilon(1e-12));
  CHECK(mixing_score(perm) == doctest::Approx(mixing_score(a)).epsilon(1e-12));
  CHECK(sink_score(perm, 3) == doctest::Approx(sink_score(a, 3)).epsilon(1e-12));
}

TEST_CASE("metric_over_trace layouts and hand-assembled expectations") {
  // 2 layers, 3 loops, 1 head whose attention alternates identity / uniform
  const int t = 4;
  Trace tr = synthetic_trace(2, 3, t, 4);
  for (int s = 0; s < 6; ++s) {
    const bool uniform = s % 2 == 1;
    MatrixXd a = uniform ? MatrixXd(MatrixXd::Constant(t, t, 1.0 / t)) : MatrixXd(MatrixXd::Identity(t, t));
    tr.attentions[static_cast<std::size_t>(s)] = {a};
    tr.residuals[static_cast<std::size_t>(s)] = MatrixXd::Identity(t, 4) * (s + 1.0);
  }

  MetricSeries mix = metric_over_trace(tr, MetricKind::MixingScore, Grouping::NoGrouping);
  REQUIRE(mix.values.size() == 6);
  for (int s = 0; s < 6; ++s)
    CHECK(mix.values[static_cast<std::size_t>(s)] ==
          doctest::Approx(s % 2 == 1 ? std::log(4.0) : 0.0).epsilon(1e-12));

  MetricSeries by_layer = metric_over_trace(tr, MetricKind::MixingScore, Grouping::ByLayer);
  REQUIRE(by_layer.index.size() == 6);
  // layer-major: layer 0 across recurrences 0..2, then layer 1
  CHECK(by_layer.index[0] == std::pair<int, int>{0, 0});
  CHECK(by_layer.index[1] == std::pair<int, int>{1, 0});
  CHECK(by_layer.index[2] == std::pair<int, int>{2, 0});
  CHECK(by_layer.index[3] == std::pair<int, int>{0, 1});

  MetricSeries norm = metric_over_trace(tr, MetricKind::ResidualNorm, Grouping::NoGrouping);
  CHECK(norm.values[0] == doctest::Approx(1.0));
  CHECK(norm.values[5] == doctest::Approx(6.0));

  MetricSeries rate = metric_over_trace(tr, MetricKind::SinkRate, Grouping::NoGrouping);
  // identity attention: best column mean is 1/t < 0.3 -> rate 0;
  // uniform attention: every column mean is 1/t -> rate 0
  for (double v : rate.values) CHECK(v == 0.0);

  Trace no_attn = synthetic_trace(1, 2, t, 4);
  no_attn.capture.attentions = false;
  no_attn.attentions.clear();
  CHECK_THROWS_AS(metric_over_trace(no_attn, MetricKind::MixingScore, Grouping::NoGrouping),
                  CaptureFlagError);
}

TEST_CASE("huginn scheme pins residual norms at sqrt(D)") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_head = 8;
  cfg.recurrent_layers = 3;
  cfg.mlp_hidden = 64;
  cfg.norm_scheme = NormScheme::HuginnSandwich;
  cfg.seed = 3;
  const ModelWeights w = init_random(cfg);
  GaussianRng in(5);
  RunOptions opts;
  opts.loops = 4;
  opts.z0_seed = 9;
  const Trace tr = run_recurrent(in.matrix(6, 32, 1.0), w, opts);
  const MetricSeries s = residual_norms(tr);
  for (double v : s.values) CHECK(std::abs(v - std::sqrt(32.0)) < 1e-3);
  const auto [mn, mx] = std::minmax_element(s.values.begin(), s.values.end());
  CHECK(*mx - *mn < 1e-6);
}

TEST_CASE("sink rate fixed-k mode") {
  Trace tr = synthetic_trace(1, 2, 4, 4);
  MatrixXd onehot = MatrixXd::Zero(4, 4);
  onehot.col(0).setOnes();
  tr.attentions[0] = {onehot};
  tr.attentions[1] = {MatrixXd::Identity(4, 4)};
  tr.residuals[0] = tr.residuals[1] = MatrixXd::Identity(4, 4);
  SinkMode fixed{true, 0};
  MetricSeries s = metric_over_trace(tr, MetricKind::SinkRate, Grouping::NoGrouping, fixed);
  CHECK(s.values[0] == 1.0);  // all mass on token 0
  CHECK(s.values[1] == 0.0);  // identity: column 0 mean is 1/4 < 0.3
}

TEST_CASE("residual_norms on zero and single-token states") {
  Trace tr = synthetic_trace(1, 2, 1, 9);
  tr.capture.attentions = false;
  tr.attentions.clear();
  tr.residuals[0] = MatrixXd::Zero(1, 9);
  tr.residuals[1] = MatrixXd::Constant(1, 9, 1.0);  // norm 3
  MetricSeries s = residual_norms(tr);
  CHECK(s.values[0] == 0.0);
  CHECK(s.values[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("aggregate_series computes mean and population std") {
  Trace tr = synthetic_trace(1, 2, 2, 4);
  tr.capture.attentions = false;
  tr.attentions.clear();
  tr.residuals[0] = MatrixXd::Identity(2, 4);
  tr.residuals[1] = MatrixXd::Identity(2, 4) * 2.0;
  MetricSeries a = residual_norms(tr);
  tr.residuals[0] = MatrixXd::Identity(2, 4) * 3.0;
  tr.residuals[1] = MatrixXd::Identity(2, 4) * 4.0;
  MetricSeries b = residual_norms(tr);
  MetricSeries agg = aggregate_series({a, b});
  CHECK(agg.values[0] == doctest::Approx(2.0));
  CHECK(agg.dispersion[0] == doctest::Approx(1.0));  // population std of {1, 3}
  CHECK(agg.values[1] == doctest::Approx(3.0));
}

TEST_CASE("series CSV schema") {
  Trace tr = synthetic_trace(1, 2, 2, 4);
  tr.capture.attentions = false;
  tr.attentions.clear();
  tr.residuals[0] = MatrixXd::Identity(2, 4);
  tr.residuals[1] = MatrixXd::Identity(2, 4);
  std::ostringstream os;
  write_series_csv(os, {residual_norms(tr)});
  const std::string text = os.str();
  CHECK(text.rfind("name,grouping,recurrence,layer,pct_depth,value,std\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 3);
}
