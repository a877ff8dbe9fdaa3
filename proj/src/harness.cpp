#include "looplens/harness.hpp"

#include "looplens/io.hpp"
#include "looplens/weights_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace looplens {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::pair<int, int> line_col(const std::string& text, std::size_t byte) {
  int line = 1;
  int col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed)
      if (it.key() == a) ok = true;
    if (!ok) throw SpecError("unknown key '" + path + it.key() + "' in experiment spec");
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<T>();
}

}  // namespace

std::string to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::StabilityGrid: return "stability_grid";
    case ExperimentKind::Dynamics: return "dynamics";
    case ExperimentKind::Classify: return "classify";
    case ExperimentKind::Metrics: return "metrics";
    case ExperimentKind::Trajectory: return "trajectory";
    case ExperimentKind::Prop2Audit: return "prop2_audit";
  }
  return "?";
}

ExperimentKind experiment_kind_from_string(const std::string& s) {
  if (s == "stability_grid") return ExperimentKind::StabilityGrid;
  if (s == "dynamics") return ExperimentKind::Dynamics;
  if (s == "classify") return ExperimentKind::Classify;
  if (s == "metrics") return ExperimentKind::Metrics;
  if (s == "trajectory") return ExperimentKind::Trajectory;
  if (s == "prop2_audit") return ExperimentKind::Prop2Audit;
  throw SpecError("unknown experiment kind: " + s);
}

CaptureFlags ExperimentSpec::resolved_capture() const {
  if (capture) return *capture;
  CaptureFlags flags;
  switch (kind) {
    case ExperimentKind::Dynamics:
    case ExperimentKind::Metrics:
      flags.attentions = true;
      break;
    case ExperimentKind::Prop2Audit:
      flags.residuals = false;
      flags.attention_inputs = true;
      break;
    default:
      break;
  }
  return flags;
}

ModelConfig ExperimentSpec::base_config() const { return model ? *model : ModelConfig{}; }

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw SpecError("spec: seeds must be non-empty");
  if (loops < 1) throw SpecError("spec: loops must be >= 1");
  if (reference && (*reference < 1)) throw SpecError("spec: reference must be >= 1");
  if (sequence.use_tokens() && weights_path.empty())
    throw SpecError("spec: token-id input requires a weight file with an embedding table");
  if (!sequence.use_tokens() && sequence.random_embeddings < 1)
    throw SpecError("spec: random_embeddings must be >= 1");
  classifier.validate();
  if (model) model->validate();
}

namespace {

ModelConfig parse_model_config(const json& j, bool& seed_explicit) {
  check_keys(j,
             {"d_model", "n_heads", "d_head", "prelude_layers", "recurrent_layers", "coda_layers",
              "norm_scheme", "norm_kind", "input_injection", "injection_sigma", "positional",
              "mlp_hidden", "seed"},
             "model.");
  ModelConfig c;
  c.d_model = get_or(j, "d_model", c.d_model);
  c.n_heads = get_or(j, "n_heads", c.n_heads);
  c.d_head = get_or(j, "d_head", c.d_model / c.n_heads);
  c.prelude_layers = get_or(j, "prelude_layers", c.prelude_layers);
  c.recurrent_layers = get_or(j, "recurrent_layers", c.recurrent_layers);
  c.coda_layers = get_or(j, "coda_layers", c.coda_layers);
  if (j.contains("norm_scheme")) c.norm_scheme = norm_scheme_from_string(j.at("norm_scheme"));
  if (j.contains("norm_kind")) c.norm_kind = norm_kind_from_string(j.at("norm_kind"));
  c.input_injection = get_or(j, "input_injection", c.input_injection);
  c.injection_sigma = get_or(j, "injection_sigma", c.injection_sigma);
  if (j.contains("positional")) c.positional = positional_from_string(j.at("positional"));
  c.mlp_hidden = get_or(j, "mlp_hidden", c.mlp_hidden);
  seed_explicit = j.contains("seed");
  c.seed = get_or<std::uint64_t>(j, "seed", 0);
  return c;
}

}  // namespace

ExperimentSpec parse_spec(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = line_col(text, e.byte > 0 ? e.byte - 1 : 0);
    throw SpecError(origin + ":" + std::to_string(line) + ":" + std::to_string(col) +
                    ": parse error: " + e.what());
  }
  if (!j.is_object()) throw SpecError(origin + ": spec must be a JSON object");
  try {
    check_keys(j, {"kind", "model", "loops", "seeds", "sequence", "capture", "out_dir", "classifier",
                   "reference"},
               "");
    ExperimentSpec spec;
    if (!j.contains("kind")) throw SpecError("spec: missing required key 'kind'");
    spec.kind = experiment_kind_from_string(j.at("kind").get<std::string>());
    if (j.contains("model")) {
      if (j.at("model").is_string()) {
        spec.weights_path = j.at("model").get<std::string>();
      } else if (j.at("model").is_object()) {
        spec.model = parse_model_config(j.at("model"), spec.model_seed_explicit);
      } else {
        throw SpecError("spec: 'model' must be a config object or a weight-file path");
      }
    }
    spec.loops = get_or(j, "loops", spec.loops);
    if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("sequence")) {
      const json& s = j.at("sequence");
      check_keys(s, {"tokens", "random_embeddings", "seed"}, "sequence.");
      if (s.contains("tokens")) spec.sequence.tokens = s.at("tokens").get<std::vector<int>>();
      spec.sequence.random_embeddings = get_or(s, "random_embeddings", spec.sequence.random_embeddings);
      if (s.contains("seed")) spec.sequence.seed = s.at("seed").get<std::uint64_t>();
    }
    if (j.contains("capture")) {
      const json& c = j.at("capture");
      check_keys(c, {"residuals", "attentions", "attention_inputs"}, "capture.");
      CaptureFlags flags;
      flags.residuals = get_or(c, "residuals", flags.residuals);
      flags.attentions = get_or(c, "attentions", flags.attentions);
      flags.attention_inputs = get_or(c, "attention_inputs", flags.attention_inputs);
      spec.capture = flags;
    }
    spec.out_dir = get_or<std::string>(j, "out_dir", "");
    if (j.contains("classifier")) {
      const json& c = j.at("classifier");
      check_keys(c, {"tau", "rho", "series_kind"}, "classifier.");
      spec.classifier.tau = get_or(c, "tau", spec.classifier.tau);
      spec.classifier.rho = get_or(c, "rho", spec.classifier.rho);
      if (c.contains("series_kind"))
        spec.classifier.series_kind = series_kind_from_string(c.at("series_kind"));
    }
    if (j.contains("reference")) spec.reference = j.at("reference").get<int>();
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw SpecError(origin + ": invalid spec: " + e.what());
  }
}

ExperimentSpec load_spec(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception& e) {
    throw SpecError(e.what());
  }
  return parse_spec(text, path);
}

std::string spec_to_json(const ExperimentSpec& spec) {
  json j;
  j["kind"] = to_string(spec.kind);
  if (!spec.weights_path.empty()) {
    j["model"] = spec.weights_path;
  } else {
    const ModelConfig c = spec.base_config();
    json m{{"d_model", c.d_model},
           {"n_heads", c.n_heads},
           {"d_head", c.d_head},
           {"prelude_layers", c.prelude_layers},
           {"recurrent_layers", c.recurrent_layers},
           {"coda_layers", c.coda_layers},
           {"norm_scheme", to_string(c.norm_scheme)},
           {"norm_kind", to_string(c.norm_kind)},
           {"input_injection", c.input_injection},
           {"injection_sigma", c.injection_sigma},
           {"positional", to_string(c.positional)},
           {"mlp_hidden", c.mlp_hidden}};
    if (spec.model_seed_explicit) m["seed"] = c.seed;
    j["model"] = std::move(m);
  }
  j["loops"] = spec.loops;
  j["seeds"] = spec.seeds;
  json seq;
  if (spec.sequence.use_tokens()) seq["tokens"] = spec.sequence.tokens;
  seq["random_embeddings"] = spec.sequence.random_embeddings;
  if (spec.sequence.seed) seq["seed"] = *spec.sequence.seed;
  j["sequence"] = std::move(seq);
  const CaptureFlags flags = spec.resolved_capture();
  j["capture"] = json{{"residuals", flags.residuals},
                      {"attentions", flags.attentions},
                      {"attention_inputs", flags.attention_inputs}};
  if (!spec.out_dir.empty()) j["out_dir"] = spec.out_dir;
  j["classifier"] = json{{"tau", spec.classifier.tau},
                         {"rho", spec.classifier.rho},
                         {"series_kind", to_string(spec.classifier.series_kind)}};
  j["reference"] = spec.resolved_reference();
  return j.dump(2) + "\n";
}

ModelWeights prepare_model(const ExperimentSpec& spec, std::uint64_t experiment_seed) {
  if (!spec.weights_path.empty()) return load_weights(spec.weights_path);
  ModelConfig cfg = spec.base_config();
  if (!spec.model_seed_explicit) cfg.seed = experiment_seed + kModelSeedOffset;
  return init_random(cfg);
}

MatrixXd build_input(const ExperimentSpec& spec, const ModelWeights& weights,
                     std::uint64_t experiment_seed) {
  if (spec.sequence.use_tokens()) {
    if (!weights.embedding)
      throw SpecError("spec: token-id input requires weights with an embedding table");
    return embed_tokens(spec.sequence.tokens, *weights.embedding);
  }
  const std::uint64_t input_seed = spec.sequence.seed ? *spec.sequence.seed
                                                      : experiment_seed + kInputSeedOffset;
  GaussianRng rng(input_seed);
  // Unit variance per channel puts rows at the scale a residual stream
  // actually runs at; unit-norm rows leave the rms-norm Jacobian ~sqrt(D)
  // and no scheme reaches a fixed point.
  return rng.matrix(spec.sequence.random_embeddings, weights.config.d_model, 1.0);
}

// ---- stability grid ---------------------------------------------------------

namespace {

StabilityCell run_stability_cell(const ExperimentSpec& spec, NormScheme scheme, bool injection,
                                 std::uint64_t seed, int reference) {
  StabilityCell cell;
  cell.scheme = scheme;
  cell.injection = injection;
  cell.seed = seed;

  ModelConfig cfg = spec.base_config();
  cfg.norm_scheme = scheme;
  cfg.input_injection = injection;
  cfg.seed = seed + kModelSeedOffset;
  const ModelWeights weights = init_random(cfg);
  const MatrixXd input = build_input(spec, weights, seed);

  RunOptions opts;
  opts.loops = spec.loops;
  opts.capture = CaptureFlags{true, false, false};
  opts.z0_seed = seed + kZ0SeedOffset;

  Trace trace;
  try {
    trace = run_recurrent(input, weights, opts);
  } catch (const DivergedForwardError& e) {
    cell.diverged = true;
    cell.diverged_layer = e.layer;
    cell.diverged_recurrence = e.recurrence;
    return cell;
  }

  const FixedPointReport fpr = fixed_point_report(trace, reference);
  cell.cos_own = fpr.cosines.front();
  cell.min_pair_cosine = fpr.min_pair_cosine;
  cell.all_converged =
      std::all_of(fpr.converged.begin(), fpr.converged.end(), [](bool b) { return b; });
  cell.degenerate = fpr.degenerate;

  const int k = cfg.recurrent_layers;
  const MatrixXd& fp0 = trace.recurrent_state(0, reference - 1);
  cell.min_cos_layer = 0;
  cell.min_cosine_to_layer1 = 1.0;
  for (int l = 1; l < k; ++l) {
    const double c = mean_row_cosine(fp0, trace.recurrent_state(l, reference - 1));
    if (c < cell.min_cosine_to_layer1) {
      cell.min_cosine_to_layer1 = c;
      cell.min_cos_layer = l;
    }
  }
  const MatrixXd& fp_min = trace.recurrent_state(cell.min_cos_layer, reference - 1);
  cell.cos_min_layer.reserve(static_cast<std::size_t>(trace.loops));
  for (int t = 0; t < trace.loops; ++t)
    cell.cos_min_layer.push_back(mean_row_cosine(trace.recurrent_state(0, t), fp_min));

  const CyclicShiftCheck shift = cyclic_shift_check(trace, weights);
  cell.prop1_unshifted = shift.unshifted_residual;
  cell.prop1_shifted = shift.shifted_residual;
  return cell;
}

}  // namespace

StabilityGridResult run_stability_grid(const ExperimentSpec& spec, int threads) {
  spec.validate();
  const int reference = spec.resolved_reference();
  if (reference > spec.loops) throw SpecError("spec: reference exceeds loops");

  constexpr std::array<NormScheme, 3> kSchemes{NormScheme::PreNorm, NormScheme::HuginnSandwich,
                                               NormScheme::OuroSandwich};
  struct CellKey {
    NormScheme scheme;
    bool injection;
    std::uint64_t seed;
  };
  std::vector<CellKey> keys;
  for (NormScheme scheme : kSchemes)
    for (bool injection : {true, false})
      for (std::uint64_t seed : spec.seeds) keys.push_back({scheme, injection, seed});

  StabilityGridResult grid;
  grid.loops = spec.loops;
  grid.reference = reference;
  grid.cells.resize(keys.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= keys.size()) return;
      grid.cells[i] = run_stability_cell(spec, keys[i].scheme, keys[i].injection, keys[i].seed, reference);
    }
  };
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(keys.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return grid;
}

void write_stability_outputs(const StabilityGridResult& grid, const std::string& dir) {
  {
    std::ostringstream os;
    CsvWriter csv(os, {"norm", "injection", "seed", "recurrence", "cos_own", "cos_min_layer"});
    for (const auto& cell : grid.cells) {
      for (std::size_t t = 0; t < cell.cos_own.size(); ++t) {
        csv.row({to_string(cell.scheme), cell.injection ? "1" : "0", std::to_string(cell.seed),
                 std::to_string(t + 1), format_g17(cell.cos_own[t]), format_g17(cell.cos_min_layer[t])});
      }
    }
    write_text_file(dir + "/stability_grid.csv", os.str());
  }
  {
    std::ostringstream os;
    CsvWriter csv(os, {"norm", "injection", "recurrence", "cos_own_mean", "cos_min_layer_mean"});
    constexpr std::array<NormScheme, 3> kSchemes{NormScheme::PreNorm, NormScheme::HuginnSandwich,
                                                 NormScheme::OuroSandwich};
    for (NormScheme scheme : kSchemes) {
      for (bool injection : {true, false}) {
        std::vector<const StabilityCell*> members;
        for (const auto& cell : grid.cells)
          if (cell.scheme == scheme && cell.injection == injection && !cell.diverged)
            members.push_back(&cell);
        if (members.empty()) continue;
        for (int t = 0; t < grid.loops; ++t) {
          double own = 0.0, minl = 0.0;
          for (const auto* m : members) {
            own += m->cos_own[static_cast<std::size_t>(t)];
            minl += m->cos_min_layer[static_cast<std::size_t>(t)];
          }
          own /= static_cast<double>(members.size());
          minl /= static_cast<double>(members.size());
          csv.row({to_string(scheme), injection ? "1" : "0", std::to_string(t + 1), format_g17(own),
                   format_g17(minl)});
        }
      }
    }
    write_text_file(dir + "/stability_grid_mean.csv", os.str());
  }
  {
    json cells = json::array();
    for (const auto& cell : grid.cells) {
      json c{{"norm", to_string(cell.scheme)},
             {"injection", cell.injection},
             {"seed", cell.seed},
             {"diverged", cell.diverged}};
      if (cell.diverged) {
        c["diverged_layer"] = cell.diverged_layer;
        c["diverged_recurrence"] = cell.diverged_recurrence;
      } else {
        c["all_converged"] = cell.all_converged;
        c["degenerate"] = cell.degenerate;
        c["min_pair_cosine"] = cell.min_pair_cosine;
        c["min_cosine_to_layer1"] = cell.min_cosine_to_layer1;
        c["min_cos_layer"] = cell.min_cos_layer;
        c["prop1_unshifted"] = cell.prop1_unshifted;
        c["prop1_shifted"] = cell.prop1_shifted;
      }
      cells.push_back(std::move(c));
    }
    json summary{{"loops", grid.loops}, {"reference", grid.reference}, {"cells", cells}};
    write_text_file(dir + "/stability_summary.json", summary.dump(2) + "\n");
  }
}

// ---- single-model pipelines -------------------------------------------------

DynamicsArtifacts run_dynamics(const ExperimentSpec& spec) {
  spec.validate();
  const std::uint64_t seed = spec.seeds.front();
  const ModelWeights weights = prepare_model(spec, seed);
  const MatrixXd input = build_input(spec, weights, seed);

  RunOptions opts;
  opts.loops = spec.loops;
  opts.capture = spec.resolved_capture();
  opts.z0_seed = seed + kZ0SeedOffset;
  const Trace trace = run_recurrent(input, weights, opts);

  DynamicsArtifacts artifacts;
  auto guard = [&](const char* name, auto&& fn) {
    try {
      fn();
      artifacts.report.emplace_back(name, "ok");
    } catch (const std::exception& e) {
      artifacts.report.emplace_back(name, std::string("error: ") + e.what());
    }
  };
  guard("fixed_point_report",
        [&] { artifacts.fixed_point = fixed_point_report(trace, std::min(spec.resolved_reference(), spec.loops)); });
  guard("pairwise_similarity_attention", [&] {
    artifacts.attention_similarity = pairwise_similarity(trace, SimilarityKind::AttentionFrobenius);
  });
  guard("pairwise_similarity_residual", [&] {
    artifacts.residual_similarity = pairwise_similarity(trace, SimilarityKind::ResidualCosine);
  });
  guard("successive_differences", [&] { artifacts.diffs = successive_differences(trace); });
  return artifacts;
}

void write_dynamics_outputs(const DynamicsArtifacts& artifacts, const std::string& dir) {
  auto status = [&](const char* name) {
    for (const auto& [k, v] : artifacts.report)
      if (k == name) return v == "ok";
    return false;
  };
  if (status("fixed_point_report")) {
    std::ostringstream os;
    write_fixed_point_csv(os, artifacts.fixed_point);
    write_text_file(dir + "/fixed_point.csv", os.str());
    write_text_file(dir + "/fixed_point.json", fixed_point_to_json(artifacts.fixed_point) + "\n");
  }
  if (status("pairwise_similarity_attention")) {
    std::ostringstream os;
    write_similarity_csv(os, artifacts.attention_similarity);
    write_text_file(dir + "/similarity_attention.csv", os.str());
    write_text_file(dir + "/similarity_attention.json",
                    similarity_to_json(artifacts.attention_similarity) + "\n");
  }
  if (status("pairwise_similarity_residual")) {
    std::ostringstream os;
    write_similarity_csv(os, artifacts.residual_similarity);
    write_text_file(dir + "/similarity_residual.csv", os.str());
    write_text_file(dir + "/similarity_residual.json",
                    similarity_to_json(artifacts.residual_similarity) + "\n");
  }
  if (status("successive_differences")) {
    std::ostringstream os;
    write_series_csv(os, {artifacts.diffs.frobenius, artifacts.diffs.cosine});
    write_text_file(dir + "/successive_differences.csv", os.str());
  }
  json report = json::object();
  for (const auto& [k, v] : artifacts.report) report[k] = v;
  write_text_file(dir + "/run_report.json", report.dump(2) + "\n");
}

ClassifyArtifacts run_classify(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.loops < 9) throw SpecError("classify: needs at least 9 recurrences");
  // One model (from the first seed), one example per seed.
  const ModelWeights weights = prepare_model(spec, spec.seeds.front());
  const int k = weights.config.recurrent_layers;

  ClassifyArtifacts artifacts;
  for (std::uint64_t seed : spec.seeds) {
    const MatrixXd input = build_input(spec, weights, seed);
    RunOptions opts;
    opts.loops = spec.loops;
    opts.capture = CaptureFlags{true, false, false};
    opts.z0_seed = seed + kZ0SeedOffset;
    const Trace trace = run_recurrent(input, weights, opts);

    std::vector<std::vector<SeriesLabel>> example;
    example.reserve(static_cast<std::size_t>(trace.tokens()));
    for (int t = 0; t < trace.tokens(); ++t) {
      std::vector<SeriesLabel> per_layer;
      per_layer.reserve(static_cast<std::size_t>(k));
      for (int j = 0; j < k; ++j)
        per_layer.push_back(classify_series(token_series_at_layer(trace, t, j), spec.classifier));
      example.push_back(std::move(per_layer));
    }
    artifacts.labels.push_back(std::move(example));
  }
  artifacts.statistics = label_statistics(artifacts.labels);
  return artifacts;
}

void write_classify_outputs(const ClassifyArtifacts& artifacts, const std::string& dir) {
  std::ostringstream os;
  write_labels_csv(os, artifacts.labels);
  write_text_file(dir + "/labels.csv", os.str());
  write_text_file(dir + "/label_statistics.json", statistics_to_json(artifacts.statistics) + "\n");
}

MetricsArtifacts run_metrics(const ExperimentSpec& spec) {
  spec.validate();
  const ModelWeights weights = prepare_model(spec, spec.seeds.front());

  std::vector<Trace> traces;
  traces.reserve(spec.seeds.size());
  for (std::uint64_t seed : spec.seeds) {
    const MatrixXd input = build_input(spec, weights, seed);
    RunOptions opts;
    opts.loops = spec.loops;
    opts.capture = CaptureFlags{true, true, false};
    opts.z0_seed = seed + kZ0SeedOffset;
    traces.push_back(run_recurrent(input, weights, opts));
  }

  constexpr std::array<MetricKind, 5> kMetrics{MetricKind::ColSumConcentration, MetricKind::SinkRate,
                                               MetricKind::MixingScore, MetricKind::MatrixEntropy,
                                               MetricKind::ResidualNorm};
  constexpr std::array<Grouping, 3> kGroupings{Grouping::NoGrouping, Grouping::ByRecurrence,
                                               Grouping::ByLayer};
  MetricsArtifacts artifacts;
  for (MetricKind metric : kMetrics) {
    for (Grouping grouping : kGroupings) {
      std::vector<MetricSeries> batch;
      batch.reserve(traces.size());
      for (const Trace& tr : traces) batch.push_back(metric_over_trace(tr, metric, grouping));
      artifacts.series.push_back(aggregate_series(batch));
    }
  }
  return artifacts;
}

void write_metrics_outputs(const MetricsArtifacts& artifacts, const std::string& dir) {
  constexpr std::array<Grouping, 3> kGroupings{Grouping::NoGrouping, Grouping::ByRecurrence,
                                               Grouping::ByLayer};
  for (Grouping g : kGroupings) {
    std::vector<MetricSeries> subset;
    for (const auto& s : artifacts.series)
      if (s.grouping == g) subset.push_back(s);
    std::ostringstream os;
    write_series_csv(os, subset);
    write_text_file(dir + "/metrics_" + to_string(g) + ".csv", os.str());
  }
  write_text_file(dir + "/metrics.json", series_to_json(artifacts.series) + "\n");
}

TrajectoryArtifacts run_trajectory(const ExperimentSpec& spec) {
  spec.validate();
  const std::uint64_t seed = spec.seeds.front();
  const ModelWeights weights = prepare_model(spec, seed);
  const MatrixXd input = build_input(spec, weights, seed);
  RunOptions opts;
  opts.loops = spec.loops;
  opts.capture = CaptureFlags{true, false, false};
  opts.z0_seed = seed + kZ0SeedOffset;
  const Trace trace = run_recurrent(input, weights, opts);
  return TrajectoryArtifacts{pca_trajectory(trace)};
}

void write_trajectory_outputs(const TrajectoryArtifacts& artifacts, const std::string& dir) {
  const PcaTrajectory& t = artifacts.trajectory;
  std::ostringstream os;
  CsvWriter csv(os, {"slot", "recurrence", "layer", "pc1", "pc2"});
  for (Eigen::Index i = 0; i < t.coords.rows(); ++i) {
    csv.row({std::to_string(i), std::to_string(t.recurrence[static_cast<std::size_t>(i)]),
             std::to_string(t.layer[static_cast<std::size_t>(i)]), format_g17(t.coords(i, 0)),
             format_g17(t.coords(i, 1))});
  }
  write_text_file(dir + "/trajectory.csv", os.str());
  write_text_file(dir + "/trajectory.json",
                  json{{"rank_deficient", t.rank_deficient}, {"points", t.coords.rows()}}.dump(2) + "\n");
}

Prop2Audit run_prop2_audit(const ExperimentSpec& spec) {
  spec.validate();
  Prop2Audit audit;
  for (std::uint64_t seed : spec.seeds) {
    const ModelWeights weights = prepare_model(spec, seed);
    const MatrixXd input = build_input(spec, weights, seed);
    RunOptions opts;
    opts.loops = spec.loops;
    opts.capture = CaptureFlags{false, false, true};
    opts.z0_seed = seed + kZ0SeedOffset;
    const Trace trace = run_recurrent(input, weights, opts);
    for (int j = 0; j < weights.config.recurrent_layers; ++j) {
      for (const Prop2Record& rec : prop2_bound_check(trace, weights, j)) {
        if (!rec.holds) ++audit.violations;
        audit.rows.push_back({seed, j, rec});
      }
    }
  }
  return audit;
}

void write_prop2_outputs(const Prop2Audit& audit, const std::string& dir) {
  std::vector<std::uint64_t> seeds;
  for (const auto& row : audit.rows)
    if (seeds.empty() || seeds.back() != row.seed) seeds.push_back(row.seed);
  for (std::uint64_t seed : seeds) {
    std::ostringstream os;
    CsvWriter csv(os, {"layer", "recurrence", "lhs", "rhs", "holds"});
    for (const auto& row : audit.rows) {
      if (row.seed != seed) continue;
      csv.row({std::to_string(row.layer), std::to_string(row.record.recurrence),
               format_g17(row.record.lhs), format_g17(row.record.rhs), row.record.holds ? "1" : "0"});
    }
    write_text_file(dir + "/prop2_audit_seed" + std::to_string(seed) + ".csv", os.str());
  }
  write_text_file(dir + "/prop2_summary.json",
                  json{{"violations", audit.violations}, {"rows", audit.rows.size()}}.dump(2) + "\n");
}

void run_experiment(const ExperimentSpec& spec, const std::string& dir, int threads) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw SpecError("cannot create output directory: " + dir + " (" + ec.message() + ")");

  switch (spec.kind) {
    case ExperimentKind::StabilityGrid:
      write_stability_outputs(run_stability_grid(spec, threads), dir);
      break;
    case ExperimentKind::Dynamics:
      write_dynamics_outputs(run_dynamics(spec), dir);
      break;
    case ExperimentKind::Classify:
      write_classify_outputs(run_classify(spec), dir);
      break;
    case ExperimentKind::Metrics:
      write_metrics_outputs(run_metrics(spec), dir);
      break;
    case ExperimentKind::Trajectory:
      write_trajectory_outputs(run_trajectory(spec), dir);
      break;
    case ExperimentKind::Prop2Audit:
      write_prop2_outputs(run_prop2_audit(spec), dir);
      break;
  }
}

}  // namespace looplens
