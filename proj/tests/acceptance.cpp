// Acceptance suite: runs every top-level criterion end to end and prints one
// pass/fail line per criterion (criterion 1 also reports its sub-parts).
// Exits nonzero if any criterion fails.

#include "looplens/harness.hpp"
#include "looplens/io.hpp"
#include "looplens/weights_io.hpp"
#include "oracles.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <sys/wait.h>

using namespace looplens;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(const std::string& name, bool ok, const std::string& detail = "") {
  std::printf("[%s] %s%s%s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.empty() ? "" : ": ",
              detail.c_str());
  std::fflush(stdout);
  if (!ok) ++g_failures;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

const StabilityCell& cell_of(const StabilityGridResult& grid, NormScheme scheme, bool injection,
                             std::uint64_t seed) {
  for (const auto& c : grid.cells)
    if (c.scheme == scheme && c.injection == injection && c.seed == seed) return c;
  throw std::logic_error("grid cell missing");
}

// ---- criterion 1 + 3: stability grid and cyclic-shift check -----------------

void criteria_grid() {
  ExperimentSpec spec;
  spec.kind = ExperimentKind::StabilityGrid;
  spec.loops = 128;
  spec.seeds = {1, 2, 3};
  spec.sequence.random_embeddings = 32;
  spec.reference = 128;
  // default model: D=512, 4 heads of 128, 12 recurrent layers, no prelude/coda

  const auto start = std::chrono::steady_clock::now();
  const StabilityGridResult grid = run_stability_grid(spec, 2);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  auto tail_min = [&](const std::vector<double>& curve) {
    double m = 2.0;
    for (int t = 95; t < 128; ++t) m = std::min(m, curve[static_cast<std::size_t>(t)]);
    return m;
  };

  bool a_ok = true, b_ok = true, d_ok = true;
  std::string a_detail, b_detail, d_detail;
  for (std::uint64_t seed : spec.seeds) {
    const StabilityCell& pre_inj = cell_of(grid, NormScheme::PreNorm, true, seed);
    if (pre_inj.diverged || tail_min(pre_inj.cos_own) < 0.999 || pre_inj.min_cosine_to_layer1 >= 0.99)
      a_ok = false;
    a_detail += " s" + std::to_string(seed) + ": own96=" + fmt(tail_min(pre_inj.cos_own)) +
                " minTo1=" + fmt(pre_inj.min_cosine_to_layer1);

    const StabilityCell& pre_no = cell_of(grid, NormScheme::PreNorm, false, seed);
    if (pre_no.diverged || tail_min(pre_no.cos_own) < 0.999 || tail_min(pre_no.cos_min_layer) < 0.999)
      b_ok = false;
    b_detail += " s" + std::to_string(seed) + ": own96=" + fmt(tail_min(pre_no.cos_own)) +
                " min96=" + fmt(tail_min(pre_no.cos_min_layer));

    const StabilityCell& hug = cell_of(grid, NormScheme::HuginnSandwich, true, seed);
    if (hug.diverged || !hug.all_converged) d_ok = false;
    d_detail += " s" + std::to_string(seed) + ": conv=" + (hug.all_converged ? "1" : "0");
  }

  bool c_ok = true;
  std::string c_detail;
  for (bool injection : {true, false}) {
    int not_converged = 0;
    for (std::uint64_t seed : spec.seeds) {
      const StabilityCell& ouro = cell_of(grid, NormScheme::OuroSandwich, injection, seed);
      if (ouro.diverged || !ouro.all_converged) ++not_converged;
    }
    if (not_converged < 2) c_ok = false;
    c_detail += std::string(" inj=") + (injection ? "1" : "0") + ": non-conv " +
                std::to_string(not_converged) + "/3";
  }

  const bool time_ok = secs < 600.0;
  report("criterion 1a (pre-norm + injection: stable non-degenerate fixed point)", a_ok, a_detail);
  report("criterion 1b (pre-norm - injection: degenerate fixed point, both curves >= 0.999 by 96)",
         b_ok, b_detail);
  report("criterion 1c (ouro +/- injection: not converged for >= 2 of 3 seeds)", c_ok, c_detail);
  report("criterion 1d (huginn + injection: converged)", d_ok, d_detail);
  report("criterion 1 runtime (< 10 min)", time_ok, fmt(secs) + " s");
  report("criterion 1 (stability grid reproduction)", a_ok && b_ok && c_ok && d_ok && time_ok);

  // criterion 3: on every converged cell with unshifted residual <= 1e-6 the
  // shifted-cycle residual stays within the calibrated 1e-3
  bool c3_ok = true;
  int exercised = 0;
  std::string c3_detail;
  for (const auto& cell : grid.cells) {
    if (cell.diverged || !cell.all_converged) continue;
    if (cell.prop1_unshifted > 1e-6) continue;
    ++exercised;
    if (cell.prop1_shifted > 1e-3) {
      c3_ok = false;
      c3_detail += " " + to_string(cell.scheme) + "/inj" + std::string(cell.injection ? "1" : "0") +
                   "/s" + std::to_string(cell.seed) + ": shifted=" + fmt(cell.prop1_shifted);
    }
  }
  c3_detail = std::to_string(exercised) + " cells at residual <= 1e-6" + c3_detail;
  report("criterion 3 (cyclic-shift fixed point within 1e-3)", c3_ok && exercised > 0, c3_detail);
}

// ---- criterion 2: proposition-2 bound audit ---------------------------------

void criterion_2() {
  std::mt19937_64 pick(20240501);
  int violations = 0;
  int checks = 0;
  for (int rep = 0; rep < 20; ++rep) {
    ModelConfig cfg;
    cfg.d_model = 32 + 16 * static_cast<int>(pick() % 3);  // 32, 48, 64
    cfg.n_heads = 2;
    cfg.d_head = cfg.d_model / 2;
    cfg.recurrent_layers = 4 + static_cast<int>(pick() % 13);  // 4..16
    cfg.mlp_hidden = 2 * cfg.d_model;
    cfg.norm_scheme = static_cast<NormScheme>(rep % 3);
    cfg.input_injection = pick() % 2 == 0;
    cfg.seed = pick();
    const ModelWeights weights = init_random(cfg);
    GaussianRng in(pick());
    const MatrixXd input = in.matrix(8, cfg.d_model, 1.0);
    RunOptions opts;
    opts.loops = 32;
    opts.capture = CaptureFlags{false, false, true};
    opts.z0_seed = pick();
    const Trace trace = run_recurrent(input, weights, opts);
    for (int j = 0; j < cfg.recurrent_layers; ++j) {
      for (const Prop2Record& rec : prop2_bound_check(trace, weights, j)) {
        ++checks;
        if (!rec.holds) ++violations;
      }
    }
  }
  report("criterion 2 (attention Lipschitz bound, zero violations)", violations == 0,
         std::to_string(checks) + " checks, " + std::to_string(violations) + " violations");
}

// ---- criterion 4: cyclic similarity banding ---------------------------------

void criterion_4() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    ModelConfig cfg;  // converged family per criterion 1a
    cfg.norm_scheme = NormScheme::PreNorm;
    cfg.input_injection = true;
    cfg.seed = seed + kModelSeedOffset;
    const ModelWeights weights = init_random(cfg);
    GaussianRng in(seed + kInputSeedOffset);
    const MatrixXd input = in.matrix(32, cfg.d_model, 1.0);
    RunOptions opts;
    opts.loops = 8;
    opts.capture = CaptureFlags{true, true, false};
    opts.z0_seed = seed + kZ0SeedOffset;
    const Trace trace = run_recurrent(input, weights, opts);
    const SimilarityMatrix sim = pairwise_similarity(trace, SimilarityKind::AttentionFrobenius);

    const int k = cfg.recurrent_layers;
    auto lag_mean = [&](int lag) {
      double acc = 0.0;
      int count = 0;
      for (int i = 0; i + lag < trace.n_blocks(); ++i) {
        if (trace.slot_recurrence(i) < 1) continue;  // recurrences >= 2 only
        acc += sim.values(i, i + lag);
        ++count;
      }
      return acc / count;
    };
    const double at_k = lag_mean(k), below = lag_mean(k - 1), above = lag_mean(k + 1);
    if (!(at_k < below && at_k < above)) ok = false;
    detail += " s" + std::to_string(seed) + ": lag(k)=" + fmt(at_k) + " vs " + fmt(below) + "/" +
              fmt(above);
  }
  report("criterion 4 (attention similarity minimal at lag k)", ok, detail);
}

// ---- criterion 5: metric oracle equivalence ---------------------------------

void criterion_5() {
  std::mt19937_64 rng(55);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const int t = 2 + static_cast<int>(rng() % 63);  // T <= 64
    const MatrixXd a = oracles::random_row_stochastic(rng, t, rep % 2 == 0);
    worst = std::max(worst, std::abs(colsum_concentration(a) - oracles::naive_colsum_concentration(a)));
    worst = std::max(worst, std::abs(mixing_score(a) - oracles::naive_mixing_score(a)));
    const int k = static_cast<int>(rng() % t);
    worst = std::max(worst, std::abs(sink_score(a, k) - oracles::naive_sink_score(a, k)));
    std::vector<double> scores;
    for (int j = 0; j < t; ++j) scores.push_back(sink_score(a, j));
    worst = std::max(worst, std::abs(sink_rate(scores) - oracles::naive_sink_rate(scores, 0.3)));
    worst = std::max(worst, std::abs(matrix_entropy(a) - oracles::naive_matrix_entropy(a)));
  }
  bool edges = true;
  edges = edges && std::abs(colsum_concentration(MatrixXd::Constant(8, 8, 0.125))) <= 1e-12;
  MatrixXd onehot = MatrixXd::Zero(6, 6);
  onehot.col(0).setOnes();
  edges = edges && std::abs(colsum_concentration(onehot) - 1.0) <= 1e-12;
  edges = edges && mixing_score(MatrixXd::Identity(6, 6)) == 0.0;
  edges = edges && std::abs(mixing_score(MatrixXd::Constant(6, 6, 1.0 / 6)) - std::log(6.0)) <= 1e-12;
  MatrixXd rank1(5, 3);
  for (int i = 0; i < 5; ++i) rank1.row(i) << 2.0, -1.0, 0.5;
  edges = edges && std::abs(matrix_entropy(rank1)) <= 1e-9;
  report("criterion 5 (metric oracle equivalence at 1e-12 over 1000 matrices)",
         worst <= 1e-12 && edges, "max |impl - oracle| = " + fmt(worst));
}

// ---- criterion 6: classifier conformance ------------------------------------

void criterion_6() {
  ClassifierParams params;
  bool ok = true;
  std::string detail;

  ok = ok && classify_series(std::vector<double>(64, 1.0), params).kind == LabelKind::FixedPoint;

  std::vector<double> orbit(64);
  for (int i = 0; i < 64; ++i)
    orbit[static_cast<std::size_t>(i)] = 0.9 + 0.05 * std::sin(2.0 * std::numbers::pi * 8.0 * i / 64.0);
  const SeriesLabel lab = classify_series(orbit, params);
  const bool orbit_ok = lab.kind == LabelKind::Orbit && lab.freq &&
                        std::abs(*lab.freq - 8.0 / 64.0) < 1e-12 && lab.amp &&
                        std::abs(*lab.amp - 0.05) <= 0.15 * 0.05;
  ok = ok && orbit_ok;
  if (lab.amp) detail += "orbit amp=" + fmt(*lab.amp);

  std::vector<double> ramp(64);
  for (int i = 0; i < 64; ++i) ramp[static_cast<std::size_t>(i)] = 0.5 + 0.4 * i / 63.0;
  ok = ok && classify_series(ramp, params).kind == LabelKind::Slider;

  std::mt19937_64 rng(2024);
  std::vector<double> noise(64);
  for (auto& v : noise) v = 0.45 + 0.1 * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  ok = ok && classify_series(noise, params).kind == LabelKind::Unknown;

  double worst = 0.0;
  for (int n = 4; n <= 256; ++n) {
    std::vector<double> x(static_cast<std::size_t>(n));
    for (auto& v : x) v = 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
    const Spectrum got = real_fft_magnitudes(x);
    const auto oracle = oracles::brute_force_dft(x);
    double max_mag = 1.0;
    for (const auto& c : oracle) max_mag = std::max(max_mag, std::abs(c));
    for (std::size_t b = 0; b < got.magnitudes.size(); ++b)
      worst = std::max(worst, std::abs(got.magnitudes[b] - std::abs(oracle[b + 1])) / max_mag);
  }
  ok = ok && worst <= 1e-9;
  report("criterion 6 (classifier conformance + FFT oracle at 1e-9)", ok,
         detail + " fft rel err=" + fmt(worst));
}

// ---- criterion 7: residual-norm scheme signature ----------------------------

void criterion_7() {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto run_norms = [&](NormScheme scheme, bool injection) {
      ModelConfig cfg;
      cfg.norm_scheme = scheme;
      cfg.input_injection = injection;
      cfg.seed = seed + kModelSeedOffset;
      const ModelWeights weights = init_random(cfg);
      GaussianRng in(seed + kInputSeedOffset);
      RunOptions opts;
      opts.loops = 8;
      opts.z0_seed = seed + kZ0SeedOffset;
      return residual_norms(run_recurrent(in.matrix(32, cfg.d_model, 1.0), weights, opts));
    };

    const MetricSeries huginn = run_norms(NormScheme::HuginnSandwich, true);
    double mean = 0.0, var = 0.0;
    for (double v : huginn.values) mean += v;
    mean /= static_cast<double>(huginn.values.size());
    for (double v : huginn.values) var += (v - mean) * (v - mean);
    const double cv = std::sqrt(var / static_cast<double>(huginn.values.size())) / mean;

    const MetricSeries pre = run_norms(NormScheme::PreNorm, false);
    const double ratio = pre.values.back() / pre.values.front();
    if (!(cv < 0.05 && ratio >= 2.0)) ok = false;
    detail += " s" + std::to_string(seed) + ": huginn cv=" + fmt(cv) + " pre ratio=" + fmt(ratio);
  }
  report("criterion 7 (huginn cv < 0.05; pre-norm growth >= 2x)", ok, detail);
}

// ---- criterion 8: determinism & round-trip ----------------------------------

std::map<std::string, std::string> read_dir(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    files[entry.path().filename().string()] = read_text_file(entry.path().string());
  return files;
}

void criterion_8(const char* argv0) {
  const fs::path base = fs::temp_directory_path() / "looplens_acceptance";
  fs::remove_all(base);
  fs::create_directories(base);

  const std::string spec_text = R"({
    "kind": "stability_grid",
    "model": {"d_model": 32, "n_heads": 4, "d_head": 8, "recurrent_layers": 3, "mlp_hidden": 64},
    "loops": 16,
    "seeds": [11, 12],
    "sequence": {"random_embeddings": 6},
    "reference": 16
  })";
  const ExperimentSpec spec = parse_spec(spec_text);

  bool ok = true;
  std::string detail;

  // identical spec -> byte-identical outputs, independent of thread count
  run_experiment(spec, (base / "run1").string(), 1);
  run_experiment(spec, (base / "run2").string(), 1);
  run_experiment(spec, (base / "run4").string(), 4);
  const auto run1 = read_dir(base / "run1");
  if (run1 != read_dir(base / "run2") || run1 != read_dir(base / "run4")) {
    ok = false;
    detail += " grid outputs differ across runs/threads;";
  }

  // weight files round-trip bit-exactly
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_head = 8;
  cfg.recurrent_layers = 3;
  cfg.mlp_hidden = 64;
  cfg.seed = 77;
  const ModelWeights weights = init_random(cfg);
  const std::string w1 = (base / "w1.weights").string();
  const std::string w2 = (base / "w2.weights").string();
  save_weights(weights, w1);
  save_weights(load_weights(w1), w2);
  if (read_text_file(w1) != read_text_file(w2) || load_weights(w1).checksum() != weights.checksum()) {
    ok = false;
    detail += " weight round-trip mismatch;";
  }

  // CLI exit codes: 0 on success, 1 on spec error
  const fs::path cli = fs::path(argv0).parent_path().parent_path() / "tools" / "looplens";
  if (fs::exists(cli)) {
    const std::string spec_path = (base / "spec.json").string();
    write_text_file(spec_path, spec_text);
    const std::string quiet = " > /dev/null 2>&1";
    int rc = std::system(
        (cli.string() + " stability-grid --spec " + spec_path + " --out " + (base / "cli").string() + quiet)
            .c_str());
    if (WEXITSTATUS(rc) != 0) {
      ok = false;
      detail += " cli success exit != 0;";
    }
    rc = std::system((cli.string() + " dynamics --spec /nonexistent.json" + quiet).c_str());
    if (WEXITSTATUS(rc) != 1) {
      ok = false;
      detail += " cli spec-error exit != 1;";
    }
    const std::string div_path = (base / "diverge.json").string();
    write_text_file(div_path, R"({
      "kind": "dynamics",
      "model": {"d_model": 32, "n_heads": 4, "d_head": 8, "recurrent_layers": 3, "mlp_hidden": 64,
                "injection_sigma": 1e308},
      "loops": 4, "seeds": [7], "sequence": {"random_embeddings": 6}
    })");
    rc = std::system(
        (cli.string() + " dynamics --spec " + div_path + " --out " + (base / "div").string() + quiet)
            .c_str());
    if (WEXITSTATUS(rc) != 2) {
      ok = false;
      detail += " cli divergence exit != 2;";
    }
    if (!fs::exists(base / "cli") || read_dir(base / "cli") != run1) {
      ok = false;
      detail += " cli output differs from library run;";
    }
  } else {
    ok = false;
    detail += " cli binary not found;";
  }

  fs::remove_all(base);
  report("criterion 8 (determinism and bit-exact round-trip)", ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
  // optional filter: run only the named criteria, e.g. "acceptance 2 5 8"
  auto wanted = [&](const char* id) {
    if (argc < 2) return true;
    for (int i = 1; i < argc; ++i)
      if (std::string(argv[i]) == id) return true;
    return false;
  };
  if (wanted("1") || wanted("3")) criteria_grid();
  if (wanted("2")) criterion_2();
  if (wanted("4")) criterion_4();
  if (wanted("5")) criterion_5();
  if (wanted("6")) criterion_6();
  if (wanted("7")) criterion_7();
  if (wanted("8")) criterion_8(argv[0]);
  std::printf("%d criterion failure(s)\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
