#pragma once

#include "looplens/classify.hpp"
#include "looplens/dynamics.hpp"
#include "looplens/metrics.hpp"
#include "looplens/model.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace looplens {

enum class ExperimentKind { StabilityGrid, Dynamics, Classify, Metrics, Trajectory, Prop2Audit };

std::string to_string(ExperimentKind k);
ExperimentKind experiment_kind_from_string(const std::string& s);

/// Config-file or schema problems; the CLI maps these to exit code 1.
class SpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The model / injection-Z0 / input RNG streams derive from the experiment
// seed by fixed offsets, so ablating one source never perturbs the others.
constexpr std::uint64_t kModelSeedOffset = 0x01000000;
constexpr std::uint64_t kZ0SeedOffset = 0x02000000;
constexpr std::uint64_t kInputSeedOffset = 0x03000000;

struct SequenceSpec {
  std::vector<int> tokens;             // token-id input when non-empty
  int random_embeddings = 32;          // sequence length T otherwise
  std::optional<std::uint64_t> seed;   // input seed; derived when absent
  bool use_tokens() const { return !tokens.empty(); }
};

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::Dynamics;
  std::optional<ModelConfig> model;    // inline config...
  bool model_seed_explicit = false;
  std::string weights_path;            // ...or a weight file
  int loops = 128;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  SequenceSpec sequence;
  std::optional<CaptureFlags> capture;
  std::string out_dir;
  ClassifierParams classifier;
  std::optional<int> reference;

  int resolved_reference() const { return reference ? *reference : std::min(128, loops); }
  CaptureFlags resolved_capture() const;
  ModelConfig base_config() const;  // inline config or defaults; weight files carry their own
  void validate() const;
};

ExperimentSpec load_spec(const std::string& path);
ExperimentSpec parse_spec(const std::string& text, const std::string& origin = "<memory>");
std::string spec_to_json(const ExperimentSpec& spec);

// Model weights for one experiment seed: loaded from the spec's weight file,
// or randomly initialized with the derived (or explicit) model seed.
ModelWeights prepare_model(const ExperimentSpec& spec, std::uint64_t experiment_seed);

// Input embeddings for one experiment seed: embedded token ids, or T random
// rows with unit-variance entries (residual-stream scale).
MatrixXd build_input(const ExperimentSpec& spec, const ModelWeights& weights,
                     std::uint64_t experiment_seed);

// ---- stability grid -------------------------------------------------------

struct StabilityCell {
  NormScheme scheme = NormScheme::PreNorm;
  bool injection = false;
  std::uint64_t seed = 0;
  bool diverged = false;
  int diverged_layer = -1;
  int diverged_recurrence = -1;
  std::vector<double> cos_own;        // layer-1 state vs its own fixed point
  std::vector<double> cos_min_layer;  // layer-1 state vs least-similar layer's fixed point
  int min_cos_layer = -1;
  double min_cosine_to_layer1 = 1.0;  // min over other layers' fixed points
  double min_pair_cosine = 1.0;       // over all layer pairs
  bool all_converged = false;
  bool degenerate = false;
  double prop1_unshifted = 0.0;
  double prop1_shifted = 0.0;
};

struct StabilityGridResult {
  std::vector<StabilityCell> cells;  // 3 norms x 2 injection x |seeds|, fixed order
  int loops = 0;
  int reference = 0;
};

StabilityGridResult run_stability_grid(const ExperimentSpec& spec, int threads = 1);
void write_stability_outputs(const StabilityGridResult& grid, const std::string& dir);

// ---- single-model pipelines -----------------------------------------------

struct DynamicsArtifacts {
  FixedPointReport fixed_point;
  SimilarityMatrix attention_similarity;
  SimilarityMatrix residual_similarity;
  SuccessiveDiffs diffs;
  // Per-artifact status; partial failures are surfaced here instead of
  // aborting the run.
  std::vector<std::pair<std::string, std::string>> report;
};

DynamicsArtifacts run_dynamics(const ExperimentSpec& spec);
void write_dynamics_outputs(const DynamicsArtifacts& artifacts, const std::string& dir);

struct ClassifyArtifacts {
  LabelGrid labels;  // [example(seed)][token][recurrent layer]
  LabelStatistics statistics;
};

ClassifyArtifacts run_classify(const ExperimentSpec& spec);
void write_classify_outputs(const ClassifyArtifacts& artifacts, const std::string& dir);

struct MetricsArtifacts {
  std::vector<MetricSeries> series;  // aggregated over seeds, all groupings
};

MetricsArtifacts run_metrics(const ExperimentSpec& spec);
void write_metrics_outputs(const MetricsArtifacts& artifacts, const std::string& dir);

struct TrajectoryArtifacts {
  PcaTrajectory trajectory;
};

TrajectoryArtifacts run_trajectory(const ExperimentSpec& spec);
void write_trajectory_outputs(const TrajectoryArtifacts& artifacts, const std::string& dir);

struct Prop2Audit {
  struct Row {
    std::uint64_t seed;
    int layer;
    Prop2Record record;
  };
  std::vector<Row> rows;
  int violations = 0;
};

Prop2Audit run_prop2_audit(const ExperimentSpec& spec);
void write_prop2_outputs(const Prop2Audit& audit, const std::string& dir);

// Runs the spec end to end and writes all outputs into dir.
void run_experiment(const ExperimentSpec& spec, const std::string& dir, int threads = 1);

}  // namespace looplens
