#pragma once

#include "looplens/linalg.hpp"

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace looplens {

enum class NormScheme { PreNorm, HuginnSandwich, OuroSandwich };
enum class NormKind { RmsNorm, LayerNorm };
enum class Positional { None, Rotary };

std::string to_string(NormScheme s);
std::string to_string(NormKind k);
std::string to_string(Positional p);
NormScheme norm_scheme_from_string(const std::string& s);
NormKind norm_kind_from_string(const std::string& s);
Positional positional_from_string(const std::string& s);

/// Architecture of a looped transformer: p prelude layers, k recurrent layers
/// looped l times at run time, c coda layers, with an optional input-injection
/// projection applied at the start of every recurrence.
struct ModelConfig {
  int d_model = 512;
  int n_heads = 4;
  int d_head = 128;
  int prelude_layers = 0;
  int recurrent_layers = 12;
  int coda_layers = 0;
  NormScheme norm_scheme = NormScheme::PreNorm;
  NormKind norm_kind = NormKind::RmsNorm;
  bool input_injection = true;
  double injection_sigma = 1.0;
  Positional positional = Positional::Rotary;
  int mlp_hidden = 0;  // 0 -> 4 * d_model
  std::uint64_t seed = 0;

  int total_layers() const { return prelude_layers + recurrent_layers + coda_layers; }
  int hidden() const { return mlp_hidden > 0 ? mlp_hidden : 4 * d_model; }
  void validate() const;
};

struct LayerWeights {
  // Q/K/V/O are D x D; head h occupies columns [h*d_head, (h+1)*d_head) of
  // wq/wk/wv and the matching rows feed back through wo.
  MatrixXd wq, wk, wv, wo;
  MatrixXd mlp_in;   // D x hidden
  MatrixXd mlp_out;  // hidden x D
  // Norm gains for the four optional norm sites; schemes use a subset.
  VectorXd gain1, gain2, gain3, gain4;
};

struct ModelWeights {
  ModelConfig config;
  std::vector<LayerWeights> layers;
  std::optional<MatrixXd> w_inject;   // 2D x D, present iff input_injection
  VectorXd loop_norm_gain;            // Ouro norm-after-loop site
  std::optional<MatrixXd> embedding;  // vocab x D, only in imported files
  double rotary_base = 10000.0;

  // FNV-1a over the raw bytes of every tensor, in serialization order.
  std::uint64_t checksum() const;
};

struct CaptureFlags {
  bool residuals = true;
  bool attentions = false;
  bool attention_inputs = false;  // post-norm states feeding Q/K
};

struct RunOptions {
  int loops = 1;
  CaptureFlags capture;
  std::uint64_t z0_seed = 0;  // seeds the injected initial state Z0
};

/// Raised when a forward pass produces non-finite activations. `recurrence`
/// is -1 for prelude/coda layers.
class DivergedForwardError : public std::runtime_error {
 public:
  DivergedForwardError(int layer_, int recurrence_)
      : std::runtime_error("diverged forward pass at layer " + std::to_string(layer_) +
                           ", recurrence " + std::to_string(recurrence_)),
        layer(layer_),
        recurrence(recurrence_) {}
  int layer;
  int recurrence;
};

class CaptureFlagError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Full recording of one recurrent run. Block outputs are stored in realized
/// order: p prelude slots, loops*k recurrent slots, c coda slots; the
/// embedding state is kept separately.
struct Trace {
  ModelConfig config;
  int loops = 0;
  CaptureFlags capture;
  MatrixXd embedding_state;                       // T x D input
  std::vector<MatrixXd> residuals;                // [slot] T x D
  std::vector<std::vector<MatrixXd>> attentions;  // [slot][head] T x T
  std::vector<MatrixXd> attention_inputs;         // [slot] T x D

  int n_blocks() const { return config.prelude_layers + loops * config.recurrent_layers + config.coda_layers; }
  int tokens() const { return static_cast<int>(embedding_state.rows()); }

  // Recurrence group of a slot (prelude counts as the first group, coda as
  // the last), 0-based.
  int slot_recurrence(int slot) const;
  // Unique layer id, 0..p+k+c-1.
  int slot_layer(int slot) const;
  // Position of the slot within its recurrence group, 0..p+k+c-1.
  int slot_position(int slot) const;
  double slot_pct_depth(int slot) const;

  // Slot of recurrent-block layer j (0-based within the block) at recurrence
  // t (0-based).
  int recurrent_slot(int layer_in_block, int recurrence) const;
  const MatrixXd& recurrent_state(int layer_in_block, int recurrence) const;
};

// Deterministic random initialization: projections N(0, 0.02^2), gains 1.
// Every draw is rounded through float so a file round trip reproduces the
// in-memory weights exactly.
ModelWeights init_random(const ModelConfig& config);

struct BlockResult {
  MatrixXd output;
  std::vector<MatrixXd> attention;  // per head, T x T
  MatrixXd attn_input;              // n1(x)
};

// One transformer block (attention + MLP with the configured norm scheme).
BlockResult block_forward(const Eigen::Ref<const MatrixXd>& x, int layer, const ModelWeights& weights);

// Prelude once, recurrent stack `loops` times (with input injection when
// configured), coda once. Captures per `opts.capture`.
Trace run_recurrent(const Eigen::Ref<const MatrixXd>& input, const ModelWeights& weights,
                    const RunOptions& opts);

// Copy of `weights` with mlp_out of the given layer zeroed.
ModelWeights ablate_mlp(const ModelWeights& weights, int layer);

MatrixXd embed_tokens(const std::vector<int>& ids, const Eigen::Ref<const MatrixXd>& table);

// Norm dispatch used by blocks and by the Ouro after-loop site.
MatrixXd apply_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain,
                    NormKind kind);

// Rotary embedding applied in place to a T x d_head slice, position = row.
void apply_rotary(Eigen::Ref<MatrixXd> qk, double base);

}  // namespace looplens
