#include "looplens/model.hpp"

#include <cmath>
#include <cstring>

namespace looplens {

std::string to_string(NormScheme s) {
  switch (s) {
    case NormScheme::PreNorm: return "pre_norm";
    case NormScheme::HuginnSandwich: return "huginn_sandwich";
    case NormScheme::OuroSandwich: return "ouro_sandwich";
  }
  return "?";
}

std::string to_string(NormKind k) { return k == NormKind::RmsNorm ? "rms_norm" : "layer_norm"; }

std::string to_string(Positional p) { return p == Positional::Rotary ? "rotary" : "none"; }

NormScheme norm_scheme_from_string(const std::string& s) {
  if (s == "pre_norm") return NormScheme::PreNorm;
  if (s == "huginn_sandwich") return NormScheme::HuginnSandwich;
  if (s == "ouro_sandwich") return NormScheme::OuroSandwich;
  throw std::invalid_argument("unknown norm_scheme: " + s);
}

NormKind norm_kind_from_string(const std::string& s) {
  if (s == "rms_norm") return NormKind::RmsNorm;
  if (s == "layer_norm") return NormKind::LayerNorm;
  throw std::invalid_argument("unknown norm_kind: " + s);
}

Positional positional_from_string(const std::string& s) {
  if (s == "rotary") return Positional::Rotary;
  if (s == "none") return Positional::None;
  throw std::invalid_argument("unknown positional: " + s);
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_head <= 0)
    throw std::invalid_argument("config: dimensions must be positive");
  if (n_heads * d_head != d_model)
    throw std::invalid_argument("config: n_heads * d_head must equal d_model");
  if (recurrent_layers < 1) throw std::invalid_argument("config: recurrent_layers must be >= 1");
  if (prelude_layers < 0 || coda_layers < 0)
    throw std::invalid_argument("config: prelude/coda layer counts must be >= 0");
  if (injection_sigma <= 0.0) throw std::invalid_argument("config: injection_sigma must be positive");
  if (mlp_hidden < 0) throw std::invalid_argument("config: mlp_hidden must be >= 0");
}

namespace {

void hash_bytes(std::uint64_t& h, const double* data, std::size_t count) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < count * sizeof(double); ++i) {
    h ^= bytes[i];
    h *= 0x100000001B3ULL;
  }
}

void hash_matrix(std::uint64_t& h, const MatrixXd& m) { hash_bytes(h, m.data(), static_cast<std::size_t>(m.size())); }

double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

MatrixXd random_projection(GaussianRng& rng, int rows, int cols, double std_dev) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = quantize_f32(std_dev * rng.next());
  return m;
}

MatrixXd gelu(const MatrixXd& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
}

}  // namespace

std::uint64_t ModelWeights::checksum() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& l : layers) {
    hash_matrix(h, l.wq);
    hash_matrix(h, l.wk);
    hash_matrix(h, l.wv);
    hash_matrix(h, l.wo);
    hash_matrix(h, l.mlp_in);
    hash_matrix(h, l.mlp_out);
    hash_bytes(h, l.gain1.data(), static_cast<std::size_t>(l.gain1.size()));
    hash_bytes(h, l.gain2.data(), static_cast<std::size_t>(l.gain2.size()));
    hash_bytes(h, l.gain3.data(), static_cast<std::size_t>(l.gain3.size()));
    hash_bytes(h, l.gain4.data(), static_cast<std::size_t>(l.gain4.size()));
  }
  if (w_inject) hash_matrix(h, *w_inject);
  hash_bytes(h, loop_norm_gain.data(), static_cast<std::size_t>(loop_norm_gain.size()));
  if (embedding) hash_matrix(h, *embedding);
  return h;
}

int Trace::slot_recurrence(int slot) const {
  const int p = config.prelude_layers;
  const int k = config.recurrent_layers;
  if (slot < p) return 0;
  if (slot < p + loops * k) return (slot - p) / k;
  return loops - 1;
}

int Trace::slot_layer(int slot) const {
  const int p = config.prelude_layers;
  const int k = config.recurrent_layers;
  if (slot < p) return slot;
  if (slot < p + loops * k) return p + (slot - p) % k;
  return p + k + (slot - p - loops * k);
}

int Trace::slot_position(int slot) const {
  const int p = config.prelude_layers;
  const int k = config.recurrent_layers;
  if (slot < p) return slot;
  if (slot < p + loops * k) return p + (slot - p) % k;
  return p + k + (slot - p - loops * k);
}

double Trace::slot_pct_depth(int slot) const {
  const int span = config.total_layers() - 1;
  if (span <= 0) return 0.0;
  return static_cast<double>(slot_position(slot)) / static_cast<double>(span);
}

int Trace::recurrent_slot(int layer_in_block, int recurrence) const {
  const int k = config.recurrent_layers;
  if (layer_in_block < 0 || layer_in_block >= k)
    throw std::out_of_range("trace: recurrent layer index out of range");
  if (recurrence < 0 || recurrence >= loops) throw std::out_of_range("trace: recurrence out of range");
  return config.prelude_layers + recurrence * k + layer_in_block;
}

const MatrixXd& Trace::recurrent_state(int layer_in_block, int recurrence) const {
  return residuals.at(static_cast<std::size_t>(recurrent_slot(layer_in_block, recurrence)));
}

ModelWeights init_random(const ModelConfig& config) {
  config.validate();
  GaussianRng rng(config.seed);
  const int d = config.d_model;
  const int hidden = config.hidden();
  ModelWeights w;
  w.config = config;
  w.layers.resize(static_cast<std::size_t>(config.total_layers()));
  for (auto& l : w.layers) {
    l.wq = random_projection(rng, d, d, 0.02);
    l.wk = random_projection(rng, d, d, 0.02);
    l.wv = random_projection(rng, d, d, 0.02);
    l.wo = random_projection(rng, d, d, 0.02);
    l.mlp_in = random_projection(rng, d, hidden, 0.02);
    l.mlp_out = random_projection(rng, hidden, d, 0.02);
    l.gain1 = VectorXd::Ones(d);
    l.gain2 = VectorXd::Ones(d);
    l.gain3 = VectorXd::Ones(d);
    l.gain4 = VectorXd::Ones(d);
  }
  if (config.input_injection) w.w_inject = random_projection(rng, 2 * d, d, 0.02);
  w.loop_norm_gain = VectorXd::Ones(d);
  return w;
}

MatrixXd apply_norm(const Eigen::Ref<const MatrixXd>& x, const Eigen::Ref<const VectorXd>& gain,
                    NormKind kind) {
  return kind == NormKind::RmsNorm ? rms_norm(x, gain) : layer_norm(x, gain);
}

void apply_rotary(Eigen::Ref<MatrixXd> qk, double base) {
  const Eigen::Index d = qk.cols();
  for (Eigen::Index i = 0; 2 * i + 1 < d; ++i) {
    const double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    for (Eigen::Index t = 0; t < qk.rows(); ++t) {
      const double ang = static_cast<double>(t) * theta;
      const double c = std::cos(ang);
      const double s = std::sin(ang);
      const double a = qk(t, 2 * i);
      const double b = qk(t, 2 * i + 1);
      qk(t, 2 * i) = a * c - b * s;
      qk(t, 2 * i + 1) = a * s + b * c;
    }
  }
}

BlockResult block_forward(const Eigen::Ref<const MatrixXd>& x, int layer, const ModelWeights& weights) {
  const ModelConfig& cfg = weights.config;
  if (layer < 0 || layer >= cfg.total_layers()) throw std::out_of_range("block_forward: layer out of range");
  if (x.cols() != cfg.d_model) throw std::invalid_argument("block_forward: input width must be d_model");
  if (!x.allFinite()) throw DivergedForwardError(layer, -1);

  const LayerWeights& lw = weights.layers[static_cast<std::size_t>(layer)];
  const int heads = cfg.n_heads;
  const int d = cfg.d_head;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  BlockResult result;
  result.attn_input = apply_norm(x, lw.gain1, cfg.norm_kind);
  const MatrixXd q_all = result.attn_input * lw.wq;
  const MatrixXd k_all = result.attn_input * lw.wk;
  const MatrixXd v_all = result.attn_input * lw.wv;

  MatrixXd concat(x.rows(), cfg.d_model);
  result.attention.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    MatrixXd qh = q_all.middleCols(h * d, d);
    MatrixXd kh = k_all.middleCols(h * d, d);
    if (cfg.positional == Positional::Rotary) {
      apply_rotary(qh, weights.rotary_base);
      apply_rotary(kh, weights.rotary_base);
    }
    MatrixXd attn = row_softmax(qh * kh.transpose() * inv_sqrt_d, /*causal=*/true);
    concat.middleCols(h * d, d) = attn * v_all.middleCols(h * d, d);
    result.attention.push_back(std::move(attn));
  }
  const MatrixXd attn_out = concat * lw.wo;

  auto mlp = [&](const MatrixXd& y) -> MatrixXd { return gelu(y * lw.mlp_in) * lw.mlp_out; };

  MatrixXd mid;
  switch (cfg.norm_scheme) {
    case NormScheme::PreNorm:
      mid = x + attn_out;
      result.output = mid + mlp(apply_norm(mid, lw.gain3, cfg.norm_kind));
      break;
    case NormScheme::HuginnSandwich:
      mid = apply_norm(x + attn_out, lw.gain2, cfg.norm_kind);
      result.output = apply_norm(mid + mlp(apply_norm(mid, lw.gain3, cfg.norm_kind)), lw.gain4, cfg.norm_kind);
      break;
    case NormScheme::OuroSandwich:
      mid = x + apply_norm(attn_out, lw.gain2, cfg.norm_kind);
      result.output = mid + apply_norm(mlp(apply_norm(mid, lw.gain3, cfg.norm_kind)), lw.gain4, cfg.norm_kind);
      break;
  }
  if (!result.output.allFinite()) throw DivergedForwardError(layer, -1);
  return result;
}

namespace {

void record_block(Trace& tr, int slot, BlockResult&& res) {
  if (tr.capture.residuals) tr.residuals[static_cast<std::size_t>(slot)] = std::move(res.output);
  if (tr.capture.attentions) tr.attentions[static_cast<std::size_t>(slot)] = std::move(res.attention);
  if (tr.capture.attention_inputs)
    tr.attention_inputs[static_cast<std::size_t>(slot)] = std::move(res.attn_input);
}

}  // namespace

Trace run_recurrent(const Eigen::Ref<const MatrixXd>& input, const ModelWeights& weights,
                    const RunOptions& opts) {
  const ModelConfig& cfg = weights.config;
  cfg.validate();
  if (opts.loops < 1) throw std::invalid_argument("run_recurrent: loops must be >= 1");
  if (input.rows() < 1) throw std::invalid_argument("run_recurrent: empty input");
  if (input.cols() != cfg.d_model) throw std::invalid_argument("run_recurrent: input width must be d_model");
  if (cfg.input_injection && !weights.w_inject)
    throw std::invalid_argument("run_recurrent: config requires W_I but weights lack it");

  const int p = cfg.prelude_layers;
  const int k = cfg.recurrent_layers;
  const int c = cfg.coda_layers;

  Trace tr;
  tr.config = cfg;
  tr.loops = opts.loops;
  tr.capture = opts.capture;
  tr.embedding_state = input;
  const int n_blocks = tr.n_blocks();
  if (tr.capture.residuals) tr.residuals.resize(static_cast<std::size_t>(n_blocks));
  if (tr.capture.attentions) tr.attentions.resize(static_cast<std::size_t>(n_blocks));
  if (tr.capture.attention_inputs) tr.attention_inputs.resize(static_cast<std::size_t>(n_blocks));

  MatrixXd state = input;
  for (int lp = 0; lp < p; ++lp) {
    BlockResult res = block_forward(state, lp, weights);
    state = res.output;
    record_block(tr, lp, std::move(res));
  }

  const MatrixXd injected = state;  // prelude output, re-injected every recurrence
  MatrixXd carried;
  if (cfg.input_injection) {
    GaussianRng z0(opts.z0_seed);
    carried = z0.matrix(static_cast<int>(input.rows()), cfg.d_model, cfg.injection_sigma);
  } else {
    carried = state;
  }

  for (int r = 0; r < opts.loops; ++r) {
    if (cfg.input_injection) {
      MatrixXd concat(input.rows(), 2 * cfg.d_model);
      concat << injected, carried;
      state = concat * (*weights.w_inject);
    } else {
      state = carried;
    }
    for (int j = 0; j < k; ++j) {
      try {
        BlockResult res = block_forward(state, p + j, weights);
        state = res.output;
        if (cfg.norm_scheme == NormScheme::OuroSandwich && j == k - 1) {
          // Ouro normalizes the residual stream at the end of every loop; the
          // recorded state is what the next recurrence actually consumes.
          state = apply_norm(state, weights.loop_norm_gain, cfg.norm_kind);
          res.output = state;
        }
        record_block(tr, tr.recurrent_slot(j, r), std::move(res));
      } catch (DivergedForwardError& e) {
        throw DivergedForwardError(e.layer, r);
      }
    }
    carried = state;
  }

  for (int q = 0; q < c; ++q) {
    BlockResult res = block_forward(state, p + k + q, weights);
    state = res.output;
    record_block(tr, p + opts.loops * k + q, std::move(res));
  }
  return tr;
}

ModelWeights ablate_mlp(const ModelWeights& weights, int layer) {
  if (layer < 0 || layer >= weights.config.total_layers())
    throw std::out_of_range("ablate_mlp: layer out of range");
  ModelWeights out = weights;
  out.layers[static_cast<std::size_t>(layer)].mlp_out.setZero();
  return out;
}

MatrixXd embed_tokens(const std::vector<int>& ids, const Eigen::Ref<const MatrixXd>& table) {
  MatrixXd out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= table.rows())
      throw std::out_of_range("embed_tokens: token id " + std::to_string(ids[t]) + " outside vocabulary");
    out.row(static_cast<Eigen::Index>(t)) = table.row(ids[t]);
  }
  return out;
}

}  // namespace looplens
