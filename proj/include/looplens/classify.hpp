#pragma once

#include "looplens/model.hpp"

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace looplens {

enum class LabelKind { FixedPoint, Orbit, Slider, Unknown };
enum class SeriesKind { Similarity, Norm };

std::string to_string(LabelKind k);
std::string to_string(SeriesKind k);
SeriesKind series_kind_from_string(const std::string& s);

/// Limiting-behavior label for one per-token series. freq/amp are set for
/// orbits, slope for sliders.
struct SeriesLabel {
  LabelKind kind = LabelKind::Unknown;
  std::optional<double> freq;   // cycles per step, in (0, 0.5]
  std::optional<double> amp;    // >= 0
  std::optional<double> slope;
};

struct ClassifierParams {
  double tau = 0.05;
  double rho = 0.9;
  SeriesKind series_kind = SeriesKind::Similarity;
  void validate() const;
};

struct Detrended {
  std::vector<double> residual;
  double slope = 0.0;
  double intercept = 0.0;
};

// Least-squares line over t = 0..n-1, subtracted from the series.
Detrended detrend_linear(const std::vector<double>& s);

// w_i = 0.5 * (1 - cos(2*pi*i/(n-1))); endpoints zero, symmetric.
std::vector<double> hann_window(int n);

// First-match cascade: FixedPoint when at least rho*n points sit within tau
// of the limit, else Orbit from the dominant Hann-windowed spectral bin when
// its corrected amplitude reaches tau/2 with at least two full cycles, else
// Slider when the linear-fit slope exceeds tau/n, else Unknown. Minimum
// series length 8.
SeriesLabel classify_series(const std::vector<double>& s, const ClassifierParams& params);

// Cosine similarity of one token's final-recurrent-layer state at recurrence
// r (1..loops-1) against its state at the last recurrence. Needs >= 9 loops,
// yielding a series of length loops-1.
std::vector<double> build_token_series(const Trace& trace, int token);

// Same series at an arbitrary recurrent layer (for per-layer co-occurrence).
std::vector<double> token_series_at_layer(const Trace& trace, int token, int layer_in_block);

/// Corpus statistics over a [example][token][layer] label grid. Fractions and
/// incidence are over the last layer's label per token; co-occurrence treats
/// a kind as present when any layer exhibits it.
struct LabelStatistics {
  std::array<double, 4> kind_fraction{};     // indexed by LabelKind
  double non_fixed_point_fraction = 0.0;
  std::array<double, 4> example_incidence{}; // fraction of examples with >=1 such token
  // co_occurrence[a][b] = P(kind a at some layer | kind b at some layer)
  std::array<std::array<double, 4>, 4> co_occurrence{};
  std::array<std::array<bool, 4>, 4> co_occurrence_defined{};
  std::size_t tokens = 0;
  std::size_t examples = 0;
};

using LabelGrid = std::vector<std::vector<std::vector<SeriesLabel>>>;

LabelStatistics label_statistics(const LabelGrid& labels);

// CSV columns: example,token,layer,kind,freq,amp,slope
void write_labels_csv(std::ostream& os, const LabelGrid& labels);
// JSON keys mirror the reporting convention: "Non-Fixed-Point %", "Orbit %",
// "Slider %", "Unknown %", plus incidence and co-occurrence blocks.
std::string statistics_to_json(const LabelStatistics& stats);

}  // namespace looplens
