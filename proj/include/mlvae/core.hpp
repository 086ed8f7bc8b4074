#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mlvae {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InfeasibleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// The phoneme set: symbol table plus the frequency prior p(y) used by the
// decoder's likelihood ratios and the categorical prior zeta for the
// generative draw of per-frame phonemes.
struct PhonemeInventory {
  std::vector<std::string> symbols;
  Vector prior;
  Vector zeta;

  int size() const { return static_cast<int>(symbols.size()); }
  int index_of(std::string_view s) const;
  void validate() const;
};

// Per-frame segment-start indicators. b[0] is always set; the number of set
// bits is the number of segments.
struct BoundarySeq {
  std::vector<uint8_t> b;

  int frames() const { return static_cast<int>(b.size()); }
  int segments() const;
  void validate() const;
};

// Per-frame mismatch indicators, constant within the segments induced by a
// paired BoundarySeq.
struct CorrectnessSeq {
  std::vector<uint8_t> pi;

  int frames() const { return static_cast<int>(pi.size()); }
  void validate_with(const BoundarySeq& b) const;
};

// Half-open frame interval [start, end).
struct Segment {
  int start = 0;
  int end = 0;
  int length() const { return end - start; }
  bool operator==(const Segment&) const = default;
};

struct UtteranceTruth {
  std::vector<int> pronounced;
  std::vector<int> boundaries;  // start frame of each segment
  std::vector<uint8_t> mismatch;
};

struct Utterance {
  std::string id;
  Matrix x;            // frames x feature dim
  std::vector<int> c;  // canonical phoneme indices
  std::optional<UtteranceTruth> truth;

  int frames() const { return static_cast<int>(x.rows()); }
  int labels() const { return static_cast<int>(c.size()); }
  int feat_dim() const { return static_cast<int>(x.cols()); }
  void validate(int inventory_size) const;
};

// Hard per-frame latent assignments produced by the E-step.
struct LatentAssignment {
  std::vector<int> y;
  BoundarySeq b;
  CorrectnessSeq pi;
};

struct SegmentLabel {
  int phoneme = 0;
  bool mismatch = false;
  int start = 0;
  int end = 0;
};

struct LocalizationResult {
  std::vector<SegmentLabel> segments;
  double log_score = 0.0;

  int labels() const { return static_cast<int>(segments.size()); }
  void validate(int frames) const;
  // Per-frame labels; mismatched segments carry a trailing star.
  std::vector<std::string> frame_labels(const PhonemeInventory& inv) const;
};

struct Priors {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma_pi = 0.15;
  void validate() const;
};

std::vector<Segment> boundaries_to_segments(const BoundarySeq& b);
BoundarySeq segments_to_boundaries(const std::vector<Segment>& segs);

// Expands a segment-level label sequence to frame level.
std::vector<int> expand_phonemes(const std::vector<int>& c, const BoundarySeq& b);

// Flat-start split: L segments whose lengths differ by at most one frame,
// longer segments first.
BoundarySeq uniform_alignment(int frames, int segments);

}  // namespace mlvae
