#pragma once

#include <string>

#include "mlvae/models.hpp"

namespace mlvae {

// Arc kinds of the per-phoneme acceptor. Emit, EmitMismatch, and Hold consume
// one frame; R, W, and Shift are structural.
enum class ArcKind { R, W, Emit, EmitMismatch, Hold, Shift };

struct FsaArc {
  int from = 0;
  int to = 0;
  ArcKind kind = ArcKind::R;
  int phoneme = -1;  // set on Emit/EmitMismatch arcs
};

// Six-state acceptor for one canonical phoneme: a correct lane (R then the
// phoneme emission) and a mismatch lane (W then the starred emission), each
// with a Hold self-loop and a Shift exit to the final state.
struct PhonemeFsa {
  int phoneme = 0;
  std::vector<FsaArc> arcs;  // states numbered 0..5, 0 initial, 5 accepting

  static PhonemeFsa make(int phoneme);
  void validate() const;
};

// Concatenation of per-phoneme acceptors: the accepting state of label l is
// the initial state of label l+1. States for label l live at offset 5l.
struct SentenceFsa {
  std::vector<int> labels;
  bool single_path = false;  // mismatch lanes removed
  std::vector<FsaArc> arcs;

  int n_states() const { return 5 * static_cast<int>(labels.size()) + 1; }
  int accepting() const { return 5 * static_cast<int>(labels.size()); }
  void validate() const;
  // Number of accepted (segmentation, lane) assignments for a given frame
  // count; exponential objects, so only sensible for small inputs.
  unsigned long long count_accepted(int frames) const;
};

SentenceFsa build_sentence_fsa(const std::vector<int>& c);
SentenceFsa build_single_path_fsa(const std::vector<int>& c);

// Per-frame log-weights the decoder consumes. Emission rows are likelihood
// ratios against the canonical prior; transition vectors come from the
// boundary posterior; the advance columns add the correctness posterior
// evaluated at the segment-start frame.
struct FrameScores {
  std::vector<int> c;    // canonical labels the columns refer to
  Matrix emit_correct;   // T x L: ln q(y=c_l|x) - ln p(c_l)
  Matrix emit_mismatch;  // T x L: ln(1-q) - ln(1-p)
  Vector stay;           // T: ln q(b=0|x)
  Vector advance;        // T: ln q(b=1|x)
  Matrix adv_correct;    // T x L: ln q(pi=0|x, y=c_l)
  Matrix adv_mismatch;   // T x L: ln q(pi=1|x, y=c_l)

  int frames() const { return static_cast<int>(stay.size()); }
  int labels() const { return static_cast<int>(c.size()); }
  void validate() const;
};

// Assembles scores from raw posterior matrices; probabilities are floored at
// kProbFloor before taking logs. qpi column l holds q(pi=1 | y = c_l).
FrameScores frame_scores_from(const Matrix& qy, const Vector& qb,
                              const Matrix& qpi, const std::vector<int>& c,
                              const Vector& prior);

// Scores from the trained submodels for one utterance.
FrameScores frame_scores(Model& m, const Utterance& utt);

struct BestPath {
  BoundarySeq b;
  CorrectnessSeq pi;          // per frame, constant within segments
  std::vector<int> y;         // canonical labels expanded per frame
  std::vector<uint8_t> mode;  // per label: 1 = mismatch lane
  double log_score = 0.0;
};

// Exact MAP decode over (segmentation, lane) assignments. Frame 0 always
// starts the first segment and carries no boundary factor. Ties prefer the
// correct lane, then later boundaries.
BestPath best_path(const FrameScores& s);

// Boundary-only decode over the single-path acceptor (no lane choice, no
// correctness weights).
BoundarySeq forced_align(const FrameScores& s);

// Two-stage decode: boundaries from forced_align, then each segment's lane
// chosen by comparing the prior-weighted emission products.
BestPath separate_estimate(const FrameScores& s, double gamma_pi);

// One row per frame: t, label index, lane, cumulative log-score.
std::string format_path(const BestPath& bp, const FrameScores& s);

// Segment labels from a decoded path; mode picks each label's mismatch flag.
LocalizationResult result_from_path(const BestPath& bp);

LocalizationResult mlvae_localize(Model& m, const Utterance& utt);

// Forced alignment of the canonical sequence with every label reported
// correct; localization recall is zero by construction.
LocalizationResult fa_localize(Model& m, const Utterance& utt);

// Greedy frame recognition, repeat collapse, edit-distance alignment to the
// canonical sequence; substituted and deleted positions are flagged.
LocalizationResult two_pass_localize(Model& m, const Utterance& utt);
LocalizationResult two_pass_from(const Matrix& qy, const Vector& qb,
                                 const std::vector<int>& c,
                                 const Vector& prior);

std::vector<int> collapse_repeats(const std::vector<int>& frame_labels);

}  // namespace mlvae
