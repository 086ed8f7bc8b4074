#pragma once

#include <string>
#include <vector>

#include "mlvae/core.hpp"

namespace mlvae {

struct ConfusionCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;
  long tn = 0;
  double tp_ml = 0.0;  // sum of IoUs over true-positive positions

  ConfusionCounts& operator+=(const ConfusionCounts& o);
  void validate() const;
};

struct MismatchMetrics {
  double pr_ml = 0.0;
  double re_ml = 0.0;
  double f1_ml = 0.0;
};

// IoU-weighted precision/recall/F1. Every 0/0 ratio is 0, never NaN.
MismatchMetrics metrics_from(const ConfusionCounts& c);

// Intersection over union of half-open frame intervals; 0 when disjoint.
double iou(Segment a, Segment b);

struct UtteranceScore {
  std::string id;
  ConfusionCounts counts;
  double align_iou_sum = 0.0;  // per-position alignment IoUs, summed
  long boundary_hits = 0;      // interior segment starts within tolerance
  long boundary_total = 0;
  long labels = 0;

  MismatchMetrics metrics() const { return metrics_from(counts); }
  double alignment_avg_iou() const {
    return labels == 0 ? 0.0 : align_iou_sum / labels;
  }
  double boundary_accuracy() const {
    return boundary_total == 0
               ? 1.0
               : static_cast<double>(boundary_hits) / boundary_total;
  }
};

// Classification is positional: prediction and truth share the canonical
// label sequence, so position l in one is compared with position l in the
// other. TP when both flag a mismatch, FP when only the prediction does,
// FN when only the truth does.
constexpr int kBoundaryTolerance = 2;
UtteranceScore score_utterance(const LocalizationResult& pred,
                               const Utterance& truth,
                               int boundary_tol = kBoundaryTolerance);

ConfusionCounts score_localization(const LocalizationResult& pred,
                                   const Utterance& truth);

// Mean over canonical positions of iou(pred segment l, truth segment l).
double alignment_avg_iou(const LocalizationResult& pred,
                         const Utterance& truth);

// Fraction of interior truth boundaries whose predicted segment start lands
// within tol frames. Vacuously 1 for single-segment utterances.
double boundary_accuracy(const LocalizationResult& pred,
                         const Utterance& truth,
                         int tol = kBoundaryTolerance);

struct CorpusScore {
  ConfusionCounts counts;
  MismatchMetrics metrics;
  double alignment_avg_iou = 0.0;
  double boundary_accuracy = 0.0;
  long utterances = 0;
  long labels = 0;
};

// Micro-average: counts and TP_ML are summed across the corpus before the
// ratios are formed; alignment IoU is averaged over all labels.
CorpusScore aggregate(const std::vector<UtteranceScore>& scores);

// Serialized JSON report with corpus-level and per-utterance fields.
std::string report_json(const std::vector<UtteranceScore>& scores);

}  // namespace mlvae
