#include "mlvae/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace mlvae {
namespace {

using nlohmann::json;

std::vector<Segment> truth_segments(const Utterance& truth) {
  const auto& b = truth.truth->boundaries;
  const int L = truth.labels();
  std::vector<Segment> segs(L);
  for (int l = 0; l < L; ++l) {
    segs[l].start = b[l];
    segs[l].end = (l + 1 < L) ? b[l + 1] : truth.frames();
  }
  return segs;
}

void require_comparable(const LocalizationResult& pred,
                        const Utterance& truth) {
  if (!truth.truth)
    throw ValidationError(truth.id + ": scoring needs ground truth");
  if (pred.labels() != truth.labels())
    throw ValidationError(truth.id + ": prediction and truth label counts differ");
}

json score_fields(const ConfusionCounts& c, const MismatchMetrics& m,
                  double align, double bacc) {
  json j;
  j["tp"] = c.tp;
  j["fp"] = c.fp;
  j["fn"] = c.fn;
  j["tn"] = c.tn;
  j["tp_ml"] = c.tp_ml;
  j["pr_ml"] = m.pr_ml;
  j["re_ml"] = m.re_ml;
  j["f1_ml"] = m.f1_ml;
  j["alignment_avg_iou"] = align;
  j["boundary_accuracy"] = bacc;
  return j;
}

}  // namespace

ConfusionCounts& ConfusionCounts::operator+=(const ConfusionCounts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  tn += o.tn;
  tp_ml += o.tp_ml;
  return *this;
}

void ConfusionCounts::validate() const {
  if (tp < 0 || fp < 0 || fn < 0 || tn < 0)
    throw ValidationError("negative confusion counts");
  if (tp_ml < 0.0 || tp_ml > static_cast<double>(tp) + 1e-12)
    throw ValidationError("TP_ML must lie in [0, TP]");
}

MismatchMetrics metrics_from(const ConfusionCounts& c) {
  MismatchMetrics m;
  const long pdenom = c.tp + c.fp;
  const long rdenom = c.tp + c.fn;
  m.pr_ml = pdenom == 0 ? 0.0 : c.tp_ml / pdenom;
  m.re_ml = rdenom == 0 ? 0.0 : c.tp_ml / rdenom;
  const double s = m.pr_ml + m.re_ml;
  m.f1_ml = s == 0.0 ? 0.0 : 2.0 * m.pr_ml * m.re_ml / s;
  return m;
}

double iou(Segment a, Segment b) {
  if (a.length() <= 0 || b.length() <= 0)
    throw ValidationError("iou of an empty interval");
  const int inter = std::min(a.end, b.end) - std::max(a.start, b.start);
  if (inter <= 0) return 0.0;
  const int uni = std::max(a.end, b.end) - std::min(a.start, b.start);
  return static_cast<double>(inter) / uni;
}

UtteranceScore score_utterance(const LocalizationResult& pred,
                               const Utterance& truth, int boundary_tol) {
  require_comparable(pred, truth);
  const auto tsegs = truth_segments(truth);
  const int L = truth.labels();

  UtteranceScore s;
  s.id = truth.id;
  s.labels = L;
  for (int l = 0; l < L; ++l) {
    const Segment pseg{pred.segments[l].start, pred.segments[l].end};
    const bool pm = pred.segments[l].mismatch;
    const bool tm = truth.truth->mismatch[l] != 0;
    const double overlap = iou(pseg, tsegs[l]);
    s.align_iou_sum += overlap;
    if (pm && tm) {
      ++s.counts.tp;
      s.counts.tp_ml += overlap;
    } else if (pm) {
      ++s.counts.fp;
    } else if (tm) {
      ++s.counts.fn;
    } else {
      ++s.counts.tn;
    }
    if (l >= 1) {
      ++s.boundary_total;
      if (std::abs(pseg.start - tsegs[l].start) <= boundary_tol)
        ++s.boundary_hits;
    }
  }
  s.counts.validate();
  return s;
}

ConfusionCounts score_localization(const LocalizationResult& pred,
                                   const Utterance& truth) {
  return score_utterance(pred, truth).counts;
}

double alignment_avg_iou(const LocalizationResult& pred,
                         const Utterance& truth) {
  require_comparable(pred, truth);
  const auto tsegs = truth_segments(truth);
  double sum = 0.0;
  for (int l = 0; l < truth.labels(); ++l)
    sum += iou({pred.segments[l].start, pred.segments[l].end}, tsegs[l]);
  return sum / truth.labels();
}

double boundary_accuracy(const LocalizationResult& pred,
                         const Utterance& truth, int tol) {
  UtteranceScore s = score_utterance(pred, truth, tol);
  return s.boundary_accuracy();
}

CorpusScore aggregate(const std::vector<UtteranceScore>& scores) {
  if (scores.empty()) throw ValidationError("aggregate needs at least one utterance");
  CorpusScore c;
  long hits = 0, totals = 0;
  double iou_sum = 0.0;
  for (const UtteranceScore& s : scores) {
    c.counts += s.counts;
    iou_sum += s.align_iou_sum;
    hits += s.boundary_hits;
    totals += s.boundary_total;
    c.labels += s.labels;
    ++c.utterances;
  }
  c.metrics = metrics_from(c.counts);
  c.alignment_avg_iou = c.labels == 0 ? 0.0 : iou_sum / c.labels;
  c.boundary_accuracy =
      totals == 0 ? 1.0 : static_cast<double>(hits) / totals;
  return c;
}

std::string report_json(const std::vector<UtteranceScore>& scores) {
  const CorpusScore c = aggregate(scores);
  json doc;
  doc["schema_version"] = 1;
  json corpus = score_fields(c.counts, c.metrics, c.alignment_avg_iou,
                             c.boundary_accuracy);
  corpus["utterances"] = c.utterances;
  corpus["labels"] = c.labels;
  doc["corpus"] = corpus;

  json utts = json::array();
  for (const UtteranceScore& s : scores) {
    json j = score_fields(s.counts, s.metrics(), s.alignment_avg_iou(),
                          s.boundary_accuracy());
    j["id"] = s.id;
    j["labels"] = s.labels;
    utts.push_back(std::move(j));
  }
  doc["utterances"] = utts;
  return doc.dump(2) + "\n";
}

}  // namespace mlvae
