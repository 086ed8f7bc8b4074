#include "mlvae/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <tuple>

namespace mlvae {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kCorrect = 0;
constexpr int kMismatch = 1;

enum Back : uint8_t {
  kFromStay = 0,
  kFromAdvCorrect = 1,
  kFromAdvMismatch = 2,
  kNone = 3
};

int consumes(ArcKind k) {
  return (k == ArcKind::Emit || k == ArcKind::EmitMismatch ||
          k == ArcKind::Hold)
             ? 1
             : 0;
}

double floored_log(double p) { return std::log(std::max(p, kProbFloor)); }

std::vector<std::tuple<int, int, int, int>> arc_key(
    const std::vector<FsaArc>& arcs) {
  std::vector<std::tuple<int, int, int, int>> key;
  key.reserve(arcs.size());
  for (const FsaArc& a : arcs)
    key.emplace_back(a.from, a.to, static_cast<int>(a.kind), a.phoneme);
  std::sort(key.begin(), key.end());
  return key;
}

struct AlignResult {
  BoundarySeq b;
  double score = 0.0;
};

// Boundary-only decode over one emission lane: frame 0 starts segment 0, each
// later frame either extends the segment or advances to the next label. Ties
// prefer the advance, pushing boundaries late.
AlignResult align_lane(const Matrix& emit, const Vector& stay,
                       const Vector& advance) {
  const int t_n = static_cast<int>(emit.rows());
  const int l_n = static_cast<int>(emit.cols());
  if (l_n < 1) throw ValidationError("no labels to align");
  if (t_n < l_n) throw InfeasibleError("need at least one frame per label");

  Matrix score = Matrix::Constant(t_n, l_n, kNegInf);
  std::vector<uint8_t> back(static_cast<size_t>(t_n) * l_n, kNone);
  score(0, 0) = emit(0, 0);
  for (int t = 1; t < t_n; ++t) {
    const int lmin = std::max(0, l_n - (t_n - t));
    const int lmax = std::min(t, l_n - 1);
    for (int l = lmin; l <= lmax; ++l) {
      double best = kNegInf;
      uint8_t who = kNone;
      if (l >= 1) {
        best = score(t - 1, l - 1) + advance[t];
        who = kFromAdvCorrect;
      }
      const double st = score(t - 1, l) + stay[t];
      if (st > best) {
        best = st;
        who = kFromStay;
      }
      score(t, l) = best + emit(t, l);
      back[static_cast<size_t>(t) * l_n + l] = who;
    }
  }

  AlignResult out;
  out.score = score(t_n - 1, l_n - 1);
  out.b.b.assign(t_n, 0);
  int t = t_n - 1, l = l_n - 1;
  while (t > 0) {
    if (back[static_cast<size_t>(t) * l_n + l] == kFromStay) {
      --t;
    } else {
      out.b.b[t] = 1;
      --l;
      --t;
    }
  }
  out.b.b[0] = 1;
  out.b.validate();
  return out;
}

// Minimum edit distance alignment; per canonical position, the matched
// recognized index (-1 when deleted) and whether it was substituted.
void edit_align(const std::vector<int>& ref, const std::vector<int>& hyp,
                std::vector<int>& match, std::vector<uint8_t>& subst) {
  const int n = static_cast<int>(ref.size());
  const int r = static_cast<int>(hyp.size());
  std::vector<std::vector<int>> d(n + 1, std::vector<int>(r + 1, 0));
  for (int i = 0; i <= n; ++i) d[i][0] = i;
  for (int j = 0; j <= r; ++j) d[0][j] = j;
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= r; ++j) {
      const int sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      d[i][j] = std::min({sub, d[i - 1][j] + 1, d[i][j - 1] + 1});
    }

  match.assign(n, -1);
  subst.assign(n, 0);
  int i = n, j = r;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        d[i][j] == d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      match[i - 1] = j - 1;
      subst[i - 1] = ref[i - 1] == hyp[j - 1] ? 0 : 1;
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      match[i - 1] = -1;
      --i;
    } else {
      --j;
    }
  }
}

}  // namespace

LocalizationResult result_from_path(const BestPath& bp) {
  LocalizationResult out;
  out.log_score = bp.log_score;
  std::vector<Segment> segs = boundaries_to_segments(bp.b);
  for (size_t l = 0; l < segs.size(); ++l)
    out.segments.push_back({bp.y[segs[l].start], bp.mode[l] != 0,
                            segs[l].start, segs[l].end});
  return out;
}

PhonemeFsa PhonemeFsa::make(int phoneme) {
  PhonemeFsa f;
  f.phoneme = phoneme;
  f.arcs = {
      {0, 1, ArcKind::R, -1},
      {1, 2, ArcKind::Emit, phoneme},
      {2, 2, ArcKind::Hold, -1},
      {2, 5, ArcKind::Shift, -1},
      {0, 3, ArcKind::W, -1},
      {3, 4, ArcKind::EmitMismatch, phoneme},
      {4, 4, ArcKind::Hold, -1},
      {4, 5, ArcKind::Shift, -1},
  };
  return f;
}

void PhonemeFsa::validate() const {
  if (arc_key(arcs) != arc_key(make(phoneme).arcs))
    throw ValidationError("phoneme acceptor structure is wrong");
}

void SentenceFsa::validate() const {
  if (labels.empty()) throw ValidationError("sentence acceptor needs labels");
  const SentenceFsa want = single_path ? build_single_path_fsa(labels)
                                       : build_sentence_fsa(labels);
  if (arc_key(arcs) != arc_key(want.arcs))
    throw ValidationError("sentence acceptor structure is wrong");
}

unsigned long long SentenceFsa::count_accepted(int frames) const {
  if (frames < 0) throw ValidationError("negative frame count");
  const int ns = n_states();
  std::vector<std::vector<FsaArc>> out_arcs(ns);
  for (const FsaArc& a : arcs) out_arcs[a.from].push_back(a);

  // ways[s][t]: accepted completions from state s consuming t frames.
  // Structural arcs always move to a higher state id, so a descending state
  // sweep sees their targets first.
  std::vector<std::vector<unsigned long long>> ways(
      ns, std::vector<unsigned long long>(frames + 1, 0));
  for (int t = 0; t <= frames; ++t) {
    for (int s = ns - 1; s >= 0; --s) {
      unsigned long long acc = (s == accepting() && t == 0) ? 1 : 0;
      for (const FsaArc& a : out_arcs[s]) {
        const int use = consumes(a.kind);
        if (t >= use) acc += ways[a.to][t - use];
      }
      ways[s][t] += acc;
    }
  }
  return ways[0][frames];
}

SentenceFsa build_sentence_fsa(const std::vector<int>& c) {
  if (c.empty()) throw ValidationError("empty canonical sequence");
  SentenceFsa f;
  f.labels = c;
  for (size_t l = 0; l < c.size(); ++l) {
    const int off = 5 * static_cast<int>(l);
    for (FsaArc a : PhonemeFsa::make(c[l]).arcs) {
      a.from += off;
      a.to += off;
      f.arcs.push_back(a);
    }
  }
  return f;
}

SentenceFsa build_single_path_fsa(const std::vector<int>& c) {
  if (c.empty()) throw ValidationError("empty canonical sequence");
  SentenceFsa f;
  f.labels = c;
  f.single_path = true;
  for (size_t l = 0; l < c.size(); ++l) {
    const int off = 5 * static_cast<int>(l);
    for (FsaArc a : PhonemeFsa::make(c[l]).arcs) {
      // drop the whole mismatch lane
      if (a.kind == ArcKind::W || a.kind == ArcKind::EmitMismatch ||
          a.from == 4)
        continue;
      a.from += off;
      a.to += off;
      f.arcs.push_back(a);
    }
  }
  return f;
}

void FrameScores::validate() const {
  const Eigen::Index t_n = stay.size();
  const Eigen::Index l_n = static_cast<Eigen::Index>(c.size());
  if (t_n < 1) throw ValidationError("scores need at least one frame");
  if (l_n < 1) throw ValidationError("scores need at least one label");
  if (emit_correct.rows() != t_n || emit_mismatch.rows() != t_n ||
      adv_correct.rows() != t_n || adv_mismatch.rows() != t_n ||
      advance.size() != t_n)
    throw ValidationError("score row counts disagree");
  if (emit_correct.cols() != l_n || emit_mismatch.cols() != l_n ||
      adv_correct.cols() != l_n || adv_mismatch.cols() != l_n)
    throw ValidationError("score column counts disagree");
}

FrameScores frame_scores_from(const Matrix& qy, const Vector& qb,
                              const Matrix& qpi, const std::vector<int>& c,
                              const Vector& prior) {
  if (c.empty()) throw ValidationError("empty canonical sequence");
  const Eigen::Index t_n = qy.rows();
  const Eigen::Index l_n = static_cast<Eigen::Index>(c.size());
  if (qb.size() != t_n || qpi.rows() != t_n)
    throw ValidationError("posterior row counts disagree");
  if (qpi.cols() != l_n)
    throw ValidationError("correctness posterior needs one column per label");
  if (prior.size() != qy.cols())
    throw ValidationError("prior size disagrees with the posterior");

  FrameScores s;
  s.c = c;
  s.emit_correct.resize(t_n, l_n);
  s.emit_mismatch.resize(t_n, l_n);
  s.adv_correct.resize(t_n, l_n);
  s.adv_mismatch.resize(t_n, l_n);
  s.stay.resize(t_n);
  s.advance.resize(t_n);
  for (Eigen::Index l = 0; l < l_n; ++l) {
    const int j = c[l];
    if (j < 0 || j >= qy.cols())
      throw ValidationError("canonical label out of range");
    const double lp = floored_log(prior[j]);
    const double lq = floored_log(1.0 - prior[j]);
    for (Eigen::Index t = 0; t < t_n; ++t) {
      s.emit_correct(t, l) = floored_log(qy(t, j)) - lp;
      s.emit_mismatch(t, l) = floored_log(1.0 - qy(t, j)) - lq;
      s.adv_correct(t, l) = floored_log(1.0 - qpi(t, l));
      s.adv_mismatch(t, l) = floored_log(qpi(t, l));
    }
  }
  for (Eigen::Index t = 0; t < t_n; ++t) {
    s.stay[t] = floored_log(1.0 - qb[t]);
    s.advance[t] = floored_log(qb[t]);
  }
  return s;
}

FrameScores frame_scores(Model& m, const Utterance& utt) {
  const Matrix xwin = m.embed(utt.x);
  Matrix qy = phoneme_posterior(m.fp, xwin);
  BoundaryPosterior bp = boundary_posterior(m.fb, xwin);
  Matrix qpi =
      correctness_posterior_multi(m.fh, xwin, utt.c, m.priors.gamma_pi);
  return frame_scores_from(qy, bp.qb, qpi, utt.c, m.inv.prior);
}

BestPath best_path(const FrameScores& s) {
  s.validate();
  const int t_n = s.frames();
  const int l_n = s.labels();
  if (t_n < l_n) throw InfeasibleError("need at least one frame per label");

  auto at = [l_n](int t, int l, int m) {
    return (static_cast<size_t>(t) * l_n + l) * 2 + m;
  };
  std::vector<double> score(static_cast<size_t>(t_n) * l_n * 2, kNegInf);
  std::vector<uint8_t> back(score.size(), kNone);

  for (int m = 0; m < 2; ++m) {
    const Matrix& e = m == kCorrect ? s.emit_correct : s.emit_mismatch;
    const Matrix& ap = m == kCorrect ? s.adv_correct : s.adv_mismatch;
    score[at(0, 0, m)] = e(0, 0) + ap(0, 0);
  }
  for (int t = 1; t < t_n; ++t) {
    const int lmin = std::max(0, l_n - (t_n - t));
    const int lmax = std::min(t, l_n - 1);
    for (int l = lmin; l <= lmax; ++l) {
      for (int m = 0; m < 2; ++m) {
        const Matrix& e = m == kCorrect ? s.emit_correct : s.emit_mismatch;
        const Matrix& ap = m == kCorrect ? s.adv_correct : s.adv_mismatch;
        double best = kNegInf;
        uint8_t who = kNone;
        if (l >= 1) {
          const double in = s.advance[t] + ap(t, l);
          best = score[at(t - 1, l - 1, kCorrect)] + in;
          who = kFromAdvCorrect;
          const double am = score[at(t - 1, l - 1, kMismatch)] + in;
          if (am > best) {
            best = am;
            who = kFromAdvMismatch;
          }
        }
        const double st = score[at(t - 1, l, m)] + s.stay[t];
        if (st > best) {
          best = st;
          who = kFromStay;
        }
        score[at(t, l, m)] = best + e(t, l);
        back[at(t, l, m)] = who;
      }
    }
  }

  const int m_end =
      score[at(t_n - 1, l_n - 1, kCorrect)] >=
              score[at(t_n - 1, l_n - 1, kMismatch)]
          ? kCorrect
          : kMismatch;
  BestPath out;
  out.log_score = score[at(t_n - 1, l_n - 1, m_end)];
  out.b.b.assign(t_n, 0);
  out.pi.pi.assign(t_n, 0);
  out.y.assign(t_n, 0);
  out.mode.assign(l_n, 0);

  int t = t_n - 1, l = l_n - 1, m = m_end;
  while (true) {
    out.y[t] = s.c[l];
    out.pi.pi[t] = m == kMismatch ? 1 : 0;
    if (t == 0) {
      out.b.b[0] = 1;
      out.mode[0] = static_cast<uint8_t>(m);
      break;
    }
    const uint8_t w = back[at(t, l, m)];
    if (w == kFromStay) {
      --t;
    } else {
      out.b.b[t] = 1;
      out.mode[l] = static_cast<uint8_t>(m);
      m = w == kFromAdvCorrect ? kCorrect : kMismatch;
      --l;
      --t;
    }
  }
  out.b.validate();
  out.pi.validate_with(out.b);
  return out;
}

BoundarySeq forced_align(const FrameScores& s) {
  s.validate();
  return align_lane(s.emit_correct, s.stay, s.advance).b;
}

BestPath separate_estimate(const FrameScores& s, double gamma_pi) {
  s.validate();
  if (gamma_pi <= 0.0 || gamma_pi >= 1.0)
    throw ValidationError("mismatch prior must be inside (0,1)");
  AlignResult ar = align_lane(s.emit_correct, s.stay, s.advance);
  std::vector<Segment> segs = boundaries_to_segments(ar.b);
  const int t_n = s.frames();
  const int l_n = s.labels();

  BestPath out;
  out.b = ar.b;
  out.pi.pi.assign(t_n, 0);
  out.y.assign(t_n, 0);
  out.mode.assign(l_n, 0);
  // boundary factors only; lane scores added per segment below
  out.log_score = 0.0;
  for (int t = 1; t < t_n; ++t)
    out.log_score += ar.b.b[t] ? s.advance[t] : s.stay[t];

  for (int l = 0; l < l_n; ++l) {
    double s0 = std::log1p(-gamma_pi);
    double s1 = std::log(gamma_pi);
    for (int t = segs[l].start; t < segs[l].end; ++t) {
      s0 += s.emit_correct(t, l);
      s1 += s.emit_mismatch(t, l);
    }
    const bool mis = s1 > s0;
    out.mode[l] = mis ? 1 : 0;
    out.log_score += mis ? s1 : s0;
    for (int t = segs[l].start; t < segs[l].end; ++t) {
      out.y[t] = s.c[l];
      out.pi.pi[t] = mis ? 1 : 0;
    }
  }
  return out;
}

std::string format_path(const BestPath& bp, const FrameScores& s) {
  std::ostringstream os;
  os << "t\tlabel\tlane\tcumulative\n";
  double cum = 0.0;
  int l = -1;
  for (int t = 0; t < s.frames(); ++t) {
    if (bp.b.b[t]) {
      ++l;
      if (t > 0) cum += s.advance[t];
      cum += bp.mode[l] ? s.adv_mismatch(t, l) : s.adv_correct(t, l);
    } else {
      cum += s.stay[t];
    }
    cum += bp.mode[l] ? s.emit_mismatch(t, l) : s.emit_correct(t, l);
    os << t << '\t' << l << '\t' << (bp.mode[l] ? "mismatch" : "correct")
       << '\t' << std::setprecision(12) << cum << '\n';
  }
  return os.str();
}

LocalizationResult mlvae_localize(Model& m, const Utterance& utt) {
  FrameScores s = frame_scores(m, utt);
  return result_from_path(best_path(s));
}

LocalizationResult fa_localize(Model& m, const Utterance& utt) {
  FrameScores s = frame_scores(m, utt);
  AlignResult ar = align_lane(s.emit_correct, s.stay, s.advance);
  LocalizationResult out;
  out.log_score = ar.score;
  std::vector<Segment> segs = boundaries_to_segments(ar.b);
  for (size_t l = 0; l < segs.size(); ++l)
    out.segments.push_back({utt.c[l], false, segs[l].start, segs[l].end});
  return out;
}

std::vector<int> collapse_repeats(const std::vector<int>& frame_labels) {
  std::vector<int> out;
  for (int v : frame_labels)
    if (out.empty() || out.back() != v) out.push_back(v);
  return out;
}

LocalizationResult two_pass_from(const Matrix& qy, const Vector& qb,
                                 const std::vector<int>& c,
                                 const Vector& prior) {
  if (c.empty()) throw ValidationError("empty canonical sequence");
  const int t_n = static_cast<int>(qy.rows());
  const int l_n = static_cast<int>(c.size());
  std::vector<int> rec = collapse_repeats(argmax_rows(qy));

  LocalizationResult out;
  if (rec.empty()) {
    std::vector<Segment> segs = boundaries_to_segments(
        uniform_alignment(t_n, l_n));
    for (int l = 0; l < l_n; ++l)
      out.segments.push_back({c[l], true, segs[l].start, segs[l].end});
    return out;
  }

  const int r_n = static_cast<int>(rec.size());
  Matrix emit(t_n, r_n);
  for (int r = 0; r < r_n; ++r) {
    const double lp = floored_log(prior[rec[r]]);
    for (int t = 0; t < t_n; ++t)
      emit(t, r) = floored_log(qy(t, rec[r])) - lp;
  }
  Vector stay(t_n), advance(t_n);
  for (int t = 0; t < t_n; ++t) {
    stay[t] = floored_log(1.0 - qb[t]);
    advance[t] = floored_log(qb[t]);
  }
  AlignResult ar = align_lane(emit, stay, advance);
  std::vector<Segment> rsegs = boundaries_to_segments(ar.b);

  std::vector<int> match;
  std::vector<uint8_t> subst;
  edit_align(c, rec, match, subst);

  // recognized spans mapped onto canonical positions; deleted positions get
  // one-frame slots wedged right before the next anchored label, and a final
  // clamp keeps the starts strictly increasing and feasible
  std::vector<int> raw(l_n, 0);
  int next = t_n;
  for (int l = l_n - 1; l >= 0; --l) {
    raw[l] = match[l] >= 0 ? rsegs[match[l]].start : next - 1;
    next = raw[l];
  }
  std::vector<int> start(l_n, 0);
  for (int l = 1; l < l_n; ++l) {
    const int lo = start[l - 1] + 1;
    const int hi = t_n - (l_n - l);
    start[l] = std::clamp(raw[l], lo, hi);
  }
  out.log_score = ar.score;
  for (int l = 0; l < l_n; ++l) {
    const int end = l + 1 < l_n ? start[l + 1] : t_n;
    const bool mis = match[l] < 0 || subst[l] != 0;
    out.segments.push_back({c[l], mis, start[l], end});
  }
  out.validate(t_n);
  return out;
}

LocalizationResult two_pass_localize(Model& m, const Utterance& utt) {
  const Matrix xwin = m.embed(utt.x);
  Matrix qy = phoneme_posterior(m.fp, xwin);
  BoundaryPosterior bp = boundary_posterior(m.fb, xwin);
  return two_pass_from(qy, bp.qb, utt.c, m.inv.prior);
}

}  // namespace mlvae
