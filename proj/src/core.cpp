#include "mlvae/core.hpp"

#include <algorithm>
#include <cmath>

namespace mlvae {

int PhonemeInventory::index_of(std::string_view s) const {
  for (int i = 0; i < size(); ++i) {
    if (symbols[i] == s) return i;
  }
  return -1;
}

void PhonemeInventory::validate() const {
  const int n = size();
  if (n < 2) throw ValidationError("phoneme inventory needs at least 2 symbols");
  if (prior.size() != n || zeta.size() != n)
    throw ValidationError("inventory prior/zeta size mismatch");
  for (int i = 0; i < n; ++i) {
    if (symbols[i].empty()) throw ValidationError("empty phoneme symbol");
    for (int j = i + 1; j < n; ++j) {
      if (symbols[i] == symbols[j])
        throw ValidationError("duplicate phoneme symbol: " + symbols[i]);
    }
  }
  for (const Vector* v : {&prior, &zeta}) {
    if ((v->array() <= 0.0).any())
      throw ValidationError("inventory probabilities must be positive");
    if (std::abs(v->sum() - 1.0) > 1e-9)
      throw ValidationError("inventory probabilities must sum to 1");
  }
}

int BoundarySeq::segments() const {
  int n = 0;
  for (uint8_t v : b) n += (v != 0);
  return n;
}

void BoundarySeq::validate() const {
  if (b.empty()) throw ValidationError("boundary sequence is empty");
  if (!b[0]) throw ValidationError("first frame must start a segment");
}

void CorrectnessSeq::validate_with(const BoundarySeq& bnd) const {
  bnd.validate();
  if (frames() != bnd.frames())
    throw ValidationError("correctness/boundary length mismatch");
  for (int t = 1; t < frames(); ++t) {
    if (!bnd.b[t] && pi[t] != pi[t - 1])
      throw ValidationError("correctness changes inside a segment");
  }
}

void Utterance::validate(int inventory_size) const {
  const int t = frames();
  const int l = labels();
  if (l < 1) throw ValidationError(id + ": empty phoneme sequence");
  if (t < l) throw ValidationError(id + ": fewer frames than phonemes");
  for (int v : c) {
    if (v < 0 || v >= inventory_size)
      throw ValidationError(id + ": phoneme index out of range");
  }
  if (!x.allFinite()) throw ValidationError(id + ": non-finite features");
  if (truth) {
    if (static_cast<int>(truth->pronounced.size()) != l ||
        static_cast<int>(truth->boundaries.size()) != l ||
        static_cast<int>(truth->mismatch.size()) != l)
      throw ValidationError(id + ": truth arrays must have length L");
    if (truth->boundaries[0] != 0)
      throw ValidationError(id + ": first segment must start at frame 0");
    for (int i = 1; i < l; ++i) {
      if (truth->boundaries[i] <= truth->boundaries[i - 1])
        throw ValidationError(id + ": truth boundaries must be increasing");
    }
    if (truth->boundaries.back() >= t)
      throw ValidationError(id + ": truth boundary past the last frame");
    for (int i = 0; i < l; ++i) {
      int p = truth->pronounced[i];
      if (p < 0 || p >= inventory_size)
        throw ValidationError(id + ": pronounced index out of range");
      if ((p != c[i]) != (truth->mismatch[i] != 0))
        throw ValidationError(id + ": mismatch flag inconsistent with labels");
    }
  }
}

void LocalizationResult::validate(int frames) const {
  if (segments.empty()) throw ValidationError("localization has no segments");
  int cursor = 0;
  for (const SegmentLabel& s : segments) {
    if (s.start != cursor || s.end < s.start)
      throw ValidationError("localization segments must tile the utterance");
    cursor = s.end;
  }
  if (cursor != frames)
    throw ValidationError("localization segments must cover every frame");
}

std::vector<std::string> LocalizationResult::frame_labels(
    const PhonemeInventory& inv) const {
  std::vector<std::string> out;
  for (const SegmentLabel& s : segments) {
    std::string label = inv.symbols.at(s.phoneme);
    if (s.mismatch) label += "*";
    for (int t = s.start; t < s.end; ++t) out.push_back(label);
  }
  return out;
}

void Priors::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw ValidationError("boundary prior parameters must be positive");
  if (!(gamma_pi > 0.0) || !(gamma_pi < 1.0))
    throw ValidationError("mismatch prior must lie in (0, 1)");
}

std::vector<Segment> boundaries_to_segments(const BoundarySeq& bnd) {
  bnd.validate();
  std::vector<Segment> segs;
  const int t = bnd.frames();
  for (int i = 0; i < t; ++i) {
    if (bnd.b[i]) segs.push_back({i, t});
    if (bnd.b[i] && segs.size() > 1) segs[segs.size() - 2].end = i;
  }
  return segs;
}

BoundarySeq segments_to_boundaries(const std::vector<Segment>& segs) {
  if (segs.empty()) throw ValidationError("no segments");
  BoundarySeq bnd;
  bnd.b.assign(segs.back().end, 0);
  int cursor = 0;
  for (const Segment& s : segs) {
    if (s.start != cursor || s.end <= s.start)
      throw ValidationError("segments must be contiguous and non-empty");
    bnd.b[s.start] = 1;
    cursor = s.end;
  }
  bnd.validate();
  return bnd;
}

std::vector<int> expand_phonemes(const std::vector<int>& c, const BoundarySeq& bnd) {
  bnd.validate();
  if (static_cast<int>(c.size()) != bnd.segments())
    throw ValidationError("phoneme count does not match boundary count");
  std::vector<int> out(bnd.frames());
  int l = -1;
  for (int t = 0; t < bnd.frames(); ++t) {
    if (bnd.b[t]) ++l;
    out[t] = c[l];
  }
  return out;
}

BoundarySeq uniform_alignment(int frames, int segments) {
  if (segments < 1) throw InfeasibleError("need at least one segment");
  if (frames < segments)
    throw InfeasibleError("cannot split " + std::to_string(frames) +
                          " frames into " + std::to_string(segments) +
                          " segments");
  BoundarySeq bnd;
  bnd.b.assign(frames, 0);
  const int base = frames / segments;
  const int extra = frames % segments;
  int cursor = 0;
  for (int l = 0; l < segments; ++l) {
    bnd.b[cursor] = 1;
    cursor += base + (l < extra ? 1 : 0);
  }
  return bnd;
}

}  // namespace mlvae
