#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mlvae/core.hpp"
#include "mlvae/rng.hpp"

namespace mlvae {

// Gaussian feature model for the spoken-digit analog corpus: one diagonal
// Gaussian per symbol plus a per-segment duration range.
struct SymbolModel {
  Matrix mean;  // symbols x feature dim
  Matrix var;   // symbols x feature dim, diagonal covariances
  int d_min = 5;
  int d_max = 20;
  double sep = 4.0;  // required pairwise mean separation, in units of sigma

  int symbols() const { return static_cast<int>(mean.rows()); }
  int feat_dim() const { return static_cast<int>(mean.cols()); }
  void validate() const;

  // Unit-variance model with rejection-sampled means. Deterministic in seed.
  static SymbolModel make(int n_symbols, int feat_dim, double sep, int d_min,
                          int d_max, uint64_t seed);
};

struct GenConfig {
  int n_utterances = 3000;
  double mismatch_rate = 0.201;
  int n_symbols = 10;
  int feat_dim = 8;
  int d_min = 5;
  int d_max = 20;
  double sep = 4.0;
  int min_labels = 3;
  int max_labels = 7;

  void validate() const;
};

struct SplitSizes {
  int train = 0;
  int valid = 0;
  int test = 0;
};

// 60:20:20 by floor; leftover utterances go to train, then valid.
SplitSizes split_sizes(int total);

struct Dataset {
  std::vector<Utterance> train;
  std::vector<Utterance> valid;
  std::vector<Utterance> test;
};

// Digit symbol table with uniform frequency prior and uniform zeta.
PhonemeInventory digit_inventory(int n_symbols);

// Draws one utterance: a label count in [min_labels, max_labels], then per
// position a pronounced digit, a duration, and a corruption coin that
// replaces the transcript label (never the audio) with a different digit.
// Frames are sampled from the pronounced digit's Gaussian and quantized to
// f32 so in-memory data matches the serialized form bit for bit.
Utterance gen_utterance(const SymbolModel& sm, Rng& rng, double mismatch_rate,
                        int min_labels = 3, int max_labels = 7);

// Generates cfg.n_utterances utterances with per-utterance RNG streams
// derived from (seed, index), so generation order can never change output,
// and deals them into 60:20:20 splits.
Dataset gen_dataset(const GenConfig& cfg, uint64_t seed);

struct ManifestEntry {
  std::string id;
  uint64_t offset = 0;  // byte offset of the record in records.bin
  int frames = 0;
  int labels = 0;
};

struct DatasetManifest {
  int schema_version = 1;
  std::string split;
  int count = 0;
  int feat_dim = 0;
  double mismatch_rate = 0.0;
  uint64_t seed = 0;
  std::vector<ManifestEntry> entries;

  void validate() const;
};

// One split is a directory holding manifest.jsonl (a header line plus one
// line per utterance) and records.bin (per record: u32 T, u32 L, T*D f32
// features row-major, then L u32 each of labels, pronounced, boundaries,
// mismatch flags; everything little-endian).
void write_split(const std::filesystem::path& dir, const std::string& split,
                 const std::vector<Utterance>& utts, int feat_dim,
                 double mismatch_rate, uint64_t seed);

DatasetManifest read_manifest(const std::filesystem::path& dir);
std::vector<Utterance> read_split(const std::filesystem::path& dir);

// Writes/reads the train, valid and test subdirectories of root.
void write_dataset(const std::filesystem::path& root, const Dataset& ds,
                   const GenConfig& cfg, uint64_t seed);
Dataset read_dataset(const std::filesystem::path& root);

}  // namespace mlvae
