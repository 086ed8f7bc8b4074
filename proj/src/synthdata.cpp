#include "mlvae/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

namespace mlvae {
namespace {

using nlohmann::json;

constexpr int kMeanDrawTries = 10000;

// Separation is measured against the largest per-dimension sigma in the
// model, so every pair of symbols is at least sep sigmas apart.
double max_sigma(const Matrix& var) { return std::sqrt(var.maxCoeff()); }

double quantize_f32(double v) {
  return static_cast<double>(static_cast<float>(v));
}

std::string format_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "utt-%06d", index);
  return buf;
}

void append_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void append_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  append_u32(out, bits);
}

// Bounds-checked little-endian reader with error messages that name the
// absolute byte offset in the file.
struct RecordReader {
  const std::string& bytes;
  size_t cursor;
  const std::string& path;
  const std::string& id;

  void need(size_t n) const {
    if (cursor + n > bytes.size())
      throw DataError("truncated record for " + id + " at byte offset " +
                      std::to_string(cursor) + " in " + path);
  }
  uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + cursor);
    cursor += 4;
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) |
           (static_cast<uint32_t>(p[3]) << 24);
  }
  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
};

json parse_line(const std::string& line, int lineno,
                const std::filesystem::path& path) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded())
    throw DataError("malformed JSON on line " + std::to_string(lineno) +
                    " of " + path.string());
  return j;
}

}  // namespace

void SymbolModel::validate() const {
  if (mean.rows() < 2) throw ValidationError("need at least two symbols");
  if (mean.rows() != var.rows() || mean.cols() != var.cols())
    throw ValidationError("symbol mean/variance shape mismatch");
  if (var.minCoeff() <= 0.0) throw ValidationError("symbol variance must be positive");
  if (d_min < 3) throw ValidationError("minimum duration must be at least 3 frames");
  if (d_max < d_min) throw ValidationError("duration range is empty");
  if (!(sep > 0.0)) throw ValidationError("separation must be positive");
  const double need = sep * max_sigma(var);
  for (int i = 0; i < mean.rows(); ++i) {
    for (int j = i + 1; j < mean.rows(); ++j) {
      if ((mean.row(i) - mean.row(j)).norm() < need)
        throw ValidationError("symbol means closer than the required separation");
    }
  }
}

SymbolModel SymbolModel::make(int n_symbols, int feat_dim, double sep,
                              int d_min, int d_max, uint64_t seed) {
  if (n_symbols < 2 || feat_dim < 1)
    throw ConfigError("symbol model needs >= 2 symbols and >= 1 feature dim");
  SymbolModel sm;
  sm.mean = Matrix::Zero(n_symbols, feat_dim);
  sm.var = Matrix::Ones(n_symbols, feat_dim);
  sm.d_min = d_min;
  sm.d_max = d_max;
  sm.sep = sep;

  Rng rng(derive_seed(seed, "symbol-model"));
  const double need = sep * max_sigma(sm.var);
  // Candidates come from N(0, (2 sep)^2 I); with well-spread draws rejection
  // is rare, and the try cap turns a hopeless configuration into an error.
  const double scale = 2.0 * sep;
  for (int j = 0; j < n_symbols; ++j) {
    bool placed = false;
    for (int tries = 0; tries < kMeanDrawTries && !placed; ++tries) {
      Vector cand(feat_dim);
      for (int d = 0; d < feat_dim; ++d) cand[d] = scale * rng.normal();
      placed = true;
      for (int i = 0; i < j; ++i) {
        if ((sm.mean.row(i).transpose() - cand).norm() < need) {
          placed = false;
          break;
        }
      }
      if (placed) sm.mean.row(j) = cand.transpose();
    }
    if (!placed)
      throw InfeasibleError("could not place separated symbol means");
  }
  sm.validate();
  return sm;
}

void GenConfig::validate() const {
  if (n_utterances < 5) throw ConfigError("need at least 5 utterances to split");
  if (mismatch_rate < 0.0 || mismatch_rate >= 1.0)
    throw ConfigError("mismatch_rate must lie in [0, 1)");
  if (n_symbols < 2) throw ConfigError("need at least 2 symbols");
  if (feat_dim < 1) throw ConfigError("feat_dim must be positive");
  if (d_min < 3) throw ConfigError("d_min must be at least 3");
  if (d_max < d_min) throw ConfigError("duration range is empty");
  if (!(sep > 0.0)) throw ConfigError("sep must be positive");
  if (min_labels < 1 || max_labels < min_labels)
    throw ConfigError("label count range is empty");
}

SplitSizes split_sizes(int total) {
  SplitSizes s;
  s.train = total * 6 / 10;
  s.valid = total * 2 / 10;
  s.test = total * 2 / 10;
  int leftover = total - s.train - s.valid - s.test;
  if (leftover > 0) {
    ++s.train;
    --leftover;
  }
  if (leftover > 0) {
    ++s.valid;
    --leftover;
  }
  return s;
}

PhonemeInventory digit_inventory(int n_symbols) {
  PhonemeInventory inv;
  for (int i = 0; i < n_symbols; ++i) inv.symbols.push_back(std::to_string(i));
  inv.prior = Vector::Constant(n_symbols, 1.0 / n_symbols);
  inv.zeta = inv.prior;
  inv.validate();
  return inv;
}

Utterance gen_utterance(const SymbolModel& sm, Rng& rng, double mismatch_rate,
                        int min_labels, int max_labels) {
  const int n = sm.symbols();
  const int df = sm.feat_dim();
  const int L =
      min_labels + static_cast<int>(rng.bounded(
                       static_cast<uint64_t>(max_labels - min_labels + 1)));

  std::vector<int> pron(L), label(L), dur(L);
  std::vector<uint8_t> mm(L);
  for (int l = 0; l < L; ++l) {
    pron[l] = static_cast<int>(rng.bounded(n));
    dur[l] = sm.d_min +
             static_cast<int>(rng.bounded(static_cast<uint64_t>(sm.d_max - sm.d_min + 1)));
    if (rng.bernoulli(mismatch_rate)) {
      // Uniform over the n-1 digits other than the pronounced one.
      int r = static_cast<int>(rng.bounded(n - 1));
      label[l] = r + (r >= pron[l] ? 1 : 0);
      mm[l] = 1;
    } else {
      label[l] = pron[l];
      mm[l] = 0;
    }
  }

  int T = 0;
  for (int d : dur) T += d;

  Utterance u;
  u.x = Matrix(T, df);
  u.c = label;
  UtteranceTruth truth;
  truth.pronounced = pron;
  truth.mismatch = mm;
  int t = 0;
  for (int l = 0; l < L; ++l) {
    truth.boundaries.push_back(t);
    const int p = pron[l];
    for (int k = 0; k < dur[l]; ++k, ++t) {
      for (int d = 0; d < df; ++d) {
        u.x(t, d) = quantize_f32(sm.mean(p, d) +
                                 std::sqrt(sm.var(p, d)) * rng.normal());
      }
    }
  }
  u.truth = truth;
  return u;
}

Dataset gen_dataset(const GenConfig& cfg, uint64_t seed) {
  cfg.validate();
  const SymbolModel sm = SymbolModel::make(cfg.n_symbols, cfg.feat_dim, cfg.sep,
                                           cfg.d_min, cfg.d_max, seed);
  const SplitSizes sizes = split_sizes(cfg.n_utterances);

  Dataset ds;
  ds.train.reserve(sizes.train);
  ds.valid.reserve(sizes.valid);
  ds.test.reserve(sizes.test);
  for (int i = 0; i < cfg.n_utterances; ++i) {
    Rng rng(derive_seed(seed, "utt", static_cast<uint64_t>(i)));
    Utterance u = gen_utterance(sm, rng, cfg.mismatch_rate, cfg.min_labels,
                                cfg.max_labels);
    u.id = format_id(i);
    u.validate(cfg.n_symbols);
    if (i < sizes.train)
      ds.train.push_back(std::move(u));
    else if (i < sizes.train + sizes.valid)
      ds.valid.push_back(std::move(u));
    else
      ds.test.push_back(std::move(u));
  }
  return ds;
}

void DatasetManifest::validate() const {
  if (count != static_cast<int>(entries.size()))
    throw ValidationError("manifest count does not match its entries");
  if (feat_dim < 1) throw ValidationError("manifest feat_dim must be positive");
  for (size_t i = 1; i < entries.size(); ++i) {
    if (entries[i].offset <= entries[i - 1].offset)
      throw ValidationError("manifest offsets must be strictly increasing");
  }
}

void write_split(const std::filesystem::path& dir, const std::string& split,
                 const std::vector<Utterance>& utts, int feat_dim,
                 double mismatch_rate, uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());

  std::string records;
  std::string manifest;
  json header;
  header["schema_version"] = 1;
  header["split"] = split;
  header["count"] = utts.size();
  header["feat_dim"] = feat_dim;
  header["mismatch_rate"] = mismatch_rate;
  header["seed"] = seed;
  manifest += header.dump();
  manifest += '\n';

  for (const Utterance& u : utts) {
    if (!u.truth)
      throw ValidationError(u.id + ": dataset records require ground truth");
    if (u.feat_dim() != feat_dim)
      throw ValidationError(u.id + ": feature dim does not match the split");
    const int T = u.frames();
    const int L = u.labels();

    json entry;
    entry["id"] = u.id;
    entry["offset"] = records.size();
    entry["frames"] = T;
    entry["labels"] = L;
    manifest += entry.dump();
    manifest += '\n';

    append_u32(records, static_cast<uint32_t>(T));
    append_u32(records, static_cast<uint32_t>(L));
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < feat_dim; ++d)
        append_f32(records, static_cast<float>(u.x(t, d)));
    for (int v : u.c) append_u32(records, static_cast<uint32_t>(v));
    for (int v : u.truth->pronounced) append_u32(records, static_cast<uint32_t>(v));
    for (int v : u.truth->boundaries) append_u32(records, static_cast<uint32_t>(v));
    for (uint8_t v : u.truth->mismatch) append_u32(records, v);
  }

  const auto dump = [](const std::filesystem::path& p, const std::string& data) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!f) throw DataError("cannot write " + p.string());
  };
  dump(dir / "manifest.jsonl", manifest);
  dump(dir / "records.bin", records);
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.jsonl";
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());

  std::string line;
  int lineno = 0;
  if (!std::getline(f, line))
    throw DataError("missing header line in " + path.string());
  ++lineno;
  json header = parse_line(line, lineno, path);

  DatasetManifest m;
  try {
    m.schema_version = header.at("schema_version").get<int>();
    m.split = header.at("split").get<std::string>();
    m.count = header.at("count").get<int>();
    m.feat_dim = header.at("feat_dim").get<int>();
    m.mismatch_rate = header.at("mismatch_rate").get<double>();
    m.seed = header.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw DataError("bad manifest header in " + path.string() + ": " + e.what());
  }
  if (m.schema_version != 1)
    throw DataError("unsupported manifest schema_version in " + path.string());

  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_line(line, lineno, path);
    ManifestEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.offset = j.at("offset").get<uint64_t>();
      e.frames = j.at("frames").get<int>();
      e.labels = j.at("labels").get<int>();
    } catch (const json::exception& ex) {
      throw DataError("bad manifest entry on line " + std::to_string(lineno) +
                      " of " + path.string() + ": " + ex.what());
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

std::vector<Utterance> read_split(const std::filesystem::path& dir) {
  const DatasetManifest m = read_manifest(dir);
  const auto path = (dir / "records.bin").string();
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());

  std::vector<Utterance> out;
  out.reserve(m.entries.size());
  for (const ManifestEntry& e : m.entries) {
    if (e.offset > bytes.size())
      throw DataError("record offset for " + e.id + " past the end of " + path);
    RecordReader r{bytes, static_cast<size_t>(e.offset), path, e.id};
    const int T = static_cast<int>(r.u32());
    const int L = static_cast<int>(r.u32());
    if (T != e.frames || L != e.labels)
      throw ValidationError("record header for " + e.id +
                            " disagrees with the manifest");

    Utterance u;
    u.id = e.id;
    u.x = Matrix(T, m.feat_dim);
    for (int t = 0; t < T; ++t)
      for (int d = 0; d < m.feat_dim; ++d) u.x(t, d) = r.f32();
    u.c.resize(L);
    UtteranceTruth truth;
    truth.pronounced.resize(L);
    truth.boundaries.resize(L);
    truth.mismatch.resize(L);
    for (int l = 0; l < L; ++l) u.c[l] = static_cast<int>(r.u32());
    for (int l = 0; l < L; ++l) truth.pronounced[l] = static_cast<int>(r.u32());
    for (int l = 0; l < L; ++l) truth.boundaries[l] = static_cast<int>(r.u32());
    for (int l = 0; l < L; ++l)
      truth.mismatch[l] = static_cast<uint8_t>(r.u32() != 0);
    u.truth = std::move(truth);

    // The manifest does not carry the symbol count, so range-check labels
    // against the widest index seen and rely on callers for the strict check.
    int max_index = 0;
    for (int v : u.c) max_index = std::max(max_index, v);
    for (int v : u.truth->pronounced) max_index = std::max(max_index, v);
    u.validate(max_index + 1);
    out.push_back(std::move(u));
  }
  return out;
}

void write_dataset(const std::filesystem::path& root, const Dataset& ds,
                   const GenConfig& cfg, uint64_t seed) {
  write_split(root / "train", "train", ds.train, cfg.feat_dim,
              cfg.mismatch_rate, seed);
  write_split(root / "valid", "valid", ds.valid, cfg.feat_dim,
              cfg.mismatch_rate, seed);
  write_split(root / "test", "test", ds.test, cfg.feat_dim, cfg.mismatch_rate,
              seed);
}

Dataset read_dataset(const std::filesystem::path& root) {
  Dataset ds;
  ds.train = read_split(root / "train");
  ds.valid = read_split(root / "valid");
  ds.test = read_split(root / "test");
  return ds;
}

}  // namespace mlvae
