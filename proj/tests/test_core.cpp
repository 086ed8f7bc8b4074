#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mlvae/core.hpp"
#include "mlvae/rng.hpp"

using namespace mlvae;

namespace {

BoundarySeq make_b(std::vector<uint8_t> v) { return BoundarySeq{std::move(v)}; }

}  // namespace

TEST_CASE("boundaries_to_segments basics") {
  auto segs = boundaries_to_segments(make_b({1, 0, 1, 0}));
  REQUIRE(segs.size() == 2);
  CHECK(segs[0] == Segment{0, 2});
  CHECK(segs[1] == Segment{2, 4});

  segs = boundaries_to_segments(make_b({1}));
  REQUIRE(segs.size() == 1);
  CHECK(segs[0] == Segment{0, 1});

  segs = boundaries_to_segments(make_b({1, 1, 1}));
  REQUIRE(segs.size() == 3);
  CHECK(segs[0] == Segment{0, 1});
  CHECK(segs[1] == Segment{1, 2});
  CHECK(segs[2] == Segment{2, 3});
}

TEST_CASE("boundaries_to_segments rejects invalid input") {
  CHECK_THROWS_AS(boundaries_to_segments(make_b({})), ValidationError);
  CHECK_THROWS_AS(boundaries_to_segments(make_b({0, 1})), ValidationError);
}

TEST_CASE("segment round-trip on random boundary sequences") {
  Rng rng(derive_seed(7, "core-roundtrip"));
  for (int trial = 0; trial < 200; ++trial) {
    int t = static_cast<int>(rng.uniform_int(1, 40));
    BoundarySeq b;
    b.b.assign(t, 0);
    b.b[0] = 1;
    for (int i = 1; i < t; ++i) b.b[i] = rng.bernoulli(0.3);
    auto segs = boundaries_to_segments(b);
    REQUIRE(static_cast<int>(segs.size()) == b.segments());
    BoundarySeq back = segments_to_boundaries(segs);
    CHECK(back.b == b.b);
  }
}

TEST_CASE("expand_phonemes") {
  CHECK(expand_phonemes({4}, make_b({1, 0, 0})) == std::vector<int>{4, 4, 4});
  CHECK(expand_phonemes({4, 7}, make_b({1, 0, 1})) == std::vector<int>{4, 4, 7});
  CHECK(expand_phonemes({4, 7, 2}, make_b({1, 1, 1})) ==
        std::vector<int>{4, 7, 2});
  CHECK_THROWS_AS(expand_phonemes({4, 7}, make_b({1, 0, 0})), ValidationError);
}

TEST_CASE("expand_phonemes preserves the boundary structure") {
  Rng rng(derive_seed(7, "core-expand"));
  for (int trial = 0; trial < 100; ++trial) {
    int t = static_cast<int>(rng.uniform_int(1, 30));
    BoundarySeq b;
    b.b.assign(t, 0);
    b.b[0] = 1;
    for (int i = 1; i < t; ++i) b.b[i] = rng.bernoulli(0.4);
    int l = b.segments();
    std::vector<int> c(l);
    // Adjacent labels distinct so the induced boundaries are recoverable.
    for (int i = 0; i < l; ++i)
      c[i] = (i == 0) ? static_cast<int>(rng.uniform_int(0, 9))
                      : (c[i - 1] + 1 + static_cast<int>(rng.uniform_int(0, 8))) % 10;
    auto frames = expand_phonemes(c, b);
    REQUIRE(static_cast<int>(frames.size()) == t);
    for (int i = 0; i < t; ++i) {
      bool start = (i == 0) || frames[i] != frames[i - 1];
      CHECK(start == (b.b[i] != 0));
    }
  }
}

TEST_CASE("uniform_alignment") {
  CHECK(uniform_alignment(6, 3).b == std::vector<uint8_t>{1, 0, 1, 0, 1, 0});
  CHECK(uniform_alignment(3, 3).b == std::vector<uint8_t>{1, 1, 1});

  auto segs = boundaries_to_segments(uniform_alignment(5, 2));
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].length() == 3);
  CHECK(segs[1].length() == 2);

  CHECK_THROWS_AS(uniform_alignment(2, 3), InfeasibleError);
}

TEST_CASE("uniform_alignment lengths differ by at most one") {
  Rng rng(derive_seed(7, "core-uniform"));
  for (int trial = 0; trial < 200; ++trial) {
    int l = static_cast<int>(rng.uniform_int(1, 12));
    int t = l + static_cast<int>(rng.uniform_int(0, 60));
    auto segs = boundaries_to_segments(uniform_alignment(t, l));
    REQUIRE(static_cast<int>(segs.size()) == l);
    int lo = t / l;
    int hi = (t + l - 1) / l;
    int total = 0;
    for (auto& s : segs) {
      CHECK(s.length() >= lo);
      CHECK(s.length() <= hi);
      total += s.length();
    }
    CHECK(total == t);
  }
}

TEST_CASE("inventory validation") {
  PhonemeInventory inv;
  inv.symbols = {"0", "1", "2"};
  inv.prior = Vector::Constant(3, 1.0 / 3.0);
  inv.zeta = inv.prior;
  CHECK_NOTHROW(inv.validate());
  CHECK(inv.index_of("2") == 2);
  CHECK(inv.index_of("9") == -1);

  PhonemeInventory dup = inv;
  dup.symbols = {"0", "1", "1"};
  CHECK_THROWS_AS(dup.validate(), ValidationError);

  PhonemeInventory bad = inv;
  bad.prior[0] = 0.9;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("utterance validation") {
  Utterance u;
  u.id = "u0";
  u.x = Matrix::Zero(5, 2);
  u.c = {1, 2};
  CHECK_NOTHROW(u.validate(3));

  u.truth = UtteranceTruth{{1, 0}, {0, 3}, {0, 1}};
  CHECK_NOTHROW(u.validate(3));

  // inconsistent flag
  u.truth->mismatch = {1, 1};
  CHECK_THROWS_AS(u.validate(3), ValidationError);

  u.truth.reset();
  u.c = {1, 2, 0, 0, 0, 0};  // more labels than frames
  CHECK_THROWS_AS(u.validate(3), ValidationError);
}

TEST_CASE("correctness constant within segments") {
  CorrectnessSeq pi{{0, 0, 1, 1}};
  CHECK_NOTHROW(pi.validate_with(make_b({1, 0, 1, 0})));
  CHECK_THROWS_AS(pi.validate_with(make_b({1, 0, 0, 0})), ValidationError);
}

TEST_CASE("localization result tiling and frame labels") {
  PhonemeInventory inv;
  inv.symbols = {"0", "1", "2"};
  inv.prior = Vector::Constant(3, 1.0 / 3.0);
  inv.zeta = inv.prior;

  LocalizationResult r;
  r.segments = {{2, false, 0, 2}, {1, true, 2, 3}};
  CHECK_NOTHROW(r.validate(3));
  CHECK(r.frame_labels(inv) == std::vector<std::string>{"2", "2", "1*"});

  CHECK_THROWS_AS(r.validate(4), ValidationError);
  r.segments[1].start = 1;
  CHECK_THROWS_AS(r.validate(3), ValidationError);
}
