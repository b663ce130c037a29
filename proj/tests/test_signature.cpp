#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "memtrace/signature.hpp"
#include "memtrace/simulator.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"

using namespace memtrace;
using namespace memtrace::signature;
using Offsets = std::vector<std::int64_t>;

namespace {

constexpr std::uint64_t kTaus[] = {0, 4, 100};

// Both sides of a diff must be covered in order by matched runs and
// unmatched regions, with no overlap and no hole.
void check_partition(const DiffReport& report, std::size_t p_len, std::size_t q_len) {
  struct Piece {
    IndexRange p, q;
  };
  std::vector<Piece> pieces;
  for (const auto& m : report.matched) pieces.push_back({m.p, m.q});
  for (const auto& u : report.unmatched) pieces.push_back({u.p, u.q});
  std::sort(pieces.begin(), pieces.end(), [](const Piece& a, const Piece& b) {
    return std::pair(a.p.begin, a.q.begin) < std::pair(b.p.begin, b.q.begin);
  });
  std::size_t pc = 0, qc = 0;
  for (const auto& piece : pieces) {
    CHECK(piece.p.begin == pc);
    CHECK(piece.q.begin == qc);
    pc = piece.p.end;
    qc = piece.q.end;
  }
  CHECK(pc == p_len);
  CHECK(qc == q_len);
  for (const auto& m : report.matched) CHECK(m.p.size() == m.q.size());
}

}  // namespace

TEST_CASE("near") {
  CHECK(near(0x10, 0x10, 0));
  CHECK_FALSE(near(0, 101, 100));
  CHECK(near(0, 100, 100));
  CHECK(near(-5, 5, 10));
  CHECK(near(INT64_MIN, INT64_MAX, UINT64_MAX));
  CHECK_FALSE(near(INT64_MIN, INT64_MAX, 5));
  testgen::Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto a = rng.srange(-1000, 1000), b = rng.srange(-1000, 1000);
    const auto tau = rng.range(0, 300);
    REQUIRE(near(a, b, tau) == oracle::within(a, b, tau));
  }
}

TEST_CASE("lcmap examples") {
  const Offsets self = {0, 8, 16};
  const auto r = lcmap(self, self, 0);
  CHECK(r.length == 3);
  CHECK(r.pattern == self);
  CHECK(r.end_index == 3);

  const Offsets p = {0, 8, 16, 120, 128}, q = {0, 8, 16, 400, 128};
  const auto s = lcmap(p, q, 4);
  CHECK(s.length == 3);
  CHECK(s.pattern == Offsets{0, 8, 16});
  CHECK(s.end_index == 3);
  CHECK(s.other_end_index == 3);

  CHECK(lcmap(Offsets{}, self).length == 0);
  CHECK(lcmap(self, Offsets{}).pattern.empty());
  CHECK(lcmap(self, self).tau == kDefaultTau);
}

TEST_CASE("lcmap tie-break picks the earliest end") {
  // Two runs of length 2 in p; the first one wins.
  const Offsets p = {1, 2, 9, 1, 2}, q = {1, 2};
  const auto r = lcmap(p, q, 0);
  CHECK(r.length == 2);
  CHECK(r.end_index == 2);
  const auto o = oracle::brute_force_lcmap(p, q, 0);
  CHECK(o.end_p == 2);
}

TEST_CASE("lcmap equals the brute-force enumerator") {
  testgen::Rng rng(0x1c);
  std::size_t cases = 0;
  for (int round = 0; round < 1500; ++round) {
    const auto [p, q] = testgen::random_pattern_pair(rng);
    for (auto tau : kTaus) {
      const auto got = lcmap(p, q, tau);
      const auto want = oracle::brute_force_lcmap(p, q, tau);
      CAPTURE(round);
      CAPTURE(tau);
      REQUIRE(got.length == want.length);
      if (want.length > 0) {
        REQUIRE(got.end_index == want.end_p);
        REQUIRE(got.other_end_index == want.end_q);
      }
      REQUIRE(got.pattern == Offsets(p.begin() + static_cast<std::ptrdiff_t>(got.end_index - got.length),
                                     p.begin() + static_cast<std::ptrdiff_t>(got.end_index)));
      ++cases;
    }
  }
  CHECK(cases == 4500);
}

TEST_CASE("tau properties") {
  testgen::Rng rng(0x7a0);
  for (int round = 0; round < 1000; ++round) {
    const auto [p, q] = testgen::random_pattern_pair(rng);
    CHECK(lcmap(p, p, 0).length == p.size());
    CHECK(lcmap(p, q, 0).length == oracle::textbook_lcs_substring(p, q));
    CHECK(lcmap(p, q, 4).length == lcmap(q, p, 4).length);
    std::size_t prev = 0;
    for (std::uint64_t tau : {0, 1, 4, 16, 100, 1000}) {
      const auto len = lcmap(p, q, tau).length;
      CHECK(len >= prev);
      prev = len;
    }
  }
}

TEST_CASE("default tau is 100") {
  const Offsets p = {0, 100}, q = {100, 200};
  CHECK(lcmap(p, q).length == 2);
  CHECK(lcmap(p, Offsets{0, 201}).length == 1);
  CHECK(make_signature(AddressPattern{p, 0, std::nullopt}).tau_default == 100);
}

TEST_CASE("size matching is opt-in") {
  const AddressPattern p{{0, 8}, 0, std::vector<std::uint32_t>{4, 8}};
  const AddressPattern q{{0, 8}, 0, std::vector<std::uint32_t>{4, 4}};
  CHECK(lcmap(p, q, 0).length == 2);
  CHECK(lcmap(p, q, 0, true).length == 1);
}

TEST_CASE("similarity") {
  const Offsets p = {0, 8, 16};
  CHECK(similarity(p, p, 0) == 1.0);
  CHECK(similarity(p, Offsets{1000, 2000}, 0) == 0.0);
  CHECK(similarity(p, Offsets{}, 0) == 0.0);
  testgen::Rng rng(0x5e);
  for (int round = 0; round < 500; ++round) {
    const auto [a, b] = testgen::random_pattern_pair(rng);
    const double want = a.empty() || b.empty()
                            ? 0.0
                            : static_cast<double>(oracle::brute_force_lcmap(a, b, 4).length) /
                                  static_cast<double>(std::min(a.size(), b.size()));
    CHECK(similarity(a, b, 4) == doctest::Approx(want));
  }
}

TEST_CASE("extract_pattern") {
  auto access = [](std::uint64_t seq, Address addr, Address rip = 0x401000) {
    AccessEvent ev;
    ev.seq = seq;
    ev.address = addr;
    ev.operand_size = 4;
    ev.rip = rip;
    ev.instr.category = InstrCategory::IntMove;
    return ev;
  };
  const recon::AllocationRecord heap{0x9000, 0x100, recon::AllocationSource::HeapHook, 0, {}};

  SUBCASE("one allocation") {
    TraceLog log;
    log.events = {access(0, 0x9010), access(1, 0x9000), access(2, 0x90f8)};
    const auto p = extract_pattern(log, {heap});
    CHECK(p.base == 0x9000);
    CHECK(p.offsets == Offsets{0x10, 0, 0xf8});
    CHECK(*p.sizes == std::vector<std::uint32_t>{4, 4, 4});
  }
  SUBCASE("no bases") {
    TraceLog log;
    log.events = {access(0, 0x5010), access(1, 0x5004), access(2, 0x5100)};
    const auto p = extract_pattern(log, {});
    CHECK(p.base == 0x5004);
    CHECK(p.offsets == Offsets{0xc, 0, 0xfc});
  }
  SUBCASE("empty after filtering") {
    TraceLog log;
    log.module_range = {0x400000, 0x410000};
    log.events = {access(0, 0x9000, 0x7ff800001000)};
    CHECK(extract_pattern(log, {heap}).empty());
    PatternFilter all;
    all.module_only = false;
    CHECK(extract_pattern(log, {heap}, all).size() == 1);
    PatternFilter no_writes;
    no_writes.module_only = false;
    no_writes.reads = false;
    CHECK(extract_pattern(log, {heap}, no_writes).empty());
  }
  SUBCASE("attribution filter") {
    TraceLog log;
    log.events = {access(0, 0x20000), access(1, 0x9008)};
    PatternFilter f;
    f.attributed_only = true;
    const auto p = extract_pattern(log, {heap}, f);
    CHECK(p.offsets == Offsets{8});
  }
  SUBCASE("mixed bases against a per-event lookup") {
    testgen::Rng rng(0xe7);
    for (int round = 0; round < 200; ++round) {
      std::vector<recon::AllocationRecord> bases;
      for (std::uint64_t k = 0, n = rng.range(0, 4); k < n; ++k)
        bases.push_back({0x100000 + 0x800 * rng.range(0, 8), rng.range(0, 2) * 0x400,
                         recon::AllocationSource::HeapHook, 0, {}});
      TraceLog log;
      for (std::uint64_t i = 0, n = rng.range(1, 60); i < n; ++i)
        log.events.push_back(access(i, 0xff000 + rng.range(0, 0x7000)));

      // Deepest containing base: the largest base, then the smallest extent.
      std::vector<std::optional<Address>> owner(log.events.size());
      std::optional<Address> low;
      for (std::size_t i = 0; i < log.events.size(); ++i) {
        const Address a = log.events[i].address;
        std::optional<std::pair<Address, std::uint64_t>> best;
        for (const auto& b : bases) {
          const std::uint64_t extent = b.size ? b.size : kUnknownSizeWindow;
          if (a < b.base || a - b.base >= extent) continue;
          if (!best || b.base > best->first || (b.base == best->first && extent < best->second))
            best = std::pair(b.base, extent);
        }
        if (best) owner[i] = best->first;
        else low = std::min(low.value_or(a), a);
      }
      const auto p = extract_pattern(log, bases);
      REQUIRE(p.size() == log.events.size());
      for (std::size_t i = 0; i < log.events.size(); ++i) {
        const Address ref = owner[i] ? *owner[i] : *low;
        CHECK(p.offsets[i] == static_cast<std::int64_t>(log.events[i].address - ref));
      }
    }
  }
}

TEST_CASE("diff_modified") {
  SUBCASE("identical patterns") {
    const Offsets p = {0, 8, 16, 24};
    const auto r = diff_modified(p, p, 0);
    CHECK_FALSE(r.declined);
    REQUIRE(r.matched.size() == 1);
    CHECK(r.matched[0].p == IndexRange{0, 4});
    CHECK(r.unmatched.empty());
  }
  SUBCASE("one inserted offset") {
    const Offsets p = {0, 8, 16, 24, 32, 40};
    const Offsets q = {0, 8, 16, 0x777, 24, 32, 40};
    const auto r = diff_modified(p, q, 0);
    CHECK(r.ratio == 0.5);
    REQUIRE(r.matched.size() == 2);
    CHECK(r.matched[0] == MatchedRun{{0, 3}, {0, 3}});
    CHECK(r.matched[1] == MatchedRun{{3, 6}, {4, 7}});
    REQUIRE(r.unmatched.size() == 1);
    CHECK(r.unmatched[0].p.empty());
    CHECK(r.unmatched[0].q == IndexRange{3, 4});
    check_partition(r, p.size(), q.size());
  }
  SUBCASE("dissimilar inputs are declined") {
    const auto r = diff_modified(Offsets{0, 8}, Offsets{1000, 2000}, 0);
    CHECK(r.declined);
    CHECK(r.ratio == 0.0);
    CHECK(r.matched.empty());
  }
  SUBCASE("random pairs are partitioned") {
    testgen::Rng rng(0xd1ff);
    for (int round = 0; round < 500; ++round) {
      const auto [p, q] = testgen::random_pattern_pair(rng);
      for (auto tau : kTaus) {
        const auto r = diff_modified(p, q, tau, 0.0);
        check_partition(r, p.size(), q.size());
        for (const auto& m : r.matched) {
          CHECK(m.p.size() >= kDefaultMinRun);
          for (std::size_t k = 0; k < m.p.size(); ++k)
            CHECK(near(p[m.p.begin + k], q[m.q.begin + k], tau));
        }
      }
    }
  }
}

TEST_CASE("signature documents") {
  const Signature sig{0x9000, 4, {0, 8, -16}, std::vector<std::uint32_t>{8, 8, 4}};
  CHECK(signature_from_json(signature_to_json(sig)) == sig);
  const Signature bare{0, 100, {}, std::nullopt};
  CHECK(signature_from_json(signature_to_json(bare)) == bare);
  const auto json = signature_to_json(sig);
  CHECK(json.find("\"offsets\"") != std::string::npos);

  for (const char* bad : {"", "[]", R"({"base":"0x0"})", R"({"offsets":[1,"x"]})",
                          R"({"offsets":[1],"sizes":[1,2]})"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(signature_from_json(bad), SignatureParseError);
  }
}

TEST_CASE("match reports") {
  const AddressPattern p{{0, 8, 16, 24}, 0, std::nullopt};
  const auto self = match(p, p, 0);
  CHECK(self.verdict);
  CHECK(self.length == 4);
  CHECK(self.ratio == 1.0);
  const AddressPattern far{{1000, 2000}, 0, std::nullopt};
  CHECK_FALSE(match(p, far, 0).verdict);
  const auto json = match_report_to_json(self);
  CHECK(json.find("\"verdict\":\"match\"") != std::string::npos);
}

TEST_CASE("same accesses with different filler give the same pattern") {
  testgen::Rng rng(0xf111);
  for (int round = 0; round < 20; ++round) {
    auto a = testgen::base_model();
    auto b = testgen::base_model();
    a.code.push_back(sim::Alloc{"malloc", 0x80, 0});
    b.code.push_back(sim::Alloc{"malloc", 0x80, 0});
    for (int k = 0; k < 20; ++k) {
      const sim::MovWrite w{sim::Operand::alloc(0, 8 * static_cast<std::int64_t>(rng.range(0, 15))),
                            8, InstrCategory::IntMove, Signedness::Signed,
                            sim::Operand::absolute(k)};
      for (std::uint64_t f = 0, n = rng.range(0, 3); f < n; ++f) a.code.push_back(sim::Nop{});
      for (std::uint64_t f = 0, n = rng.range(0, 3); f < n; ++f) b.code.push_back(sim::Nop{});
      a.code.push_back(w);
      b.code.push_back(w);
    }
    sim::Guest ga = sim::make_guest(a), gb = sim::make_guest(b);
    const auto la = sim::run(ga, a, {});
    const auto lb = sim::run(gb, b, {});
    const auto pa = extract_pattern(la, recon::collect_bases(la));
    const auto pb = extract_pattern(lb, recon::collect_bases(lb));
    CHECK(pa.offsets == pb.offsets);
    CHECK(similarity(pa, pb, 0) == 1.0);
  }
}
