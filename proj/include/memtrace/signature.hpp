#pragma once

// Address-pattern signatures: extraction, longest common memory address
// pattern (LCMAP), similarity and modification diffs.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "memtrace/recon.hpp"
#include "memtrace/trace.hpp"

namespace memtrace::signature {

inline constexpr std::uint64_t kDefaultTau = 100;
inline constexpr double kDefaultThreshold = 0.8;
// A single inserted access leaves a run of at least half the shorter pattern.
inline constexpr double kDefaultDiffThreshold = 0.5;
inline constexpr std::size_t kDefaultMinRun = 2;
// Extent assumed for allocations of unknown size.
inline constexpr std::uint64_t kUnknownSizeWindow = 0x1000;

/// |a - b| <= tau, without overflow.
bool near(std::int64_t a, std::int64_t b, std::uint64_t tau);

struct LcmapResult {
  std::vector<std::int64_t> pattern;  // P[end_index - length, end_index)
  std::size_t length = 0;
  // One past the last matched element, in P and in P'. Equal to the 1-based
  // index of the tail element.
  std::size_t end_index = 0;
  std::size_t other_end_index = 0;
  std::uint64_t tau = kDefaultTau;
};

/// Dynamic program over both patterns: the cell for (i, j) extends the
/// diagonal when P[i-1] is near P'[j-1] and resets to 0 otherwise. Ties on the
/// longest run pick the smallest end in P, then the smallest end in P'.
/// Memory is linear in |P'|.
LcmapResult lcmap(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                  std::uint64_t tau = kDefaultTau);
/// As above; with `match_sizes` both offsets and operand sizes must agree.
LcmapResult lcmap(const AddressPattern& p, const AddressPattern& q,
                  std::uint64_t tau = kDefaultTau, bool match_sizes = false);

/// LCMAP length over the shorter pattern length; 0 if either is empty.
double similarity(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                  std::uint64_t tau = kDefaultTau);
double similarity(const AddressPattern& p, const AddressPattern& q,
                  std::uint64_t tau = kDefaultTau);

struct PatternFilter {
  bool reads = true;
  bool writes = true;
  bool module_only = true;
  // Drop accesses not inside any known allocation.
  bool attributed_only = false;
  std::set<InstrCategory> categories = {InstrCategory::IntMove, InstrCategory::FloatMove,
                                        InstrCategory::XmmZeroStore, InstrCategory::Other};
};

/// Offsets of the selected accesses in trace order. An access inside an
/// allocation (innermost when nested) is relative to that base; the rest are
/// relative to the lowest such unattributed address. Allocations of size 0
/// cover kUnknownSizeWindow bytes.
AddressPattern extract_pattern(const TraceLog& log,
                               const std::vector<recon::AllocationRecord>& bases,
                               const PatternFilter& filter = {});

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool operator==(const IndexRange&) const = default;
};

struct MatchedRun {
  IndexRange p;
  IndexRange q;
  bool operator==(const MatchedRun&) const = default;
};

/// Elements skipped on both sides between two matched runs.
struct UnmatchedRegion {
  IndexRange p;
  IndexRange q;
  bool operator==(const UnmatchedRegion&) const = default;
};

struct DiffReport {
  bool declined = false;  // inputs not similar enough to diff
  double ratio = 0.0;
  double threshold = kDefaultDiffThreshold;
  std::uint64_t tau = kDefaultTau;
  std::vector<MatchedRun> matched;        // in pattern order
  std::vector<UnmatchedRegion> unmatched; // in pattern order
};

/// Repeatedly takes the LCMAP of the remaining window as a matched run and
/// recurses on both sides of it, stopping on runs shorter than `min_run`.
/// Whatever is left between runs forms one unmatched region per gap.
DiffReport diff_modified(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                         std::uint64_t tau = kDefaultTau, double threshold = kDefaultDiffThreshold,
                         std::size_t min_run = kDefaultMinRun);

struct Signature {
  Address base = 0;
  std::uint64_t tau_default = kDefaultTau;
  std::vector<std::int64_t> offsets;
  std::optional<std::vector<std::uint32_t>> sizes;

  bool operator==(const Signature&) const = default;
};

class SignatureParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Signature make_signature(const AddressPattern& pattern, std::uint64_t tau = kDefaultTau);
AddressPattern to_pattern(const Signature& sig);

std::string signature_to_json(const Signature& sig);
Signature signature_from_json(std::string_view text);

struct MatchReport {
  std::size_t length = 0;
  std::size_t end_index = 0;
  double ratio = 0.0;
  bool verdict = false;
};

MatchReport match(const AddressPattern& sig, const AddressPattern& target, std::uint64_t tau,
                  double threshold = kDefaultThreshold);

std::string match_report_to_json(const MatchReport& report);
std::string diff_report_to_json(const DiffReport& report);

}  // namespace memtrace::signature
