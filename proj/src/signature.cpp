#include "memtrace/signature.hpp"

#include <algorithm>
#include <limits>

#include <json.hpp>

namespace memtrace::signature {

namespace {

struct RunPosition {
  std::size_t length = 0;
  std::size_t end_p = 0;
  std::size_t end_q = 0;
};

// Only two rows of the table are alive at a time. Strict improvement while
// scanning i then j keeps the earliest (i, j) among equal lengths.
template <class Matches>
RunPosition longest_run(std::size_t m, std::size_t n, Matches matches) {
  RunPosition best;
  if (m == 0 || n == 0) return best;
  std::vector<std::size_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    cur[0] = 0;
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = matches(i - 1, j - 1) ? prev[j - 1] + 1 : 0;
      if (cur[j] > best.length) best = {cur[j], i, j};
    }
    std::swap(prev, cur);
  }
  return best;
}

LcmapResult to_result(std::span<const std::int64_t> p, const RunPosition& run,
                      std::uint64_t tau) {
  LcmapResult r;
  r.length = run.length;
  r.end_index = run.end_p;
  r.other_end_index = run.end_q;
  r.tau = tau;
  r.pattern.assign(p.begin() + static_cast<std::ptrdiff_t>(run.end_p - run.length),
                   p.begin() + static_cast<std::ptrdiff_t>(run.end_p));
  return r;
}

void diff_window(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                 std::size_t p_off, std::size_t q_off, std::uint64_t tau, std::size_t min_run,
                 std::vector<MatchedRun>& out) {
  const auto run = longest_run(p.size(), q.size(),
                               [&](std::size_t i, std::size_t j) { return near(p[i], q[j], tau); });
  if (run.length == 0 || run.length < min_run) return;
  const std::size_t ps = run.end_p - run.length;
  const std::size_t qs = run.end_q - run.length;
  diff_window(p.first(ps), q.first(qs), p_off, q_off, tau, min_run, out);
  out.push_back({{p_off + ps, p_off + run.end_p}, {q_off + qs, q_off + run.end_q}});
  diff_window(p.subspan(run.end_p), q.subspan(run.end_q), p_off + run.end_p, q_off + run.end_q,
              tau, min_run, out);
}

using ojson = nlohmann::ordered_json;

}  // namespace

bool near(std::int64_t a, std::int64_t b, std::uint64_t tau) {
  const std::uint64_t ua = static_cast<std::uint64_t>(a);
  const std::uint64_t ub = static_cast<std::uint64_t>(b);
  const std::uint64_t diff = a > b ? ua - ub : ub - ua;
  return diff <= tau;
}

LcmapResult lcmap(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                  std::uint64_t tau) {
  const auto run = longest_run(p.size(), q.size(),
                               [&](std::size_t i, std::size_t j) { return near(p[i], q[j], tau); });
  return to_result(p, run, tau);
}

LcmapResult lcmap(const AddressPattern& p, const AddressPattern& q, std::uint64_t tau,
                  bool match_sizes) {
  if (!match_sizes || !p.sizes || !q.sizes) return lcmap(p.offsets, q.offsets, tau);
  const auto& ps = *p.sizes;
  const auto& qs = *q.sizes;
  if (ps.size() != p.offsets.size() || qs.size() != q.offsets.size())
    throw std::invalid_argument("lcmap: sizes do not match offsets");
  const auto run = longest_run(p.size(), q.size(), [&](std::size_t i, std::size_t j) {
    return ps[i] == qs[j] && near(p.offsets[i], q.offsets[j], tau);
  });
  return to_result(p.offsets, run, tau);
}

double similarity(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                  std::uint64_t tau) {
  if (p.empty() || q.empty()) return 0.0;
  return static_cast<double>(lcmap(p, q, tau).length) /
         static_cast<double>(std::min(p.size(), q.size()));
}

double similarity(const AddressPattern& p, const AddressPattern& q, std::uint64_t tau) {
  return similarity(p.offsets, q.offsets, tau);
}

AddressPattern extract_pattern(const TraceLog& log,
                               const std::vector<recon::AllocationRecord>& bases,
                               const PatternFilter& filter) {
  auto extent_end = [](const recon::AllocationRecord& r) {
    return r.base + (r.size ? r.size : kUnknownSizeWindow);
  };

  struct Item {
    Address address;
    std::uint32_t size;
    const recon::AllocationRecord* owner;
  };
  std::vector<Item> items;
  for (const auto& ev : log.events) {
    if (ev.tag != EventTag::None) continue;
    if (ev.kind == AccessKind::Execute) continue;
    if (ev.kind == AccessKind::Read && !filter.reads) continue;
    if (ev.kind == AccessKind::Write && !filter.writes) continue;
    if (!filter.categories.contains(ev.instr.category)) continue;
    if (filter.module_only && !log.module_range.empty() && !log.module_range.contains(ev.rip))
      continue;

    const recon::AllocationRecord* owner = nullptr;
    for (const auto& rec : bases) {
      if (ev.address < rec.base || ev.address >= extent_end(rec)) continue;
      if (!owner || rec.base > owner->base ||
          (rec.base == owner->base && extent_end(rec) < extent_end(*owner)))
        owner = &rec;
    }
    if (!owner && filter.attributed_only) continue;
    items.push_back({ev.address, ev.operand_size, owner});
  }

  AddressPattern pattern;
  std::optional<Address> reference;
  for (const auto& it : items)
    if (!it.owner) reference = std::min(reference.value_or(it.address), it.address);
  if (reference)
    pattern.base = *reference;
  else if (!items.empty())
    pattern.base = items.front().owner->base;

  std::vector<std::uint32_t> sizes;
  for (const auto& it : items) {
    const Address ref = it.owner ? it.owner->base : *reference;
    pattern.offsets.push_back(static_cast<std::int64_t>(it.address - ref));
    sizes.push_back(it.size);
  }
  pattern.sizes = std::move(sizes);
  return pattern;
}

DiffReport diff_modified(std::span<const std::int64_t> p, std::span<const std::int64_t> q,
                         std::uint64_t tau, double threshold, std::size_t min_run) {
  DiffReport report;
  report.tau = tau;
  report.threshold = threshold;
  report.ratio = similarity(p, q, tau);
  if (report.ratio < threshold) {
    report.declined = true;
    return report;
  }

  diff_window(p, q, 0, 0, tau, std::max<std::size_t>(min_run, 1), report.matched);

  std::size_t p_cursor = 0, q_cursor = 0;
  auto gap = [&](std::size_t p_to, std::size_t q_to) {
    if (p_to > p_cursor || q_to > q_cursor)
      report.unmatched.push_back({{p_cursor, p_to}, {q_cursor, q_to}});
  };
  for (const auto& run : report.matched) {
    gap(run.p.begin, run.q.begin);
    p_cursor = run.p.end;
    q_cursor = run.q.end;
  }
  gap(p.size(), q.size());
  return report;
}

Signature make_signature(const AddressPattern& pattern, std::uint64_t tau) {
  return {pattern.base, tau, pattern.offsets, pattern.sizes};
}

AddressPattern to_pattern(const Signature& sig) { return {sig.offsets, sig.base, sig.sizes}; }

std::string signature_to_json(const Signature& sig) {
  ojson doc;
  doc["base"] = format_hex(sig.base);
  doc["tau_default"] = sig.tau_default;
  doc["offsets"] = sig.offsets;
  if (sig.sizes) doc["sizes"] = *sig.sizes;
  return doc.dump() + "\n";
}

Signature signature_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SignatureParseError(std::string("signature: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("offsets") || !doc["offsets"].is_array())
    throw SignatureParseError("signature: missing 'offsets' array");
  try {
    Signature sig;
    if (doc.contains("base")) {
      const auto base = parse_u64(doc["base"].get<std::string>());
      if (!base) throw SignatureParseError("signature: 'base' is not a number");
      sig.base = *base;
    }
    sig.tau_default = doc.value("tau_default", kDefaultTau);
    sig.offsets = doc["offsets"].get<std::vector<std::int64_t>>();
    if (doc.contains("sizes")) {
      sig.sizes = doc["sizes"].get<std::vector<std::uint32_t>>();
      if (sig.sizes->size() != sig.offsets.size())
        throw SignatureParseError("signature: 'sizes' and 'offsets' differ in length");
    }
    return sig;
  } catch (const nlohmann::json::exception& e) {
    throw SignatureParseError(std::string("signature: ") + e.what());
  }
}

MatchReport match(const AddressPattern& sig, const AddressPattern& target, std::uint64_t tau,
                  double threshold) {
  const auto r = lcmap(sig.offsets, target.offsets, tau);
  MatchReport report;
  report.length = r.length;
  report.end_index = r.end_index;
  report.ratio = similarity(sig.offsets, target.offsets, tau);
  report.verdict = !sig.empty() && !target.empty() && report.ratio >= threshold;
  return report;
}

std::string match_report_to_json(const MatchReport& report) {
  ojson doc;
  doc["L"] = report.length;
  doc["I"] = report.end_index;
  doc["ratio"] = report.ratio;
  doc["verdict"] = report.verdict ? "match" : "no-match";
  return doc.dump() + "\n";
}

std::string diff_report_to_json(const DiffReport& report) {
  auto range = [](const IndexRange& r) { return ojson::array({r.begin, r.end}); };
  ojson doc;
  doc["ratio"] = report.ratio;
  doc["threshold"] = report.threshold;
  doc["tau"] = report.tau;
  doc["declined"] = report.declined;
  auto& matched = doc["matched"] = ojson::array();
  for (const auto& m : report.matched) matched.push_back({{"p", range(m.p)}, {"q", range(m.q)}});
  auto& unmatched = doc["unmatched"] = ojson::array();
  for (const auto& u : report.unmatched)
    unmatched.push_back({{"p", range(u.p)}, {"q", range(u.q)}});
  return doc.dump(2) + "\n";
}

}  // namespace memtrace::signature
