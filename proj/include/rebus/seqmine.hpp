#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rebus/common.hpp"

namespace rebus {

// Frequent contiguous substrings of the training sequences, with O(1)
// exact-string membership. Support is a document frequency: a user
// contributes at most once per pattern no matter how often it repeats.
// The set is downward closed: every substring of a stored pattern is
// stored too.
class PatternSet {
 public:
  PatternSet() = default;
  PatternSet(std::uint32_t min_count, std::uint32_t max_size)
      : min_count_(min_count), max_size_(max_size) {}

  std::uint32_t min_count() const { return min_count_; }
  std::uint32_t max_size() const { return max_size_; }
  std::size_t size() const { return support_.size(); }
  bool empty() const { return support_.empty(); }

  static std::string key(std::span<const ItemId> pattern) {
    return std::string(reinterpret_cast<const char*>(pattern.data()),
                       pattern.size() * sizeof(ItemId));
  }

  bool contains(std::span<const ItemId> pattern) const {
    return support_.count(key(pattern)) != 0;
  }
  bool contains_key(const std::string& k) const { return support_.count(k) != 0; }

  std::uint32_t support_of(std::span<const ItemId> pattern) const {
    auto it = support_.find(key(pattern));
    return it == support_.end() ? 0 : it->second;
  }

  void insert(std::span<const ItemId> pattern, std::uint32_t support) {
    support_[key(pattern)] = support;
  }

  // Explicit construction, mainly for hand-built sets; rejects inputs
  // that would break downward closure.
  static PatternSet from_patterns(const std::vector<std::vector<ItemId>>& patterns,
                                  std::uint32_t min_count, std::uint32_t max_size) {
    PatternSet f(min_count, max_size);
    for (const auto& p : patterns) {
      if (p.empty() || p.size() > max_size)
        throw std::invalid_argument("pattern length out of range");
      f.insert(p, min_count);
    }
    for (const auto& p : patterns)
      for (std::size_t len = 1; len < p.size(); ++len)
        for (std::size_t off = 0; off + len <= p.size(); ++off)
          if (!f.contains(std::span<const ItemId>(p.data() + off, len)))
            throw std::invalid_argument("pattern set is not downward closed");
    return f;
  }

  std::vector<std::pair<std::vector<ItemId>, std::uint32_t>> sorted_entries() const {
    std::vector<std::pair<std::vector<ItemId>, std::uint32_t>> out;
    out.reserve(support_.size());
    for (const auto& [k, sup] : support_) {
      std::vector<ItemId> items(k.size() / sizeof(ItemId));
      std::memcpy(items.data(), k.data(), k.size());
      out.emplace_back(std::move(items), sup);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  // One pattern per line: comma-joined item ids, a tab, the support.
  void save_text(std::ostream& out) const {
    for (const auto& [items, sup] : sorted_entries()) {
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out << ',';
        out << items[i];
      }
      out << '\t' << sup << '\n';
    }
  }

  void save_text(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + path.string());
    save_text(out);
  }

  // min_count and max_size are derived from the entries; the file must
  // describe a downward-closed set, as save_text always does.
  static PatternSet load_text(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open: " + path.string());
    PatternSet f(1, 1);
    std::string line;
    std::size_t line_no = 0;
    std::uint32_t min_support = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw InputError("pattern file line " + std::to_string(line_no) +
                         ": missing support column");
      std::vector<ItemId> items;
      std::istringstream is(line.substr(0, tab));
      std::string tok;
      while (std::getline(is, tok, ','))
        items.push_back(static_cast<ItemId>(std::stoul(tok)));
      if (items.empty())
        throw InputError("pattern file line " + std::to_string(line_no) +
                         ": empty pattern");
      const auto support =
          static_cast<std::uint32_t>(std::stoul(line.substr(tab + 1)));
      f.insert(items, support);
      f.max_size_ = std::max(f.max_size_, static_cast<std::uint32_t>(items.size()));
      min_support = min_support == 0 ? support : std::min(min_support, support);
    }
    f.min_count_ = std::max(1u, min_support);
    for (const auto& [items, sup] : f.sorted_entries())
      for (std::size_t len = 1; len < items.size(); ++len)
        for (std::size_t off = 0; off + len <= items.size(); ++off)
          if (!f.contains(std::span<const ItemId>(items.data() + off, len)))
            throw InputError("pattern file is not downward closed: " +
                             path.string());
    return f;
  }

  void write(BinWriter& w) const {
    w.u32(min_count_);
    w.u32(max_size_);
    const auto entries = sorted_entries();
    w.u64(entries.size());
    for (const auto& [items, sup] : entries) {
      w.u32(static_cast<std::uint32_t>(items.size()));
      for (ItemId i : items) w.u32(i);
      w.u32(sup);
    }
  }

  static PatternSet read(BinReader& r) {
    PatternSet f(r.u32(), r.u32());
    const std::uint64_t n = r.u64();
    for (std::uint64_t e = 0; e < n; ++e) {
      std::vector<ItemId> items(r.u32());
      for (auto& i : items) i = r.u32();
      f.insert(items, r.u32());
    }
    return f;
  }

 private:
  std::uint32_t min_count_ = 1;
  std::uint32_t max_size_ = 1;
  std::unordered_map<std::string, std::uint32_t> support_;
};

// Level-wise miner: length-n candidates are single-item extensions of
// frequent length-(n-1) patterns, so infrequent branches are pruned early.
inline PatternSet mine_frequent_substrings(
    const std::vector<std::vector<ItemId>>& sequences,
    std::uint32_t min_count, std::uint32_t max_size) {
  if (min_count < 1) throw std::invalid_argument("min_count must be >= 1");
  if (max_size < 1) throw std::invalid_argument("max_size must be >= 1");
  PatternSet f(min_count, max_size);

  std::unordered_map<std::string, std::uint32_t> counts;
  std::unordered_set<std::string> seen;  // per-user dedup, document frequency
  std::unordered_set<std::string> previous_level;

  for (std::uint32_t len = 1; len <= max_size; ++len) {
    counts.clear();
    for (const auto& seq : sequences) {
      if (seq.size() < len) continue;
      seen.clear();
      for (std::size_t off = 0; off + len <= seq.size(); ++off) {
        std::span<const ItemId> window(seq.data() + off, len);
        if (len > 1) {
          // both borders must already be frequent
          if (!previous_level.count(PatternSet::key(window.subspan(0, len - 1))) ||
              !previous_level.count(PatternSet::key(window.subspan(1, len - 1))))
            continue;
        }
        auto [it, fresh] = seen.emplace(PatternSet::key(window));
        if (fresh) ++counts[*it];
      }
    }
    previous_level.clear();
    for (const auto& [k, c] : counts)
      if (c >= min_count) {
        previous_level.insert(k);
        std::vector<ItemId> items(k.size() / sizeof(ItemId));
        std::memcpy(items.data(), k.data(), k.size());
        f.insert(items, c);
      }
    if (previous_level.empty()) break;
  }
  return f;
}

// The context chosen for one user prefix: the matched items, where in the
// prefix they matched, and whether the matcher had to fall back to the
// most recent item because nothing in the prefix belongs to F.
struct MatchedContext {
  std::vector<ItemId> items;
  std::vector<std::uint32_t> positions;  // 0-based indices into the prefix
  bool is_fallback = false;
};

// Backward greedy wildcard matcher. Scanning from the most recent item,
// the first item found in F seeds the path; an earlier item is prepended
// only when the extended string is itself in F. Skipped items act as
// wildcards. Falls back to the single most recent item when no prefix
// item belongs to F.
inline MatchedContext match_context(std::span<const ItemId> prefix,
                                    const PatternSet& f) {
  if (prefix.empty())
    throw std::invalid_argument("match_context: empty prefix");
  MatchedContext ctx;
  std::string path_key;
  for (std::size_t n = prefix.size(); n-- > 0;) {
    const ItemId item = prefix[n];
    const std::string extended =
        PatternSet::key(std::span<const ItemId>(&item, 1)) + path_key;
    if (ctx.items.empty()) {
      if (f.contains_key(extended)) {
        path_key = extended;
        ctx.items.push_back(item);
        ctx.positions.push_back(static_cast<std::uint32_t>(n));
      }
    } else if (f.contains_key(extended)) {
      path_key = extended;
      ctx.items.insert(ctx.items.begin(), item);
      ctx.positions.insert(ctx.positions.begin(), static_cast<std::uint32_t>(n));
    }
  }
  if (ctx.items.empty()) {
    ctx.items.push_back(prefix.back());
    ctx.positions.push_back(static_cast<std::uint32_t>(prefix.size() - 1));
    ctx.is_fallback = true;
  }
  return ctx;
}

// Context taxonomy used by the pattern statistics report.
//   NoMatch -- nothing in the prefix belongs to F (fallback)
//   MC1     -- single matched item, the most recent one
//   MC1Old  -- single matched item, older than the most recent one
//   MCL     -- contiguous multi-item match ending at the most recent item
//   Seq     -- anything else (gaps, or not anchored at the end)
enum class MatchClass { NoMatch, MC1, MC1Old, MCL, Seq };

inline const char* match_class_name(MatchClass c) {
  switch (c) {
    case MatchClass::NoMatch: return "no_match";
    case MatchClass::MC1: return "mc1";
    case MatchClass::MC1Old: return "mc1_old";
    case MatchClass::MCL: return "mc_l";
    case MatchClass::Seq: return "seq";
  }
  return "?";
}

inline MatchClass classify_match(std::span<const ItemId> prefix,
                                 const MatchedContext& ctx) {
  const auto last_index = static_cast<std::uint32_t>(prefix.size() - 1);
  if (ctx.is_fallback) return MatchClass::NoMatch;
  if (ctx.items.size() == 1)
    return ctx.positions.front() == last_index ? MatchClass::MC1
                                               : MatchClass::MC1Old;
  bool contiguous = true;
  for (std::size_t i = 1; i < ctx.positions.size(); ++i)
    if (ctx.positions[i] != ctx.positions[i - 1] + 1) contiguous = false;
  if (contiguous && ctx.positions.back() == last_index) return MatchClass::MCL;
  return MatchClass::Seq;
}

// Span covered in the prefix: last matched position - first + 1.
inline std::uint32_t match_occupation(const MatchedContext& ctx) {
  return ctx.positions.back() - ctx.positions.front() + 1;
}

}  // namespace rebus
