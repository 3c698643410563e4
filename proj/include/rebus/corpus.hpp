#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "rebus/common.hpp"

namespace rebus {

struct RawEvent {
  std::string user_key;
  std::string item_key;
  std::int64_t timestamp = 0;  // ordering key only
};

// Integer-reindexed interaction corpus. Sequences are per-user and
// chronological, oldest first. Produced by ingest(); a loaded instance is
// immutable and safe to share across threads.
struct Dataset {
  std::uint32_t num_users = 0;
  std::uint32_t num_items = 0;
  std::vector<std::vector<ItemId>> sequences;
  std::vector<std::uint32_t> item_popularity;  // interaction count per item
  std::vector<std::string> user_keys;          // original keys, index = dense id
  std::vector<std::string> item_keys;

  std::uint64_t num_actions() const {
    std::uint64_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }

  void validate() const {
    if (sequences.size() != num_users || user_keys.size() != num_users ||
        item_keys.size() != num_items || item_popularity.size() != num_items)
      throw InputError("dataset: inconsistent table sizes");
    std::vector<std::uint64_t> counts(num_items, 0);
    for (const auto& s : sequences)
      for (ItemId i : s) {
        if (i >= num_items) throw InputError("dataset: item id out of range");
        ++counts[i];
      }
    for (std::uint32_t i = 0; i < num_items; ++i)
      if (counts[i] != item_popularity[i])
        throw InputError("dataset: popularity does not match sequences");
  }

  void write(BinWriter& w) const {
    w.magic("REBUSDAT");
    w.u32(1);
    w.u32(num_users);
    w.u32(num_items);
    w.u64(num_actions());
    for (const auto& s : sequences) {
      w.u32(static_cast<std::uint32_t>(s.size()));
      for (ItemId i : s) w.u32(i);
    }
    for (std::uint32_t c : item_popularity) w.u32(c);
    for (const auto& k : user_keys) w.str(k);
    for (const auto& k : item_keys) w.str(k);
  }

  static Dataset read(BinReader& r) {
    r.expect_magic("REBUSDAT");
    if (r.u32() != 1) throw InputError("dataset: unsupported version");
    Dataset d;
    d.num_users = r.u32();
    d.num_items = r.u32();
    const std::uint64_t actions = r.u64();
    d.sequences.resize(d.num_users);
    for (auto& s : d.sequences) {
      s.resize(r.u32());
      for (auto& i : s) i = r.u32();
    }
    d.item_popularity.resize(d.num_items);
    for (auto& c : d.item_popularity) c = r.u32();
    d.user_keys.resize(d.num_users);
    for (auto& k : d.user_keys) k = r.str();
    d.item_keys.resize(d.num_items);
    for (auto& k : d.item_keys) k = r.str();
    if (d.num_actions() != actions)
      throw InputError("dataset: action count mismatch");
    d.validate();
    return d;
  }

  // Hash of the serialized form; recorded in model bundles.
  std::uint64_t content_hash() const {
    BinWriter w;
    write(w);
    return w.content_hash();
  }

  // Writes the binary file plus a human-readable .json sidecar.
  void save(const std::filesystem::path& path) const {
    BinWriter w;
    write(w);
    w.save(path);
    nlohmann::json meta{{"format", "rebusdata"},
                        {"version", 1},
                        {"num_users", num_users},
                        {"num_items", num_items},
                        {"num_actions", num_actions()},
                        {"content_hash", hex64(w.content_hash())}};
    std::filesystem::path side = path;
    side.replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + side.string());
    out << meta.dump(2) << "\n";
  }

  static Dataset load(const std::filesystem::path& path) {
    BinReader r = BinReader::from_file(path);
    return read(r);
  }
};

// Leave-one-out split: per user the most recent item is the test target,
// the second most recent the validation target, the rest trains.
struct SplitDataset {
  std::uint32_t num_users = 0;
  std::uint32_t num_items = 0;
  std::vector<std::vector<ItemId>> train;
  std::vector<ItemId> valid_item;
  std::vector<ItemId> test_item;
  // items in train ∪ {valid}, sorted unique; omitted from ranking except
  // when one of them is the ground truth itself
  std::vector<std::vector<ItemId>> excluded_candidates;
};

struct ColdStartPartition {
  Dataset main;
  // histories use main's item ids; each has 1..4 items plus one test item
  std::vector<std::vector<ItemId>> cold_histories;
  std::vector<ItemId> cold_test_item;
  std::vector<std::string> cold_user_keys;

  void save_cold(const std::filesystem::path& path) const {
    BinWriter w;
    w.magic("REBUSCLD");
    w.u32(1);
    w.u32(static_cast<std::uint32_t>(cold_histories.size()));
    for (std::size_t c = 0; c < cold_histories.size(); ++c) {
      w.str(cold_user_keys[c]);
      w.u32(static_cast<std::uint32_t>(cold_histories[c].size()));
      for (ItemId i : cold_histories[c]) w.u32(i);
      w.u32(cold_test_item[c]);
    }
    w.save(path);
  }

  // Loads the cold-user side; `main` must be supplied by the caller.
  static ColdStartPartition load_cold(const std::filesystem::path& path,
                                      Dataset main) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("REBUSCLD");
    if (r.u32() != 1) throw InputError("cold partition: unsupported version");
    ColdStartPartition p;
    p.main = std::move(main);
    const std::uint32_t n = r.u32();
    p.cold_histories.resize(n);
    p.cold_test_item.resize(n);
    p.cold_user_keys.resize(n);
    for (std::uint32_t c = 0; c < n; ++c) {
      p.cold_user_keys[c] = r.str();
      auto& hist = p.cold_histories[c];
      hist.resize(r.u32());
      for (auto& i : hist) i = r.u32();
      p.cold_test_item[c] = r.u32();
      if (hist.empty() || hist.size() > 4)
        throw InputError("cold partition: history length out of range");
      for (ItemId i : hist)
        if (i >= p.main.num_items)
          throw InputError("cold partition: item id out of range");
      if (p.cold_test_item[c] >= p.main.num_items)
        throw InputError("cold partition: test item out of range");
    }
    return p;
  }
};

// --- event parsing -------------------------------------------------------

// Delimited text, one event per line: user, item, timestamp. The delimiter
// is auto-detected (tab or comma). A fourth column, when present, is taken
// as the timestamp and the third (a rating) is ignored. A non-numeric
// first line is skipped as a header.
inline std::vector<RawEvent> read_events(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open: " + path.string());
  std::vector<RawEvent> events;
  std::string line;
  std::size_t line_no = 0;
  char delim = '\0';
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (delim == '\0') delim = line.find('\t') != std::string::npos ? '\t' : ',';

    std::vector<std::string> cols;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, delim)) cols.push_back(field);
    if (cols.size() < 3)
      throw InputError("line " + std::to_string(line_no) +
                       ": expected at least 3 columns");

    const std::string& ts_field = cols.size() >= 4 ? cols[3] : cols[2];
    std::int64_t ts = 0;
    try {
      std::size_t used = 0;
      ts = std::stoll(ts_field, &used);
      if (used != ts_field.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      if (line_no == 1) continue;  // header row
      throw InputError("line " + std::to_string(line_no) +
                       ": bad timestamp '" + ts_field + "'");
    }
    if (cols[0].empty() || cols[1].empty())
      throw InputError("line " + std::to_string(line_no) +
                       ": empty user or item key");
    events.push_back(RawEvent{cols[0], cols[1], ts});
  }
  return events;
}

// --- ingestion -----------------------------------------------------------

namespace detail {

struct IndexedEvent {
  std::uint32_t user;  // provisional index, first-appearance order
  std::uint32_t item;
  std::int64_t timestamp;
  std::uint64_t order;  // input position, breaks timestamp ties
};

struct EventTable {
  std::vector<IndexedEvent> events;
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;
};

inline EventTable index_events(const std::vector<RawEvent>& raw) {
  EventTable t;
  std::unordered_map<std::string, std::uint32_t> users, items;
  t.events.reserve(raw.size());
  for (std::size_t n = 0; n < raw.size(); ++n) {
    const auto& e = raw[n];
    auto [uit, unew] = users.emplace(e.user_key,
                                     static_cast<std::uint32_t>(users.size()));
    if (unew) t.user_keys.push_back(e.user_key);
    auto [iit, inew] = items.emplace(e.item_key,
                                     static_cast<std::uint32_t>(items.size()));
    if (inew) t.item_keys.push_back(e.item_key);
    t.events.push_back(IndexedEvent{uit->second, iit->second, e.timestamp,
                                    static_cast<std::uint64_t>(n)});
  }
  return t;
}

// Iterated 5-core: drop users and items with fewer than five surviving
// interactions until nothing changes. Returns per-event alive flags.
inline std::vector<char> five_core(const EventTable& t) {
  std::vector<char> alive(t.events.size(), 1);
  std::vector<std::uint32_t> ucount(t.user_keys.size());
  std::vector<std::uint32_t> icount(t.item_keys.size());
  bool changed = true;
  while (changed) {
    changed = false;
    std::fill(ucount.begin(), ucount.end(), 0);
    std::fill(icount.begin(), icount.end(), 0);
    for (std::size_t n = 0; n < t.events.size(); ++n)
      if (alive[n]) {
        ++ucount[t.events[n].user];
        ++icount[t.events[n].item];
      }
    for (std::size_t n = 0; n < t.events.size(); ++n)
      if (alive[n] && (ucount[t.events[n].user] < 5 ||
                       icount[t.events[n].item] < 5)) {
        alive[n] = 0;
        changed = true;
      }
  }
  return alive;
}

}  // namespace detail

// Converts raw events to implicit feedback, applies iterated 5-core
// filtering, densely reindexes survivors, and sorts each user's sequence
// chronologically (input order breaks timestamp ties).
inline Dataset ingest(const std::vector<RawEvent>& events) {
  if (events.empty()) throw InputError("no qualifying users: empty event stream");
  detail::EventTable t = detail::index_events(events);
  std::vector<char> alive = detail::five_core(t);

  constexpr std::uint32_t kUnmapped = 0xffffffffu;
  std::vector<std::uint32_t> umap(t.user_keys.size(), kUnmapped);
  std::vector<std::uint32_t> imap(t.item_keys.size(), kUnmapped);
  Dataset d;
  for (const auto& e : t.events) {
    if (!alive[e.order]) continue;
    if (umap[e.user] == kUnmapped) {
      umap[e.user] = d.num_users++;
      d.user_keys.push_back(t.user_keys[e.user]);
    }
    if (imap[e.item] == kUnmapped) {
      imap[e.item] = d.num_items++;
      d.item_keys.push_back(t.item_keys[e.item]);
    }
  }
  if (d.num_users == 0) throw InputError("no qualifying users");

  std::vector<std::vector<detail::IndexedEvent>> per_user(d.num_users);
  for (const auto& e : t.events)
    if (alive[e.order])
      per_user[umap[e.user]].push_back(
          detail::IndexedEvent{umap[e.user], imap[e.item], e.timestamp, e.order});

  d.sequences.resize(d.num_users);
  d.item_popularity.assign(d.num_items, 0);
  for (std::uint32_t u = 0; u < d.num_users; ++u) {
    auto& ev = per_user[u];
    std::sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp
                                        : a.order < b.order;
    });
    d.sequences[u].reserve(ev.size());
    for (const auto& e : ev) {
      d.sequences[u].push_back(e.item);
      ++d.item_popularity[e.item];
    }
  }
  return d;
}

inline Dataset ingest_file(const std::filesystem::path& path) {
  return ingest(read_events(path));
}

// Keeps each user's x most recent items and re-derives the item index;
// items that no longer appear anywhere are dropped, nothing else is
// re-filtered.
inline Dataset truncate_recent(const Dataset& d, std::size_t x) {
  if (x < 1) throw std::invalid_argument("truncate_recent: x must be >= 1");
  Dataset out;
  out.num_users = d.num_users;
  out.user_keys = d.user_keys;
  out.sequences.resize(d.num_users);

  constexpr std::uint32_t kUnmapped = 0xffffffffu;
  std::vector<std::uint32_t> imap(d.num_items, kUnmapped);
  std::vector<char> used(d.num_items, 0);
  for (std::uint32_t u = 0; u < d.num_users; ++u) {
    const auto& s = d.sequences[u];
    const std::size_t start = s.size() > x ? s.size() - x : 0;
    for (std::size_t p = start; p < s.size(); ++p) used[s[p]] = 1;
  }
  // keep the relative order of surviving item ids
  for (std::uint32_t i = 0; i < d.num_items; ++i)
    if (used[i]) {
      imap[i] = out.num_items++;
      out.item_keys.push_back(d.item_keys[i]);
    }
  out.item_popularity.assign(out.num_items, 0);
  for (std::uint32_t u = 0; u < d.num_users; ++u) {
    const auto& s = d.sequences[u];
    const std::size_t start = s.size() > x ? s.size() - x : 0;
    auto& t = out.sequences[u];
    t.reserve(s.size() - start);
    for (std::size_t p = start; p < s.size(); ++p) {
      t.push_back(imap[s[p]]);
      ++out.item_popularity[imap[s[p]]];
    }
  }
  return out;
}

// Truncates the main part and remaps the cold users into the re-derived
// item index. Cold interactions on items that vanished are dropped and
// the most-recent-is-test rule is re-applied; users left with fewer than
// two interactions are removed.
inline ColdStartPartition truncate_recent(const ColdStartPartition& p,
                                          std::size_t x) {
  ColdStartPartition out;
  out.main = truncate_recent(p.main, x);
  std::unordered_map<std::string, ItemId> new_id;
  for (ItemId i = 0; i < out.main.num_items; ++i)
    new_id.emplace(out.main.item_keys[i], i);

  for (std::size_t c = 0; c < p.cold_histories.size(); ++c) {
    std::vector<ItemId> remapped;
    for (ItemId old : p.cold_histories[c]) {
      auto it = new_id.find(p.main.item_keys[old]);
      if (it != new_id.end()) remapped.push_back(it->second);
    }
    auto test_it = new_id.find(p.main.item_keys[p.cold_test_item[c]]);
    if (test_it != new_id.end()) remapped.push_back(test_it->second);
    if (remapped.size() < 2) continue;
    out.cold_test_item.push_back(remapped.back());
    remapped.pop_back();
    if (remapped.size() > 4)
      remapped.erase(remapped.begin(), remapped.end() - 4);
    out.cold_histories.push_back(std::move(remapped));
    out.cold_user_keys.push_back(p.cold_user_keys[c]);
  }
  return out;
}

inline SplitDataset split(const Dataset& d) {
  SplitDataset s;
  s.num_users = d.num_users;
  s.num_items = d.num_items;
  s.train.resize(d.num_users);
  s.valid_item.resize(d.num_users);
  s.test_item.resize(d.num_users);
  s.excluded_candidates.resize(d.num_users);
  for (std::uint32_t u = 0; u < d.num_users; ++u) {
    const auto& seq = d.sequences[u];
    if (seq.size() < 3)
      throw InputError("user '" + d.user_keys[u] +
                       "' has fewer than 3 interactions; cannot split");
    s.test_item[u] = seq.back();
    s.valid_item[u] = seq[seq.size() - 2];
    s.train[u].assign(seq.begin(), seq.end() - 2);
    auto& ex = s.excluded_candidates[u];
    ex.assign(seq.begin(), seq.end() - 1);  // train + valid
    std::sort(ex.begin(), ex.end());
    ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
  }
  return s;
}

// Splits the corpus into the 5-core part and the cold-start users: users
// filtered out of the core whose remaining interactions all target core
// items. Each cold user keeps a 1..4 item history (most recent first
// dropped beyond 4) plus the most recent interaction as test target.
inline ColdStartPartition cold_start_split(const std::vector<RawEvent>& events) {
  ColdStartPartition p;
  p.main = ingest(events);

  std::unordered_set<std::string> main_users(p.main.user_keys.begin(),
                                             p.main.user_keys.end());
  std::unordered_map<std::string, ItemId> item_of;
  for (std::uint32_t i = 0; i < p.main.num_items; ++i)
    item_of.emplace(p.main.item_keys[i], i);

  struct ColdEvent {
    ItemId item;
    std::int64_t timestamp;
    std::uint64_t order;
  };
  std::unordered_map<std::string, std::vector<ColdEvent>> cold;
  std::vector<std::string> cold_order;  // first-appearance order
  for (std::size_t n = 0; n < events.size(); ++n) {
    const auto& e = events[n];
    if (main_users.count(e.user_key)) continue;
    auto it = item_of.find(e.item_key);
    if (it == item_of.end()) continue;  // drop interactions on unknown items
    auto [cit, fresh] = cold.try_emplace(e.user_key);
    if (fresh) cold_order.push_back(e.user_key);
    cit->second.push_back(
        ColdEvent{it->second, e.timestamp, static_cast<std::uint64_t>(n)});
  }

  for (const auto& key : cold_order) {
    auto& ev = cold.at(key);
    if (ev.size() < 2) continue;  // needs at least one history item + test
    std::sort(ev.begin(), ev.end(), [](const auto& a, const auto& b) {
      return a.timestamp != b.timestamp ? a.timestamp < b.timestamp
                                        : a.order < b.order;
    });
    std::vector<ItemId> hist;
    for (std::size_t i = 0; i + 1 < ev.size(); ++i) hist.push_back(ev[i].item);
    if (hist.size() > 4) hist.erase(hist.begin(), hist.end() - 4);
    p.cold_user_keys.push_back(key);
    p.cold_histories.push_back(std::move(hist));
    p.cold_test_item.push_back(ev.back().item);
  }
  return p;
}

}  // namespace rebus
