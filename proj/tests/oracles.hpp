// Independent reference implementations used to check the library. These
// deliberately avoid the library's own code paths: brute-force counting,
// direct formula evaluation, full sorts and finite differences.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "rebus/common.hpp"
#include "rebus/corpus.hpp"
#include "rebus/model.hpp"
#include "rebus/seqmine.hpp"
#include "rebus/trainer.hpp"

namespace oracle {

using rebus::ItemId;
using rebus::UserId;

// --- frequent substrings: enumerate everything, dedup per user ----------

inline std::map<std::vector<ItemId>, std::uint32_t> brute_force_mine(
    const std::vector<std::vector<ItemId>>& sequences, std::uint32_t min_count,
    std::uint32_t max_size) {
  std::map<std::vector<ItemId>, std::uint32_t> counts;
  for (const auto& seq : sequences) {
    std::set<std::vector<ItemId>> in_user;
    for (std::size_t off = 0; off < seq.size(); ++off)
      for (std::size_t len = 1; len <= max_size && off + len <= seq.size(); ++len)
        in_user.insert(std::vector<ItemId>(seq.begin() + off,
                                           seq.begin() + off + len));
    for (const auto& p : in_user) ++counts[p];
  }
  std::map<std::vector<ItemId>, std::uint32_t> frequent;
  for (const auto& [p, c] : counts)
    if (c >= min_count) frequent[p] = c;
  return frequent;
}

// --- iterated 5-core on raw (user, item) pairs ---------------------------

struct CoreResult {
  std::size_t surviving_events = 0;
  std::set<std::string> users;
  std::set<std::string> items;
};

inline CoreResult five_core_filter(const std::vector<rebus::RawEvent>& events) {
  std::vector<char> alive(events.size(), 1);
  bool changed = true;
  while (changed) {
    changed = false;
    std::map<std::string, int> ucount, icount;
    for (std::size_t n = 0; n < events.size(); ++n)
      if (alive[n]) {
        ++ucount[events[n].user_key];
        ++icount[events[n].item_key];
      }
    for (std::size_t n = 0; n < events.size(); ++n)
      if (alive[n] && (ucount[events[n].user_key] < 5 ||
                       icount[events[n].item_key] < 5)) {
        alive[n] = 0;
        changed = true;
      }
  }
  CoreResult r;
  for (std::size_t n = 0; n < events.size(); ++n)
    if (alive[n]) {
      ++r.surviving_events;
      r.users.insert(events[n].user_key);
      r.items.insert(events[n].item_key);
    }
  return r;
}

// --- cold-start partition rule, re-derived from scratch ------------------

struct ColdOracleUser {
  std::string key;
  std::vector<std::string> history_keys;  // chronological
  std::string test_key;
};

inline std::vector<ColdOracleUser> cold_partition(
    const std::vector<rebus::RawEvent>& events) {
  const CoreResult core = five_core_filter(events);
  std::map<std::string, std::vector<std::pair<std::size_t, std::string>>> rest;
  std::vector<std::string> order;
  for (std::size_t n = 0; n < events.size(); ++n) {
    const auto& e = events[n];
    if (core.users.count(e.user_key)) continue;
    if (!core.items.count(e.item_key)) continue;
    if (!rest.count(e.user_key)) order.push_back(e.user_key);
    rest[e.user_key].emplace_back(n, e.item_key);
  }
  std::vector<ColdOracleUser> out;
  for (const auto& key : order) {
    auto ev = rest.at(key);
    std::stable_sort(ev.begin(), ev.end(),
                     [&](const auto& a, const auto& b) {
                       return events[a.first].timestamp < events[b.first].timestamp;
                     });
    if (ev.size() < 2) continue;
    ColdOracleUser u;
    u.key = key;
    u.test_key = ev.back().second;
    for (std::size_t i = 0; i + 1 < ev.size(); ++i)
      u.history_keys.push_back(ev[i].second);
    if (u.history_keys.size() > 4)
      u.history_keys.erase(u.history_keys.begin(), u.history_keys.end() - 4);
    out.push_back(std::move(u));
  }
  return out;
}

// --- unified score, straight from the formula ----------------------------

inline double naive_score(const rebus::ModelParams& p, const rebus::Hyperparams& h,
                          const std::vector<ItemId>& window_items,
                          const std::vector<ItemId>& short_items,
                          ItemId candidate) {
  const std::uint32_t k = p.k;
  std::set<ItemId> window_set(window_items.begin(), window_items.end());
  window_set.erase(candidate);

  std::vector<double> lt(k, 0.0);
  if (!window_set.empty()) {
    for (ItemId j : window_set)
      for (std::uint32_t d = 0; d < k; ++d) lt[d] += p.row(j)[d];
    const double norm =
        std::pow(static_cast<double>(window_set.size()),
                 static_cast<double>(h.alpha));
    for (auto& v : lt) v /= norm;
  }

  std::vector<double> st(k, 0.0);
  if (!short_items.empty()) {
    const auto big_r = static_cast<double>(short_items.size());
    double denom = 0.0;
    for (std::size_t r = 1; r <= short_items.size(); ++r)
      denom += std::exp(static_cast<double>(r) / big_r - 1.0);
    for (std::size_t r = 1; r <= short_items.size(); ++r) {
      const double eta = std::exp(static_cast<double>(r) / big_r - 1.0) / denom;
      for (std::uint32_t d = 0; d < k; ++d)
        st[d] += eta * p.row(short_items[r - 1])[d];
    }
  }

  double w_lt = h.gamma, w_st = 1.0 - h.gamma;
  if (h.no_gamma) w_lt = w_st = 1.0;
  if (h.mode == rebus::ModelMode::LongTermOnly) {
    w_lt = 1.0;
    w_st = 0.0;
  } else if (h.mode == rebus::ModelMode::ShortTermOnly) {
    w_lt = 0.0;
    w_st = 1.0;
  }

  double dist = 0.0;
  for (std::uint32_t d = 0; d < k; ++d) {
    const double diff = w_lt * lt[d] + w_st * st[d] - p.row(candidate)[d];
    dist += diff * diff;
  }
  return -(p.biases[candidate] + dist);
}

// --- full-sort ranking ----------------------------------------------------

struct RankOracleResult {
  std::uint32_t gt_rank = 0;
  std::uint32_t num_candidates = 0;
  std::vector<ItemId> order;  // all candidates, best first
};

inline RankOracleResult rank_by_sort(const std::vector<double>& scores,
                                     const std::set<ItemId>& excluded,
                                     ItemId target) {
  RankOracleResult r;
  for (ItemId i = 0; i < scores.size(); ++i)
    if (i == target || !excluded.count(i)) r.order.push_back(i);
  std::stable_sort(r.order.begin(), r.order.end(), [&](ItemId a, ItemId b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  r.num_candidates = static_cast<std::uint32_t>(r.order.size());
  for (std::uint32_t pos = 0; pos < r.order.size(); ++pos)
    if (r.order[pos] == target) {
      r.gt_rank = pos + 1;
      break;
    }
  return r;
}

// --- finite differences over the batch objective -------------------------

inline double batch_objective(const rebus::ModelParams& params,
                              const rebus::Hyperparams& hyper,
                              const rebus::ContextCache& cache,
                              std::span<const rebus::Triple> batch) {
  double obj = rebus::bpr_loss_and_grad(params, hyper, cache, batch, nullptr);
  if (hyper.lambda_reg != 0.0) {
    double sq = 0.0;
    for (double e : params.embeddings) sq += e * e;
    for (double b : params.biases) sq += b * b;
    obj += hyper.lambda_reg * sq;
  }
  return obj;
}

struct FdCheck {
  double max_rel_err = 0.0;
};

inline FdCheck finite_difference_check(const rebus::ModelParams& params,
                                       const rebus::Hyperparams& hyper,
                                       const rebus::ContextCache& cache,
                                       std::span<const rebus::Triple> batch,
                                       double h = 1e-5) {
  rebus::GradBuffer grad;
  rebus::bpr_loss_and_grad(params, hyper, cache, batch, &grad);

  FdCheck check;
  rebus::ModelParams work = params;
  auto probe = [&](bool embedding, std::size_t idx, double analytic) {
    std::vector<double>& target = embedding ? work.embeddings : work.biases;
    const double saved = target[idx];
    target[idx] = saved + h;
    const double up = batch_objective(work, hyper, cache, batch);
    target[idx] = saved - h;
    const double down = batch_objective(work, hyper, cache, batch);
    target[idx] = saved;
    const double fd = (up - down) / (2.0 * h);
    const double denom = std::max({1e-6, std::abs(fd), std::abs(analytic)});
    check.max_rel_err = std::max(check.max_rel_err, std::abs(fd - analytic) / denom);
  };

  for (std::size_t i = 0; i < params.embeddings.size(); ++i)
    probe(true, i, grad.embeddings[i]);
  for (std::size_t i = 0; i < params.biases.size(); ++i)
    probe(false, i, grad.biases[i]);
  return check;
}

// --- backward wildcard matcher, independent transcription ------------------

struct ReferenceMatch {
  std::vector<ItemId> items;
  std::vector<std::uint32_t> positions;
  bool fallback = false;
};

inline ReferenceMatch reference_match(const std::vector<ItemId>& prefix,
                                      const std::set<std::vector<ItemId>>& f) {
  ReferenceMatch m;
  std::vector<ItemId> path;
  std::vector<std::uint32_t> where;
  for (std::size_t i = prefix.size(); i-- > 0;) {
    std::vector<ItemId> extended{prefix[i]};
    extended.insert(extended.end(), path.begin(), path.end());
    if (path.empty()) {
      if (f.count({prefix[i]})) {
        path = extended;
        where.insert(where.begin(), static_cast<std::uint32_t>(i));
      }
    } else if (f.count(extended)) {
      path = extended;
      where.insert(where.begin(), static_cast<std::uint32_t>(i));
    }
  }
  if (path.empty()) {
    m.items = {prefix.back()};
    m.positions = {static_cast<std::uint32_t>(prefix.size() - 1)};
    m.fallback = true;
  } else {
    m.items = path;
    m.positions = where;
  }
  return m;
}

// --- context class rules, reformulated ------------------------------------

inline rebus::MatchClass reference_classify(std::span<const ItemId> prefix,
                                            const rebus::MatchedContext& ctx) {
  if (ctx.is_fallback) return rebus::MatchClass::NoMatch;
  const bool anchored = ctx.positions.back() + 1 == prefix.size();
  const std::uint32_t span = ctx.positions.back() - ctx.positions.front() + 1;
  const bool gapless = span == ctx.items.size();
  if (ctx.items.size() == 1)
    return anchored ? rebus::MatchClass::MC1 : rebus::MatchClass::MC1Old;
  if (gapless && anchored) return rebus::MatchClass::MCL;
  return rebus::MatchClass::Seq;
}

// --- synthetic corpora ----------------------------------------------------

inline rebus::Dataset sequences_to_dataset(
    std::vector<std::vector<ItemId>> sequences, std::uint32_t num_items) {
  rebus::Dataset d;
  d.num_users = static_cast<std::uint32_t>(sequences.size());
  d.num_items = num_items;
  d.sequences = std::move(sequences);
  d.item_popularity.assign(num_items, 0);
  for (const auto& s : d.sequences)
    for (ItemId i : s) ++d.item_popularity[i];
  for (std::uint32_t u = 0; u < d.num_users; ++u)
    d.user_keys.push_back("u" + std::to_string(u));
  for (std::uint32_t i = 0; i < num_items; ++i)
    d.item_keys.push_back("i" + std::to_string(i));
  return d;
}

// Memoryless corpus: every position uniform over the catalog. The test
// item carries no signal, so any scorer should calibrate to AUC 1/2.
inline rebus::Dataset make_uniform_dataset(std::uint32_t num_users,
                                           std::uint32_t num_items,
                                           std::uint32_t seq_len,
                                           std::uint64_t seed) {
  rebus::Rng rng(seed);
  std::vector<std::vector<ItemId>> seqs(num_users);
  for (auto& s : seqs) {
    s.reserve(seq_len);
    for (std::uint32_t t = 0; t < seq_len; ++t)
      s.push_back(static_cast<ItemId>(rng.next_below(num_items)));
  }
  return sequences_to_dataset(std::move(seqs), num_items);
}

// Corpus with planted transition structure: item triples (3c, 3c+1, 3c+2)
// always appear as a block, mixed with uniform noise blocks. The final
// block is always a chain, so the held-out items complete a planted
// transition that a sequence-aware model can learn.
struct PlantedConfig {
  std::uint32_t num_users = 2000;
  std::uint32_t num_chains = 10;
  std::uint32_t noise_items = 30;
  std::uint32_t blocks = 4;  // 3 items each; the last block is a chain
  double chain_prob = 0.7;
  std::uint64_t seed = 1234;
};

inline rebus::Dataset make_planted_dataset(const PlantedConfig& cfg) {
  rebus::Rng rng(cfg.seed);
  const std::uint32_t chain_items = 3 * cfg.num_chains;
  const std::uint32_t num_items = chain_items + cfg.noise_items;
  std::vector<std::vector<ItemId>> seqs(cfg.num_users);
  for (auto& s : seqs) {
    for (std::uint32_t b = 0; b + 1 < cfg.blocks; ++b) {
      if (rng.next_double() < cfg.chain_prob) {
        const auto c = static_cast<ItemId>(rng.next_below(cfg.num_chains));
        s.push_back(3 * c);
        s.push_back(3 * c + 1);
        s.push_back(3 * c + 2);
      } else {
        for (int n = 0; n < 3; ++n)
          s.push_back(chain_items +
                      static_cast<ItemId>(rng.next_below(cfg.noise_items)));
      }
    }
    const auto c = static_cast<ItemId>(rng.next_below(cfg.num_chains));
    s.push_back(3 * c);
    s.push_back(3 * c + 1);
    s.push_back(3 * c + 2);
  }
  return sequences_to_dataset(std::move(seqs), num_items);
}

// Random raw events for ingest-level tests.
inline std::vector<rebus::RawEvent> make_random_events(std::uint32_t num_users,
                                                       std::uint32_t num_items,
                                                       std::uint32_t per_user,
                                                       std::uint64_t seed) {
  rebus::Rng rng(seed);
  std::vector<rebus::RawEvent> events;
  for (std::uint32_t u = 0; u < num_users; ++u)
    for (std::uint32_t t = 0; t < per_user; ++t)
      events.push_back(rebus::RawEvent{
          "u" + std::to_string(u),
          "i" + std::to_string(rng.next_below(num_items)),
          static_cast<std::int64_t>(1000 + t)});
  return events;
}

// Split with arbitrary per-user training sequences; valid/test items are
// placeholders for tests that only exercise training-side machinery.
inline rebus::SplitDataset make_split(std::vector<std::vector<ItemId>> train,
                                      std::uint32_t num_items) {
  rebus::SplitDataset s;
  s.num_users = static_cast<std::uint32_t>(train.size());
  s.num_items = num_items;
  s.train = std::move(train);
  s.valid_item.resize(s.num_users);
  s.test_item.resize(s.num_users);
  s.excluded_candidates.resize(s.num_users);
  for (std::uint32_t u = 0; u < s.num_users; ++u) {
    s.valid_item[u] = s.train[u].back();
    s.test_item[u] = s.train[u].front();
    auto& ex = s.excluded_candidates[u];
    ex = s.train[u];
    ex.push_back(s.valid_item[u]);
    std::sort(ex.begin(), ex.end());
    ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
  }
  return s;
}

inline rebus::ModelParams random_params(std::uint32_t num_items, std::uint32_t k,
                                        std::uint64_t seed, double scale = 1.0) {
  rebus::ModelParams p;
  p.resize(num_items, k);
  rebus::Rng rng(seed);
  for (auto& e : p.embeddings) e = rng.next_uniform(-scale, scale);
  for (auto& b : p.biases) b = rng.next_uniform(-scale, scale);
  return p;
}

}  // namespace oracle
