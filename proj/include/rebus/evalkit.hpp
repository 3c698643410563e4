#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rebus/common.hpp"
#include "rebus/corpus.hpp"
#include "rebus/model.hpp"
#include "rebus/seqmine.hpp"

namespace rebus {

// A scorer assigns a score to every item for one user state. The ranking
// pipeline is shared by the model and the baselines; only this differs.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<double> score_items(UserId u,
                                          std::span<const ItemId> prefix) const = 0;
};

class ModelScorer : public Scorer {
 public:
  explicit ModelScorer(const ModelBundle& bundle) : bundle_(&bundle) {}

  std::vector<double> score_items(UserId, std::span<const ItemId> prefix) const override {
    const ScoreContext ctx = build_context(prefix, bundle_->patterns, bundle_->hyper);
    return score_all(bundle_->params, bundle_->hyper, ctx);
  }

 private:
  const ModelBundle* bundle_;
};

// Training interaction counts, identical for every user.
class PopScorer : public Scorer {
 public:
  explicit PopScorer(std::vector<double> counts) : counts_(std::move(counts)) {}

  std::vector<double> score_items(UserId, std::span<const ItemId>) const override {
    return counts_;
  }

 private:
  std::vector<double> counts_;
};

// Uniform noise, deterministic per (seed, user); the null model for
// calibration checks.
class RandomScorer : public Scorer {
 public:
  RandomScorer(std::uint32_t num_items, std::uint64_t seed)
      : num_items_(num_items), seed_(seed) {}

  std::vector<double> score_items(UserId u, std::span<const ItemId>) const override {
    Rng rng(fork_seed(seed_, "random-scorer") ^
            (0x9e3779b97f4a7c15ull * (u + 1)));
    std::vector<double> s(num_items_);
    for (auto& v : s) v = rng.next_double();
    return s;
  }

 private:
  std::uint32_t num_items_;
  std::uint64_t seed_;
};

inline std::vector<std::uint32_t> train_popularity(const SplitDataset& split) {
  std::vector<std::uint32_t> counts(split.num_items, 0);
  for (const auto& tr : split.train)
    for (ItemId i : tr) ++counts[i];
  return counts;
}

inline PopScorer pop_baseline(const SplitDataset& split) {
  const auto counts = train_popularity(split);
  return PopScorer(std::vector<double>(counts.begin(), counts.end()));
}

struct RankingOutcome {
  UserId user = 0;
  std::uint32_t gt_rank = 0;  // 1-based among candidates
  std::uint32_t num_candidates = 0;
  std::vector<ItemId> top_items;
};

// Ranks the ground truth among every item the user has not interacted
// with (the ground truth itself always stays rankable). Ties rank by
// ascending id and therefore count against the model.
inline RankingOutcome rank_with_scores(std::span<const double> scores, UserId u,
                                       std::span<const ItemId> sorted_excluded,
                                       ItemId target, std::uint32_t top_k) {
  RankingOutcome out;
  out.user = u;
  const auto num_items = static_cast<ItemId>(scores.size());
  const double target_score = scores[target];
  std::vector<ItemId> candidates;
  candidates.reserve(num_items);
  std::uint32_t better = 0;
  for (ItemId i = 0; i < num_items; ++i) {
    if (i != target &&
        std::binary_search(sorted_excluded.begin(), sorted_excluded.end(), i))
      continue;
    candidates.push_back(i);
    if (i != target && ranks_before(scores[i], i, target_score, target)) ++better;
  }
  out.num_candidates = static_cast<std::uint32_t>(candidates.size());
  out.gt_rank = better + 1;

  const std::size_t keep = std::min<std::size_t>(top_k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + keep,
                    candidates.end(), [&](ItemId a, ItemId b) {
                      return ranks_before(scores[a], a, scores[b], b);
                    });
  candidates.resize(keep);
  out.top_items = std::move(candidates);
  return out;
}

inline RankingOutcome rank_ground_truth(const Scorer& scorer,
                                        const SplitDataset& split, UserId u,
                                        std::uint32_t top_k = 50) {
  std::vector<ItemId> prefix = split.train[u];
  prefix.push_back(split.valid_item[u]);
  const std::vector<double> scores = scorer.score_items(u, prefix);
  return rank_with_scores(scores, u, split.excluded_candidates[u],
                          split.test_item[u], top_k);
}

// Mean of (C - rank) / (C - 1): the probability that the ground truth
// outranks a uniformly chosen unseen item. Users with fewer than two
// candidates cannot be ranked and are skipped.
inline double auc(std::span<const RankingOutcome> outcomes) {
  if (outcomes.empty()) throw std::invalid_argument("auc: no outcomes");
  double sum = 0.0;
  std::uint64_t counted = 0;
  for (const auto& o : outcomes) {
    if (o.num_candidates < 2) continue;
    sum += (static_cast<double>(o.num_candidates) - o.gt_rank) /
           (static_cast<double>(o.num_candidates) - 1.0);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

inline std::map<int, double> hit_rate(std::span<const RankingOutcome> outcomes,
                                      std::span<const int> cutoffs) {
  std::map<int, double> out;
  for (int x : cutoffs) {
    std::uint64_t hits = 0;
    for (const auto& o : outcomes) hits += o.gt_rank <= static_cast<std::uint32_t>(x);
    out[x] = outcomes.empty() ? 0.0 : double(hits) / double(outcomes.size());
  }
  return out;
}

inline std::map<int, double> ndcg(std::span<const RankingOutcome> outcomes,
                                  std::span<const int> cutoffs) {
  std::map<int, double> out;
  for (int x : cutoffs) {
    double sum = 0.0;
    for (const auto& o : outcomes)
      if (o.gt_rank <= static_cast<std::uint32_t>(x))
        sum += 1.0 / std::log2(static_cast<double>(o.gt_rank) + 1.0);
    out[x] = outcomes.empty() ? 0.0 : sum / double(outcomes.size());
  }
  return out;
}

// POP_X: share of recommended slots taken by one of the X globally most
// popular training items. DIV_X: unique recommended items over catalog
// size (aggregate diversity). Both read the stored per-user top lists.
inline void pop_div(std::span<const RankingOutcome> outcomes,
                    std::span<const std::uint32_t> popularity,
                    std::uint32_t num_items, std::span<const int> x_values,
                    std::map<int, double>& pop_out, std::map<int, double>& div_out) {
  std::vector<ItemId> by_popularity(num_items);
  for (ItemId i = 0; i < num_items; ++i) by_popularity[i] = i;
  std::sort(by_popularity.begin(), by_popularity.end(), [&](ItemId a, ItemId b) {
    return popularity[a] != popularity[b] ? popularity[a] > popularity[b] : a < b;
  });

  for (int x : x_values) {
    std::vector<char> is_popular(num_items, 0);
    for (int p = 0; p < x && p < static_cast<int>(num_items); ++p)
      is_popular[by_popularity[p]] = 1;

    std::uint64_t slots = 0, popular_slots = 0;
    std::vector<char> recommended(num_items, 0);
    for (const auto& o : outcomes) {
      const std::size_t take = std::min<std::size_t>(x, o.top_items.size());
      for (std::size_t p = 0; p < take; ++p) {
        ++slots;
        popular_slots += is_popular[o.top_items[p]];
        recommended[o.top_items[p]] = 1;
      }
    }
    std::uint64_t unique = 0;
    for (char r : recommended) unique += r;
    pop_out[x] = slots == 0 ? 0.0 : double(popular_slots) / double(slots);
    div_out[x] = num_items == 0 ? 0.0 : double(unique) / double(num_items);
  }
}

struct PatternStats {
  // fraction of evaluation prefixes per context class, summing to 1
  std::map<MatchClass, double> class_share;
  double mean_size = 0.0;        // over matched (non-fallback) prefixes
  double mean_occupation = 0.0;
  std::uint64_t num_prefixes = 0;
  std::uint64_t num_matched = 0;
};

inline PatternStats pattern_stats_over(
    const PatternSet& f, const std::vector<std::vector<ItemId>>& prefixes) {
  PatternStats st;
  std::map<MatchClass, std::uint64_t> counts;
  for (MatchClass c : {MatchClass::NoMatch, MatchClass::MC1, MatchClass::MC1Old,
                       MatchClass::MCL, MatchClass::Seq})
    counts[c] = 0;
  double size_sum = 0.0, occ_sum = 0.0;
  for (const auto& prefix : prefixes) {
    const MatchedContext ctx = match_context(prefix, f);
    const MatchClass cls = classify_match(prefix, ctx);
    ++counts[cls];
    ++st.num_prefixes;
    if (cls != MatchClass::NoMatch) {
      ++st.num_matched;
      size_sum += static_cast<double>(ctx.items.size());
      occ_sum += static_cast<double>(match_occupation(ctx));
    }
  }
  for (const auto& [cls, n] : counts)
    st.class_share[cls] =
        st.num_prefixes == 0 ? 0.0 : double(n) / double(st.num_prefixes);
  if (st.num_matched > 0) {
    st.mean_size = size_sum / static_cast<double>(st.num_matched);
    st.mean_occupation = occ_sum / static_cast<double>(st.num_matched);
  }
  return st;
}

inline PatternStats pattern_stats(const PatternSet& f, const SplitDataset& split) {
  std::vector<std::vector<ItemId>> prefixes(split.num_users);
  for (UserId u = 0; u < split.num_users; ++u) {
    prefixes[u] = split.train[u];
    prefixes[u].push_back(split.valid_item[u]);
  }
  return pattern_stats_over(f, prefixes);
}

struct EvalReport {
  double auc = 0.0;
  std::map<int, double> hit;   // cutoffs 5, 10, 25, 50
  std::map<int, double> ndcg;  // same cutoffs
  std::map<int, double> pop;   // cutoffs 1, 5, 25
  std::map<int, double> div;
  PatternStats patterns;
  bool has_pattern_stats = false;
  std::uint64_t num_users = 0;
  bool empty = false;             // e.g. no cold-start users
  double runtime_seconds = 0.0;   // not serialized: reports must be reproducible

  nlohmann::json to_json() const {
    nlohmann::json j{{"auc", auc}, {"num_users", num_users}, {"empty", empty}};
    const std::pair<const char*, const std::map<int, double>*> metrics[] = {
        {"hit", &hit}, {"ndcg", &ndcg}, {"pop", &pop}, {"div", &div}};
    for (const auto& [name, m] : metrics) {
      nlohmann::json sub;
      for (const auto& [x, v] : *m) sub[std::to_string(x)] = v;
      j[name] = sub;
    }
    if (has_pattern_stats) {
      nlohmann::json ps;
      for (const auto& [cls, share] : patterns.class_share)
        ps[match_class_name(cls)] = share;
      ps["mean_size"] = patterns.mean_size;
      ps["mean_occupation"] = patterns.mean_occupation;
      ps["num_prefixes"] = patterns.num_prefixes;
      ps["num_matched"] = patterns.num_matched;
      j["pattern_stats"] = ps;
    }
    return j;
  }

  // One row per metric and cutoff.
  std::string to_csv() const {
    std::string out = "metric,cutoff,value\n";
    out += "auc,," + fmt_double(auc) + "\n";
    for (const auto& [x, v] : hit)
      out += "hit," + std::to_string(x) + "," + fmt_double(v) + "\n";
    for (const auto& [x, v] : ndcg)
      out += "ndcg," + std::to_string(x) + "," + fmt_double(v) + "\n";
    for (const auto& [x, v] : pop)
      out += "pop," + std::to_string(x) + "," + fmt_double(v) + "\n";
    for (const auto& [x, v] : div)
      out += "div," + std::to_string(x) + "," + fmt_double(v) + "\n";
    return out;
  }
};

inline std::string pattern_stats_csv(const PatternStats& st) {
  std::string out = "no_match,mc1,mc1_old,mc_l,seq,mean_size,mean_occupation\n";
  bool first = true;
  for (MatchClass c : {MatchClass::NoMatch, MatchClass::MC1, MatchClass::MC1Old,
                       MatchClass::MCL, MatchClass::Seq}) {
    if (!first) out += ",";
    out += fmt_double(st.class_share.at(c));
    first = false;
  }
  out += "," + fmt_double(st.mean_size) + "," + fmt_double(st.mean_occupation) + "\n";
  return out;
}

inline std::vector<RankingOutcome> evaluate_all(const Scorer& scorer,
                                                const SplitDataset& split,
                                                std::uint32_t top_k = 50) {
  std::vector<RankingOutcome> outcomes(split.num_users);
  parallel_for(split.num_users, [&](std::size_t u) {
    outcomes[u] = rank_ground_truth(scorer, split, static_cast<UserId>(u), top_k);
  });
  return outcomes;
}

inline constexpr int kHitCutoffs[] = {5, 10, 25, 50};
inline constexpr int kPopCutoffs[] = {1, 5, 25};

inline EvalReport build_report(std::span<const RankingOutcome> outcomes,
                               std::span<const std::uint32_t> popularity,
                               std::uint32_t num_items) {
  EvalReport rep;
  rep.num_users = outcomes.size();
  if (outcomes.empty()) {
    rep.empty = true;
    return rep;
  }
  rep.auc = auc(outcomes);
  rep.hit = hit_rate(outcomes, kHitCutoffs);
  rep.ndcg = ndcg(outcomes, kHitCutoffs);
  pop_div(outcomes, popularity, num_items, kPopCutoffs, rep.pop, rep.div);
  return rep;
}

inline EvalReport evaluate(const Scorer& scorer, const SplitDataset& split,
                           const PatternSet* patterns_for_stats = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto outcomes = evaluate_all(scorer, split);
  const auto popularity = train_popularity(split);
  EvalReport rep = build_report(outcomes, popularity, split.num_items);
  if (patterns_for_stats) {
    rep.patterns = pattern_stats(*patterns_for_stats, split);
    rep.has_pattern_stats = true;
  }
  rep.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

// Cold-start evaluation: users unseen at training time, ranked with the
// main model over their 1..4 item histories. The held-out most recent
// item is ranked against everything outside the history.
inline EvalReport cold_start_eval(const ModelBundle& bundle,
                                  const ColdStartPartition& partition) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = partition.cold_histories.size();
  EvalReport rep;
  if (n == 0) {
    rep.empty = true;
    return rep;
  }
  const ModelScorer scorer(bundle);
  std::vector<RankingOutcome> outcomes(n);
  parallel_for(n, [&](std::size_t c) {
    const auto& hist = partition.cold_histories[c];
    std::vector<ItemId> excluded(hist.begin(), hist.end());
    std::sort(excluded.begin(), excluded.end());
    excluded.erase(std::unique(excluded.begin(), excluded.end()), excluded.end());
    const auto scores = scorer.score_items(static_cast<UserId>(c), hist);
    outcomes[c] = rank_with_scores(scores, static_cast<UserId>(c), excluded,
                                   partition.cold_test_item[c], 50);
  });
  const SplitDataset main_split = split(partition.main);
  const auto popularity = train_popularity(main_split);
  rep = build_report(outcomes, popularity, partition.main.num_items);
  rep.patterns = pattern_stats_over(bundle.patterns, partition.cold_histories);
  rep.has_pattern_stats = true;
  rep.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace rebus
