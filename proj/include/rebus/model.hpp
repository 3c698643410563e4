#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rebus/common.hpp"
#include "rebus/seqmine.hpp"

namespace rebus {

enum class ModelMode : std::uint8_t { Full = 0, LongTermOnly = 1, ShortTermOnly = 2 };

inline const char* mode_name(ModelMode m) {
  switch (m) {
    case ModelMode::Full: return "full";
    case ModelMode::LongTermOnly: return "lt";
    case ModelMode::ShortTermOnly: return "st";
  }
  return "?";
}

inline ModelMode mode_from_name(const std::string& s) {
  if (s == "full") return ModelMode::Full;
  if (s == "lt") return ModelMode::LongTermOnly;
  if (s == "st") return ModelMode::ShortTermOnly;
  throw InputError("unknown mode '" + s + "' (expected full|lt|st)");
}

struct Hyperparams {
  std::uint32_t k = 10;        // embedding dimension
  double alpha = 1.0;          // long-term normalization exponent, in (0,1]
  double gamma = 0.5;          // long/short trade-off, in [0,1]
  bool no_gamma = false;       // use LT + ST unweighted
  double lambda_reg = 0.0;
  std::uint32_t window = 0;    // long-term window; 0 = unbounded
  std::uint32_t min_count = 2;
  std::uint32_t max_size = 3;
  std::uint32_t mc_order = 0;  // fixed Markov order override; 0 = use matcher
  ModelMode mode = ModelMode::Full;

  void validate() const {
    if (k < 1) throw InputError("k must be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InputError("alpha must be in (0,1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw InputError("gamma must be in [0,1]");
    if (lambda_reg < 0.0) throw InputError("lambda must be >= 0");
    if (min_count < 1) throw InputError("min-count must be >= 1");
    if (max_size < 1) throw InputError("max-size must be >= 1");
  }

  void write(BinWriter& w) const {
    w.u32(k);
    w.f64(alpha);
    w.f64(gamma);
    w.u8(no_gamma ? 1 : 0);
    w.f64(lambda_reg);
    w.u32(window);
    w.u32(min_count);
    w.u32(max_size);
    w.u32(mc_order);
    w.u8(static_cast<std::uint8_t>(mode));
  }

  static Hyperparams read(BinReader& r) {
    Hyperparams h;
    h.k = r.u32();
    h.alpha = r.f64();
    h.gamma = r.f64();
    h.no_gamma = r.u8() != 0;
    h.lambda_reg = r.f64();
    h.window = r.u32();
    h.min_count = r.u32();
    h.max_size = r.u32();
    h.mc_order = r.u32();
    h.mode = static_cast<ModelMode>(r.u8());
    return h;
  }
};

// Effective coefficients of the long- and short-term vectors in the
// combined context. LongTermOnly/ShortTermOnly zero the other side and
// drop gamma entirely; the bias term is present in every mode.
struct MixWeights {
  double lt, st;
};

inline MixWeights mix_weights(const Hyperparams& h) {
  switch (h.mode) {
    case ModelMode::LongTermOnly: return {1.0, 0.0};
    case ModelMode::ShortTermOnly: return {0.0, 1.0};
    default: break;
  }
  if (h.no_gamma) return {1.0, 1.0};
  return {h.gamma, 1.0 - h.gamma};
}

// Item embeddings P (|I| x k) and item biases. These are the only learned
// parameters; nothing scales with the number of users.
struct ModelParams {
  std::uint32_t num_items = 0;
  std::uint32_t k = 0;
  std::vector<double> embeddings;  // row-major
  std::vector<double> biases;

  void resize(std::uint32_t items, std::uint32_t dim) {
    num_items = items;
    k = dim;
    embeddings.assign(static_cast<std::size_t>(items) * dim, 0.0);
    biases.assign(items, 0.0);
  }

  double* row(ItemId i) { return embeddings.data() + static_cast<std::size_t>(i) * k; }
  const double* row(ItemId i) const {
    return embeddings.data() + static_cast<std::size_t>(i) * k;
  }
  std::size_t parameter_count() const {
    return static_cast<std::size_t>(num_items) * (k + 1);
  }
};

// Softmax of the ramp r/R - 1: strictly increasing weights summing to 1,
// favoring recent context positions.
inline std::vector<double> damping_weights(std::size_t big_r) {
  if (big_r == 0) throw std::invalid_argument("damping_weights: R must be >= 1");
  std::vector<double> eta(big_r);
  double sum = 0.0;
  for (std::size_t r = 0; r < big_r; ++r) {
    eta[r] = std::exp(static_cast<double>(r + 1) / static_cast<double>(big_r) - 1.0);
    sum += eta[r];
  }
  for (auto& e : eta) e /= sum;
  return eta;
}

// Everything needed to score one (user, position): the deduplicated
// long-term window and the matched short-term context with its weights.
struct ScoreContext {
  std::vector<ItemId> long_items;  // sorted unique window items
  MatchedContext short_ctx;
  std::vector<double> eta;
};

inline ScoreContext build_context(std::span<const ItemId> prefix,
                                  const PatternSet& f, const Hyperparams& h) {
  if (prefix.empty())
    throw std::invalid_argument("build_context: empty prefix");
  ScoreContext ctx;

  std::size_t win = prefix.size();
  if (h.window > 0) win = std::min<std::size_t>(win, h.window);
  ctx.long_items.assign(prefix.end() - win, prefix.end());
  std::sort(ctx.long_items.begin(), ctx.long_items.end());
  ctx.long_items.erase(std::unique(ctx.long_items.begin(), ctx.long_items.end()),
                       ctx.long_items.end());

  if (h.mc_order > 0) {
    const std::size_t n = std::min<std::size_t>(prefix.size(), h.mc_order);
    ctx.short_ctx.items.assign(prefix.end() - n, prefix.end());
    for (std::size_t p = prefix.size() - n; p < prefix.size(); ++p)
      ctx.short_ctx.positions.push_back(static_cast<std::uint32_t>(p));
  } else {
    ctx.short_ctx = match_context(prefix, f);
  }
  ctx.eta = damping_weights(ctx.short_ctx.items.size());
  return ctx;
}

// Normalized sum of the window embeddings, candidate excluded:
// (1/|J|^alpha) * sum_{j in J} P_j with J = long_items \ {candidate}.
// The zero vector when J is empty.
inline void long_term_vector(const ModelParams& p, double alpha,
                             const ScoreContext& ctx, ItemId candidate,
                             std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  std::size_t n = 0;
  for (ItemId j : ctx.long_items) {
    if (j == candidate) continue;
    const double* pj = p.row(j);
    for (std::uint32_t d = 0; d < p.k; ++d) out[d] += pj[d];
    ++n;
  }
  if (n == 0) return;
  const double scale = std::pow(static_cast<double>(n), -alpha);
  for (std::uint32_t d = 0; d < p.k; ++d) out[d] *= scale;
}

// Damped sum of the matched context embeddings; wildcard-skipped items
// are simply absent from the context and carry no weight.
inline void short_term_vector(const ModelParams& p, const ScoreContext& ctx,
                              std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t r = 0; r < ctx.short_ctx.items.size(); ++r) {
    const double* pm = p.row(ctx.short_ctx.items[r]);
    const double w = ctx.eta[r];
    for (std::uint32_t d = 0; d < p.k; ++d) out[d] += w * pm[d];
  }
}

// Combined context vector for a given candidate (the candidate matters
// only through its exclusion from the long-term set).
inline void combined_vector(const ModelParams& p, const Hyperparams& h,
                            const ScoreContext& ctx, ItemId candidate,
                            std::span<double> out) {
  const MixWeights mw = mix_weights(h);
  std::vector<double> tmp(p.k, 0.0);
  std::fill(out.begin(), out.end(), 0.0);
  if (mw.lt != 0.0) {
    long_term_vector(p, h.alpha, ctx, candidate, tmp);
    for (std::uint32_t d = 0; d < p.k; ++d) out[d] += mw.lt * tmp[d];
  }
  if (mw.st != 0.0) {
    short_term_vector(p, ctx, tmp);
    for (std::uint32_t d = 0; d < p.k; ++d) out[d] += mw.st * tmp[d];
  }
}

// -(beta_i + ||v(i) - P_i||^2); higher is better.
inline double score(const ModelParams& p, const Hyperparams& h,
                    const ScoreContext& ctx, ItemId i) {
  std::vector<double> v(p.k);
  combined_vector(p, h, ctx, i, v);
  const double* pi = p.row(i);
  double dist = 0.0;
  for (std::uint32_t d = 0; d < p.k; ++d) {
    const double diff = v[d] - pi[d];
    dist += diff * diff;
  }
  return -(p.biases[i] + dist);
}

// Scores for every item at once. Uses the expansion
// ||v - P_i||^2 = ||v||^2 - 2<v,P_i> + ||P_i||^2 with one shared context
// vector, then repairs the few candidates that sit inside the long-term
// window and must be excluded from their own context.
inline std::vector<double> score_all(const ModelParams& p, const Hyperparams& h,
                                     const ScoreContext& ctx) {
  const MixWeights mw = mix_weights(h);
  std::vector<double> st(p.k, 0.0);
  if (mw.st != 0.0) short_term_vector(p, ctx, st);

  std::vector<double> window_sum(p.k, 0.0);
  const std::size_t nj = ctx.long_items.size();
  if (mw.lt != 0.0)
    for (ItemId j : ctx.long_items) {
      const double* pj = p.row(j);
      for (std::uint32_t d = 0; d < p.k; ++d) window_sum[d] += pj[d];
    }

  std::vector<double> v(p.k, 0.0);
  if (mw.lt != 0.0 && nj > 0) {
    const double scale = std::pow(static_cast<double>(nj), -h.alpha);
    for (std::uint32_t d = 0; d < p.k; ++d) v[d] = mw.lt * scale * window_sum[d];
  }
  for (std::uint32_t d = 0; d < p.k; ++d) v[d] += mw.st * st[d];

  double vnorm = 0.0;
  for (std::uint32_t d = 0; d < p.k; ++d) vnorm += v[d] * v[d];

  std::vector<double> scores(p.num_items);
  for (ItemId i = 0; i < p.num_items; ++i) {
    const double* pi = p.row(i);
    double dot = 0.0, pnorm = 0.0;
    for (std::uint32_t d = 0; d < p.k; ++d) {
      dot += v[d] * pi[d];
      pnorm += pi[d] * pi[d];
    }
    scores[i] = -(p.biases[i] + vnorm - 2.0 * dot + pnorm);
  }

  if (mw.lt != 0.0) {
    // candidates inside the window: drop their own embedding from the sum
    std::vector<double> vi(p.k);
    for (ItemId j : ctx.long_items) {
      const double* pj = p.row(j);
      if (nj > 1) {
        const double scale = std::pow(static_cast<double>(nj - 1), -h.alpha);
        for (std::uint32_t d = 0; d < p.k; ++d)
          vi[d] = mw.lt * scale * (window_sum[d] - pj[d]) + mw.st * st[d];
      } else {
        for (std::uint32_t d = 0; d < p.k; ++d) vi[d] = mw.st * st[d];
      }
      double dist = 0.0;
      for (std::uint32_t d = 0; d < p.k; ++d) {
        const double diff = vi[d] - pj[d];
        dist += diff * diff;
      }
      scores[j] = -(p.biases[j] + dist);
    }
  }
  return scores;
}

// Shared ranking order: higher score first, ties to the lower item id.
inline bool ranks_before(double score_a, ItemId a, double score_b, ItemId b) {
  if (score_a != score_b) return score_a > score_b;
  return a < b;
}

inline std::vector<ItemId> recommend_top_n(
    const ModelParams& p, const Hyperparams& h, std::span<const ItemId> history,
    const PatternSet& f, std::size_t n, std::span<const ItemId> exclude) {
  if (history.empty())
    throw std::invalid_argument("recommend_top_n: empty history");
  if (n < 1) throw std::invalid_argument("recommend_top_n: n must be >= 1");
  const ScoreContext ctx = build_context(history, f, h);
  const std::vector<double> scores = score_all(p, h, ctx);

  std::vector<char> excluded(p.num_items, 0);
  for (ItemId i : exclude)
    if (i < p.num_items) excluded[i] = 1;

  std::vector<ItemId> order;
  order.reserve(p.num_items);
  for (ItemId i = 0; i < p.num_items; ++i)
    if (!excluded[i]) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](ItemId a, ItemId b) {
    return ranks_before(scores[a], a, scores[b], b);
  });
  if (order.size() > n) order.resize(n);
  return order;
}

// Trained model with everything needed to score: hyperparameters, the
// mined pattern set, embeddings and biases. Embeddings are stored as
// 32-bit floats; a .json sidecar carries the provenance metadata.
struct ModelBundle {
  Hyperparams hyper;
  PatternSet patterns;
  ModelParams params;
  std::uint64_t dataset_hash = 0;
  std::uint32_t best_epoch = 0;
  double valid_auc = 0.0;
  std::uint64_t seed = 0;

  void save(const std::filesystem::path& path) const {
    BinWriter w;
    w.magic("REBUSMDL");
    w.u32(1);
    hyper.write(w);
    patterns.write(w);
    w.u32(params.num_items);
    w.u32(params.k);
    for (double e : params.embeddings) w.f32(static_cast<float>(e));
    for (double b : params.biases) w.f32(static_cast<float>(b));
    w.u64(dataset_hash);
    w.u32(best_epoch);
    w.f64(valid_auc);
    w.u64(seed);
    w.save(path);

    nlohmann::json meta{{"format", "rebusmdl"},
                        {"version", 1},
                        {"dataset_hash", hex64(dataset_hash)},
                        {"epoch", best_epoch},
                        {"valid_auc", valid_auc},
                        {"seed", seed},
                        {"num_items", params.num_items},
                        {"k", params.k},
                        {"mode", mode_name(hyper.mode)}};
    std::filesystem::path side = path;
    side.replace_extension(".json");
    std::ofstream out(side, std::ios::trunc);
    if (!out) throw InputError("cannot open for writing: " + side.string());
    out << meta.dump(2) << "\n";
  }

  static ModelBundle load(const std::filesystem::path& path) {
    BinReader r = BinReader::from_file(path);
    r.expect_magic("REBUSMDL");
    if (r.u32() != 1) throw InputError("model bundle: unsupported version");
    ModelBundle b;
    b.hyper = Hyperparams::read(r);
    b.patterns = PatternSet::read(r);
    const std::uint32_t items = r.u32();
    const std::uint32_t k = r.u32();
    b.params.resize(items, k);
    for (auto& e : b.params.embeddings) e = r.f32();
    for (auto& bias : b.params.biases) bias = r.f32();
    b.dataset_hash = r.u64();
    b.best_epoch = r.u32();
    b.valid_auc = r.f64();
    b.seed = r.u64();
    return b;
  }
};

}  // namespace rebus
