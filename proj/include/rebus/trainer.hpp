#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "rebus/common.hpp"
#include "rebus/corpus.hpp"
#include "rebus/model.hpp"
#include "rebus/seqmine.hpp"

namespace rebus {

struct TrainConfig {
  double learning_rate = 0.001;
  std::uint32_t batch_size = 128;
  std::uint32_t patience = 250;      // stale validation epochs before stopping
  std::uint32_t max_epochs = 1000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t rng_seed = 42;
  std::uint64_t epoch_size = 0;      // sampled triples per epoch; 0 = #train actions

  void validate() const {
    if (learning_rate <= 0.0) throw InputError("learning-rate must be > 0");
    if (batch_size < 1) throw InputError("batch-size must be >= 1");
    if (patience < 1) throw InputError("patience must be >= 1");
    if (max_epochs < 1) throw InputError("max-epochs must be >= 1");
  }
};

// Xavier-uniform embeddings (fan_in = fan_out = k), zero biases.
inline ModelParams init_params(std::uint32_t num_items, std::uint32_t k,
                               std::uint64_t seed) {
  if (num_items < 1) throw std::invalid_argument("init_params: no items");
  ModelParams p;
  p.resize(num_items, k);
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / (k + k));
  for (auto& e : p.embeddings) e = rng.next_uniform(-bound, bound);
  return p;
}

struct Triple {
  UserId user;
  std::uint32_t t;  // 1-based position in the training sequence, >= 2
  ItemId pos;
  ItemId neg;
};

// Uniform (user, position, negative) sampler. Users whose training
// sequence is too short to host a transition are never drawn; the
// negative is rejected until it avoids everything the user saw up to t.
class TripleSampler {
 public:
  explicit TripleSampler(const SplitDataset& split) : split_(&split) {
    for (UserId u = 0; u < split.num_users; ++u)
      if (split.train[u].size() >= 2) eligible_.push_back(u);
    if (eligible_.empty())
      throw InputError("no user has at least 2 training interactions");
  }

  Triple sample(Rng& rng) const {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      const UserId u = eligible_[rng.next_below(eligible_.size())];
      const auto& train = split_->train[u];
      const auto t = static_cast<std::uint32_t>(2 + rng.next_below(train.size() - 1));
      std::unordered_set<ItemId> seen(train.begin(), train.begin() + t);
      if (seen.size() >= split_->num_items) continue;  // no negative exists
      for (;;) {
        const auto j = static_cast<ItemId>(rng.next_below(split_->num_items));
        if (!seen.count(j)) return Triple{u, t, train[t - 1], j};
      }
    }
    throw std::runtime_error("sampler: could not draw a valid triple");
  }

  std::vector<Triple> sample_batch(Rng& rng, std::uint32_t batch_size) const {
    std::vector<Triple> batch;
    batch.reserve(batch_size);
    for (std::uint32_t b = 0; b < batch_size; ++b) batch.push_back(sample(rng));
    return batch;
  }

 private:
  const SplitDataset* split_;
  std::vector<UserId> eligible_;
};

// Matcher results and window sets for every (user, position); F is static
// during training so these never change. Also keeps each user's distinct
// training items for validation candidate filtering.
class ContextCache {
 public:
  ContextCache(const SplitDataset& split, const PatternSet& f,
               const Hyperparams& hyper)
      : train_ctx_(split.num_users), valid_ctx_(split.num_users),
        train_unique_(split.num_users) {
    parallel_for(split.num_users, [&](std::size_t u) {
      const auto& train = split.train[u];
      auto& slots = train_ctx_[u];
      if (train.size() >= 2) {
        slots.reserve(train.size() - 1);
        for (std::uint32_t t = 2; t <= train.size(); ++t)
          slots.push_back(
              build_context(std::span(train.data(), t - 1), f, hyper));
      }
      valid_ctx_[u] = build_context(std::span(train.data(), train.size()), f, hyper);
      auto& uniq = train_unique_[u];
      uniq.assign(train.begin(), train.end());
      std::sort(uniq.begin(), uniq.end());
      uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    });
  }

  const ScoreContext& training(UserId u, std::uint32_t t) const {
    return train_ctx_[u][t - 2];
  }
  const ScoreContext& validation(UserId u) const { return valid_ctx_[u]; }
  const std::vector<ItemId>& train_items(UserId u) const {
    return train_unique_[u];
  }

 private:
  std::vector<std::vector<ScoreContext>> train_ctx_;
  std::vector<ScoreContext> valid_ctx_;
  std::vector<std::vector<ItemId>> train_unique_;
};

struct GradBuffer {
  std::vector<double> embeddings;
  std::vector<double> biases;

  void reset(const ModelParams& p) {
    embeddings.assign(p.embeddings.size(), 0.0);
    biases.assign(p.biases.size(), 0.0);
  }
};

namespace detail {

inline double stable_softplus(double z) {  // log(1 + e^z)
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

// Adds w * d to the gradient row of every parameter that participates in
// one candidate's squared distance. coef(q) is the coefficient of P_q in
// the combined context vector; the candidate's own row additionally gets
// the -1 from the distance itself.
inline void accumulate_candidate(const ModelParams& params, const Hyperparams& h,
                                 const ScoreContext& ctx, ItemId candidate,
                                 std::span<const double> d, double w,
                                 GradBuffer& grad) {
  const MixWeights mw = mix_weights(h);
  const std::uint32_t k = params.k;

  double* gc = grad.embeddings.data() + static_cast<std::size_t>(candidate) * k;
  for (std::uint32_t dim = 0; dim < k; ++dim) gc[dim] -= w * d[dim];

  if (mw.lt != 0.0) {
    std::size_t n = ctx.long_items.size();
    for (ItemId j : ctx.long_items)
      if (j == candidate) { --n; break; }
    if (n > 0) {
      const double coef = mw.lt * std::pow(static_cast<double>(n), -h.alpha);
      for (ItemId j : ctx.long_items) {
        if (j == candidate) continue;
        double* gj = grad.embeddings.data() + static_cast<std::size_t>(j) * k;
        for (std::uint32_t dim = 0; dim < k; ++dim) gj[dim] += w * coef * d[dim];
      }
    }
  }
  if (mw.st != 0.0) {
    for (std::size_t r = 0; r < ctx.short_ctx.items.size(); ++r) {
      const double coef = mw.st * ctx.eta[r];
      double* gq = grad.embeddings.data() +
                   static_cast<std::size_t>(ctx.short_ctx.items[r]) * k;
      for (std::uint32_t dim = 0; dim < k; ++dim) gq[dim] += w * coef * d[dim];
    }
  }
}

}  // namespace detail

// Mean -ln sigma(score_pos - score_neg) over the batch, and (optionally)
// its gradient with the global 2*lambda*theta regularization term folded
// in. The returned loss excludes the regularization term.
inline double bpr_loss_and_grad(const ModelParams& params, const Hyperparams& hyper,
                                const ContextCache& cache,
                                std::span<const Triple> batch,
                                GradBuffer* grad) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  if (grad) grad->reset(params);
  const std::uint32_t k = params.k;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  std::vector<double> v_pos(k), v_neg(k), d_pos(k), d_neg(k);
  double loss = 0.0;
  for (const Triple& tr : batch) {
    const ScoreContext& ctx = cache.training(tr.user, tr.t);
    combined_vector(params, hyper, ctx, tr.pos, v_pos);
    combined_vector(params, hyper, ctx, tr.neg, v_neg);

    const double* pp = params.row(tr.pos);
    const double* pn = params.row(tr.neg);
    double dist_pos = 0.0, dist_neg = 0.0;
    for (std::uint32_t dim = 0; dim < k; ++dim) {
      d_pos[dim] = v_pos[dim] - pp[dim];
      d_neg[dim] = v_neg[dim] - pn[dim];
      dist_pos += d_pos[dim] * d_pos[dim];
      dist_neg += d_neg[dim] * d_neg[dim];
    }
    const double x_hat = (params.biases[tr.neg] + dist_neg) -
                         (params.biases[tr.pos] + dist_pos);
    if (!std::isfinite(x_hat))
      throw std::runtime_error("non-finite score difference for user " +
                               std::to_string(tr.user) + " at position " +
                               std::to_string(tr.t));
    loss += detail::stable_softplus(-x_hat);

    if (grad) {
      // d(-ln sigma)/dx
      const double g = -1.0 / (1.0 + std::exp(x_hat));
      // x_hat = A_neg - A_pos with A_c = beta_c + ||v_c - P_c||^2
      grad->biases[tr.pos] += inv_b * g * -1.0;
      grad->biases[tr.neg] += inv_b * g * 1.0;
      detail::accumulate_candidate(params, hyper, ctx, tr.pos, d_pos,
                                   inv_b * g * -2.0, *grad);
      detail::accumulate_candidate(params, hyper, ctx, tr.neg, d_neg,
                                   inv_b * g * 2.0, *grad);
    }
  }

  if (grad && hyper.lambda_reg != 0.0) {
    const double two_lambda = 2.0 * hyper.lambda_reg;
    for (std::size_t i = 0; i < params.embeddings.size(); ++i)
      grad->embeddings[i] += two_lambda * params.embeddings[i];
    for (std::size_t i = 0; i < params.biases.size(); ++i)
      grad->biases[i] += two_lambda * params.biases[i];
  }
  return loss * inv_b;
}

struct AdamState {
  std::vector<double> m_embeddings, v_embeddings, m_biases, v_biases;
  std::uint64_t step = 0;

  void reset(const ModelParams& p) {
    m_embeddings.assign(p.embeddings.size(), 0.0);
    v_embeddings.assign(p.embeddings.size(), 0.0);
    m_biases.assign(p.biases.size(), 0.0);
    v_biases.assign(p.biases.size(), 0.0);
    step = 0;
  }
};

struct TrainState {
  ModelParams params;
  AdamState adam;
  GradBuffer grad;
  std::uint32_t epoch = 0;
  double best_valid_auc = -1.0;
  std::uint32_t best_epoch = 0;
  ModelParams best_params;
  std::uint32_t stale_epochs = 0;
};

namespace detail {

inline void adam_update(std::vector<double>& theta, const std::vector<double>& g,
                        std::vector<double>& m, std::vector<double>& v,
                        const TrainConfig& cfg, double bias1, double bias2) {
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
    v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
    const double m_hat = m[i] / bias1;
    const double v_hat = v[i] / bias2;
    theta[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.adam_epsilon);
  }
}

}  // namespace detail

// One optimization step: batch gradient (with global regularization)
// followed by a dense Adam update. Returns the batch loss before
// regularization.
inline double bpr_step(TrainState& state, const Hyperparams& hyper,
                       const ContextCache& cache, std::span<const Triple> batch,
                       const TrainConfig& cfg) {
  const double loss =
      bpr_loss_and_grad(state.params, hyper, cache, batch, &state.grad);
  ++state.adam.step;
  const double bias1 = 1.0 - std::pow(cfg.adam_beta1, double(state.adam.step));
  const double bias2 = 1.0 - std::pow(cfg.adam_beta2, double(state.adam.step));
  detail::adam_update(state.params.embeddings, state.grad.embeddings,
                      state.adam.m_embeddings, state.adam.v_embeddings, cfg,
                      bias1, bias2);
  detail::adam_update(state.params.biases, state.grad.biases,
                      state.adam.m_biases, state.adam.v_biases, cfg, bias1,
                      bias2);
  return loss;
}

// Exact validation ranking: the target is the held-out validation item,
// candidates are every item the user has not trained on (plus the target
// itself). Equal scores rank by ascending id, which counts against the
// model. Users that cannot be ranked (fewer than 2 candidates) are skipped.
inline double validation_auc(const ModelParams& params, const Hyperparams& hyper,
                             const SplitDataset& split, const ContextCache& cache) {
  std::vector<double> per_user(split.num_users, -1.0);
  parallel_for(split.num_users, [&](std::size_t u) {
    const ItemId target = split.valid_item[u];
    const std::vector<double> scores =
        score_all(params, hyper, cache.validation(static_cast<UserId>(u)));
    const auto& seen = cache.train_items(static_cast<UserId>(u));
    const double target_score = scores[target];
    std::uint64_t candidates = 1, better = 0;
    for (ItemId i = 0; i < split.num_items; ++i) {
      if (i == target) continue;
      if (std::binary_search(seen.begin(), seen.end(), i)) continue;
      ++candidates;
      if (ranks_before(scores[i], i, target_score, target)) ++better;
    }
    if (candidates >= 2) {
      const auto rank = static_cast<double>(better + 1);
      per_user[u] = (static_cast<double>(candidates) - rank) /
                    (static_cast<double>(candidates) - 1.0);
    }
  });
  double sum = 0.0;
  std::uint64_t counted = 0;
  for (double a : per_user)
    if (a >= 0.0) {
      sum += a;
      ++counted;
    }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

struct TrainLogEntry {
  std::uint32_t epoch;
  double loss;
  double valid_auc;
  double seconds;
};

struct TrainResult {
  ModelParams params;  // best validation snapshot
  double best_valid_auc = 0.0;
  std::uint32_t best_epoch = 0;
  std::vector<TrainLogEntry> log;
};

// Epoch loop with validation-AUC early stopping; keeps and returns the
// best snapshot seen.
inline TrainResult train(const SplitDataset& split, const Hyperparams& hyper,
                         const TrainConfig& cfg, const PatternSet& f) {
  hyper.validate();
  cfg.validate();
  const ContextCache cache(split, f, hyper);
  const TripleSampler sampler(split);
  Rng sample_rng = Rng(cfg.rng_seed).fork("sampling");

  TrainState state;
  state.params =
      init_params(split.num_items, hyper.k, fork_seed(cfg.rng_seed, "init"));
  state.adam.reset(state.params);

  std::uint64_t epoch_size = cfg.epoch_size;
  if (epoch_size == 0)
    for (const auto& tr : split.train) epoch_size += tr.size();
  const std::uint64_t steps = std::max<std::uint64_t>(1, epoch_size / cfg.batch_size);

  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint32_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    state.epoch = epoch;
    double loss_sum = 0.0;
    for (std::uint64_t s = 0; s < steps; ++s) {
      const auto batch = sampler.sample_batch(sample_rng, cfg.batch_size);
      try {
        loss_sum += bpr_step(state, hyper, cache, batch, cfg);
      } catch (const std::exception& e) {
        throw std::runtime_error("epoch " + std::to_string(epoch) + ": " +
                                 e.what());
      }
    }
    const double auc = validation_auc(state.params, hyper, split, cache);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(
        TrainLogEntry{epoch, loss_sum / static_cast<double>(steps), auc, secs});

    if (auc > state.best_valid_auc) {
      state.best_valid_auc = auc;
      state.best_epoch = epoch;
      state.best_params = state.params;
      state.stale_epochs = 0;
    } else {
      ++state.stale_epochs;
    }
    if (state.stale_epochs >= cfg.patience) break;
  }
  result.params = std::move(state.best_params);
  result.best_valid_auc = state.best_valid_auc;
  result.best_epoch = state.best_epoch;
  return result;
}

struct HyperGrids {
  std::vector<double> alphas{0.3, 0.5, 0.7, 1.0};
  std::vector<double> gammas{0.3, 0.5, 0.7};
  std::vector<double> lambdas{0.0, 0.001, 0.01, 0.1, 1.0};
  // (min_count, max_size) pairs; patterns are mined once per pair
  std::vector<std::pair<std::uint32_t, std::uint32_t>> mining{{2, 3}};
};

struct GridEntry {
  Hyperparams hyper;
  double valid_auc = 0.0;
  std::uint32_t best_epoch = 0;
};

struct GridResult {
  Hyperparams best;
  std::vector<GridEntry> leaderboard;  // sorted by validation AUC, best first
};

inline GridResult grid_search(const SplitDataset& split, const Hyperparams& base,
                              const HyperGrids& grids, const TrainConfig& cfg) {
  if (grids.alphas.empty() || grids.gammas.empty() || grids.lambdas.empty() ||
      grids.mining.empty())
    throw InputError("grid search: empty grid");
  GridResult result;
  for (const auto& [min_count, max_size] : grids.mining) {
    Hyperparams mined = base;
    mined.min_count = min_count;
    mined.max_size = max_size;
    const PatternSet f = mine_frequent_substrings(split.train, min_count, max_size);
    for (double alpha : grids.alphas)
      for (double gamma : grids.gammas)
        for (double lambda : grids.lambdas) {
          Hyperparams h = mined;
          h.alpha = alpha;
          h.gamma = gamma;
          h.lambda_reg = lambda;
          const TrainResult r = train(split, h, cfg, f);
          result.leaderboard.push_back(GridEntry{h, r.best_valid_auc, r.best_epoch});
        }
  }
  std::stable_sort(result.leaderboard.begin(), result.leaderboard.end(),
                   [](const GridEntry& a, const GridEntry& b) {
                     return a.valid_auc > b.valid_auc;
                   });
  result.best = result.leaderboard.front().hyper;
  return result;
}

}  // namespace rebus
