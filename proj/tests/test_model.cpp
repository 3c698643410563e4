#include <catch2/catch.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "rebus/model.hpp"

using namespace rebus;

namespace {

ScoreContext manual_context(std::vector<ItemId> long_items,
                            std::vector<ItemId> short_items) {
  ScoreContext ctx;
  ctx.long_items = std::move(long_items);
  std::sort(ctx.long_items.begin(), ctx.long_items.end());
  ctx.long_items.erase(std::unique(ctx.long_items.begin(), ctx.long_items.end()),
                       ctx.long_items.end());
  ctx.short_ctx.items = std::move(short_items);
  for (std::uint32_t p = 0; p < ctx.short_ctx.items.size(); ++p)
    ctx.short_ctx.positions.push_back(p);
  if (!ctx.short_ctx.items.empty())
    ctx.eta = damping_weights(ctx.short_ctx.items.size());
  return ctx;
}

}  // namespace

TEST_CASE("damping weights follow the softmax ramp", "[model]") {
  SECTION("R = 3 reproduces the reference values") {
    const auto eta = damping_weights(3);
    REQUIRE(eta[0] == Approx(0.230).margin(1e-3));
    REQUIRE(eta[1] == Approx(0.321).margin(1e-3));
    REQUIRE(eta[2] == Approx(0.448).margin(1e-3));
  }

  SECTION("R = 1 is the trivial distribution") {
    REQUIRE(damping_weights(1) == std::vector<double>{1.0});
  }

  SECTION("R = 5 matches direct evaluation") {
    const auto eta = damping_weights(5);
    long double denom = 0.0L;
    for (int r = 1; r <= 5; ++r) denom += std::exp((long double)r / 5.0L - 1.0L);
    for (int r = 1; r <= 5; ++r) {
      const long double direct = std::exp((long double)r / 5.0L - 1.0L) / denom;
      REQUIRE(eta[r - 1] == Approx((double)direct).epsilon(1e-12));
    }
  }

  SECTION("normalized and strictly increasing for R in [1, 64]") {
    for (std::size_t big_r = 1; big_r <= 64; ++big_r) {
      const auto eta = damping_weights(big_r);
      double sum = 0.0;
      for (std::size_t r = 0; r < big_r; ++r) {
        sum += eta[r];
        if (r) REQUIRE(eta[r] > eta[r - 1]);
      }
      REQUIRE(sum == Approx(1.0).margin(1e-12));
    }
  }

  SECTION("R = 0 is rejected") {
    REQUIRE_THROWS_AS(damping_weights(0), std::invalid_argument);
  }
}

TEST_CASE("long_term_vector normalizes the window sum", "[model]") {
  const auto params = oracle::random_params(6, 4, 11);
  Hyperparams h;
  h.k = 4;

  SECTION("single element with alpha 1 is that embedding") {
    const auto ctx = manual_context({2}, {0});
    std::vector<double> out(4);
    long_term_vector(params, 1.0, ctx, 5, out);
    for (int d = 0; d < 4; ++d) REQUIRE(out[d] == Approx(params.row(2)[d]));
  }

  SECTION("opposite embeddings cancel") {
    ModelParams p;
    p.resize(3, 2);
    p.row(0)[0] = 1.0;
    p.row(0)[1] = -2.0;
    p.row(1)[0] = -1.0;
    p.row(1)[1] = 2.0;
    const auto ctx = manual_context({0, 1}, {2});
    std::vector<double> out(2);
    long_term_vector(p, 1.0, ctx, 2, out);
    REQUIRE(out[0] == 0.0);
    REQUIRE(out[1] == 0.0);
  }

  SECTION("empty set after excluding the candidate gives zero") {
    const auto ctx = manual_context({3}, {0});
    std::vector<double> out(4, 99.0);
    long_term_vector(params, 0.7, ctx, 3, out);
    for (double v : out) REQUIRE(v == 0.0);
  }

  SECTION("size-7 window matches the naive loop at alpha 0.7") {
    const auto big = oracle::random_params(10, 5, 17);
    const std::vector<ItemId> window{0, 1, 2, 4, 6, 7, 9};
    const auto ctx = manual_context(window, {0});
    std::vector<double> out(5);
    long_term_vector(big, 0.7, ctx, 3, out);

    std::vector<double> expect(5, 0.0);
    for (ItemId j : window)
      for (int d = 0; d < 5; ++d) expect[d] += big.row(j)[d];
    const double norm = std::pow(7.0, 0.7);
    for (int d = 0; d < 5; ++d)
      REQUIRE(out[d] == Approx(expect[d] / norm).margin(1e-10));
  }
}

TEST_CASE("short_term_vector applies the damping weights", "[model]") {
  const auto params = oracle::random_params(8, 3, 23);

  SECTION("singleton context is the bare embedding") {
    const auto ctx = manual_context({}, {5});
    std::vector<double> out(3);
    short_term_vector(params, ctx, out);
    for (int d = 0; d < 3; ++d) REQUIRE(out[d] == Approx(params.row(5)[d]));
  }

  SECTION("size-3 context uses the reference weights") {
    const auto ctx = manual_context({}, {1, 2, 4});
    std::vector<double> out(3);
    short_term_vector(params, ctx, out);
    for (int d = 0; d < 3; ++d) {
      const double expect = 0.230 * params.row(1)[d] + 0.321 * params.row(2)[d] +
                            0.448 * params.row(4)[d];
      REQUIRE(out[d] == Approx(expect).margin(2e-3));
    }
  }

  SECTION("length-4 context matches the naive weighted sum") {
    const auto ctx = manual_context({}, {3, 3, 0, 7});  // repeats allowed
    std::vector<double> out(3);
    short_term_vector(params, ctx, out);
    const auto eta = damping_weights(4);
    for (int d = 0; d < 3; ++d) {
      double expect = 0.0;
      const ItemId ids[] = {3, 3, 0, 7};
      for (int r = 0; r < 4; ++r) expect += eta[r] * params.row(ids[r])[d];
      REQUIRE(out[d] == Approx(expect).margin(1e-10));
    }
  }
}

TEST_CASE("score is the negated biased squared distance", "[model]") {
  Hyperparams h;
  h.k = 3;
  h.gamma = 0.4;

  SECTION("perfect reconstruction scores zero") {
    ModelParams p;
    p.resize(4, 3);
    // craft P_3 equal to the combined vector of context {0} long, {1} short
    for (int d = 0; d < 3; ++d) {
      p.row(0)[d] = 1.0 + d;
      p.row(1)[d] = -0.5 * d;
    }
    const auto ctx = manual_context({0}, {1});
    for (int d = 0; d < 3; ++d)
      p.row(3)[d] = h.gamma * p.row(0)[d] + (1.0 - h.gamma) * p.row(1)[d];
    REQUIRE(score(p, h, ctx, 3) == Approx(0.0).margin(1e-12));
  }

  SECTION("bias shifts the score additively") {
    auto p = oracle::random_params(5, 3, 3);
    const auto ctx = manual_context({0, 1}, {2});
    const double before = score(p, h, ctx, 4);
    p.biases[4] += 2.5;
    REQUIRE(score(p, h, ctx, 4) == Approx(before - 2.5).margin(1e-12));
  }

  SECTION("random instances match the independent evaluator") {
    Rng rng(607);
    for (int round = 0; round < 30; ++round) {
      const auto p = oracle::random_params(12, 4, rng.next_u64());
      Hyperparams hh;
      hh.k = 4;
      hh.alpha = 0.3 + 0.7 * rng.next_double();
      hh.gamma = rng.next_double();
      hh.no_gamma = rng.next_below(4) == 0;
      const int mode_pick = static_cast<int>(rng.next_below(3));
      hh.mode = mode_pick == 0   ? ModelMode::Full
                : mode_pick == 1 ? ModelMode::LongTermOnly
                                 : ModelMode::ShortTermOnly;
      std::vector<ItemId> window, shorts;
      const auto nw = 1 + rng.next_below(5);
      for (std::uint64_t i = 0; i < nw; ++i)
        window.push_back(static_cast<ItemId>(rng.next_below(12)));
      std::sort(window.begin(), window.end());
      window.erase(std::unique(window.begin(), window.end()), window.end());
      const auto ns = 1 + rng.next_below(4);
      for (std::uint64_t i = 0; i < ns; ++i)
        shorts.push_back(static_cast<ItemId>(rng.next_below(12)));
      const auto ctx = manual_context(window, shorts);
      const auto candidate = static_cast<ItemId>(rng.next_below(12));

      const double got = score(p, hh, ctx, candidate);
      const double expect = oracle::naive_score(p, hh, window, shorts, candidate);
      REQUIRE(got == Approx(expect).margin(1e-9));
    }
  }
}

TEST_CASE("score_all equals the per-item score", "[model]") {
  SECTION("random instances, including candidates inside the window") {
    Rng rng(888);
    for (int round = 0; round < 20; ++round) {
      const auto p = oracle::random_params(50, 6, rng.next_u64());
      Hyperparams h;
      h.k = 6;
      h.alpha = 0.3 + 0.7 * rng.next_double();
      h.gamma = rng.next_double();
      h.no_gamma = rng.next_below(4) == 0;
      const int mode_pick = static_cast<int>(rng.next_below(4));
      h.mode = mode_pick == 1   ? ModelMode::LongTermOnly
               : mode_pick == 2 ? ModelMode::ShortTermOnly
                                : ModelMode::Full;
      std::vector<ItemId> window, shorts;
      const auto nw = 1 + rng.next_below(8);
      for (std::uint64_t i = 0; i < nw; ++i)
        window.push_back(static_cast<ItemId>(rng.next_below(50)));
      const auto ns = 1 + rng.next_below(4);
      for (std::uint64_t i = 0; i < ns; ++i)
        shorts.push_back(static_cast<ItemId>(rng.next_below(50)));
      const auto ctx = manual_context(window, shorts);

      const auto all = score_all(p, h, ctx);
      for (ItemId i = 0; i < 50; ++i)
        REQUIRE(all[i] == Approx(score(p, h, ctx, i)).margin(1e-9));
    }
  }

  SECTION("zero embeddings leave only the biases") {
    ModelParams p;
    p.resize(6, 3);
    for (ItemId i = 0; i < 6; ++i) p.biases[i] = 0.5 * i;
    Hyperparams h;
    h.k = 3;
    const auto ctx = manual_context({1, 2}, {3});
    const auto all = score_all(p, h, ctx);
    for (ItemId i = 0; i < 6; ++i) REQUIRE(all[i] == Approx(-0.5 * i));
  }

  SECTION("empty long set reduces to the short-term distance") {
    const auto p = oracle::random_params(7, 3, 55);
    Hyperparams h;
    h.k = 3;
    h.gamma = 0.25;
    ScoreContext ctx = manual_context({}, {2, 5});
    const auto all = score_all(p, h, ctx);
    std::vector<double> st(3);
    short_term_vector(p, ctx, st);
    for (ItemId i = 0; i < 7; ++i) {
      double dist = 0.0;
      for (int d = 0; d < 3; ++d) {
        const double diff = (1.0 - h.gamma) * st[d] - p.row(i)[d];
        dist += diff * diff;
      }
      REQUIRE(all[i] == Approx(-(p.biases[i] + dist)).margin(1e-12));
    }
  }
}

TEST_CASE("score differences reduce to bias and distance deltas", "[model]") {
  // two candidates outside the window share the context vector, so their
  // score gap is exactly -(dbeta) - (ddist)
  Rng rng(777);
  for (int round = 0; round < 10; ++round) {
    const auto p = oracle::random_params(20, 4, rng.next_u64());
    Hyperparams h;
    h.k = 4;
    h.gamma = rng.next_double();
    const auto ctx = manual_context({0, 1, 2}, {3, 4});
    const ItemId a = 10, b = 15;  // never in the window
    std::vector<double> v(4);
    combined_vector(p, h, ctx, a, v);
    auto dist = [&](ItemId i) {
      double d2 = 0.0;
      for (int d = 0; d < 4; ++d) {
        const double diff = v[d] - p.row(i)[d];
        d2 += diff * diff;
      }
      return d2;
    };
    const double gap = score(p, h, ctx, a) - score(p, h, ctx, b);
    const double expect = -(p.biases[a] - p.biases[b]) - (dist(a) - dist(b));
    REQUIRE(gap == Approx(expect).margin(1e-10));
  }
}

TEST_CASE("mode consistency at the gamma extremes", "[model]") {
  const auto p = oracle::random_params(15, 4, 1001);
  const auto ctx = manual_context({1, 4, 7}, {2, 9});

  Hyperparams full;
  full.k = 4;
  full.alpha = 0.7;

  SECTION("gamma = 1 equals LongTermOnly") {
    full.gamma = 1.0;
    Hyperparams lt = full;
    lt.mode = ModelMode::LongTermOnly;
    const auto a = score_all(p, full, ctx);
    const auto b = score_all(p, lt, ctx);
    for (ItemId i = 0; i < 15; ++i) REQUIRE(a[i] == Approx(b[i]).margin(1e-12));
  }

  SECTION("gamma = 0 equals ShortTermOnly") {
    full.gamma = 0.0;
    Hyperparams st = full;
    st.mode = ModelMode::ShortTermOnly;
    const auto a = score_all(p, full, ctx);
    const auto b = score_all(p, st, ctx);
    for (ItemId i = 0; i < 15; ++i) REQUIRE(a[i] == Approx(b[i]).margin(1e-12));
  }
}

TEST_CASE("build_context assembles window and matcher output", "[model]") {
  const PatternSet f = PatternSet::from_patterns({{2}, {3}, {2, 3}}, 1, 2);
  Hyperparams h;

  SECTION("unbounded window deduplicates the whole prefix") {
    const std::vector<ItemId> prefix{5, 2, 5, 3};
    const auto ctx = build_context(prefix, f, h);
    REQUIRE(ctx.long_items == std::vector<ItemId>{2, 3, 5});
    REQUIRE(ctx.short_ctx.items == std::vector<ItemId>{2, 3});
    REQUIRE(ctx.eta.size() == 2);
  }

  SECTION("window limits how far back the long-term set reaches") {
    Hyperparams hw = h;
    hw.window = 2;
    const std::vector<ItemId> prefix{5, 2, 5, 3};
    const auto ctx = build_context(prefix, f, hw);
    REQUIRE(ctx.long_items == std::vector<ItemId>{3, 5});
  }

  SECTION("mc-order override bypasses the matcher") {
    Hyperparams hmc = h;
    hmc.mc_order = 2;
    const std::vector<ItemId> prefix{5, 2, 5, 3};
    const auto ctx = build_context(prefix, f, hmc);
    REQUIRE(ctx.short_ctx.items == std::vector<ItemId>{5, 3});
    REQUIRE(ctx.short_ctx.positions == std::vector<std::uint32_t>{2, 3});
  }
}

TEST_CASE("recommend_top_n ranks by score with id tie-breaks", "[model]") {
  const PatternSet f;
  Hyperparams h;
  h.k = 2;

  SECTION("equal scores prefer the lower id") {
    ModelParams p;
    p.resize(4, 2);  // all zero: every unexcluded item ties
    const std::vector<ItemId> history{0};
    const auto top = recommend_top_n(p, h, history, f, 3, history);
    REQUIRE(top == std::vector<ItemId>{1, 2, 3});
  }

  SECTION("a dominant negative bias wins") {
    auto p = oracle::random_params(10, 2, 4);
    p.biases[7] = -1e6;
    const std::vector<ItemId> history{1};
    const auto top = recommend_top_n(p, h, history, f, 1, history);
    REQUIRE(top == std::vector<ItemId>{7});
  }

  SECTION("top-n is a prefix of the full ranking oracle") {
    Rng rng(246);
    for (int round = 0; round < 10; ++round) {
      const auto p = oracle::random_params(30, 3, rng.next_u64());
      Hyperparams hh;
      hh.k = 3;
      const std::vector<ItemId> history{
          static_cast<ItemId>(rng.next_below(30)),
          static_cast<ItemId>(rng.next_below(30))};
      const auto ctx = build_context(history, f, hh);
      const auto scores = score_all(p, hh, ctx);
      const std::set<ItemId> excluded(history.begin(), history.end());
      // full sort over non-excluded items
      std::vector<ItemId> order;
      for (ItemId i = 0; i < 30; ++i)
        if (!excluded.count(i)) order.push_back(i);
      std::stable_sort(order.begin(), order.end(), [&](ItemId a, ItemId b) {
        return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
      });
      const auto top = recommend_top_n(p, hh, history, f, 5, history);
      REQUIRE(top == std::vector<ItemId>(order.begin(), order.begin() + 5));
    }
  }

  SECTION("n beyond the rankable items returns everything rankable") {
    const auto p = oracle::random_params(4, 2, 9);
    const std::vector<ItemId> history{0, 1};
    const auto top = recommend_top_n(p, h, history, f, 99, history);
    REQUIRE(top.size() == 2);
  }
}

TEST_CASE("model bundle round-trips", "[model]") {
  ModelBundle b;
  b.hyper.k = 3;
  b.hyper.alpha = 0.7;
  b.hyper.gamma = 0.3;
  b.hyper.mode = ModelMode::Full;
  b.patterns = PatternSet::from_patterns({{1}, {2}, {1, 2}}, 2, 2);
  b.params = oracle::random_params(5, 3, 77, 0.25);
  // store as f32: quantize the reference the same way
  for (auto& e : b.params.embeddings) e = static_cast<float>(e);
  for (auto& x : b.params.biases) x = static_cast<float>(x);
  b.dataset_hash = 0xfeedface;
  b.best_epoch = 12;
  b.valid_auc = 0.875;
  b.seed = 99;

  const auto path = std::filesystem::temp_directory_path() /
                    ("rebus_bundle_" + std::to_string(::getpid()) + ".rebusmdl");
  b.save(path);
  const ModelBundle loaded = ModelBundle::load(path);
  REQUIRE(loaded.hyper.k == 3);
  REQUIRE(loaded.hyper.alpha == 0.7);
  REQUIRE(loaded.params.embeddings == b.params.embeddings);
  REQUIRE(loaded.params.biases == b.params.biases);
  REQUIRE(loaded.patterns.size() == 3);
  REQUIRE(loaded.dataset_hash == 0xfeedface);
  REQUIRE(loaded.best_epoch == 12);
  REQUIRE(loaded.seed == 99);

  // parameter count scales with the catalog only
  REQUIRE(loaded.params.parameter_count() == 5 * (3 + 1));
  std::filesystem::remove(path);
  std::filesystem::path side = path;
  side.replace_extension(".json");
  std::filesystem::remove(side);
}
