// Command-line front end: prepare | mine | train | evaluate | recommend.
// Every subcommand is deterministic given its inputs and seed; resolved
// configuration is recorded in run.json next to the outputs.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rebus/common.hpp"
#include "rebus/corpus.hpp"
#include "rebus/evalkit.hpp"
#include "rebus/model.hpp"
#include "rebus/seqmine.hpp"
#include "rebus/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw rebus::InputError("cannot open for writing: " + path.string());
  out << content;
}

void write_run_json(const fs::path& dir, const std::string& command,
                    const json& resolved) {
  json run{{"command", command}, {"config", resolved}};
  write_text(dir / "run.json", run.dump(2) + "\n");
}

fs::path ensure_dir(const std::string& out) {
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

std::vector<rebus::ItemId> parse_id_list(const std::string& text) {
  std::vector<rebus::ItemId> ids;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    if (tok.empty()) continue;
    try {
      ids.push_back(static_cast<rebus::ItemId>(std::stoul(tok)));
    } catch (const std::exception&) {
      throw rebus::InputError("bad item id '" + tok + "'");
    }
  }
  return ids;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> vals;
  std::string tok;
  std::istringstream is(text);
  while (std::getline(is, tok, ',')) {
    if (tok.empty()) continue;
    try {
      vals.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw rebus::InputError("bad number '" + tok + "' in list");
    }
  }
  return vals;
}

json hyper_to_json(const rebus::Hyperparams& h) {
  return json{{"k", h.k},
              {"alpha", h.alpha},
              {"gamma", h.gamma},
              {"no_gamma", h.no_gamma},
              {"lambda_reg", h.lambda_reg},
              {"window", h.window},
              {"min_count", h.min_count},
              {"max_size", h.max_size},
              {"mc_order", h.mc_order},
              {"mode", rebus::mode_name(h.mode)}};
}

json train_config_to_json(const rebus::TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"patience", c.patience},
              {"max_epochs", c.max_epochs},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_epsilon", c.adam_epsilon},
              {"rng_seed", c.rng_seed},
              {"epoch_size", c.epoch_size}};
}

// Flags override config-file values, which override defaults.
template <typename T>
void maybe_set(const json& cfg, const char* key, T& out, const CLI::App* sub,
               const std::string& flag) {
  if (!cfg.contains(key)) return;
  if (sub->count(flag) > 0) return;
  out = cfg.at(key).get<T>();
}

void apply_config_file(const std::string& path, rebus::Hyperparams& h,
                       rebus::TrainConfig& c, const CLI::App* sub) {
  std::ifstream in(path);
  if (!in) throw rebus::InputError("cannot open config: " + path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    throw rebus::InputError("bad config json: " + std::string(e.what()));
  }
  maybe_set(cfg, "k", h.k, sub, "--k");
  maybe_set(cfg, "alpha", h.alpha, sub, "--alpha");
  maybe_set(cfg, "gamma", h.gamma, sub, "--gamma");
  maybe_set(cfg, "no_gamma", h.no_gamma, sub, "--no-gamma");
  maybe_set(cfg, "lambda_reg", h.lambda_reg, sub, "--lambda");
  maybe_set(cfg, "window", h.window, sub, "--window");
  maybe_set(cfg, "min_count", h.min_count, sub, "--min-count");
  maybe_set(cfg, "max_size", h.max_size, sub, "--max-size");
  maybe_set(cfg, "mc_order", h.mc_order, sub, "--mc-order");
  if (cfg.contains("mode") && sub->count("--mode") == 0)
    h.mode = rebus::mode_from_name(cfg.at("mode").get<std::string>());
  maybe_set(cfg, "learning_rate", c.learning_rate, sub, "--learning-rate");
  maybe_set(cfg, "batch_size", c.batch_size, sub, "--batch-size");
  maybe_set(cfg, "patience", c.patience, sub, "--patience");
  maybe_set(cfg, "max_epochs", c.max_epochs, sub, "--max-epochs");
  maybe_set(cfg, "adam_beta1", c.adam_beta1, sub, "--adam-beta1");
  maybe_set(cfg, "adam_beta2", c.adam_beta2, sub, "--adam-beta2");
  maybe_set(cfg, "adam_epsilon", c.adam_epsilon, sub, "--adam-epsilon");
  maybe_set(cfg, "rng_seed", c.rng_seed, sub, "--seed");
  maybe_set(cfg, "epoch_size", c.epoch_size, sub, "--epoch-size");
}

std::string training_log_csv(const std::vector<rebus::TrainLogEntry>& log) {
  std::string out = "epoch,loss,valid_auc,seconds\n";
  for (const auto& e : log)
    out += std::to_string(e.epoch) + "," + rebus::fmt_double(e.loss) + "," +
           rebus::fmt_double(e.valid_auc) + "," + rebus::fmt_double(e.seconds) +
           "\n";
  return out;
}

std::string leaderboard_csv(const std::vector<rebus::GridEntry>& entries) {
  std::string out =
      "rank,alpha,gamma,lambda,min_count,max_size,valid_auc,best_epoch\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    out += std::to_string(i + 1) + "," + rebus::fmt_double(e.hyper.alpha) + "," +
           rebus::fmt_double(e.hyper.gamma) + "," +
           rebus::fmt_double(e.hyper.lambda_reg) + "," +
           std::to_string(e.hyper.min_count) + "," +
           std::to_string(e.hyper.max_size) + "," +
           rebus::fmt_double(e.valid_auc) + "," + std::to_string(e.best_epoch) +
           "\n";
  }
  return out;
}

void print_report(const std::string& label, const rebus::EvalReport& rep) {
  std::cout << label << ": users=" << rep.num_users
            << " auc=" << rebus::fmt_double(rep.auc);
  for (const auto& [x, v] : rep.hit)
    std::cout << " hit" << x << "=" << rebus::fmt_double(v);
  std::cout << " (" << rebus::fmt_double(rep.runtime_seconds) << "s)\n";
}

// --- subcommands ---------------------------------------------------------

struct PrepareArgs {
  std::string events, out;
  std::uint64_t recent = 0;
  bool cold_start = false;
  std::uint64_t seed = 42;
};

int cmd_prepare(const PrepareArgs& a) {
  const fs::path dir = ensure_dir(a.out);
  const auto events = rebus::read_events(a.events);

  rebus::Dataset dataset;
  std::size_t cold_users = 0;
  if (a.cold_start) {
    rebus::ColdStartPartition part = rebus::cold_start_split(events);
    if (a.recent > 0) part = rebus::truncate_recent(part, a.recent);
    part.save_cold(dir / "cold_users.bin");
    cold_users = part.cold_histories.size();
    dataset = std::move(part.main);
  } else {
    dataset = rebus::ingest(events);
    if (a.recent > 0) dataset = rebus::truncate_recent(dataset, a.recent);
  }
  dataset.save(dir / "dataset.rebusdata");

  // split manifest: the split itself is a pure function of the dataset
  std::uint64_t train_actions = 0;
  bool splittable = true;
  for (const auto& s : dataset.sequences) {
    if (s.size() < 3) splittable = false;
    train_actions += s.size() >= 2 ? s.size() - 2 : 0;
  }
  json manifest{{"num_users", dataset.num_users},
                {"num_items", dataset.num_items},
                {"num_actions", dataset.num_actions()},
                {"splittable", splittable},
                {"train_actions", train_actions},
                {"valid_actions", dataset.num_users},
                {"test_actions", dataset.num_users},
                {"cold_users", cold_users}};
  write_text(dir / "split.json", manifest.dump(2) + "\n");

  write_run_json(dir, "prepare",
                 json{{"events", a.events},
                      {"recent", a.recent},
                      {"cold_start", a.cold_start},
                      {"seed", a.seed}});
  std::cout << "dataset: " << dataset.num_users << " users, "
            << dataset.num_items << " items, " << dataset.num_actions()
            << " actions";
  if (a.cold_start) std::cout << ", " << cold_users << " cold users";
  std::cout << "\n";
  return 0;
}

struct MineArgs {
  std::string dataset, out;
  std::uint32_t min_count = 2, max_size = 3;
};

int cmd_mine(const MineArgs& a) {
  const rebus::Dataset d = rebus::Dataset::load(a.dataset);
  const rebus::SplitDataset s = rebus::split(d);
  const rebus::PatternSet f =
      rebus::mine_frequent_substrings(s.train, a.min_count, a.max_size);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  f.save_text(out);
  write_run_json(out.has_parent_path() ? out.parent_path() : fs::path("."),
                 "mine",
                 json{{"dataset", a.dataset},
                      {"out", a.out},
                      {"min_count", a.min_count},
                      {"max_size", a.max_size}});
  std::cout << "patterns: " << f.size() << " frequent substrings\n";
  return 0;
}

struct TrainArgs {
  std::string dataset, out, patterns_file, config_file, mode = "full";
  rebus::Hyperparams hyper;
  rebus::TrainConfig config;
  bool grid = false;
  std::string grid_alphas, grid_gammas, grid_lambdas;
  std::uint32_t grid_patience = 0, grid_max_epochs = 0;
};

int cmd_train(TrainArgs& a, const CLI::App* sub) {
  if (!a.config_file.empty())
    apply_config_file(a.config_file, a.hyper, a.config, sub);
  a.hyper.mode = rebus::mode_from_name(a.mode);
  a.hyper.validate();
  a.config.validate();

  const fs::path dir = ensure_dir(a.out);
  const rebus::Dataset d = rebus::Dataset::load(a.dataset);
  const rebus::SplitDataset s = rebus::split(d);

  json run{{"dataset", a.dataset},
           {"hyper", hyper_to_json(a.hyper)},
           {"train", train_config_to_json(a.config)},
           {"grid", a.grid},
           {"seed", a.config.rng_seed}};

  if (a.grid) {
    if (!a.patterns_file.empty())
      throw rebus::InputError("--grid mines its own patterns; drop --patterns");
    rebus::HyperGrids grids;
    grids.mining = {{a.hyper.min_count, a.hyper.max_size}};
    if (!a.grid_alphas.empty()) grids.alphas = parse_double_list(a.grid_alphas);
    if (!a.grid_gammas.empty()) grids.gammas = parse_double_list(a.grid_gammas);
    if (!a.grid_lambdas.empty()) grids.lambdas = parse_double_list(a.grid_lambdas);
    rebus::TrainConfig grid_cfg = a.config;
    if (a.grid_patience > 0) grid_cfg.patience = a.grid_patience;
    if (a.grid_max_epochs > 0) grid_cfg.max_epochs = a.grid_max_epochs;
    const rebus::GridResult gr = rebus::grid_search(s, a.hyper, grids, grid_cfg);
    write_text(dir / "leaderboard.csv", leaderboard_csv(gr.leaderboard));
    a.hyper = gr.best;
    run["hyper"] = hyper_to_json(a.hyper);
    std::cout << "grid: best alpha=" << a.hyper.alpha
              << " gamma=" << a.hyper.gamma << " lambda=" << a.hyper.lambda_reg
              << " (valid auc " << rebus::fmt_double(gr.leaderboard.front().valid_auc)
              << ")\n";
  }

  rebus::PatternSet f;
  if (!a.patterns_file.empty())
    f = rebus::PatternSet::load_text(a.patterns_file);
  else
    f = rebus::mine_frequent_substrings(s.train, a.hyper.min_count,
                                        a.hyper.max_size);

  const rebus::TrainResult r = rebus::train(s, a.hyper, a.config, f);
  write_text(dir / "training_log.csv", training_log_csv(r.log));

  rebus::ModelBundle bundle;
  bundle.hyper = a.hyper;
  bundle.patterns = std::move(f);
  bundle.params = r.params;
  bundle.dataset_hash = d.content_hash();
  bundle.best_epoch = r.best_epoch;
  bundle.valid_auc = r.best_valid_auc;
  bundle.seed = a.config.rng_seed;
  bundle.save(dir / "model.rebusmdl");

  write_run_json(dir, "train", run);
  std::cout << "trained: best valid auc " << rebus::fmt_double(r.best_valid_auc)
            << " at epoch " << r.best_epoch << " (" << r.log.size()
            << " epochs)\n";
  return 0;
}

struct EvaluateArgs {
  std::string dataset, out, model, baseline, patterns_file, cold_file;
  bool pattern_stats = false;
  bool cold_start = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  if (a.model.empty() && a.baseline.empty())
    throw rebus::InputError("need --model or --baseline pop");
  if (!a.baseline.empty() && a.baseline != "pop")
    throw rebus::InputError("unknown baseline '" + a.baseline + "'");

  const fs::path dir = ensure_dir(a.out);
  const rebus::Dataset d = rebus::Dataset::load(a.dataset);
  const rebus::SplitDataset s = rebus::split(d);

  std::optional<rebus::ModelBundle> bundle;
  std::unique_ptr<rebus::Scorer> scorer;
  if (!a.model.empty()) {
    bundle = rebus::ModelBundle::load(a.model);
    if (bundle->dataset_hash != d.content_hash())
      std::cerr << "warning: model was trained on a different dataset\n";
    scorer = std::make_unique<rebus::ModelScorer>(*bundle);
  } else {
    scorer = std::make_unique<rebus::PopScorer>(rebus::pop_baseline(s));
  }

  const rebus::PatternSet* stats_patterns = nullptr;
  rebus::PatternSet loaded_patterns;
  if (a.pattern_stats) {
    if (!a.patterns_file.empty()) {
      loaded_patterns = rebus::PatternSet::load_text(a.patterns_file);
      stats_patterns = &loaded_patterns;
    } else if (bundle) {
      stats_patterns = &bundle->patterns;
    } else {
      throw rebus::InputError("--pattern-stats with --baseline needs --patterns");
    }
  }

  const rebus::EvalReport rep = rebus::evaluate(*scorer, s, stats_patterns);
  write_text(dir / "report.csv", rep.to_csv());
  write_text(dir / "report.json", rep.to_json().dump(2) + "\n");
  if (rep.has_pattern_stats)
    write_text(dir / "pattern_stats.csv", rebus::pattern_stats_csv(rep.patterns));
  print_report("test", rep);

  if (a.cold_start) {
    if (!bundle) throw rebus::InputError("--cold-start needs --model");
    fs::path cold = a.cold_file.empty()
                        ? fs::path(a.dataset).parent_path() / "cold_users.bin"
                        : fs::path(a.cold_file);
    const rebus::ColdStartPartition part =
        rebus::ColdStartPartition::load_cold(cold, d);
    const rebus::EvalReport cold_rep = rebus::cold_start_eval(*bundle, part);
    write_text(dir / "cold_report.csv", cold_rep.to_csv());
    write_text(dir / "cold_report.json", cold_rep.to_json().dump(2) + "\n");
    print_report("cold", cold_rep);
  }

  write_run_json(dir, "evaluate",
                 json{{"dataset", a.dataset},
                      {"model", a.model},
                      {"baseline", a.baseline},
                      {"pattern_stats", a.pattern_stats},
                      {"cold_start", a.cold_start},
                      {"seed", bundle ? bundle->seed : 0}});
  return 0;
}

struct RecommendArgs {
  std::string bundle, items, history_file, out;
  std::uint32_t n = 10;
};

int cmd_recommend(const RecommendArgs& a) {
  if (a.items.empty() == a.history_file.empty())
    throw rebus::InputError("need exactly one of --items or --history-file");
  const rebus::ModelBundle bundle = rebus::ModelBundle::load(a.bundle);

  std::vector<rebus::ItemId> history;
  if (!a.items.empty()) {
    history = parse_id_list(a.items);
  } else {
    std::ifstream in(a.history_file);
    if (!in) throw rebus::InputError("cannot open: " + a.history_file);
    std::uint64_t id = 0;
    while (in >> id) history.push_back(static_cast<rebus::ItemId>(id));
  }
  if (history.empty()) throw rebus::InputError("empty history");
  for (rebus::ItemId i : history)
    if (i >= bundle.params.num_items)
      throw rebus::InputError("item id " + std::to_string(i) +
                              " outside the model's catalog");

  const auto top = rebus::recommend_top_n(bundle.params, bundle.hyper, history,
                                          bundle.patterns, a.n, history);
  std::string lines;
  for (rebus::ItemId i : top) lines += std::to_string(i) + "\n";
  std::cout << lines;
  if (!a.out.empty()) {
    const fs::path dir = ensure_dir(a.out);
    write_text(dir / "recommendations.txt", lines);
    write_run_json(dir, "recommend",
                   json{{"bundle", a.bundle},
                        {"history", history},
                        {"n", a.n},
                        {"seed", bundle.seed}});
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"REBUS sequential recommender"};
  app.require_subcommand(1);

  PrepareArgs prep;
  CLI::App* sub_prepare = app.add_subcommand("prepare", "ingest an event log");
  sub_prepare->add_option("events", prep.events, "event log (tsv/csv)")->required();
  sub_prepare->add_option("--out", prep.out, "output directory")->required();
  sub_prepare->add_option("--recent", prep.recent, "keep the x most recent per user");
  sub_prepare->add_flag("--cold-start", prep.cold_start, "also emit cold users");
  sub_prepare->add_option("--seed", prep.seed, "recorded seed");

  MineArgs mine;
  CLI::App* sub_mine = app.add_subcommand("mine", "mine frequent substrings");
  sub_mine->add_option("dataset", mine.dataset, "dataset file")->required();
  sub_mine->add_option("--out", mine.out, "pattern file")->required();
  sub_mine->add_option("--min-count", mine.min_count, "support threshold");
  sub_mine->add_option("--max-size", mine.max_size, "maximum pattern length");

  TrainArgs train;
  CLI::App* sub_train = app.add_subcommand("train", "train a model");
  sub_train->add_option("dataset", train.dataset, "dataset file")->required();
  sub_train->add_option("--out", train.out, "output directory")->required();
  sub_train->add_option("--patterns", train.patterns_file, "pre-mined pattern file");
  sub_train->add_option("--config", train.config_file, "json config file");
  sub_train->add_option("--k", train.hyper.k, "embedding dimension");
  sub_train->add_option("--alpha", train.hyper.alpha, "long-term exponent");
  sub_train->add_option("--gamma", train.hyper.gamma, "long/short trade-off");
  sub_train->add_flag("--no-gamma", train.hyper.no_gamma, "unweighted LT + ST");
  sub_train->add_option("--lambda,--lambda-reg", train.hyper.lambda_reg,
                        "regularization");
  sub_train->add_option("--window", train.hyper.window, "long-term window (0 = all)");
  sub_train->add_option("--min-count", train.hyper.min_count, "mining support");
  sub_train->add_option("--max-size", train.hyper.max_size, "mining max length");
  sub_train->add_option("--mc-order", train.hyper.mc_order,
                        "fixed Markov order override (0 = matcher)");
  sub_train->add_option("--mode", train.mode, "full|lt|st");
  sub_train->add_option("--learning-rate", train.config.learning_rate, "");
  sub_train->add_option("--batch-size", train.config.batch_size, "");
  sub_train->add_option("--patience", train.config.patience, "");
  sub_train->add_option("--max-epochs", train.config.max_epochs, "");
  sub_train->add_option("--epoch-size", train.config.epoch_size,
                        "triples per epoch (0 = #train actions)");
  sub_train->add_option("--adam-beta1", train.config.adam_beta1, "");
  sub_train->add_option("--adam-beta2", train.config.adam_beta2, "");
  sub_train->add_option("--adam-epsilon", train.config.adam_epsilon, "");
  sub_train->add_option("--seed,--rng-seed", train.config.rng_seed, "");
  sub_train->add_flag("--grid", train.grid, "grid-search alpha/gamma/lambda");
  sub_train->add_option("--grid-alphas", train.grid_alphas, "comma list");
  sub_train->add_option("--grid-gammas", train.grid_gammas, "comma list");
  sub_train->add_option("--grid-lambdas", train.grid_lambdas, "comma list");
  sub_train->add_option("--grid-patience", train.grid_patience,
                        "patience during grid runs");
  sub_train->add_option("--grid-max-epochs", train.grid_max_epochs,
                        "epoch cap during grid runs");

  EvaluateArgs eval;
  CLI::App* sub_eval = app.add_subcommand("evaluate", "compute test metrics");
  sub_eval->add_option("dataset", eval.dataset, "dataset file")->required();
  sub_eval->add_option("--out", eval.out, "output directory")->required();
  sub_eval->add_option("--model", eval.model, "model bundle");
  sub_eval->add_option("--baseline", eval.baseline, "pop");
  sub_eval->add_option("--patterns", eval.patterns_file,
                       "pattern file for --pattern-stats with a baseline");
  sub_eval->add_flag("--pattern-stats", eval.pattern_stats, "emit context stats");
  sub_eval->add_flag("--cold-start", eval.cold_start, "also evaluate cold users");
  sub_eval->add_option("--cold-file", eval.cold_file,
                       "cold users file (default: next to dataset)");

  RecommendArgs rec;
  CLI::App* sub_rec = app.add_subcommand("recommend", "top-n for a history");
  sub_rec->add_option("bundle", rec.bundle, "model bundle")->required();
  sub_rec->add_option("--items", rec.items, "inline history, comma-separated ids");
  sub_rec->add_option("--history-file", rec.history_file, "ids, whitespace-separated");
  sub_rec->add_option("-n,--n", rec.n, "number of recommendations");
  sub_rec->add_option("--out", rec.out, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sub_prepare->parsed()) return cmd_prepare(prep);
    if (sub_mine->parsed()) return cmd_mine(mine);
    if (sub_train->parsed()) return cmd_train(train, sub_train);
    if (sub_eval->parsed()) return cmd_evaluate(eval);
    if (sub_rec->parsed()) return cmd_recommend(rec);
  } catch (const rebus::InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
