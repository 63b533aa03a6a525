// fsic: command-line front end for the few-shot intent classification harness.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fsic/fsic.hpp"

namespace fs = std::filesystem;

namespace {

fsic::ExperimentConfig read_config(const std::string& path) {
  auto c = fsic::load_config(path);
  fsic::apply_seed_override(c);
  c.validate();
  return c;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

int cmd_prepare(const std::string& corpus_path, const std::string& config_path, const std::string& out) {
  auto c = read_config(config_path);
  if (!corpus_path.empty() && corpus_path != "synthetic") c.corpus_path = corpus_path;
  if (corpus_path == "synthetic") c.corpus_path.clear();
  const auto corpus = fsic::experiment_corpus(c);
  const auto folds = fsic::prepare_episodes(c, corpus, out);
  for (std::size_t k = 0; k < folds.size(); ++k) {
    std::cout << "fold " << k << ": " << folds[k].train.size() << " train, " << folds[k].valid.size()
              << " valid, " << folds[k].test.size() << " test episodes\n";
  }
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& episodes_dir, const std::string& out, int only_fold) {
  const auto c = read_config(config_path);
  const auto corpus = fsic::load_corpus((fs::path(episodes_dir) / "corpus.jsonl").string());
  const int n = fsic::count_folds(episodes_dir);
  if (n == 0) throw fsic::ValidationError("no fold directories under '" + episodes_dir + "'");
  if (only_fold >= n) throw fsic::ValidationError("fold " + std::to_string(only_fold) + " does not exist");
  fs::create_directories(out);
  fsic::write_text(fs::path(out) / "config.txt", fsic::to_text(c));
  for (int k = 0; k < n; ++k) {
    if (only_fold >= 0 && k != only_fold) continue;
    const auto fold = fsic::load_fold(fs::path(episodes_dir) / fsic::fold_dir_name(k));
    auto trained = fsic::train_fold(c, corpus, fold, k, log_line);
    const auto dir = fs::path(out) / fsic::fold_dir_name(k);
    fs::create_directories(dir);
    fsic::save_checkpoint((dir / "checkpoint.bin").string(), trained.model, fsic::checkpoint_meta(c, fold, trained, k));
    std::cout << "fold " << k << ": " << trained.state.update_count << " updates, best validation accuracy "
              << trained.state.best_validation_accuracy << " at update " << trained.state.best_update << "\n";
  }
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& episodes, const std::string& out) {
  // A directory pair evaluates every fold: <checkpoint>/fold_k/checkpoint.bin
  // against <episodes>/fold_k/test.jsonl.
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(checkpoint)) {
    const int n = fsic::count_folds(checkpoint);
    if (n == 0) throw fsic::ValidationError("no fold directories under '" + checkpoint + "'");
    for (int k = 0; k < n; ++k) {
      jobs.emplace_back(fs::path(checkpoint) / fsic::fold_dir_name(k) / "checkpoint.bin",
                        fs::path(episodes) / fsic::fold_dir_name(k) / "test.jsonl");
    }
  } else {
    jobs.emplace_back(checkpoint, episodes);
  }
  fs::create_directories(out);
  std::vector<fsic::FoldResult> results;
  std::optional<fsic::ExperimentConfig> config;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& [ck_path, ep_path] : jobs) {
    const auto ck = fsic::load_checkpoint(ck_path.string());
    if (!config) config = fsic::parse_config(ck.meta.train_config.at("experiment").get<std::string>());
    const auto test = fsic::load_episodes(ep_path.string());
    const std::string name = jobs.size() == 1 ? "predictions.jsonl"
                                              : "predictions_" + ck_path.parent_path().filename().string() + ".jsonl";
    results.push_back(fsic::evaluate_checkpoint(ck, test, fs::path(out) / name));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const auto report = fsic::make_report(*config, std::move(results), secs);
  fsic::write_report(out, report);
  std::cout << fsic::render_report(report);
  return 0;
}

int cmd_report(const std::vector<std::string>& runs, const std::string& out, bool with_std) {
  std::vector<fsic::EvaluationReport> reports;
  for (const auto& r : runs) {
    const fs::path p = fs::is_directory(r) ? fs::path(r) / "report.json" : fs::path(r);
    reports.push_back(fsic::load_report(p));
  }
  const auto table = fsic::make_table(reports, with_std);
  fsic::write_text(out, table);
  std::cout << table;
  return 0;
}

int cmd_run(const std::string& config_path, const std::string& out) {
  const auto c = read_config(config_path);
  const auto report = fsic::run_experiment(c, out, log_line);
  std::cout << fsic::render_report(report);
  return 0;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& r : fsic::run_selftest()) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot intent classification: episodes, training, evaluation and reports"};
  app.require_subcommand(1);

  std::string corpus, config, out, episodes, checkpoint;
  std::vector<std::string> runs;
  int fold = -1;
  bool no_std = false;

  auto* prep = app.add_subcommand("prepare-episodes", "Build folds and episode files");
  prep->add_option("--corpus", corpus, "Corpus JSONL, or 'synthetic' (default: the config's data.corpus)");
  prep->add_option("--config", config, "Experiment config")->required();
  prep->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train one configuration on prepared episodes");
  train->add_option("--config", config, "Experiment config")->required();
  train->add_option("--episodes", episodes, "Directory written by prepare-episodes")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--fold", fold, "Train only this fold");

  auto* eval = app.add_subcommand("evaluate", "Evaluate a checkpoint on test episodes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file, or a train output directory")->required();
  eval->add_option("--episodes", episodes, "Test episode JSONL, or a prepare-episodes directory")->required();
  eval->add_option("--out", out, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Render the comparison table");
  report->add_option("--runs", runs, "Evaluation directories or report.json files")->required();
  report->add_option("--out", out, "Markdown output file")->required();
  report->add_flag("--no-std", no_std, "Leave out the standard deviations");

  auto* run = app.add_subcommand("run", "prepare-episodes, train and evaluate in one go");
  run->add_option("--config", config, "Experiment config")->required();
  run->add_option("--out", out, "Output directory")->required();

  auto* selftest = app.add_subcommand("selftest", "Run the oracle and invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*prep) return cmd_prepare(corpus, config, out);
    if (*train) return cmd_train(config, episodes, out, fold);
    if (*eval) return cmd_evaluate(checkpoint, episodes, out);
    if (*report) return cmd_report(runs, out, !no_std);
    if (*run) return cmd_run(config, out);
    if (*selftest) return cmd_selftest();
  } catch (const fsic::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
