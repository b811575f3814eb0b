// Command-line entry point: data generation, training, classifier
// fine-tuning, evaluation, ablations, gradient verification, and bias
// reports. Every command writes its artifacts plus a manifest under --out.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "htcl/data.hpp"
#include "htcl/metrics.hpp"
#include "htcl/train.hpp"
#include "htcl/verification.hpp"

namespace fs = std::filesystem;
using namespace htcl;

namespace {

constexpr const char* kVersion = "0.1.0";

std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      ks.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw std::invalid_argument("--k: '" + item + "' is not an integer");
    }
    if (ks.back() < 0) throw std::invalid_argument("--k: values must be >= 0");
  }
  if (ks.empty()) throw std::invalid_argument("--k: empty list");
  return ks;
}

bool parse_on_off(const std::string& text, const std::string& flag) {
  if (text == "on") return true;
  if (text == "off") return false;
  throw std::invalid_argument(flag + ": expected on|off, got '" + text + "'");
}

// Seed precedence: --seed flag, then the config file, then HTCL_SEED.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag_seed,
                           const std::optional<std::uint64_t>& config_seed) {
  if (flag_seed) return *flag_seed;
  if (config_seed) return *config_seed;
  if (const char* env = std::getenv("HTCL_SEED")) {
    try {
      return std::stoull(env);
    } catch (const std::exception&) {
      throw std::invalid_argument("HTCL_SEED: '" + std::string(env) + "' is not an integer");
    }
  }
  return 0;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const std::string& config_text, std::uint64_t seed,
                    const std::vector<std::string>& artifacts) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = fnv1a64(config_text);
  j["seed"] = seed;
  j["versions"] = {{"htcl", kVersion}, {"checkpoint_format", 1}, {"dataset_schema", 1}};
  j["artifacts"] = artifacts;
  std::ofstream out(out_dir + "/manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest under '" + out_dir + "'");
  out << j.dump(1) << "\n";
}

void ensure_out(const std::string& out_dir) {
  if (out_dir.empty()) throw std::invalid_argument("--out: directory required");
  fs::create_directories(out_dir);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_loss_curve(const std::vector<LossBundle>& curve, const std::string& path) {
  std::ofstream out(path);
  out << LossBundle::csv_header() << "\n";
  for (std::size_t i = 0; i < curve.size(); ++i) out << curve[i].csv_row(static_cast<std::int64_t>(i)) << "\n";
}

int cmd_generate(const std::string& config_path, const std::string& out_dir,
                 std::optional<std::uint64_t> seed_flag) {
  ensure_out(out_dir);
  GenConfig cfg = GenConfig::from_json_file(config_path);
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  const auto result = generate(cfg);
  save_dataset(result.train, out_dir + "/train.json");
  save_dataset(result.test, out_dir + "/test.json");
  if (!result.empty_classes.empty()) {
    std::cerr << "warning: predicate classes never drawn in the train split:";
    for (const int c : result.empty_classes) std::cerr << " " << c;
    std::cerr << "\n";
  }
  write_manifest(out_dir, "generate", cfg.to_json_text(), cfg.seed, {"train.json", "test.json"});
  std::cout << "generated " << result.train.images.size() << " train / " << result.test.images.size()
            << " test images, " << result.train.total_relations() << " train relations\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed_flag) {
  ensure_out(out_dir);
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::from_json_file(config_path);
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  const Dataset data = load_dataset(data_path);
  const TrainResult res = train_model(cfg, data, &std::cout);
  save_checkpoint(res.ckpt, out_dir + "/checkpoint.json");
  write_loss_curve(res.curve, out_dir + "/losses.csv");
  {
    std::ofstream out(out_dir + "/metrics_epoch.csv");
    out << "epoch,metric,K,value\n";
    out.precision(10);
    for (const auto& [epoch, rep] : res.val_reports) {
      for (const int k : rep.ks) {
        out << epoch << ",R," << k << "," << rep.recall.at(k) << "\n";
        out << epoch << ",mR," << k << "," << rep.mean_recall.at(k) << "\n";
        out << epoch << ",F," << k << "," << rep.f_at.at(k) << "\n";
      }
    }
  }
  write_manifest(out_dir, "train", cfg.to_json_text(), cfg.seed,
                 {"checkpoint.json", "losses.csv", "metrics_epoch.csv"});
  if (res.aborted_nan) {
    std::cerr << "{\"error\": \"training diverged (non-finite loss); last good checkpoint saved\"}\n";
    return 2;
  }
  std::cout << "trained " << cfg.epochs << " epochs, checkpoint at " << out_dir << "/checkpoint.json\n";
  return 0;
}

int cmd_finetune(const std::string& ckpt_path, const std::string& which, const std::string& data_path,
                 const std::string& out_dir, std::optional<std::uint64_t> seed_flag,
                 std::optional<int> epochs_flag, std::optional<double> lr_flag,
                 std::optional<int> target_flag) {
  ensure_out(out_dir);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  ClassifierKind kind;
  if (which == "hpc")
    kind = ClassifierKind::Hpc;
  else if (which == "tpc")
    kind = ClassifierKind::Tpc;
  else
    throw std::invalid_argument("--which: expected hpc|tpc, got '" + which + "'");

  const Dataset data = load_dataset(data_path);
  const std::uint64_t seed = resolve_seed(seed_flag, ckpt.train.seed);
  const int epochs = epochs_flag.value_or(ckpt.train.ft_epochs);
  const double lr = lr_flag.value_or(ckpt.train.ft_lr);
  const int target = target_flag.value_or(ckpt.train.resample_target);

  // the classifier refits on the same core split the checkpoint trained on
  const auto [core, val] = split_train_val(data, ckpt.train.val_fraction, ckpt.train.seed);
  const BalancedIndex index = balanced_resample(core, target, seed);
  if (!index.missing_classes.empty()) {
    std::cerr << "warning: classes absent from the balanced index:";
    for (const int c : index.missing_classes) std::cerr << " " << c;
    std::cerr << "\n";
  }
  const Checkpoint ft = finetune_classifier(ckpt, kind, core, index, epochs, lr, seed, &std::cout);
  save_checkpoint(ft, out_dir + "/checkpoint.json");
  write_manifest(out_dir, "finetune", ckpt.train.to_json_text() + which, seed, {"checkpoint.json"});
  std::cout << "fine-tuned " << which << " for " << epochs << " epochs at lr " << lr << "\n";
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_path, const std::string& out_dir,
                 const std::string& k_text, const std::string& constraint_text, bool dump_predictions) {
  ensure_out(out_dir);
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Dataset data = load_dataset(data_path);
  const std::vector<int> ks = parse_k_list(k_text);
  const bool constraint = parse_on_off(constraint_text, "--graph-constraint");

  const auto preds = predict_dataset(ckpt, data, constraint);
  const MetricsReport rep = evaluate_rankings(preds, data, ks, to_string(ckpt.model.task), constraint);
  rep.write_csv(out_dir + "/report.csv");
  rep.write_per_class_csv(out_dir + "/per_class_recall.csv");
  {
    std::ofstream out(out_dir + "/report.json");
    out << rep.to_json_text() << "\n";
  }
  std::vector<std::string> artifacts = {"report.csv", "per_class_recall.csv", "report.json"};
  if (dump_predictions) {
    save_predictions(preds, out_dir + "/predictions.json");
    artifacts.push_back("predictions.json");
  }
  write_manifest(out_dir, "evaluate", ckpt_path + data_path + k_text + constraint_text, ckpt.train.seed,
                 artifacts);
  for (const int k : ks) {
    std::cout << "R@" << k << " " << rep.recall.at(k) << "  mR@" << k << " " << rep.mean_recall.at(k)
              << "  F@" << k << " " << rep.f_at.at(k) << "  M@" << k << " " << rep.m_at.at(k) << "\n";
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& train_path, const std::string& test_path,
               const std::string& out_dir, const std::string& k_text, const std::string& constraint_text,
               std::optional<std::uint64_t> seed_flag) {
  ensure_out(out_dir);
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::from_json_file(config_path);
  cfg.seed = resolve_seed(seed_flag, cfg.seed);
  const Dataset train_split = load_dataset(train_path);
  const Dataset test_split = load_dataset(test_path);
  const std::vector<int> ks = parse_k_list(k_text);
  const bool constraint = parse_on_off(constraint_text, "--graph-constraint");

  const auto rows = run_ablation(cfg, train_split, test_split, ks, constraint, &std::cout);
  {
    std::ofstream out(out_dir + "/ablation.csv");
    out << "variant,metric,K,value\n";
    out.precision(10);
    for (const auto& row : rows) {
      for (const int k : ks) {
        out << row.name << ",R," << k << "," << row.report.recall.at(k) << "\n";
        out << row.name << ",mR," << k << "," << row.report.mean_recall.at(k) << "\n";
        out << row.name << ",F," << k << "," << row.report.f_at.at(k) << "\n";
        out << row.name << ",M," << k << "," << row.report.m_at.at(k) << "\n";
      }
    }
  }
  write_manifest(out_dir, "ablate", cfg.to_json_text(), cfg.seed, {"ablation.csv"});
  for (const auto& row : rows) {
    std::cout << row.name << ": R@" << ks[0] << " " << row.report.recall.at(ks[0]) << " mR@" << ks[0]
              << " " << row.report.mean_recall.at(ks[0]) << " F@" << ks[0] << " "
              << row.report.f_at.at(ks[0]) << "\n";
  }
  return 0;
}

int cmd_bias_report(const std::string& baseline_path, const std::string& finetuned_path,
                    const std::string& htcl_path, const std::string& data_path, const std::string& out_dir,
                    const std::string& k_text, const std::string& constraint_text) {
  ensure_out(out_dir);
  const Checkpoint baseline = load_checkpoint(baseline_path);
  const Checkpoint finetuned = load_checkpoint(finetuned_path);
  const Checkpoint htcl = load_checkpoint(htcl_path);
  const Dataset data = load_dataset(data_path);
  const std::vector<int> ks = parse_k_list(k_text);
  const bool constraint = parse_on_off(constraint_text, "--graph-constraint");

  if (baseline.model.num_predicates != finetuned.model.num_predicates ||
      baseline.model.num_predicates != htcl.model.num_predicates)
    throw std::invalid_argument("bias-report: checkpoints disagree on the predicate class count");

  BiasReportInputs in;
  in.baseline = evaluate_checkpoint(baseline, data, ks, constraint);
  in.finetuned = evaluate_checkpoint(finetuned, data, ks, constraint);
  in.htcl = evaluate_checkpoint(htcl, data, ks, constraint);
  in.class_counts = htcl.stats.counts;
  in.plot_k = ks[0];
  in.gate.assign(static_cast<std::size_t>(htcl.model.num_predicates), 0.5);
  if (htcl.params.has("gate.c")) {
    const Tensor& c = htcl.params.value("gate.c");
    for (int i = 0; i < c.cols(); ++i) in.gate[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-c.at(0, i)));
  }
  write_bias_report(in, out_dir);
  write_manifest(out_dir, "bias-report", baseline_path + finetuned_path + htcl_path, htcl.train.seed,
                 {"summary.csv", "deltas.csv", "plot_data.csv"});
  std::cout << "bias report written to " << out_dir << " (deltas vs baseline: mR@" << ks[0] << " "
            << in.finetuned.mean_recall.at(ks[0]) - in.baseline.mean_recall.at(ks[0]) << ", R@" << ks[0]
            << " " << in.finetuned.recall.at(ks[0]) - in.baseline.recall.at(ks[0]) << ")\n";
  return 0;
}

int cmd_gradcheck(std::optional<std::uint64_t> seed_flag, const std::string& out_dir) {
  const std::uint64_t seed = resolve_seed(seed_flag, std::nullopt);
  const auto items = run_grad_suite(seed);
  double worst = 0.0;
  std::cout << "gradient verification (central differences, step 1e-5, tolerance 1e-4)\n";
  for (const auto& item : items) {
    std::cout << "  " << item.name << ": max rel err " << item.max_rel_err << " over " << item.entries
              << " entries -> " << (item.passed ? "ok" : "FAIL") << "\n";
    worst = std::max(worst, item.max_rel_err);
  }
  if (!out_dir.empty()) {
    ensure_out(out_dir);
    std::ofstream out(out_dir + "/gradcheck.csv");
    out << "case,max_rel_err,entries,passed\n";
    out.precision(10);
    for (const auto& item : items)
      out << item.name << "," << item.max_rel_err << "," << item.entries << "," << (item.passed ? 1 : 0)
          << "\n";
    write_manifest(out_dir, "gradcheck", "gradcheck", seed, {"gradcheck.csv"});
  }
  std::cout << "max relative error: " << worst << "\n";
  return worst <= 1e-4 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"head-tail cooperative learning laboratory"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::uint64_t> seed_flag;
  app.add_option("--seed", seed_flag, "seed override (falls back to config, then HTCL_SEED)");

  std::string config_path, data_path, out_dir = "out";
  std::string k_text = "20,50", constraint_text = "on";

  auto* gen = app.add_subcommand("generate", "generate synthetic long-tail splits");
  gen->add_option("--config", config_path, "generation config JSON")->required();
  gen->add_option("--out", out_dir, "output directory");

  std::string train_data;
  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "train config JSON");
  train->add_option("--data", train_data, "training split JSON")->required();
  train->add_option("--out", out_dir, "output directory");

  std::string ckpt_path, which = "tpc";
  std::optional<int> ft_epochs;
  std::optional<double> ft_lr;
  std::optional<int> ft_target;
  auto* ft = app.add_subcommand("finetune", "re-fit a classifier on a balanced feature cache");
  ft->add_option("--checkpoint", ckpt_path, "checkpoint JSON")->required();
  ft->add_option("--which", which, "classifier to re-fit: hpc|tpc")->required();
  ft->add_option("--data", train_data, "training split JSON")->required();
  ft->add_option("--out", out_dir, "output directory");
  ft->add_option("--epochs", ft_epochs, "fine-tune epochs");
  ft->add_option("--lr", ft_lr, "fine-tune learning rate");
  ft->add_option("--T", ft_target, "resamples per class");

  bool dump_predictions = false;
  auto* eval = app.add_subcommand("evaluate", "score a checkpoint on a split");
  eval->add_option("--checkpoint", ckpt_path, "checkpoint JSON")->required();
  eval->add_option("--data", data_path, "evaluation split JSON")->required();
  eval->add_option("--out", out_dir, "output directory");
  eval->add_option("--k", k_text, "comma-separated K values");
  eval->add_option("--graph-constraint", constraint_text, "on|off");
  eval->add_flag("--dump-predictions", dump_predictions, "write ranked triplets JSON");

  std::string test_data;
  auto* abl = app.add_subcommand("ablate", "run the component and loss ablation grid");
  abl->add_option("--config", config_path, "train config JSON");
  abl->add_option("--train", train_data, "training split JSON")->required();
  abl->add_option("--test", test_data, "test split JSON")->required();
  abl->add_option("--out", out_dir, "output directory");
  abl->add_option("--k", k_text, "comma-separated K values");
  abl->add_option("--graph-constraint", constraint_text, "on|off");

  std::string baseline_path, finetuned_path, htcl_path;
  auto* bias = app.add_subcommand("bias-report", "compare baseline, fine-tuned and cooperative models");
  bias->add_option("--baseline", baseline_path, "head-biased checkpoint")->required();
  bias->add_option("--finetuned", finetuned_path, "classifier-refit checkpoint")->required();
  bias->add_option("--htcl", htcl_path, "cooperative checkpoint")->required();
  bias->add_option("--data", data_path, "evaluation split JSON")->required();
  bias->add_option("--out", out_dir, "output directory");
  bias->add_option("--k", k_text, "comma-separated K values");
  bias->add_option("--graph-constraint", constraint_text, "on|off");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of layers and losses");
  gc->add_option("--out", out_dir, "optional output directory for the report CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "{\"error\": \"" << e.what() << "\"}\n";
    return app.exit(e);
  }

  try {
    if (gen->parsed()) return cmd_generate(config_path, out_dir, seed_flag);
    if (train->parsed()) return cmd_train(config_path, train_data, out_dir, seed_flag);
    if (ft->parsed())
      return cmd_finetune(ckpt_path, which, train_data, out_dir, seed_flag, ft_epochs, ft_lr, ft_target);
    if (eval->parsed())
      return cmd_evaluate(ckpt_path, data_path, out_dir, k_text, constraint_text, dump_predictions);
    if (abl->parsed())
      return cmd_ablate(config_path, train_data, test_data, out_dir, k_text, constraint_text, seed_flag);
    if (bias->parsed())
      return cmd_bias_report(baseline_path, finetuned_path, htcl_path, data_path, out_dir, k_text,
                             constraint_text);
    if (gc->parsed()) return cmd_gradcheck(seed_flag, gc->count("--out") ? out_dir : "");
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
