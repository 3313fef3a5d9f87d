#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mp/experiment.hpp"

namespace fs = std::filesystem;
using namespace mp;

namespace {

// Exit codes: 0 success, 1 usage or configuration error, 2 data error.
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

struct TrainFlags {
  RunConfig cfg;
  std::string out;
  std::string from_report;
  bool no_psrp = false;
};

void add_head_flags(CLI::App* app, RunConfig& c) {
  app->add_option("--head", c.head, "Head kind")
      ->check(CLI::IsMember({"lp-cls", "lp-gap", "lp-cls+gap", "gcp", "bcnn", "isqrt", "mhc3", "mp", "mp+cls-gcp",
                             "mp+cls-bcnn", "mp+cls-isqrt"}));
  app->add_option("--dhat", c.d_hat, "Reduced width d_hat (0 = auto)");
  app->add_option("--heads", c.h, "MHC3 head count h");
  app->add_option("--gcp-dim", c.gcp_dim, "Reduction width of covariance baselines (0 = min(128, d))");
  app->add_option("--mode", c.mode, "First-moment source")->check(CLI::IsMember({"auto", "cls", "gap"}));
  app->add_option("--isqrt-iters", c.isqrt_iters, "Newton-Schulz iterations");
}

void add_train_flags(CLI::App* app, RunConfig& c) {
  app->add_option("--features", c.features, "MPFT feature file");
  app->add_option("--epochs", c.train.epochs);
  app->add_option("--batch", c.train.batch);
  app->add_option("--batch-ref", c.train.batch_ref, "Reference batch of the linear scaling rule");
  app->add_option("--lr", c.train.lr, "Base learning rate at the reference batch");
  app->add_option("--wd", c.train.weight_decay, "AdamW weight decay");
  app->add_option("--warmup", c.train.warmup_frac, "Warmup fraction of total steps");
  app->add_option("--lr-min", c.train.lr_min);
  app->add_option("--seed", c.train.seed, "Seed for init, shuffling and the split");
  app->add_option("--train-fraction", c.train_fraction);
}

void add_mpplus_flags(CLI::App* app, TrainFlags& f) {
  app->add_option("--dh", f.cfg.d_h, "PSRP hidden width");
  app->add_flag("--no-psrp", f.no_psrp, "Train the head on the frozen backbone only");
  app->add_option("--layers", f.cfg.layers, "Toy backbone depth");
  app->add_option("--attn-heads", f.cfg.attn_heads);
  app->add_option("--ffn-expansion", f.cfg.ffn_expansion);
  app->add_option("--backbone-seed", f.cfg.backbone_seed);
}

ojson read_json_file(const fs::path& p) {
  const std::string text = read_file_bytes(p);
  try {
    return ojson::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + " is not valid JSON: " + e.what());
  }
}

/// Loads the feature file and its digest; with `expected_sha1`, a changed
/// file is rejected.
std::pair<FeatureDataset, std::string> load_features(const std::string& path, const std::string& expected_sha1 = "") {
  if (path.empty()) throw UsageError("--features is required");
  const std::string sha = file_sha1(path);
  if (!expected_sha1.empty() && sha != expected_sha1) {
    throw DataError("feature file " + path + " has SHA-1 " + sha + " but the report was produced from " + expected_sha1);
  }
  return {read_feature_file(path), sha};
}

void write_run(const RunOutcome& run, const std::string& out) {
  if (out.empty()) {
    std::cout << run.report.dump(2) << '\n';
    return;
  }
  fs::create_directories(out);
  write_bytes(fs::path(out) / "report.json", run.report.dump(2) + "\n");
  write_bytes(fs::path(out) / "model.mpck", encode_checkpoint(run.checkpoint));
  std::cout << run.config.command << " " << run.config.head << ": val_acc " << run.result.final_eval.accuracy
            << " params " << run.report["params"]["trainable"].get<std::size_t>() << " config " << run.report["config_hash"].get<std::string>()
            << " -> " << out << '\n';
}

int cmd_train(TrainFlags& f, const std::string& command) {
  RunConfig cfg = f.cfg;
  std::string expected_sha;
  if (!f.from_report.empty()) {
    const ojson rep = read_json_file(f.from_report);
    if (!rep.contains("config")) throw DataError(f.from_report + " has no config section");
    const std::string override_path = cfg.features;
    cfg = run_config_from_json(rep.at("config"));
    if (!override_path.empty()) {
      cfg.features = override_path;
    } else if (rep.contains("data") && rep["data"].contains("sha1")) {
      expected_sha = rep["data"]["sha1"].get<std::string>();
    }
  } else {
    cfg.command = command;
    if (f.no_psrp) cfg.psrp = false;
  }
  auto [ds, sha] = load_features(cfg.features, expected_sha);
  write_run(run_training(cfg, ds, sha), f.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Moment probing: synthetic data, head training, ablations, evaluation"};
  app.require_subcommand(1);

  SynthSpec spec;
  std::string regime = "cov-sep", synth_out;
  auto* synth = app.add_subcommand("synth", "Write a synthetic MPFT feature file");
  synth->add_option("--regime", regime, "mean-sep, cov-sep or mixed")
      ->check(CLI::IsMember({"mean-sep", "cov-sep", "mixed", "mean_sep", "cov_sep"}));
  synth->add_option("--classes", spec.classes);
  synth->add_option("--tokens", spec.tokens);
  synth->add_option("--dim", spec.dim);
  synth->add_option("--per-class", spec.per_class);
  synth->add_option("--rho", spec.rho);
  synth->add_option("--delta", spec.delta);
  synth->add_option("--seed", spec.seed);
  synth->add_flag("--with-cls", spec.with_cls, "Prepend a CLS row");
  synth->add_option("--out", synth_out, "Output file")->required();

  TrainFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "Train a probe head on frozen features");
  add_head_flags(train_cmd, train_flags.cfg);
  add_train_flags(train_cmd, train_flags.cfg);
  train_cmd->add_option("--out", train_flags.out, "Directory for report.json and model.mpck (stdout if omitted)");
  train_cmd->add_option("--from-report", train_flags.from_report, "Re-run the config stored in a report");

  TrainFlags plus_flags;
  auto* plus_cmd = app.add_subcommand("train-mpplus", "Train PSRP and a head on the toy backbone");
  add_head_flags(plus_cmd, plus_flags.cfg);
  add_train_flags(plus_cmd, plus_flags.cfg);
  add_mpplus_flags(plus_cmd, plus_flags);
  plus_cmd->add_option("--out", plus_flags.out, "Directory for report.json and model.mpck (stdout if omitted)");
  plus_cmd->add_option("--from-report", plus_flags.from_report, "Re-run the config stored in a report");

  TrainFlags abl_flags;
  std::string suite;
  auto* abl_cmd = app.add_subcommand("ablate", "Run an ablation suite on one feature file");
  abl_cmd->add_option("--suite", suite, "probing, dhat or dh")->required();
  add_head_flags(abl_cmd, abl_flags.cfg);
  add_train_flags(abl_cmd, abl_flags.cfg);
  add_mpplus_flags(abl_cmd, abl_flags);
  abl_cmd->add_option("--out", abl_flags.out, "Directory for ablation.json");

  std::string model_path, eval_features;
  bool eval_all = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a saved model");
  eval_cmd->add_option("--model", model_path, "model.mpck from train")->required();
  eval_cmd->add_option("--features", eval_features, "MPFT feature file")->required();
  eval_cmd->add_flag("--all", eval_all, "Use every sample instead of the run's validation split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*synth) {
      spec.regime = parse_regime(regime);
      const FeatureDataset ds = synth_generate(spec);
      write_feature_file(synth_out, ds);
      const auto& h = ds.header;
      std::cout << synth_out << ": samples=" << h.sample_count << " tokens=" << h.tokens_per_sample
                << " dim=" << h.feature_dim << " classes=" << h.class_count << " has_cls=" << int(h.has_cls)
                << " sha1=" << file_sha1(synth_out) << '\n';
    } else if (*train_cmd) {
      return cmd_train(train_flags, "train");
    } else if (*plus_cmd) {
      return cmd_train(plus_flags, "train-mpplus");
    } else if (*abl_cmd) {
      const Suite s = parse_suite(suite);
      if (abl_flags.no_psrp) throw UsageError("--no-psrp does not apply to ablation suites");
      auto [ds, sha] = load_features(abl_flags.cfg.features);
      const AblationOutcome out = run_ablation(s, abl_flags.cfg, ds, sha);
      std::cout << format_ablation_table(out.report);
      if (!abl_flags.out.empty()) {
        fs::create_directories(abl_flags.out);
        write_bytes(fs::path(abl_flags.out) / "ablation.json", out.report.dump(2) + "\n");
      }
    } else if (*eval_cmd) {
      const Checkpoint ck = decode_checkpoint(read_file_bytes(model_path));
      const FeatureDataset ds = read_feature_file(eval_features);
      const EvalResult r = evaluate_checkpoint(ck, ds, eval_all);
      ojson j;
      j["schema"] = kEvalSchema;
      j["config_hash"] = ck.config_hash;
      j["split"] = eval_all ? "all" : "val";
      j["samples"] = r.samples;
      j["accuracy"] = r.accuracy;
      j["loss"] = r.loss;
      j["per_class_accuracy"] = r.per_class_accuracy;
      std::cout << j.dump(2) << '\n';
    }
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return 0;
}
