// anticipate: corpus generation, two-stage training, evaluation, the
// modality and action-label harnesses, and the gradient self-check.
//
// Exit codes: 0 ok, 1 usage, 2 data/config, 3 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mat/config.hpp"
#include "mat/gradcheck_suite.hpp"

namespace fs = std::filesystem;
using namespace mat;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ExperimentConfig experiment(const std::string& path) { return path.empty() ? ExperimentConfig{} : load_experiment(path); }

std::vector<std::string> split_list(const std::string& text, char sep) {
  std::vector<std::string> out;
  for (auto& part : split_fields(text, sep)) {
    const auto b = part.find_first_not_of(" \t");
    const auto e = part.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(part.substr(b, e - b + 1));
  }
  return out;
}

std::string set_label(const std::vector<std::string>& set) { return detail::join(set, "+"); }

Corpus open_corpus(const std::string& dir, const ExperimentConfig& cfg) {
  auto c = load_corpus(dir, cfg.window, cfg.corpus);
  log_info("corpus " + dir + ": " + std::to_string(c.train.size()) + " train / " + std::to_string(c.eval.size()) +
           " eval segments (" + std::to_string(c.skipped) + " skipped for short history)");
  return c;
}

void write_runlog(const RunLog& log, const std::string& path) {
  write_text(path, log.to_csv());
  log_info("run log written to " + path);
}

std::string default_log_path(const std::string& checkpoint) { return checkpoint + ".runlog.csv"; }

/// Report JSON at `path`, flat CSV next to it.
void write_report(const MetricsReport& r, const std::string& path) {
  write_text(path, r.to_json().dump(2) + "\n");
  auto csv = fs::path(path);
  csv.replace_extension(".csv");
  write_text(csv.string(), r.to_csv());
}

void print_summary(const std::string& label, const MetricsReport& r) {
  const auto& a = r.at("action", "overall");
  std::cout << label << " action top1=" << *a.top1 << " top5=" << *a.top5
            << " cm_recall5=" << a.class_mean_recall5.value_or(0.0) << " (n=" << a.count << ")\n";
}

RunLog run_pretrain(Model<float>& model, const Corpus& corpus, const StageConfig& sc, const std::string& out,
                    const std::vector<std::string>& present = {}) {
  TrainOptions opt;
  opt.checkpoint_out = out;
  opt.present = present;
  return pretrain(model, corpus, sc, opt);
}

RunLog run_finetune(Model<float>& model, const Corpus& corpus, const StageConfig& sc, const std::string& out,
                    const std::vector<std::string>& present = {}) {
  TrainOptions opt;
  opt.checkpoint_out = out;
  opt.present = present;
  return finetune(model, corpus, sc, opt);
}

EvalOptions eval_options(std::uint64_t seed, double keep, std::vector<std::string> present = {}) {
  EvalOptions eo;
  eo.seed = seed;
  eo.action_keep_prob = keep;
  eo.present = std::move(present);
  return eo;
}

/// Modalities passed on the command line must be registered by the model.
std::vector<std::string> present_subset(const Model<float>& model, const std::string& list) {
  auto names = split_list(list, ',');
  for (const auto& n : names) {
    (void)model.config.modality_index(n);
  }
  return names;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal action anticipation on a synthetic world"};
  app.require_subcommand(1);

  std::string config_path, out, corpus_dir, checkpoint, mode = "full", modalities, report, sets, p_list, scope = "all",
                                                       fault, checkpoint_dir, log_path;
  std::optional<std::uint64_t> seed;
  bool from_scratch = false, mask_only = false, refinetune = false;

  auto* gen = app.add_subcommand("gen-world", "build a world and export its corpus");
  gen->add_option("--config", config_path, "experiment config (JSON)");
  gen->add_option("--out", out, "corpus directory")->required();
  gen->add_option("--seed", seed, "world seed");

  auto* pre = app.add_subcommand("pretrain", "stage 1: contrastive pre-training");
  pre->add_option("--corpus", corpus_dir)->required();
  pre->add_option("--config", config_path);
  pre->add_option("--out", out, "checkpoint to write")->required();
  pre->add_option("--log", log_path, "run log CSV (default <out>.runlog.csv)");
  pre->add_option("--seed", seed, "model init and batch-order seed");
  pre->add_option("--modalities", modalities, "comma-separated modalities the model registers");

  auto* fin = app.add_subcommand("finetune", "stage 2: action classification");
  fin->add_option("--corpus", corpus_dir)->required();
  fin->add_option("--config", config_path);
  fin->add_option("--checkpoint", checkpoint, "stage-1 checkpoint");
  fin->add_flag("--from-scratch", from_scratch, "start from random initialisation");
  fin->add_option("--mode", mode)->check(CLI::IsMember({"frozen", "full"}));
  fin->add_option("--out", out, "checkpoint to write")->required();
  fin->add_option("--log", log_path, "run log CSV (default <out>.runlog.csv)");
  fin->add_option("--seed", seed);
  fin->add_option("--modalities", modalities, "model modalities when starting from scratch");

  auto* ev = app.add_subcommand("eval", "metrics on the eval split");
  ev->add_option("--corpus", corpus_dir)->required();
  ev->add_option("--config", config_path);
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--modalities", modalities, "comma-separated present modalities (default: all)");
  ev->add_option("--report", report, "report JSON path (CSV written alongside)")->required();
  ev->add_option("--seed", seed);

  auto* abl = app.add_subcommand("ablate-modalities", "train and evaluate per modality set");
  abl->add_option("--corpus", corpus_dir)->required();
  abl->add_option("--config", config_path);
  abl->add_option("--checkpoint-dir", checkpoint_dir, "where per-set checkpoints go");
  abl->add_option("--sets", sets, "sets separated by ';', modalities by ','");
  abl->add_option("--out", out, "CSV path")->required();
  abl->add_flag("--mask-only", mask_only, "mask modalities of one trained model instead of retraining");
  abl->add_option("--checkpoint", checkpoint, "trained model for --mask-only");
  abl->add_option("--seed", seed);

  auto* sweep = app.add_subcommand("sweep-actions", "accuracy versus action-label keep probability");
  sweep->add_option("--corpus", corpus_dir)->required();
  sweep->add_option("--config", config_path);
  sweep->add_option("--checkpoint", checkpoint)->required();
  sweep->add_option("--p-list", p_list, "comma-separated keep probabilities");
  sweep->add_flag("--refinetune", refinetune, "fine-tune at each p before evaluating");
  sweep->add_option("--out", out, "CSV path")->required();
  sweep->add_option("--seed", seed);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite (double precision)");
  gc->add_option("--scope", scope, "all or one of tensor_engine, neural_blocks, fusion, anticipator, objectives");
  gc->add_option("--inject-fault", fault, "negate the backward rule of this op (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    check_log_env();
    auto cfg = experiment(config_path);

    if (*gen) {
      if (seed) cfg.world_seed = *seed;
      const auto world = build_world(cfg.world, cfg.world_seed);
      const auto s = export_corpus(world, cfg.world.videos, cfg.world.frames_per_video, out, cfg.window);
      std::cout << "videos=" << s.videos << " segments=" << s.segments << " train=" << s.train_segments
                << " eval=" << s.eval_segments << "\n";
      std::cout << "label_oracle_top1=" << s.eval_oracle.label_oracle_top1 << " chance=1/"
                << world.vocab.num_actions() << " (" << s.eval_oracle.chance << ")\n";
      return 0;
    }

    if (*gc) {
      if (!fault.empty()) detail::injected_fault() = fault;
      bool ok = true;
      for (const auto& r : run_gradcheck_suite(scope)) {
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " max_rel_error=" << r.max_rel_error
                  << " coords=" << r.checked << "\n";
        ok = ok && r.passed;
      }
      std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
      return ok ? 0 : 3;
    }

    const auto corpus = open_corpus(corpus_dir, cfg);

    if (*pre) {
      auto sc = cfg.pretrain;
      if (seed) cfg.model_seed = sc.seed = *seed;
      const auto mods = modalities.empty() ? cfg.modalities : split_list(modalities, ',');
      Model<float> model(model_config_for(corpus, cfg.model, mods), cfg.model_seed);
      const auto log = run_pretrain(model, corpus, sc, out);
      write_runlog(log, log_path.empty() ? default_log_path(out) : log_path);
      std::cout << "checkpoint=" << out << " final_loss=" << log.epochs.back().total << "\n";
      return 0;
    }

    if (*fin) {
      if (checkpoint.empty() == !from_scratch) {
        throw UsageError("finetune needs exactly one of --checkpoint or --from-scratch");
      }
      auto sc = cfg.finetune;
      sc.mode = parse_mode(mode);
      if (seed) cfg.model_seed = sc.seed = *seed;
      sc.validate();
      Model<float> model;
      if (from_scratch) {
        const auto mods = modalities.empty() ? cfg.modalities : split_list(modalities, ',');
        model = Model<float>(model_config_for(corpus, cfg.model, mods), cfg.model_seed);
      } else {
        if (!modalities.empty()) throw UsageError("--modalities applies only with --from-scratch");
        model = load_checkpoint<float>(checkpoint);
      }
      const auto log = run_finetune(model, corpus, sc, out);
      write_runlog(log, log_path.empty() ? default_log_path(out) : log_path);
      std::cout << "checkpoint=" << out << " final_loss=" << log.epochs.back().total << "\n";
      return 0;
    }

    if (*ev) {
      const auto model = load_checkpoint<float>(checkpoint);
      const auto present = modalities.empty() ? std::vector<std::string>{} : present_subset(model, modalities);
      const auto r = evaluate(model, corpus, eval_options(seed.value_or(cfg.eval_seed), cfg.corruption_p, present));
      write_report(r, report);
      print_summary(modalities.empty() ? "all" : modalities, r);
      return 0;
    }

    if (*abl) {
      std::vector<std::vector<std::string>> set_list = cfg.ablation_sets;
      if (!sets.empty()) {
        set_list.clear();
        for (const auto& s : split_list(sets, ';')) set_list.push_back(split_list(s, ','));
      }
      if (set_list.empty()) throw UsageError("no modality sets given");
      if (seed) cfg.model_seed = cfg.pretrain.seed = cfg.finetune.seed = *seed;
      std::optional<Model<float>> shared;
      if (mask_only) {
        if (checkpoint.empty()) throw UsageError("--mask-only needs --checkpoint");
        shared = load_checkpoint<float>(checkpoint);
      } else if (checkpoint_dir.empty()) {
        throw UsageError("ablate-modalities needs --checkpoint-dir (or --mask-only)");
      } else {
        ensure_dir(checkpoint_dir);
      }
      std::ostringstream csv;
      csv << "set";
      for (const auto& c : summary_columns()) csv << ',' << c;
      csv << '\n';
      for (const auto& set : set_list) {
        const auto label = set_label(set);
        MetricsReport r;
        if (shared) {
          r = evaluate(*shared, corpus, eval_options(cfg.eval_seed, cfg.corruption_p, present_subset(*shared, detail::join(set, ","))));
        } else {
          Model<float> model(model_config_for(corpus, cfg.model, set), cfg.model_seed);
          const auto base = (fs::path(checkpoint_dir) / label).string();
          write_runlog(run_pretrain(model, corpus, cfg.pretrain, base + ".pretrain.ckpt"), base + ".pretrain.runlog.csv");
          write_runlog(run_finetune(model, corpus, cfg.finetune, base + ".ckpt"), base + ".finetune.runlog.csv");
          r = evaluate(model, corpus, eval_options(cfg.eval_seed, cfg.corruption_p));
        }
        print_summary(label, r);
        csv << label << ',' << summary_values(r) << '\n';
      }
      write_text(out, csv.str());
      return 0;
    }

    if (*sweep) {
      std::vector<double> ps = cfg.p_list;
      if (!p_list.empty()) {
        ps.clear();
        for (const auto& t : split_list(p_list, ',')) {
          try {
            std::size_t used = 0;
            ps.push_back(std::stod(t, &used));
            if (used != t.size()) throw std::invalid_argument(t);
          } catch (const std::logic_error&) {
            throw UsageError("--p-list: '" + t + "' is not a number");
          }
          if (ps.back() < 0.0 || ps.back() > 1.0) throw UsageError("--p-list values must lie in [0, 1]");
        }
      }
      if (seed) cfg.finetune.seed = *seed;
      const auto model = load_checkpoint<float>(checkpoint);
      std::ostringstream csv;
      csv << "p";
      for (const auto& c : summary_columns()) csv << ',' << c;
      csv << '\n';
      for (double p : ps) {
        MetricsReport r;
        if (refinetune) {
          auto tuned = copy_model(model);
          auto sc = cfg.finetune;
          sc.action_keep_prob = p;
          finetune(tuned, corpus, sc);
          r = evaluate(tuned, corpus, eval_options(seed.value_or(cfg.eval_seed), p));
        } else {
          r = evaluate(model, corpus, eval_options(seed.value_or(cfg.eval_seed), p));
        }
        std::ostringstream label;
        label << "p=" << p;
        print_summary(label.str(), r);
        csv << p << ',' << summary_values(r) << '\n';
      }
      write_text(out, csv.str());
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    log_error(e.what());
    return 3;
  } catch (const ConfigError& e) {
    log_error(std::string("config error: ") + e.what());
    return 2;
  } catch (const DataError& e) {
    log_error(std::string("data error: ") + e.what());
    return 2;
  } catch (const Error& e) {
    log_error(e.what());
    return 2;
  }
  return 0;
}
