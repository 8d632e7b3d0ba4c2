// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand reads the same JSON run config
// (all fields optional, sane defaults) and exchanges artifacts through the
// configured output directory, so stages can run one by one or all at once.
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amd/checkpoint.hpp"
#include "amd/errors.hpp"
#include "amd/pipeline.hpp"

namespace {

struct Cli {
  std::string config;
  std::string out;
  std::string data;
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string report;
  std::string csv;
  bool train_split = false;

  std::vector<CLI::Option*> seed_opts, out_opts, data_opts;

  bool seed_given() const { return given(seed_opts); }
  bool out_given() const { return given(out_opts); }
  bool data_given() const { return given(data_opts); }

 private:
  static bool given(const std::vector<CLI::Option*>& opts) {
    for (const CLI::Option* o : opts)
      if (o->count() > 0) return true;
    return false;
  }
};

void add_common(CLI::App* sub, Cli& cli) {
  sub->add_option("--config", cli.config, "JSON run config file");
  cli.seed_opts.push_back(sub->add_option("--seed", cli.seed, "override the run seed"));
  cli.out_opts.push_back(sub->add_option("--out", cli.out, "override the output directory"));
  cli.data_opts.push_back(
      sub->add_option("--data", cli.data, "data source: synth or cifar10:<dir>"));
}

amd::RunConfig make_config(const Cli& cli) {
  amd::RunConfig cfg =
      cli.config.empty() ? amd::RunConfig{} : amd::run_config_from_file(cli.config);
  if (cli.seed_given()) cfg.seed = cli.seed;
  if (cli.out_given()) cfg.out_dir = cli.out;
  if (cli.data_given()) cfg.data = cli.data;
  return cfg;
}

void print_ledger(const char* label, const amd::PassLedger& l) {
  std::printf("%s passes: teacher_forward=%llu candidate_forward=%llu candidate_backward=%llu eval_forward=%llu\n",
              label, static_cast<unsigned long long>(l.teacher_forward),
              static_cast<unsigned long long>(l.candidate_forward),
              static_cast<unsigned long long>(l.candidate_backward),
              static_cast<unsigned long long>(l.eval_forward));
}

int dispatch(const std::string& cmd, const Cli& cli) {
  using namespace amd;
  if (cmd == "pretrain-teacher") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const double acc = stage_pretrain(cfg);
    std::printf("teacher accuracy %.4f\n", acc);
    std::printf("wrote %s/%s\n", cfg.out_dir.c_str(), kTeacherCkpt);
  } else if (cmd == "importance") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const ImportanceScores scores = stage_importance(cfg);
    for (std::size_t l = 0; l < scores.heads.size(); ++l) {
      double hmin = scores.heads[l][0], hmax = hmin;
      for (double s : scores.heads[l]) {
        hmin = std::min(hmin, s);
        hmax = std::max(hmax, s);
      }
      std::printf("layer %zu: %zu heads (score %.3e .. %.3e), %zu units\n", l,
                  scores.heads[l].size(), hmin, hmax, scores.units[l].size());
    }
    std::printf("wrote %s/%s\n", cfg.out_dir.c_str(), kImportanceCkpt);
  } else if (cmd == "grid") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const ScaleGrid grid = build_grid(1.0, cfg.student_scale, cfg.grid_steps);
    std::printf("delta %.9g\ntargets:", grid.delta);
    for (double t : grid.targets) std::printf(" %.9g", t);
    std::printf("\n");
  } else if (cmd == "joint-distill") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const std::vector<double> acc = stage_joint(cfg);
    for (std::size_t i = 0; i < acc.size(); ++i)
      std::printf("candidate %zu accuracy %.4f\n", i, acc[i]);
    std::printf("wrote %s/%s\n", cfg.out_dir.c_str(), kJointCkpt);
  } else if (cmd == "select") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const SelectOutcome sel = stage_select(cfg);
    std::printf("idx  scale    accuracy  npsd      chosen\n");
    for (const auto& row : sel.table) {
      std::printf("%-4zu %-8.4g %-9.4f %-9.4g %s\n", row.candidate_index, row.scale,
                  row.accuracy, row.score, row.chosen ? "*" : "");
    }
    for (std::size_t i = 0; i < sel.chain.size(); ++i) {
      std::printf("chain step %zu: candidate %zu (scale %.4g, accuracy %.4f)\n", i,
                  sel.chain[i].record.candidate_index, sel.chain[i].record.scale,
                  sel.chain[i].record.accuracy);
    }
    std::printf("wrote %s/%s\n", cfg.out_dir.c_str(), kAssistantCkpt);
  } else if (cmd == "final-distill") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const double acc = stage_final(cfg);
    std::printf("student accuracy %.4f\n", acc);
    std::printf("wrote %s/%s\n", cfg.out_dir.c_str(), kStudentCkpt);
  } else if (cmd == "pipeline") {
    const RunConfig cfg = make_config(cli);
    const PipelineResult res = run_pipeline(cfg);
    std::printf("teacher accuracy %.4f\n", res.teacher_accuracy);
    if (!res.npsd_table.empty()) {
      std::printf("idx  scale    accuracy  npsd      chosen\n");
      for (const auto& row : res.npsd_table) {
        std::printf("%-4zu %-8.4g %-9.4f %-9.4g %s\n", row.candidate_index, row.scale,
                    row.accuracy, row.score, row.chosen ? "*" : "");
      }
    }
    std::printf("student accuracy %.4f\n", res.student_accuracy);
    print_ledger("distill", res.distill_ledger);
    std::printf("report in %s/%s, metrics in %s/%s\n", cfg.out_dir.c_str(), kReportJson,
                cfg.out_dir.c_str(), kMetricsCsv);
  } else if (cmd == "sweep") {
    const RunConfig cfg = make_config(cli);
    const SweepResult res = run_sweep(cfg);
    std::printf("teacher accuracy %.4f\n", res.teacher_accuracy);
    std::printf("idx  scale    ta_acc    student_acc  npsd\n");
    for (std::size_t i = 0; i < res.rows.size(); ++i) {
      std::printf("%-4zu %-8.4g %-9.4f %-12.4f %-9.4g\n", res.rows[i].candidate_index,
                  res.rows[i].scale, res.rows[i].ta_accuracy, res.rows[i].student_accuracy,
                  res.npsd_scores[i]);
    }
    if (res.npsd_student_spearman.has_value())
      std::printf("spearman(npsd, student accuracy) %.4f\n", *res.npsd_student_spearman);
    print_ledger("sweep", res.sweep_ledger);
    std::printf("report in %s/%s, metrics in %s/%s\n", cfg.out_dir.c_str(), kReportJson,
                cfg.out_dir.c_str(), kMetricsCsv);
  } else if (cmd == "eval") {
    const RunConfig cfg = make_config(cli);
    cfg.validate();
    const double acc = stage_eval(cfg, cli.checkpoint, !cli.train_split);
    std::printf("accuracy %.4f\n", acc);
  } else if (cmd == "export-metrics") {
    amd::export_metrics(cli.report, cli.csv);
    std::printf("wrote %s\n", cli.csv.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model compression by multi-step distillation with automatic "
               "teacher-assistant selection"};
  app.require_subcommand(1);

  Cli cli;
  const char* stage_cmds[] = {"pretrain-teacher", "importance",    "grid",
                              "joint-distill",    "select",        "final-distill",
                              "pipeline",         "sweep"};
  const char* stage_help[] = {
      "train the teacher on the configured data",
      "score every head and MLP unit by loss sensitivity",
      "print the candidate scale grid",
      "distill the whole candidate family in one shared run",
      "score candidates and pick the teacher-assistant chain",
      "distill the student from the chosen assistant",
      "run every stage end to end",
      "brute-force per-candidate sweep (the manual baseline)",
  };
  for (std::size_t i = 0; i < std::size(stage_cmds); ++i)
    add_common(app.add_subcommand(stage_cmds[i], stage_help[i]), cli);

  CLI::App* eval_cmd = app.add_subcommand("eval", "accuracy of a saved model");
  add_common(eval_cmd, cli);
  eval_cmd->add_option("--checkpoint", cli.checkpoint, "model checkpoint to evaluate")
      ->required();
  eval_cmd->add_flag("--train-split", cli.train_split, "evaluate on the training split");

  CLI::App* export_cmd =
      app.add_subcommand("export-metrics", "rebuild metrics.csv from a report");
  export_cmd->add_option("--report", cli.report, "report.json produced by a run")->required();
  export_cmd->add_option("--csv", cli.csv, "CSV file to write")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    return dispatch(app.get_subcommands().front()->get_name(), cli);
  } catch (const amd::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const amd::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const amd::FormatError& e) {  // includes CorruptionError
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const amd::IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const amd::TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 4;
  } catch (const amd::SelectionError& e) {
    std::fprintf(stderr, "selection error: %s\n", e.what());
    return 5;
  } catch (const amd::PruningError& e) {
    std::fprintf(stderr, "pruning error: %s (minimum reachable scale %.6g)\n", e.what(),
                 e.min_reachable_scale);
    return 6;
  } catch (const amd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
}
