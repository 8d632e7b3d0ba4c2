// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "amd/dataset.hpp"
#include "amd/distill.hpp"
#include "amd/metrics.hpp"
#include "amd/model.hpp"
#include "amd/pruning.hpp"
#include "amd/selection.hpp"

namespace amd {

// Everything one end-to-end run needs, loadable from a JSON file. The same
// config drives the standalone stage commands, the automatic pipeline, and
// the manual sweep, so their results stay comparable.
struct RunConfig {
  ModelConfig model;
  DistillConfig distill;  // its seed is overwritten by the run seed
  double student_scale = 0.1;
  std::size_t grid_steps = 9;   // candidates between student and teacher
  double prune_tolerance = 0.02;
  // Teacher-assistant chain length. 0 distills the student straight from
  // the teacher (the plain-KD baseline); k >= 2 re-runs joint distillation
  // beneath each chosen assistant.
  std::size_t chain_steps = 1;
  std::optional<double> lambda;  // two-segment selection score
  std::size_t importance_batches = 32;
  std::string data = "synth";  // "synth" or "cifar10:<dir>"
  SynthConfig synth;
  double val_fraction = 0.1;
  // Where the final student starts: "ta" inherits from the chosen assistant,
  // "joint" from the jointly trained shared weights at the student mask.
  std::string student_init = "ta";
  std::string out_dir = "out";
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& text);   // ConfigError on bad fields
RunConfig run_config_from_file(const std::string& path);   // IoError when unreadable

// Artifact names inside out_dir.
inline constexpr const char* kTeacherCkpt = "teacher.ckpt";
inline constexpr const char* kImportanceCkpt = "importance.ckpt";
inline constexpr const char* kJointCkpt = "joint.ckpt";
inline constexpr const char* kAssistantCkpt = "ta.ckpt";
inline constexpr const char* kStudentCkpt = "student.ckpt";
inline constexpr const char* kReportJson = "report.json";
inline constexpr const char* kMetricsCsv = "metrics.csv";

// Deterministic train/validation split of the configured data source.
Split load_run_data(const RunConfig& cfg);

// Standalone stages. Each one reads its predecessors' checkpoints from
// cfg.out_dir, writes its own artifact there, and returns its headline
// numbers. Metrics rows accumulate into `metrics` when given.
double stage_pretrain(const RunConfig& cfg, std::vector<MetricsRow>* metrics = nullptr,
                      PassLedger* ledger = nullptr);
ImportanceScores stage_importance(const RunConfig& cfg);
CandidateFamily stage_family(const RunConfig& cfg,
                             std::vector<MetricsRow>* metrics = nullptr);
std::vector<double> stage_joint(const RunConfig& cfg,
                                std::vector<MetricsRow>* metrics = nullptr,
                                PassLedger* ledger = nullptr);

struct SelectOutcome {
  std::vector<ScoredRecord> chain;          // chosen assistants, outermost first
  struct TableRow {
    std::size_t candidate_index;
    double scale;
    double accuracy;
    double score;
    bool chosen;
  };
  std::vector<TableRow> table;              // first-round scores
  std::optional<double> kd_student_accuracy;  // probe used when lambda is set
  PassLedger ledger;                          // chain re-runs and the probe
};
SelectOutcome stage_select(const RunConfig& cfg, std::vector<MetricsRow>* metrics = nullptr);

double stage_final(const RunConfig& cfg, std::vector<MetricsRow>* metrics = nullptr,
                   PassLedger* ledger = nullptr);

// Accuracy of a saved model on the configured validation split (or on the
// full data when `on_val` is false).
double stage_eval(const RunConfig& cfg, const std::string& checkpoint_path, bool on_val = true);

struct PipelineResult {
  double teacher_accuracy = 0.0;
  std::vector<double> candidate_scales;     // realized
  std::vector<double> candidate_accuracy;   // P_i from the joint stage
  std::vector<SelectOutcome::TableRow> npsd_table;
  std::vector<ScoredRecord> chain;
  std::optional<double> kd_student_accuracy;
  double student_accuracy = 0.0;
  PassLedger distill_ledger;   // joint + chain re-runs + final (the automatic cost)
  PassLedger pretrain_ledger;  // shared prerequisite, kept separate
  std::vector<MetricsRow> metrics;
};

// Runs every stage in order, writing all artifacts plus report.json and
// metrics.csv into cfg.out_dir. Errors carry their failing stage in the
// message and keep their type.
PipelineResult run_pipeline(const RunConfig& cfg);

struct SweepResult {
  double teacher_accuracy = 0.0;
  std::vector<SweepRow> rows;
  std::vector<double> npsd_scores;  // aligned with rows
  std::optional<double> npsd_student_spearman;
  PassLedger sweep_ledger;
  PassLedger pretrain_ledger;
  std::vector<MetricsRow> metrics;
};

// Pretrains (or reuses) the teacher, prunes the family, then runs the manual
// per-candidate sweep. Writes report.json and metrics.csv into cfg.out_dir.
SweepResult run_sweep(const RunConfig& cfg);

// Report persistence. Reports embed their metrics rows; export_metrics
// rebuilds the CSV from a saved report, byte-identical for the same report.
void save_pipeline_report(const std::string& path, const RunConfig& cfg,
                          const PipelineResult& result);
void save_sweep_report(const std::string& path, const RunConfig& cfg,
                       const SweepResult& result);
std::vector<MetricsRow> metrics_from_report_file(const std::string& path);
void export_metrics(const std::string& report_path, const std::string& csv_path);

}  // namespace amd
