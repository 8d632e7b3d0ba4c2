// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "amd/dataset.hpp"
#include "amd/model.hpp"
#include "amd/pruning.hpp"

namespace amd {

// Shared training settings for teacher pre-training, joint distillation of
// the candidate family, and pairwise distillation. The per-candidate loss is
//
//   task cross-entropy + alpha * soft-logit KL + beta * hidden-state MSE
//
// with the teacher side of both distillation terms held constant.
struct DistillConfig {
  double alpha = 0.2;      // soft-logit weight
  double beta = 100.0;     // hidden-state weight
  double gamma = 1.0;      // softmax temperature for the logit term
  std::size_t epochs = 30;
  double warmup_epochs = 3.0;
  std::size_t batch_size = 64;
  double base_lr = 3e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  // Ablation switches for the three loss terms.
  bool use_ce = true;
  bool use_logit = true;
  bool use_feat = true;

  void validate() const;  // ConfigError on out-of-range settings
};

// Forward/backward bookkeeping for compute comparisons. Evaluation passes
// are tracked separately and never count toward training cost.
struct PassLedger {
  std::uint64_t teacher_forward = 0;    // frozen-teacher forwards
  std::uint64_t candidate_forward = 0;  // forwards of a model being trained
  std::uint64_t candidate_backward = 0;
  std::uint64_t eval_forward = 0;

  std::uint64_t candidate_passes() const { return candidate_forward + candidate_backward; }
  std::uint64_t training_passes() const {
    return teacher_forward + candidate_forward + candidate_backward;
  }
  PassLedger& operator+=(const PassLedger& other);
};

struct LossTerms {
  double ce = 0.0;
  double logit = 0.0;
  double feat = 0.0;
  double total = 0.0;
};

// Accuracy under argmax on sequential batches. Counts into eval_forward.
double evaluate_accuracy(const MiniViT& model, const Dataset& data, std::size_t batch_size,
                         PassLedger* ledger = nullptr, const StructuralMask* mask = nullptr);

// One batch of joint distillation: a single frozen-teacher forward, then for
// every candidate mask a masked forward of the shared weights and a backward
// of that candidate's loss. Gradients from all candidates accumulate before
// the caller steps the optimizer, so the effective objective is the sum of
// the per-candidate losses. Returns that summed loss; per-candidate parts go
// to `terms` when given. TrainingError (naming the candidate) on a
// non-finite loss.
double joint_step(const MiniViT& teacher, const MiniViT& shared, const CandidateFamily& family,
                  const Batch& batch, const DistillConfig& cfg, PassLedger* ledger = nullptr,
                  std::vector<LossTerms>* terms = nullptr);

struct EpochCandidateStat {
  double train_loss = 0.0;    // mean summed-objective share of this candidate
  double val_accuracy = 0.0;
};

struct JointReport {
  // stats[epoch][candidate]
  std::vector<std::vector<EpochCandidateStat>> stats;
  std::vector<double> final_accuracy;  // P_i per candidate after the last epoch
  PassLedger ledger;
};

// Distills every candidate in the family from the teacher in one run over
// shared weights. Batch order depends only on cfg.seed, the epoch, and the
// dataset size, so manual and joint modes see identical data streams.
JointReport train_joint(const MiniViT& teacher, MiniViT& shared, const CandidateFamily& family,
                        const Dataset& train, const Dataset& val, const DistillConfig& cfg);

struct PairReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_accuracy;
  double final_accuracy = 0.0;
  PassLedger ledger;
};

// Classic two-model distillation of `student` from the frozen `teacher`.
// Used for the final student stage, the plain-KD baseline, and each leg of
// the manual sweep.
PairReport distill_pair(const MiniViT& teacher, MiniViT& student, const Dataset& train,
                        const Dataset& val, const DistillConfig& cfg);

// Plain cross-entropy training with the same optimizer and schedule; the
// distillation weights in cfg are ignored.
PairReport pretrain_teacher(MiniViT& model, const Dataset& train, const Dataset& val,
                            const DistillConfig& cfg);

struct SweepRow {
  std::size_t candidate_index = 0;
  double scale = 0.0;
  double ta_accuracy = 0.0;       // candidate distilled from the teacher
  double student_accuracy = 0.0;  // student distilled from that candidate
};

struct ManualSweep {
  std::vector<SweepRow> rows;
  PassLedger ledger;
};

// The brute-force oracle: for every candidate above the student scale, train
// teacher -> candidate and candidate -> student as separate runs. The student
// architecture is the family's smallest mask. Quadratic in passes, which is
// exactly what joint distillation avoids.
ManualSweep sweep_manual(const MiniViT& teacher, const CandidateFamily& family,
                         const Dataset& train, const Dataset& val, const DistillConfig& cfg,
                         double student_scale);

}  // namespace amd
