// SPDX-License-Identifier: Apache-2.0
#include "amd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "amd/errors.hpp"
#include "amd/ops.hpp"
#include "amd/optim.hpp"

namespace amd {
namespace {

// Batch order must depend only on (seed, epoch, n) so that joint and manual
// runs train on identical data streams.
std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  Rng rng = Rng(seed).fork(epoch);
  return shuffled_indices(n, rng);
}

std::size_t batches_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

// teacher_out == nullptr drops both distillation terms (plain task training).
Tensor build_loss(const MiniViT::Output* teacher_out, const MiniViT::Output& out,
                  const std::vector<int>& labels, const DistillConfig& cfg, LossTerms* parts) {
  Tensor total;
  LossTerms t;
  auto accumulate = [&](const Tensor& term, double weight, double& slot) {
    slot = term.item();
    const Tensor weighted = (weight == 1.0) ? term : scale(term, weight);
    total = total.defined() ? add(total, weighted) : weighted;
  };
  if (cfg.use_ce) accumulate(cross_entropy(out.logits, labels), 1.0, t.ce);
  if (teacher_out != nullptr && cfg.use_logit)
    accumulate(kl_soft_logits(teacher_out->logits, out.logits, cfg.gamma), cfg.alpha, t.logit);
  if (teacher_out != nullptr && cfg.use_feat)
    accumulate(mse_hidden(teacher_out->hidden, out.hidden), cfg.beta, t.feat);
  if (!total.defined())
    throw ConfigError("every loss term is disabled; nothing to train on");
  t.total = total.item();
  if (parts != nullptr) *parts = t;
  return total;
}

// One forward/backward of `model` (optionally against a frozen teacher).
// The teacher runs before the tape opens, so its pass records nothing.
double grad_step(const MiniViT* teacher, const MiniViT& model, const StructuralMask* mask,
                 const Batch& batch, const DistillConfig& cfg, PassLedger& ledger,
                 LossTerms* parts, const std::string& who) {
  MiniViT::Output teacher_out;
  if (teacher != nullptr) {
    teacher_out = teacher->forward(batch.images);
    ledger.teacher_forward += 1;
  }
  TapeScope scope;
  const MiniViT::Output out = model.forward(batch.images, mask);
  const Tensor loss =
      build_loss(teacher != nullptr ? &teacher_out : nullptr, out, batch.labels, cfg, parts);
  const double value = loss.item();
  if (!std::isfinite(value)) throw TrainingError(who + ": non-finite training loss");
  scope.tape().backward(loss);
  ledger.candidate_forward += 1;
  ledger.candidate_backward += 1;
  return value;
}

AdamW make_optimizer(const MiniViT& model, const DistillConfig& cfg) {
  AdamWConfig ocfg;
  ocfg.lr = cfg.base_lr;
  ocfg.weight_decay = cfg.weight_decay;
  return AdamW(model.named_parameters(), ocfg);
}

PairReport run_pair(const MiniViT* teacher, MiniViT& model, const Dataset& train,
                    const Dataset& val, const DistillConfig& cfg, const std::string& who) {
  cfg.validate();
  if (train.size() == 0) throw DataError(who + ": training split is empty");
  if (val.size() == 0) throw DataError(who + ": validation split is empty");

  AdamW opt = make_optimizer(model, cfg);
  const std::size_t batches = batches_per_epoch(train.size(), cfg.batch_size);
  PairReport report;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, train.size());
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t count = std::min(cfg.batch_size, train.size() - begin);
      const Batch batch = take_batch(train, order, begin, count);
      opt.set_lr(cosine_warmup_lr(static_cast<double>(epoch) +
                                      static_cast<double>(b) / static_cast<double>(batches),
                                  static_cast<double>(cfg.epochs), cfg.warmup_epochs,
                                  cfg.base_lr));
      opt.zero_grad();
      loss_sum += grad_step(teacher, model, nullptr, batch, cfg, report.ledger, nullptr, who);
      opt.step();
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    report.epoch_val_accuracy.push_back(
        evaluate_accuracy(model, val, cfg.batch_size, &report.ledger));
  }
  report.final_accuracy = cfg.epochs > 0
                              ? report.epoch_val_accuracy.back()
                              : evaluate_accuracy(model, val, cfg.batch_size, &report.ledger);
  return report;
}

}  // namespace

void DistillConfig::validate() const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha) || !(beta >= 0.0) || !std::isfinite(beta))
    throw ConfigError("distillation weights must be finite and non-negative");
  if (!(gamma > 0.0) || !std::isfinite(gamma))
    throw ConfigError("softmax temperature must be positive");
  // epochs == 0 is a valid no-op schedule: no updates, evaluate as-is.
  if (epochs == 0) {
    if (warmup_epochs != 0.0) throw ConfigError("a zero-epoch schedule cannot warm up");
  } else if (!(warmup_epochs >= 0.0) || !(warmup_epochs < static_cast<double>(epochs))) {
    throw ConfigError("warmup must satisfy 0 <= warmup < epochs");
  }
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr))
    throw ConfigError("base learning rate must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
    throw ConfigError("weight decay must be non-negative");
  if (!use_ce && !use_logit && !use_feat)
    throw ConfigError("at least one loss term must stay enabled");
}

PassLedger& PassLedger::operator+=(const PassLedger& other) {
  teacher_forward += other.teacher_forward;
  candidate_forward += other.candidate_forward;
  candidate_backward += other.candidate_backward;
  eval_forward += other.eval_forward;
  return *this;
}

double evaluate_accuracy(const MiniViT& model, const Dataset& data, std::size_t batch_size,
                         PassLedger* ledger, const StructuralMask* mask) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw DomainError("evaluation batch size must be positive");

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - begin);
    const Batch batch = take_batch(data, order, begin, count);
    const MiniViT::Output out = model.forward(batch.images, mask);
    const double* logits = out.logits.data();
    const std::size_t classes = out.logits.cols();
    for (std::size_t r = 0; r < count; ++r) {
      const double* row = logits + r * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (static_cast<int>(best) == batch.labels[r]) ++correct;
    }
    if (ledger != nullptr) ledger->eval_forward += 1;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double joint_step(const MiniViT& teacher, const MiniViT& shared, const CandidateFamily& family,
                  const Batch& batch, const DistillConfig& cfg, PassLedger* ledger,
                  std::vector<LossTerms>* terms) {
  if (family.size() == 0) throw ContractError("joint_step needs a non-empty candidate family");
  PassLedger scratch;
  PassLedger& led = ledger != nullptr ? *ledger : scratch;
  if (terms != nullptr) terms->assign(family.size(), LossTerms{});

  // One teacher pass serves every candidate.
  const MiniViT::Output teacher_out = teacher.forward(batch.images);
  led.teacher_forward += 1;

  // Candidates run smallest to largest on one set of shared weights, each on
  // its own tape. Backward after each keeps only one candidate's activations
  // alive while the gradients still sum over all of them, which is the same
  // update as a single backward through the summed objective.
  double total = 0.0;
  for (std::size_t i = 0; i < family.size(); ++i) {
    TapeScope scope;
    const MiniViT::Output out = shared.forward(batch.images, &family.masks[i]);
    LossTerms parts;
    const Tensor loss = build_loss(&teacher_out, out, batch.labels, cfg, &parts);
    if (!std::isfinite(parts.total)) {
      throw TrainingError("candidate " + std::to_string(i) + " (scale " +
                          std::to_string(family.realized_scales[i]) +
                          ") produced a non-finite loss");
    }
    scope.tape().backward(loss);
    led.candidate_forward += 1;
    led.candidate_backward += 1;
    if (terms != nullptr) (*terms)[i] = parts;
    total += parts.total;
  }
  return total;
}

JointReport train_joint(const MiniViT& teacher, MiniViT& shared, const CandidateFamily& family,
                        const Dataset& train, const Dataset& val, const DistillConfig& cfg) {
  cfg.validate();
  if (family.size() == 0) throw ContractError("train_joint needs a non-empty candidate family");
  for (std::size_t k = 0; k + 1 < family.size(); ++k) {
    if (!family.masks[k].subset_of(family.masks[k + 1]))
      throw ContractError("candidate family masks are not nested");
  }
  if (train.size() == 0) throw DataError("joint distillation: training split is empty");
  if (val.size() == 0) throw DataError("joint distillation: validation split is empty");

  AdamW opt = make_optimizer(shared, cfg);
  const std::size_t batches = batches_per_epoch(train.size(), cfg.batch_size);

  JointReport report;
  std::vector<LossTerms> terms;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, train.size());
    std::vector<double> loss_sum(family.size(), 0.0);
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * cfg.batch_size;
      const std::size_t count = std::min(cfg.batch_size, train.size() - begin);
      const Batch batch = take_batch(train, order, begin, count);
      opt.set_lr(cosine_warmup_lr(static_cast<double>(epoch) +
                                      static_cast<double>(b) / static_cast<double>(batches),
                                  static_cast<double>(cfg.epochs), cfg.warmup_epochs,
                                  cfg.base_lr));
      opt.zero_grad();
      joint_step(teacher, shared, family, batch, cfg, &report.ledger, &terms);
      opt.step();
      for (std::size_t i = 0; i < family.size(); ++i) loss_sum[i] += terms[i].total;
    }
    std::vector<EpochCandidateStat> stats(family.size());
    for (std::size_t i = 0; i < family.size(); ++i) {
      stats[i].train_loss = loss_sum[i] / static_cast<double>(batches);
      stats[i].val_accuracy =
          evaluate_accuracy(shared, val, cfg.batch_size, &report.ledger, &family.masks[i]);
    }
    report.stats.push_back(std::move(stats));
  }
  report.final_accuracy.resize(family.size());
  for (std::size_t i = 0; i < family.size(); ++i) {
    report.final_accuracy[i] =
        cfg.epochs > 0
            ? report.stats.back()[i].val_accuracy
            : evaluate_accuracy(shared, val, cfg.batch_size, &report.ledger, &family.masks[i]);
  }
  return report;
}

PairReport distill_pair(const MiniViT& teacher, MiniViT& student, const Dataset& train,
                        const Dataset& val, const DistillConfig& cfg) {
  return run_pair(&teacher, student, train, val, cfg, "distill_pair");
}

PairReport pretrain_teacher(MiniViT& model, const Dataset& train, const Dataset& val,
                            const DistillConfig& cfg) {
  DistillConfig plain = cfg;
  plain.use_ce = true;  // task loss only; distillation terms need a teacher
  return run_pair(nullptr, model, train, val, plain, "pretrain");
}

ManualSweep sweep_manual(const MiniViT& teacher, const CandidateFamily& family,
                         const Dataset& train, const Dataset& val, const DistillConfig& cfg,
                         double student_scale) {
  cfg.validate();
  if (family.size() == 0) throw ContractError("sweep needs a non-empty candidate family");

  const StructuralMask& student_mask = family.masks.front();
  ManualSweep sweep;
  for (std::size_t i = 0; i < family.size(); ++i) {
    if (!(family.realized_scales[i] > student_scale)) continue;

    // Leg one: candidate i learns from the teacher, starting from the
    // teacher's weights restricted to its mask.
    MiniViT ta = teacher.materialize(family.masks[i]);
    const PairReport up = distill_pair(teacher, ta, train, val, cfg);

    // Leg two: the student learns from that candidate. Nesting makes the
    // student mask expressible inside the candidate's architecture.
    MiniViT student = ta.materialize(restrict_mask(student_mask, family.masks[i]));
    const PairReport down = distill_pair(ta, student, train, val, cfg);

    sweep.rows.push_back(
        {i, family.realized_scales[i], up.final_accuracy, down.final_accuracy});
    sweep.ledger += up.ledger;
    sweep.ledger += down.ledger;
  }
  if (sweep.rows.empty())
    throw SelectionError("no candidate sits above the student scale; nothing to sweep");
  return sweep;
}

}  // namespace amd
