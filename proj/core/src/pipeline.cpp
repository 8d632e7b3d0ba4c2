// SPDX-License-Identifier: Apache-2.0
#include "amd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include <json.hpp>

#include "amd/checkpoint.hpp"
#include "amd/errors.hpp"

namespace amd {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Independent RNG streams derived from the run seed.
constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kSplitStream = 2;

std::string join(const std::string& dir, const char* name) {
  return (fs::path(dir) / name).string();
}

// Re-throws with the failing stage prefixed, keeping the exception type so
// exit-code mapping still works downstream.
template <typename F>
auto with_stage(const char* stage, F&& fn) -> decltype(fn()) {
  const auto tag = [stage](const char* what) { return std::string(stage) + ": " + what; };
  try {
    return fn();
  } catch (const PruningError& e) {
    throw PruningError(tag(e.what()), e.min_reachable_scale);
  } catch (const CorruptionError& e) {
    throw CorruptionError(tag(e.what()));
  } catch (const FormatError& e) {
    throw FormatError(tag(e.what()));
  } catch (const ConfigError& e) {
    throw ConfigError(tag(e.what()));
  } catch (const DataError& e) {
    throw DataError(tag(e.what()));
  } catch (const TrainingError& e) {
    throw TrainingError(tag(e.what()));
  } catch (const SelectionError& e) {
    throw SelectionError(tag(e.what()));
  } catch (const MaskError& e) {
    throw MaskError(tag(e.what()));
  } catch (const DimensionError& e) {
    throw DimensionError(tag(e.what()));
  } catch (const DomainError& e) {
    throw DomainError(tag(e.what()));
  } catch (const ContractError& e) {
    throw ContractError(tag(e.what()));
  } catch (const StateError& e) {
    throw StateError(tag(e.what()));
  } catch (const IoError& e) {
    throw IoError(tag(e.what()));
  } catch (const Error& e) {
    throw Error(tag(e.what()));
  }
}

void add_row(std::vector<MetricsRow>* metrics, std::string stage, std::optional<long> epoch,
             std::optional<std::size_t> index, std::optional<double> scale, std::string metric,
             double value, std::uint64_t seed) {
  if (metrics == nullptr) return;
  metrics->push_back({std::move(stage), epoch, index, scale, std::move(metric), value, seed});
}

void add_pair_rows(std::vector<MetricsRow>* metrics, const std::string& stage,
                   const PairReport& report, std::uint64_t seed) {
  for (std::size_t e = 0; e < report.epoch_loss.size(); ++e) {
    add_row(metrics, stage, static_cast<long>(e), {}, {}, "train_loss", report.epoch_loss[e],
            seed);
    add_row(metrics, stage, static_cast<long>(e), {}, {}, "val_accuracy",
            report.epoch_val_accuracy[e], seed);
  }
}

void add_ledger_rows(std::vector<MetricsRow>* metrics, const std::string& stage,
                     const PassLedger& ledger, std::uint64_t seed) {
  add_row(metrics, stage, {}, {}, {}, "teacher_forward",
          static_cast<double>(ledger.teacher_forward), seed);
  add_row(metrics, stage, {}, {}, {}, "candidate_forward",
          static_cast<double>(ledger.candidate_forward), seed);
  add_row(metrics, stage, {}, {}, {}, "candidate_backward",
          static_cast<double>(ledger.candidate_backward), seed);
  add_row(metrics, stage, {}, {}, {}, "eval_forward", static_cast<double>(ledger.eval_forward),
          seed);
}

DistillConfig stage_distill_config(const RunConfig& cfg) {
  DistillConfig d = cfg.distill;
  d.seed = cfg.seed;
  return d;
}

MiniViT fresh_teacher(const RunConfig& cfg) {
  Rng rng = Rng(cfg.seed).fork(kModelStream);
  return MiniViT(cfg.model, rng);
}

struct JointArtifacts {
  MiniViT shared;
  CandidateFamily family;
  std::vector<double> accuracy;
  double teacher_accuracy = 0.0;
};

JointArtifacts load_joint(const RunConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint(join(cfg.out_dir, kJointCkpt));
  JointArtifacts art{MiniViT::from_parameters(ckpt.config, ckpt.tensors), {}, {}, 0.0};

  const Tensor* targets = ckpt.find("family.targets");
  const Tensor* realized = ckpt.find("family.realized");
  const Tensor* accuracy = ckpt.find("candidate_accuracy");
  const Tensor* teacher_acc = ckpt.find("teacher_accuracy");
  if (targets == nullptr || realized == nullptr || accuracy == nullptr || teacher_acc == nullptr)
    throw CorruptionError("joint checkpoint is missing its family metadata");
  const std::size_t m = targets->size();
  if (realized->size() != m || accuracy->size() != m)
    throw CorruptionError("joint checkpoint family metadata sizes disagree");

  for (std::size_t k = 0; k < m; ++k) {
    const StructuralMask* mask = ckpt.find_mask("candidate." + std::to_string(k));
    if (mask == nullptr)
      throw CorruptionError("joint checkpoint is missing candidate mask " + std::to_string(k));
    art.family.masks.push_back(*mask);
    art.family.targets.push_back(targets->at(k));
    art.family.realized_scales.push_back(realized->at(k));
    art.accuracy.push_back(accuracy->at(k));
  }
  art.teacher_accuracy = teacher_acc->at(0);
  return art;
}

ImportanceScores scores_from_checkpoint(const Checkpoint& ckpt) {
  ImportanceScores scores;
  scores.head_params = head_param_count(ckpt.config);
  scores.unit_params = unit_param_count(ckpt.config);
  for (std::size_t l = 0; l < ckpt.config.num_layers; ++l) {
    const Tensor* h = ckpt.find("importance.heads." + std::to_string(l));
    const Tensor* u = ckpt.find("importance.units." + std::to_string(l));
    if (h == nullptr || u == nullptr)
      throw CorruptionError("importance checkpoint is missing layer " + std::to_string(l));
    scores.heads.emplace_back(h->data(), h->data() + h->size());
    scores.units.emplace_back(u->data(), u->data() + u->size());
  }
  return scores;
}

json ledger_to_json(const PassLedger& l) {
  return json{{"teacher_forward", l.teacher_forward},
              {"candidate_forward", l.candidate_forward},
              {"candidate_backward", l.candidate_backward},
              {"eval_forward", l.eval_forward}};
}

json metrics_to_json(const std::vector<MetricsRow>& rows) {
  json arr = json::array();
  for (const MetricsRow& r : rows) {
    json row{{"stage", r.stage}, {"metric", r.metric}, {"value", r.value}, {"seed", r.seed}};
    row["epoch"] = r.epoch.has_value() ? json(*r.epoch) : json(nullptr);
    row["candidate_index"] =
        r.candidate_index.has_value() ? json(*r.candidate_index) : json(nullptr);
    row["candidate_scale"] =
        r.candidate_scale.has_value() ? json(*r.candidate_scale) : json(nullptr);
    arr.push_back(std::move(row));
  }
  return arr;
}

std::vector<MetricsRow> metrics_from_json(const json& arr) {
  std::vector<MetricsRow> rows;
  for (const json& j : arr) {
    MetricsRow r;
    r.stage = j.at("stage").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    if (!j.at("epoch").is_null()) r.epoch = j.at("epoch").get<long>();
    if (!j.at("candidate_index").is_null())
      r.candidate_index = j.at("candidate_index").get<std::size_t>();
    if (!j.at("candidate_scale").is_null())
      r.candidate_scale = j.at("candidate_scale").get<double>();
    rows.push_back(std::move(r));
  }
  return rows;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  for (const auto& item : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* k) {
          return item.key() == k;
        }) == allowed.end()) {
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
  }
}

void write_text_file(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw IoError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move " + tmp + " into place at " + path);
  }
}

json load_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path + ": invalid JSON: " + e.what());
  }
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  distill.validate();
  if (!(student_scale > 0.0) || !(student_scale < 1.0))
    throw ConfigError("student_scale must lie in (0, 1)");
  if (grid_steps < 1) throw ConfigError("grid_steps must be at least 1");
  if (!(prune_tolerance >= 0.0)) throw ConfigError("prune_tolerance must be non-negative");
  if (lambda.has_value() && (!std::isfinite(*lambda) || *lambda < 0.0))
    throw ConfigError("lambda must be finite and non-negative");
  if (importance_batches < 1) throw ConfigError("importance_batches must be at least 1");
  if (!(val_fraction > 0.0) || !(val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in (0, 1)");
  if (student_init != "ta" && student_init != "joint")
    throw ConfigError("student_init must be \"ta\" or \"joint\"");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (data == "synth") {
    if (synth.image_size != model.image_size || synth.channels != model.channels)
      throw ConfigError("synthetic image geometry must match the model");
    if (synth.num_classes != model.num_classes)
      throw ConfigError("synthetic class count must match the model");
    if (synth.num_samples < 2) throw ConfigError("synthetic dataset needs at least 2 samples");
  } else if (data.rfind("cifar10:", 0) == 0) {
    if (data.size() <= 8) throw ConfigError("cifar10 data source needs a directory path");
  } else {
    throw ConfigError("data must be \"synth\" or \"cifar10:<dir>\"");
  }
}

std::string run_config_to_json(const RunConfig& c) {
  json j{{"model",
          {{"image_size", c.model.image_size},
           {"channels", c.model.channels},
           {"patch_size", c.model.patch_size},
           {"embed_dim", c.model.embed_dim},
           {"num_layers", c.model.num_layers},
           {"num_heads", c.model.num_heads},
           {"mlp_hidden", c.model.mlp_hidden},
           {"num_classes", c.model.num_classes}}},
         {"distill",
          {{"alpha", c.distill.alpha},
           {"beta", c.distill.beta},
           {"gamma", c.distill.gamma},
           {"epochs", c.distill.epochs},
           {"warmup_epochs", c.distill.warmup_epochs},
           {"batch_size", c.distill.batch_size},
           {"base_lr", c.distill.base_lr},
           {"weight_decay", c.distill.weight_decay},
           {"use_ce", c.distill.use_ce},
           {"use_logit", c.distill.use_logit},
           {"use_feat", c.distill.use_feat}}},
         {"student_scale", c.student_scale},
         {"grid_steps", c.grid_steps},
         {"prune_tolerance", c.prune_tolerance},
         {"chain_steps", c.chain_steps},
         {"lambda", c.lambda.has_value() ? json(*c.lambda) : json(nullptr)},
         {"importance_batches", c.importance_batches},
         {"data", c.data},
         {"synth",
          {{"num_samples", c.synth.num_samples},
           {"num_classes", c.synth.num_classes},
           {"image_size", c.synth.image_size},
           {"channels", c.synth.channels},
           {"noise_amplitude", c.synth.noise_amplitude}}},
         {"val_fraction", c.val_fraction},
         {"student_init", c.student_init},
         {"out_dir", c.out_dir},
         {"seed", c.seed}};
  return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config JSON: ") + e.what());
  }
  RunConfig c;
  try {
    check_keys(j, {"model", "distill", "student_scale", "grid_steps", "prune_tolerance",
                   "chain_steps", "lambda", "importance_batches", "data", "synth",
                   "val_fraction", "student_init", "out_dir", "seed"},
               "config");
    if (j.contains("model")) {
      const json& m = j["model"];
      check_keys(m, {"image_size", "channels", "patch_size", "embed_dim", "num_layers",
                     "num_heads", "mlp_hidden", "num_classes"},
                 "model");
      c.model.image_size = m.value("image_size", c.model.image_size);
      c.model.channels = m.value("channels", c.model.channels);
      c.model.patch_size = m.value("patch_size", c.model.patch_size);
      c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
      c.model.num_layers = m.value("num_layers", c.model.num_layers);
      c.model.num_heads = m.value("num_heads", c.model.num_heads);
      c.model.mlp_hidden = m.value("mlp_hidden", c.model.mlp_hidden);
      c.model.num_classes = m.value("num_classes", c.model.num_classes);
    }
    if (j.contains("distill")) {
      const json& d = j["distill"];
      check_keys(d, {"alpha", "beta", "gamma", "epochs", "warmup_epochs", "batch_size",
                     "base_lr", "weight_decay", "use_ce", "use_logit", "use_feat"},
                 "distill");
      c.distill.alpha = d.value("alpha", c.distill.alpha);
      c.distill.beta = d.value("beta", c.distill.beta);
      c.distill.gamma = d.value("gamma", c.distill.gamma);
      c.distill.epochs = d.value("epochs", c.distill.epochs);
      c.distill.warmup_epochs = d.value("warmup_epochs", c.distill.warmup_epochs);
      c.distill.batch_size = d.value("batch_size", c.distill.batch_size);
      c.distill.base_lr = d.value("base_lr", c.distill.base_lr);
      c.distill.weight_decay = d.value("weight_decay", c.distill.weight_decay);
      c.distill.use_ce = d.value("use_ce", c.distill.use_ce);
      c.distill.use_logit = d.value("use_logit", c.distill.use_logit);
      c.distill.use_feat = d.value("use_feat", c.distill.use_feat);
    }
    c.student_scale = j.value("student_scale", c.student_scale);
    c.grid_steps = j.value("grid_steps", c.grid_steps);
    c.prune_tolerance = j.value("prune_tolerance", c.prune_tolerance);
    c.chain_steps = j.value("chain_steps", c.chain_steps);
    if (j.contains("lambda") && !j["lambda"].is_null()) c.lambda = j["lambda"].get<double>();
    c.importance_batches = j.value("importance_batches", c.importance_batches);
    c.data = j.value("data", c.data);
    if (j.contains("synth")) {
      const json& s = j["synth"];
      check_keys(s, {"num_samples", "num_classes", "image_size", "channels", "noise_amplitude"},
                 "synth");
      c.synth.num_samples = s.value("num_samples", c.synth.num_samples);
      c.synth.num_classes = s.value("num_classes", c.synth.num_classes);
      c.synth.image_size = s.value("image_size", c.synth.image_size);
      c.synth.channels = s.value("channels", c.synth.channels);
      c.synth.noise_amplitude = s.value("noise_amplitude", c.synth.noise_amplitude);
    }
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.student_init = j.value("student_init", c.student_init);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
  return c;
}

RunConfig run_config_from_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return run_config_from_json(text);
}

Split load_run_data(const RunConfig& cfg) {
  cfg.validate();
  Dataset data;
  if (cfg.data == "synth") {
    data = gen_synth(cfg.seed, cfg.synth);
  } else {
    const TrainTest tt = load_cifar10_dir(cfg.data.substr(8));
    data = tt.train;
    if (data.image_size != cfg.model.image_size || data.channels != cfg.model.channels ||
        data.num_classes != cfg.model.num_classes)
      throw ConfigError("model geometry does not match the CIFAR-10 data");
  }
  Rng rng = Rng(cfg.seed).fork(kSplitStream);
  return split_dataset(data, cfg.val_fraction, rng);
}

double stage_pretrain(const RunConfig& cfg, std::vector<MetricsRow>* metrics,
                      PassLedger* ledger) {
  const Split split = load_run_data(cfg);
  fs::create_directories(cfg.out_dir);
  MiniViT teacher = fresh_teacher(cfg);
  const PairReport report =
      pretrain_teacher(teacher, split.train, split.val, stage_distill_config(cfg));
  save_model(join(cfg.out_dir, kTeacherCkpt), teacher);
  add_pair_rows(metrics, "pretrain-teacher", report, cfg.seed);
  add_row(metrics, "pretrain-teacher", {}, {}, {}, "accuracy", report.final_accuracy, cfg.seed);
  add_ledger_rows(metrics, "pretrain-teacher", report.ledger, cfg.seed);
  if (ledger != nullptr) *ledger += report.ledger;
  return report.final_accuracy;
}

ImportanceScores stage_importance(const RunConfig& cfg) {
  const Split split = load_run_data(cfg);
  const MiniViT teacher = load_model(join(cfg.out_dir, kTeacherCkpt));
  const ImportanceScores scores = compute_importance(teacher, split.train,
                                                     cfg.distill.batch_size,
                                                     cfg.importance_batches);
  Checkpoint ckpt;
  ckpt.config = teacher.config();
  for (std::size_t l = 0; l < scores.heads.size(); ++l) {
    ckpt.tensors.push_back(
        {"importance.heads." + std::to_string(l),
         Tensor::from_data({scores.heads[l].size()}, scores.heads[l])});
    ckpt.tensors.push_back(
        {"importance.units." + std::to_string(l),
         Tensor::from_data({scores.units[l].size()}, scores.units[l])});
  }
  save_checkpoint(join(cfg.out_dir, kImportanceCkpt), ckpt);
  return scores;
}

CandidateFamily stage_family(const RunConfig& cfg, std::vector<MetricsRow>* metrics) {
  const Checkpoint ckpt = load_checkpoint(join(cfg.out_dir, kImportanceCkpt));
  const ImportanceScores scores = scores_from_checkpoint(ckpt);
  const ScaleGrid grid = build_grid(1.0, cfg.student_scale, cfg.grid_steps);
  const CandidateFamily family =
      prune_to_grid(cfg.model, scores, grid, cfg.prune_tolerance);
  for (std::size_t k = 0; k < family.size(); ++k) {
    add_row(metrics, "grid", {}, k, family.realized_scales[k], "target_scale",
            family.targets[k], cfg.seed);
    add_row(metrics, "grid", {}, k, family.realized_scales[k], "realized_scale",
            family.realized_scales[k], cfg.seed);
  }
  return family;
}

std::vector<double> stage_joint(const RunConfig& cfg, std::vector<MetricsRow>* metrics,
                                PassLedger* ledger) {
  const Split split = load_run_data(cfg);
  const MiniViT teacher = load_model(join(cfg.out_dir, kTeacherCkpt));
  const CandidateFamily family = stage_family(cfg, nullptr);

  MiniViT shared = teacher.clone();
  const JointReport report =
      train_joint(teacher, shared, family, split.train, split.val, stage_distill_config(cfg));

  PassLedger eval_only;
  const double teacher_accuracy =
      evaluate_accuracy(teacher, split.val, cfg.distill.batch_size, &eval_only);

  Checkpoint ckpt;
  ckpt.config = shared.config();
  ckpt.tensors = shared.named_parameters();
  ckpt.tensors.push_back({"family.targets", Tensor::from_data({family.size()}, family.targets)});
  ckpt.tensors.push_back(
      {"family.realized", Tensor::from_data({family.size()}, family.realized_scales)});
  ckpt.tensors.push_back(
      {"candidate_accuracy", Tensor::from_data({family.size()}, report.final_accuracy)});
  ckpt.tensors.push_back({"teacher_accuracy", Tensor::scalar(teacher_accuracy)});
  for (std::size_t k = 0; k < family.size(); ++k)
    ckpt.masks.emplace_back("candidate." + std::to_string(k), family.masks[k]);
  save_checkpoint(join(cfg.out_dir, kJointCkpt), ckpt);

  for (std::size_t e = 0; e < report.stats.size(); ++e) {
    for (std::size_t k = 0; k < family.size(); ++k) {
      add_row(metrics, "joint-distill", static_cast<long>(e), k, family.realized_scales[k],
              "train_loss", report.stats[e][k].train_loss, cfg.seed);
      add_row(metrics, "joint-distill", static_cast<long>(e), k, family.realized_scales[k],
              "val_accuracy", report.stats[e][k].val_accuracy, cfg.seed);
    }
  }
  for (std::size_t k = 0; k < family.size(); ++k)
    add_row(metrics, "joint-distill", {}, k, family.realized_scales[k], "accuracy",
            report.final_accuracy[k], cfg.seed);
  add_ledger_rows(metrics, "joint-distill", report.ledger, cfg.seed);
  if (ledger != nullptr) *ledger += report.ledger;
  return report.final_accuracy;
}

SelectOutcome stage_select(const RunConfig& cfg, std::vector<MetricsRow>* metrics) {
  if (cfg.chain_steps == 0)
    throw ContractError("selection is undefined for a zero-length chain");
  const Split split = load_run_data(cfg);
  const DistillConfig dcfg = stage_distill_config(cfg);
  JointArtifacts joint = load_joint(cfg);
  const std::vector<StructuralMask>& masks = joint.family.masks;

  SelectOutcome outcome;

  // The two-segment score needs the student endpoint, which only a plain
  // teacher-to-student distillation can provide.
  std::optional<double> student_accuracy;
  if (cfg.lambda.has_value()) {
    const MiniViT teacher = load_model(join(cfg.out_dir, kTeacherCkpt));
    MiniViT probe = teacher.materialize(masks.front());
    const PairReport kd = distill_pair(teacher, probe, split.train, split.val, dcfg);
    student_accuracy = kd.final_accuracy;
    outcome.kd_student_accuracy = kd.final_accuracy;
    outcome.ledger += kd.ledger;
    add_row(metrics, "select", {}, {}, {}, "kd_student_accuracy", kd.final_accuracy, cfg.seed);
  }

  SelectionInput input;
  input.teacher_accuracy = joint.teacher_accuracy;
  input.teacher_scale = 1.0;
  input.student_scale = cfg.student_scale;
  input.lambda = cfg.lambda;
  input.student_accuracy = student_accuracy;
  for (std::size_t k = 0; k < joint.family.size(); ++k)
    input.records.push_back({k, joint.family.realized_scales[k], joint.accuracy[k]});

  // First-round table for the report (same arithmetic select_optimal uses).
  for (const NPSDRecord& r : input.records) {
    if (!(r.scale > input.student_scale)) continue;
    const double score =
        cfg.lambda.has_value()
            ? lambda_npsd(input.teacher_accuracy, input.teacher_scale, r.accuracy, r.scale,
                          *student_accuracy, input.student_scale, *cfg.lambda)
            : npsd(input.teacher_accuracy, input.teacher_scale, r.accuracy, r.scale);
    outcome.table.push_back({r.candidate_index, r.scale, r.accuracy, score, false});
  }

  // Chain state: the shared weights the next assistant is cut from, and the
  // mask (in full-architecture coordinates) describing their geometry.
  MiniViT current_shared = joint.shared.clone();
  StructuralMask current_outer = StructuralMask::full(cfg.model);
  std::size_t round = 0;

  RerunHook rerun = [&](const ScoredRecord& chosen) -> SelectionInput {
    const std::size_t k = chosen.record.candidate_index;
    MiniViT new_teacher =
        current_shared.materialize(restrict_mask(masks[k], current_outer));
    PassLedger eval_only;
    const double p_t =
        evaluate_accuracy(new_teacher, split.val, dcfg.batch_size, &eval_only);

    CandidateFamily sub;
    std::vector<std::size_t> kept;
    for (std::size_t j = 0; j < joint.family.size(); ++j) {
      if (!(joint.family.realized_scales[j] < chosen.record.scale)) continue;
      sub.targets.push_back(joint.family.targets[j]);
      sub.realized_scales.push_back(joint.family.realized_scales[j]);
      sub.masks.push_back(restrict_mask(masks[j], masks[k]));
      kept.push_back(j);
    }

    SelectionInput next;
    next.teacher_accuracy = p_t;
    next.teacher_scale = chosen.record.scale;
    next.student_scale = cfg.student_scale;
    next.lambda = cfg.lambda;
    next.student_accuracy = student_accuracy;
    if (sub.size() == 0) return next;  // select_optimal will name the empty band

    MiniViT new_shared = new_teacher.clone();
    const JointReport sub_report =
        train_joint(new_teacher, new_shared, sub, split.train, split.val, dcfg);
    outcome.ledger += sub_report.ledger;

    ++round;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      next.records.push_back({kept[i], sub.realized_scales[i], sub_report.final_accuracy[i]});
      add_row(metrics, "select", static_cast<long>(round), kept[i], sub.realized_scales[i],
              "chain_accuracy", sub_report.final_accuracy[i], cfg.seed);
    }
    current_shared = new_shared;
    current_outer = masks[k];
    return next;
  };

  outcome.chain = chain_select(input, cfg.chain_steps, rerun);

  for (auto& row : outcome.table) {
    row.chosen = row.candidate_index == outcome.chain.front().record.candidate_index;
    add_row(metrics, "select", 0, row.candidate_index, row.scale, "npsd", row.score, cfg.seed);
  }
  const ScoredRecord& last = outcome.chain.back();
  add_row(metrics, "select", {}, last.record.candidate_index, last.record.scale, "chosen_scale",
          last.record.scale, cfg.seed);
  add_ledger_rows(metrics, "select", outcome.ledger, cfg.seed);

  // Materialize the final assistant from the weights it was trained in.
  MiniViT ta = current_shared.materialize(
      restrict_mask(masks[last.record.candidate_index], current_outer));
  Checkpoint ckpt;
  ckpt.config = ta.config();
  ckpt.tensors = ta.named_parameters();
  ckpt.tensors.push_back({"accuracy", Tensor::scalar(last.record.accuracy)});
  ckpt.tensors.push_back({"scale", Tensor::scalar(last.record.scale)});
  ckpt.tensors.push_back({"score", Tensor::scalar(last.score)});
  ckpt.masks.emplace_back("ta", masks[last.record.candidate_index]);
  ckpt.masks.emplace_back("student", masks.front());
  save_checkpoint(join(cfg.out_dir, kAssistantCkpt), ckpt);
  return outcome;
}

double stage_final(const RunConfig& cfg, std::vector<MetricsRow>* metrics, PassLedger* ledger) {
  const Split split = load_run_data(cfg);
  const DistillConfig dcfg = stage_distill_config(cfg);

  MiniViT teacher_like = [&] {
    if (cfg.chain_steps == 0) return load_model(join(cfg.out_dir, kTeacherCkpt));
    const Checkpoint ckpt = load_checkpoint(join(cfg.out_dir, kAssistantCkpt));
    return MiniViT::from_parameters(ckpt.config, ckpt.tensors);
  }();

  // Student geometry is the family's smallest mask in full-model coordinates.
  StructuralMask student_mask;
  StructuralMask ta_mask = StructuralMask::full(cfg.model);
  if (cfg.chain_steps == 0) {
    student_mask = stage_family(cfg, nullptr).masks.front();
  } else {
    const Checkpoint ckpt = load_checkpoint(join(cfg.out_dir, kAssistantCkpt));
    const StructuralMask* s = ckpt.find_mask("student");
    const StructuralMask* t = ckpt.find_mask("ta");
    if (s == nullptr || t == nullptr)
      throw CorruptionError("assistant checkpoint is missing its masks");
    student_mask = *s;
    ta_mask = *t;
  }

  MiniViT student = [&] {
    if (cfg.student_init == "joint" && cfg.chain_steps > 0) {
      JointArtifacts joint = load_joint(cfg);
      return joint.shared.materialize(student_mask);
    }
    return teacher_like.materialize(restrict_mask(student_mask, ta_mask));
  }();

  const PairReport report = distill_pair(teacher_like, student, split.train, split.val, dcfg);

  Checkpoint ckpt;
  ckpt.config = student.config();
  ckpt.tensors = student.named_parameters();
  ckpt.tensors.push_back({"accuracy", Tensor::scalar(report.final_accuracy)});
  ckpt.masks.emplace_back("student", student_mask);
  save_checkpoint(join(cfg.out_dir, kStudentCkpt), ckpt);

  add_pair_rows(metrics, "final-distill", report, cfg.seed);
  add_row(metrics, "final-distill", {}, {}, {}, "student_accuracy", report.final_accuracy,
          cfg.seed);
  add_ledger_rows(metrics, "final-distill", report.ledger, cfg.seed);
  if (ledger != nullptr) *ledger += report.ledger;
  return report.final_accuracy;
}

double stage_eval(const RunConfig& cfg, const std::string& checkpoint_path, bool on_val) {
  const Split split = load_run_data(cfg);
  const MiniViT model = load_model(checkpoint_path);
  return evaluate_accuracy(model, on_val ? split.val : split.train, cfg.distill.batch_size);
}

PipelineResult run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  PipelineResult res;
  res.teacher_accuracy = with_stage("pretrain-teacher", [&] {
    return stage_pretrain(cfg, &res.metrics, &res.pretrain_ledger);
  });
  with_stage("importance", [&] { return stage_importance(cfg); });
  const CandidateFamily family =
      with_stage("grid", [&] { return stage_family(cfg, &res.metrics); });
  res.candidate_scales = family.realized_scales;

  if (cfg.chain_steps > 0) {
    res.candidate_accuracy = with_stage("joint-distill", [&] {
      return stage_joint(cfg, &res.metrics, &res.distill_ledger);
    });
    const SelectOutcome sel =
        with_stage("select", [&] { return stage_select(cfg, &res.metrics); });
    res.npsd_table = sel.table;
    res.chain = sel.chain;
    res.kd_student_accuracy = sel.kd_student_accuracy;
    res.distill_ledger += sel.ledger;
  }

  res.student_accuracy = with_stage("final-distill", [&] {
    return stage_final(cfg, &res.metrics, &res.distill_ledger);
  });

  save_pipeline_report(join(cfg.out_dir, kReportJson), cfg, res);
  write_metrics_csv(res.metrics, join(cfg.out_dir, kMetricsCsv));
  return res;
}

SweepResult run_sweep(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);

  SweepResult res;
  // Sweeps compare against an existing teacher when one is in out_dir, so a
  // pipeline and a sweep over the same directory measure the same model.
  const std::string teacher_path = join(cfg.out_dir, kTeacherCkpt);
  if (fs::exists(teacher_path)) {
    const Split split = load_run_data(cfg);
    const MiniViT teacher = load_model(teacher_path);
    res.teacher_accuracy = evaluate_accuracy(teacher, split.val, cfg.distill.batch_size);
    add_row(&res.metrics, "pretrain-teacher", {}, {}, {}, "accuracy", res.teacher_accuracy,
            cfg.seed);
  } else {
    res.teacher_accuracy = with_stage("pretrain-teacher", [&] {
      return stage_pretrain(cfg, &res.metrics, &res.pretrain_ledger);
    });
  }
  with_stage("importance", [&] { return stage_importance(cfg); });
  const CandidateFamily family =
      with_stage("grid", [&] { return stage_family(cfg, &res.metrics); });

  const Split split = load_run_data(cfg);
  const MiniViT teacher = load_model(teacher_path);
  const ManualSweep sweep = with_stage("sweep", [&] {
    return sweep_manual(teacher, family, split.train, split.val, stage_distill_config(cfg),
                        cfg.student_scale);
  });
  res.rows = sweep.rows;
  res.sweep_ledger = sweep.ledger;

  std::vector<double> students;
  for (const SweepRow& row : sweep.rows) {
    res.npsd_scores.push_back(npsd(res.teacher_accuracy, 1.0, row.ta_accuracy, row.scale));
    students.push_back(row.student_accuracy);
    add_row(&res.metrics, "sweep", {}, row.candidate_index, row.scale, "ta_accuracy",
            row.ta_accuracy, cfg.seed);
    add_row(&res.metrics, "sweep", {}, row.candidate_index, row.scale, "student_accuracy",
            row.student_accuracy, cfg.seed);
    add_row(&res.metrics, "sweep", {}, row.candidate_index, row.scale, "npsd",
            res.npsd_scores.back(), cfg.seed);
  }
  if (res.npsd_scores.size() >= 2)
    res.npsd_student_spearman = spearman(res.npsd_scores, students);
  if (res.npsd_student_spearman.has_value())
    add_row(&res.metrics, "sweep", {}, {}, {}, "spearman_npsd_student",
            *res.npsd_student_spearman, cfg.seed);
  add_ledger_rows(&res.metrics, "sweep", sweep.ledger, cfg.seed);

  save_sweep_report(join(cfg.out_dir, kReportJson), cfg, res);
  write_metrics_csv(res.metrics, join(cfg.out_dir, kMetricsCsv));
  return res;
}

void save_pipeline_report(const std::string& path, const RunConfig& cfg,
                          const PipelineResult& res) {
  json table = json::array();
  for (const auto& row : res.npsd_table) {
    table.push_back({{"candidate_index", row.candidate_index},
                     {"scale", row.scale},
                     {"accuracy", row.accuracy},
                     {"npsd", row.score},
                     {"chosen", row.chosen}});
  }
  json chain = json::array();
  for (const ScoredRecord& c : res.chain) {
    chain.push_back({{"candidate_index", c.record.candidate_index},
                     {"scale", c.record.scale},
                     {"accuracy", c.record.accuracy},
                     {"npsd", c.score}});
  }
  json j{{"kind", "pipeline"},
         {"config", json::parse(run_config_to_json(cfg))},
         {"teacher_accuracy", res.teacher_accuracy},
         {"candidate_scales", res.candidate_scales},
         {"candidate_accuracy", res.candidate_accuracy},
         {"npsd_table", table},
         {"chain", chain},
         {"kd_student_accuracy",
          res.kd_student_accuracy.has_value() ? json(*res.kd_student_accuracy) : json(nullptr)},
         {"student_accuracy", res.student_accuracy},
         {"ledger",
          {{"distill", ledger_to_json(res.distill_ledger)},
           {"pretrain", ledger_to_json(res.pretrain_ledger)}}},
         {"metrics", metrics_to_json(res.metrics)}};
  write_text_file(path, j.dump(2) + "\n");
}

void save_sweep_report(const std::string& path, const RunConfig& cfg, const SweepResult& res) {
  json rows = json::array();
  for (std::size_t i = 0; i < res.rows.size(); ++i) {
    rows.push_back({{"candidate_index", res.rows[i].candidate_index},
                    {"scale", res.rows[i].scale},
                    {"ta_accuracy", res.rows[i].ta_accuracy},
                    {"student_accuracy", res.rows[i].student_accuracy},
                    {"npsd", res.npsd_scores[i]}});
  }
  json j{{"kind", "sweep"},
         {"config", json::parse(run_config_to_json(cfg))},
         {"teacher_accuracy", res.teacher_accuracy},
         {"rows", rows},
         {"spearman_npsd_student", res.npsd_student_spearman.has_value()
                                       ? json(*res.npsd_student_spearman)
                                       : json(nullptr)},
         {"ledger",
          {{"sweep", ledger_to_json(res.sweep_ledger)},
           {"pretrain", ledger_to_json(res.pretrain_ledger)}}},
         {"metrics", metrics_to_json(res.metrics)}};
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<MetricsRow> metrics_from_report_file(const std::string& path) {
  const json j = load_json_file(path);
  if (!j.contains("metrics") || !j["metrics"].is_array())
    throw FormatError(path + " has no metrics array");
  try {
    return metrics_from_json(j["metrics"]);
  } catch (const json::exception& e) {
    throw FormatError(path + ": malformed metrics row: " + e.what());
  }
}

void export_metrics(const std::string& report_path, const std::string& csv_path) {
  write_metrics_csv(metrics_from_report_file(report_path), csv_path);
}

}  // namespace amd
