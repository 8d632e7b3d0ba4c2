// SPDX-License-Identifier: Apache-2.0
#include "amd/selection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "amd/errors.hpp"

namespace amd {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

double npsd(double teacher_accuracy, double teacher_scale, double candidate_accuracy,
            double candidate_scale) {
  if (!(candidate_scale < teacher_scale)) {
    throw DomainError("npsd needs candidate scale " + fmt(candidate_scale) +
                      " strictly below teacher scale " + fmt(teacher_scale));
  }
  return -(teacher_accuracy - candidate_accuracy) / (teacher_scale - candidate_scale);
}

double lambda_npsd(double teacher_accuracy, double teacher_scale,
                   double candidate_accuracy, double candidate_scale,
                   double student_accuracy, double student_scale, double lambda) {
  if (!(student_scale < candidate_scale) || !(candidate_scale < teacher_scale)) {
    throw DomainError("lambda_npsd needs student scale < candidate scale < teacher scale, got " +
                      fmt(student_scale) + ", " + fmt(candidate_scale) + ", " +
                      fmt(teacher_scale));
  }
  const double upper = (teacher_accuracy - candidate_accuracy) / (teacher_scale - candidate_scale);
  const double lower = (candidate_accuracy - student_accuracy) / (candidate_scale - student_scale);
  return -(upper + lambda * lower);
}

ScoredRecord select_optimal(const SelectionInput& input) {
  if (input.lambda.has_value() && !input.student_accuracy.has_value()) {
    throw DomainError("lambda selection needs the student accuracy");
  }
  for (std::size_t i = 0; i < input.records.size(); ++i) {
    const NPSDRecord& r = input.records[i];
    if (!std::isfinite(r.scale) || !std::isfinite(r.accuracy))
      throw DomainError("candidate record " + std::to_string(i) + " is not finite");
    if (!(r.scale < input.teacher_scale))
      throw DomainError("candidate scale " + fmt(r.scale) + " is not below the teacher scale " +
                        fmt(input.teacher_scale));
    for (std::size_t j = i + 1; j < input.records.size(); ++j) {
      if (input.records[j].scale == r.scale)
        throw DomainError("duplicate candidate scale " + fmt(r.scale));
    }
  }

  bool found = false;
  ScoredRecord best;
  for (const NPSDRecord& r : input.records) {
    if (!(r.scale > input.student_scale)) continue;  // the student itself is not a TA
    const double score =
        input.lambda.has_value()
            ? lambda_npsd(input.teacher_accuracy, input.teacher_scale, r.accuracy, r.scale,
                          *input.student_accuracy, input.student_scale, *input.lambda)
            : npsd(input.teacher_accuracy, input.teacher_scale, r.accuracy, r.scale);
    if (!found || score > best.score ||
        (score == best.score && r.scale < best.record.scale)) {
      best = {r, score};
      found = true;
    }
  }
  if (!found) {
    throw SelectionError("no eligible teacher assistant in (" + fmt(input.student_scale) + ", " +
                         fmt(input.teacher_scale) + ")");
  }
  return best;
}

std::vector<ScoredRecord> chain_select(const SelectionInput& input, std::size_t num_steps,
                                       const RerunHook& rerun) {
  std::vector<ScoredRecord> chain;
  if (num_steps == 0) return chain;

  SelectionInput current = input;
  for (std::size_t step = 0; step < num_steps; ++step) {
    ScoredRecord chosen = select_optimal(current);
    chain.push_back(chosen);
    if (step + 1 == num_steps) break;
    if (!rerun) throw ContractError("chain_select needs a rerun hook for multi-step chains");
    current = rerun(chosen);
  }
  return chain;
}

}  // namespace amd
