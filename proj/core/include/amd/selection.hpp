// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

namespace amd {

// Negative performance-to-scale slope between the teacher (P_t, S_t) and a
// smaller candidate (P_ta, S_ta): -(P_t - P_ta) / (S_t - S_ta). Higher is
// better; a candidate that keeps accuracy while dropping scale scores near
// zero, one that loses accuracy scores negative. Requires S_ta < S_t.
double npsd(double teacher_accuracy, double teacher_scale, double candidate_accuracy,
            double candidate_scale);

// Two-segment variant that also charges the drop from the candidate down to
// the student (P_s, S_s), weighted by lambda:
//   -((P_t - P_ta) / (S_t - S_ta) + lambda * (P_ta - P_s) / (S_ta - S_s)).
// Requires S_s < S_ta < S_t.
double lambda_npsd(double teacher_accuracy, double teacher_scale,
                   double candidate_accuracy, double candidate_scale,
                   double student_accuracy, double student_scale, double lambda);

// One jointly distilled candidate, identified by its family index.
struct NPSDRecord {
  std::size_t candidate_index = 0;
  double scale = 0.0;     // S_ta
  double accuracy = 0.0;  // P_ta on the fixed validation split
};

struct SelectionInput {
  double teacher_accuracy = 0.0;  // P_t
  double teacher_scale = 1.0;     // S_t
  std::vector<NPSDRecord> records;
  // Eligibility floor: only candidates with scale strictly above the student
  // scale can serve as teacher assistants.
  double student_scale = 0.0;
  // When lambda is set the two-segment score is used and student_accuracy
  // must be set as well.
  std::optional<double> lambda;
  std::optional<double> student_accuracy;
};

struct ScoredRecord {
  NPSDRecord record;
  double score = 0.0;
};

// Best-scoring eligible record; exact score ties go to the smaller scale so
// the result does not depend on record order. SelectionError when nothing is
// eligible, DomainError on malformed inputs (duplicate scales, scales outside
// (student, teacher), lambda without student accuracy).
ScoredRecord select_optimal(const SelectionInput& input);

// Iterated selection. Step k picks the best record strictly between the
// student scale and the current teacher scale, then (unless it was the last
// step) asks `rerun` for a fresh SelectionInput in which the chosen record
// acts as the teacher, e.g. by re-running joint distillation beneath it.
// num_steps == 0 returns an empty chain (plain teacher-to-student training).
using RerunHook = std::function<SelectionInput(const ScoredRecord& chosen)>;
std::vector<ScoredRecord> chain_select(const SelectionInput& input, std::size_t num_steps,
                                       const RerunHook& rerun);

}  // namespace amd
