#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pblab/bias_eval.hpp"
#include "pblab/taskgen.hpp"

namespace pblab {

// Text ingredients for one list-selection prompt. Candidate labels are
// 1-based and consecutive; the rendered text carries exactly one entry per
// candidate.
struct PromptInputs {
  std::string task_text;
  std::string item_noun = "Product";               // labels read "Potential <noun> [i]"
  std::string history_noun = "purchased products"; // plural phrase in the history header
  std::string history_label = "Bought Product";
  std::vector<std::string> history;
  std::vector<std::string> candidates;
  std::string question;
};

struct SolvedShot {
  std::vector<std::string> history;
  std::vector<std::string> candidates;
  int answer_slot = 0;
};

std::string build_zero_shot(const PromptInputs& in);

// Prepends the examples block; an empty shot list degenerates to zero-shot.
// A shot whose candidate list matches the evaluation instance's is a leak and
// raises an error.
std::string build_few_shot(const PromptInputs& in, const std::vector<SolvedShot>& shots);

// Inserts the hierarchical instruction with explicit contiguous group ranges.
std::string build_hierarchical(const PromptInputs& in, int groups);

// Contiguous 1-based inclusive label spans partitioning [1, k]; earlier
// groups take the ceiling size.
std::vector<std::pair<int, int>> hierarchical_ranges(int k, int groups);

// Mechanical multi-pass procedure: per-group winners first, then a final
// selection among the winners, mapped back to the original slot. Predictor
// exceptions propagate annotated with the failing pass/group; an invalid
// prediction (slot 0) makes the overall result invalid.
int hierarchical_infer(const Predictor& predictor, const RetrievalInstance& inst, int groups);

// Text rendering of a synthetic instance for endpoint probes.
PromptInputs inputs_from_instance(const TaskConfig& cfg, const RetrievalInstance& inst);
SolvedShot shot_from_instance(const TaskConfig& cfg, const RetrievalInstance& inst);

}  // namespace pblab
