#include "pblab/promptkit.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace pblab {

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

void check_candidates(const PromptInputs& in) {
  if (in.candidates.empty()) throw std::invalid_argument("prompt: empty candidate list");
}

std::string history_block(const std::vector<std::string>& history, const std::string& noun,
                          const std::string& label) {
  if (history.empty()) return {};
  std::string out = "Belows are " + std::to_string(history.size()) + " historical " + noun + ":\n";
  for (std::size_t i = 0; i < history.size(); ++i) {
    out += label + " [" + std::to_string(i + 1) + "](" + history[i] + ")\n";
  }
  out += "\n";
  return out;
}

std::string candidate_block(const std::vector<std::string>& candidates,
                            const std::string& noun) {
  std::string out = "Belows are " + std::to_string(candidates.size()) + " potential " +
                    lower(noun) + "s to consider:\n";
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out += "Potential " + noun + " [" + std::to_string(i + 1) + "](" + candidates[i] + ")\n";
  }
  return out;
}

}  // namespace

std::string build_zero_shot(const PromptInputs& in) {
  check_candidates(in);
  std::string out = "Task: " + in.task_text + "\n\n";
  out += history_block(in.history, in.history_noun, in.history_label);
  out += candidate_block(in.candidates, in.item_noun);
  out += "Question: " + in.question;
  return out;
}

std::string build_few_shot(const PromptInputs& in, const std::vector<SolvedShot>& shots) {
  check_candidates(in);
  if (shots.empty()) return build_zero_shot(in);
  for (const auto& shot : shots) {
    if (shot.candidates == in.candidates) {
      throw std::invalid_argument("few-shot: example leaks the evaluation instance");
    }
    if (shot.answer_slot < 1 || shot.answer_slot > static_cast<int>(shot.candidates.size())) {
      throw std::invalid_argument("few-shot: example answer slot out of range");
    }
  }
  std::string out = "Task: " + in.task_text + "\n\n";
  out += "Belows are " + std::to_string(shots.size()) + " examples:\n";
  for (std::size_t e = 0; e < shots.size(); ++e) {
    const auto& shot = shots[e];
    out += "Example [" + std::to_string(e + 1) + "]\n";
    out += history_block(shot.history, in.history_noun, in.history_label);
    out += candidate_block(shot.candidates, in.item_noun);
    out += "Answer: Potential " + in.item_noun + " [" + std::to_string(shot.answer_slot) + "]\n";
  }
  out += "\n";
  out += history_block(in.history, in.history_noun, in.history_label);
  out += candidate_block(in.candidates, in.item_noun);
  out += "Question: " + in.question;
  return out;
}

std::vector<std::pair<int, int>> hierarchical_ranges(int k, int groups) {
  if (groups < 1 || groups > k) throw std::invalid_argument("hierarchical: groups out of range");
  const int base = k / groups;
  const int rem = k % groups;
  std::vector<std::pair<int, int>> out;
  int start = 1;
  for (int g = 0; g < groups; ++g) {
    const int size = base + (g < rem ? 1 : 0);
    out.emplace_back(start, start + size - 1);
    start += size;
  }
  return out;
}

std::string build_hierarchical(const PromptInputs& in, int groups) {
  check_candidates(in);
  const auto ranges = hierarchical_ranges(static_cast<int>(in.candidates.size()), groups);
  const std::string noun = lower(in.item_noun);
  std::string instruction =
      "Given the inherent challenge of selecting the prime candidate directly from a broad "
      "list, approach this assignment hierarchically: start by segmenting the " +
      noun + "s into " + std::to_string(groups) + " groups: ";
  for (std::size_t g = 0; g < ranges.size(); ++g) {
    if (g) instruction += ", ";
    instruction += "group ([" + std::to_string(ranges[g].first) + "]-[" +
                   std::to_string(ranges[g].second) + "])";
  }
  instruction += ". For each segmented group, determine the " + noun +
                 " with the highest likelihood. After narrowing down to the top " + noun +
                 "s from each group, decide which among them stands the best chance.";

  std::string out = "Task: " + in.task_text + "\n\n" + instruction + "\n\n";
  out += history_block(in.history, in.history_noun, in.history_label);
  out += candidate_block(in.candidates, in.item_noun);
  out += "Question: " + in.question;
  return out;
}

int hierarchical_infer(const Predictor& predictor, const RetrievalInstance& inst, int groups) {
  const int k = static_cast<int>(inst.candidates.size());
  const auto ranges = hierarchical_ranges(k, groups);

  auto sub_instance = [&](const std::vector<int>& slots) {
    RetrievalInstance sub;
    sub.prompt_tokens = inst.prompt_tokens;
    sub.truth_slot = 1;  // placeholder; prediction paths read only the prefix
    for (std::size_t i = 0; i < slots.size(); ++i) {
      sub.candidates.push_back(inst.candidates[static_cast<std::size_t>(slots[i] - 1)]);
      if (slots[i] == inst.truth_slot) sub.truth_slot = static_cast<int>(i) + 1;
    }
    return sub;
  };

  std::vector<int> winners;  // global slots
  for (std::size_t g = 0; g < ranges.size(); ++g) {
    std::vector<int> members;
    for (int s = ranges[g].first; s <= ranges[g].second; ++s) members.push_back(s);
    SlotPrediction pred;
    try {
      pred = predictor(sub_instance(members));
    } catch (const std::exception& e) {
      throw std::runtime_error("hierarchical pass 1, group " + std::to_string(g + 1) + " ([" +
                               std::to_string(ranges[g].first) + "]-[" +
                               std::to_string(ranges[g].second) + "]): " + e.what());
    }
    if (pred.slot < 1 || pred.slot > static_cast<int>(members.size())) return 0;
    winners.push_back(members[static_cast<std::size_t>(pred.slot - 1)]);
  }

  SlotPrediction final_pred;
  try {
    final_pred = predictor(sub_instance(winners));
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("hierarchical pass 2: ") + e.what());
  }
  if (final_pred.slot < 1 || final_pred.slot > static_cast<int>(winners.size())) return 0;
  return winners[static_cast<std::size_t>(final_pred.slot - 1)];
}

namespace {

std::string tokens_text(const std::vector<int>& toks) {
  std::string out;
  for (std::size_t i = 0; i < toks.size(); ++i) {
    if (i) out += " ";
    out += "t" + std::to_string(toks[i]);
  }
  return out;
}

}  // namespace

PromptInputs inputs_from_instance(const TaskConfig& cfg, const RetrievalInstance& inst) {
  PromptInputs in;
  if (cfg.flavor == TaskFlavor::session_match) {
    in.task_text =
        "Using a user's session history, identify one product from a distinct list of "
        "potential products that the user will most likely interact with next.";
    in.item_noun = "Product";
    in.history_noun = "purchased products";
    in.history_label = "Bought Product";
    in.question =
        "Now you need to predict ONLY one product from the potential products that the user "
        "will most likely purchase next. What is your prediction:";
  } else {
    in.task_text =
        "Based on the query record, determine one paper from a list of potential papers that "
        "the record is most likely to reference.";
    in.item_noun = "Paper";
    in.history_noun = "query records";
    in.history_label = "Query Record";
    in.question =
        "Predict ONE paper from the given potential papers that the record would most "
        "probably reference. What is your prediction:";
  }
  in.history.push_back(tokens_text(inst.prompt_tokens));
  for (const auto& doc : inst.candidates) in.candidates.push_back(tokens_text(doc));
  return in;
}

SolvedShot shot_from_instance(const TaskConfig& cfg, const RetrievalInstance& inst) {
  const auto in = inputs_from_instance(cfg, inst);
  SolvedShot shot;
  shot.history = in.history;
  shot.candidates = in.candidates;
  shot.answer_slot = inst.truth_slot;
  return shot;
}

}  // namespace pblab
