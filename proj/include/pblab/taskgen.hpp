#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pblab {

enum class TaskFlavor { key_match, session_match };

std::string flavor_name(TaskFlavor f);
TaskFlavor flavor_from_name(const std::string& s);

// Fixed vocabulary layout. The low ids are reserved markers, then k_max
// dedicated slot-id tokens, then the disjoint key and filler partitions.
struct TokenLayout {
  int k_max = 0;
  int key_vocab = 0;
  int filler_vocab = 0;

  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kAns = 2;
  static constexpr int kTaskKey = 3;
  static constexpr int kTaskSession = 4;
  static constexpr int kReserved = 5;

  int slot_token(int slot) const { return kReserved + slot - 1; }  // slot in [1, k_max]
  int key_base() const { return kReserved + k_max; }
  int filler_base() const { return key_base() + key_vocab; }
  int vocab_size() const { return filler_base() + filler_vocab; }
  bool is_key(int tok) const { return tok >= key_base() && tok < filler_base(); }
  bool is_filler(int tok) const { return tok >= filler_base() && tok < vocab_size(); }
  bool is_slot(int tok) const { return tok >= kReserved && tok < kReserved + k_max; }
};

struct TaskConfig {
  int k = 10;           // candidates per instance
  int doc_len = 2;      // tokens per candidate
  int query_len = 1;    // prompt tokens
  TaskFlavor flavor = TaskFlavor::key_match;
  int key_vocab = 512;
  int filler_vocab = 256;
  int k_max = 16;       // reserved slot-id tokens in the vocabulary

  TokenLayout layout() const { return TokenLayout{k_max, key_vocab, filler_vocab}; }
  void validate() const;
};

// One task sample: exactly one candidate satisfies the flavor's match
// predicate against the prompt; truth_slot (1-based) points at it.
struct RetrievalInstance {
  std::vector<int> prompt_tokens;
  std::vector<std::vector<int>> candidates;
  int truth_slot = 0;
  std::string provenance;
};

enum class PermScheme { cyclic, random };

struct PermutationPlan {
  std::vector<int> pi;  // new position i (0-based) receives old candidate pi[i]
  std::string provenance;
};

struct EncodedInstance {
  std::vector<int> tokens;         // [BOS][TASK][P_s][SLOT_1][X_1]...[SLOT_K][X_K][ANS][SLOT_c][EOS]
  int answer_index = 0;            // index of the SLOT_c token (position following ANS)
  std::vector<int> slot_offsets;   // token index of each SLOT_i marker
};

RetrievalInstance gen_instance(const TaskConfig& cfg, int truth_slot, std::uint64_t seed);

std::vector<RetrievalInstance> gen_dataset(const TaskConfig& cfg,
                                           const std::vector<double>& slot_distribution, int n,
                                           std::uint64_t seed);

std::vector<RetrievalInstance> permute_augment(const std::vector<RetrievalInstance>& dataset,
                                               int copies, PermScheme scheme, std::uint64_t seed);

// Paper-style defaults: five permutations for session (REC-like) data, three
// for key (LP-like) data.
int default_augment_copies(TaskFlavor flavor);

EncodedInstance encode(const RetrievalInstance& inst, const TaskConfig& cfg, int max_len = 0);
RetrievalInstance decode(const std::vector<int>& tokens, const TaskConfig& cfg);

// The flavor's relevance predicate and a brute-force re-scan across slots.
int query_match_token(const TaskConfig& cfg, const RetrievalInstance& inst);
bool matches_query(const TaskConfig& cfg, const RetrievalInstance& inst, int slot);
int scan_truth_slot(const TaskConfig& cfg, const RetrievalInstance& inst);

void validate_instance(const TaskConfig& cfg, const RetrievalInstance& inst);

std::vector<double> biased_slot_distribution(int k, int favored_slot, double p);

void save_dataset(const std::filesystem::path& path, const TaskConfig& cfg,
                  const std::vector<RetrievalInstance>& instances);
std::vector<RetrievalInstance> load_dataset(const std::filesystem::path& path,
                                            const TaskConfig& cfg);

}  // namespace pblab
