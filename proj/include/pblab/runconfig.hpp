#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pblab/adapters.hpp"
#include "pblab/llmprobe.hpp"
#include "pblab/model.hpp"
#include "pblab/taskgen.hpp"
#include "pblab/trainer_config.hpp"

namespace pblab {

// Sectioned key=value experiment configuration. Every hyperparameter carries
// the published defaults (lr 2e-4, cosine schedule, four epochs, hidden 1024);
// validation happens before any artifact is written and unknown keys are
// rejected.
struct RunConfig {
  std::string run_id = "run";
  std::uint64_t master_seed = 42;

  TaskConfig task;
  int n_pretrain = 3000;
  int n_finetune = 200;
  int bias_slot = 1;
  double bias_p = 0.5;

  ModelConfig model;  // vocab_size/k_max derived from the task layout

  TrainConfig train;           // pretraining stage
  TrainConfig finetune_train;  // adapter stage
  int augment_m = 0;           // 0 = flavor default
  PermScheme augment_scheme = PermScheme::cyclic;

  AdapterSpec adapter;

  int eval_n_per_slot = 200;
  std::vector<int> eval_slots;  // empty = all
  std::uint64_t eval_seed = 7;

  EndpointConfig probe;
  ProbeOptions probe_opts;
  int probe_n_per_slot = 5;

  std::filesystem::path out_dir = "runs";

  static RunConfig load(const std::filesystem::path& path);
  void validate() const;
};

}  // namespace pblab
