#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "pblab/adapters.hpp"
#include "pblab/checkpoint.hpp"
#include "pblab/model.hpp"
#include "pblab/taskgen.hpp"
#include "pblab/tensor.hpp"
#include "pblab/trainer_config.hpp"

namespace pblab {

// Learning rate at `step` of `total_steps` under cosine decay from `base`.
double cosine_lr(double base, long step, long total_steps);

// Mean next-token cross-entropy over the masked rows. Row r of `logits`
// predicts targets[r]; mask selects which rows count.
double masked_cross_entropy(const Tensor<float>& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

// Bias-induction pretraining of the full toy model.
Checkpoint pretrain(const ModelConfig& model_cfg, const TaskConfig& task_cfg,
                    const std::vector<RetrievalInstance>& data, const TrainConfig& train_cfg,
                    std::ostream* metrics = nullptr);

struct FinetuneResult {
  Checkpoint adapter_ckpt;
  std::uint64_t base_hash_before = 0;
  std::uint64_t base_hash_after = 0;
  // First-step audit: scalars whose value changed / whose gradient was
  // nonzero, against count_tunable.
  long long updated_scalars = 0;
  long long nonzero_grad_scalars = 0;
  long long expected_tunable = 0;
};

// Adapter training over a frozen base. The dataset is expected to be
// permutation-augmented already (the CLI wires that).
FinetuneResult finetune(const Checkpoint& base, const AdapterSpec& spec,
                        const TaskConfig& task_cfg,
                        const std::vector<RetrievalInstance>& augmented,
                        const TrainConfig& train_cfg, std::ostream* metrics = nullptr);

Model model_from_checkpoint(const Checkpoint& base);

// Probe-side predictor over a model, optionally through a fine-tuned
// adapter: le/pt prepend the soft block, lowrank applies effective weights.
std::function<SlotPrediction(const RetrievalInstance&)> make_model_predictor(
    const Model& model, const TaskConfig& task, const AdapterSpec* spec = nullptr,
    const ParamStore<float>* theta = nullptr);

}  // namespace pblab
