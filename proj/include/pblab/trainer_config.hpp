#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pblab {

struct TrainConfig {
  double learning_rate = 2e-4;
  std::string schedule = "cosine";  // cosine | constant
  int epochs = 4;
  int batch_size = 16;
  std::uint64_t seed = 0;
  std::string precision = "f32";
  std::string loss_mask = "answer";  // answer | full
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (learning_rate <= 0.0) throw std::invalid_argument("train: learning_rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (schedule != "cosine" && schedule != "constant") {
      throw std::invalid_argument("train: unknown schedule '" + schedule + "'");
    }
    if (loss_mask != "answer" && loss_mask != "full") {
      throw std::invalid_argument("train: unknown loss_mask '" + loss_mask + "'");
    }
    if (precision != "f32") {
      throw std::invalid_argument("train: only f32 training is supported");
    }
  }
};

}  // namespace pblab
