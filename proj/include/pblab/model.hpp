#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pblab/graph.hpp"
#include "pblab/taskgen.hpp"
#include "pblab/tensor.hpp"

namespace pblab {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int max_seq_len = 64;
  int k_max = 16;  // reserved slot-id tokens expected in the vocabulary
  std::string pos_scheme = "learned_abs";

  void validate() const;
};

template <typename T>
using ParamStore = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
Tensor<T>& find_param(ParamStore<T>& store, const std::string& name);

// Deterministic initialization: scaled normals for weights, zeros for biases,
// ones for norm gains. Same (cfg, seed) gives bitwise-identical tensors.
template <typename T>
ParamStore<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed);

// The K adapter-produced vectors prepended ahead of the text tokens.
struct SoftTokenBlock {
  int k = 0;
  Tensor<float> vectors;  // (k, d_model)
};

struct SlotPrediction {
  int slot = 0;                     // 1-based; 0 means invalid/unparsable
  std::vector<double> dist;         // restricted-softmax mass over the K slots (may be empty)
  std::string invalid_reason;
};

// Per-weight node factory so callers can interpose on selected matrices
// (low-rank deltas) without the model builder knowing about adapters.
template <typename T>
using WeightHook = std::function<typename Graph<T>::NodeId(
    Graph<T>& g, const std::string& name, Tensor<T>& storage, bool trainable)>;

// Appends the decoder forward pass to `g` and returns the logits node of
// shape (batch, k_soft + text_len, vocab). Token ids bind to slot "tokens".
// When soft >= 0 it must be a (batch, k_soft, d_model) node already in `g`.
template <typename T>
typename Graph<T>::NodeId build_model_forward(Graph<T>& g, const ModelConfig& cfg,
                                              ParamStore<T>& params, int batch, int text_len,
                                              typename Graph<T>::NodeId soft, int k_soft,
                                              bool train_base,
                                              const WeightHook<T>* hook = nullptr);

class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, ParamStore<float> params);
  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore<float>& params() { return params_; }
  const ParamStore<float>& params() const { return params_; }

  // Full-sequence logits, (k_soft + L, vocab). Convenience path that builds a
  // fresh graph; probes use InferenceRunner to reuse one.
  Tensor<float> forward(const std::vector<int>& tokens, const SoftTokenBlock* soft = nullptr) const;

  SlotPrediction predict_slot(const RetrievalInstance& inst, const TaskConfig& task,
                              const SoftTokenBlock* soft = nullptr) const;

 private:
  ModelConfig cfg_;
  ParamStore<float> params_;
};

// Reusable inference path: one cached graph per (prefix length, soft size).
class InferenceRunner {
 public:
  explicit InferenceRunner(const Model& model, SoftTokenBlock soft = {});
  ~InferenceRunner();

  // Feeds the encoded prefix up to and including the ANS marker and returns
  // the restricted softmax over the K slot-id tokens.
  SlotPrediction predict(const EncodedInstance& enc, int k);

  // Same, rebinding the soft block for this call. The block must match the
  // shape fixed at construction.
  SlotPrediction predict(const EncodedInstance& enc, int k, const SoftTokenBlock& soft);

 private:
  const Model& model_;
  SoftTokenBlock soft_;
  struct CachedGraph;
  std::vector<std::unique_ptr<CachedGraph>> cache_;
  CachedGraph& graph_for(int prefix_len);
};

// Restricted softmax over the K slot-token logits of one row; argmax ties
// break toward the lowest slot index.
SlotPrediction restricted_slot_softmax(const float* logits_row, int vocab, int k);

std::uint64_t params_hash(const ParamStore<float>& params);

extern template ParamStore<float> init_model_params<float>(const ModelConfig&, std::uint64_t);
extern template ParamStore<double> init_model_params<double>(const ModelConfig&, std::uint64_t);
extern template Tensor<float>& find_param<float>(ParamStore<float>&, const std::string&);
extern template Tensor<double>& find_param<double>(ParamStore<double>&, const std::string&);
extern template Graph<float>::NodeId build_model_forward<float>(Graph<float>&, const ModelConfig&,
                                                                ParamStore<float>&, int, int,
                                                                Graph<float>::NodeId, int, bool,
                                                                const WeightHook<float>*);
extern template Graph<double>::NodeId build_model_forward<double>(
    Graph<double>&, const ModelConfig&, ParamStore<double>&, int, int, Graph<double>::NodeId, int,
    bool, const WeightHook<double>*);

}  // namespace pblab
