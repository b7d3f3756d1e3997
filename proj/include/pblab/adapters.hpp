#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pblab/model.hpp"
#include "pblab/tensor.hpp"

namespace pblab {

enum class AdapterKind { le, pt, lowrank };

std::string adapter_kind_name(AdapterKind k);
AdapterKind adapter_kind_from_name(const std::string& s);

struct AdapterSpec {
  AdapterKind kind = AdapterKind::le;
  // le / pt: two-layer MLP mapping one scalar to a d_model vector.
  int input_dim = 1;
  int hidden_dim = 1024;
  int output_dim = 0;  // must equal the model's d_model
  std::string activation = "tanh";  // tanh | relu
  // lowrank: additive rank-r deltas on the attention projections.
  int rank = 16;
  double lowrank_scale = 1.0;
  // How candidate locations are measured: normalized token offset of each
  // slot marker ("offset", default) or (i-1)/K ("index").
  std::string location_basis = "offset";

  void validate() const;
};

// Relative candidate locations S, strictly increasing in [0, 1).
struct LocationVector {
  std::vector<double> s;
};

// S_i = slot_offset_i / total_text_len; soft tokens play no part in either
// the numerator or the denominator.
LocationVector relative_locations(const std::vector<int>& slot_offsets, int total_text_len);
LocationVector index_locations(int k);
LocationVector locations_for(const AdapterSpec& spec, const EncodedInstance& enc, int k);

template <typename T>
ParamStore<T> init_adapter_params(const AdapterSpec& spec, const ModelConfig& cfg,
                                  std::uint64_t seed);

// f(theta, S_i) = A_i for the le kind; pt feeds the constant 1.0 instead and
// therefore emits K identical vectors. The lowrank kind rejects this call.
SoftTokenBlock adapter_forward(const AdapterSpec& spec, const ParamStore<float>& theta,
                               const LocationVector* s, int k);

// W' = W + scale * (A @ B)^T with W (d_out, d_in), A (d_in, r), B (r, d_out).
// W is never mutated.
Tensor<float> lowrank_effective_weight(const Tensor<float>& w, const Tensor<float>& a,
                                       const Tensor<float>& b, float scale);

// Attention projection matrices of every layer, the lowrank target set.
std::vector<std::string> lowrank_target_names(const ModelConfig& cfg);

// Exact number of trainable scalars for the spec against this model.
long long count_tunable(const AdapterSpec& spec, const ModelConfig& cfg);

extern template ParamStore<float> init_adapter_params<float>(const AdapterSpec&,
                                                             const ModelConfig&, std::uint64_t);
extern template ParamStore<double> init_adapter_params<double>(const AdapterSpec&,
                                                               const ModelConfig&, std::uint64_t);

}  // namespace pblab
