#include "pblab/adapters.hpp"

#include <cmath>
#include <stdexcept>

#include "pblab/rng.hpp"

namespace pblab {

std::string adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::le: return "le";
    case AdapterKind::pt: return "pt";
    case AdapterKind::lowrank: return "lowrank";
  }
  return "?";
}

AdapterKind adapter_kind_from_name(const std::string& s) {
  if (s == "le") return AdapterKind::le;
  if (s == "pt") return AdapterKind::pt;
  if (s == "lowrank" || s == "lora") return AdapterKind::lowrank;
  throw std::invalid_argument("unknown adapter kind: " + s);
}

void AdapterSpec::validate() const {
  if (kind == AdapterKind::lowrank) {
    if (rank < 1) throw std::invalid_argument("adapter: rank must be >= 1");
    return;
  }
  if (input_dim != 1) throw std::invalid_argument("adapter: input_dim must be 1");
  if (hidden_dim < 1) throw std::invalid_argument("adapter: hidden_dim must be >= 1");
  if (output_dim < 1) throw std::invalid_argument("adapter: output_dim must be >= 1");
  if (activation != "tanh" && activation != "relu") {
    throw std::invalid_argument("adapter: unsupported activation '" + activation + "'");
  }
  if (location_basis != "offset" && location_basis != "index") {
    throw std::invalid_argument("adapter: unsupported location basis '" + location_basis + "'");
  }
}

LocationVector relative_locations(const std::vector<int>& slot_offsets, int total_text_len) {
  if (total_text_len <= 0) throw std::invalid_argument("relative_locations: zero text length");
  LocationVector out;
  out.s.reserve(slot_offsets.size());
  int prev = -1;
  for (int off : slot_offsets) {
    if (off <= prev) throw std::invalid_argument("relative_locations: offsets must increase");
    if (off < 0 || off >= total_text_len) {
      throw std::invalid_argument("relative_locations: offset outside the text");
    }
    out.s.push_back(static_cast<double>(off) / static_cast<double>(total_text_len));
    prev = off;
  }
  return out;
}

LocationVector index_locations(int k) {
  if (k < 1) throw std::invalid_argument("index_locations: k must be >= 1");
  LocationVector out;
  out.s.reserve(static_cast<std::size_t>(k));
  for (int i = 1; i <= k; ++i) {
    out.s.push_back(static_cast<double>(i - 1) / static_cast<double>(k));
  }
  return out;
}

LocationVector locations_for(const AdapterSpec& spec, const EncodedInstance& enc, int k) {
  if (spec.location_basis == "index") return index_locations(k);
  return relative_locations(enc.slot_offsets, static_cast<int>(enc.tokens.size()));
}

template <typename T>
ParamStore<T> init_adapter_params(const AdapterSpec& spec, const ModelConfig& cfg,
                                  std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  ParamStore<T> p;
  if (spec.kind == AdapterKind::lowrank) {
    for (const auto& target : lowrank_target_names(cfg)) {
      Tensor<T> a({cfg.d_model, spec.rank});
      for (std::size_t i = 0; i < a.numel(); ++i) a.at(i) = static_cast<T>(rng.normal() * 0.02);
      // B starts at zero so the effective weight equals the base weight.
      Tensor<T> b({spec.rank, cfg.d_model});
      p.emplace_back("lora." + target + ".A", std::move(a));
      p.emplace_back("lora." + target + ".B", std::move(b));
    }
    return p;
  }
  if (spec.output_dim != cfg.d_model) {
    throw std::invalid_argument("adapter: output_dim must equal d_model");
  }
  Tensor<T> w1({spec.input_dim, spec.hidden_dim});
  for (std::size_t i = 0; i < w1.numel(); ++i) w1.at(i) = static_cast<T>(rng.normal() * 0.5);
  Tensor<T> b1({spec.hidden_dim});
  for (std::size_t i = 0; i < b1.numel(); ++i) b1.at(i) = static_cast<T>(rng.normal() * 0.5);
  Tensor<T> w2({spec.hidden_dim, spec.output_dim});
  for (std::size_t i = 0; i < w2.numel(); ++i) w2.at(i) = static_cast<T>(rng.normal() * 0.02);
  Tensor<T> b2({spec.output_dim});
  p.emplace_back("adapter.w1", std::move(w1));
  p.emplace_back("adapter.b1", std::move(b1));
  p.emplace_back("adapter.w2", std::move(w2));
  p.emplace_back("adapter.b2", std::move(b2));
  return p;
}

namespace {

const Tensor<float>& named(const ParamStore<float>& store, const std::string& name) {
  for (const auto& [n, t] : store) {
    if (n == name) return t;
  }
  throw std::invalid_argument("adapter params missing tensor: " + name);
}

}  // namespace

SoftTokenBlock adapter_forward(const AdapterSpec& spec, const ParamStore<float>& theta,
                               const LocationVector* s, int k) {
  spec.validate();
  if (spec.kind == AdapterKind::lowrank) {
    throw std::invalid_argument("adapter_forward: lowrank kind produces no soft tokens");
  }
  if (k < 1) throw std::invalid_argument("adapter_forward: k must be >= 1");
  if (spec.kind == AdapterKind::le) {
    if (s == nullptr) throw std::invalid_argument("adapter_forward: le requires locations");
    if (static_cast<int>(s->s.size()) != k) {
      throw std::invalid_argument("adapter_forward: location vector length != k");
    }
  }

  const auto& w1 = named(theta, "adapter.w1");
  const auto& b1 = named(theta, "adapter.b1");
  const auto& w2 = named(theta, "adapter.w2");
  const auto& b2 = named(theta, "adapter.b2");
  const int h = spec.hidden_dim;
  const int d = spec.output_dim;

  SoftTokenBlock block;
  block.k = k;
  block.vectors = Tensor<float>({k, d});
  std::vector<float> hidden(static_cast<std::size_t>(h));
  for (int i = 0; i < k; ++i) {
    // pt removes the location input: every row sees the constant 1.0.
    const float x = spec.kind == AdapterKind::le ? static_cast<float>(s->s[static_cast<std::size_t>(i)]) : 1.0f;
    for (int j = 0; j < h; ++j) {
      const float pre = w1.at(static_cast<std::size_t>(j)) * x + b1.at(static_cast<std::size_t>(j));
      hidden[static_cast<std::size_t>(j)] =
          spec.activation == "tanh" ? std::tanh(pre) : (pre > 0.0f ? pre : 0.0f);
    }
    float* out = block.vectors.data() + static_cast<std::size_t>(i) * d;
    for (int c = 0; c < d; ++c) out[c] = b2.at(static_cast<std::size_t>(c));
    for (int j = 0; j < h; ++j) {
      const float hj = hidden[static_cast<std::size_t>(j)];
      const float* w2row = w2.data() + static_cast<std::size_t>(j) * d;
      for (int c = 0; c < d; ++c) out[c] += hj * w2row[c];
    }
  }
  return block;
}

Tensor<float> lowrank_effective_weight(const Tensor<float>& w, const Tensor<float>& a,
                                       const Tensor<float>& b, float scale) {
  if (w.rank() != 2 || a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("lowrank_effective_weight: rank-2 tensors required");
  }
  const int d_out = w.dim(0), d_in = w.dim(1);
  const int r = a.dim(1);
  if (a.dim(0) != d_in || b.dim(0) != r || b.dim(1) != d_out) {
    throw std::invalid_argument("lowrank_effective_weight: shape mismatch");
  }
  Tensor<float> out = w.clone();
  // (A @ B) is (d_in, d_out); transpose lands on W's layout.
  for (int i = 0; i < d_in; ++i) {
    for (int j = 0; j < d_out; ++j) {
      float acc = 0.0f;
      for (int p = 0; p < r; ++p) {
        acc += a.at(static_cast<std::size_t>(i) * r + p) *
               b.at(static_cast<std::size_t>(p) * d_out + j);
      }
      out.at(static_cast<std::size_t>(j) * d_in + i) += scale * acc;
    }
  }
  return out;
}

std::vector<std::string> lowrank_target_names(const ModelConfig& cfg) {
  std::vector<std::string> out;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      out.push_back("L" + std::to_string(l) + ".attn." + w);
    }
  }
  return out;
}

long long count_tunable(const AdapterSpec& spec, const ModelConfig& cfg) {
  spec.validate();
  if (spec.kind == AdapterKind::lowrank) {
    // r * (d_in + d_out) per target matrix.
    long long total = 0;
    for (const auto& name : lowrank_target_names(cfg)) {
      (void)name;
      total += static_cast<long long>(spec.rank) * (cfg.d_model + cfg.d_model);
    }
    return total;
  }
  const long long in = spec.input_dim, h = spec.hidden_dim, out = spec.output_dim;
  return in * h + h + h * out + out;
}

template ParamStore<float> init_adapter_params<float>(const AdapterSpec&, const ModelConfig&,
                                                      std::uint64_t);
template ParamStore<double> init_adapter_params<double>(const AdapterSpec&, const ModelConfig&,
                                                        std::uint64_t);

}  // namespace pblab
