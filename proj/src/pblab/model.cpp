#include "pblab/model.hpp"

#include <cmath>
#include <stdexcept>

#include "pblab/rng.hpp"
#include "pblab/util.hpp"

namespace pblab {

void ModelConfig::validate() const {
  if (vocab_size < 1) throw std::invalid_argument("model: vocab_size must be >= 1");
  if (d_model < 1 || n_layers < 1 || n_heads < 1) {
    throw std::invalid_argument("model: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (max_seq_len < 2) throw std::invalid_argument("model: max_seq_len too small");
  if (k_max < 1) throw std::invalid_argument("model: k_max must be >= 1");
  if (pos_scheme != "learned_abs") {
    throw std::invalid_argument("model: unsupported positional scheme '" + pos_scheme + "'");
  }
}

template <typename T>
Tensor<T>& find_param(ParamStore<T>& store, const std::string& name) {
  for (auto& [n, t] : store) {
    if (n == name) return t;
  }
  throw std::invalid_argument("no such parameter: " + name);
}

namespace {

template <typename T>
Tensor<T> normal_tensor(Rng& rng, std::vector<int> shape, double std) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal() * std);
  return t;
}

}  // namespace

template <typename T>
ParamStore<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double base_std = 0.02;
  // Residual-branch outputs get the usual depth-scaled variance.
  const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
  const int d = cfg.d_model;
  const int ffn = 4 * d;

  ParamStore<T> p;
  p.emplace_back("tok_emb", normal_tensor<T>(rng, {cfg.vocab_size, d}, base_std));
  p.emplace_back("pos_emb", normal_tensor<T>(rng, {cfg.max_seq_len, d}, base_std));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    p.emplace_back(pre + "ln1.g", Tensor<T>::full({d}, T{1}));
    p.emplace_back(pre + "ln1.b", Tensor<T>({d}));
    for (const char* w : {"wq", "wk", "wv"}) {
      p.emplace_back(pre + "attn." + w, normal_tensor<T>(rng, {d, d}, base_std));
      p.emplace_back(pre + "attn.b" + std::string(w).substr(1), Tensor<T>({d}));
    }
    p.emplace_back(pre + "attn.wo", normal_tensor<T>(rng, {d, d}, resid_std));
    p.emplace_back(pre + "attn.bo", Tensor<T>({d}));
    p.emplace_back(pre + "ln2.g", Tensor<T>::full({d}, T{1}));
    p.emplace_back(pre + "ln2.b", Tensor<T>({d}));
    p.emplace_back(pre + "mlp.w1", normal_tensor<T>(rng, {d, ffn}, base_std));
    p.emplace_back(pre + "mlp.b1", Tensor<T>({ffn}));
    p.emplace_back(pre + "mlp.w2", normal_tensor<T>(rng, {ffn, d}, resid_std));
    p.emplace_back(pre + "mlp.b2", Tensor<T>({d}));
  }
  p.emplace_back("lnf.g", Tensor<T>::full({d}, T{1}));
  p.emplace_back("lnf.b", Tensor<T>({d}));
  p.emplace_back("head.w", normal_tensor<T>(rng, {d, cfg.vocab_size}, base_std));
  p.emplace_back("head.b", Tensor<T>({cfg.vocab_size}));
  return p;
}

template <typename T>
typename Graph<T>::NodeId build_model_forward(Graph<T>& g, const ModelConfig& cfg,
                                              ParamStore<T>& params, int batch, int text_len,
                                              typename Graph<T>::NodeId soft, int k_soft,
                                              bool train_base, const WeightHook<T>* hook) {
  cfg.validate();
  if (text_len < 1 || batch < 1) throw std::invalid_argument("build_model_forward: bad sizes");
  if (k_soft + text_len > cfg.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(k_soft + text_len) +
                                " overflows max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  if ((soft >= 0) != (k_soft > 0)) {
    throw std::invalid_argument("build_model_forward: soft node and k_soft disagree");
  }

  auto weight = [&](const std::string& name) -> typename Graph<T>::NodeId {
    Tensor<T>& storage = find_param(params, name);
    if (hook) return (*hook)(g, name, storage, train_base);
    return g.param(name, storage, train_base);
  };

  const int total_len = k_soft + text_len;
  auto tok = g.embed(weight("tok_emb"), "tokens", {batch, text_len});
  auto x = tok;
  if (k_soft > 0) {
    // Soft tokens occupy rows 0..K-1 of the combined sequence.
    x = g.concat(soft, tok, 1);
  }
  x = g.add_position(x, weight("pos_emb"));

  const int heads = cfg.n_heads;
  const int dh = cfg.d_model / heads;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "L" + std::to_string(l) + ".";
    auto a = g.layer_norm(x, weight(pre + "ln1.g"), weight(pre + "ln1.b"));
    auto q = g.bias_add(g.matmul(a, weight(pre + "attn.wq")), weight(pre + "attn.bq"));
    auto k = g.bias_add(g.matmul(a, weight(pre + "attn.wk")), weight(pre + "attn.bk"));
    auto v = g.bias_add(g.matmul(a, weight(pre + "attn.wv")), weight(pre + "attn.bv"));
    auto qh = g.split_heads(q, heads);
    auto kh = g.split_heads(k, heads);
    auto vh = g.split_heads(v, heads);
    auto scores = g.scale(g.bmm_nt(qh, kh), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto att = g.causal_softmax(scores);
    auto ctx = g.merge_heads(g.bmm(att, vh), heads);
    auto attn_out = g.bias_add(g.matmul(ctx, weight(pre + "attn.wo")), weight(pre + "attn.bo"));
    x = g.add(x, attn_out);

    auto m = g.layer_norm(x, weight(pre + "ln2.g"), weight(pre + "ln2.b"));
    auto h = g.gelu(g.bias_add(g.matmul(m, weight(pre + "mlp.w1")), weight(pre + "mlp.b1")));
    auto mlp_out = g.bias_add(g.matmul(h, weight(pre + "mlp.w2")), weight(pre + "mlp.b2"));
    x = g.add(x, mlp_out);
  }
  auto xf = g.layer_norm(x, weight("lnf.g"), weight("lnf.b"));
  auto logits = g.bias_add(g.matmul(xf, weight("head.w")), weight("head.b"));
  (void)total_len;
  return logits;
}

Model::Model(ModelConfig cfg, ParamStore<float> params)
    : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
}

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  return Model(cfg, init_model_params<float>(cfg, seed));
}

Tensor<float> Model::forward(const std::vector<int>& tokens, const SoftTokenBlock* soft) const {
  const int text_len = static_cast<int>(tokens.size());
  const int k_soft = soft ? soft->k : 0;
  for (int t : tokens) {
    if (t < 0 || t >= cfg_.vocab_size) {
      throw std::invalid_argument("forward: unknown token id " + std::to_string(t));
    }
  }
  if (k_soft + text_len > cfg_.max_seq_len) {
    throw std::invalid_argument("forward: sequence overflows max_seq_len");
  }
  Graph<float> g;
  auto& self = const_cast<Model&>(*this);  // params bound read-only
  Graph<float>::NodeId soft_node = -1;
  if (k_soft > 0) {
    if (soft->vectors.shape() != std::vector<int>{k_soft, cfg_.d_model}) {
      throw std::invalid_argument("forward: soft block shape mismatch");
    }
    soft_node = g.input("soft", {1, k_soft, cfg_.d_model});
  }
  auto logits = build_model_forward<float>(g, cfg_, self.params_, 1, text_len, soft_node, k_soft,
                                           false, nullptr);
  g.mark_output("logits", logits);
  if (k_soft > 0) g.bind("soft", soft->vectors.vec());
  g.bind_ids("tokens", tokens);
  g.forward();
  Tensor<float> out({k_soft + text_len, cfg_.vocab_size});
  const auto& v = g.value(logits);
  std::copy(v.vec().begin(), v.vec().end(), out.data());
  return out;
}

SlotPrediction restricted_slot_softmax(const float* logits_row, int vocab, int k) {
  if (k < 1) throw std::invalid_argument("restricted_slot_softmax: k must be >= 1");
  if (TokenLayout::kReserved + k > vocab) {
    throw std::invalid_argument("restricted_slot_softmax: slot tokens exceed vocabulary");
  }
  SlotPrediction pred;
  pred.dist.resize(static_cast<std::size_t>(k));
  double mx = logits_row[TokenLayout::kReserved];
  for (int i = 1; i < k; ++i) {
    mx = std::max(mx, static_cast<double>(logits_row[TokenLayout::kReserved + i]));
  }
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    const double e = std::exp(static_cast<double>(logits_row[TokenLayout::kReserved + i]) - mx);
    pred.dist[static_cast<std::size_t>(i)] = e;
    total += e;
  }
  int best = 0;
  for (int i = 0; i < k; ++i) {
    pred.dist[static_cast<std::size_t>(i)] /= total;
    if (pred.dist[static_cast<std::size_t>(i)] > pred.dist[static_cast<std::size_t>(best)]) {
      best = i;  // strict: ties stay at the lowest index
    }
  }
  pred.slot = best + 1;
  return pred;
}

SlotPrediction Model::predict_slot(const RetrievalInstance& inst, const TaskConfig& task,
                                   const SoftTokenBlock* soft) const {
  if (task.k > cfg_.k_max) {
    throw std::invalid_argument("predict_slot: K exceeds reserved slot-token count");
  }
  const auto enc = encode(inst, task);
  // Prefix through the ANS marker; its logits score the answer position.
  std::vector<int> prefix(enc.tokens.begin(), enc.tokens.begin() + enc.answer_index);
  const auto logits = forward(prefix, soft);
  const int rows = logits.dim(0);
  return restricted_slot_softmax(logits.data() + static_cast<std::size_t>(rows - 1) * cfg_.vocab_size,
                                 cfg_.vocab_size, task.k);
}

struct InferenceRunner::CachedGraph {
  int prefix_len = 0;
  Graph<float> g;
  Graph<float>::NodeId logits = -1;
};

InferenceRunner::InferenceRunner(const Model& model, SoftTokenBlock soft)
    : model_(model), soft_(std::move(soft)) {}

InferenceRunner::~InferenceRunner() = default;

InferenceRunner::CachedGraph& InferenceRunner::graph_for(int prefix_len) {
  for (auto& c : cache_) {
    if (c->prefix_len == prefix_len) return *c;
  }
  auto c = std::make_unique<CachedGraph>();
  c->prefix_len = prefix_len;
  const int k_soft = soft_.k;
  Graph<float>::NodeId soft_node = -1;
  if (k_soft > 0) soft_node = c->g.input("soft", {1, k_soft, model_.config().d_model});
  auto& params = const_cast<Model&>(model_).params();
  c->logits = build_model_forward<float>(c->g, model_.config(), params, 1, prefix_len, soft_node,
                                         k_soft, false, nullptr);
  if (k_soft > 0) c->g.bind("soft", soft_.vectors.vec());
  cache_.push_back(std::move(c));
  return *cache_.back();
}

SlotPrediction InferenceRunner::predict(const EncodedInstance& enc, int k) {
  if (k > model_.config().k_max) {
    throw std::invalid_argument("predict: K exceeds reserved slot-token count");
  }
  auto& c = graph_for(enc.answer_index);
  std::vector<int> prefix(enc.tokens.begin(), enc.tokens.begin() + enc.answer_index);
  c.g.bind_ids("tokens", prefix);
  c.g.forward();
  const auto& logits = c.g.value(c.logits);
  const int rows = soft_.k + enc.answer_index;
  const int vocab = model_.config().vocab_size;
  return restricted_slot_softmax(logits.data() + static_cast<std::size_t>(rows - 1) * vocab, vocab,
                                 k);
}

SlotPrediction InferenceRunner::predict(const EncodedInstance& enc, int k,
                                        const SoftTokenBlock& soft) {
  if (soft.k != soft_.k || soft.vectors.shape() != soft_.vectors.shape()) {
    throw std::invalid_argument("predict: soft block shape differs from the runner's");
  }
  auto& c = graph_for(enc.answer_index);
  c.g.bind("soft", soft.vectors.vec());
  return predict(enc, k);
}

std::uint64_t params_hash(const ParamStore<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params) {
    h = fnv1a64(name, h);
    const auto& shape = t.shape();
    h = fnv1a64(shape.data(), shape.size() * sizeof(int), h);
    h = fnv1a64(t.data(), t.numel() * sizeof(float), h);
  }
  return h;
}

template Tensor<float>& find_param<float>(ParamStore<float>&, const std::string&);
template Tensor<double>& find_param<double>(ParamStore<double>&, const std::string&);
template ParamStore<float> init_model_params<float>(const ModelConfig&, std::uint64_t);
template ParamStore<double> init_model_params<double>(const ModelConfig&, std::uint64_t);
template Graph<float>::NodeId build_model_forward<float>(Graph<float>&, const ModelConfig&,
                                                         ParamStore<float>&, int, int,
                                                         Graph<float>::NodeId, int, bool,
                                                         const WeightHook<float>*);
template Graph<double>::NodeId build_model_forward<double>(Graph<double>&, const ModelConfig&,
                                                           ParamStore<double>&, int, int,
                                                           Graph<double>::NodeId, int, bool,
                                                           const WeightHook<double>*);

}  // namespace pblab
