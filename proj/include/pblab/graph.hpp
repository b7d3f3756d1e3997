#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pblab/tensor.hpp"

namespace pblab {

enum class Op {
  input,
  param,
  matmul,          // (..., k) x (k, n) -> (..., n); weight shared across leading dims
  bmm,             // (B, m, k) x (B, k, n) -> (B, m, n)
  bmm_nt,          // (B, m, k) x (B, n, k) -> (B, m, n)
  add,             // same shape
  mul,             // elementwise
  bias_add,        // (..., n) + (n)
  add_position,    // (B, T, d) + rows 0..T-1 of (M, d)
  tanh_fn,
  relu,
  gelu,
  softmax,         // last axis
  causal_softmax,  // last axis, row i restricted to columns 0..i
  layer_norm,      // last axis, affine gain/bias
  embed,           // (V, d) table gathered by an integer id slot
  concat,          // two inputs along a given axis
  reshape,
  split_heads,     // (B, T, H*dh) -> (B*H, T, dh)
  merge_heads,     // (B*H, T, dh) -> (B, T, H*dh)
  scale,           // x * constant
  sum,             // reduce all -> scalar
  cross_entropy,   // (..., V) vs integer targets under a mask -> scalar mean
};

const char* op_name(Op op);

// Static compute graph: nodes are appended in topological order, shapes are
// fixed at build time, and values are recomputed on every forward() pass.
// Reverse sweeps accumulate into gradient buffers until zero_grad().
template <typename T>
class Graph {
 public:
  using NodeId = int;

  // --- construction -------------------------------------------------------
  NodeId input(const std::string& name, std::vector<int> shape);
  NodeId param(const std::string& name, Tensor<T> storage, bool trainable = true);
  NodeId matmul(NodeId x, NodeId w);
  NodeId bmm(NodeId a, NodeId b);
  NodeId bmm_nt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId bias_add(NodeId x, NodeId b);
  NodeId add_position(NodeId x, NodeId table);
  NodeId tanh_fn(NodeId x);
  NodeId relu(NodeId x);
  NodeId gelu(NodeId x);
  NodeId softmax(NodeId x);
  NodeId causal_softmax(NodeId x);
  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
  NodeId embed(NodeId table, const std::string& ids_slot, std::vector<int> ids_shape);
  NodeId concat(NodeId a, NodeId b, int axis);
  NodeId reshape(NodeId x, std::vector<int> shape);
  NodeId split_heads(NodeId x, int heads);
  NodeId merge_heads(NodeId x, int heads);
  NodeId scale(NodeId x, T factor);
  NodeId sum(NodeId x);
  NodeId cross_entropy(NodeId logits, const std::string& targets_slot,
                       const std::string& mask_slot);
  void mark_output(const std::string& name, NodeId id);

  // --- binding -------------------------------------------------------------
  void bind(const std::string& input_name, const std::vector<T>& values);
  void bind_ids(const std::string& slot, const std::vector<int>& ids);
  void bind_mask(const std::string& slot, const std::vector<std::uint8_t>& mask);

  // --- execution -----------------------------------------------------------
  void forward();
  std::map<std::string, Tensor<T>> evaluate(const std::map<std::string, Tensor<T>>& inputs);
  void backward(NodeId loss);
  void zero_grad();

  // --- inspection ----------------------------------------------------------
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const Tensor<T>& value(NodeId id) const;
  const std::vector<T>& grad_of(NodeId id) const;
  bool has_grad(NodeId id) const;
  std::vector<NodeId> trainable_param_ids() const;
  Tensor<T>& param_tensor(NodeId id);
  const std::string& node_name(NodeId id) const;
  std::size_t trainable_scalar_count() const;

  void set_check_finite(bool on) { check_finite_ = on; }

  // Central-difference check of every trainable parameter against the
  // accumulated analytic gradients. Returns the max relative error
  // |ga - gn| / max(|ga|, |gn|, 1e-8). Only available in 64-bit graphs.
  double finite_diff_check(NodeId loss, double h);

 private:
  struct Node {
    Op op = Op::input;
    std::string name;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    std::vector<T> grad;  // non-param nodes; params use their tensor's grad
    bool needs_grad = false;
    bool trainable = false;
    bool bound = false;        // inputs: value supplied
    int iattr = 0;             // heads / axis
    T sattr{};                 // scale factor
    std::string slot;          // embed ids / cross-entropy targets
    std::string slot2;         // cross-entropy mask
    std::vector<int> ishape;   // embed ids shape
    std::vector<T> aux;        // op scratch (probs, xhat, transposes)
    std::vector<T> aux2;
  };

  NodeId push(Node n);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  T* grad_ptr(Node& n);
  void ensure_grad_alloc(Node& n);
  void eval_node(Node& n);
  void backprop_node(Node& n);
  void check_node_finite(const Node& n);
  double loss_value_at(NodeId loss);

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> inputs_by_name_;
  std::map<std::string, NodeId> outputs_;
  std::map<std::string, std::vector<int>> int_slots_;
  std::map<std::string, std::vector<std::uint8_t>> mask_slots_;
  bool evaluated_ = false;
  bool check_finite_ = true;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace pblab
