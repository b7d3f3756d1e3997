#include "pblab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pblab/kernels.hpp"

namespace pblab {

const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::param: return "param";
    case Op::matmul: return "matmul";
    case Op::bmm: return "bmm";
    case Op::bmm_nt: return "bmm_nt";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::bias_add: return "bias_add";
    case Op::add_position: return "add_position";
    case Op::tanh_fn: return "tanh";
    case Op::relu: return "relu";
    case Op::gelu: return "gelu";
    case Op::softmax: return "softmax";
    case Op::causal_softmax: return "causal_softmax";
    case Op::layer_norm: return "layer_norm";
    case Op::embed: return "embed";
    case Op::concat: return "concat";
    case Op::reshape: return "reshape";
    case Op::split_heads: return "split_heads";
    case Op::merge_heads: return "merge_heads";
    case Op::scale: return "scale";
    case Op::sum: return "sum";
    case Op::cross_entropy: return "cross_entropy";
  }
  return "?";
}

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

inline void gemm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
  kernels::active().gemm_acc_f32(a, b, c, m, k, n);
}
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  kernels::active().gemm_acc_f64(a, b, c, m, k, n);
}
inline void vadd(float* y, const float* x, std::size_t n) {
  kernels::active().add_f32(y, x, n);
}
inline void vadd(double* y, const double* x, std::size_t n) {
  kernels::active().add_f64(y, x, n);
}
inline void vaxpy(float s, const float* x, float* y, std::size_t n) {
  kernels::active().axpy_f32(s, x, y, n);
}
inline void vaxpy(double s, const double* x, double* y, std::size_t n) {
  kernels::active().axpy_f64(s, x, y, n);
}
inline void colsum_acc(const float* g, float* out, int rows, int cols) {
  kernels::active().colsum_acc_f32(g, out, rows, cols);
}
inline void colsum_acc(const double* g, double* out, int rows, int cols) {
  kernels::active().colsum_acc_f64(g, out, rows, cols);
}

template <typename T>
void transpose_into(const T* src, T* dst, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) dst[static_cast<std::size_t>(j) * rows + i] = src[static_cast<std::size_t>(i) * cols + j];
  }
}

std::vector<int> drop_last(const std::vector<int>& s) {
  return std::vector<int>(s.begin(), s.end() - 1);
}

}  // namespace

template <typename T>
typename Graph<T>::NodeId Graph<T>::push(Node n) {
  if (n.op != Op::input && n.op != Op::param) {
    bool ng = false;
    for (NodeId in : n.inputs) ng = ng || at(in).needs_grad;
    n.needs_grad = ng;
  }
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

template <typename T>
typename Graph<T>::Node& Graph<T>::at(NodeId id) {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    throw std::invalid_argument("graph: node id out of range");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

template <typename T>
const typename Graph<T>::Node& Graph<T>::at(NodeId id) const {
  if (id < 0 || id >= static_cast<NodeId>(nodes_.size())) {
    throw std::invalid_argument("graph: node id out of range");
  }
  return nodes_[static_cast<std::size_t>(id)];
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::input(const std::string& name, std::vector<int> shape) {
  if (inputs_by_name_.count(name)) throw std::invalid_argument("duplicate input name: " + name);
  Node n;
  n.op = Op::input;
  n.name = name;
  n.value = Tensor<T>(std::move(shape));
  n.needs_grad = false;
  const NodeId id = push(std::move(n));
  inputs_by_name_[name] = id;
  return id;
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::param(const std::string& name, Tensor<T> storage, bool trainable) {
  if (!storage.defined()) throw std::invalid_argument("param tensor undefined: " + name);
  Node n;
  n.op = Op::param;
  n.name = name;
  n.value = storage;
  n.trainable = trainable;
  n.needs_grad = trainable;
  n.bound = true;
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::matmul(NodeId x, NodeId w) {
  const auto& xs = at(x).value.shape();
  const auto& ws = at(w).value.shape();
  if (xs.size() < 2 || ws.size() != 2 || xs.back() != ws[0]) {
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(xs) + " x " + shape_str(ws));
  }
  Node n;
  n.op = Op::matmul;
  n.inputs = {x, w};
  auto out = xs;
  out.back() = ws[1];
  n.value = Tensor<T>(out);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::bmm(NodeId a, NodeId b) {
  const auto& as = at(a).value.shape();
  const auto& bs = at(b).value.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw std::invalid_argument("bmm shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  Node n;
  n.op = Op::bmm;
  n.inputs = {a, b};
  n.value = Tensor<T>({as[0], as[1], bs[2]});
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::bmm_nt(NodeId a, NodeId b) {
  const auto& as = at(a).value.shape();
  const auto& bs = at(b).value.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2]) {
    throw std::invalid_argument("bmm_nt shape mismatch: " + shape_str(as) + " x " + shape_str(bs));
  }
  Node n;
  n.op = Op::bmm_nt;
  n.inputs = {a, b};
  n.value = Tensor<T>({as[0], as[1], bs[1]});
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::add(NodeId a, NodeId b) {
  if (at(a).value.shape() != at(b).value.shape()) {
    throw std::invalid_argument("add shape mismatch");
  }
  Node n;
  n.op = Op::add;
  n.inputs = {a, b};
  n.value = Tensor<T>(at(a).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::mul(NodeId a, NodeId b) {
  if (at(a).value.shape() != at(b).value.shape()) {
    throw std::invalid_argument("mul shape mismatch");
  }
  Node n;
  n.op = Op::mul;
  n.inputs = {a, b};
  n.value = Tensor<T>(at(a).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::bias_add(NodeId x, NodeId b) {
  const auto& xs = at(x).value.shape();
  const auto& bs = at(b).value.shape();
  if (bs.size() != 1 || xs.back() != bs[0]) {
    throw std::invalid_argument("bias_add shape mismatch: " + shape_str(xs) + " + " + shape_str(bs));
  }
  Node n;
  n.op = Op::bias_add;
  n.inputs = {x, b};
  n.value = Tensor<T>(xs);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::add_position(NodeId x, NodeId table) {
  const auto& xs = at(x).value.shape();
  const auto& ts = at(table).value.shape();
  if (xs.size() != 3 || ts.size() != 2 || xs[2] != ts[1] || xs[1] > ts[0]) {
    throw std::invalid_argument("add_position shape mismatch: " + shape_str(xs) + " + " + shape_str(ts));
  }
  Node n;
  n.op = Op::add_position;
  n.inputs = {x, table};
  n.value = Tensor<T>(xs);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::tanh_fn(NodeId x) {
  Node n;
  n.op = Op::tanh_fn;
  n.inputs = {x};
  n.value = Tensor<T>(at(x).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::relu(NodeId x) {
  Node n;
  n.op = Op::relu;
  n.inputs = {x};
  n.value = Tensor<T>(at(x).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::gelu(NodeId x) {
  Node n;
  n.op = Op::gelu;
  n.inputs = {x};
  n.value = Tensor<T>(at(x).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::softmax(NodeId x) {
  Node n;
  n.op = Op::softmax;
  n.inputs = {x};
  n.value = Tensor<T>(at(x).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::causal_softmax(NodeId x) {
  const auto& xs = at(x).value.shape();
  if (xs.size() < 2 || xs[xs.size() - 1] != xs[xs.size() - 2]) {
    throw std::invalid_argument("causal_softmax requires square trailing dims, got " + shape_str(xs));
  }
  Node n;
  n.op = Op::causal_softmax;
  n.inputs = {x};
  n.value = Tensor<T>(xs);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::layer_norm(NodeId x, NodeId gain, NodeId bias) {
  const auto& xs = at(x).value.shape();
  const auto& gs = at(gain).value.shape();
  const auto& bs = at(bias).value.shape();
  if (gs.size() != 1 || bs.size() != 1 || gs[0] != xs.back() || bs[0] != xs.back()) {
    throw std::invalid_argument("layer_norm affine shape mismatch");
  }
  Node n;
  n.op = Op::layer_norm;
  n.inputs = {x, gain, bias};
  n.value = Tensor<T>(xs);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::embed(NodeId table, const std::string& ids_slot,
                                          std::vector<int> ids_shape) {
  const auto& ts = at(table).value.shape();
  if (ts.size() != 2) throw std::invalid_argument("embed table must be rank 2");
  Node n;
  n.op = Op::embed;
  n.inputs = {table};
  n.slot = ids_slot;
  n.ishape = ids_shape;
  auto out = ids_shape;
  out.push_back(ts[1]);
  n.value = Tensor<T>(out);
  int_slots_[ids_slot];  // reserve
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::concat(NodeId a, NodeId b, int axis) {
  const auto& as = at(a).value.shape();
  const auto& bs = at(b).value.shape();
  if (as.size() != bs.size()) throw std::invalid_argument("concat rank mismatch");
  const int rank = static_cast<int>(as.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw std::invalid_argument("concat axis out of range");
  for (int i = 0; i < rank; ++i) {
    if (i != axis && as[i] != bs[i]) {
      throw std::invalid_argument("concat shape mismatch: " + shape_str(as) + " | " + shape_str(bs));
    }
  }
  Node n;
  n.op = Op::concat;
  n.inputs = {a, b};
  n.iattr = axis;
  auto out = as;
  out[static_cast<std::size_t>(axis)] += bs[static_cast<std::size_t>(axis)];
  n.value = Tensor<T>(out);
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::reshape(NodeId x, std::vector<int> shape) {
  if (shape_numel(shape) != at(x).value.numel()) {
    throw std::invalid_argument("reshape element count mismatch");
  }
  Node n;
  n.op = Op::reshape;
  n.inputs = {x};
  n.value = Tensor<T>(std::move(shape));
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::split_heads(NodeId x, int heads) {
  const auto& xs = at(x).value.shape();
  if (xs.size() != 3 || heads < 1 || xs[2] % heads != 0) {
    throw std::invalid_argument("split_heads: bad shape or head count");
  }
  Node n;
  n.op = Op::split_heads;
  n.inputs = {x};
  n.iattr = heads;
  n.value = Tensor<T>({xs[0] * heads, xs[1], xs[2] / heads});
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::merge_heads(NodeId x, int heads) {
  const auto& xs = at(x).value.shape();
  if (xs.size() != 3 || heads < 1 || xs[0] % heads != 0) {
    throw std::invalid_argument("merge_heads: bad shape or head count");
  }
  Node n;
  n.op = Op::merge_heads;
  n.inputs = {x};
  n.iattr = heads;
  n.value = Tensor<T>({xs[0] / heads, xs[1], xs[2] * heads});
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::scale(NodeId x, T factor) {
  Node n;
  n.op = Op::scale;
  n.inputs = {x};
  n.sattr = factor;
  n.value = Tensor<T>(at(x).value.shape());
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::sum(NodeId x) {
  Node n;
  n.op = Op::sum;
  n.inputs = {x};
  n.value = Tensor<T>({1});
  return push(std::move(n));
}

template <typename T>
typename Graph<T>::NodeId Graph<T>::cross_entropy(NodeId logits, const std::string& targets_slot,
                                                  const std::string& mask_slot) {
  const auto& ls = at(logits).value.shape();
  if (ls.size() < 2) throw std::invalid_argument("cross_entropy: logits rank must be >= 2");
  Node n;
  n.op = Op::cross_entropy;
  n.inputs = {logits};
  n.slot = targets_slot;
  n.slot2 = mask_slot;
  n.value = Tensor<T>({1});
  int_slots_[targets_slot];
  mask_slots_[mask_slot];
  return push(std::move(n));
}

template <typename T>
void Graph<T>::mark_output(const std::string& name, NodeId id) {
  at(id);
  outputs_[name] = id;
}

template <typename T>
void Graph<T>::bind(const std::string& input_name, const std::vector<T>& values) {
  auto it = inputs_by_name_.find(input_name);
  if (it == inputs_by_name_.end()) throw std::invalid_argument("no such input: " + input_name);
  Node& n = at(it->second);
  if (values.size() != n.value.numel()) {
    throw std::invalid_argument("bind " + input_name + ": expected " +
                                std::to_string(n.value.numel()) + " values, got " +
                                std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), n.value.data());
  n.bound = true;
  evaluated_ = false;
}

template <typename T>
void Graph<T>::bind_ids(const std::string& slot, const std::vector<int>& ids) {
  auto it = int_slots_.find(slot);
  if (it == int_slots_.end()) throw std::invalid_argument("no such id slot: " + slot);
  it->second = ids;
  evaluated_ = false;
}

template <typename T>
void Graph<T>::bind_mask(const std::string& slot, const std::vector<std::uint8_t>& mask) {
  auto it = mask_slots_.find(slot);
  if (it == mask_slots_.end()) throw std::invalid_argument("no such mask slot: " + slot);
  it->second = mask;
  evaluated_ = false;
}

template <typename T>
void Graph<T>::check_node_finite(const Node& n) {
  for (const T& v : n.value.vec()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op_name(n.op) +
                               (n.name.empty() ? "" : " '" + n.name + "'"));
    }
  }
}

template <typename T>
void Graph<T>::forward() {
  for (auto& n : nodes_) {
    if (n.op == Op::input && !n.bound) {
      throw std::runtime_error("input not bound: " + n.name);
    }
    eval_node(n);
    if (check_finite_) check_node_finite(n);
  }
  evaluated_ = true;
}

template <typename T>
void Graph<T>::eval_node(Node& n) {
  switch (n.op) {
    case Op::input:
    case Op::param:
      return;
    case Op::matmul: {
      const auto& x = at(n.inputs[0]).value;
      const auto& w = at(n.inputs[1]).value;
      const int k = w.dim(0), c = w.dim(1);
      const int rows = static_cast<int>(x.numel()) / k;
      std::fill(n.value.vec().begin(), n.value.vec().end(), T{0});
      gemm_acc(x.data(), w.data(), n.value.data(), rows, k, c);
      return;
    }
    case Op::bmm: {
      const auto& a = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      const int B = a.dim(0), m = a.dim(1), k = a.dim(2), c = b.dim(2);
      std::fill(n.value.vec().begin(), n.value.vec().end(), T{0});
      for (int s = 0; s < B; ++s) {
        gemm_acc(a.data() + static_cast<std::size_t>(s) * m * k,
                 b.data() + static_cast<std::size_t>(s) * k * c,
                 n.value.data() + static_cast<std::size_t>(s) * m * c, m, k, c);
      }
      return;
    }
    case Op::bmm_nt: {
      const auto& a = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      const int B = a.dim(0), m = a.dim(1), k = a.dim(2), c = b.dim(1);
      n.aux.resize(static_cast<std::size_t>(k) * c);
      std::fill(n.value.vec().begin(), n.value.vec().end(), T{0});
      for (int s = 0; s < B; ++s) {
        // b slice is (c, k); gemm wants (k, c)
        transpose_into(b.data() + static_cast<std::size_t>(s) * c * k, n.aux.data(), c, k);
        gemm_acc(a.data() + static_cast<std::size_t>(s) * m * k, n.aux.data(),
                 n.value.data() + static_cast<std::size_t>(s) * m * c, m, k, c);
      }
      return;
    }
    case Op::add: {
      const auto& a = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      std::copy(a.vec().begin(), a.vec().end(), n.value.data());
      vadd(n.value.data(), b.data(), n.value.numel());
      return;
    }
    case Op::mul: {
      const auto& a = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.at(i) = a.at(i) * b.at(i);
      return;
    }
    case Op::bias_add: {
      const auto& x = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      const int c = b.dim(0);
      const int rows = static_cast<int>(x.numel()) / c;
      std::copy(x.vec().begin(), x.vec().end(), n.value.data());
      for (int r = 0; r < rows; ++r) {
        vadd(n.value.data() + static_cast<std::size_t>(r) * c, b.data(), static_cast<std::size_t>(c));
      }
      return;
    }
    case Op::add_position: {
      const auto& x = at(n.inputs[0]).value;
      const auto& p = at(n.inputs[1]).value;
      const int B = x.dim(0), L = x.dim(1), d = x.dim(2);
      std::copy(x.vec().begin(), x.vec().end(), n.value.data());
      for (int b = 0; b < B; ++b) {
        for (int t = 0; t < L; ++t) {
          vadd(n.value.data() + (static_cast<std::size_t>(b) * L + t) * d,
               p.data() + static_cast<std::size_t>(t) * d, static_cast<std::size_t>(d));
        }
      }
      return;
    }
    case Op::tanh_fn: {
      const auto& x = at(n.inputs[0]).value;
      for (std::size_t i = 0; i < x.numel(); ++i) n.value.at(i) = std::tanh(x.at(i));
      return;
    }
    case Op::relu: {
      const auto& x = at(n.inputs[0]).value;
      for (std::size_t i = 0; i < x.numel(); ++i) n.value.at(i) = x.at(i) > T{0} ? x.at(i) : T{0};
      return;
    }
    case Op::gelu: {
      const auto& x = at(n.inputs[0]).value;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double xv = static_cast<double>(x.at(i));
        n.value.at(i) = static_cast<T>(0.5 * xv * (1.0 + std::erf(xv * kInvSqrt2)));
      }
      return;
    }
    case Op::softmax: {
      const auto& x = at(n.inputs[0]).value;
      const int c = x.shape().back();
      const int rows = static_cast<int>(x.numel()) / c;
      for (int r = 0; r < rows; ++r) {
        const T* xr = x.data() + static_cast<std::size_t>(r) * c;
        T* yr = n.value.data() + static_cast<std::size_t>(r) * c;
        T mx = xr[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
        T s{0};
        for (int j = 0; j < c; ++j) {
          yr[j] = std::exp(xr[j] - mx);
          s += yr[j];
        }
        for (int j = 0; j < c; ++j) yr[j] /= s;
      }
      return;
    }
    case Op::causal_softmax: {
      const auto& x = at(n.inputs[0]).value;
      const auto& xs = x.shape();
      const int t = xs[xs.size() - 1];
      const int blocks = static_cast<int>(x.numel()) / (t * t);
      for (int b = 0; b < blocks; ++b) {
        for (int i = 0; i < t; ++i) {
          const T* xr = x.data() + (static_cast<std::size_t>(b) * t + i) * t;
          T* yr = n.value.data() + (static_cast<std::size_t>(b) * t + i) * t;
          T mx = xr[0];
          for (int j = 1; j <= i; ++j) mx = std::max(mx, xr[j]);
          T s{0};
          for (int j = 0; j <= i; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            s += yr[j];
          }
          for (int j = 0; j <= i; ++j) yr[j] /= s;
          for (int j = i + 1; j < t; ++j) yr[j] = T{0};
        }
      }
      return;
    }
    case Op::layer_norm: {
      const auto& x = at(n.inputs[0]).value;
      const auto& g = at(n.inputs[1]).value;
      const auto& b = at(n.inputs[2]).value;
      const int c = x.shape().back();
      const int rows = static_cast<int>(x.numel()) / c;
      n.aux.resize(x.numel());                       // xhat
      n.aux2.resize(static_cast<std::size_t>(rows)); // inv std
      for (int r = 0; r < rows; ++r) {
        const T* xr = x.data() + static_cast<std::size_t>(r) * c;
        T* hr = n.aux.data() + static_cast<std::size_t>(r) * c;
        T* yr = n.value.data() + static_cast<std::size_t>(r) * c;
        T mean{0};
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<T>(c);
        T var{0};
        for (int j = 0; j < c; ++j) {
          const T d = xr[j] - mean;
          var += d * d;
        }
        var /= static_cast<T>(c);
        const T inv = T{1} / std::sqrt(var + static_cast<T>(kLayerNormEps));
        n.aux2[static_cast<std::size_t>(r)] = inv;
        for (int j = 0; j < c; ++j) {
          hr[j] = (xr[j] - mean) * inv;
          yr[j] = g.at(static_cast<std::size_t>(j)) * hr[j] + b.at(static_cast<std::size_t>(j));
        }
      }
      return;
    }
    case Op::embed: {
      const auto& tab = at(n.inputs[0]).value;
      const auto& ids = int_slots_.at(n.slot);
      const int d = tab.dim(1);
      const int v = tab.dim(0);
      const std::size_t count = n.value.numel() / static_cast<std::size_t>(d);
      if (ids.size() != count) {
        throw std::runtime_error("embed '" + n.slot + "': expected " + std::to_string(count) +
                                 " ids, got " + std::to_string(ids.size()));
      }
      for (std::size_t i = 0; i < count; ++i) {
        const int id = ids[i];
        if (id < 0 || id >= v) {
          throw std::runtime_error("embed '" + n.slot + "': unknown token id " + std::to_string(id));
        }
        std::copy(tab.data() + static_cast<std::size_t>(id) * d,
                  tab.data() + static_cast<std::size_t>(id + 1) * d,
                  n.value.data() + i * static_cast<std::size_t>(d));
      }
      return;
    }
    case Op::concat: {
      const auto& a = at(n.inputs[0]).value;
      const auto& b = at(n.inputs[1]).value;
      const int axis = n.iattr;
      const auto& as = a.shape();
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(as[static_cast<std::size_t>(i)]);
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < as.size(); ++i) inner *= static_cast<std::size_t>(as[i]);
      const std::size_t ablock = static_cast<std::size_t>(as[static_cast<std::size_t>(axis)]) * inner;
      const std::size_t bblock = static_cast<std::size_t>(b.shape()[static_cast<std::size_t>(axis)]) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy(a.data() + o * ablock, a.data() + (o + 1) * ablock,
                  n.value.data() + o * (ablock + bblock));
        std::copy(b.data() + o * bblock, b.data() + (o + 1) * bblock,
                  n.value.data() + o * (ablock + bblock) + ablock);
      }
      return;
    }
    case Op::reshape: {
      const auto& x = at(n.inputs[0]).value;
      std::copy(x.vec().begin(), x.vec().end(), n.value.data());
      return;
    }
    case Op::split_heads: {
      const auto& x = at(n.inputs[0]).value;
      const int B = x.dim(0), L = x.dim(1), D = x.dim(2);
      const int H = n.iattr, dh = D / H;
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          for (int t = 0; t < L; ++t) {
            const T* src = x.data() + (static_cast<std::size_t>(b) * L + t) * D + static_cast<std::size_t>(h) * dh;
            T* dst = n.value.data() + ((static_cast<std::size_t>(b) * H + h) * L + t) * dh;
            std::copy(src, src + dh, dst);
          }
        }
      }
      return;
    }
    case Op::merge_heads: {
      const auto& x = at(n.inputs[0]).value;
      const int BH = x.dim(0), L = x.dim(1), dh = x.dim(2);
      const int H = n.iattr, B = BH / H, D = dh * H;
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          for (int t = 0; t < L; ++t) {
            const T* src = x.data() + ((static_cast<std::size_t>(b) * H + h) * L + t) * dh;
            T* dst = n.value.data() + (static_cast<std::size_t>(b) * L + t) * D + static_cast<std::size_t>(h) * dh;
            std::copy(src, src + dh, dst);
          }
        }
      }
      return;
    }
    case Op::scale: {
      const auto& x = at(n.inputs[0]).value;
      for (std::size_t i = 0; i < x.numel(); ++i) n.value.at(i) = n.sattr * x.at(i);
      return;
    }
    case Op::sum: {
      const auto& x = at(n.inputs[0]).value;
      T s{0};
      for (std::size_t i = 0; i < x.numel(); ++i) s += x.at(i);
      n.value.at(0) = s;
      return;
    }
    case Op::cross_entropy: {
      const auto& logits = at(n.inputs[0]).value;
      const auto& targets = int_slots_.at(n.slot);
      const auto& mask = mask_slots_.at(n.slot2);
      const int v = logits.shape().back();
      const std::size_t rows = logits.numel() / static_cast<std::size_t>(v);
      if (targets.size() != rows || mask.size() != rows) {
        throw std::runtime_error("cross_entropy: targets/mask must cover " + std::to_string(rows) +
                                 " rows");
      }
      n.aux.resize(logits.numel());  // per-row softmax for the backward pass
      std::size_t masked = 0;
      double total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* lr = logits.data() + r * static_cast<std::size_t>(v);
        T* pr = n.aux.data() + r * static_cast<std::size_t>(v);
        T mx = lr[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, lr[j]);
        T s{0};
        for (int j = 0; j < v; ++j) {
          pr[j] = std::exp(lr[j] - mx);
          s += pr[j];
        }
        for (int j = 0; j < v; ++j) pr[j] /= s;
        if (!mask[r]) continue;
        const int tgt = targets[r];
        if (tgt < 0 || tgt >= v) {
          throw std::runtime_error("cross_entropy: target id " + std::to_string(tgt) +
                                   " outside vocabulary");
        }
        ++masked;
        total += std::log(static_cast<double>(s)) + static_cast<double>(mx) -
                 static_cast<double>(lr[tgt]);
      }
      if (masked == 0) throw std::runtime_error("cross_entropy: empty mask");
      n.iattr = static_cast<int>(masked);
      n.value.at(0) = static_cast<T>(total / static_cast<double>(masked));
      return;
    }
  }
}

template <typename T>
T* Graph<T>::grad_ptr(Node& n) {
  if (n.op == Op::param) {
    n.value.ensure_grad();
    return n.value.grad();
  }
  ensure_grad_alloc(n);
  return n.grad.data();
}

template <typename T>
void Graph<T>::ensure_grad_alloc(Node& n) {
  if (n.grad.size() != n.value.numel()) n.grad.assign(n.value.numel(), T{0});
}

template <typename T>
void Graph<T>::backward(NodeId loss) {
  if (!evaluated_) throw std::runtime_error("backward: graph not evaluated");
  Node& ln = at(loss);
  if (ln.value.numel() != 1) throw std::runtime_error("backward: loss node is not scalar");
  if (!ln.needs_grad) return;  // nothing trainable reaches the loss
  // Intermediate grads are per-pass scratch; only parameter grads accumulate
  // across repeated backward calls.
  for (auto& n : nodes_) {
    if (n.op != Op::param) std::fill(n.grad.begin(), n.grad.end(), T{0});
  }
  grad_ptr(ln)[0] += T{1};
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (!n.needs_grad || n.op == Op::input || n.op == Op::param) continue;
    if (n.grad.empty()) continue;  // never received gradient
    backprop_node(n);
  }
}

template <typename T>
void Graph<T>::backprop_node(Node& n) {
  const T* g = n.grad.data();
  switch (n.op) {
    case Op::input:
    case Op::param:
      return;
    case Op::matmul: {
      Node& xn = at(n.inputs[0]);
      Node& wn = at(n.inputs[1]);
      const auto& x = xn.value;
      const auto& w = wn.value;
      const int k = w.dim(0), c = w.dim(1);
      const int rows = static_cast<int>(x.numel()) / k;
      if (xn.needs_grad) {
        // dx += g . w^T
        n.aux.resize(static_cast<std::size_t>(k) * c);
        transpose_into(w.data(), n.aux.data(), k, c);
        gemm_acc(g, n.aux.data(), grad_ptr(xn), rows, c, k);
      }
      if (wn.needs_grad) {
        // dw += x^T . g
        n.aux2.resize(static_cast<std::size_t>(rows) * k);
        transpose_into(x.data(), n.aux2.data(), rows, k);
        gemm_acc(n.aux2.data(), g, grad_ptr(wn), k, rows, c);
      }
      return;
    }
    case Op::bmm: {
      Node& an = at(n.inputs[0]);
      Node& bn = at(n.inputs[1]);
      const int B = an.value.dim(0), m = an.value.dim(1), k = an.value.dim(2), c = bn.value.dim(2);
      for (int s = 0; s < B; ++s) {
        const T* gs = g + static_cast<std::size_t>(s) * m * c;
        if (an.needs_grad) {
          // da += g . b^T
          n.aux.resize(static_cast<std::size_t>(c) * k);
          transpose_into(bn.value.data() + static_cast<std::size_t>(s) * k * c, n.aux.data(), k, c);
          gemm_acc(gs, n.aux.data(), grad_ptr(an) + static_cast<std::size_t>(s) * m * k, m, c, k);
        }
        if (bn.needs_grad) {
          // db += a^T . g
          n.aux2.resize(static_cast<std::size_t>(m) * k);
          transpose_into(an.value.data() + static_cast<std::size_t>(s) * m * k, n.aux2.data(), m, k);
          gemm_acc(n.aux2.data(), gs, grad_ptr(bn) + static_cast<std::size_t>(s) * k * c, k, m, c);
        }
      }
      return;
    }
    case Op::bmm_nt: {
      Node& an = at(n.inputs[0]);
      Node& bn = at(n.inputs[1]);
      const int B = an.value.dim(0), m = an.value.dim(1), k = an.value.dim(2), c = bn.value.dim(1);
      for (int s = 0; s < B; ++s) {
        const T* gs = g + static_cast<std::size_t>(s) * m * c;
        if (an.needs_grad) {
          // da += g . b   (b slice is (c, k))
          gemm_acc(gs, bn.value.data() + static_cast<std::size_t>(s) * c * k,
                   grad_ptr(an) + static_cast<std::size_t>(s) * m * k, m, c, k);
        }
        if (bn.needs_grad) {
          // db += g^T . a
          n.aux2.resize(static_cast<std::size_t>(m) * c);
          transpose_into(gs, n.aux2.data(), m, c);
          gemm_acc(n.aux2.data(), an.value.data() + static_cast<std::size_t>(s) * m * k,
                   grad_ptr(bn) + static_cast<std::size_t>(s) * c * k, c, m, k);
        }
      }
      return;
    }
    case Op::add: {
      for (int i = 0; i < 2; ++i) {
        Node& in = at(n.inputs[static_cast<std::size_t>(i)]);
        if (in.needs_grad) vadd(grad_ptr(in), g, n.value.numel());
      }
      return;
    }
    case Op::mul: {
      Node& an = at(n.inputs[0]);
      Node& bn = at(n.inputs[1]);
      if (an.needs_grad) {
        T* da = grad_ptr(an);
        for (std::size_t i = 0; i < n.value.numel(); ++i) da[i] += g[i] * bn.value.at(i);
      }
      if (bn.needs_grad) {
        T* db = grad_ptr(bn);
        for (std::size_t i = 0; i < n.value.numel(); ++i) db[i] += g[i] * an.value.at(i);
      }
      return;
    }
    case Op::bias_add: {
      Node& xn = at(n.inputs[0]);
      Node& bn = at(n.inputs[1]);
      const int c = bn.value.dim(0);
      const int rows = static_cast<int>(n.value.numel()) / c;
      if (xn.needs_grad) vadd(grad_ptr(xn), g, n.value.numel());
      if (bn.needs_grad) colsum_acc(g, grad_ptr(bn), rows, c);
      return;
    }
    case Op::add_position: {
      Node& xn = at(n.inputs[0]);
      Node& pn = at(n.inputs[1]);
      const int B = xn.value.dim(0), L = xn.value.dim(1), d = xn.value.dim(2);
      if (xn.needs_grad) vadd(grad_ptr(xn), g, n.value.numel());
      if (pn.needs_grad) {
        T* dp = grad_ptr(pn);
        for (int b = 0; b < B; ++b) {
          for (int t = 0; t < L; ++t) {
            vadd(dp + static_cast<std::size_t>(t) * d,
                 g + (static_cast<std::size_t>(b) * L + t) * d, static_cast<std::size_t>(d));
          }
        }
      }
      return;
    }
    case Op::tanh_fn: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      T* dx = grad_ptr(xn);
      for (std::size_t i = 0; i < n.value.numel(); ++i) {
        const T y = n.value.at(i);
        dx[i] += g[i] * (T{1} - y * y);
      }
      return;
    }
    case Op::relu: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      T* dx = grad_ptr(xn);
      for (std::size_t i = 0; i < n.value.numel(); ++i) {
        if (xn.value.at(i) > T{0}) dx[i] += g[i];
      }
      return;
    }
    case Op::gelu: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      T* dx = grad_ptr(xn);
      for (std::size_t i = 0; i < n.value.numel(); ++i) {
        const double xv = static_cast<double>(xn.value.at(i));
        const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
        dx[i] += g[i] * static_cast<T>(cdf + xv * pdf);
      }
      return;
    }
    case Op::softmax: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      const int c = n.value.shape().back();
      const int rows = static_cast<int>(n.value.numel()) / c;
      T* dx = grad_ptr(xn);
      for (int r = 0; r < rows; ++r) {
        const T* yr = n.value.data() + static_cast<std::size_t>(r) * c;
        const T* gr = g + static_cast<std::size_t>(r) * c;
        T dot{0};
        for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
        T* dr = dx + static_cast<std::size_t>(r) * c;
        for (int j = 0; j < c; ++j) dr[j] += yr[j] * (gr[j] - dot);
      }
      return;
    }
    case Op::causal_softmax: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      const auto& xs = n.value.shape();
      const int t = xs[xs.size() - 1];
      const int blocks = static_cast<int>(n.value.numel()) / (t * t);
      T* dx = grad_ptr(xn);
      for (int b = 0; b < blocks; ++b) {
        for (int i = 0; i < t; ++i) {
          const std::size_t off = (static_cast<std::size_t>(b) * t + i) * t;
          const T* yr = n.value.data() + off;
          const T* gr = g + off;
          T dot{0};
          for (int j = 0; j <= i; ++j) dot += gr[j] * yr[j];
          T* dr = dx + off;
          for (int j = 0; j <= i; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
      }
      return;
    }
    case Op::layer_norm: {
      Node& xn = at(n.inputs[0]);
      Node& gn = at(n.inputs[1]);
      Node& bn = at(n.inputs[2]);
      const int c = n.value.shape().back();
      const int rows = static_cast<int>(n.value.numel()) / c;
      for (int r = 0; r < rows; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * c;
        const T* hr = n.aux.data() + off;  // xhat
        const T* gr = g + off;
        const T inv = n.aux2[static_cast<std::size_t>(r)];
        if (gn.needs_grad) {
          T* dg = grad_ptr(gn);
          for (int j = 0; j < c; ++j) dg[j] += gr[j] * hr[j];
        }
        if (bn.needs_grad) {
          T* db = grad_ptr(bn);
          for (int j = 0; j < c; ++j) db[j] += gr[j];
        }
        if (xn.needs_grad) {
          // dx = inv/c * (c*dh - sum(dh) - xhat * sum(dh*xhat)), dh = g * gain
          T sum_dh{0}, sum_dh_h{0};
          for (int j = 0; j < c; ++j) {
            const T dh = gr[j] * gn.value.at(static_cast<std::size_t>(j));
            sum_dh += dh;
            sum_dh_h += dh * hr[j];
          }
          T* dx = grad_ptr(xn) + off;
          const T cn = static_cast<T>(c);
          for (int j = 0; j < c; ++j) {
            const T dh = gr[j] * gn.value.at(static_cast<std::size_t>(j));
            dx[j] += inv / cn * (cn * dh - sum_dh - hr[j] * sum_dh_h);
          }
        }
      }
      return;
    }
    case Op::embed: {
      Node& tn = at(n.inputs[0]);
      if (!tn.needs_grad) return;
      const auto& ids = int_slots_.at(n.slot);
      const int d = tn.value.dim(1);
      T* dt = grad_ptr(tn);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        vadd(dt + static_cast<std::size_t>(ids[i]) * d, g + i * static_cast<std::size_t>(d),
             static_cast<std::size_t>(d));
      }
      return;
    }
    case Op::concat: {
      Node& an = at(n.inputs[0]);
      Node& bn = at(n.inputs[1]);
      const int axis = n.iattr;
      const auto& as = an.value.shape();
      std::size_t outer = 1, inner = 1;
      for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(as[static_cast<std::size_t>(i)]);
      for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < as.size(); ++i) inner *= static_cast<std::size_t>(as[i]);
      const std::size_t ablock = static_cast<std::size_t>(as[static_cast<std::size_t>(axis)]) * inner;
      const std::size_t bblock = static_cast<std::size_t>(bn.value.shape()[static_cast<std::size_t>(axis)]) * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        if (an.needs_grad) {
          vadd(grad_ptr(an) + o * ablock, g + o * (ablock + bblock), ablock);
        }
        if (bn.needs_grad) {
          vadd(grad_ptr(bn) + o * bblock, g + o * (ablock + bblock) + ablock, bblock);
        }
      }
      return;
    }
    case Op::reshape: {
      Node& xn = at(n.inputs[0]);
      if (xn.needs_grad) vadd(grad_ptr(xn), g, n.value.numel());
      return;
    }
    case Op::split_heads: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      const int B = xn.value.dim(0), L = xn.value.dim(1), D = xn.value.dim(2);
      const int H = n.iattr, dh = D / H;
      T* dx = grad_ptr(xn);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          for (int t = 0; t < L; ++t) {
            vadd(dx + (static_cast<std::size_t>(b) * L + t) * D + static_cast<std::size_t>(h) * dh,
                 g + ((static_cast<std::size_t>(b) * H + h) * L + t) * dh,
                 static_cast<std::size_t>(dh));
          }
        }
      }
      return;
    }
    case Op::merge_heads: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      const int BH = xn.value.dim(0), L = xn.value.dim(1), dh = xn.value.dim(2);
      const int H = n.iattr, B = BH / H, D = dh * H;
      T* dx = grad_ptr(xn);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          for (int t = 0; t < L; ++t) {
            vadd(dx + ((static_cast<std::size_t>(b) * H + h) * L + t) * dh,
                 g + (static_cast<std::size_t>(b) * L + t) * D + static_cast<std::size_t>(h) * dh,
                 static_cast<std::size_t>(dh));
          }
        }
      }
      return;
    }
    case Op::scale: {
      Node& xn = at(n.inputs[0]);
      if (xn.needs_grad) vaxpy(n.sattr, g, grad_ptr(xn), n.value.numel());
      return;
    }
    case Op::sum: {
      Node& xn = at(n.inputs[0]);
      if (!xn.needs_grad) return;
      T* dx = grad_ptr(xn);
      const T gv = g[0];
      for (std::size_t i = 0; i < xn.value.numel(); ++i) dx[i] += gv;
      return;
    }
    case Op::cross_entropy: {
      Node& ln = at(n.inputs[0]);
      if (!ln.needs_grad) return;
      const auto& targets = int_slots_.at(n.slot);
      const auto& mask = mask_slots_.at(n.slot2);
      const int v = ln.value.shape().back();
      const std::size_t rows = ln.value.numel() / static_cast<std::size_t>(v);
      const T scale_g = g[0] / static_cast<T>(n.iattr);
      T* dl = grad_ptr(ln);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* pr = n.aux.data() + r * static_cast<std::size_t>(v);
        T* dr = dl + r * static_cast<std::size_t>(v);
        for (int j = 0; j < v; ++j) dr[j] += scale_g * pr[j];
        dr[targets[r]] -= scale_g;
      }
      return;
    }
  }
}

template <typename T>
void Graph<T>::zero_grad() {
  for (auto& n : nodes_) {
    std::fill(n.grad.begin(), n.grad.end(), T{0});
    if (n.op == Op::param) n.value.zero_grad();
  }
}

template <typename T>
std::map<std::string, Tensor<T>> Graph<T>::evaluate(const std::map<std::string, Tensor<T>>& inputs) {
  for (const auto& [name, tensor] : inputs) bind(name, tensor.vec());
  forward();
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : outputs_) out.emplace(name, at(id).value.clone());
  return out;
}

template <typename T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  if (!evaluated_) throw std::runtime_error("value: graph not evaluated");
  return at(id).value;
}

template <typename T>
const std::vector<T>& Graph<T>::grad_of(NodeId id) const {
  const Node& n = at(id);
  if (n.op == Op::param) {
    if (!n.value.has_grad()) throw std::runtime_error("grad_of: no gradient for " + n.name);
    return n.value.grad_vec();
  }
  if (n.grad.empty()) throw std::runtime_error("grad_of: node never received gradient");
  return n.grad;
}

template <typename T>
bool Graph<T>::has_grad(NodeId id) const {
  const Node& n = at(id);
  return n.op == Op::param ? n.value.has_grad() : !n.grad.empty();
}

template <typename T>
std::vector<typename Graph<T>::NodeId> Graph<T>::trainable_param_ids() const {
  std::vector<NodeId> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::param && nodes_[i].trainable) out.push_back(static_cast<NodeId>(i));
  }
  return out;
}

template <typename T>
Tensor<T>& Graph<T>::param_tensor(NodeId id) {
  Node& n = at(id);
  if (n.op != Op::param) throw std::invalid_argument("param_tensor: not a param node");
  return n.value;
}

template <typename T>
const std::string& Graph<T>::node_name(NodeId id) const {
  return at(id).name;
}

template <typename T>
std::size_t Graph<T>::trainable_scalar_count() const {
  std::size_t n = 0;
  for (const auto& node : nodes_) {
    if (node.op == Op::param && node.trainable) n += node.value.numel();
  }
  return n;
}

template <typename T>
double Graph<T>::loss_value_at(NodeId loss) {
  forward();
  return static_cast<double>(at(loss).value.at(0));
}

template <typename T>
double Graph<T>::finite_diff_check(NodeId loss, double h) {
  if constexpr (!std::is_same_v<T, double>) {
    throw std::runtime_error("finite_diff_check requires a 64-bit graph");
  } else {
    if (h == 0.0) throw std::invalid_argument("finite_diff_check: step h must be nonzero");
    if (at(loss).value.numel() != 1) throw std::invalid_argument("finite_diff_check: loss not scalar");
    const auto ids = trainable_param_ids();
    std::size_t count = 0;
    for (NodeId id : ids) count += at(id).value.numel();
    if (count >= 10000) {
      throw std::invalid_argument("finite_diff_check: too many parameters (" +
                                  std::to_string(count) + ")");
    }
    zero_grad();
    forward();
    backward(loss);
    double max_rel = 0.0;
    for (NodeId id : ids) {
      Node& n = at(id);
      for (std::size_t i = 0; i < n.value.numel(); ++i) {
        const double orig = n.value.at(i);
        n.value.at(i) = orig + h;
        const double lp = loss_value_at(loss);
        n.value.at(i) = orig - h;
        const double lm = loss_value_at(loss);
        n.value.at(i) = orig;
        if (!std::isfinite(lp) || !std::isfinite(lm)) {
          throw std::runtime_error("finite_diff_check: non-finite perturbed loss at " + n.name);
        }
        const double gn = (lp - lm) / (2.0 * h);
        const double ga = n.value.grad()[i];
        const double rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), 1e-8});
        max_rel = std::max(max_rel, rel);
      }
    }
    forward();  // restore values
    return max_rel;
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace pblab
