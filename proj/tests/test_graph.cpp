#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "pblab/graph.hpp"
#include "pblab/rng.hpp"

using namespace pblab;

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = static_cast<T>(rng.normal() * scale);
  return t;
}

}  // namespace

TEST_CASE("matmul shape algebra") {
  Graph<float> g;
  auto x = g.input("x", {2, 3});
  auto w = g.param("w", Tensor<float>({3, 4}), false);
  auto y = g.matmul(x, w);
  g.bind("x", std::vector<float>(6, 1.0f));
  g.forward();
  CHECK(g.value(y).shape() == std::vector<int>{2, 4});

  Graph<float> bad;
  auto a = bad.input("a", {2, 3});
  auto b = bad.param("b", Tensor<float>({4, 5}), false);
  CHECK_THROWS_AS((void)bad.matmul(a, b), std::invalid_argument);
}

TEST_CASE("softmax rows are a distribution") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Graph<double> g;
    auto x = g.input("x", {3, 11});
    auto s = g.softmax(x);
    auto t = random_tensor<double>(rng, {3, 11}, 4.0);
    g.bind("x", t.vec());
    g.forward();
    const auto& v = g.value(s);
    for (int r = 0; r < 3; ++r) {
      double sum = 0.0;
      for (int j = 0; j < 11; ++j) {
        const double p = v.at(static_cast<std::size_t>(r) * 11 + j);
        CHECK(p >= 0.0);
        sum += p;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("cross-entropy of uniform logits is ln V") {
  const int v = 23;
  Graph<double> g;
  auto x = g.input("x", {4, v});
  auto loss = g.cross_entropy(x, "tgt", "msk");
  g.bind("x", std::vector<double>(4 * v, 0.7));
  g.bind_ids("tgt", {0, 5, 9, 22});
  g.bind_mask("msk", {1, 1, 1, 1});
  g.forward();
  CHECK(g.value(loss).at(0) == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-12));
}

TEST_CASE("backprop: d(x^2)/dx = 2x") {
  Graph<double> g;
  auto x = g.param("x", Tensor<double>({1}, {3.0}));
  auto sq = g.mul(x, x);
  auto loss = g.sum(sq);
  g.forward();
  g.backward(loss);
  CHECK(g.grad_of(x)[0] == doctest::Approx(6.0));
  // Repeated calls accumulate into parameter grads.
  g.backward(loss);
  CHECK(g.grad_of(x)[0] == doctest::Approx(12.0));
  g.zero_grad();
  g.forward();
  g.backward(loss);
  CHECK(g.grad_of(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("backprop: sum(softmax(z)) has ~zero gradient") {
  Rng rng(3);
  Graph<double> g;
  auto z = g.param("z", random_tensor<double>(rng, {1, 9}, 2.0));
  auto s = g.softmax(z);
  auto loss = g.sum(s);
  g.forward();
  g.backward(loss);
  for (double gi : g.grad_of(z)) CHECK(std::abs(gi) < 1e-12);
}

TEST_CASE("backward preconditions") {
  Graph<double> g;
  auto x = g.param("x", Tensor<double>({2}, {1.0, 2.0}));
  auto y = g.mul(x, x);
  CHECK_THROWS_WITH(g.backward(y), doctest::Contains("not evaluated"));
  g.forward();
  CHECK_THROWS_WITH(g.backward(y), doctest::Contains("not scalar"));
}

TEST_CASE("finite differences: linear-quadratic model is exact") {
  Graph<double> g;
  auto x = g.input("x", {1, 3});
  auto w = g.param("w", Tensor<double>({3, 1}, {0.5, -1.25, 2.0}));
  auto y = g.matmul(x, w);
  auto loss = g.sum(g.mul(y, y));
  g.bind("x", {1.0, 2.0, -0.5});
  CHECK(g.finite_diff_check(loss, 1e-5) < 1e-8);
}

TEST_CASE("finite differences: h = 0 is rejected") {
  Graph<double> g;
  auto x = g.param("x", Tensor<double>({1}, {2.0}));
  auto loss = g.sum(g.mul(x, x));
  g.forward();
  CHECK_THROWS_AS(g.finite_diff_check(loss, 0.0), std::invalid_argument);
}

TEST_CASE("gradients of every op pass the finite-difference oracle") {
  Rng rng(2024);
  auto run = [&](auto build) {
    for (int trial = 0; trial < 5; ++trial) {
      Graph<double> g;
      auto loss = build(g, rng);
      const double err = g.finite_diff_check(loss, 1e-5);
      CHECK(err < 1e-4);
    }
  };

  run([](Graph<double>& g, Rng& rng) {  // matmul + bias_add
    auto x = g.param("x", random_tensor<double>(rng, {4, 6}));
    auto w = g.param("w", random_tensor<double>(rng, {6, 5}));
    auto b = g.param("b", random_tensor<double>(rng, {5}));
    auto y = g.bias_add(g.matmul(x, w), b);
    return g.sum(g.mul(y, y));
  });
  run([](Graph<double>& g, Rng& rng) {  // bmm
    auto a = g.param("a", random_tensor<double>(rng, {2, 3, 4}));
    auto b = g.param("b", random_tensor<double>(rng, {2, 4, 5}));
    auto y = g.bmm(a, b);
    return g.sum(g.mul(y, y));
  });
  run([](Graph<double>& g, Rng& rng) {  // bmm_nt
    auto a = g.param("a", random_tensor<double>(rng, {2, 3, 4}));
    auto b = g.param("b", random_tensor<double>(rng, {2, 6, 4}));
    auto y = g.bmm_nt(a, b);
    return g.sum(g.mul(y, y));
  });
  run([](Graph<double>& g, Rng& rng) {  // elementwise chain
    auto x = g.param("x", random_tensor<double>(rng, {3, 7}));
    return g.sum(g.mul(g.tanh_fn(x), g.gelu(g.relu(x))));
  });
  run([](Graph<double>& g, Rng& rng) {  // softmax
    auto x = g.param("x", random_tensor<double>(rng, {4, 6}, 2.0));
    auto w = g.param("w", random_tensor<double>(rng, {4, 6}));
    return g.sum(g.mul(g.softmax(x), w));
  });
  run([](Graph<double>& g, Rng& rng) {  // causal softmax
    auto x = g.param("x", random_tensor<double>(rng, {2, 5, 5}, 2.0));
    auto w = g.param("w", random_tensor<double>(rng, {2, 5, 5}));
    return g.sum(g.mul(g.causal_softmax(x), w));
  });
  run([](Graph<double>& g, Rng& rng) {  // layer norm
    auto x = g.param("x", random_tensor<double>(rng, {3, 8}, 1.5));
    auto gain = g.param("gain", random_tensor<double>(rng, {8}));
    auto bias = g.param("bias", random_tensor<double>(rng, {8}));
    auto y = g.layer_norm(x, gain, bias);
    return g.sum(g.mul(y, y));
  });
  run([](Graph<double>& g, Rng& rng) {  // embedding
    auto tab = g.param("tab", random_tensor<double>(rng, {9, 4}));
    auto e = g.embed(tab, "ids", {5});
    g.bind_ids("ids", {0, 3, 3, 8, 1});
    return g.sum(g.mul(e, e));
  });
  run([](Graph<double>& g, Rng& rng) {  // concat
    auto a = g.param("a", random_tensor<double>(rng, {2, 3, 4}));
    auto b = g.param("b", random_tensor<double>(rng, {2, 2, 4}));
    auto c = g.concat(a, b, 1);
    auto d = g.param("d", random_tensor<double>(rng, {2, 5, 4}));
    return g.sum(g.mul(c, d));
  });
  run([](Graph<double>& g, Rng& rng) {  // reshape / heads / scale / add_position
    auto x = g.param("x", random_tensor<double>(rng, {2, 3, 8}));
    auto pos = g.param("pos", random_tensor<double>(rng, {6, 8}));
    auto y = g.add_position(x, pos);
    auto h = g.merge_heads(g.split_heads(y, 2), 2);
    auto r = g.reshape(g.scale(h, 0.37), {6, 8});
    return g.sum(g.mul(r, r));
  });
  run([](Graph<double>& g, Rng& rng) {  // cross entropy
    auto x = g.param("x", random_tensor<double>(rng, {5, 7}, 2.0));
    auto loss = g.cross_entropy(x, "tgt", "msk");
    g.bind_ids("tgt", {1, 0, 6, 3, 3});
    g.bind_mask("msk", {1, 0, 1, 1, 0});
    return loss;
  });
}

TEST_CASE("random two-layer net matches finite differences") {
  Rng rng(99);
  for (int trial = 0; trial < 3; ++trial) {
    Graph<double> g;
    auto x = g.input("x", {4, 6});
    auto w1 = g.param("w1", random_tensor<double>(rng, {6, 8}, 0.5));
    auto b1 = g.param("b1", random_tensor<double>(rng, {8}, 0.1));
    auto w2 = g.param("w2", random_tensor<double>(rng, {8, 3}, 0.5));
    auto b2 = g.param("b2", random_tensor<double>(rng, {3}, 0.1));
    auto h = g.tanh_fn(g.bias_add(g.matmul(x, w1), b1));
    auto logits = g.bias_add(g.matmul(h, w2), b2);
    auto loss = g.cross_entropy(logits, "tgt", "msk");
    auto inp = random_tensor<double>(rng, {4, 6});
    g.bind("x", inp.vec());
    g.bind_ids("tgt", {0, 2, 1, 1});
    g.bind_mask("msk", {1, 1, 1, 1});
    CHECK(g.finite_diff_check(loss, 1e-5) < 1e-4);
  }
}

TEST_CASE("evaluate is deterministic bitwise") {
  Rng rng(5);
  auto build = [](Graph<float>& g) {
    auto x = g.input("x", {3, 5});
    auto w = g.param("w", Tensor<float>({5, 4}), false);
    auto y = g.softmax(g.matmul(x, w));
    g.mark_output("y", y);
    return w;
  };
  Graph<float> g1, g2;
  auto w1 = build(g1);
  auto w2 = build(g2);
  auto wv = random_tensor<float>(rng, {5, 4});
  auto xv = random_tensor<float>(rng, {3, 5});
  std::memcpy(g1.param_tensor(w1).data(), wv.data(), wv.numel() * sizeof(float));
  std::memcpy(g2.param_tensor(w2).data(), wv.data(), wv.numel() * sizeof(float));
  auto o1 = g1.evaluate({{"x", xv}});
  auto o2 = g2.evaluate({{"x", xv}});
  CHECK(std::memcmp(o1.at("y").data(), o2.at("y").data(), o1.at("y").numel() * sizeof(float)) == 0);
}

TEST_CASE("non-finite intermediates abort with a diagnostic") {
  Graph<float> g;
  auto x = g.input("x", {1, 2});
  auto w = g.param("w", Tensor<float>({2, 2}, {1e30f, 1e30f, 1e30f, 1e30f}), false);
  (void)g.matmul(x, w);
  g.bind("x", {1e30f, 1e30f});
  CHECK_THROWS_WITH(g.forward(), doctest::Contains("non-finite"));
}

TEST_CASE("unknown token id is rejected") {
  Graph<float> g;
  auto tab = g.param("tab", Tensor<float>({4, 2}), false);
  (void)g.embed(tab, "ids", {3});
  g.bind_ids("ids", {0, 1, 7});
  CHECK_THROWS_WITH(g.forward(), doctest::Contains("unknown token id"));
}

TEST_CASE("empty cross-entropy mask is an error") {
  Graph<float> g;
  auto x = g.input("x", {2, 3});
  (void)g.cross_entropy(x, "tgt", "msk");
  g.bind("x", std::vector<float>(6, 0.0f));
  g.bind_ids("tgt", {0, 1});
  g.bind_mask("msk", {0, 0});
  CHECK_THROWS_WITH(g.forward(), doctest::Contains("empty mask"));
}
