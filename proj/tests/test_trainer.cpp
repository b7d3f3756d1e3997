#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "pblab/rng.hpp"
#include "pblab/trainer.hpp"

using namespace pblab;

namespace {

TaskConfig tiny_task(int k = 3) {
  TaskConfig t;
  t.k = k;
  t.doc_len = 2;
  t.query_len = 1;
  t.key_vocab = 16;
  t.filler_vocab = 8;
  t.k_max = 6;
  return t;
}

ModelConfig tiny_model(const TaskConfig& t, int d = 32, int layers = 2) {
  ModelConfig m;
  m.vocab_size = t.layout().vocab_size();
  m.d_model = d;
  m.n_layers = layers;
  m.n_heads = 2;
  m.max_seq_len = 32;
  m.k_max = t.k_max;
  return m;
}

TrainConfig fast_train(std::uint64_t seed, int epochs, double lr = 2e-3, int batch = 8) {
  TrainConfig tc;
  tc.seed = seed;
  tc.epochs = epochs;
  tc.learning_rate = lr;
  tc.batch_size = batch;
  return tc;
}

}  // namespace

TEST_CASE("loss: uniform logits give ln V") {
  const int v = 17;
  Tensor<float> logits({3, v});
  for (std::size_t i = 0; i < logits.numel(); ++i) logits.at(i) = 0.25f;
  const double l = masked_cross_entropy(logits, {0, 4, 16}, {1, 1, 1});
  CHECK(l == doctest::Approx(std::log(static_cast<double>(v))).epsilon(1e-9));
}

TEST_CASE("loss: +20 margin on the correct token saturates to ~0") {
  const int v = 9;
  Tensor<float> logits({2, v});
  std::vector<int> targets{3, 7};
  for (int r = 0; r < 2; ++r) {
    logits.at(static_cast<std::size_t>(r) * v + targets[static_cast<std::size_t>(r)]) = 20.0f;
  }
  CHECK(masked_cross_entropy(logits, targets, {1, 1}) < 1e-6);
}

TEST_CASE("loss: all-zero mask is an error") {
  Tensor<float> logits({2, 4});
  CHECK_THROWS_AS((void)masked_cross_entropy(logits, {0, 1}, {0, 0}), std::invalid_argument);
}

TEST_CASE("loss ignores targets on unmasked rows") {
  Rng rng(3);
  Tensor<float> logits({4, 6});
  for (std::size_t i = 0; i < logits.numel(); ++i) logits.at(i) = static_cast<float>(rng.normal());
  const double a = masked_cross_entropy(logits, {1, 2, 3, 4}, {1, 0, 1, 0});
  const double b = masked_cross_entropy(logits, {1, 5, 3, 0}, {1, 0, 1, 0});
  CHECK(a == b);
}

TEST_CASE("cosine schedule endpoints") {
  const double base = 2e-4;
  CHECK(cosine_lr(base, 0, 1000) == doctest::Approx(base));
  CHECK(cosine_lr(base, 999, 1000) <= 1e-2 * base);
  CHECK(cosine_lr(base, 0, 1) == doctest::Approx(base));
  CHECK_THROWS_AS((void)cosine_lr(base, 5, 5), std::invalid_argument);
}

TEST_CASE("overfitting 32 instances drives the loss under 0.1") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 32, 11);
  auto tc = fast_train(5, 200);
  std::ostringstream metrics;
  auto ckpt = pretrain(model_cfg, task, data, tc, &metrics);
  const double final_loss = ckpt.meta.at("final_epoch_loss").get<double>();
  CHECK(final_loss < 0.1);
  CHECK(metrics.str().find("\"loss\"") != std::string::npos);
}

TEST_CASE("pretraining is deterministic given the seed") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {0.5, 0.25, 0.25}, 24, 3);
  auto tc = fast_train(7, 2);
  auto a = pretrain(model_cfg, task, data, tc);
  auto b = pretrain(model_cfg, task, data, tc);
  CHECK(params_hash(a.tensors) == params_hash(b.tensors));

  auto tc2 = fast_train(8, 2);
  auto c = pretrain(model_cfg, task, data, tc2);
  CHECK(params_hash(a.tensors) != params_hash(c.tensors));
}

TEST_CASE("one-hot pretraining induces a preferred position") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0, 0.0, 0.0}, 96, 19);
  auto tc = fast_train(2, 6);
  auto ckpt = pretrain(model_cfg, task, data, tc);
  auto model = model_from_checkpoint(ckpt);
  auto predictor = make_model_predictor(model, task);

  const int per_slot = 40;
  std::vector<double> acc(static_cast<std::size_t>(task.k), 0.0);
  for (int c = 1; c <= task.k; ++c) {
    int hits = 0;
    for (int j = 0; j < per_slot; ++j) {
      const auto inst = gen_instance(task, c, Rng::mix(1000 + c, j));
      if (predictor(inst).slot == c) ++hits;
    }
    acc[static_cast<std::size_t>(c - 1)] = static_cast<double>(hits) / per_slot;
  }
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= task.k;
  CHECK(acc[0] > mean);
}

TEST_CASE("divergence aborts with a diagnostic") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 32, 4);
  auto tc = fast_train(1, 3, /*lr=*/1e6);
  CHECK_THROWS_WITH((void)pretrain(model_cfg, task, data, tc),
                    doctest::Contains("training aborted"));
}

TEST_CASE("finetune freezes the base and updates exactly count_tunable scalars") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0, 0.0, 0.0}, 48, 13);
  auto base = pretrain(model_cfg, task, data, fast_train(3, 2));
  const auto base_hash = params_hash(base.tensors);

  auto uniform = gen_dataset(task, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 12, 29);
  auto augmented = permute_augment(uniform, task.k, PermScheme::cyclic, 0);

  for (auto kind : {AdapterKind::le, AdapterKind::pt, AdapterKind::lowrank}) {
    AdapterSpec spec;
    spec.kind = kind;
    spec.hidden_dim = 16;
    spec.output_dim = model_cfg.d_model;
    spec.rank = 2;
    auto res = finetune(base, spec, task, augmented, fast_train(21, 1, 1e-3));
    CHECK(res.base_hash_before == base_hash);
    CHECK(res.base_hash_after == base_hash);
    CHECK(params_hash(base.tensors) == base_hash);
    CHECK(res.updated_scalars == res.expected_tunable);
    if (kind != AdapterKind::lowrank) {
      // Every MLP adapter scalar sees a nonzero gradient on the first step.
      CHECK(res.nonzero_grad_scalars == res.expected_tunable);
    }
    CHECK(res.adapter_ckpt.meta.at("kind").get<std::string>() == "adapter");
  }
}

TEST_CASE("finetune rejects a dimension mismatch") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0, 0.0, 0.0}, 16, 13);
  auto base = pretrain(model_cfg, task, data, fast_train(3, 1));
  AdapterSpec spec;
  spec.kind = AdapterKind::le;
  spec.hidden_dim = 8;
  spec.output_dim = model_cfg.d_model + 1;
  CHECK_THROWS_WITH((void)finetune(base, spec, task, data, fast_train(1, 1)),
                    doctest::Contains("d_model"));
}

TEST_CASE("le finetuning lowers the loss on augmented data") {
  auto task = tiny_task();
  auto model_cfg = tiny_model(task);
  auto data = gen_dataset(task, {1.0, 0.0, 0.0}, 64, 13);
  auto base = pretrain(model_cfg, task, data, fast_train(3, 4));

  auto uniform = gen_dataset(task, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 24, 51);
  auto augmented = permute_augment(uniform, task.k, PermScheme::cyclic, 0);
  AdapterSpec spec;
  spec.kind = AdapterKind::le;
  spec.hidden_dim = 32;
  spec.output_dim = model_cfg.d_model;

  std::ostringstream metrics;
  auto res = finetune(base, spec, task, augmented, fast_train(9, 8, 2e-3), &metrics);
  // First and last epoch mean losses from the metrics stream.
  double first = -1, last = -1;
  std::istringstream in(metrics.str());
  std::string line;
  while (std::getline(in, line)) {
    if (line.find("mean_loss") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    if (first < 0) first = j.at("mean_loss").get<double>();
    last = j.at("mean_loss").get<double>();
  }
  CHECK(first > 0);
  CHECK(last < first);
}
