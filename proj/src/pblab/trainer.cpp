#include "pblab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "pblab/kernels.hpp"
#include "pblab/rng.hpp"
#include "pblab/serde.hpp"
#include "pblab/util.hpp"

namespace pblab {

double cosine_lr(double base, long step, long total_steps) {
  if (total_steps < 1 || step < 0 || step >= total_steps) {
    throw std::invalid_argument("cosine_lr: step outside schedule");
  }
  if (total_steps == 1) return base;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

double masked_cross_entropy(const Tensor<float>& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  if (logits.rank() < 2) throw std::invalid_argument("loss: logits rank must be >= 2");
  const int v = logits.shape().back();
  const std::size_t rows = logits.numel() / static_cast<std::size_t>(v);
  if (targets.size() != rows || mask.size() != rows) {
    throw std::invalid_argument("loss: targets/mask must cover every row");
  }
  std::size_t masked = 0;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const float* lr = logits.data() + r * static_cast<std::size_t>(v);
    double mx = lr[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(lr[j]));
    double sum = 0.0;
    for (int j = 0; j < v; ++j) sum += std::exp(static_cast<double>(lr[j]) - mx);
    const int tgt = targets[r];
    if (tgt < 0 || tgt >= v) throw std::invalid_argument("loss: target outside vocabulary");
    total += std::log(sum) + mx - static_cast<double>(lr[tgt]);
    ++masked;
  }
  if (masked == 0) throw std::invalid_argument("loss: empty mask");
  return total / static_cast<double>(masked);
}

namespace {

class AdamW {
 public:
  AdamW(std::vector<Tensor<float>*> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      p->ensure_grad();
      state_.push_back({std::vector<float>(p->numel(), 0.0f), std::vector<float>(p->numel(), 0.0f)});
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step(double lr) {
    ++t_;
    const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta1, t_)));
    const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(cfg_.beta2, t_)));
    const auto& k = kernels::active();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<float>* p = params_[i];
      k.adamw_f32(p->data(), p->grad(), state_[i].m.data(), state_[i].v.data(), p->numel(),
                  static_cast<float>(lr), static_cast<float>(cfg_.beta1),
                  static_cast<float>(cfg_.beta2), static_cast<float>(cfg_.adam_eps),
                  static_cast<float>(cfg_.weight_decay), c1, c2);
    }
  }

 private:
  struct State {
    std::vector<float> m, v;
  };
  std::vector<Tensor<float>*> params_;
  TrainConfig cfg_;
  std::vector<State> state_;
  long t_ = 0;
};

// One cached training graph per distinct batch size (full batches plus the
// ragged tail). All graphs bind the same parameter tensors, so gradients
// accumulate into shared buffers regardless of which graph ran.
class TrainGraphSet {
 public:
  TrainGraphSet(const ModelConfig& model_cfg, ParamStore<float>& base, bool train_base,
                const AdapterSpec* spec, ParamStore<float>* theta, int text_len, int k_soft)
      : model_cfg_(model_cfg),
        base_(base),
        train_base_(train_base),
        spec_(spec),
        theta_(theta),
        text_len_(text_len),
        k_soft_(k_soft) {}

  struct Built {
    int batch = 0;
    Graph<float> g;
    Graph<float>::NodeId loss = -1;
  };

  Built& for_batch(int batch) {
    for (auto& b : built_) {
      if (b->batch == batch) return *b;
    }
    auto b = std::make_unique<Built>();
    b->batch = batch;
    Graph<float>& g = b->g;
    Graph<float>::NodeId soft = -1;

    std::unique_ptr<WeightHook<float>> hook;
    if (spec_ != nullptr && spec_->kind == AdapterKind::lowrank) {
      const auto targets = lowrank_target_names(model_cfg_);
      const float scale = static_cast<float>(spec_->lowrank_scale);
      hook = std::make_unique<WeightHook<float>>(
          [this, targets, scale](Graph<float>& gg, const std::string& name,
                                 Tensor<float>& storage, bool trainable) {
            auto w = gg.param(name, storage, trainable);
            if (std::find(targets.begin(), targets.end(), name) == targets.end()) return w;
            auto a = gg.param("lora." + name + ".A", find_param(*theta_, "lora." + name + ".A"), true);
            auto bb = gg.param("lora." + name + ".B", find_param(*theta_, "lora." + name + ".B"), true);
            return gg.add(w, gg.scale(gg.matmul(a, bb), scale));
          });
    } else if (spec_ != nullptr) {
      // le/pt soft-prompt subgraph: rows are (batch * K) location scalars.
      auto s_in = g.input("soft_s", {batch * k_soft_, 1});
      auto z1 = g.bias_add(g.matmul(s_in, g.param("adapter.w1", find_param(*theta_, "adapter.w1"), true)),
                           g.param("adapter.b1", find_param(*theta_, "adapter.b1"), true));
      auto act = spec_->activation == "relu" ? g.relu(z1) : g.tanh_fn(z1);
      auto out = g.bias_add(g.matmul(act, g.param("adapter.w2", find_param(*theta_, "adapter.w2"), true)),
                            g.param("adapter.b2", find_param(*theta_, "adapter.b2"), true));
      soft = g.reshape(out, {batch, k_soft_, model_cfg_.d_model});
    }

    auto logits = build_model_forward<float>(g, model_cfg_, base_, batch, text_len_, soft, k_soft_,
                                             train_base_, hook.get());
    b->loss = g.cross_entropy(logits, "targets", "mask");
    built_.push_back(std::move(b));
    return *built_.back();
  }

 private:
  ModelConfig model_cfg_;
  ParamStore<float>& base_;
  bool train_base_;
  const AdapterSpec* spec_;
  ParamStore<float>* theta_;
  int text_len_;
  int k_soft_;
  std::vector<std::unique_ptr<Built>> built_;
};

struct EncodedDataset {
  std::vector<EncodedInstance> encodings;
  int text_len = 0;
};

EncodedDataset encode_all(const TaskConfig& task, const std::vector<RetrievalInstance>& data,
                          int max_text_len) {
  if (data.empty()) throw std::invalid_argument("training dataset is empty");
  EncodedDataset out;
  out.encodings.reserve(data.size());
  for (const auto& inst : data) {
    auto enc = encode(inst, task, max_text_len);
    if (out.text_len == 0) {
      out.text_len = static_cast<int>(enc.tokens.size());
    } else if (static_cast<int>(enc.tokens.size()) != out.text_len) {
      throw std::invalid_argument("training instances must share one encoded length");
    }
    out.encodings.push_back(std::move(enc));
  }
  return out;
}

void fill_row(const EncodedInstance& enc, int k_soft, int total_len, bool answer_only,
              int* targets, std::uint8_t* mask) {
  const int text_len = static_cast<int>(enc.tokens.size());
  for (int p = 0; p < total_len; ++p) {
    const int predicted = p - k_soft + 1;  // text index this row predicts
    const bool valid = predicted >= 1 && predicted <= text_len - 1;
    targets[p] = valid ? enc.tokens[static_cast<std::size_t>(predicted)] : 0;
    mask[p] = valid && (!answer_only || predicted == enc.answer_index) ? 1 : 0;
  }
}

struct LoopResult {
  long steps = 0;
  double final_epoch_loss = 0.0;
  long long updated_scalars = 0;
  long long nonzero_grad_scalars = 0;
};

LoopResult run_training_loop(TrainGraphSet& graphs, AdamW& opt,
                             const std::vector<Tensor<float>*>& tunable,
                             const EncodedDataset& ds, const AdapterSpec* spec,
                             const TaskConfig& task, const TrainConfig& tc, int k_soft,
                             std::ostream* metrics) {
  const int n = static_cast<int>(ds.encodings.size());
  const int bs = std::min(tc.batch_size, n);
  const long batches_per_epoch = (n + bs - 1) / bs;
  const long total_steps = batches_per_epoch * tc.epochs;
  const int total_len = k_soft + ds.text_len;
  const bool answer_only = tc.loss_mask == "answer";

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  LoopResult res;
  Rng shuffle_rng(Rng::mix(tc.seed, 0x9d2c5680UL));
  long step = 0;
  bool audited = false;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    double epoch_loss = 0.0;
    long epoch_batches = 0;
    for (int start = 0; start < n; start += bs) {
      const int rows = std::min(bs, n - start);
      auto& built = graphs.for_batch(rows);

      std::vector<int> tokens(static_cast<std::size_t>(rows) * ds.text_len);
      std::vector<int> targets(static_cast<std::size_t>(rows) * total_len);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(rows) * total_len);
      std::vector<float> soft_s;
      const bool mlp_adapter = spec != nullptr && spec->kind != AdapterKind::lowrank;
      if (mlp_adapter) soft_s.resize(static_cast<std::size_t>(rows) * k_soft);
      for (int r = 0; r < rows; ++r) {
        const auto& enc = ds.encodings[static_cast<std::size_t>(order[static_cast<std::size_t>(start + r)])];
        std::copy(enc.tokens.begin(), enc.tokens.end(),
                  tokens.begin() + static_cast<std::size_t>(r) * ds.text_len);
        fill_row(enc, k_soft, total_len, answer_only,
                 targets.data() + static_cast<std::size_t>(r) * total_len,
                 mask.data() + static_cast<std::size_t>(r) * total_len);
        if (mlp_adapter) {
          // Each row's locations come from its own encoding.
          if (spec->kind == AdapterKind::le) {
            const auto loc = locations_for(*spec, enc, task.k);
            for (int c = 0; c < k_soft; ++c) {
              soft_s[static_cast<std::size_t>(r) * k_soft + c] =
                  static_cast<float>(loc.s[static_cast<std::size_t>(c)]);
            }
          } else {
            for (int c = 0; c < k_soft; ++c) {
              soft_s[static_cast<std::size_t>(r) * k_soft + c] = 1.0f;
            }
          }
        }
      }

      built.g.bind_ids("tokens", tokens);
      built.g.bind_ids("targets", targets);
      built.g.bind_mask("mask", mask);
      if (mlp_adapter) built.g.bind("soft_s", soft_s);

      opt.zero_grad();
      try {
        built.g.forward();
        built.g.backward(built.loss);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                                 e.what());
      }
      const double loss = static_cast<double>(built.g.value(built.loss).at(0));

      std::vector<std::vector<float>> before;
      if (!audited) {
        before.reserve(tunable.size());
        for (auto* p : tunable) before.push_back(p->vec());
        for (auto* p : tunable) {
          const float* gp = p->grad();
          for (std::size_t q = 0; q < p->numel(); ++q) {
            if (gp[q] != 0.0f) ++res.nonzero_grad_scalars;
          }
        }
      }

      const double lr = tc.schedule == "cosine" ? cosine_lr(tc.learning_rate, step, total_steps)
                                                : tc.learning_rate;
      opt.step(lr);

      if (!audited) {
        for (std::size_t pi = 0; pi < tunable.size(); ++pi) {
          const auto& now = tunable[pi]->vec();
          for (std::size_t q = 0; q < now.size(); ++q) {
            if (now[q] != before[pi][q]) ++res.updated_scalars;
          }
        }
        audited = true;
      }

      if (metrics) {
        nlohmann::ordered_json line;
        line["step"] = step;
        line["loss"] = loss;
        line["lr"] = lr;
        (*metrics) << line.dump() << "\n";
      }
      epoch_loss += loss;
      ++epoch_batches;
      ++step;
    }
    res.final_epoch_loss = epoch_loss / static_cast<double>(epoch_batches);
    if (metrics) {
      nlohmann::ordered_json line;
      line["epoch"] = epoch;
      line["mean_loss"] = res.final_epoch_loss;
      (*metrics) << line.dump() << "\n";
    }
  }
  res.steps = step;
  return res;
}

}  // namespace

Checkpoint pretrain(const ModelConfig& model_cfg, const TaskConfig& task_cfg,
                    const std::vector<RetrievalInstance>& data, const TrainConfig& train_cfg,
                    std::ostream* metrics) {
  model_cfg.validate();
  task_cfg.validate();
  train_cfg.validate();
  if (model_cfg.vocab_size != task_cfg.layout().vocab_size()) {
    throw std::invalid_argument("pretrain: model vocab_size != task vocabulary layout");
  }
  auto ds = encode_all(task_cfg, data, model_cfg.max_seq_len);

  Model model = Model::init(model_cfg, train_cfg.seed);
  std::vector<Tensor<float>*> tunable;
  for (auto& [name, t] : model.params()) {
    t.ensure_grad();
    tunable.push_back(&t);
  }
  TrainGraphSet graphs(model_cfg, model.params(), true, nullptr, nullptr, ds.text_len, 0);
  AdamW opt(tunable, train_cfg);
  const auto res = run_training_loop(graphs, opt, tunable, ds, nullptr, task_cfg, train_cfg, 0,
                                     metrics);

  Checkpoint ckpt;
  ckpt.meta["kind"] = "model";
  ckpt.meta["model"] = to_json(model_cfg);
  ckpt.meta["task"] = to_json(task_cfg);
  ckpt.meta["train"] = to_json(train_cfg);
  ckpt.meta["seeds"] = {{"init", train_cfg.seed}, {"data_rows", data.size()}};
  ckpt.meta["steps"] = res.steps;
  ckpt.meta["final_epoch_loss"] = res.final_epoch_loss;
  ckpt.tensors = model.params();
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& base) {
  if (base.meta.at("kind").get<std::string>() != "model") {
    throw std::invalid_argument("checkpoint is not a model checkpoint");
  }
  return Model(model_config_from_json(base.meta.at("model")), base.tensors);
}

FinetuneResult finetune(const Checkpoint& base, const AdapterSpec& spec,
                        const TaskConfig& task_cfg,
                        const std::vector<RetrievalInstance>& augmented,
                        const TrainConfig& train_cfg, std::ostream* metrics) {
  train_cfg.validate();
  task_cfg.validate();
  const ModelConfig model_cfg = model_config_from_json(base.meta.at("model"));
  model_cfg.validate();

  AdapterSpec sp = spec;
  if (sp.kind != AdapterKind::lowrank) {
    if (sp.output_dim == 0) sp.output_dim = model_cfg.d_model;
    if (sp.output_dim != model_cfg.d_model) {
      throw std::invalid_argument("finetune: adapter output_dim != model d_model");
    }
  }
  sp.validate();

  FinetuneResult result;
  result.base_hash_before = params_hash(base.tensors);
  result.expected_tunable = count_tunable(sp, model_cfg);

  ParamStore<float> base_params = base.tensors;  // frozen; bound read-only
  ParamStore<float> theta = init_adapter_params<float>(sp, model_cfg, train_cfg.seed);
  std::vector<Tensor<float>*> tunable;
  for (auto& [name, t] : theta) {
    t.ensure_grad();
    tunable.push_back(&t);
  }

  const int k_soft = sp.kind == AdapterKind::lowrank ? 0 : task_cfg.k;
  auto ds = encode_all(task_cfg, augmented, model_cfg.max_seq_len - k_soft);

  TrainGraphSet graphs(model_cfg, base_params, false, &sp, &theta, ds.text_len, k_soft);
  AdamW opt(tunable, train_cfg);
  const auto res = run_training_loop(graphs, opt, tunable, ds, &sp, task_cfg, train_cfg, k_soft,
                                     metrics);

  result.base_hash_after = params_hash(base_params);
  result.updated_scalars = res.updated_scalars;
  result.nonzero_grad_scalars = res.nonzero_grad_scalars;

  Checkpoint ckpt;
  ckpt.meta["kind"] = "adapter";
  ckpt.meta["adapter"] = to_json(sp);
  ckpt.meta["base_hash"] = result.base_hash_before;
  ckpt.meta["model"] = to_json(model_cfg);
  ckpt.meta["task"] = to_json(task_cfg);
  ckpt.meta["train"] = to_json(train_cfg);
  ckpt.meta["steps"] = res.steps;
  ckpt.meta["final_epoch_loss"] = res.final_epoch_loss;
  ckpt.meta["audit"] = {{"updated_scalars", result.updated_scalars},
                        {"nonzero_grad_scalars", result.nonzero_grad_scalars},
                        {"count_tunable", result.expected_tunable}};
  ckpt.tensors = theta;
  result.adapter_ckpt = std::move(ckpt);
  return result;
}

std::function<SlotPrediction(const RetrievalInstance&)> make_model_predictor(
    const Model& model, const TaskConfig& task, const AdapterSpec* spec,
    const ParamStore<float>* theta) {
  if (spec == nullptr) {
    auto runner = std::make_shared<InferenceRunner>(model);
    return [runner, task](const RetrievalInstance& inst) {
      return runner->predict(encode(inst, task), task.k);
    };
  }
  if (theta == nullptr) throw std::invalid_argument("make_model_predictor: adapter without params");

  if (spec->kind == AdapterKind::lowrank) {
    // Bake the rank-r deltas into a copy of the base weights.
    auto eff = std::make_shared<Model>(model.config(), [&] {
      ParamStore<float> copy;
      copy.reserve(model.params().size());
      for (const auto& [name, t] : model.params()) copy.emplace_back(name, t.clone());
      return copy;
    }());
    const float scale = static_cast<float>(spec->lowrank_scale);
    ParamStore<float>& th = const_cast<ParamStore<float>&>(*theta);
    for (const auto& target : lowrank_target_names(model.config())) {
      auto& w = find_param(eff->params(), target);
      const auto& a = find_param(th, "lora." + target + ".A");
      const auto& b = find_param(th, "lora." + target + ".B");
      const int d_in = w.dim(0), d_out = w.dim(1), r = a.dim(1);
      for (int i = 0; i < d_in; ++i) {
        for (int j = 0; j < d_out; ++j) {
          float acc = 0.0f;
          for (int p = 0; p < r; ++p) {
            acc += a.at(static_cast<std::size_t>(i) * r + p) *
                   b.at(static_cast<std::size_t>(p) * d_out + j);
          }
          w.at(static_cast<std::size_t>(i) * d_out + j) += scale * acc;
        }
      }
    }
    auto runner = std::make_shared<InferenceRunner>(*eff);
    return [eff, runner, task](const RetrievalInstance& inst) {
      return runner->predict(encode(inst, task), task.k);
    };
  }

  // le / pt: soft block built per instance from its own locations.
  AdapterSpec sp = *spec;
  SoftTokenBlock zero;
  zero.k = task.k;
  zero.vectors = Tensor<float>({task.k, model.config().d_model});
  auto runner = std::make_shared<InferenceRunner>(model, zero);
  ParamStore<float> th = *theta;
  return [runner, task, sp, th](const RetrievalInstance& inst) {
    const auto enc = encode(inst, task);
    SoftTokenBlock block;
    if (sp.kind == AdapterKind::le) {
      const auto loc = locations_for(sp, enc, task.k);
      block = adapter_forward(sp, th, &loc, task.k);
    } else {
      block = adapter_forward(sp, th, nullptr, task.k);
    }
    return runner->predict(enc, task.k, block);
  };
}

}  // namespace pblab
