#pragma once

#include <json.hpp>

#include "pblab/adapters.hpp"
#include "pblab/model.hpp"
#include "pblab/taskgen.hpp"
#include "pblab/trainer_config.hpp"

namespace pblab {

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},       {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"k_max", c.k_max},
          {"pos_scheme", c.pos_scheme}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.k_max = j.at("k_max").get<int>();
  c.pos_scheme = j.at("pos_scheme").get<std::string>();
  return c;
}

inline nlohmann::ordered_json to_json(const TaskConfig& c) {
  return {{"k", c.k},
          {"doc_len", c.doc_len},
          {"query_len", c.query_len},
          {"flavor", flavor_name(c.flavor)},
          {"key_vocab", c.key_vocab},
          {"filler_vocab", c.filler_vocab},
          {"k_max", c.k_max}};
}

inline TaskConfig task_config_from_json(const nlohmann::json& j) {
  TaskConfig c;
  c.k = j.at("k").get<int>();
  c.doc_len = j.at("doc_len").get<int>();
  c.query_len = j.at("query_len").get<int>();
  c.flavor = flavor_from_name(j.at("flavor").get<std::string>());
  c.key_vocab = j.at("key_vocab").get<int>();
  c.filler_vocab = j.at("filler_vocab").get<int>();
  c.k_max = j.at("k_max").get<int>();
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"schedule", c.schedule},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"precision", c.precision},
          {"loss_mask", c.loss_mask},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.schedule = j.at("schedule").get<std::string>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.precision = j.at("precision").get<std::string>();
  c.loss_mask = j.at("loss_mask").get<std::string>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  return c;
}

inline nlohmann::ordered_json to_json(const AdapterSpec& s) {
  return {{"kind", adapter_kind_name(s.kind)},
          {"input_dim", s.input_dim},
          {"hidden_dim", s.hidden_dim},
          {"output_dim", s.output_dim},
          {"activation", s.activation},
          {"rank", s.rank},
          {"lowrank_scale", s.lowrank_scale},
          {"location_basis", s.location_basis}};
}

inline AdapterSpec adapter_spec_from_json(const nlohmann::json& j) {
  AdapterSpec s;
  s.kind = adapter_kind_from_name(j.at("kind").get<std::string>());
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden_dim = j.at("hidden_dim").get<int>();
  s.output_dim = j.at("output_dim").get<int>();
  s.activation = j.at("activation").get<std::string>();
  s.rank = j.at("rank").get<int>();
  s.lowrank_scale = j.at("lowrank_scale").get<double>();
  s.location_basis = j.at("location_basis").get<std::string>();
  return s;
}

}  // namespace pblab
