#include "pblab/runconfig.hpp"

#include <map>
#include <set>
#include <stdexcept>

#include "pblab/rng.hpp"
#include "pblab/util.hpp"

namespace pblab {

namespace {

class IniReader {
 public:
  explicit IniReader(const std::string& text) {
    std::string section;
    std::size_t lineno = 0;
    for (const auto& raw : split(text, '\n')) {
      ++lineno;
      std::string line = raw;
      const auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') {
          throw std::invalid_argument("config line " + std::to_string(lineno) +
                                      ": unterminated section header");
        }
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": expected key = value");
      }
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty()) {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
      }
      values_[section + "." + key] = value;
    }
  }

  bool has(const std::string& sec, const std::string& key) const {
    return values_.count(sec + "." + key) > 0;
  }

  std::string str(const std::string& sec, const std::string& key, const std::string& def) {
    consumed_.insert(sec + "." + key);
    auto it = values_.find(sec + "." + key);
    return it == values_.end() ? def : it->second;
  }

  long long integer(const std::string& sec, const std::string& key, long long def) {
    const std::string s = str(sec, key, std::to_string(def));
    try {
      std::size_t used = 0;
      const long long v = std::stoll(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config " + sec + "." + key + ": not an integer: '" + s + "'");
    }
  }

  double real(const std::string& sec, const std::string& key, double def) {
    const std::string s = str(sec, key, format_double(def));
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw std::invalid_argument("config " + sec + "." + key + ": not a number: '" + s + "'");
    }
  }

  void reject_unknown() const {
    for (const auto& [key, value] : values_) {
      if (!consumed_.count(key)) {
        throw std::invalid_argument("config: unknown key '" + key + "'");
      }
    }
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

std::vector<int> parse_slot_list(const std::string& s) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  for (const auto& part : split(s, ',')) {
    const std::string p = trim(part);
    try {
      out.push_back(std::stoi(p));
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad slot list entry '" + p + "'");
    }
  }
  return out;
}

TrainConfig read_train(IniReader& ini, const std::string& sec, const TrainConfig& defaults) {
  TrainConfig tc = defaults;
  tc.learning_rate = ini.real(sec, "learning_rate", defaults.learning_rate);
  tc.schedule = ini.str(sec, "schedule", defaults.schedule);
  tc.epochs = static_cast<int>(ini.integer(sec, "epochs", defaults.epochs));
  tc.batch_size = static_cast<int>(ini.integer(sec, "batch_size", defaults.batch_size));
  tc.loss_mask = ini.str(sec, "loss_mask", defaults.loss_mask);
  tc.weight_decay = ini.real(sec, "weight_decay", defaults.weight_decay);
  tc.beta1 = ini.real(sec, "beta1", defaults.beta1);
  tc.beta2 = ini.real(sec, "beta2", defaults.beta2);
  tc.adam_eps = ini.real(sec, "adam_eps", defaults.adam_eps);
  return tc;
}

}  // namespace

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw std::invalid_argument("config file not found: " + path.string());
  }
  IniReader ini(read_text_file(path));
  RunConfig rc;

  rc.run_id = ini.str("run", "run_id", rc.run_id);
  rc.master_seed = static_cast<std::uint64_t>(ini.integer("run", "master_seed",
                                                          static_cast<long long>(rc.master_seed)));

  rc.task.k = static_cast<int>(ini.integer("task", "k", rc.task.k));
  rc.task.doc_len = static_cast<int>(ini.integer("task", "doc_len", rc.task.doc_len));
  rc.task.query_len = static_cast<int>(ini.integer("task", "query_len", rc.task.query_len));
  rc.task.flavor = flavor_from_name(ini.str("task", "flavor", flavor_name(rc.task.flavor)));
  rc.task.key_vocab = static_cast<int>(ini.integer("task", "key_vocab", rc.task.key_vocab));
  rc.task.filler_vocab =
      static_cast<int>(ini.integer("task", "filler_vocab", rc.task.filler_vocab));
  rc.task.k_max = static_cast<int>(ini.integer("task", "k_max", rc.task.k_max));
  rc.n_pretrain = static_cast<int>(ini.integer("task", "n_pretrain", rc.n_pretrain));
  rc.n_finetune = static_cast<int>(ini.integer("task", "n_finetune", rc.n_finetune));
  rc.bias_slot = static_cast<int>(ini.integer("task", "bias_slot", rc.bias_slot));
  rc.bias_p = ini.real("task", "bias_p", rc.bias_p);

  rc.model.d_model = static_cast<int>(ini.integer("model", "d_model", rc.model.d_model));
  rc.model.n_layers = static_cast<int>(ini.integer("model", "n_layers", rc.model.n_layers));
  rc.model.n_heads = static_cast<int>(ini.integer("model", "n_heads", rc.model.n_heads));
  rc.model.max_seq_len =
      static_cast<int>(ini.integer("model", "max_seq_len", rc.model.max_seq_len));
  rc.model.vocab_size = rc.task.layout().vocab_size();
  rc.model.k_max = rc.task.k_max;

  rc.train = read_train(ini, "train", rc.train);
  rc.train.seed = rc.master_seed;
  TrainConfig ft_defaults = rc.train;
  rc.finetune_train = read_train(ini, "finetune", ft_defaults);
  rc.finetune_train.seed = Rng::mix(rc.master_seed, 0xf17eULL);
  rc.augment_m = static_cast<int>(ini.integer("finetune", "m", rc.augment_m));
  const std::string scheme = ini.str("finetune", "scheme", "cyclic");
  if (scheme == "cyclic") {
    rc.augment_scheme = PermScheme::cyclic;
  } else if (scheme == "random") {
    rc.augment_scheme = PermScheme::random;
  } else {
    throw std::invalid_argument("config finetune.scheme: unknown scheme '" + scheme + "'");
  }

  rc.adapter.kind = adapter_kind_from_name(ini.str("adapter", "kind", "le"));
  rc.adapter.hidden_dim =
      static_cast<int>(ini.integer("adapter", "hidden_dim", rc.adapter.hidden_dim));
  rc.adapter.activation = ini.str("adapter", "activation", rc.adapter.activation);
  rc.adapter.location_basis = ini.str("adapter", "location_basis", rc.adapter.location_basis);
  rc.adapter.rank = static_cast<int>(ini.integer("adapter", "rank", rc.adapter.rank));
  const double alpha = ini.real("adapter", "lowrank_alpha", 16.0);
  rc.adapter.lowrank_scale = alpha / static_cast<double>(rc.adapter.rank);
  rc.adapter.output_dim = rc.model.d_model;

  rc.eval_n_per_slot = static_cast<int>(ini.integer("eval", "n_per_slot", rc.eval_n_per_slot));
  rc.eval_slots = parse_slot_list(ini.str("eval", "slots", ""));
  rc.eval_seed = static_cast<std::uint64_t>(ini.integer("eval", "seed",
                                                        static_cast<long long>(rc.eval_seed)));

  rc.probe.base_url = ini.str("probe", "base_url", "");
  rc.probe.model = ini.str("probe", "model", "");
  rc.probe.auth_env = ini.str("probe", "auth_env", rc.probe.auth_env);
  rc.probe.timeout_s = ini.real("probe", "timeout_s", rc.probe.timeout_s);
  rc.probe.max_retries = static_cast<int>(ini.integer("probe", "max_retries", rc.probe.max_retries));
  rc.probe.max_inflight =
      static_cast<int>(ini.integer("probe", "max_inflight", rc.probe.max_inflight));
  rc.probe.temperature = ini.real("probe", "temperature", rc.probe.temperature);
  const std::string default_label =
      rc.task.flavor == TaskFlavor::session_match ? "Potential Product" : "Potential Paper";
  rc.probe.label_pattern = ini.str("probe", "label_pattern", default_label);
  rc.probe.backoff_base_ms =
      static_cast<int>(ini.integer("probe", "backoff_base_ms", rc.probe.backoff_base_ms));
  rc.probe.backoff_cap_ms =
      static_cast<int>(ini.integer("probe", "backoff_cap_ms", rc.probe.backoff_cap_ms));
  rc.probe.jitter_seed = rc.master_seed;
  rc.probe_opts.strategy = strategy_from_name(ini.str("probe", "strategy", "zero-shot"));
  rc.probe_opts.few_shots = static_cast<int>(ini.integer("probe", "few_shots", 3));
  rc.probe_opts.groups = static_cast<int>(ini.integer("probe", "groups", 5));
  rc.probe_opts.strict_parse = ini.integer("probe", "strict_parse", 0) != 0;
  rc.probe_n_per_slot = static_cast<int>(ini.integer("probe", "n_per_slot", rc.probe_n_per_slot));

  rc.out_dir = ini.str("paths", "out_dir", rc.out_dir.string());

  ini.reject_unknown();
  rc.validate();
  return rc;
}

void RunConfig::validate() const {
  task.validate();
  model.validate();
  train.validate();
  finetune_train.validate();
  if (model.vocab_size != task.layout().vocab_size()) {
    throw std::invalid_argument("config: model vocabulary does not match the task layout");
  }
  if (n_pretrain < 1 || n_finetune < 1) {
    throw std::invalid_argument("config: dataset sizes must be >= 1");
  }
  if (bias_slot < 1 || bias_slot > task.k) {
    throw std::invalid_argument("config: bias_slot out of range");
  }
  if (bias_p < 0.0 || bias_p > 1.0) throw std::invalid_argument("config: bias_p out of range");
  if (eval_n_per_slot < 1) throw std::invalid_argument("config: eval n_per_slot must be >= 1");
  for (int s : eval_slots) {
    if (s < 1 || s > task.k) throw std::invalid_argument("config: eval slot out of range");
  }
  if (augment_m < 0) throw std::invalid_argument("config: finetune.m must be >= 0");
  const int needed = static_cast<int>(encode(gen_instance(task, 1, 0), task).tokens.size());
  const int k_soft = adapter.kind == AdapterKind::lowrank ? 0 : task.k;
  if (needed + k_soft > model.max_seq_len) {
    throw std::invalid_argument("config: max_seq_len " + std::to_string(model.max_seq_len) +
                                " too small for encoded length " + std::to_string(needed) +
                                " plus " + std::to_string(k_soft) + " soft tokens");
  }
}

}  // namespace pblab
