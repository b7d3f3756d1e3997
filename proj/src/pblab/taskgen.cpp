#include "pblab/taskgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "pblab/rng.hpp"
#include "pblab/util.hpp"

namespace pblab {

std::string flavor_name(TaskFlavor f) {
  return f == TaskFlavor::key_match ? "key-match" : "session-match";
}

TaskFlavor flavor_from_name(const std::string& s) {
  if (s == "key-match" || s == "key") return TaskFlavor::key_match;
  if (s == "session-match" || s == "session") return TaskFlavor::session_match;
  throw std::invalid_argument("unknown task flavor: " + s);
}

void TaskConfig::validate() const {
  if (k < 1) throw std::invalid_argument("task: k must be >= 1");
  if (doc_len < 1) throw std::invalid_argument("task: doc_len must be >= 1");
  if (query_len < 1) throw std::invalid_argument("task: query_len must be >= 1");
  if (k_max < k) throw std::invalid_argument("task: k exceeds reserved slot-token count k_max");
  if (key_vocab < 1 || filler_vocab < 1) {
    throw std::invalid_argument("task: vocab partitions must be non-empty");
  }
}

namespace {

int task_tag(TaskFlavor f) {
  return f == TaskFlavor::key_match ? TokenLayout::kTaskKey : TokenLayout::kTaskSession;
}

int random_filler(const TokenLayout& lay, Rng& rng) {
  return lay.filler_base() + static_cast<int>(rng.below(static_cast<std::uint64_t>(lay.filler_vocab)));
}

}  // namespace

RetrievalInstance gen_instance(const TaskConfig& cfg, int truth_slot, std::uint64_t seed) {
  cfg.validate();
  if (truth_slot < 1 || truth_slot > cfg.k) {
    throw std::invalid_argument("gen_instance: truth_slot " + std::to_string(truth_slot) +
                                " out of range [1," + std::to_string(cfg.k) + "]");
  }
  const TokenLayout lay = cfg.layout();
  if (cfg.key_vocab < cfg.k) {
    throw std::invalid_argument("gen_instance: key partition too small for " +
                                std::to_string(cfg.k) + " distinct keys");
  }
  Rng rng(seed);

  const int match_tok =
      lay.key_base() + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.key_vocab)));

  RetrievalInstance inst;
  inst.truth_slot = truth_slot;
  inst.prompt_tokens.reserve(static_cast<std::size_t>(cfg.query_len));
  if (cfg.flavor == TaskFlavor::key_match) {
    // Query key first, remaining prompt positions are fillers.
    inst.prompt_tokens.push_back(match_tok);
    for (int i = 1; i < cfg.query_len; ++i) inst.prompt_tokens.push_back(random_filler(lay, rng));
  } else {
    // Session flavor repeats the shared feature across the prompt.
    for (int i = 0; i < cfg.query_len; ++i) inst.prompt_tokens.push_back(match_tok);
  }

  // Distinct keys for the distractors, all different from the match token.
  std::set<int> used{match_tok};
  inst.candidates.resize(static_cast<std::size_t>(cfg.k));
  for (int slot = 1; slot <= cfg.k; ++slot) {
    auto& doc = inst.candidates[static_cast<std::size_t>(slot - 1)];
    doc.reserve(static_cast<std::size_t>(cfg.doc_len));
    int head = match_tok;
    if (slot != truth_slot) {
      do {
        head = lay.key_base() +
               static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.key_vocab)));
      } while (used.count(head));
      used.insert(head);
    }
    doc.push_back(head);
    for (int t = 1; t < cfg.doc_len; ++t) doc.push_back(random_filler(lay, rng));
  }
  return inst;
}

std::vector<RetrievalInstance> gen_dataset(const TaskConfig& cfg,
                                           const std::vector<double>& slot_distribution, int n,
                                           std::uint64_t seed) {
  cfg.validate();
  if (n < 1) throw std::invalid_argument("gen_dataset: n must be >= 1");
  if (static_cast<int>(slot_distribution.size()) != cfg.k) {
    throw std::invalid_argument("gen_dataset: slot distribution length != k");
  }
  double total = 0.0;
  for (double p : slot_distribution) {
    if (p < 0.0) throw std::invalid_argument("gen_dataset: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("gen_dataset: slot distribution must sum to 1");
  }

  std::vector<RetrievalInstance> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // Independent per-index streams: any parallel schedule produces the same
    // dataset.
    Rng slot_rng(Rng::mix(seed, static_cast<std::uint64_t>(2 * i)));
    const double u = slot_rng.next_double();
    int slot = cfg.k;
    double acc = 0.0;
    for (int c = 1; c <= cfg.k; ++c) {
      acc += slot_distribution[static_cast<std::size_t>(c - 1)];
      if (u < acc) {
        slot = c;
        break;
      }
    }
    auto inst = gen_instance(cfg, slot, Rng::mix(seed, static_cast<std::uint64_t>(2 * i + 1)));
    inst.provenance = "gen:" + std::to_string(seed) + ":" + std::to_string(i);
    out.push_back(std::move(inst));
  }
  return out;
}

namespace {

RetrievalInstance apply_permutation(const RetrievalInstance& src, const std::vector<int>& pi,
                                    const std::string& prov) {
  const int k = static_cast<int>(src.candidates.size());
  RetrievalInstance out;
  out.prompt_tokens = src.prompt_tokens;
  out.candidates.resize(static_cast<std::size_t>(k));
  out.truth_slot = 0;
  for (int i = 0; i < k; ++i) {
    out.candidates[static_cast<std::size_t>(i)] =
        src.candidates[static_cast<std::size_t>(pi[static_cast<std::size_t>(i)])];
    if (pi[static_cast<std::size_t>(i)] == src.truth_slot - 1) out.truth_slot = i + 1;
  }
  out.provenance = src.provenance.empty() ? prov : src.provenance + "|" + prov;
  return out;
}

std::uint64_t factorial_capped(int k) {
  std::uint64_t f = 1;
  for (int i = 2; i <= k; ++i) {
    if (f > UINT64_MAX / static_cast<std::uint64_t>(i)) return UINT64_MAX;
    f *= static_cast<std::uint64_t>(i);
  }
  return f;
}

}  // namespace

std::vector<RetrievalInstance> permute_augment(const std::vector<RetrievalInstance>& dataset,
                                               int copies, PermScheme scheme, std::uint64_t seed) {
  if (copies < 1) throw std::invalid_argument("permute_augment: copies must be >= 1");
  std::vector<RetrievalInstance> out;
  out.reserve(dataset.size() * static_cast<std::size_t>(copies));
  for (std::size_t idx = 0; idx < dataset.size(); ++idx) {
    const auto& src = dataset[idx];
    const int k = static_cast<int>(src.candidates.size());
    if (scheme == PermScheme::cyclic) {
      for (int r = 0; r < copies; ++r) {
        std::vector<int> pi(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) pi[static_cast<std::size_t>(i)] = (i + r) % k;
        out.push_back(apply_permutation(src, pi, "perm:cyclic:" + std::to_string(r)));
      }
    } else {
      if (static_cast<std::uint64_t>(copies) > factorial_capped(k)) {
        throw std::invalid_argument(
            "permute_augment: requested more distinct permutations than k!");
      }
      Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(idx)));
      std::set<std::vector<int>> seen;  // deduplicated within this instance only
      int made = 0;
      while (made < copies) {
        std::vector<int> pi(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) pi[static_cast<std::size_t>(i)] = i;
        for (int i = k - 1; i > 0; --i) {
          const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
          std::swap(pi[static_cast<std::size_t>(i)], pi[static_cast<std::size_t>(j)]);
        }
        if (!seen.insert(pi).second) continue;
        out.push_back(apply_permutation(src, pi, "perm:random:" + std::to_string(made)));
        ++made;
      }
    }
  }
  return out;
}

int default_augment_copies(TaskFlavor flavor) {
  return flavor == TaskFlavor::session_match ? 5 : 3;
}

EncodedInstance encode(const RetrievalInstance& inst, const TaskConfig& cfg, int max_len) {
  cfg.validate();
  validate_instance(cfg, inst);
  const TokenLayout lay = cfg.layout();

  EncodedInstance enc;
  enc.tokens.push_back(TokenLayout::kBos);
  enc.tokens.push_back(task_tag(cfg.flavor));
  enc.tokens.insert(enc.tokens.end(), inst.prompt_tokens.begin(), inst.prompt_tokens.end());
  for (int slot = 1; slot <= cfg.k; ++slot) {
    enc.slot_offsets.push_back(static_cast<int>(enc.tokens.size()));
    enc.tokens.push_back(lay.slot_token(slot));
    const auto& doc = inst.candidates[static_cast<std::size_t>(slot - 1)];
    enc.tokens.insert(enc.tokens.end(), doc.begin(), doc.end());
  }
  enc.tokens.push_back(TokenLayout::kAns);
  enc.answer_index = static_cast<int>(enc.tokens.size());
  enc.tokens.push_back(lay.slot_token(inst.truth_slot));
  enc.tokens.push_back(TokenLayout::kEos);

  if (max_len > 0 && static_cast<int>(enc.tokens.size()) > max_len) {
    throw std::invalid_argument("encode: sequence length " + std::to_string(enc.tokens.size()) +
                                " exceeds max length " + std::to_string(max_len));
  }
  return enc;
}

RetrievalInstance decode(const std::vector<int>& tokens, const TaskConfig& cfg) {
  cfg.validate();
  const TokenLayout lay = cfg.layout();
  std::size_t pos = 0;
  auto need = [&](int expect, const char* what) {
    if (pos >= tokens.size() || tokens[pos] != expect) {
      throw std::invalid_argument(std::string("decode: malformed sequence, expected ") + what);
    }
    ++pos;
  };
  need(TokenLayout::kBos, "BOS");
  need(task_tag(cfg.flavor), "task tag");
  RetrievalInstance inst;
  for (int i = 0; i < cfg.query_len; ++i) {
    if (pos >= tokens.size()) throw std::invalid_argument("decode: truncated prompt");
    inst.prompt_tokens.push_back(tokens[pos++]);
  }
  inst.candidates.resize(static_cast<std::size_t>(cfg.k));
  for (int slot = 1; slot <= cfg.k; ++slot) {
    need(lay.slot_token(slot), "slot marker");
    auto& doc = inst.candidates[static_cast<std::size_t>(slot - 1)];
    for (int t = 0; t < cfg.doc_len; ++t) {
      if (pos >= tokens.size()) throw std::invalid_argument("decode: truncated candidate");
      doc.push_back(tokens[pos++]);
    }
  }
  need(TokenLayout::kAns, "ANS");
  if (pos >= tokens.size() || !lay.is_slot(tokens[pos])) {
    throw std::invalid_argument("decode: missing answer slot token");
  }
  inst.truth_slot = tokens[pos] - TokenLayout::kReserved + 1;
  ++pos;
  need(TokenLayout::kEos, "EOS");
  if (pos != tokens.size()) throw std::invalid_argument("decode: trailing tokens");
  return inst;
}

int query_match_token(const TaskConfig& cfg, const RetrievalInstance& inst) {
  const TokenLayout lay = cfg.layout();
  for (int tok : inst.prompt_tokens) {
    if (lay.is_key(tok)) return tok;
  }
  throw std::invalid_argument("query_match_token: prompt carries no key-partition token");
}

bool matches_query(const TaskConfig& cfg, const RetrievalInstance& inst, int slot) {
  if (slot < 1 || slot > static_cast<int>(inst.candidates.size())) return false;
  const int tok = query_match_token(cfg, inst);
  const auto& doc = inst.candidates[static_cast<std::size_t>(slot - 1)];
  return std::find(doc.begin(), doc.end(), tok) != doc.end();
}

int scan_truth_slot(const TaskConfig& cfg, const RetrievalInstance& inst) {
  int found = 0;
  for (int slot = 1; slot <= static_cast<int>(inst.candidates.size()); ++slot) {
    if (matches_query(cfg, inst, slot)) {
      if (found != 0) throw std::runtime_error("scan_truth_slot: multiple matching candidates");
      found = slot;
    }
  }
  if (found == 0) throw std::runtime_error("scan_truth_slot: no matching candidate");
  return found;
}

void validate_instance(const TaskConfig& cfg, const RetrievalInstance& inst) {
  if (static_cast<int>(inst.candidates.size()) != cfg.k) {
    throw std::invalid_argument("instance has " + std::to_string(inst.candidates.size()) +
                                " candidates, config expects " + std::to_string(cfg.k));
  }
  if (static_cast<int>(inst.prompt_tokens.size()) != cfg.query_len) {
    throw std::invalid_argument("instance prompt length != query_len");
  }
  for (const auto& doc : inst.candidates) {
    if (static_cast<int>(doc.size()) != cfg.doc_len) {
      throw std::invalid_argument("candidate length != doc_len");
    }
  }
  if (inst.truth_slot < 1 || inst.truth_slot > cfg.k) {
    throw std::invalid_argument("instance truth_slot out of range");
  }
}

std::vector<double> biased_slot_distribution(int k, int favored_slot, double p) {
  if (k < 1 || favored_slot < 1 || favored_slot > k) {
    throw std::invalid_argument("biased_slot_distribution: bad slot");
  }
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("biased_slot_distribution: bad probability");
  std::vector<double> dist(static_cast<std::size_t>(k), k > 1 ? (1.0 - p) / (k - 1) : 0.0);
  dist[static_cast<std::size_t>(favored_slot - 1)] = k > 1 ? p : 1.0;
  return dist;
}

void save_dataset(const std::filesystem::path& path, const TaskConfig& cfg,
                  const std::vector<RetrievalInstance>& instances) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_dataset: cannot open " + path.string());
  for (const auto& inst : instances) {
    nlohmann::ordered_json rec;
    rec["flavor"] = flavor_name(cfg.flavor);
    rec["k"] = cfg.k;
    rec["prompt"] = inst.prompt_tokens;
    rec["cands"] = inst.candidates;
    rec["truth"] = inst.truth_slot;
    rec["prov"] = inst.provenance;
    out << rec.dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_dataset: write failed for " + path.string());
}

std::vector<RetrievalInstance> load_dataset(const std::filesystem::path& path,
                                            const TaskConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset: cannot open " + path.string());
  std::vector<RetrievalInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_dataset: bad record at line " + std::to_string(lineno) +
                               ": " + e.what());
    }
    RetrievalInstance inst;
    inst.prompt_tokens = rec.at("prompt").get<std::vector<int>>();
    inst.candidates = rec.at("cands").get<std::vector<std::vector<int>>>();
    inst.truth_slot = rec.at("truth").get<int>();
    inst.provenance = rec.value("prov", std::string{});
    if (rec.at("flavor").get<std::string>() != flavor_name(cfg.flavor)) {
      throw std::runtime_error("load_dataset: flavor mismatch at line " + std::to_string(lineno));
    }
    validate_instance(cfg, inst);
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace pblab
