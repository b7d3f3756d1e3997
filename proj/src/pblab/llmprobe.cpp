#include "pblab/llmprobe.hpp"

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pblab/promptkit.hpp"
#include "pblab/rng.hpp"
#include "pblab/util.hpp"

namespace pblab {

void EndpointConfig::validate() const {
  if (base_url.empty()) throw std::invalid_argument("probe: base_url is empty");
  if (timeout_s <= 0.0) throw std::invalid_argument("probe: timeout must be > 0");
  if (max_retries < 0) throw std::invalid_argument("probe: max_retries must be >= 0");
  if (max_inflight < 1) throw std::invalid_argument("probe: max_inflight must be >= 1");
  if (backoff_base_ms < 0 || backoff_cap_ms < backoff_base_ms) {
    throw std::invalid_argument("probe: bad backoff window");
  }
}

namespace {

bool retryable_status(int status) { return status == 429 || (status >= 500 && status < 600); }

std::string auth_token(const EndpointConfig& cfg) {
  if (cfg.auth_env.empty()) return {};
  const char* v = std::getenv(cfg.auth_env.c_str());
  return v ? std::string(v) : std::string{};
}

}  // namespace

ChatResult chat_complete(const EndpointConfig& cfg, const std::string& prompt) {
  cfg.validate();
  httplib::Client client(cfg.base_url);
  client.set_connection_timeout(std::chrono::duration<double>(cfg.timeout_s));
  client.set_read_timeout(std::chrono::duration<double>(cfg.timeout_s));
  client.set_write_timeout(std::chrono::duration<double>(cfg.timeout_s));

  httplib::Headers headers;
  const std::string token = auth_token(cfg);
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);

  nlohmann::ordered_json body;
  body["model"] = cfg.model;
  body["messages"] = nlohmann::ordered_json::array({{{"role", "user"}, {"content", prompt}}});
  body["temperature"] = cfg.temperature;
  const std::string payload = body.dump();

  Rng jitter(Rng::mix(cfg.jitter_seed, fnv1a64(prompt)));
  ChatResult result;
  const int max_attempts = cfg.max_retries + 1;
  std::string last_error;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    if (attempt > 0) {
      long delay = static_cast<long>(cfg.backoff_base_ms) << (attempt - 1);
      delay = std::min<long>(delay, cfg.backoff_cap_ms);
      delay += static_cast<long>(jitter.below(static_cast<std::uint64_t>(cfg.backoff_base_ms / 2 + 1)));
      std::this_thread::sleep_for(std::chrono::milliseconds(delay));
    }
    ++result.attempts;
    auto res = client.Post("/v1/chat/completions", headers, payload, "application/json");
    if (!res) {
      last_error = "connection failure (" + httplib::to_string(res.error()) + ")";
      continue;  // transient
    }
    result.http_status = res->status;
    if (res->status == 200) {
      try {
        const auto j = nlohmann::json::parse(res->body);
        result.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
      } catch (const std::exception& e) {
        throw std::runtime_error(std::string("chat_complete: malformed response body: ") +
                                 e.what());
      }
      return result;
    }
    if (retryable_status(res->status)) {
      last_error = "status " + std::to_string(res->status);
      continue;
    }
    throw std::runtime_error("chat_complete: non-retryable status " +
                             std::to_string(res->status));
  }
  throw std::runtime_error("chat_complete: exhausted retries after " +
                           std::to_string(result.attempts) + " attempts; last error: " +
                           last_error);
}

ParsedPrediction parse_prediction(const std::string& text, int k,
                                  const std::string& label_pattern, bool strict) {
  if (k < 1) throw std::invalid_argument("parse_prediction: k must be >= 1");
  ParsedPrediction out;
  std::vector<int> found;  // in scan order
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t at;
    if (label_pattern.empty()) {
      at = text.find('[', pos);
      if (at == std::string::npos) break;
      pos = at;
    } else {
      at = text.find(label_pattern, pos);
      if (at == std::string::npos) break;
      pos = at + label_pattern.size();
      while (pos < text.size() && text[pos] == ' ') ++pos;
      if (pos >= text.size() || text[pos] != '[') continue;
    }
    // pos sits on '['
    std::size_t digits = pos + 1;
    std::string num;
    while (digits < text.size() && std::isdigit(static_cast<unsigned char>(text[digits]))) {
      num += text[digits++];
    }
    if (digits < text.size() && text[digits] == ']' && !num.empty()) {
      found.push_back(std::stoi(num));
      pos = digits + 1;
    } else {
      pos = pos + 1;
    }
  }

  if (found.empty()) {
    out.outcome = ParseOutcome::no_match;
    return out;
  }
  if (strict) {
    for (int v : found) {
      if (v != found.front()) {
        out.outcome = ParseOutcome::conflicting;
        return out;
      }
    }
  }
  if (found.front() < 1 || found.front() > k) {
    out.outcome = ParseOutcome::out_of_range;
    return out;
  }
  out.slot = found.front();
  out.outcome = ParseOutcome::ok;
  return out;
}

std::string strategy_name(ProbeStrategy s) {
  switch (s) {
    case ProbeStrategy::zero_shot: return "zero-shot";
    case ProbeStrategy::few_shot: return "few-shot";
    case ProbeStrategy::hierarchical: return "hierarchical";
    case ProbeStrategy::hierarchical_multipass: return "hierarchical-multipass";
  }
  return "?";
}

ProbeStrategy strategy_from_name(const std::string& s) {
  if (s == "zero-shot" || s == "zero") return ProbeStrategy::zero_shot;
  if (s == "few-shot" || s == "few") return ProbeStrategy::few_shot;
  if (s == "hierarchical" || s == "hier") return ProbeStrategy::hierarchical;
  if (s == "hierarchical-multipass" || s == "multipass") {
    return ProbeStrategy::hierarchical_multipass;
  }
  throw std::invalid_argument("unknown probe strategy: " + s);
}

namespace {

struct ProbeTask {
  int row = 0;         // index into the probed slot list
  int truth_slot = 0;
  RetrievalInstance instance;
};

struct TranscriptEntry {
  int index = 0;
  int pass = 0;
  int truth_slot = 0;
  std::string prompt;
  std::string response;
  int slot = 0;
  std::string outcome;
  int attempts = 0;
  int http_status = 0;
};

std::string outcome_name(ParseOutcome o) {
  switch (o) {
    case ParseOutcome::ok: return "ok";
    case ParseOutcome::no_match: return "no_match";
    case ParseOutcome::out_of_range: return "out_of_range";
    case ParseOutcome::conflicting: return "conflicting";
  }
  return "?";
}

}  // namespace

BiasReport run_probe(const EndpointConfig& cfg, const TaskConfig& task, const ProbeOptions& opts,
                     int n_per_slot, std::uint64_t seed) {
  cfg.validate();
  task.validate();
  if (n_per_slot < 1) throw std::invalid_argument("run_probe: n_per_slot must be >= 1");

  // Same deterministic instance streams as the local probe harness.
  std::vector<ProbeTask> tasks;
  for (int c = 1; c <= task.k; ++c) {
    const std::uint64_t slot_seed = Rng::mix(seed, static_cast<std::uint64_t>(c));
    for (int j = 0; j < n_per_slot; ++j) {
      ProbeTask t;
      t.row = c - 1;
      t.truth_slot = c;
      t.instance = gen_instance(task, c, Rng::mix(slot_seed, static_cast<std::uint64_t>(j)));
      tasks.push_back(std::move(t));
    }
  }

  // Few-shot examples come from a stream disjoint from every probe instance;
  // leaks are rejected before any request goes out.
  std::vector<SolvedShot> shots;
  if (opts.strategy == ProbeStrategy::few_shot) {
    const std::uint64_t shot_seed = Rng::mix(seed, 0xfeedULL << 32);
    for (int e = 0; e < opts.few_shots; ++e) {
      const int slot =
          1 + static_cast<int>(Rng(Rng::mix(shot_seed, static_cast<std::uint64_t>(e)))
                                   .below(static_cast<std::uint64_t>(task.k)));
      shots.push_back(shot_from_instance(
          task, gen_instance(task, slot, Rng::mix(shot_seed, 1000 + static_cast<std::uint64_t>(e)))));
    }
    for (const auto& t : tasks) {
      const auto inputs = inputs_from_instance(task, t.instance);
      for (const auto& shot : shots) {
        if (shot.candidates == inputs.candidates) {
          throw std::runtime_error("run_probe: few-shot example leaks an evaluation instance");
        }
      }
    }
  }

  std::vector<int> predicted(tasks.size(), 0);
  std::vector<std::vector<TranscriptEntry>> transcripts(tasks.size());

  auto probe_one_prompt = [&](int index, int pass, const RetrievalInstance& inst,
                              const std::string& prompt) {
    TranscriptEntry entry;
    entry.index = index;
    entry.pass = pass;
    entry.truth_slot = tasks[static_cast<std::size_t>(index)].truth_slot;
    entry.prompt = prompt;
    ParsedPrediction parsed;
    try {
      const auto chat = chat_complete(cfg, prompt);
      entry.response = chat.text;
      entry.attempts = chat.attempts;
      entry.http_status = chat.http_status;
      parsed = parse_prediction(chat.text, static_cast<int>(inst.candidates.size()),
                                cfg.label_pattern, opts.strict_parse);
    } catch (const std::exception& e) {
      entry.response = std::string("<error: ") + e.what() + ">";
      parsed.outcome = ParseOutcome::no_match;
    }
    entry.slot = parsed.slot;
    entry.outcome = outcome_name(parsed.outcome);
    transcripts[static_cast<std::size_t>(index)].push_back(std::move(entry));
    return parsed.slot;
  };

  auto run_one = [&](int index) {
    const auto& t = tasks[static_cast<std::size_t>(index)];
    const auto inputs = inputs_from_instance(task, t.instance);
    switch (opts.strategy) {
      case ProbeStrategy::zero_shot:
        predicted[static_cast<std::size_t>(index)] =
            probe_one_prompt(index, 0, t.instance, build_zero_shot(inputs));
        return;
      case ProbeStrategy::few_shot:
        predicted[static_cast<std::size_t>(index)] =
            probe_one_prompt(index, 0, t.instance, build_few_shot(inputs, shots));
        return;
      case ProbeStrategy::hierarchical:
        predicted[static_cast<std::size_t>(index)] =
            probe_one_prompt(index, 0, t.instance, build_hierarchical(inputs, opts.groups));
        return;
      case ProbeStrategy::hierarchical_multipass: {
        int pass = 0;
        Predictor endpoint = [&](const RetrievalInstance& sub) {
          SlotPrediction p;
          p.slot = probe_one_prompt(index, pass++, sub,
                                    build_zero_shot(inputs_from_instance(task, sub)));
          return p;
        };
        int slot = 0;
        try {
          slot = hierarchical_infer(endpoint, t.instance, opts.groups);
        } catch (const std::exception&) {
          slot = 0;  // endpoint-level failure marks the instance invalid
        }
        predicted[static_cast<std::size_t>(index)] = slot;
        return;
      }
    }
  };

  // Bounded concurrent dispatch; aggregation order is fixed by task index.
  const int workers = std::min<int>(cfg.max_inflight, static_cast<int>(tasks.size()));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= tasks.size()) return;
        try {
          run_one(static_cast<int>(i));
        } catch (const std::exception&) {
          predicted[i] = 0;  // keep the sweep going; the row records invalid
        }
      }
    });
  }
  for (auto& th : pool) th.join();

  BiasReport rep;
  rep.k = task.k;
  rep.n_per_slot = n_per_slot;
  rep.provenance = cfg.base_url + " " + cfg.model + " " + strategy_name(opts.strategy);
  for (int c = 1; c <= task.k; ++c) rep.slots.push_back(c);
  rep.freq.assign(static_cast<std::size_t>(task.k),
                  std::vector<double>(static_cast<std::size_t>(task.k) + 1, 0.0));
  rep.softmass = rep.freq;
  rep.has_softmass = false;  // endpoints yield discrete answers only

  std::vector<int> invalid_count(static_cast<std::size_t>(task.k), 0);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const int row = tasks[i].row;
    const int slot = predicted[i];
    if (slot >= 1 && slot <= task.k) {
      rep.freq[static_cast<std::size_t>(row)][static_cast<std::size_t>(slot - 1)] += 1.0;
    } else {
      rep.freq[static_cast<std::size_t>(row)][static_cast<std::size_t>(task.k)] += 1.0;
      invalid_count[static_cast<std::size_t>(row)]++;
    }
  }
  for (int c = 1; c <= task.k; ++c) {
    auto& row = rep.freq[static_cast<std::size_t>(c - 1)];
    for (auto& v : row) v /= static_cast<double>(n_per_slot);
    rep.accuracy.push_back(row[static_cast<std::size_t>(c - 1)]);
    if (invalid_count[static_cast<std::size_t>(c - 1)] == n_per_slot) {
      rep.flagged_slots.push_back(c);
    }
    rep.mean_accuracy += rep.accuracy.back();
  }
  rep.mean_accuracy /= static_cast<double>(task.k);
  if (task.k >= 2 && rep.mean_accuracy > 0.0) {
    rep.fluctuation_pct = fluctuation(rep.accuracy);
    rep.fluctuation_defined = true;
  } else {
    rep.fluctuation_pct = 0.0;
    rep.fluctuation_defined = false;
  }

  if (!opts.transcript_path.empty()) {
    std::string out;
    for (std::size_t i = 0; i < transcripts.size(); ++i) {
      for (const auto& e : transcripts[i]) {
        nlohmann::ordered_json line;
        line["index"] = e.index;
        line["pass"] = e.pass;
        line["truth_slot"] = e.truth_slot;
        line["prompt"] = e.prompt;
        line["response"] = e.response;
        line["slot"] = e.slot;
        line["outcome"] = e.outcome;
        line["attempts"] = e.attempts;
        line["http_status"] = e.http_status;
        out += line.dump();
        out += "\n";
      }
    }
    write_text_file(opts.transcript_path, out);
  }
  return rep;
}

}  // namespace pblab
