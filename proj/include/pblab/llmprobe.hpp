#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pblab/bias_eval.hpp"
#include "pblab/taskgen.hpp"

namespace pblab {

struct EndpointConfig {
  std::string base_url;  // scheme://host[:port]
  std::string model;
  std::string auth_env = "PBLAB_API_KEY";  // environment variable holding the bearer token
  double timeout_s = 30.0;
  int max_retries = 3;     // retries after the first attempt
  int max_inflight = 4;
  double temperature = 0.0;
  std::string label_pattern = "Potential Product";  // prefix before the bracketed answer
  int backoff_base_ms = 250;
  int backoff_cap_ms = 4000;
  std::uint64_t jitter_seed = 0;

  void validate() const;
};

struct ChatResult {
  std::string text;
  int attempts = 0;
  int http_status = 0;
};

// One chat-completion round trip. Retries transient failures (429, 5xx,
// connection errors) with exponential backoff plus jitter; other 4xx codes
// and malformed bodies fail immediately.
ChatResult chat_complete(const EndpointConfig& cfg, const std::string& prompt);

enum class ParseOutcome { ok, no_match, out_of_range, conflicting };

struct ParsedPrediction {
  int slot = 0;  // 0 when invalid
  ParseOutcome outcome = ParseOutcome::no_match;
};

// First occurrence of the label pattern followed by a bracketed integer.
// Strict mode rejects answers naming more than one distinct label.
ParsedPrediction parse_prediction(const std::string& text, int k,
                                  const std::string& label_pattern, bool strict = false);

enum class ProbeStrategy { zero_shot, few_shot, hierarchical, hierarchical_multipass };

std::string strategy_name(ProbeStrategy s);
ProbeStrategy strategy_from_name(const std::string& s);

struct ProbeOptions {
  ProbeStrategy strategy = ProbeStrategy::zero_shot;
  int few_shots = 3;
  int groups = 5;
  bool strict_parse = false;
  std::filesystem::path transcript_path;  // empty disables the transcript
};

// Sweeps truth slots against a live endpoint: renders prompts per the
// strategy, dispatches with bounded concurrency, parses the answers, and
// aggregates deterministically. Failures past retries count as invalid.
BiasReport run_probe(const EndpointConfig& cfg, const TaskConfig& task, const ProbeOptions& opts,
                     int n_per_slot, std::uint64_t seed);

}  // namespace pblab
