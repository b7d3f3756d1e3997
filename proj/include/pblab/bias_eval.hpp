#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pblab/model.hpp"
#include "pblab/taskgen.hpp"

namespace pblab {

using Predictor = std::function<SlotPrediction(const RetrievalInstance&)>;

// Predicted-position matrix for a slot sweep. Rows follow `slots` (the probed
// truth positions); columns are the K candidate slots plus a trailing
// invalid/unparsable column. Every row sums to 1.
struct BiasReport {
  int k = 0;
  int n_per_slot = 0;
  std::vector<int> slots;
  std::vector<std::vector<double>> freq;      // argmax frequencies, rows x (k+1)
  std::vector<std::vector<double>> softmass;  // restricted-softmax mass (model probes)
  bool has_softmass = false;
  std::vector<double> accuracy;               // diagonal of freq per probed slot
  double mean_accuracy = 0.0;
  double fluctuation_pct = 0.0;
  bool fluctuation_defined = true;            // false when mean accuracy is zero
  std::vector<int> flagged_slots;             // slots whose predictions were all invalid
  std::string provenance;
};

// 100 * sample standard deviation / mean (Bessel-corrected).
double fluctuation(const std::vector<double>& accs);

// Sweeps the ground-truth slot, generating n_per_slot fresh instances per
// probed position from a deterministic stream. Predictor exceptions count as
// invalid predictions.
BiasReport probe_positions(const Predictor& predictor, const TaskConfig& cfg, int n_per_slot,
                           std::uint64_t seed, const std::vector<int>* slot_subset = nullptr,
                           const std::string& provenance = "");

// Writes <run_id>_matrix.csv, <run_id>_summary.csv, <run_id>_report.json and,
// for model probes, <run_id>_softmass.csv.
void render_report(const BiasReport& report, const std::filesystem::path& dir,
                   const std::string& run_id);
BiasReport parse_report(const std::filesystem::path& dir, const std::string& run_id);

}  // namespace pblab
