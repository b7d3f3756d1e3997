#include "pblab/bias_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "pblab/rng.hpp"
#include "pblab/util.hpp"

namespace pblab {

double fluctuation(const std::vector<double>& accs) {
  if (accs.size() < 2) throw std::invalid_argument("fluctuation: need at least two accuracies");
  double mean = 0.0;
  for (double a : accs) mean += a;
  mean /= static_cast<double>(accs.size());
  if (mean <= 0.0) throw std::invalid_argument("fluctuation: undefined for zero mean");
  double ss = 0.0;
  for (double a : accs) ss += (a - mean) * (a - mean);
  const double sample_std = std::sqrt(ss / static_cast<double>(accs.size() - 1));
  return 100.0 * sample_std / mean;
}

BiasReport probe_positions(const Predictor& predictor, const TaskConfig& cfg, int n_per_slot,
                           std::uint64_t seed, const std::vector<int>* slot_subset,
                           const std::string& provenance) {
  cfg.validate();
  if (n_per_slot < 1) throw std::invalid_argument("probe_positions: n_per_slot must be >= 1");

  BiasReport rep;
  rep.k = cfg.k;
  rep.n_per_slot = n_per_slot;
  rep.provenance = provenance;
  if (slot_subset != nullptr) {
    if (slot_subset->empty()) throw std::invalid_argument("probe_positions: empty slot subset");
    std::set<int> seen;
    for (int c : *slot_subset) {
      if (c < 1 || c > cfg.k) throw std::invalid_argument("probe_positions: subset slot out of range");
      if (!seen.insert(c).second) throw std::invalid_argument("probe_positions: duplicate subset slot");
    }
    rep.slots = *slot_subset;
  } else {
    for (int c = 1; c <= cfg.k; ++c) rep.slots.push_back(c);
  }

  const std::size_t rows = rep.slots.size();
  rep.freq.assign(rows, std::vector<double>(static_cast<std::size_t>(cfg.k) + 1, 0.0));
  rep.softmass.assign(rows, std::vector<double>(static_cast<std::size_t>(cfg.k) + 1, 0.0));
  bool saw_dist = true;

  for (std::size_t ri = 0; ri < rows; ++ri) {
    const int c = rep.slots[ri];
    const std::uint64_t slot_seed = Rng::mix(seed, static_cast<std::uint64_t>(c));
    int invalid = 0;
    for (int j = 0; j < n_per_slot; ++j) {
      const auto inst = gen_instance(cfg, c, Rng::mix(slot_seed, static_cast<std::uint64_t>(j)));
      SlotPrediction pred;
      try {
        pred = predictor(inst);
      } catch (const std::exception&) {
        pred.slot = 0;  // predictor failure counts as invalid
      }
      if (pred.slot >= 1 && pred.slot <= cfg.k) {
        rep.freq[ri][static_cast<std::size_t>(pred.slot - 1)] += 1.0;
      } else {
        rep.freq[ri][static_cast<std::size_t>(cfg.k)] += 1.0;
        ++invalid;
      }
      if (pred.dist.size() == static_cast<std::size_t>(cfg.k)) {
        for (int i = 0; i < cfg.k; ++i) rep.softmass[ri][static_cast<std::size_t>(i)] += pred.dist[static_cast<std::size_t>(i)];
      } else {
        saw_dist = false;
      }
    }
    for (auto& v : rep.freq[ri]) v /= static_cast<double>(n_per_slot);
    for (auto& v : rep.softmass[ri]) v /= static_cast<double>(n_per_slot);
    if (invalid == n_per_slot) rep.flagged_slots.push_back(c);
    rep.accuracy.push_back(rep.freq[ri][static_cast<std::size_t>(c - 1)]);
  }
  rep.has_softmass = saw_dist;
  if (!rep.has_softmass) {
    rep.softmass.assign(rows, std::vector<double>(static_cast<std::size_t>(cfg.k) + 1, 0.0));
  }

  for (double a : rep.accuracy) rep.mean_accuracy += a;
  rep.mean_accuracy /= static_cast<double>(rows);
  if (rows >= 2 && rep.mean_accuracy > 0.0) {
    rep.fluctuation_pct = fluctuation(rep.accuracy);
    rep.fluctuation_defined = true;
  } else {
    rep.fluctuation_pct = 0.0;
    rep.fluctuation_defined = false;
  }
  return rep;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out += ch;
  }
  out += "\"";
  return out;
}

void write_matrix_csv(const std::filesystem::path& path, const BiasReport& rep,
                      const std::vector<std::vector<double>>& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("render_report: cannot write " + path.string());
  out << "truth_slot";
  for (int i = 1; i <= rep.k; ++i) out << ",pred_" << i;
  out << ",invalid\n";
  for (std::size_t ri = 0; ri < rep.slots.size(); ++ri) {
    out << rep.slots[ri];
    for (const double v : m[ri]) out << "," << format_double(v);
    out << "\n";
  }
  if (!out) throw std::runtime_error("render_report: write failed for " + path.string());
}

}  // namespace

void render_report(const BiasReport& report, const std::filesystem::path& dir,
                   const std::string& run_id) {
  if (!std::filesystem::exists(dir) || !std::filesystem::is_directory(dir)) {
    throw std::runtime_error("render_report: not a writable directory: " + dir.string());
  }
  write_matrix_csv(dir / (run_id + "_matrix.csv"), report, report.freq);
  if (report.has_softmass) {
    write_matrix_csv(dir / (run_id + "_softmass.csv"), report, report.softmass);
  }

  {
    const auto path = dir / (run_id + "_summary.csv");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("render_report: cannot write " + path.string());
    out << "slot,accuracy\n";
    for (std::size_t ri = 0; ri < report.slots.size(); ++ri) {
      out << report.slots[ri] << "," << format_double(report.accuracy[ri]) << "\n";
    }
    out << "mean," << format_double(report.mean_accuracy) << "\n";
    out << "fluctuation_pct,"
        << (report.fluctuation_defined ? format_double(report.fluctuation_pct) : "undefined")
        << "\n";
    if (!out) throw std::runtime_error("render_report: write failed for " + path.string());
  }

  nlohmann::ordered_json j;
  j["k"] = report.k;
  j["n_per_slot"] = report.n_per_slot;
  j["slots"] = report.slots;
  j["freq"] = report.freq;
  j["softmass"] = report.softmass;
  j["has_softmass"] = report.has_softmass;
  j["accuracy"] = report.accuracy;
  j["mean_accuracy"] = report.mean_accuracy;
  j["fluctuation_pct"] = report.fluctuation_pct;
  j["fluctuation_defined"] = report.fluctuation_defined;
  j["flagged_slots"] = report.flagged_slots;
  j["provenance"] = report.provenance;
  write_text_file(dir / (run_id + "_report.json"), j.dump(2) + "\n");
}

BiasReport parse_report(const std::filesystem::path& dir, const std::string& run_id) {
  const auto path = dir / (run_id + "_report.json");
  const auto j = nlohmann::json::parse(read_text_file(path));
  BiasReport rep;
  rep.k = j.at("k").get<int>();
  rep.n_per_slot = j.at("n_per_slot").get<int>();
  rep.slots = j.at("slots").get<std::vector<int>>();
  rep.freq = j.at("freq").get<std::vector<std::vector<double>>>();
  rep.softmass = j.at("softmass").get<std::vector<std::vector<double>>>();
  rep.has_softmass = j.at("has_softmass").get<bool>();
  rep.accuracy = j.at("accuracy").get<std::vector<double>>();
  rep.mean_accuracy = j.at("mean_accuracy").get<double>();
  rep.fluctuation_pct = j.at("fluctuation_pct").get<double>();
  rep.fluctuation_defined = j.at("fluctuation_defined").get<bool>();
  rep.flagged_slots = j.at("flagged_slots").get<std::vector<int>>();
  rep.provenance = j.at("provenance").get<std::string>();
  return rep;
}

}  // namespace pblab
