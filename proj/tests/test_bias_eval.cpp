#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "pblab/bias_eval.hpp"
#include "pblab/rng.hpp"
#include "pblab/util.hpp"

using namespace pblab;

namespace {

TaskConfig probe_cfg(int k) {
  TaskConfig t;
  t.k = k;
  t.doc_len = 2;
  t.query_len = 1;
  t.key_vocab = 32;
  t.filler_vocab = 16;
  t.k_max = 8;
  return t;
}

Predictor oracle() {
  return [](const RetrievalInstance& inst) {
    SlotPrediction p;
    p.slot = inst.truth_slot;
    return p;
  };
}

Predictor constant_slot(int slot) {
  return [slot](const RetrievalInstance&) {
    SlotPrediction p;
    p.slot = slot;
    return p;
  };
}

}  // namespace

TEST_CASE("fluctuation reproduces the published sweep values") {
  // Accuracy columns and their fluctuation values, matched only with the
  // Bessel-corrected sample standard deviation.
  CHECK(fluctuation({0.329, 0.249, 0.211, 0.205, 0.171, 0.341}) ==
        doctest::Approx(27.78).scale(1).epsilon(0.002));
  CHECK(fluctuation({0.855, 0.083, 0.211, 0.205, 0.171, 0.341}) == doctest::Approx(89.76).scale(1).epsilon(0.002));
  CHECK(fluctuation({0.016, 0.112, 0.147, 0.168, 0.051, 0.022}) == doctest::Approx(75.97).scale(1).epsilon(0.002));
  CHECK(fluctuation({0.257, 0.208, 0.119, 0.166, 0.096, 0.104}) == doctest::Approx(40.58).scale(1).epsilon(0.002));
  CHECK(fluctuation({0.832, 0.714, 0.708, 0.723, 0.715, 0.736}) == doctest::Approx(6.38).scale(1).epsilon(0.002));
}

TEST_CASE("fluctuation basics") {
  CHECK(fluctuation({0.5, 0.5, 0.5, 0.5, 0.5, 0.5}) == 0.0);
  CHECK_THROWS_AS((void)fluctuation({0.5}), std::invalid_argument);
  CHECK_THROWS_AS((void)fluctuation({0.0, 0.0}), std::invalid_argument);

  // Scale invariance and permutation invariance.
  const std::vector<double> accs{0.3, 0.1, 0.6, 0.2};
  std::vector<double> scaled;
  for (double a : accs) scaled.push_back(3.7 * a);
  CHECK(fluctuation(scaled) == doctest::Approx(fluctuation(accs)).epsilon(1e-12));
  CHECK(fluctuation({0.6, 0.2, 0.3, 0.1}) == doctest::Approx(fluctuation(accs)).epsilon(1e-12));
}

TEST_CASE("oracle predictor yields the identity matrix and zero fluctuation") {
  auto cfg = probe_cfg(5);
  const auto rep = probe_positions(oracle(), cfg, 13, 42);
  CHECK(rep.mean_accuracy == doctest::Approx(1.0));
  CHECK(rep.fluctuation_pct == doctest::Approx(0.0));
  for (std::size_t ri = 0; ri < rep.slots.size(); ++ri) {
    for (int i = 0; i <= cfg.k; ++i) {
      const double expect = i == rep.slots[ri] - 1 ? 1.0 : 0.0;
      CHECK(rep.freq[ri][static_cast<std::size_t>(i)] == doctest::Approx(expect));
    }
  }
  CHECK(rep.flagged_slots.empty());
}

TEST_CASE("constant slot-1 predictor on K=6 gives fluctuation 244.95") {
  auto cfg = probe_cfg(6);
  const auto rep = probe_positions(constant_slot(1), cfg, 10, 7);
  CHECK(rep.accuracy[0] == doctest::Approx(1.0));
  for (std::size_t ri = 1; ri < rep.accuracy.size(); ++ri) CHECK(rep.accuracy[ri] == 0.0);
  CHECK(rep.mean_accuracy == doctest::Approx(1.0 / 6).epsilon(1e-12));
  CHECK(std::abs(rep.fluctuation_pct - 244.95) < 0.01);
}

TEST_CASE("rows always sum to one, including for erratic predictors") {
  auto cfg = probe_cfg(4);
  Rng rng(3);
  Predictor erratic = [&rng, &cfg](const RetrievalInstance&) {
    SlotPrediction p;
    const auto r = rng.below(6);
    if (r == 5) throw std::runtime_error("flaky");  // exception counts invalid
    p.slot = static_cast<int>(r);                   // 0 is invalid by value
    (void)cfg;
    return p;
  };
  const auto rep = probe_positions(erratic, cfg, 50, 11);
  for (const auto& row : rep.freq) {
    double sum = 0.0;
    for (double v : row) sum += v;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("slot subsets probe only the requested positions") {
  auto cfg = probe_cfg(6);
  const std::vector<int> subset{1, 3, 6};
  const auto rep = probe_positions(oracle(), cfg, 5, 1, &subset);
  CHECK(rep.slots == subset);
  CHECK(rep.accuracy.size() == 3);

  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS((void)probe_positions(oracle(), cfg, 5, 1, &bad), std::invalid_argument);
  const std::vector<int> dup{2, 2};
  CHECK_THROWS_AS((void)probe_positions(oracle(), cfg, 5, 1, &dup), std::invalid_argument);
}

TEST_CASE("all-invalid slots are flagged and the report still renders") {
  auto cfg = probe_cfg(3);
  const auto rep = probe_positions(constant_slot(0), cfg, 4, 9);
  CHECK(rep.flagged_slots == std::vector<int>{1, 2, 3});
  CHECK_FALSE(rep.fluctuation_defined);
  const auto dir = std::filesystem::temp_directory_path() / "pblab_bias_flagged";
  std::filesystem::create_directories(dir);
  render_report(rep, dir, "flagged");
  CHECK(std::filesystem::exists(dir / "flagged_matrix.csv"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("deterministic instance stream: same seed, same report") {
  auto cfg = probe_cfg(4);
  // A predictor keyed off instance contents so determinism of the stream shows.
  Predictor content = [&cfg](const RetrievalInstance& inst) {
    SlotPrediction p;
    p.slot = 1 + query_match_token(cfg, inst) % cfg.k;
    return p;
  };
  const auto a = probe_positions(content, cfg, 20, 5);
  const auto b = probe_positions(content, cfg, 20, 5);
  CHECK(a.freq == b.freq);
  const auto c = probe_positions(content, cfg, 20, 6);
  CHECK(a.freq != c.freq);
}

TEST_CASE("report renders to CSV and JSON and parses back exactly") {
  auto cfg = probe_cfg(4);
  const auto rep = probe_positions(oracle(), cfg, 7, 3, nullptr, "unit-test");
  const auto dir = std::filesystem::temp_directory_path() / "pblab_bias_render";
  std::filesystem::create_directories(dir);
  render_report(rep, dir, "t1");

  // Identity matrix: first data row of the CSV reads 1,1.0,0.0,...
  const auto csv = read_text_file(dir / "t1_matrix.csv");
  const auto second_line = csv.substr(csv.find('\n') + 1);
  CHECK(second_line.substr(0, second_line.find('\n')) == "1,1.0,0.0,0.0,0.0,0.0");

  const auto back = parse_report(dir, "t1");
  CHECK(back.k == rep.k);
  CHECK(back.n_per_slot == rep.n_per_slot);
  CHECK(back.slots == rep.slots);
  CHECK(back.freq == rep.freq);
  CHECK(back.softmass == rep.softmass);
  CHECK(back.has_softmass == rep.has_softmass);
  CHECK(back.accuracy == rep.accuracy);
  CHECK(back.mean_accuracy == rep.mean_accuracy);
  CHECK(back.fluctuation_pct == rep.fluctuation_pct);
  CHECK(back.flagged_slots == rep.flagged_slots);
  CHECK(back.provenance == rep.provenance);
  std::filesystem::remove_all(dir);
}

TEST_CASE("unwritable directory raises an error naming the path") {
  auto cfg = probe_cfg(3);
  const auto rep = probe_positions(oracle(), cfg, 2, 1);
  CHECK_THROWS_WITH(render_report(rep, "/nonexistent_pblab_dir", "x"),
                    doctest::Contains("/nonexistent_pblab_dir"));
}

TEST_CASE("softmass is captured when the predictor supplies distributions") {
  auto cfg = probe_cfg(3);
  Predictor with_dist = [&cfg](const RetrievalInstance& inst) {
    SlotPrediction p;
    p.slot = inst.truth_slot;
    p.dist.assign(static_cast<std::size_t>(cfg.k), 0.1);
    p.dist[static_cast<std::size_t>(inst.truth_slot - 1)] = 0.8;
    return p;
  };
  const auto rep = probe_positions(with_dist, cfg, 6, 2);
  CHECK(rep.has_softmass);
  for (std::size_t ri = 0; ri < rep.slots.size(); ++ri) {
    CHECK(rep.softmass[ri][static_cast<std::size_t>(rep.slots[ri] - 1)] == doctest::Approx(0.8));
  }
}
