#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "pblab/rng.hpp"
#include "pblab/taskgen.hpp"
#include "pblab/util.hpp"

using namespace pblab;

namespace {

TaskConfig small_cfg(TaskFlavor flavor = TaskFlavor::key_match) {
  TaskConfig cfg;
  cfg.k = 4;
  cfg.doc_len = 3;
  cfg.query_len = 2;
  cfg.flavor = flavor;
  cfg.key_vocab = 64;
  cfg.filler_vocab = 32;
  cfg.k_max = 8;
  return cfg;
}

}  // namespace

TEST_CASE("gen_instance places the key in exactly the truth candidate") {
  auto cfg = small_cfg();
  const auto inst = gen_instance(cfg, 3, 17);
  CHECK(inst.truth_slot == 3);
  CHECK(matches_query(cfg, inst, 3));
  for (int slot : {1, 2, 4}) CHECK_FALSE(matches_query(cfg, inst, slot));
  CHECK(scan_truth_slot(cfg, inst) == 3);
}

TEST_CASE("match-predicate exclusivity holds across flavors and seeds") {
  for (auto flavor : {TaskFlavor::key_match, TaskFlavor::session_match}) {
    auto cfg = small_cfg(flavor);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const int slot = static_cast<int>(seed % cfg.k) + 1;
      const auto inst = gen_instance(cfg, slot, seed);
      CHECK(scan_truth_slot(cfg, inst) == slot);
    }
  }
}

TEST_CASE("gen_instance determinism and preconditions") {
  auto cfg = small_cfg();
  const auto a = gen_instance(cfg, 2, 99);
  const auto b = gen_instance(cfg, 2, 99);
  CHECK(a.prompt_tokens == b.prompt_tokens);
  CHECK(a.candidates == b.candidates);
  CHECK(a.truth_slot == b.truth_slot);

  CHECK_THROWS_AS((void)gen_instance(cfg, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)gen_instance(cfg, cfg.k + 1, 1), std::invalid_argument);

  auto tiny = cfg;
  tiny.key_vocab = cfg.k - 1;
  CHECK_THROWS_WITH((void)gen_instance(tiny, 1, 1), doctest::Contains("too small"));
}

TEST_CASE("gen_dataset follows the slot distribution") {
  TaskConfig cfg = small_cfg();
  cfg.k = 6;
  cfg.k_max = 8;

  // One-hot distribution pins every truth slot.
  auto onehot = std::vector<double>{1, 0, 0, 0, 0, 0};
  for (const auto& inst : gen_dataset(cfg, onehot, 40, 7)) CHECK(inst.truth_slot == 1);

  // Uniform draw: each count within 3 sigma of n/k.
  const int n = 6000;
  std::vector<double> uniform(6, 1.0 / 6.0);
  auto data = gen_dataset(cfg, uniform, n, 123);
  std::vector<int> counts(7, 0);
  for (const auto& inst : data) counts[static_cast<std::size_t>(inst.truth_slot)]++;
  const double mean = n / 6.0;
  const double sigma = std::sqrt(n * (1.0 / 6.0) * (5.0 / 6.0));
  for (int c = 1; c <= 6; ++c) {
    CHECK(std::abs(counts[static_cast<std::size_t>(c)] - mean) <= 3.0 * sigma);
  }

  CHECK_THROWS_AS((void)gen_dataset(cfg, uniform, 0, 1), std::invalid_argument);
  auto bad = uniform;
  bad[0] = -0.1;
  bad[1] = 1.0 / 6.0 + 0.1;
  CHECK_THROWS_AS((void)gen_dataset(cfg, bad, 5, 1), std::invalid_argument);
}

TEST_CASE("cyclic augmentation: K=3 truth trace is {1,3,2}") {
  TaskConfig cfg = small_cfg();
  cfg.k = 3;
  const auto src = gen_instance(cfg, 1, 5);
  const auto aug = permute_augment({src}, 3, PermScheme::cyclic, 0);
  REQUIRE(aug.size() == 3);
  CHECK(aug[0].truth_slot == 1);
  CHECK(aug[1].truth_slot == 3);
  CHECK(aug[2].truth_slot == 2);
  // Rotation by one: (X1 X2 X3) -> (X2 X3 X1).
  CHECK(aug[1].candidates[0] == src.candidates[1]);
  CHECK(aug[1].candidates[1] == src.candidates[2]);
  CHECK(aug[1].candidates[2] == src.candidates[0]);
}

TEST_CASE("cyclic augmentation with m=1 is the identity") {
  auto cfg = small_cfg();
  const auto src = gen_instance(cfg, 2, 5);
  const auto aug = permute_augment({src}, 1, PermScheme::cyclic, 0);
  REQUIRE(aug.size() == 1);
  CHECK(aug[0].candidates == src.candidates);
  CHECK(aug[0].truth_slot == src.truth_slot);
}

TEST_CASE("cyclic coverage: m=K puts every candidate in every slot once") {
  auto cfg = small_cfg();
  const auto src = gen_instance(cfg, 3, 11);
  const auto aug = permute_augment({src}, cfg.k, PermScheme::cyclic, 0);
  REQUIRE(static_cast<int>(aug.size()) == cfg.k);
  for (int orig = 0; orig < cfg.k; ++orig) {
    std::set<int> positions;
    for (const auto& copy : aug) {
      for (int pos = 0; pos < cfg.k; ++pos) {
        if (copy.candidates[static_cast<std::size_t>(pos)] ==
            src.candidates[static_cast<std::size_t>(orig)]) {
          positions.insert(pos);
        }
      }
    }
    CHECK(static_cast<int>(positions.size()) == cfg.k);
  }
  // Truth relabeling agrees with a brute-force re-scan of the predicate.
  for (const auto& copy : aug) CHECK(scan_truth_slot(cfg, copy) == copy.truth_slot);
}

TEST_CASE("random augmentation draws distinct permutations") {
  TaskConfig cfg = small_cfg();
  cfg.k = 3;
  const auto src = gen_instance(cfg, 2, 21);
  const auto aug = permute_augment({src}, 6, PermScheme::random, 9);
  REQUIRE(aug.size() == 6);  // 3! = 6 distinct permutations exist
  std::set<std::vector<std::vector<int>>> seen;
  for (const auto& copy : aug) {
    CHECK(seen.insert(copy.candidates).second);
    CHECK(scan_truth_slot(cfg, copy) == copy.truth_slot);
  }
  CHECK_THROWS_WITH((void)permute_augment({src}, 7, PermScheme::random, 9),
                    doctest::Contains("k!"));
}

TEST_CASE("augmentation copy defaults per flavor") {
  CHECK(default_augment_copies(TaskFlavor::session_match) == 5);
  CHECK(default_augment_copies(TaskFlavor::key_match) == 3);
}

TEST_CASE("encode layout: K=2 doc_len=2 query_len=1 totals 12 tokens") {
  TaskConfig cfg;
  cfg.k = 2;
  cfg.doc_len = 2;
  cfg.query_len = 1;
  cfg.k_max = 4;
  cfg.key_vocab = 16;
  cfg.filler_vocab = 16;
  const auto inst = gen_instance(cfg, 2, 3);
  const auto enc = encode(inst, cfg);
  CHECK(enc.tokens.size() == 12);
  CHECK(enc.answer_index == 10);
  REQUIRE(enc.slot_offsets.size() == 2);
  CHECK(enc.slot_offsets[0] < enc.slot_offsets[1]);
  CHECK(enc.tokens[static_cast<std::size_t>(enc.answer_index) - 1] == TokenLayout::kAns);
  CHECK(enc.tokens[static_cast<std::size_t>(enc.answer_index)] == cfg.layout().slot_token(2));

  CHECK_THROWS_WITH((void)encode(inst, cfg, 11), doctest::Contains("exceeds"));
}

TEST_CASE("encode/decode round-trip recovers the instance exactly") {
  for (auto flavor : {TaskFlavor::key_match, TaskFlavor::session_match}) {
    auto cfg = small_cfg(flavor);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const int slot = static_cast<int>(seed % cfg.k) + 1;
      const auto inst = gen_instance(cfg, slot, seed);
      const auto enc = encode(inst, cfg);
      const auto back = decode(enc.tokens, cfg);
      CHECK(back.prompt_tokens == inst.prompt_tokens);
      CHECK(back.candidates == inst.candidates);
      CHECK(back.truth_slot == inst.truth_slot);
    }
  }
}

TEST_CASE("slot offsets are strictly increasing") {
  auto cfg = small_cfg();
  const auto enc = encode(gen_instance(cfg, 1, 2), cfg);
  for (std::size_t i = 1; i < enc.slot_offsets.size(); ++i) {
    CHECK(enc.slot_offsets[i] > enc.slot_offsets[i - 1]);
  }
}

TEST_CASE("biased slot distribution") {
  const auto d = biased_slot_distribution(10, 1, 0.5);
  CHECK(d[0] == doctest::Approx(0.5));
  for (int i = 1; i < 10; ++i) CHECK(d[static_cast<std::size_t>(i)] == doctest::Approx(0.5 / 9));
}

TEST_CASE("dataset file round-trip is byte-identical") {
  auto cfg = small_cfg();
  const auto data = gen_dataset(cfg, {0.25, 0.25, 0.25, 0.25}, 25, 77);
  const auto dir = std::filesystem::temp_directory_path() / "pblab_taskgen_test";
  std::filesystem::create_directories(dir);
  const auto p1 = dir / "a.jsonl";
  const auto p2 = dir / "b.jsonl";
  save_dataset(p1, cfg, data);
  const auto loaded = load_dataset(p1, cfg);
  REQUIRE(loaded.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(loaded[i].prompt_tokens == data[i].prompt_tokens);
    CHECK(loaded[i].candidates == data[i].candidates);
    CHECK(loaded[i].truth_slot == data[i].truth_slot);
  }
  save_dataset(p2, cfg, loaded);
  CHECK(read_text_file(p1) == read_text_file(p2));
  std::filesystem::remove_all(dir);
}
