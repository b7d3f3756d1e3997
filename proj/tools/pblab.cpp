// pblab: positional-bias laboratory for list-selection retrieval.
//
// Stages write deterministic artifacts under a run directory; timestamps live
// only in sidecar .meta.json files so re-runs are byte-identical.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pblab/bias_eval.hpp"
#include "pblab/checkpoint.hpp"
#include "pblab/llmprobe.hpp"
#include "pblab/rng.hpp"
#include "pblab/runconfig.hpp"
#include "pblab/serde.hpp"
#include "pblab/trainer.hpp"
#include "pblab/util.hpp"

namespace {

using namespace pblab;

void write_sidecar(const std::filesystem::path& run_dir, const std::string& stage,
                   const nlohmann::ordered_json& extra) {
  nlohmann::ordered_json meta = extra;
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  meta["timestamp_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  write_text_file(run_dir / (stage + ".meta.json"), meta.dump(2) + "\n");
}

std::filesystem::path ensure_run_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  std::filesystem::create_directories(p);
  return p;
}

int cmd_gen_data(const RunConfig& rc, const std::string& run_dir) {
  const auto dir = ensure_run_dir(run_dir);
  const auto biased = biased_slot_distribution(rc.task.k, rc.bias_slot, rc.bias_p);
  const auto pre = gen_dataset(rc.task, biased, rc.n_pretrain, Rng::mix(rc.master_seed, 1));
  save_dataset(dir / "pretrain.jsonl", rc.task, pre);

  std::vector<double> uniform(static_cast<std::size_t>(rc.task.k), 1.0 / rc.task.k);
  const auto ft = gen_dataset(rc.task, uniform, rc.n_finetune, Rng::mix(rc.master_seed, 2));
  save_dataset(dir / "finetune.jsonl", rc.task, ft);

  write_sidecar(dir, "gen-data",
                {{"stage", "gen-data"}, {"n_pretrain", rc.n_pretrain}, {"n_finetune", rc.n_finetune}});
  std::cout << "gen-data: wrote " << pre.size() << " pretrain and " << ft.size()
            << " finetune instances under " << dir.string() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& rc, const std::string& run_dir) {
  const auto dir = ensure_run_dir(run_dir);
  const auto data = load_dataset(dir / "pretrain.jsonl", rc.task);
  std::ofstream metrics(dir / "pretrain_metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open metrics stream");
  auto ckpt = pretrain(rc.model, rc.task, data, rc.train, &metrics);
  save_checkpoint(ckpt, dir / "base.pblb");
  write_sidecar(dir, "pretrain",
                {{"stage", "pretrain"}, {"steps", ckpt.meta.at("steps")},
                 {"final_epoch_loss", ckpt.meta.at("final_epoch_loss")}});
  std::cout << "pretrain: " << ckpt.meta.at("steps") << " steps, final epoch loss "
            << format_double(ckpt.meta.at("final_epoch_loss").get<double>()) << ", checkpoint "
            << (dir / "base.pblb").string() << "\n";
  return 0;
}

int cmd_finetune(const RunConfig& rc, const std::string& run_dir, const std::string& kind_flag) {
  const auto dir = ensure_run_dir(run_dir);
  AdapterSpec spec = rc.adapter;
  if (!kind_flag.empty()) spec.kind = adapter_kind_from_name(kind_flag);
  spec.output_dim = rc.model.d_model;
  const std::string kind = adapter_kind_name(spec.kind);

  const auto base = load_checkpoint(dir / "base.pblb");
  const auto data = load_dataset(dir / "finetune.jsonl", rc.task);
  const int m = rc.augment_m > 0 ? rc.augment_m : default_augment_copies(rc.task.flavor);
  const auto augmented = permute_augment(data, m, rc.augment_scheme, Rng::mix(rc.master_seed, 3));

  std::ofstream metrics(dir / ("finetune_" + kind + "_metrics.jsonl"),
                        std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open metrics stream");
  auto res = finetune(base, spec, rc.task, augmented, rc.finetune_train, &metrics);
  const auto out = dir / ("adapter_" + kind + ".pblb");
  save_checkpoint(res.adapter_ckpt, out);
  write_sidecar(dir, "finetune_" + kind,
                {{"stage", "finetune"},
                 {"adapter", kind},
                 {"augmented_rows", augmented.size()},
                 {"base_hash_unchanged", res.base_hash_before == res.base_hash_after},
                 {"updated_scalars", res.updated_scalars},
                 {"count_tunable", res.expected_tunable}});
  if (res.base_hash_before != res.base_hash_after) {
    throw std::runtime_error("finetune: base parameters changed");
  }
  std::cout << "finetune[" << kind << "]: " << augmented.size() << " augmented rows (m=" << m
            << "), updated " << res.updated_scalars << "/" << res.expected_tunable
            << " scalars, base frozen, checkpoint " << out.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& run_dir, const std::string& kind_flag) {
  const auto dir = ensure_run_dir(run_dir);
  const auto base = load_checkpoint(dir / "base.pblb");
  auto model = model_from_checkpoint(base);

  std::string which = "base";
  AdapterSpec spec;
  ParamStore<float> theta;
  const AdapterSpec* spec_ptr = nullptr;
  const ParamStore<float>* theta_ptr = nullptr;
  if (!kind_flag.empty() && kind_flag != "none") {
    which = adapter_kind_from_name(kind_flag) == AdapterKind::lowrank
                ? "lowrank"
                : adapter_kind_name(adapter_kind_from_name(kind_flag));
    const auto ck = load_checkpoint(dir / ("adapter_" + which + ".pblb"));
    spec = adapter_spec_from_json(ck.meta.at("adapter"));
    theta = ck.tensors;
    spec_ptr = &spec;
    theta_ptr = &theta;
  }

  auto predictor = make_model_predictor(model, rc.task, spec_ptr, theta_ptr);
  const std::vector<int>* subset = rc.eval_slots.empty() ? nullptr : &rc.eval_slots;
  const auto rep = probe_positions(predictor, rc.task, rc.eval_n_per_slot, rc.eval_seed, subset,
                                   "model:" + which);
  const std::string id = rc.run_id + "_eval_" + which;
  render_report(rep, dir, id);
  write_sidecar(dir, "eval_" + which, {{"stage", "eval"}, {"adapter", which}});
  std::cout << "eval[" << which << "]: mean accuracy " << format_double(rep.mean_accuracy)
            << ", fluctuation "
            << (rep.fluctuation_defined ? format_double(rep.fluctuation_pct) : "undefined")
            << "%, reports " << (dir / (id + "_matrix.csv")).string() << "\n";
  return 0;
}

int cmd_probe(const RunConfig& rc, const std::string& run_dir) {
  const auto dir = ensure_run_dir(run_dir);
  if (rc.probe.base_url.empty()) {
    throw std::invalid_argument("probe: [probe] base_url is not configured");
  }
  ProbeOptions opts = rc.probe_opts;
  const std::string id = rc.run_id + "_probe_" + strategy_name(opts.strategy);
  opts.transcript_path = dir / (id + "_transcript.jsonl");
  const auto rep = run_probe(rc.probe, rc.task, opts, rc.probe_n_per_slot,
                             Rng::mix(rc.master_seed, 4));
  render_report(rep, dir, id);
  write_sidecar(dir, "probe", {{"stage", "probe"}, {"strategy", strategy_name(opts.strategy)}});
  std::cout << "probe[" << strategy_name(opts.strategy) << "]: mean accuracy "
            << format_double(rep.mean_accuracy) << ", fluctuation "
            << (rep.fluctuation_defined ? format_double(rep.fluctuation_pct) : "undefined")
            << "%, transcript " << opts.transcript_path.string() << "\n";
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& id) {
  const auto dir = std::filesystem::path(run_dir);
  const auto rep = parse_report(dir, id);
  std::printf("report %s (provenance: %s)\n", id.c_str(), rep.provenance.c_str());
  std::printf("%-10s %s\n", "slot", "accuracy");
  for (std::size_t i = 0; i < rep.slots.size(); ++i) {
    std::printf("%-10d %s\n", rep.slots[i], format_double(rep.accuracy[i]).c_str());
  }
  std::printf("%-10s %s\n", "mean", format_double(rep.mean_accuracy).c_str());
  std::printf("%-10s %s%%\n", "fluct",
              rep.fluctuation_defined ? format_double(rep.fluctuation_pct).c_str() : "undefined");
  if (!rep.flagged_slots.empty()) {
    std::printf("flagged slots (all predictions invalid):");
    for (int s : rep.flagged_slots) std::printf(" %d", s);
    std::printf("\n");
  }
  return 0;
}

int cmd_fluctuation(const std::string& accs_csv) {
  std::vector<double> accs;
  for (const auto& part : split(accs_csv, ',')) {
    try {
      accs.push_back(std::stod(trim(part)));
    } catch (const std::exception&) {
      throw std::invalid_argument("fluctuation: bad accuracy value '" + part + "'");
    }
  }
  std::printf("%.2f\n", fluctuation(accs));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pblab - positional-bias laboratory for list-selection retrieval"};
  app.require_subcommand(1);

  std::string config_path;
  std::string run_dir = "runs/default";
  std::string adapter_flag;
  std::string report_id;
  std::string accs_csv;

  auto add_config = [&](CLI::App* cmd, bool with_run_dir = true) {
    cmd->add_option("--config", config_path, "experiment configuration file")->required();
    if (with_run_dir) cmd->add_option("--run-dir", run_dir, "artifact directory");
  };

  auto* gen = app.add_subcommand("gen-data", "generate pretraining and fine-tuning datasets");
  add_config(gen);
  auto* pre = app.add_subcommand("pretrain", "bias-induction pretraining of the toy model");
  add_config(pre);
  auto* fin = app.add_subcommand("finetune", "adapter fine-tuning over the frozen base");
  add_config(fin);
  fin->add_option("--adapter", adapter_flag, "adapter kind: le | pt | lowrank");
  auto* ev = app.add_subcommand("eval", "positional probe of a local checkpoint");
  add_config(ev);
  ev->add_option("--adapter", adapter_flag, "none | le | pt | lowrank");
  auto* pr = app.add_subcommand("probe", "positional probe of an external chat endpoint");
  add_config(pr);
  auto* rep = app.add_subcommand("report", "print a stored probe report");
  rep->add_option("--run-dir", run_dir, "artifact directory")->required();
  rep->add_option("--id", report_id, "report id (e.g. run_eval_base)")->required();
  auto* fl = app.add_subcommand("fluctuation", "fluctuation % of an accuracy list");
  fl->add_option("--accs", accs_csv, "comma-separated accuracies")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (fl->parsed()) return cmd_fluctuation(accs_csv);
    if (rep->parsed()) return cmd_report(run_dir, report_id);

    RunConfig rc;
    try {
      rc = RunConfig::load(config_path);
    } catch (const std::exception& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    }
    if (gen->parsed()) return cmd_gen_data(rc, run_dir);
    if (pre->parsed()) return cmd_pretrain(rc, run_dir);
    if (fin->parsed()) return cmd_finetune(rc, run_dir, adapter_flag);
    if (ev->parsed()) return cmd_eval(rc, run_dir, adapter_flag);
    if (pr->parsed()) return cmd_probe(rc, run_dir);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
