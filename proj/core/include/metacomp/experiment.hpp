#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metacomp/eval.hpp"
#include "metacomp/meta.hpp"

namespace metacomp::experiment {

struct EvalSection {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};  // ablation run seeds
  int max_instances = 0;                            // per-split evaluation cap, 0 = all
  int threads = 0;                                  // ablation fan-out, 0 = hardware
};

/// The full experiment description: one structured config drives every
/// pipeline stage. All randomness flows from explicit seeds in here.
struct ExperimentConfig {
  world::WorldConfig world;
  double val_fraction = 0.10;
  double test_fraction = 0.25;
  encoder::EncoderConfig enc;            // vocab_size derived from world when 0
  encoder::MlmTrainConfig enc_train;     // retriever encoder training
  encoder::MlmTrainConfig scratch_train; // train-from-scratch baseline
  std::uint64_t enc_init_seed = 11;
  std::uint64_t scratch_init_seed = 12;
  std::uint64_t learner_init_seed = 13;
  meta::MetaConfig meta;
  meta::MetaTrainOptions meta_train;
  EvalSection eval;

  void validate() const;

  // section fingerprints for the provenance chain
  std::string config_hash() const;
  std::string world_hash() const;
  std::string encoder_hash() const;
  std::string meta_hash() const;
};

ExperimentConfig load_config(const std::string& path);
void save_config(const ExperimentConfig& config, const std::string& path);
std::string config_to_json_string(const ExperimentConfig& config);

ExperimentConfig tiny_preset();     // seconds-scale smoke pipeline
ExperimentConfig default_preset();  // the full synthetic-world experiment

/// Re-derive every model seed from `s`, keeping the world unchanged.
void apply_seed_override(ExperimentConfig& config, std::uint64_t s);

/// Conventional artifact names inside a working directory.
namespace paths {
std::string dataset(const std::string& dir);
std::string vocab(const std::string& dir);
std::string retriever_ckpt(const std::string& dir);
std::string concept_db(const std::string& dir);
std::string learner_ckpt(const std::string& dir);
std::string train_log(const std::string& dir);
std::string metrics_csv(const std::string& dir, const std::string& method);
std::string metrics_json(const std::string& dir, const std::string& method);
std::string predictions_csv(const std::string& dir, const std::string& method);
std::string episode_dump(const std::string& dir);
std::string ablation_csv(const std::string& dir);
std::string ablation_summary(const std::string& dir);
std::string ablation_table(const std::string& dir);
}  // namespace paths

// ---- pipeline stages (throw on error; each output embeds provenance) ----

void run_gen_world(const ExperimentConfig& config, const std::string& out_dir);
void run_train_retriever(const ExperimentConfig& config, const std::string& out_dir);
void run_build_db(const ExperimentConfig& config, const std::string& out_dir);
void run_meta_train(const ExperimentConfig& config, const std::string& out_dir);
void run_evaluate(const ExperimentConfig& config, const std::string& out_dir,
                  const std::string& method_override = "");

struct AblationResult {
  eval::AblationTable table;
  // novel pair accuracy of the div_k checkpoints evaluated with 0 vs the
  // configured number of test-time inner steps, one value per seed
  std::vector<double> novel_pair_acc_steps0;
  std::vector<double> novel_pair_acc_adapted;
  // retrieval hit rates of the div_k retriever per seed
  std::vector<eval::RetrievalReport> retrieval_reports;
  long verbalizer_violations = 0;
  long verbalized_predictions = 0;
  long oracle_excluded = 0;
};

/// The five-method suite over config.eval.seeds: per seed one retriever
/// encoder + db, one scratch baseline, one top-k and one div-k meta model;
/// maml_no_ret and oracle_k reuse the div_k checkpoint with a different test
/// path. Seeds fan out over `threads` workers with isolated state; outputs
/// are written in seed order so reruns are byte-identical.
AblationResult run_ablation(const ExperimentConfig& config, const std::string& out_dir,
                            int threads_override = -1);

}  // namespace metacomp::experiment
