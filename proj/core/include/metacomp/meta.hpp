#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metacomp/encoder.hpp"
#include "metacomp/episode.hpp"
#include "metacomp/optim.hpp"
#include "metacomp/verbalizer.hpp"

namespace metacomp::meta {

enum class Order : std::uint8_t { kSecond, kFirst };

const char* order_name(Order o);
Order order_from_name(const std::string& s);

struct MetaConfig {
  double inner_lr = 5e-5;
  double outer_lr = 1e-5;
  int inner_steps_train = 1;
  int inner_steps_test = 20;
  int episodes_per_outer = 4;
  Order order = Order::kSecond;
  episode::SupportMode support_mode = episode::SupportMode::kDivK;
  int k = 4;
  episode::QueryGranularity granularity = episode::QueryGranularity::kPair;
  bool verbalize_train = true;
  bool verbalize_test = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
  episode::EpisodeOptions episode_options() const { return {support_mode, k, granularity}; }
};

/// Builds a scalar loss from the current parameter nodes. Encoder-independent
/// so the bilevel machinery can be exercised on toy models in tests.
using LossBuilder =
    std::function<autodiff::NodeId(autodiff::Graph&, const autodiff::ParamNodes&)>;

LossBuilder support_loss_builder(const encoder::EncoderConfig& config,
                                 std::span<const world::Instance> support);

struct InnerAdaptResult {
  autodiff::ParamNodes theta_prime;
  std::vector<double> losses;  // loss value before each step
};

/// `steps` sequential full-support SGD steps, unrolled as graph nodes:
/// theta' stays differentiable w.r.t. theta in second-order mode; first_order
/// detaches the inner gradients (the FOMAML variant).
InnerAdaptResult inner_adapt(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                             const LossBuilder& support_loss, double alpha, int steps,
                             bool first_order);

struct OuterStats {
  double mean_inner_loss = 0.0;
  double mean_query_loss = 0.0;
  int episodes_used = 0;
  int episodes_skipped = 0;  // verbalizer excluded every slot term
};

/// One outer update: mean over the batch of d L_query(inner_adapt(theta, S_i))
/// / d theta, applied through Adam.
OuterStats outer_step(encoder::ModelParams& theta, std::span<const episode::Episode> batch,
                      const MetaConfig& config, optim::AdamState& adam);

struct LogRow {
  long step = 0;
  double inner_loss = 0.0;
  double query_loss = 0.0;
  bool has_validation = false;
  double val_pair_acc = 0.0;
  double val_attr_acc = 0.0;
  double val_obj_acc = 0.0;
};

struct MetaTrainOptions {
  int epochs = 1;
  std::uint64_t seed = 0;
  int eval_every = 0;       // outer steps between validations; 0 = once per epoch
  int val_subsample = 0;    // 0 = whole validation split
  int val_inner_steps = -1; // -1 = config.inner_steps_test
};

struct MetaTrainResult {
  encoder::ModelParams best_params;
  double best_val_pair_acc = -1.0;
  long best_step = -1;
  long total_steps = 0;
  std::vector<LogRow> log;
};

/// Episodic meta-training over the train split with periodic validation on
/// the (seen + novel) validation split; returns the best-validation
/// checkpoint. Deterministic given the seed.
MetaTrainResult meta_train(const encoder::ModelParams& init,
                           const encoder::ModelParams& retriever_encoder,
                           const retriever::ConceptDb& db, const world::DatasetSplits& splits,
                           const MetaConfig& config, const MetaTrainOptions& options);

struct Prediction {
  world::CompositionalPair pair;
  int inner_steps_run = 0;
  bool verbalized = false;
  bool attr_in_candidates = false;
  bool obj_in_candidates = false;
  double query_loss = 0.0;  // post-adaptation diagnostic; NaN when undefined
};

/// Clone theta, fast-adapt on the support set for inner_steps_test SGD steps
/// and predict both slots (verbalized argmax over support candidates in
/// retrieval modes). The caller's theta is never touched. NoRetrieval
/// episodes skip adaptation and predict unrestricted.
Prediction test_time_predict(const encoder::ModelParams& theta, const episode::Episode& ep,
                             const MetaConfig& config);

/// Plain MLM training from random initialization; test-time prediction for
/// this baseline is the unrestricted argmax with no adaptation.
encoder::ModelParams train_scratch_baseline(const encoder::EncoderConfig& config,
                                            std::span<const world::Instance> train,
                                            const encoder::MlmTrainConfig& train_config,
                                            std::uint64_t init_seed);

/// Meta-trained exactly like the full method (same episode stream); only the
/// test path differs: zero adaptation steps and unrestricted argmax.
MetaTrainResult maml_no_ret_baseline(const encoder::ModelParams& init,
                                     const encoder::ModelParams& retriever_encoder,
                                     const retriever::ConceptDb& db,
                                     const world::DatasetSplits& splits, const MetaConfig& config,
                                     const MetaTrainOptions& options);

}  // namespace metacomp::meta
