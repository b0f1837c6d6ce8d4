#include "metacomp/meta.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "metacomp/rng.hpp"

namespace metacomp::meta {

namespace ad = autodiff;
using ad::Graph;
using ad::NodeId;
using ad::ParamNodes;

const char* order_name(Order o) { return o == Order::kSecond ? "second" : "first"; }

Order order_from_name(const std::string& s) {
  if (s == "second") return Order::kSecond;
  if (s == "first") return Order::kFirst;
  throw std::invalid_argument("unknown order '" + s + "'");
}

void MetaConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("MetaConfig." + field + ": " + why);
  };
  if (inner_lr <= 0) bad("inner_lr", "must be > 0");
  if (outer_lr <= 0) bad("outer_lr", "must be > 0");
  if (inner_steps_train < 0) bad("inner_steps_train", "must be >= 0");
  if (inner_steps_test < 0) bad("inner_steps_test", "must be >= 0");
  if (episodes_per_outer < 1) bad("episodes_per_outer", "must be >= 1");
  if (k < 1) bad("k", "must be >= 1");
}

LossBuilder support_loss_builder(const encoder::EncoderConfig& config,
                                 std::span<const world::Instance> support) {
  return [config, support](Graph& g, const ParamNodes& theta) {
    return encoder::batch_loss_nodes(g, theta, config, support, nullptr);
  };
}

InnerAdaptResult inner_adapt(Graph& g, const ParamNodes& theta, const LossBuilder& support_loss,
                             double alpha, int steps, bool first_order) {
  if (steps < 0) throw std::invalid_argument("inner_adapt: steps must be >= 0");
  InnerAdaptResult out;
  out.theta_prime = theta;
  for (int s = 0; s < steps; ++s) {
    const NodeId loss = support_loss(g, out.theta_prime);
    if (loss == ad::kNoNode) {
      throw std::invalid_argument("inner_adapt: support loss has no terms (empty support?)");
    }
    out.losses.push_back(g.scalar_value(loss));
    auto grads = g.grad(loss, out.theta_prime.ids, /*allow_intermediate=*/true);
    if (first_order) {
      for (auto& gi : grads) gi = g.detach(gi);
    }
    out.theta_prime = sgd_step(g, out.theta_prime, grads, alpha);
  }
  return out;
}

namespace {

encoder::SlotCandidates candidates_from(const verbalizer::SupportVocab& sv) {
  return {sv.attr_candidates, sv.obj_candidates};
}

}  // namespace

OuterStats outer_step(encoder::ModelParams& theta, std::span<const episode::Episode> batch,
                      const MetaConfig& config, optim::AdamState& adam) {
  if (batch.empty()) throw std::invalid_argument("outer_step: empty episode batch");
  config.validate();

  OuterStats stats;
  std::vector<double> acc(theta.values.size(), 0.0);
  double inner_sum = 0.0;
  int inner_count = 0;

  for (const auto& ep : batch) {
    Graph g(4096);
    const ParamNodes tn = make_param_nodes(g, theta.values);
    ParamNodes tp = tn;

    if (!ep.support.empty() && config.inner_steps_train > 0) {
      auto adapted = inner_adapt(g, tn, support_loss_builder(theta.config, ep.support),
                                 config.inner_lr, config.inner_steps_train,
                                 config.order == Order::kFirst);
      tp = std::move(adapted.theta_prime);
      for (double l : adapted.losses) {
        inner_sum += l;
        ++inner_count;
      }
    }

    encoder::SlotCandidates cands;
    const encoder::SlotCandidates* restrict_to = nullptr;
    if (config.verbalize_train && !ep.support.empty()) {
      cands = candidates_from(verbalizer::support_vocab(ep));
      restrict_to = &cands;
    }
    const NodeId qloss = encoder::instance_loss_nodes(g, tp, theta.config, ep.query, restrict_to);
    if (qloss == ad::kNoNode) {
      ++stats.episodes_skipped;
      continue;
    }
    const auto grads = g.grad(qloss, tn.ids);
    const auto flat = flatten_grads(g, theta.values, grads);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += flat[i];
    stats.mean_query_loss += g.scalar_value(qloss);
    ++stats.episodes_used;
  }

  if (stats.episodes_used > 0) {
    const double inv = 1.0 / static_cast<double>(stats.episodes_used);
    for (auto& v : acc) v *= inv;
    stats.mean_query_loss *= inv;
    const optim::AdamConfig ac{config.outer_lr, config.adam_beta1, config.adam_beta2,
                               config.adam_eps};
    adam_step(theta.values.flat(), acc, adam, ac);
  }
  stats.mean_inner_loss = inner_count > 0 ? inner_sum / inner_count : 0.0;
  return stats;
}

Prediction test_time_predict(const encoder::ModelParams& theta, const episode::Episode& ep,
                             const MetaConfig& config) {
  config.validate();
  const bool retrieval_mode = ep.mode != episode::SupportMode::kNoRetrieval;
  if (retrieval_mode && ep.support.empty()) {
    throw std::invalid_argument("test_time_predict: empty support in a retrieval mode");
  }

  Prediction out;
  ad::ParamVector cur = theta.values;  // adaptation happens on a clone

  if (retrieval_mode) {
    for (int s = 0; s < config.inner_steps_test; ++s) {
      Graph g(4096);
      const ParamNodes tn = make_param_nodes(g, cur);
      const NodeId loss = encoder::batch_loss_nodes(g, tn, theta.config, ep.support, nullptr);
      if (loss == ad::kNoNode) break;
      const auto grads = g.grad(loss, tn.ids);
      const auto flat = flatten_grads(g, cur, grads);
      auto& data = cur.flat();
      for (std::size_t i = 0; i < data.size(); ++i) data[i] -= config.inner_lr * flat[i];
      ++out.inner_steps_run;
    }
  }

  Graph g(4096);
  const ParamNodes tn = make_param_nodes(g, cur);
  const auto slots = encoder::encode_slots_nodes(g, tn, theta.config, ep.query);
  const NodeId attr_logits = encoder::mlm_logits_nodes(g, tn, theta.config, slots.attr);
  const NodeId obj_logits = encoder::mlm_logits_nodes(g, tn, theta.config, slots.obj);
  const auto& av = g.value(attr_logits).raw();
  const auto& ov = g.value(obj_logits).raw();

  out.pair.kind = ep.query.gold.kind;
  encoder::SlotCandidates cands;
  const encoder::SlotCandidates* restrict_to = nullptr;
  if (config.verbalize_test && retrieval_mode) {
    const auto sv = verbalizer::support_vocab(ep);
    out.pair.attr = verbalizer::restricted_argmax(av, sv.attr_candidates);
    out.pair.obj = verbalizer::restricted_argmax(ov, sv.obj_candidates);
    out.verbalized = true;
    out.attr_in_candidates = std::binary_search(sv.attr_candidates.begin(),
                                                sv.attr_candidates.end(), ep.query.gold.attr);
    out.obj_in_candidates = std::binary_search(sv.obj_candidates.begin(),
                                               sv.obj_candidates.end(), ep.query.gold.obj);
    cands = candidates_from(sv);
    restrict_to = &cands;
  } else {
    out.pair.attr = encoder::argmax_token(av);
    out.pair.obj = encoder::argmax_token(ov);
  }

  // post-adaptation query loss, for diagnostics only
  const std::span<const world::TokenId> none;
  const NodeId la = encoder::slot_loss_nodes(
      g, tn, theta.config, attr_logits, ep.query.gold.attr,
      restrict_to ? std::span<const world::TokenId>(restrict_to->attr) : none);
  const NodeId lo = encoder::slot_loss_nodes(
      g, tn, theta.config, obj_logits, ep.query.gold.obj,
      restrict_to ? std::span<const world::TokenId>(restrict_to->obj) : none);
  if (la != ad::kNoNode && lo != ad::kNoNode) {
    out.query_loss = 0.5 * (g.scalar_value(la) + g.scalar_value(lo));
  } else if (la != ad::kNoNode || lo != ad::kNoNode) {
    out.query_loss = g.scalar_value(la != ad::kNoNode ? la : lo);
  } else {
    out.query_loss = std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

namespace {

std::vector<world::Instance> subsample(std::span<const world::Instance> all, int max_n,
                                       std::uint64_t seed) {
  if (max_n <= 0 || static_cast<std::size_t>(max_n) >= all.size()) {
    return {all.begin(), all.end()};
  }
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(Rng::derive(seed, 0x5b));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(max_n));
  std::sort(idx.begin(), idx.end());
  std::vector<world::Instance> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

}  // namespace

MetaTrainResult meta_train(const encoder::ModelParams& init,
                           const encoder::ModelParams& retriever_encoder,
                           const retriever::ConceptDb& db, const world::DatasetSplits& splits,
                           const MetaConfig& config, const MetaTrainOptions& options) {
  config.validate();
  if (options.epochs < 1) throw std::invalid_argument("meta_train: epochs must be >= 1");
  if (splits.train.empty()) throw std::invalid_argument("meta_train: empty train split");

  encoder::ModelParams theta = init;
  optim::AdamState adam;
  MetaTrainResult res;

  // fixed validation episodes: seen + novel validation queries
  const auto val_instances =
      subsample(splits.validation, options.val_subsample, options.seed);
  std::vector<episode::Episode> val_episodes;
  val_episodes.reserve(val_instances.size());
  for (const auto& inst : val_instances) {
    val_episodes.push_back(
        episode::build_episode(db, retriever_encoder, splits.train, inst,
                               config.episode_options()));
  }

  MetaConfig val_config = config;
  if (options.val_inner_steps >= 0) val_config.inner_steps_test = options.val_inner_steps;

  long step = 0;
  auto validate_and_select = [&]() {
    int pair_ok = 0, attr_ok = 0, obj_ok = 0;
    for (const auto& ep : val_episodes) {
      const auto pred = test_time_predict(theta, ep, val_config);
      const bool a = pred.pair.attr == ep.query.gold.attr;
      const bool o = pred.pair.obj == ep.query.gold.obj;
      attr_ok += a;
      obj_ok += o;
      pair_ok += a && o;
    }
    const double n = static_cast<double>(val_episodes.size());
    LogRow row;
    row.step = step;
    row.has_validation = true;
    row.val_pair_acc = n > 0 ? pair_ok / n : 0.0;
    row.val_attr_acc = n > 0 ? attr_ok / n : 0.0;
    row.val_obj_acc = n > 0 ? obj_ok / n : 0.0;
    res.log.push_back(row);
    if (row.val_pair_acc > res.best_val_pair_acc) {
      res.best_val_pair_acc = row.val_pair_acc;
      res.best_step = step;
      res.best_params = theta;
    }
  };

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const auto episodes =
        episode::episode_stream(db, retriever_encoder, splits.train, splits.train,
                                config.episode_options(), Rng::derive(options.seed, epoch));
    for (std::size_t begin = 0; begin < episodes.size();
         begin += static_cast<std::size_t>(config.episodes_per_outer)) {
      const std::size_t end = std::min(
          episodes.size(), begin + static_cast<std::size_t>(config.episodes_per_outer));
      const auto stats = outer_step(
          theta, std::span<const episode::Episode>(episodes).subspan(begin, end - begin), config,
          adam);
      ++step;
      LogRow row;
      row.step = step;
      row.inner_loss = stats.mean_inner_loss;
      row.query_loss = stats.mean_query_loss;
      res.log.push_back(row);
      if (options.eval_every > 0 && step % options.eval_every == 0) validate_and_select();
    }
    if (options.eval_every <= 0) validate_and_select();
  }
  if (res.best_step < 0 || res.log.empty() || !res.log.back().has_validation ||
      res.log.back().step != step) {
    validate_and_select();
  }
  res.total_steps = step;
  return res;
}

encoder::ModelParams train_scratch_baseline(const encoder::EncoderConfig& config,
                                            std::span<const world::Instance> train,
                                            const encoder::MlmTrainConfig& train_config,
                                            std::uint64_t init_seed) {
  encoder::ModelParams params = encoder::init_params(config, init_seed);
  encoder::train_mlm(params, train, train_config);
  return params;
}

MetaTrainResult maml_no_ret_baseline(const encoder::ModelParams& init,
                                     const encoder::ModelParams& retriever_encoder,
                                     const retriever::ConceptDb& db,
                                     const world::DatasetSplits& splits, const MetaConfig& config,
                                     const MetaTrainOptions& options) {
  // identical meta-training; only the evaluation path differs (zero test-time
  // adaptation, unrestricted argmax)
  return meta_train(init, retriever_encoder, db, splits, config, options);
}

}  // namespace metacomp::meta
