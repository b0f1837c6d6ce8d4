#pragma once

// Private JSON codecs for config structs. Not installed; keeps nlohmann out
// of the public headers.

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metacomp/encoder.hpp"
#include "metacomp/episode.hpp"
#include "metacomp/meta.hpp"
#include "metacomp/world.hpp"

namespace metacomp::detail {

using nlohmann::json;

/// Reject unknown keys so config typos fail loudly with the field named.
inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& section) {
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw std::invalid_argument("config: unknown field '" + section + "." + key + "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

// ---- world ----

inline json world_config_to_json(const world::WorldConfig& c) {
  return json{{"n_attributes", c.n_attributes},
              {"n_objects", c.n_objects},
              {"n_context", c.n_context},
              {"pair_count", c.pair_count},
              {"novel_pair_count", c.novel_pair_count},
              {"instances_per_pair", c.instances_per_pair},
              {"feature_dim", c.feature_dim},
              {"noise_level", c.noise_level},
              {"attr_strength", c.attr_strength},
              {"n_distractor_regions", c.n_distractor_regions},
              {"ctx_min", c.ctx_min},
              {"ctx_max", c.ctx_max},
              {"verb_noun_fraction", c.verb_noun_fraction},
              {"seed", c.seed}};
}

inline world::WorldConfig world_config_from_json(const json& j) {
  check_keys(j,
             {"n_attributes", "n_objects", "n_context", "pair_count", "novel_pair_count",
              "instances_per_pair", "feature_dim", "noise_level", "attr_strength",
              "n_distractor_regions", "ctx_min", "ctx_max", "verb_noun_fraction", "seed"},
             "world");
  world::WorldConfig c;
  c.n_attributes = get_or(j, "n_attributes", c.n_attributes);
  c.n_objects = get_or(j, "n_objects", c.n_objects);
  c.n_context = get_or(j, "n_context", c.n_context);
  c.pair_count = get_or(j, "pair_count", c.pair_count);
  c.novel_pair_count = get_or(j, "novel_pair_count", c.novel_pair_count);
  c.instances_per_pair = get_or(j, "instances_per_pair", c.instances_per_pair);
  c.feature_dim = get_or(j, "feature_dim", c.feature_dim);
  c.noise_level = get_or(j, "noise_level", c.noise_level);
  c.attr_strength = get_or(j, "attr_strength", c.attr_strength);
  c.n_distractor_regions = get_or(j, "n_distractor_regions", c.n_distractor_regions);
  c.ctx_min = get_or(j, "ctx_min", c.ctx_min);
  c.ctx_max = get_or(j, "ctx_max", c.ctx_max);
  c.verb_noun_fraction = get_or(j, "verb_noun_fraction", c.verb_noun_fraction);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

// ---- encoder ----

inline json encoder_config_to_json(const encoder::EncoderConfig& c) {
  return json{{"d", c.d},
              {"layers", c.layers},
              {"heads", c.heads},
              {"vocab_size", c.vocab_size},
              {"region_feat_dim", c.region_feat_dim},
              {"max_seq_len", c.max_seq_len},
              {"mlp_hidden", c.mlp_hidden},
              {"arch", encoder::arch_name(c.arch)}};
}

inline encoder::EncoderConfig encoder_config_from_json(const json& j) {
  check_keys(j, {"d", "layers", "heads", "vocab_size", "region_feat_dim", "max_seq_len",
                 "mlp_hidden", "arch"},
             "encoder");
  encoder::EncoderConfig c;
  c.d = get_or(j, "d", c.d);
  c.layers = get_or(j, "layers", c.layers);
  c.heads = get_or(j, "heads", c.heads);
  c.vocab_size = get_or(j, "vocab_size", c.vocab_size);
  c.region_feat_dim = get_or(j, "region_feat_dim", c.region_feat_dim);
  c.max_seq_len = get_or(j, "max_seq_len", c.max_seq_len);
  c.mlp_hidden = get_or(j, "mlp_hidden", c.mlp_hidden);
  if (j.contains("arch")) c.arch = encoder::arch_from_name(j.at("arch").get<std::string>());
  return c;
}

// ---- MLM training ----

inline json mlm_train_to_json(const encoder::MlmTrainConfig& c) {
  return json{
      {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"seed", c.seed}};
}

inline encoder::MlmTrainConfig mlm_train_from_json(const json& j, const std::string& section) {
  check_keys(j, {"epochs", "batch_size", "lr", "seed"}, section);
  encoder::MlmTrainConfig c;
  c.epochs = get_or(j, "epochs", c.epochs);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.lr = get_or(j, "lr", c.lr);
  c.seed = get_or(j, "seed", c.seed);
  return c;
}

// ---- meta ----

inline json meta_config_to_json(const meta::MetaConfig& c) {
  return json{{"inner_lr", c.inner_lr},
              {"outer_lr", c.outer_lr},
              {"inner_steps_train", c.inner_steps_train},
              {"inner_steps_test", c.inner_steps_test},
              {"episodes_per_outer", c.episodes_per_outer},
              {"order", meta::order_name(c.order)},
              {"support_mode", episode::support_mode_name(c.support_mode)},
              {"k", c.k},
              {"query_granularity",
               c.granularity == episode::QueryGranularity::kPair ? "pair" : "slot"},
              {"verbalize_train", c.verbalize_train},
              {"verbalize_test", c.verbalize_test}};
}

inline meta::MetaConfig meta_config_from_json(const json& j) {
  check_keys(j,
             {"inner_lr", "outer_lr", "inner_steps_train", "inner_steps_test",
              "episodes_per_outer", "order", "support_mode", "k", "query_granularity",
              "verbalize_train", "verbalize_test"},
             "meta");
  meta::MetaConfig c;
  c.inner_lr = get_or(j, "inner_lr", c.inner_lr);
  c.outer_lr = get_or(j, "outer_lr", c.outer_lr);
  c.inner_steps_train = get_or(j, "inner_steps_train", c.inner_steps_train);
  c.inner_steps_test = get_or(j, "inner_steps_test", c.inner_steps_test);
  c.episodes_per_outer = get_or(j, "episodes_per_outer", c.episodes_per_outer);
  if (j.contains("order")) c.order = meta::order_from_name(j.at("order").get<std::string>());
  if (j.contains("support_mode")) {
    c.support_mode = episode::support_mode_from_name(j.at("support_mode").get<std::string>());
  }
  c.k = get_or(j, "k", c.k);
  if (j.contains("query_granularity")) {
    const auto s = j.at("query_granularity").get<std::string>();
    if (s == "pair") {
      c.granularity = episode::QueryGranularity::kPair;
    } else if (s == "slot") {
      c.granularity = episode::QueryGranularity::kSlot;
    } else {
      throw std::invalid_argument("config: meta.query_granularity must be 'pair' or 'slot'");
    }
  }
  c.verbalize_train = get_or(j, "verbalize_train", c.verbalize_train);
  c.verbalize_test = get_or(j, "verbalize_test", c.verbalize_test);
  return c;
}

inline json meta_train_options_to_json(const meta::MetaTrainOptions& o) {
  return json{{"epochs", o.epochs},
              {"seed", o.seed},
              {"eval_every", o.eval_every},
              {"val_subsample", o.val_subsample},
              {"val_inner_steps", o.val_inner_steps}};
}

inline meta::MetaTrainOptions meta_train_options_from_json(const json& j) {
  check_keys(j, {"epochs", "seed", "eval_every", "val_subsample", "val_inner_steps"},
             "meta_train");
  meta::MetaTrainOptions o;
  o.epochs = get_or(j, "epochs", o.epochs);
  o.seed = get_or(j, "seed", o.seed);
  o.eval_every = get_or(j, "eval_every", o.eval_every);
  o.val_subsample = get_or(j, "val_subsample", o.val_subsample);
  o.val_inner_steps = get_or(j, "val_inner_steps", o.val_inner_steps);
  return o;
}

}  // namespace metacomp::detail
