#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metacomp/retriever.hpp"
#include "metacomp/world.hpp"

namespace metacomp::episode {

enum class SupportMode : std::uint8_t { kTopK, kDivK, kOracle, kNoRetrieval };

const char* support_mode_name(SupportMode m);
SupportMode support_mode_from_name(const std::string& s);

enum class QueryGranularity : std::uint8_t { kPair, kSlot };

struct EpisodeOptions {
  SupportMode mode = SupportMode::kDivK;
  int k = 4;
  QueryGranularity granularity = QueryGranularity::kPair;
};

/// One meta-learning task: retrieved support instances (gold labels exposed,
/// they are training data) and a single query instance whose gold is only for
/// the evaluator.
struct Episode {
  std::vector<world::Instance> support;
  std::vector<std::int32_t> support_refs;  // train-split indices, audit trail
  world::Instance query;
  SupportMode mode = SupportMode::kDivK;
  int k = 0;
};

/// Pair-level query key: mean of the two slot encodings, L2-renormalized.
/// Reads only the masked caption and regions, never the gold labels.
std::vector<double> query_key(const encoder::ModelParams& enc, const world::Instance& query);

/// Build one episode. Top-K/Div-K are gold-blind; Oracle reads query.gold by
/// contract. Support instances are deduplicated by instance-ref in hit order.
/// Requires the db to have been built with the same encoder snapshot.
Episode build_episode(const retriever::ConceptDb& db, const encoder::ModelParams& enc,
                      std::span<const world::Instance> train, const world::Instance& query,
                      const EpisodeOptions& options);

/// As build_episode, but an Oracle query whose gold element concept is absent
/// from the db reports std::nullopt (the caller excludes that pair) instead of
/// throwing.
std::optional<Episode> try_build_episode(const retriever::ConceptDb& db,
                                         const encoder::ModelParams& enc,
                                         std::span<const world::Instance> train,
                                         const world::Instance& query,
                                         const EpisodeOptions& options);

/// One episode per split instance, order shuffled deterministically by seed.
std::vector<Episode> episode_stream(const retriever::ConceptDb& db,
                                    const encoder::ModelParams& enc,
                                    std::span<const world::Instance> train,
                                    std::span<const world::Instance> split,
                                    const EpisodeOptions& options, std::uint64_t seed);

/// Inspection dump, one JSON line per episode: target context/concepts and
/// the retrieved contexts/concepts.
void dump_episodes(std::span<const Episode> episodes, const world::ConceptVocabulary& vocab,
                   const std::string& path);

}  // namespace metacomp::episode
