#include "metacomp/episode.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metacomp/rng.hpp"

namespace metacomp::episode {

using nlohmann::json;

const char* support_mode_name(SupportMode m) {
  switch (m) {
    case SupportMode::kTopK: return "top_k";
    case SupportMode::kDivK: return "div_k";
    case SupportMode::kOracle: return "oracle";
    case SupportMode::kNoRetrieval: return "no_retrieval";
  }
  return "?";
}

SupportMode support_mode_from_name(const std::string& s) {
  if (s == "top_k") return SupportMode::kTopK;
  if (s == "div_k") return SupportMode::kDivK;
  if (s == "oracle") return SupportMode::kOracle;
  if (s == "no_retrieval") return SupportMode::kNoRetrieval;
  throw std::invalid_argument("unknown support mode '" + s + "'");
}

std::vector<double> query_key(const encoder::ModelParams& enc, const world::Instance& query) {
  auto [attr_vec, obj_vec] = encoder::encode_slots(enc, query);
  std::vector<double> key(attr_vec.size());
  for (std::size_t i = 0; i < key.size(); ++i) key[i] = 0.5 * (attr_vec[i] + obj_vec[i]);
  if (!retriever::l2_normalize(key)) {
    throw std::runtime_error("query_key: zero-norm query encoding");
  }
  return key;
}

namespace {

/// Slot-level querying (config alternative): retrieve per slot, merge by
/// score, dedup by entry.
retriever::RetrievalResult query_slotwise(const retriever::ConceptDb& db,
                                          const encoder::ModelParams& enc,
                                          const world::Instance& query,
                                          const EpisodeOptions& options) {
  auto [attr_vec, obj_vec] = encoder::encode_slots(enc, query);
  std::vector<double> ka = attr_vec.raw();
  std::vector<double> ko = obj_vec.raw();
  if (!retriever::l2_normalize(ka) || !retriever::l2_normalize(ko)) {
    throw std::runtime_error("query_slotwise: zero-norm query encoding");
  }
  auto run = [&](std::span<const double> key) {
    return options.mode == SupportMode::kDivK ? retriever::query_div_k(db, key, options.k)
                                              : retriever::query_topk(db, key, options.k);
  };
  const auto ra = run(ka);
  const auto ro = run(ko);
  retriever::RetrievalResult merged;
  merged.truncated = ra.truncated || ro.truncated;
  merged.label_shortfall = ra.label_shortfall || ro.label_shortfall;
  std::vector<retriever::Hit> all;
  all.insert(all.end(), ra.hits.begin(), ra.hits.end());
  all.insert(all.end(), ro.hits.begin(), ro.hits.end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry < b.entry;
  });
  std::set<std::size_t> seen;
  for (const auto& h : all) {
    if (static_cast<int>(merged.hits.size()) == options.k) break;
    if (seen.insert(h.entry).second) merged.hits.push_back(h);
  }
  return merged;
}

}  // namespace

std::optional<Episode> try_build_episode(const retriever::ConceptDb& db,
                                         const encoder::ModelParams& enc,
                                         std::span<const world::Instance> train,
                                         const world::Instance& query,
                                         const EpisodeOptions& options) {
  Episode ep;
  ep.query = query;
  ep.mode = options.mode;
  ep.k = options.k;
  if (options.mode == SupportMode::kNoRetrieval) return ep;

  if (options.k < 1) throw std::invalid_argument("build_episode: K must be >= 1");
  if (db.size() == 0) throw std::invalid_argument("build_episode: empty database");
  if (db.encoder_fingerprint() != enc.fingerprint()) {
    throw std::runtime_error(
        "build_episode: database was built with a different encoder snapshot");
  }

  retriever::RetrievalResult res;
  switch (options.mode) {
    case SupportMode::kTopK:
    case SupportMode::kDivK:
      if (options.granularity == QueryGranularity::kSlot) {
        res = query_slotwise(db, enc, query, options);
      } else {
        const auto key = query_key(enc, query);
        res = options.mode == SupportMode::kDivK ? retriever::query_div_k(db, key, options.k)
                                                 : retriever::query_topk(db, key, options.k);
      }
      break;
    case SupportMode::kOracle: {
      const auto key = query_key(enc, query);
      res = retriever::query_oracle(db, key, query.gold, options.k);
      if (res.missing_gold_element) return std::nullopt;
      break;
    }
    case SupportMode::kNoRetrieval:
      break;
  }

  std::set<std::int32_t> seen_refs;
  for (const auto& h : res.hits) {
    const auto& e = db.entry(h.entry);
    if (!seen_refs.insert(e.instance_ref).second) continue;  // dedup by instance
    if (e.instance_ref < 0 || static_cast<std::size_t>(e.instance_ref) >= train.size()) {
      throw std::runtime_error("build_episode: dangling instance_ref in database");
    }
    ep.support_refs.push_back(e.instance_ref);
    ep.support.push_back(train[static_cast<std::size_t>(e.instance_ref)]);
  }
  return ep;
}

Episode build_episode(const retriever::ConceptDb& db, const encoder::ModelParams& enc,
                      std::span<const world::Instance> train, const world::Instance& query,
                      const EpisodeOptions& options) {
  auto ep = try_build_episode(db, enc, train, query, options);
  if (!ep) {
    throw std::runtime_error("build_episode: gold element concept absent from the database");
  }
  return std::move(*ep);
}

std::vector<Episode> episode_stream(const retriever::ConceptDb& db,
                                    const encoder::ModelParams& enc,
                                    std::span<const world::Instance> train,
                                    std::span<const world::Instance> split,
                                    const EpisodeOptions& options, std::uint64_t seed) {
  if (split.empty()) throw std::invalid_argument("episode_stream: empty split");
  std::vector<std::size_t> order(split.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(Rng::derive(seed, 0xe9));
  rng.shuffle(order);

  std::vector<Episode> out;
  out.reserve(split.size());
  for (std::size_t i : order) {
    out.push_back(build_episode(db, enc, train, split[i], options));
  }
  return out;
}

void dump_episodes(std::span<const Episode> episodes, const world::ConceptVocabulary& vocab,
                   const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dump_episodes: cannot write " + path);
  auto caption_text = [&](const world::Instance& inst) {
    std::string s;
    for (auto t : inst.caption) {
      if (!s.empty()) s += ' ';
      s += vocab.token_name(t);
    }
    return s;
  };
  auto pair_text = [&](const world::CompositionalPair& p) {
    return vocab.token_name(p.attr) + " " + vocab.token_name(p.obj);
  };
  for (const auto& ep : episodes) {
    json retrieved_ctx = json::array();
    json retrieved_concepts = json::array();
    for (const auto& s : ep.support) {
      retrieved_ctx.push_back(caption_text(s));
      retrieved_concepts.push_back(pair_text(s.gold));
    }
    json j{{"target_context", caption_text(ep.query)},
           {"target_concepts", pair_text(ep.query.gold)},
           {"retrieved_contexts", std::move(retrieved_ctx)},
           {"retrieved_concepts", std::move(retrieved_concepts)},
           {"mode", support_mode_name(ep.mode)},
           {"k", ep.k}};
    out << j.dump() << '\n';
  }
}

}  // namespace metacomp::episode
