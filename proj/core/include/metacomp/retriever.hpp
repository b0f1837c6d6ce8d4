#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "metacomp/encoder.hpp"
#include "metacomp/world.hpp"

namespace metacomp::retriever {

enum class SlotRole : std::uint8_t { kAttr = 0, kObj = 1 };

/// One element-concept entry: unit-norm key vector pointing back at the train
/// instance and slot it was encoded from.
struct DbEntry {
  std::vector<double> key;        // ||key|| = 1
  std::int32_t instance_ref = 0;  // index into the train split
  world::TokenId concept_label = -1;
  SlotRole slot_role = SlotRole::kAttr;
};

struct Hit {
  std::size_t entry = 0;  // index into the database
  double score = 0.0;     // cosine similarity, in [-1, 1]
};

struct RetrievalResult {
  std::vector<Hit> hits;  // similarity-descending, ties by lower entry index
  bool truncated = false;        // K exceeded the database size
  bool label_shortfall = false;  // fewer distinct labels than requested
  bool missing_gold_element = false;  // oracle-only: element absent from the db
};

/// Immutable element-concept store with exact (flat, non-approximate) cosine
/// search. Two entries per train instance: the attribute slot and the object
/// slot encodings of the masked caption.
class ConceptDb {
 public:
  static ConceptDb build(const encoder::ModelParams& enc,
                         std::span<const world::Instance> train);

  std::size_t size() const { return entries_.size(); }
  int dim() const { return dim_; }
  const DbEntry& entry(std::size_t i) const { return entries_.at(i); }
  const std::string& encoder_fingerprint() const { return encoder_fingerprint_; }

  void save(const std::string& path, const world::Provenance& provenance) const;
  struct Loaded {
    ConceptDb db;
    world::Provenance provenance;
  };
  static Loaded load(const std::string& path);

 private:
  int dim_ = 0;
  std::vector<DbEntry> entries_;
  std::string encoder_fingerprint_;
};

inline constexpr int kDbVersion = 1;

/// Exact top-K by cosine similarity (brute-force scan over all entries).
RetrievalResult query_topk(const ConceptDb& db, std::span<const double> key, int k);

/// Top-K with pairwise-distinct concept labels: walk the full similarity
/// ranking, keep the first occurrence of each label.
RetrievalResult query_div_k(const ConceptDb& db, std::span<const double> key, int k);

/// Diagnostic retriever: guarantees the gold attribute and object labels each
/// appear in the result (best-scoring entry per label), remaining slots filled
/// by the diverse ranking. Sets missing_gold_element instead of failing when
/// an element has no entry at all.
RetrievalResult query_oracle(const ConceptDb& db, std::span<const double> key,
                             const world::CompositionalPair& gold, int k);

/// L2-normalize in place; returns false for (near-)zero vectors.
bool l2_normalize(std::span<double> v);

}  // namespace metacomp::retriever
