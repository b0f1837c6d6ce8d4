#pragma once

#include <span>
#include <vector>

#include "metacomp/episode.hpp"
#include "metacomp/world.hpp"

namespace metacomp::verbalizer {

/// Candidate element concepts drawn from the support set, partitioned by slot
/// role. Restricting query predictions to these sets is what forces the
/// learner to use retrieved evidence instead of memorized labels.
struct SupportVocab {
  std::vector<world::TokenId> attr_candidates;  // sorted, unique
  std::vector<world::TokenId> obj_candidates;
};

/// Throws std::invalid_argument on an empty support set (the verbalizer is
/// inapplicable there; callers fall back to unrestricted prediction).
SupportVocab support_vocab(const episode::Episode& ep);

/// Logits outside the candidate set are mapped to -infinity; candidate logits
/// pass through unchanged, so relative order within candidates is preserved.
std::vector<double> mask_logits(std::span<const double> logits,
                                std::span<const world::TokenId> candidates);

/// Argmax restricted to the candidates, smallest-token-id tie-break.
world::TokenId restricted_argmax(std::span<const double> logits,
                                 std::span<const world::TokenId> candidates);

}  // namespace metacomp::verbalizer
