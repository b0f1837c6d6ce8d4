#include "metacomp/verbalizer.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace metacomp::verbalizer {

SupportVocab support_vocab(const episode::Episode& ep) {
  if (ep.support.empty()) {
    throw std::invalid_argument("support_vocab: empty support set (verbalizer inapplicable)");
  }
  SupportVocab out;
  for (const auto& inst : ep.support) {
    out.attr_candidates.push_back(inst.gold.attr);
    out.obj_candidates.push_back(inst.gold.obj);
  }
  for (auto* v : {&out.attr_candidates, &out.obj_candidates}) {
    std::sort(v->begin(), v->end());
    v->erase(std::unique(v->begin(), v->end()), v->end());
  }
  return out;
}

std::vector<double> mask_logits(std::span<const double> logits,
                                std::span<const world::TokenId> candidates) {
  if (candidates.empty()) throw std::invalid_argument("mask_logits: empty candidate set");
  std::vector<double> out(logits.size(), -std::numeric_limits<double>::infinity());
  for (world::TokenId t : candidates) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.size()) {
      throw std::invalid_argument("mask_logits: candidate id out of range");
    }
    out[static_cast<std::size_t>(t)] = logits[static_cast<std::size_t>(t)];
  }
  return out;
}

world::TokenId restricted_argmax(std::span<const double> logits,
                                 std::span<const world::TokenId> candidates) {
  if (candidates.empty()) throw std::invalid_argument("restricted_argmax: empty candidate set");
  world::TokenId best = -1;
  double best_v = -std::numeric_limits<double>::infinity();
  std::vector<world::TokenId> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  for (world::TokenId t : sorted) {
    if (t < 0 || static_cast<std::size_t>(t) >= logits.size()) {
      throw std::invalid_argument("restricted_argmax: candidate id out of range");
    }
    const double v = logits[static_cast<std::size_t>(t)];
    if (v > best_v) {  // strict: earlier (smaller) ids win ties
      best_v = v;
      best = t;
    }
  }
  return best;
}

}  // namespace metacomp::verbalizer
