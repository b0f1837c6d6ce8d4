#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metacomp/autodiff.hpp"
#include "metacomp/optim.hpp"
#include "metacomp/world.hpp"

namespace metacomp::encoder {

enum class Arch : std::uint8_t { kOneStream, kTwoStream };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& s);

/// Compact masked-concept encoder: token + position embeddings, a region
/// projection, `layers` fusion blocks and a two-layer MLP prediction head.
/// One-stream fuses text and regions in a joint self-attention stack;
/// two-stream runs separate self-attention stacks with text-to-region
/// cross-attention on top. Both expose identical operation contracts.
struct EncoderConfig {
  int d = 64;
  int layers = 2;
  int heads = 4;
  int vocab_size = 0;
  int region_feat_dim = 16;
  int max_seq_len = 16;
  int mlp_hidden = 0;  // 0 -> 2*d
  Arch arch = Arch::kOneStream;

  int hidden() const { return mlp_hidden > 0 ? mlp_hidden : 2 * d; }
  int head_dim() const { return d / heads; }
  void validate() const;
};

struct ModelParams {
  EncoderConfig config;
  autodiff::ParamVector values;

  std::string fingerprint() const { return values.fingerprint(); }
};

/// Deterministic from-scratch initialization; no pretrained weights anywhere.
ModelParams init_params(const EncoderConfig& config, std::uint64_t seed);

/// Closed-form trainable parameter count for a config (layout invariant).
std::size_t param_count(const EncoderConfig& config);

// ---- graph-level forward (used by training and the meta inner loop) ----

struct SlotNodes {
  autodiff::NodeId attr = autodiff::kNoNode;  // 1 x d
  autodiff::NodeId obj = autodiff::kNoNode;   // 1 x d
};

SlotNodes encode_slots_nodes(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                             const EncoderConfig& config, const world::Instance& instance);

/// Full-vocabulary MLM logits for one slot vector (1 x d) -> vector of size V.
autodiff::NodeId mlm_logits_nodes(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                                  const EncoderConfig& config, autodiff::NodeId slot);

/// Cross-entropy of one slot against `gold`. With a non-empty candidate list
/// the softmax is restricted to the candidates (the verbalizer's training
/// path); returns kNoNode when gold is outside the candidate set.
autodiff::NodeId slot_loss_nodes(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                                 const EncoderConfig& config, autodiff::NodeId logits,
                                 world::TokenId gold, std::span<const world::TokenId> candidates);

struct SlotCandidates {
  std::vector<world::TokenId> attr;  // empty = unrestricted
  std::vector<world::TokenId> obj;
};

/// Mean masked-slot cross-entropy for one instance (both slots); kNoNode if
/// every slot term was skipped by candidate restriction.
autodiff::NodeId instance_loss_nodes(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                                     const EncoderConfig& config, const world::Instance& instance,
                                     const SlotCandidates* restrict_to = nullptr);

/// Mean of instance losses over a batch; kNoNode if no instance contributed.
autodiff::NodeId batch_loss_nodes(autodiff::Graph& g, const autodiff::ParamNodes& theta,
                                  const EncoderConfig& config,
                                  std::span<const world::Instance> batch,
                                  const SlotCandidates* restrict_to = nullptr);

// ---- value-level conveniences ----

std::pair<Tensor, Tensor> encode_slots(const ModelParams& params, const world::Instance& instance);
std::vector<double> mlm_logits(const ModelParams& params, const Tensor& slot_vector);
world::TokenId argmax_token(std::span<const double> logits);  // smallest-id tie-break

// ---- plain MLM training (retriever encoder & train-from-scratch baseline) ----

struct MlmTrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct MlmTrainLog {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
  // masking audit: concept slots must always be masked, context tokens never
  std::size_t concept_slots_total = 0;
  std::size_t concept_slots_masked = 0;
  std::size_t context_tokens_masked = 0;
};

MlmTrainLog train_mlm(ModelParams& params, std::span<const world::Instance> train,
                      const MlmTrainConfig& config);

// ---- checkpoint file (named-segment binary, deterministic layout) ----

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const ModelParams& params, const std::string& path,
                     const world::Provenance& provenance);

struct LoadedCheckpoint {
  ModelParams params;
  world::Provenance provenance;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace metacomp::encoder
