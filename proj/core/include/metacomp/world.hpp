#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace metacomp::world {

using TokenId = std::int32_t;

/// Free-form key/value metadata embedded in every artifact file
/// (config hashes, input artifact hashes, tool version).
using Provenance = std::map<std::string, std::string>;

/// Token id layout: [PAD, CLS, MASK] ++ attributes ++ objects ++ context.
class ConceptVocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kMask = 2;
  static constexpr TokenId kSpecialCount = 3;

  ConceptVocabulary() = default;
  ConceptVocabulary(std::vector<std::string> attributes, std::vector<std::string> objects,
                    std::vector<std::string> context);

  int size() const { return kSpecialCount + n_attr_ + n_obj_ + n_ctx_; }
  int attr_count() const { return n_attr_; }
  int object_count() const { return n_obj_; }
  int context_count() const { return n_ctx_; }

  TokenId attr_id(int i) const { return kSpecialCount + i; }
  TokenId object_id(int i) const { return kSpecialCount + n_attr_ + i; }
  TokenId context_id(int i) const { return kSpecialCount + n_attr_ + n_obj_ + i; }

  bool is_special(TokenId t) const { return t >= 0 && t < kSpecialCount; }
  bool is_attr(TokenId t) const { return t >= attr_id(0) && t < attr_id(0) + n_attr_; }
  bool is_object(TokenId t) const { return t >= object_id(0) && t < object_id(0) + n_obj_; }
  bool is_context(TokenId t) const { return t >= context_id(0) && t < context_id(0) + n_ctx_; }

  const std::string& token_name(TokenId t) const;
  const std::vector<std::string>& attributes() const { return attributes_; }
  const std::vector<std::string>& objects() const { return objects_; }
  const std::vector<std::string>& context() const { return context_; }

 private:
  std::vector<std::string> attributes_, objects_, context_;
  std::vector<std::string> names_;  // full id -> name table
  int n_attr_ = 0, n_obj_ = 0, n_ctx_ = 0;
};

enum class PairKind : std::uint8_t { kAdjNoun, kVerbNoun };

const char* pair_kind_name(PairKind k);
PairKind pair_kind_from_name(const std::string& s);

/// An (attribute, object) composition. `kind` is a descriptive label;
/// identity and ordering are on the token pair alone.
struct CompositionalPair {
  TokenId attr = -1;
  TokenId obj = -1;
  PairKind kind = PairKind::kAdjNoun;

  friend bool operator==(const CompositionalPair& a, const CompositionalPair& b) {
    return a.attr == b.attr && a.obj == b.obj;
  }
  friend std::strong_ordering operator<=>(const CompositionalPair& a,
                                          const CompositionalPair& b) {
    if (auto c = a.attr <=> b.attr; c != 0) return c;
    return a.obj <=> b.obj;
  }
};

struct Region {
  std::vector<double> feat;
  std::array<double, 4> box{};  // x, y, w, h in [0,1]; no label field
};

/// One grounded example. The caption carries MASK at the two concept slots;
/// the gold tokens never appear in the caption itself.
struct Instance {
  std::vector<TokenId> caption;
  std::vector<Region> regions;
  int attr_slot = -1;
  int obj_slot = -1;
  CompositionalPair gold;

  bool operator==(const Instance&) const = default;
};

struct WorldConfig {
  int n_attributes = 10;
  int n_objects = 12;
  int n_context = 30;
  int pair_count = 72;
  int novel_pair_count = 24;
  int instances_per_pair = 20;
  int feature_dim = 16;
  double noise_level = 0.30;
  double attr_strength = 0.60;  // attribute offset scale relative to object prototypes
  int n_distractor_regions = 2;
  int ctx_min = 3;
  int ctx_max = 8;
  double verb_noun_fraction = 0.5;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument naming the offending field
};

struct GeneratedWorld {
  WorldConfig config;
  ConceptVocabulary vocab;
  std::vector<CompositionalPair> pairs;  // pairs that actually occur, sorted
  std::vector<Instance> instances;       // grouped by pair, generation order
};

/// Pure function of (config, seed): attribute/object prototypes in feature
/// space, pair prototype = object prototype + attribute offset, per-instance
/// Gaussian noise, templated captions with distractor context tokens.
GeneratedWorld generate_world(const WorldConfig& config);

/// Pick `count` held-out pairs such that every chosen pair's attribute and
/// object still occur in at least one remaining (seen) pair.
std::vector<CompositionalPair> choose_novel_pairs(const GeneratedWorld& world, int count,
                                                  std::uint64_t seed);

struct DatasetSplits {
  ConceptVocabulary vocab;
  int feature_dim = 0;
  std::vector<Instance> train;
  std::vector<Instance> validation;  // seen + novel
  std::vector<Instance> test_seen;
  std::vector<Instance> test_novel;
  std::vector<CompositionalPair> novel_pairs;  // sorted

  bool is_novel(const CompositionalPair& p) const;
  bool operator==(const DatasetSplits&) const;
};

/// Deterministic per-pair allocation. Seen pairs feed train/validation/
/// test-seen; novel pairs feed validation/test-novel only.
DatasetSplits split_novel(const GeneratedWorld& world,
                          const std::vector<CompositionalPair>& novel_pairs,
                          double val_fraction, double test_fraction = 0.25);

/// Exhaustive leak scan: checks gold membership and unmasked caption
/// adjacencies against the novel set for every train instance. This is the
/// oracle the split construction is verified against, not a by-construction
/// argument.
struct HygieneReport {
  std::size_t instances_scanned = 0;
  std::vector<std::string> violations;
  bool clean() const { return violations.empty(); }
};
HygieneReport scan_for_novel_leaks(const DatasetSplits& splits);

// ---- JSONL dataset files ----
// Line 1 is a header object carrying schema version, feature dim, the novel
// pair set and provenance; each further line is one instance with its split.
inline constexpr int kDatasetSchemaVersion = 1;

void export_jsonl(const DatasetSplits& splits, const std::string& data_path,
                  const std::string& vocab_path, const Provenance& provenance);

struct ImportedDataset {
  DatasetSplits splits;
  Provenance provenance;
};
ImportedDataset import_jsonl(const std::string& data_path, const std::string& vocab_path);

}  // namespace metacomp::world
