#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "metacomp/meta.hpp"

namespace metacomp::eval {

/// The five evaluated configurations. Scratch and MamlNoRet predict without
/// support; the retrieval methods fast-adapt and predict through the
/// verbalizer.
enum class Method : std::uint8_t { kScratch, kMamlNoRet, kTopK, kDivK, kOracleK };

const char* method_name(Method m);
Method method_from_name(const std::string& s);
inline constexpr Method kAllMethods[] = {Method::kScratch, Method::kMamlNoRet, Method::kTopK,
                                         Method::kDivK, Method::kOracleK};

struct SplitMetrics {
  int total = 0;
  int pair_correct = 0;
  int attr_correct = 0;
  int obj_correct = 0;

  double pair_acc() const { return total ? static_cast<double>(pair_correct) / total : 0.0; }
  double attr_acc() const { return total ? static_cast<double>(attr_correct) / total : 0.0; }
  double obj_acc() const { return total ? static_cast<double>(obj_correct) / total : 0.0; }

  bool operator==(const SplitMetrics&) const = default;
};

struct MetricsReport {
  SplitMetrics seen;
  SplitMetrics novel;
  std::string fingerprint;  // hash of (world seed, model seed, mode, K)

  bool operator==(const MetricsReport&) const = default;
};

struct PredictionRecord {
  std::string split;  // "seen" | "novel"
  int index = 0;      // position within the evaluated subset
  world::TokenId gold_attr = -1, gold_obj = -1;
  world::TokenId pred_attr = -1, pred_obj = -1;
  bool verbalized = false;
  bool attr_in_candidates = false;
  bool obj_in_candidates = false;
  int inner_steps = 0;
  double query_loss = 0.0;
};

struct EvalOptions {
  Method method = Method::kDivK;
  int max_instances = 0;  // per split; 0 = everything
  std::uint64_t subsample_seed = 0;
  std::uint64_t world_seed = 0;  // fingerprint components
  std::uint64_t model_seed = 0;
};

struct EvalOutput {
  MetricsReport report;
  std::vector<PredictionRecord> dump;
  int verbalizer_violations = 0;       // must stay 0: predictions outside candidates
  int oracle_excluded = 0;             // oracle queries skipped for missing elements
  double mean_novel_query_loss = 0.0;  // over novel records with a defined loss
};

std::string report_fingerprint(std::uint64_t world_seed, std::uint64_t model_seed,
                               const std::string& mode, int k);

/// Pair correct iff both slots correct. Deterministic; per-instance dump kept
/// for audit; theta is never modified.
EvalOutput evaluate(const encoder::ModelParams& learner,
                    const encoder::ModelParams& retriever_encoder,
                    const retriever::ConceptDb& db, const world::DatasetSplits& splits,
                    const meta::MetaConfig& config, const EvalOptions& options);

/// Recount a report from its per-instance dump (must reproduce the summary).
MetricsReport rebuild_report(std::span<const PredictionRecord> dump,
                             const std::string& fingerprint);

void write_predictions_csv(std::span<const PredictionRecord> dump, const std::string& path);
void write_report_csv(const MetricsReport& report, const std::string& method,
                      const std::string& path, const world::Provenance& provenance);
void write_report_json(const MetricsReport& report, const std::string& method,
                       const std::string& path, const world::Provenance& provenance);

// ---- retrieval accuracy (top-K label hit rates per split) ----

struct HitRates {
  int total = 0;
  int attr_hits = 0;
  int obj_hits = 0;
  int pair_hits = 0;

  double attr_rate() const { return total ? static_cast<double>(attr_hits) / total : 0.0; }
  double obj_rate() const { return total ? static_cast<double>(obj_hits) / total : 0.0; }
  double pair_rate() const { return total ? static_cast<double>(pair_hits) / total : 0.0; }
};

struct RetrievalReport {
  HitRates seen;
  HitRates novel;
  int k = 0;
  episode::SupportMode mode = episode::SupportMode::kDivK;
};

/// Gold label present among the support candidate labels, per query.
RetrievalReport retrieval_accuracy(const retriever::ConceptDb& db,
                                   const encoder::ModelParams& retriever_encoder,
                                   const world::DatasetSplits& splits, int k,
                                   episode::SupportMode mode, int max_instances = 0,
                                   std::uint64_t subsample_seed = 0);

// ---- ablation table: methods x splits x metrics over seeds ----

struct AblationRow {
  std::string method;
  std::string split;   // "seen" | "novel"
  std::string metric;  // "pair" | "attr" | "obj"
  std::uint64_t seed = 0;
  double value = 0.0;
};

struct AblationCell {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation
  std::vector<double> values;
};

class AblationTable {
 public:
  void add(const std::string& method, const std::string& split, const std::string& metric,
           std::uint64_t seed, double value);
  const std::vector<AblationRow>& rows() const { return rows_; }
  AblationCell cell(const std::string& method, const std::string& split,
                    const std::string& metric) const;
  std::vector<double> per_seed(const std::string& method, const std::string& split,
                               const std::string& metric) const;

  std::string to_csv(const world::Provenance& provenance) const;  // method,split,metric,seed,value
  std::string summary_json(const world::Provenance& provenance) const;
  std::string human_table() const;  // Table-style layout per split

 private:
  std::vector<AblationRow> rows_;
};

}  // namespace metacomp::eval
