#include "metacomp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metacomp/hash.hpp"
#include "metacomp/rng.hpp"

namespace metacomp::eval {

using nlohmann::json;

const char* method_name(Method m) {
  switch (m) {
    case Method::kScratch: return "scratch";
    case Method::kMamlNoRet: return "maml_no_ret";
    case Method::kTopK: return "top_k";
    case Method::kDivK: return "div_k";
    case Method::kOracleK: return "oracle_k";
  }
  return "?";
}

Method method_from_name(const std::string& s) {
  for (Method m : kAllMethods) {
    if (s == method_name(m)) return m;
  }
  throw std::invalid_argument("unknown method '" + s + "'");
}

std::string report_fingerprint(std::uint64_t world_seed, std::uint64_t model_seed,
                               const std::string& mode, int k) {
  Fnv1a h;
  h.update(world_seed);
  h.update(model_seed);
  h.update(mode);
  h.update(static_cast<std::uint64_t>(k));
  return h.hex();
}

namespace {

std::vector<world::Instance> subsample(std::span<const world::Instance> all, int max_n,
                                       std::uint64_t seed) {
  if (max_n <= 0 || static_cast<std::size_t>(max_n) >= all.size()) {
    return {all.begin(), all.end()};
  }
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(Rng::derive(seed, 0xEA));
  rng.shuffle(idx);
  idx.resize(static_cast<std::size_t>(max_n));
  std::sort(idx.begin(), idx.end());
  std::vector<world::Instance> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(all[i]);
  return out;
}

episode::EpisodeOptions episode_options_for(Method method, const meta::MetaConfig& config) {
  episode::EpisodeOptions opts = config.episode_options();
  switch (method) {
    case Method::kScratch:
    case Method::kMamlNoRet:
      opts.mode = episode::SupportMode::kNoRetrieval;
      break;
    case Method::kTopK:
      opts.mode = episode::SupportMode::kTopK;
      break;
    case Method::kDivK:
      opts.mode = episode::SupportMode::kDivK;
      break;
    case Method::kOracleK:
      opts.mode = episode::SupportMode::kOracle;
      break;
  }
  return opts;
}

}  // namespace

EvalOutput evaluate(const encoder::ModelParams& learner,
                    const encoder::ModelParams& retriever_encoder,
                    const retriever::ConceptDb& db, const world::DatasetSplits& splits,
                    const meta::MetaConfig& config, const EvalOptions& options) {
  if (splits.test_seen.empty() && splits.test_novel.empty()) {
    throw std::invalid_argument("evaluate: both test splits are empty");
  }
  if (learner.config.vocab_size != retriever_encoder.config.vocab_size) {
    throw std::invalid_argument("evaluate: learner/retriever vocabulary mismatch");
  }

  const auto ep_opts = episode_options_for(options.method, config);

  EvalOutput out;
  out.report.fingerprint = report_fingerprint(options.world_seed, options.model_seed,
                                              support_mode_name(ep_opts.mode), ep_opts.k);

  double novel_loss_sum = 0.0;
  int novel_loss_count = 0;

  auto run_split = [&](std::span<const world::Instance> instances, const char* split_name,
                       SplitMetrics& metrics) {
    const auto subset = subsample(instances, options.max_instances, options.subsample_seed);
    int index = 0;
    for (const auto& inst : subset) {
      auto ep = episode::try_build_episode(db, retriever_encoder, splits.train, inst, ep_opts);
      if (!ep) {
        ++out.oracle_excluded;
        ++index;
        continue;
      }
      const auto pred = meta::test_time_predict(learner, *ep, config);

      PredictionRecord rec;
      rec.split = split_name;
      rec.index = index++;
      rec.gold_attr = inst.gold.attr;
      rec.gold_obj = inst.gold.obj;
      rec.pred_attr = pred.pair.attr;
      rec.pred_obj = pred.pair.obj;
      rec.verbalized = pred.verbalized;
      rec.attr_in_candidates = pred.attr_in_candidates;
      rec.obj_in_candidates = pred.obj_in_candidates;
      rec.inner_steps = pred.inner_steps_run;
      rec.query_loss = pred.query_loss;
      out.dump.push_back(rec);

      if (pred.verbalized) {
        const auto sv = verbalizer::support_vocab(*ep);
        const bool attr_ok = std::binary_search(sv.attr_candidates.begin(),
                                                sv.attr_candidates.end(), pred.pair.attr);
        const bool obj_ok = std::binary_search(sv.obj_candidates.begin(),
                                               sv.obj_candidates.end(), pred.pair.obj);
        if (!attr_ok || !obj_ok) ++out.verbalizer_violations;
      }

      const bool a = pred.pair.attr == inst.gold.attr;
      const bool o = pred.pair.obj == inst.gold.obj;
      ++metrics.total;
      metrics.attr_correct += a;
      metrics.obj_correct += o;
      metrics.pair_correct += a && o;

      if (std::string_view(split_name) == "novel" && std::isfinite(pred.query_loss)) {
        novel_loss_sum += pred.query_loss;
        ++novel_loss_count;
      }
    }
  };

  run_split(splits.test_seen, "seen", out.report.seen);
  run_split(splits.test_novel, "novel", out.report.novel);
  out.mean_novel_query_loss = novel_loss_count ? novel_loss_sum / novel_loss_count : 0.0;
  return out;
}

MetricsReport rebuild_report(std::span<const PredictionRecord> dump,
                             const std::string& fingerprint) {
  MetricsReport rep;
  rep.fingerprint = fingerprint;
  for (const auto& r : dump) {
    SplitMetrics& m = r.split == "seen" ? rep.seen : rep.novel;
    const bool a = r.pred_attr == r.gold_attr;
    const bool o = r.pred_obj == r.gold_obj;
    ++m.total;
    m.attr_correct += a;
    m.obj_correct += o;
    m.pair_correct += a && o;
  }
  return rep;
}

void write_predictions_csv(std::span<const PredictionRecord> dump, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_predictions_csv: cannot write " + path);
  out << "split,index,gold_attr,gold_obj,pred_attr,pred_obj,verbalized,attr_in_candidates,"
         "obj_in_candidates,inner_steps,query_loss\n";
  out << std::setprecision(17);
  for (const auto& r : dump) {
    out << r.split << ',' << r.index << ',' << r.gold_attr << ',' << r.gold_obj << ','
        << r.pred_attr << ',' << r.pred_obj << ',' << (r.verbalized ? 1 : 0) << ','
        << (r.attr_in_candidates ? 1 : 0) << ',' << (r.obj_in_candidates ? 1 : 0) << ','
        << r.inner_steps << ',' << r.query_loss << '\n';
  }
}

namespace {
void write_provenance_comments(std::ofstream& out, const world::Provenance& provenance) {
  for (const auto& [k, v] : provenance) out << "# " << k << "=" << v << '\n';
}
}  // namespace

void write_report_csv(const MetricsReport& report, const std::string& method,
                      const std::string& path, const world::Provenance& provenance) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_csv: cannot write " + path);
  write_provenance_comments(out, provenance);
  out << "# fingerprint=" << report.fingerprint << '\n';
  out << "method,split,metric,value,correct,total\n";
  out << std::setprecision(17);
  auto emit = [&](const char* split, const SplitMetrics& m) {
    out << method << ',' << split << ",pair," << m.pair_acc() << ',' << m.pair_correct << ','
        << m.total << '\n';
    out << method << ',' << split << ",attr," << m.attr_acc() << ',' << m.attr_correct << ','
        << m.total << '\n';
    out << method << ',' << split << ",obj," << m.obj_acc() << ',' << m.obj_correct << ','
        << m.total << '\n';
  };
  emit("seen", report.seen);
  emit("novel", report.novel);
}

void write_report_json(const MetricsReport& report, const std::string& method,
                       const std::string& path, const world::Provenance& provenance) {
  auto split_json = [](const SplitMetrics& m) {
    return json{{"total", m.total},
                {"pair_correct", m.pair_correct},
                {"attr_correct", m.attr_correct},
                {"obj_correct", m.obj_correct},
                {"pair_acc", m.pair_acc()},
                {"attr_acc", m.attr_acc()},
                {"obj_acc", m.obj_acc()}};
  };
  json j{{"method", method},
         {"fingerprint", report.fingerprint},
         {"seen", split_json(report.seen)},
         {"novel", split_json(report.novel)},
         {"provenance", provenance}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_report_json: cannot write " + path);
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// retrieval accuracy
// ---------------------------------------------------------------------------

RetrievalReport retrieval_accuracy(const retriever::ConceptDb& db,
                                   const encoder::ModelParams& retriever_encoder,
                                   const world::DatasetSplits& splits, int k,
                                   episode::SupportMode mode, int max_instances,
                                   std::uint64_t subsample_seed) {
  if (db.size() == 0) throw std::invalid_argument("retrieval_accuracy: empty database");
  RetrievalReport rep;
  rep.k = k;
  rep.mode = mode;
  episode::EpisodeOptions opts;
  opts.mode = mode;
  opts.k = k;

  auto run_split = [&](std::span<const world::Instance> instances, HitRates& rates) {
    if (instances.empty()) throw std::invalid_argument("retrieval_accuracy: empty split");
    const auto subset = subsample(instances, max_instances, subsample_seed);
    for (const auto& inst : subset) {
      auto ep = episode::try_build_episode(db, retriever_encoder, splits.train, inst, opts);
      if (!ep || ep->support.empty()) continue;
      const auto sv = verbalizer::support_vocab(*ep);
      const bool a = std::binary_search(sv.attr_candidates.begin(), sv.attr_candidates.end(),
                                        inst.gold.attr);
      const bool o = std::binary_search(sv.obj_candidates.begin(), sv.obj_candidates.end(),
                                        inst.gold.obj);
      ++rates.total;
      rates.attr_hits += a;
      rates.obj_hits += o;
      rates.pair_hits += a && o;
    }
  };
  run_split(splits.test_seen, rep.seen);
  run_split(splits.test_novel, rep.novel);
  return rep;
}

// ---------------------------------------------------------------------------
// ablation table
// ---------------------------------------------------------------------------

void AblationTable::add(const std::string& method, const std::string& split,
                        const std::string& metric, std::uint64_t seed, double value) {
  rows_.push_back({method, split, metric, seed, value});
}

std::vector<double> AblationTable::per_seed(const std::string& method, const std::string& split,
                                            const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : rows_) {
    if (r.method == method && r.split == split && r.metric == metric) out.push_back(r.value);
  }
  return out;
}

AblationCell AblationTable::cell(const std::string& method, const std::string& split,
                                 const std::string& metric) const {
  AblationCell c;
  c.values = per_seed(method, split, metric);
  if (c.values.empty()) return c;
  double sum = 0.0;
  for (double v : c.values) sum += v;
  c.mean = sum / static_cast<double>(c.values.size());
  if (c.values.size() > 1) {
    double ss = 0.0;
    for (double v : c.values) ss += (v - c.mean) * (v - c.mean);
    c.sd = std::sqrt(ss / static_cast<double>(c.values.size() - 1));
  }
  return c;
}

std::string AblationTable::to_csv(const world::Provenance& provenance) const {
  std::ostringstream out;
  for (const auto& [k, v] : provenance) out << "# " << k << "=" << v << '\n';
  out << "method,split,metric,seed,value\n";
  out << std::setprecision(17);
  for (const auto& r : rows_) {
    out << r.method << ',' << r.split << ',' << r.metric << ',' << r.seed << ',' << r.value
        << '\n';
  }
  return out.str();
}

std::string AblationTable::summary_json(const world::Provenance& provenance) const {
  json j{{"provenance", provenance}, {"cells", json::object()}};
  for (Method m : kAllMethods) {
    const std::string name = method_name(m);
    json mj;
    for (const char* split : {"seen", "novel"}) {
      json sj;
      for (const char* metric : {"pair", "attr", "obj"}) {
        const auto c = cell(name, split, metric);
        sj[metric] = {{"mean", c.mean}, {"sd", c.sd}, {"values", c.values}};
      }
      mj[split] = std::move(sj);
    }
    j["cells"][name] = std::move(mj);
  }
  return j.dump(2);
}

std::string AblationTable::human_table() const {
  std::ostringstream out;
  for (const char* split : {"novel", "seen"}) {
    out << (split == std::string("novel") ? "Novel compositions\n" : "Seen compositions\n");
    out << "  method        pair            attr            obj\n";
    for (Method m : kAllMethods) {
      const std::string name = method_name(m);
      out << "  " << std::left << std::setw(12) << name << std::right;
      for (const char* metric : {"pair", "attr", "obj"}) {
        const auto c = cell(name, split, metric);
        std::ostringstream cellstr;
        cellstr << std::fixed << std::setprecision(2) << 100.0 * c.mean << "% +-"
                << std::setprecision(2) << 100.0 * c.sd;
        out << "  " << std::left << std::setw(14) << cellstr.str() << std::right;
      }
      out << '\n';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace metacomp::eval
