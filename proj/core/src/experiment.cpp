#include "metacomp/experiment.hpp"

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "metacomp/hash.hpp"
#include "metacomp/rng.hpp"
#include "metacomp/version.hpp"
#include "src_json_codec.hpp"

namespace metacomp::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  world.validate();
  if (val_fraction <= 0 || val_fraction >= 1) {
    throw std::invalid_argument("config: val_fraction must be in (0, 1)");
  }
  if (test_fraction <= 0 || val_fraction + test_fraction >= 1) {
    throw std::invalid_argument("config: test_fraction invalid (val + test must be < 1)");
  }
  // enc.vocab_size is derived from the world; validate the rest on a resolved copy
  encoder::EncoderConfig resolved = enc;
  if (resolved.vocab_size == 0) {
    resolved.vocab_size = world::ConceptVocabulary::kSpecialCount + world.n_attributes +
                          world.n_objects + world.n_context;
  }
  resolved.validate();
  meta.validate();
  if (enc_train.epochs < 1) throw std::invalid_argument("config: enc_train.epochs must be >= 1");
  if (scratch_train.epochs < 1) {
    throw std::invalid_argument("config: scratch_train.epochs must be >= 1");
  }
  if (meta_train.epochs < 1) throw std::invalid_argument("config: meta_train.epochs must be >= 1");
  if (eval.seeds.empty()) throw std::invalid_argument("config: eval.seeds must be non-empty");
  if (eval.max_instances < 0) {
    throw std::invalid_argument("config: eval.max_instances must be >= 0");
  }
  if (eval.threads < 0) throw std::invalid_argument("config: eval.threads must be >= 0");
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  return json{{"world", detail::world_config_to_json(c.world)},
              {"val_fraction", c.val_fraction},
              {"test_fraction", c.test_fraction},
              {"encoder", detail::encoder_config_to_json(c.enc)},
              {"enc_train", detail::mlm_train_to_json(c.enc_train)},
              {"scratch_train", detail::mlm_train_to_json(c.scratch_train)},
              {"enc_init_seed", c.enc_init_seed},
              {"scratch_init_seed", c.scratch_init_seed},
              {"learner_init_seed", c.learner_init_seed},
              {"meta", detail::meta_config_to_json(c.meta)},
              {"meta_train", detail::meta_train_options_to_json(c.meta_train)},
              {"eval",
               {{"seeds", c.eval.seeds},
                {"max_instances", c.eval.max_instances},
                {"threads", c.eval.threads}}}};
}

ExperimentConfig config_from_json(const json& j) {
  detail::check_keys(j,
                     {"world", "val_fraction", "test_fraction", "encoder", "enc_train",
                      "scratch_train", "enc_init_seed", "scratch_init_seed", "learner_init_seed",
                      "meta", "meta_train", "eval"},
                     "<root>");
  ExperimentConfig c;
  if (j.contains("world")) c.world = detail::world_config_from_json(j.at("world"));
  c.val_fraction = detail::get_or(j, "val_fraction", c.val_fraction);
  c.test_fraction = detail::get_or(j, "test_fraction", c.test_fraction);
  if (j.contains("encoder")) c.enc = detail::encoder_config_from_json(j.at("encoder"));
  if (j.contains("enc_train")) {
    c.enc_train = detail::mlm_train_from_json(j.at("enc_train"), "enc_train");
  }
  if (j.contains("scratch_train")) {
    c.scratch_train = detail::mlm_train_from_json(j.at("scratch_train"), "scratch_train");
  }
  c.enc_init_seed = detail::get_or(j, "enc_init_seed", c.enc_init_seed);
  c.scratch_init_seed = detail::get_or(j, "scratch_init_seed", c.scratch_init_seed);
  c.learner_init_seed = detail::get_or(j, "learner_init_seed", c.learner_init_seed);
  if (j.contains("meta")) c.meta = detail::meta_config_from_json(j.at("meta"));
  if (j.contains("meta_train")) {
    c.meta_train = detail::meta_train_options_from_json(j.at("meta_train"));
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, {"seeds", "max_instances", "threads"}, "eval");
    c.eval.seeds = detail::get_or(e, "seeds", c.eval.seeds);
    c.eval.max_instances = detail::get_or(e, "max_instances", c.eval.max_instances);
    c.eval.threads = detail::get_or(e, "threads", c.eval.threads);
  }
  return c;
}

}  // namespace

std::string config_to_json_string(const ExperimentConfig& config) {
  return config_to_json(config).dump(2);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_config: " + path + ": " + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  c.validate();
  return c;
}

void save_config(const ExperimentConfig& config, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_config: cannot write " + path);
  out << config_to_json_string(config) << '\n';
}

std::string ExperimentConfig::config_hash() const {
  return hash_hex(config_to_json(*this).dump());
}

std::string ExperimentConfig::world_hash() const {
  json j{{"world", detail::world_config_to_json(world)},
         {"val_fraction", val_fraction},
         {"test_fraction", test_fraction}};
  return hash_hex(j.dump());
}

std::string ExperimentConfig::encoder_hash() const {
  json j{{"encoder", detail::encoder_config_to_json(enc)},
         {"enc_train", detail::mlm_train_to_json(enc_train)},
         {"enc_init_seed", enc_init_seed}};
  return hash_hex(j.dump());
}

std::string ExperimentConfig::meta_hash() const {
  json j{{"meta", detail::meta_config_to_json(meta)},
         {"meta_train", detail::meta_train_options_to_json(meta_train)},
         {"learner_init_seed", learner_init_seed}};
  return hash_hex(j.dump());
}

void apply_seed_override(ExperimentConfig& config, std::uint64_t s) {
  config.enc_init_seed = Rng::derive(s, 1);
  config.scratch_init_seed = Rng::derive(s, 2);
  config.learner_init_seed = Rng::derive(s, 3);
  config.enc_train.seed = Rng::derive(s, 4);
  config.scratch_train.seed = Rng::derive(s, 5);
  config.meta_train.seed = Rng::derive(s, 6);
}

ExperimentConfig tiny_preset() {
  ExperimentConfig c;
  c.world.n_attributes = 5;
  c.world.n_objects = 6;
  c.world.n_context = 12;
  c.world.pair_count = 14;
  c.world.novel_pair_count = 3;
  c.world.instances_per_pair = 8;
  c.world.feature_dim = 8;
  c.world.noise_level = 0.20;
  c.world.attr_strength = 0.70;
  c.world.n_distractor_regions = 1;
  c.world.ctx_min = 2;
  c.world.ctx_max = 4;
  c.world.seed = 7;
  c.val_fraction = 0.15;
  c.test_fraction = 0.25;
  c.enc.d = 16;
  c.enc.layers = 1;
  c.enc.heads = 2;
  c.enc.region_feat_dim = 8;
  c.enc.max_seq_len = 12;
  c.enc_train = {6, 16, 3e-3, 101};
  c.scratch_train = {6, 16, 3e-3, 102};
  c.meta.inner_lr = 0.05;
  c.meta.outer_lr = 1e-3;
  c.meta.inner_steps_train = 1;
  c.meta.inner_steps_test = 5;
  c.meta.episodes_per_outer = 4;
  c.meta.k = 4;
  c.meta_train.epochs = 1;
  c.meta_train.seed = 103;
  c.meta_train.val_subsample = 24;
  c.meta_train.val_inner_steps = 2;
  c.eval.seeds = {1, 2, 3};
  c.eval.max_instances = 24;
  return c;
}

ExperimentConfig default_preset() {
  ExperimentConfig c;
  c.world.seed = 1;
  c.enc.d = 32;
  c.enc.layers = 2;
  c.enc.heads = 4;
  c.enc.region_feat_dim = 16;
  c.enc.max_seq_len = 16;
  c.enc_train = {20, 16, 2e-3, 11};
  c.scratch_train = {20, 16, 2e-3, 12};
  c.meta.inner_lr = 0.05;
  c.meta.outer_lr = 1e-3;
  c.meta.inner_steps_train = 1;
  c.meta.inner_steps_test = 20;
  c.meta.episodes_per_outer = 4;
  c.meta.k = 4;
  c.meta_train.epochs = 2;
  c.meta_train.seed = 13;
  c.meta_train.eval_every = 60;
  c.meta_train.val_subsample = 64;
  c.meta_train.val_inner_steps = 5;
  c.eval.seeds = {1, 2, 3, 4, 5};
  c.eval.max_instances = 160;
  return c;
}

// ---------------------------------------------------------------------------
// artifact paths & provenance plumbing
// ---------------------------------------------------------------------------

namespace paths {
std::string dataset(const std::string& d) { return d + "/dataset.jsonl"; }
std::string vocab(const std::string& d) { return d + "/vocab.json"; }
std::string retriever_ckpt(const std::string& d) { return d + "/retriever.ckpt"; }
std::string concept_db(const std::string& d) { return d + "/concept.db"; }
std::string learner_ckpt(const std::string& d) { return d + "/learner.ckpt"; }
std::string train_log(const std::string& d) { return d + "/train_log.csv"; }
std::string metrics_csv(const std::string& d, const std::string& m) {
  return d + "/metrics_" + m + ".csv";
}
std::string metrics_json(const std::string& d, const std::string& m) {
  return d + "/metrics_" + m + ".json";
}
std::string predictions_csv(const std::string& d, const std::string& m) {
  return d + "/predictions_" + m + ".csv";
}
std::string episode_dump(const std::string& d) { return d + "/episodes.jsonl"; }
std::string ablation_csv(const std::string& d) { return d + "/ablation.csv"; }
std::string ablation_summary(const std::string& d) { return d + "/ablation_summary.json"; }
std::string ablation_table(const std::string& d) { return d + "/ablation_table.txt"; }
}  // namespace paths

namespace {

world::Provenance base_provenance(const ExperimentConfig& c) {
  return {{"tool_version", kToolVersion},
          {"config_hash", c.config_hash()},
          {"world_hash", c.world_hash()}};
}

void require_match(const world::Provenance& prov, const std::string& key,
                   const std::string& expected, const std::string& artifact) {
  auto it = prov.find(key);
  if (it == prov.end() || it->second != expected) {
    throw std::runtime_error("fingerprint mismatch (stale artifact): " + artifact +
                             " was produced with a different " + key);
  }
}

encoder::EncoderConfig resolved_encoder_config(const ExperimentConfig& c,
                                               const world::ConceptVocabulary& vocab) {
  encoder::EncoderConfig enc = c.enc;
  if (enc.vocab_size == 0) {
    enc.vocab_size = vocab.size();
  } else if (enc.vocab_size != vocab.size()) {
    throw std::runtime_error("config: encoder.vocab_size does not match the world vocabulary (" +
                             std::to_string(enc.vocab_size) + " vs " +
                             std::to_string(vocab.size()) + ")");
  }
  if (enc.region_feat_dim != c.world.feature_dim) {
    throw std::runtime_error("config: encoder.region_feat_dim must equal world.feature_dim");
  }
  return enc;
}

world::DatasetSplits make_splits(const ExperimentConfig& c) {
  const auto gen = world::generate_world(c.world);
  const auto novel = world::choose_novel_pairs(gen, c.world.novel_pair_count, c.world.seed);
  auto splits = world::split_novel(gen, novel, c.val_fraction, c.test_fraction);
  const auto hygiene = world::scan_for_novel_leaks(splits);
  if (!hygiene.clean()) {
    throw std::runtime_error("split hygiene scan failed: " + hygiene.violations.front());
  }
  return splits;
}

world::DatasetSplits load_dataset_checked(const ExperimentConfig& c, const std::string& dir) {
  auto imported = world::import_jsonl(paths::dataset(dir), paths::vocab(dir));
  require_match(imported.provenance, "world_hash", c.world_hash(), "dataset");
  return std::move(imported.splits);
}

void write_train_log(const std::vector<meta::LogRow>& log, const std::string& path,
                     const world::Provenance& prov) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& [k, v] : prov) out << "# " << k << "=" << v << '\n';
  out << "step,inner_loss,query_loss,val_pair_acc,val_attr_acc,val_obj_acc\n";
  out << std::setprecision(17);
  for (const auto& r : log) {
    out << r.step << ',' << r.inner_loss << ',' << r.query_loss << ',';
    if (r.has_validation) {
      out << r.val_pair_acc << ',' << r.val_attr_acc << ',' << r.val_obj_acc;
    } else {
      out << ",,";
    }
    out << '\n';
  }
}

eval::Method method_for_mode(episode::SupportMode mode) {
  switch (mode) {
    case episode::SupportMode::kTopK: return eval::Method::kTopK;
    case episode::SupportMode::kDivK: return eval::Method::kDivK;
    case episode::SupportMode::kOracle: return eval::Method::kOracleK;
    case episode::SupportMode::kNoRetrieval: return eval::Method::kMamlNoRet;
  }
  return eval::Method::kDivK;
}

}  // namespace

// ---------------------------------------------------------------------------
// pipeline stages
// ---------------------------------------------------------------------------

void run_gen_world(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  const auto splits = make_splits(config);
  world::export_jsonl(splits, paths::dataset(out_dir), paths::vocab(out_dir),
                      base_provenance(config));
}

void run_train_retriever(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  const auto splits = load_dataset_checked(config, out_dir);
  const auto enc_cfg = resolved_encoder_config(config, splits.vocab);

  auto params = encoder::init_params(enc_cfg, config.enc_init_seed);
  encoder::train_mlm(params, splits.train, config.enc_train);

  auto prov = base_provenance(config);
  prov["encoder_hash"] = config.encoder_hash();
  prov["dataset_hash"] = hash_file_hex(paths::dataset(out_dir));
  encoder::save_checkpoint(params, paths::retriever_ckpt(out_dir), prov);
}

void run_build_db(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  const auto splits = load_dataset_checked(config, out_dir);
  auto loaded = encoder::load_checkpoint(paths::retriever_ckpt(out_dir));
  require_match(loaded.provenance, "world_hash", config.world_hash(), "retriever checkpoint");
  require_match(loaded.provenance, "encoder_hash", config.encoder_hash(),
                "retriever checkpoint");

  const auto db = retriever::ConceptDb::build(loaded.params, splits.train);
  auto prov = base_provenance(config);
  prov["encoder_hash"] = config.encoder_hash();
  prov["retriever_ckpt_hash"] = hash_file_hex(paths::retriever_ckpt(out_dir));
  db.save(paths::concept_db(out_dir), prov);
}

void run_meta_train(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  const auto splits = load_dataset_checked(config, out_dir);
  auto retr = encoder::load_checkpoint(paths::retriever_ckpt(out_dir));
  require_match(retr.provenance, "encoder_hash", config.encoder_hash(), "retriever checkpoint");
  auto db_loaded = retriever::ConceptDb::load(paths::concept_db(out_dir));
  require_match(db_loaded.provenance, "retriever_ckpt_hash",
                hash_file_hex(paths::retriever_ckpt(out_dir)), "concept db");
  if (db_loaded.db.encoder_fingerprint() != retr.params.fingerprint()) {
    throw std::runtime_error(
        "fingerprint mismatch (stale artifact): concept db does not match the retriever "
        "checkpoint contents");
  }

  const auto enc_cfg = resolved_encoder_config(config, splits.vocab);
  const auto init = encoder::init_params(enc_cfg, config.learner_init_seed);
  const auto result =
      meta::meta_train(init, retr.params, db_loaded.db, splits, config.meta, config.meta_train);

  auto prov = base_provenance(config);
  prov["encoder_hash"] = config.encoder_hash();
  prov["meta_hash"] = config.meta_hash();
  prov["db_hash"] = hash_file_hex(paths::concept_db(out_dir));
  prov["retriever_ckpt_hash"] = hash_file_hex(paths::retriever_ckpt(out_dir));
  prov["best_step"] = std::to_string(result.best_step);
  encoder::save_checkpoint(result.best_params, paths::learner_ckpt(out_dir), prov);
  write_train_log(result.log, paths::train_log(out_dir), prov);
}

void run_evaluate(const ExperimentConfig& config, const std::string& out_dir,
                  const std::string& method_override) {
  config.validate();
  const auto splits = load_dataset_checked(config, out_dir);
  auto retr = encoder::load_checkpoint(paths::retriever_ckpt(out_dir));
  require_match(retr.provenance, "encoder_hash", config.encoder_hash(), "retriever checkpoint");
  auto db_loaded = retriever::ConceptDb::load(paths::concept_db(out_dir));
  require_match(db_loaded.provenance, "retriever_ckpt_hash",
                hash_file_hex(paths::retriever_ckpt(out_dir)), "concept db");
  auto learner = encoder::load_checkpoint(paths::learner_ckpt(out_dir));
  require_match(learner.provenance, "meta_hash", config.meta_hash(), "learner checkpoint");
  require_match(learner.provenance, "db_hash", hash_file_hex(paths::concept_db(out_dir)),
                "learner checkpoint");

  const eval::Method method = method_override.empty()
                                  ? method_for_mode(config.meta.support_mode)
                                  : eval::method_from_name(method_override);

  eval::EvalOptions opts;
  opts.method = method;
  opts.max_instances = config.eval.max_instances;
  opts.subsample_seed = Rng::derive(config.world.seed, 0xE);
  opts.world_seed = config.world.seed;
  opts.model_seed = config.meta_train.seed;

  const auto out =
      eval::evaluate(learner.params, retr.params, db_loaded.db, splits, config.meta, opts);
  if (eval::rebuild_report(out.dump, out.report.fingerprint) != out.report) {
    throw std::runtime_error("evaluate: report does not match its own prediction dump");
  }
  if (out.verbalizer_violations != 0) {
    throw std::runtime_error("evaluate: verbalizer contract violated (" +
                             std::to_string(out.verbalizer_violations) + " predictions)");
  }

  auto prov = base_provenance(config);
  prov["encoder_hash"] = config.encoder_hash();
  prov["meta_hash"] = config.meta_hash();
  prov["learner_ckpt_hash"] = hash_file_hex(paths::learner_ckpt(out_dir));
  prov["db_hash"] = hash_file_hex(paths::concept_db(out_dir));

  const std::string mname = eval::method_name(method);
  eval::write_report_csv(out.report, mname, paths::metrics_csv(out_dir, mname), prov);
  eval::write_report_json(out.report, mname, paths::metrics_json(out_dir, mname), prov);
  eval::write_predictions_csv(out.dump, paths::predictions_csv(out_dir, mname));
}

// ---------------------------------------------------------------------------
// ablation suite
// ---------------------------------------------------------------------------

namespace {

struct SeedOutputs {
  std::uint64_t seed = 0;
  // method -> report
  std::vector<std::pair<std::string, eval::MetricsReport>> reports;
  double novel_pair_acc_steps0 = 0.0;
  double novel_pair_acc_adapted = 0.0;
  eval::RetrievalReport retrieval;
  long verbalizer_violations = 0;
  long verbalized_predictions = 0;
  long oracle_excluded = 0;
};

SeedOutputs run_one_seed(const ExperimentConfig& config, const world::DatasetSplits& splits,
                         std::uint64_t seed) {
  SeedOutputs out;
  out.seed = seed;
  const auto enc_cfg = resolved_encoder_config(config, splits.vocab);

  // retriever encoder + concept db
  auto retr = encoder::init_params(enc_cfg, Rng::derive(seed, 1));
  auto retr_train = config.enc_train;
  retr_train.seed = Rng::derive(seed, 2);
  encoder::train_mlm(retr, splits.train, retr_train);
  const auto db = retriever::ConceptDb::build(retr, splits.train);

  // train-from-scratch baseline
  auto scratch_train_cfg = config.scratch_train;
  scratch_train_cfg.seed = Rng::derive(seed, 3);
  const auto scratch =
      meta::train_scratch_baseline(enc_cfg, splits.train, scratch_train_cfg, Rng::derive(seed, 4));

  // meta models: one per retrieval flavor used at training time
  meta::MetaConfig m_top = config.meta;
  m_top.support_mode = episode::SupportMode::kTopK;
  meta::MetaConfig m_div = config.meta;
  m_div.support_mode = episode::SupportMode::kDivK;
  meta::MetaTrainOptions opts = config.meta_train;
  opts.seed = Rng::derive(seed, 5);

  const auto init = encoder::init_params(enc_cfg, Rng::derive(seed, 6));
  const auto top_res = meta::meta_train(init, retr, db, splits, m_top, opts);
  const auto div_res = meta::meta_train(init, retr, db, splits, m_div, opts);

  eval::EvalOptions eopts;
  eopts.max_instances = config.eval.max_instances;
  eopts.subsample_seed = Rng::derive(seed, 7);
  eopts.world_seed = config.world.seed;
  eopts.model_seed = seed;

  auto run_eval = [&](eval::Method method, const encoder::ModelParams& model,
                      const meta::MetaConfig& mc) {
    eval::EvalOptions o = eopts;
    o.method = method;
    const auto res = eval::evaluate(model, retr, db, splits, mc, o);
    out.verbalizer_violations += res.verbalizer_violations;
    for (const auto& rec : res.dump) out.verbalized_predictions += rec.verbalized ? 1 : 0;
    out.oracle_excluded += res.oracle_excluded;
    out.reports.emplace_back(eval::method_name(method), res.report);
    return res;
  };

  run_eval(eval::Method::kScratch, scratch, config.meta);
  run_eval(eval::Method::kMamlNoRet, div_res.best_params, config.meta);
  run_eval(eval::Method::kTopK, top_res.best_params, m_top);
  const auto div_eval = run_eval(eval::Method::kDivK, div_res.best_params, m_div);
  run_eval(eval::Method::kOracleK, div_res.best_params, m_div);

  // adaptation probe: same div_k checkpoint and episodes, zero inner steps
  meta::MetaConfig m_div0 = m_div;
  m_div0.inner_steps_test = 0;
  eval::EvalOptions o0 = eopts;
  o0.method = eval::Method::kDivK;
  const auto res0 = eval::evaluate(div_res.best_params, retr, db, splits, m_div0, o0);
  out.novel_pair_acc_steps0 = res0.report.novel.pair_acc();
  out.novel_pair_acc_adapted = div_eval.report.novel.pair_acc();

  out.retrieval = eval::retrieval_accuracy(db, retr, splits, config.meta.k,
                                           episode::SupportMode::kDivK,
                                           config.eval.max_instances, Rng::derive(seed, 7));
  return out;
}

}  // namespace

AblationResult run_ablation(const ExperimentConfig& config, const std::string& out_dir,
                            int threads_override) {
  config.validate();
  if (config.eval.seeds.size() < 3) {
    throw std::invalid_argument("run_ablation: need at least 3 seeds");
  }
  fs::create_directories(out_dir);

  const auto splits = make_splits(config);
  world::export_jsonl(splits, paths::dataset(out_dir), paths::vocab(out_dir),
                      base_provenance(config));

  const auto& seeds = config.eval.seeds;
  std::vector<std::optional<SeedOutputs>> results(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());

  int threads = threads_override > 0 ? threads_override
                                     : (config.eval.threads > 0
                                            ? config.eval.threads
                                            : static_cast<int>(std::thread::hardware_concurrency()));
  threads = std::max(1, std::min<int>(threads, static_cast<int>(seeds.size())));

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= seeds.size()) return;
      try {
        results[i] = run_one_seed(config, splits, seeds[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  AblationResult res;
  auto prov = base_provenance(config);
  prov["encoder_hash"] = config.encoder_hash();
  prov["meta_hash"] = config.meta_hash();

  // aggregate in seed order so reruns (threaded or not) are byte-identical
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!results[i]) continue;
    const auto& r = *results[i];
    for (const auto& [method, report] : r.reports) {
      res.table.add(method, "seen", "pair", r.seed, report.seen.pair_acc());
      res.table.add(method, "seen", "attr", r.seed, report.seen.attr_acc());
      res.table.add(method, "seen", "obj", r.seed, report.seen.obj_acc());
      res.table.add(method, "novel", "pair", r.seed, report.novel.pair_acc());
      res.table.add(method, "novel", "attr", r.seed, report.novel.attr_acc());
      res.table.add(method, "novel", "obj", r.seed, report.novel.obj_acc());
    }
    res.novel_pair_acc_steps0.push_back(r.novel_pair_acc_steps0);
    res.novel_pair_acc_adapted.push_back(r.novel_pair_acc_adapted);
    res.retrieval_reports.push_back(r.retrieval);
    res.verbalizer_violations += r.verbalizer_violations;
    res.verbalized_predictions += r.verbalized_predictions;
    res.oracle_excluded += r.oracle_excluded;
  }

  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (errors[i]) {
      // keep what finished, then surface the failure
      std::ofstream out(out_dir + "/ablation_partial.csv");
      out << res.table.to_csv(prov);
      std::rethrow_exception(errors[i]);
    }
  }

  {
    std::ofstream out(paths::ablation_csv(out_dir));
    if (!out) throw std::runtime_error("run_ablation: cannot write ablation.csv");
    out << res.table.to_csv(prov);
  }
  {
    json probe{{"novel_pair_acc_steps0", res.novel_pair_acc_steps0},
               {"novel_pair_acc_adapted", res.novel_pair_acc_adapted}};
    json retrieval = json::array();
    for (const auto& rr : res.retrieval_reports) {
      retrieval.push_back({{"k", rr.k},
                           {"seen",
                            {{"attr", rr.seen.attr_rate()},
                             {"obj", rr.seen.obj_rate()},
                             {"pair", rr.seen.pair_rate()}}},
                           {"novel",
                            {{"attr", rr.novel.attr_rate()},
                             {"obj", rr.novel.obj_rate()},
                             {"pair", rr.novel.pair_rate()}}}});
    }
    json j = json::parse(res.table.summary_json(prov));
    j["adaptation_probe"] = std::move(probe);
    j["retrieval_accuracy"] = std::move(retrieval);
    j["verbalizer_violations"] = res.verbalizer_violations;
    j["verbalized_predictions"] = res.verbalized_predictions;
    j["oracle_excluded"] = res.oracle_excluded;
    std::ofstream out(paths::ablation_summary(out_dir));
    if (!out) throw std::runtime_error("run_ablation: cannot write ablation_summary.json");
    out << j.dump(2) << '\n';
  }
  {
    std::ofstream out(paths::ablation_table(out_dir));
    if (!out) throw std::runtime_error("run_ablation: cannot write ablation_table.txt");
    out << res.table.human_table();
  }
  return res;
}

}  // namespace metacomp::experiment
