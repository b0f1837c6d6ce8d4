#include "metacomp/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metacomp/rng.hpp"

namespace metacomp::world {

using nlohmann::json;

// ---------------------------------------------------------------------------
// vocabulary
// ---------------------------------------------------------------------------

ConceptVocabulary::ConceptVocabulary(std::vector<std::string> attributes,
                                     std::vector<std::string> objects,
                                     std::vector<std::string> context)
    : attributes_(std::move(attributes)),
      objects_(std::move(objects)),
      context_(std::move(context)),
      n_attr_(static_cast<int>(attributes_.size())),
      n_obj_(static_cast<int>(objects_.size())),
      n_ctx_(static_cast<int>(context_.size())) {
  std::set<std::string> seen{"<pad>", "<cls>", "<mask>"};
  names_ = {"<pad>", "<cls>", "<mask>"};
  for (const auto* group : {&attributes_, &objects_, &context_}) {
    for (const auto& t : *group) {
      if (!seen.insert(t).second) {
        throw std::invalid_argument("ConceptVocabulary: duplicate token '" + t + "'");
      }
      names_.push_back(t);
    }
  }
}

const std::string& ConceptVocabulary::token_name(TokenId t) const {
  return names_.at(static_cast<std::size_t>(t));
}

const char* pair_kind_name(PairKind k) {
  return k == PairKind::kAdjNoun ? "adj_noun" : "verb_noun";
}

PairKind pair_kind_from_name(const std::string& s) {
  if (s == "adj_noun") return PairKind::kAdjNoun;
  if (s == "verb_noun") return PairKind::kVerbNoun;
  throw std::invalid_argument("unknown pair kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

void WorldConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("WorldConfig." + field + ": " + why);
  };
  if (n_attributes < 2) bad("n_attributes", "must be >= 2");
  if (n_objects < 2) bad("n_objects", "must be >= 2");
  if (n_context < 1) bad("n_context", "must be >= 1");
  if (pair_count < 1) bad("pair_count", "must be >= 1");
  if (pair_count > n_attributes * n_objects) {
    bad("pair_count", "exceeds the attribute x object grid (" +
                          std::to_string(n_attributes * n_objects) + ")");
  }
  if (novel_pair_count < 0 || novel_pair_count >= pair_count) {
    bad("novel_pair_count", "must be in [0, pair_count)");
  }
  if (instances_per_pair < 1) bad("instances_per_pair", "must be >= 1");
  if (feature_dim < 1) bad("feature_dim", "must be >= 1");
  if (noise_level < 0) bad("noise_level", "must be >= 0");
  if (attr_strength <= 0) bad("attr_strength", "must be > 0");
  if (n_distractor_regions < 0) bad("n_distractor_regions", "must be >= 0");
  if (ctx_min < 0 || ctx_max < ctx_min) bad("ctx_min/ctx_max", "need 0 <= ctx_min <= ctx_max");
  if (verb_noun_fraction < 0 || verb_noun_fraction > 1) {
    bad("verb_noun_fraction", "must be in [0, 1]");
  }
}

namespace {

std::string padded(const char* prefix, int i) {
  std::ostringstream os;
  os << prefix;
  if (i < 10) os << '0';
  os << i;
  return os.str();
}

}  // namespace

GeneratedWorld generate_world(const WorldConfig& config) {
  config.validate();

  std::vector<std::string> attrs, objs, ctx;
  for (int i = 0; i < config.n_attributes; ++i) attrs.push_back(padded("attr", i));
  for (int i = 0; i < config.n_objects; ++i) objs.push_back(padded("obj", i));
  for (int i = 0; i < config.n_context; ++i) ctx.push_back(padded("ctx", i));

  GeneratedWorld out;
  out.config = config;
  out.vocab = ConceptVocabulary(std::move(attrs), std::move(objs), std::move(ctx));

  Rng rng(config.seed);
  const int f = config.feature_dim;

  // prototypes: object anchor + attribute offset, combined additively so
  // both element concepts stay linearly recoverable from the pair feature
  std::vector<std::vector<double>> obj_proto(static_cast<std::size_t>(config.n_objects));
  for (auto& p : obj_proto) {
    p.resize(static_cast<std::size_t>(f));
    for (auto& v : p) v = rng.gauss();
  }
  std::vector<std::vector<double>> attr_offset(static_cast<std::size_t>(config.n_attributes));
  for (auto& p : attr_offset) {
    p.resize(static_cast<std::size_t>(f));
    for (auto& v : p) v = rng.gauss() * config.attr_strength;
  }

  // choose which grid cells exist in this world
  std::vector<std::pair<int, int>> grid;
  grid.reserve(static_cast<std::size_t>(config.n_attributes * config.n_objects));
  for (int a = 0; a < config.n_attributes; ++a) {
    for (int o = 0; o < config.n_objects; ++o) grid.emplace_back(a, o);
  }
  rng.shuffle(grid);
  grid.resize(static_cast<std::size_t>(config.pair_count));

  for (auto [a, o] : grid) {
    CompositionalPair p;
    p.attr = out.vocab.attr_id(a);
    p.obj = out.vocab.object_id(o);
    p.kind = rng.uniform01() < config.verb_noun_fraction ? PairKind::kVerbNoun
                                                         : PairKind::kAdjNoun;
    out.pairs.push_back(p);
  }
  std::sort(out.pairs.begin(), out.pairs.end());

  auto gen_box = [](Rng& r) {
    std::array<double, 4> b;
    b[0] = r.uniform01() * 0.7;
    b[1] = r.uniform01() * 0.7;
    b[2] = 0.05 + r.uniform01() * (1.0 - b[0] - 0.05);
    b[3] = 0.05 + r.uniform01() * (1.0 - b[1] - 0.05);
    return b;
  };

  for (std::size_t pi = 0; pi < out.pairs.size(); ++pi) {
    const CompositionalPair& pair = out.pairs[pi];
    const auto& po = obj_proto[static_cast<std::size_t>(pair.obj - out.vocab.object_id(0))];
    const auto& ua = attr_offset[static_cast<std::size_t>(pair.attr - out.vocab.attr_id(0))];
    for (int k = 0; k < config.instances_per_pair; ++k) {
      Rng irng(Rng::derive(config.seed, (pi << 20) + static_cast<std::uint64_t>(k) + 1));
      Instance inst;
      inst.gold = pair;

      Region target;
      target.feat.resize(static_cast<std::size_t>(f));
      for (int j = 0; j < f; ++j) {
        target.feat[static_cast<std::size_t>(j)] =
            po[static_cast<std::size_t>(j)] + ua[static_cast<std::size_t>(j)] +
            config.noise_level * irng.gauss();
      }
      target.box = gen_box(irng);

      std::vector<Region> regions{target};
      for (int r = 0; r < config.n_distractor_regions; ++r) {
        Region d;
        d.feat.resize(static_cast<std::size_t>(f));
        for (auto& v : d.feat) v = irng.gauss();
        d.box = gen_box(irng);
        regions.push_back(std::move(d));
      }
      irng.shuffle(regions);
      inst.regions = std::move(regions);

      // [CLS] ctx* MASK_attr MASK_obj ctx*
      const int n_ctx = irng.uniform_int(config.ctx_min, config.ctx_max);
      const int before = n_ctx == 0 ? 0 : irng.uniform_int(0, n_ctx);
      inst.caption.push_back(ConceptVocabulary::kCls);
      for (int c = 0; c < before; ++c) {
        inst.caption.push_back(out.vocab.context_id(irng.uniform_int(0, config.n_context - 1)));
      }
      inst.attr_slot = static_cast<int>(inst.caption.size());
      inst.caption.push_back(ConceptVocabulary::kMask);
      inst.obj_slot = static_cast<int>(inst.caption.size());
      inst.caption.push_back(ConceptVocabulary::kMask);
      for (int c = before; c < n_ctx; ++c) {
        inst.caption.push_back(out.vocab.context_id(irng.uniform_int(0, config.n_context - 1)));
      }

      out.instances.push_back(std::move(inst));
    }
  }
  return out;
}

std::vector<CompositionalPair> choose_novel_pairs(const GeneratedWorld& world, int count,
                                                  std::uint64_t seed) {
  if (count == 0) return {};
  if (count < 0 || static_cast<std::size_t>(count) >= world.pairs.size()) {
    throw std::invalid_argument("choose_novel_pairs: count out of range");
  }
  std::map<TokenId, int> attr_uses, obj_uses;
  for (const auto& p : world.pairs) {
    ++attr_uses[p.attr];
    ++obj_uses[p.obj];
  }
  std::vector<CompositionalPair> order = world.pairs;
  Rng rng(Rng::derive(seed, 0xb0));
  rng.shuffle(order);

  std::vector<CompositionalPair> chosen;
  for (const auto& p : order) {
    if (static_cast<int>(chosen.size()) == count) break;
    // keep at least one seen pair per element concept, otherwise the element
    // itself would be unlearnable from the training split
    if (attr_uses[p.attr] <= 1 || obj_uses[p.obj] <= 1) continue;
    --attr_uses[p.attr];
    --obj_uses[p.obj];
    chosen.push_back(p);
  }
  if (static_cast<int>(chosen.size()) < count) {
    throw std::runtime_error(
        "choose_novel_pairs: could not hold out " + std::to_string(count) +
        " pairs while keeping every element concept seen; generate more pairs");
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

bool DatasetSplits::is_novel(const CompositionalPair& p) const {
  return std::binary_search(novel_pairs.begin(), novel_pairs.end(), p);
}

bool DatasetSplits::operator==(const DatasetSplits& o) const {
  return feature_dim == o.feature_dim && train == o.train && validation == o.validation &&
         test_seen == o.test_seen && test_novel == o.test_novel && novel_pairs == o.novel_pairs &&
         vocab.attributes() == o.vocab.attributes() && vocab.objects() == o.vocab.objects() &&
         vocab.context() == o.vocab.context();
}

DatasetSplits split_novel(const GeneratedWorld& world,
                          const std::vector<CompositionalPair>& novel_pairs,
                          double val_fraction, double test_fraction) {
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw std::invalid_argument("split_novel: val_fraction must be in (0, 1)");
  }
  if (test_fraction < 0.0 || val_fraction + test_fraction >= 1.0) {
    throw std::invalid_argument("split_novel: val_fraction + test_fraction must be < 1");
  }
  std::vector<CompositionalPair> novel = novel_pairs;
  std::sort(novel.begin(), novel.end());
  for (const auto& p : novel) {
    if (!std::binary_search(world.pairs.begin(), world.pairs.end(), p)) {
      throw std::invalid_argument("split_novel: novel pair not present in the generated world");
    }
  }

  DatasetSplits out;
  out.vocab = world.vocab;
  out.feature_dim = world.config.feature_dim;
  out.novel_pairs = novel;

  // group instance indices per pair, preserving generation order
  std::map<CompositionalPair, std::vector<std::size_t>> by_pair;
  for (std::size_t i = 0; i < world.instances.size(); ++i) {
    by_pair[world.instances[i].gold].push_back(i);
  }

  for (const auto& p : novel) {
    auto it = by_pair.find(p);
    if (it == by_pair.end() || it->second.empty()) {
      throw std::runtime_error("split_novel: novel pair (" + world.vocab.token_name(p.attr) +
                               ", " + world.vocab.token_name(p.obj) + ") has zero instances");
    }
  }

  for (const auto& [pair, idxs] : by_pair) {
    const std::size_t n = idxs.size();
    const bool is_novel = std::binary_search(novel.begin(), novel.end(), pair);
    std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
    if (n_val == 0 && n >= 2) n_val = 1;
    if (is_novel) {
      for (std::size_t k = 0; k < n; ++k) {
        (k < n_val ? out.validation : out.test_novel).push_back(world.instances[idxs[k]]);
      }
    } else {
      std::size_t n_test =
          static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction));
      if (n_test == 0 && test_fraction > 0.0 && n >= 3) n_test = 1;
      for (std::size_t k = 0; k < n; ++k) {
        if (k < n_val) {
          out.validation.push_back(world.instances[idxs[k]]);
        } else if (k < n_val + n_test) {
          out.test_seen.push_back(world.instances[idxs[k]]);
        } else {
          out.train.push_back(world.instances[idxs[k]]);
        }
      }
    }
  }
  return out;
}

HygieneReport scan_for_novel_leaks(const DatasetSplits& splits) {
  HygieneReport rep;
  for (std::size_t i = 0; i < splits.train.size(); ++i) {
    const Instance& inst = splits.train[i];
    ++rep.instances_scanned;
    if (splits.is_novel(inst.gold)) {
      rep.violations.push_back("train instance " + std::to_string(i) +
                               ": gold pair is in the novel set");
    }
    // unmasked adjacency scan over the raw caption tokens
    for (std::size_t t = 0; t + 1 < inst.caption.size(); ++t) {
      CompositionalPair cand;
      cand.attr = inst.caption[t];
      cand.obj = inst.caption[t + 1];
      if (splits.vocab.is_attr(cand.attr) && splits.vocab.is_object(cand.obj) &&
          splits.is_novel(cand)) {
        rep.violations.push_back("train instance " + std::to_string(i) +
                                 ": caption contains a novel pair at position " +
                                 std::to_string(t));
      }
    }
  }
  for (const auto& p : splits.novel_pairs) {
    bool found = false;
    for (const auto& inst : splits.test_novel) {
      if (inst.gold == p) {
        found = true;
        break;
      }
    }
    if (!found) {
      rep.violations.push_back("novel pair (" + splits.vocab.token_name(p.attr) + ", " +
                               splits.vocab.token_name(p.obj) + ") has no test instance");
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// JSONL import/export
// ---------------------------------------------------------------------------

namespace {

json instance_to_json(const Instance& inst, const std::string& split) {
  json regions = json::array();
  for (const auto& r : inst.regions) {
    regions.push_back({{"feat", r.feat}, {"box", r.box}});
  }
  return json{{"caption", inst.caption},
              {"regions", std::move(regions)},
              {"mask_slots", {inst.attr_slot, inst.obj_slot}},
              {"gold",
               {{"attr", inst.gold.attr},
                {"obj", inst.gold.obj},
                {"kind", pair_kind_name(inst.gold.kind)}}},
              {"split", split}};
}

Instance instance_from_json(const json& j) {
  Instance inst;
  inst.caption = j.at("caption").get<std::vector<TokenId>>();
  for (const auto& rj : j.at("regions")) {
    Region r;
    r.feat = rj.at("feat").get<std::vector<double>>();
    auto box = rj.at("box").get<std::vector<double>>();
    if (box.size() != 4) throw std::runtime_error("region box must have 4 entries");
    std::copy(box.begin(), box.end(), r.box.begin());
    inst.regions.push_back(std::move(r));
  }
  auto slots = j.at("mask_slots").get<std::vector<int>>();
  if (slots.size() != 2) throw std::runtime_error("mask_slots must have 2 entries");
  inst.attr_slot = slots[0];
  inst.obj_slot = slots[1];
  inst.gold.attr = j.at("gold").at("attr").get<TokenId>();
  inst.gold.obj = j.at("gold").at("obj").get<TokenId>();
  inst.gold.kind = pair_kind_from_name(j.at("gold").at("kind").get<std::string>());
  return inst;
}

}  // namespace

void export_jsonl(const DatasetSplits& splits, const std::string& data_path,
                  const std::string& vocab_path, const Provenance& provenance) {
  {
    json vocab{{"schema_version", kDatasetSchemaVersion},
               {"special", {"<pad>", "<cls>", "<mask>"}},
               {"attributes", splits.vocab.attributes()},
               {"objects", splits.vocab.objects()},
               {"context", splits.vocab.context()},
               {"provenance", provenance}};
    std::ofstream out(vocab_path);
    if (!out) throw std::runtime_error("export_jsonl: cannot write " + vocab_path);
    out << vocab.dump(2) << '\n';
  }

  std::ofstream out(data_path);
  if (!out) throw std::runtime_error("export_jsonl: cannot write " + data_path);

  json novel = json::array();
  for (const auto& p : splits.novel_pairs) {
    novel.push_back({{"attr", p.attr}, {"obj", p.obj}, {"kind", pair_kind_name(p.kind)}});
  }
  json header{{"type", "header"},
              {"schema_version", kDatasetSchemaVersion},
              {"feature_dim", splits.feature_dim},
              {"novel_pairs", std::move(novel)},
              {"provenance", provenance}};
  out << header.dump() << '\n';

  auto dump_split = [&](const std::vector<Instance>& v, const char* name) {
    for (const auto& inst : v) out << instance_to_json(inst, name).dump() << '\n';
  };
  dump_split(splits.train, "train");
  dump_split(splits.validation, "validation");
  dump_split(splits.test_seen, "test_seen");
  dump_split(splits.test_novel, "test_novel");
}

ImportedDataset import_jsonl(const std::string& data_path, const std::string& vocab_path) {
  ImportedDataset out;

  {
    std::ifstream in(vocab_path);
    if (!in) throw std::runtime_error("import_jsonl: cannot open " + vocab_path);
    json vj;
    try {
      in >> vj;
    } catch (const json::exception& e) {
      throw std::runtime_error("import_jsonl: malformed vocabulary file: " +
                               std::string(e.what()));
    }
    if (vj.at("schema_version").get<int>() != kDatasetSchemaVersion) {
      throw std::runtime_error("import_jsonl: vocabulary schema version mismatch (expected " +
                               std::to_string(kDatasetSchemaVersion) + ")");
    }
    out.splits.vocab = ConceptVocabulary(vj.at("attributes").get<std::vector<std::string>>(),
                                         vj.at("objects").get<std::vector<std::string>>(),
                                         vj.at("context").get<std::vector<std::string>>());
  }

  std::ifstream in(data_path);
  if (!in) throw std::runtime_error("import_jsonl: cannot open " + data_path);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("import_jsonl: malformed line " + std::to_string(line_no) + ": " +
                               e.what());
    }
    try {
      if (!have_header) {
        if (!j.contains("type") || j.at("type") != "header") {
          throw std::runtime_error("first line must be the header object");
        }
        if (j.at("schema_version").get<int>() != kDatasetSchemaVersion) {
          throw std::runtime_error("schema version mismatch (expected " +
                                   std::to_string(kDatasetSchemaVersion) + ")");
        }
        out.splits.feature_dim = j.at("feature_dim").get<int>();
        for (const auto& pj : j.at("novel_pairs")) {
          CompositionalPair p;
          p.attr = pj.at("attr").get<TokenId>();
          p.obj = pj.at("obj").get<TokenId>();
          p.kind = pair_kind_from_name(pj.at("kind").get<std::string>());
          out.splits.novel_pairs.push_back(p);
        }
        std::sort(out.splits.novel_pairs.begin(), out.splits.novel_pairs.end());
        if (j.contains("provenance")) {
          out.provenance = j.at("provenance").get<Provenance>();
        }
        have_header = true;
        continue;
      }
      Instance inst = instance_from_json(j);
      const std::string split = j.at("split").get<std::string>();
      if (split == "train") {
        out.splits.train.push_back(std::move(inst));
      } else if (split == "validation") {
        out.splits.validation.push_back(std::move(inst));
      } else if (split == "test_seen") {
        out.splits.test_seen.push_back(std::move(inst));
      } else if (split == "test_novel") {
        out.splits.test_novel.push_back(std::move(inst));
      } else {
        throw std::runtime_error("unknown split '" + split + "'");
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("import_jsonl: line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) {
    throw std::runtime_error("import_jsonl: missing header line (file empty or truncated)");
  }
  return out;
}

}  // namespace metacomp::world
