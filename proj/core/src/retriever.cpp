#include "metacomp/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace metacomp::retriever {

using nlohmann::json;

bool l2_normalize(std::span<double> v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double n = std::sqrt(n2);
  if (n < 1e-12) return false;
  for (double& x : v) x /= n;
  return true;
}

ConceptDb ConceptDb::build(const encoder::ModelParams& enc,
                           std::span<const world::Instance> train) {
  ConceptDb db;
  db.dim_ = enc.config.d;
  db.encoder_fingerprint_ = enc.fingerprint();
  db.entries_.reserve(train.size() * 2);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& inst = train[i];
    auto [attr_vec, obj_vec] = encoder::encode_slots(enc, inst);
    for (int role = 0; role < 2; ++role) {
      DbEntry e;
      e.key = role == 0 ? attr_vec.raw() : obj_vec.raw();
      e.instance_ref = static_cast<std::int32_t>(i);
      e.concept_label = role == 0 ? inst.gold.attr : inst.gold.obj;
      e.slot_role = role == 0 ? SlotRole::kAttr : SlotRole::kObj;
      if (!l2_normalize(e.key)) {
        throw std::runtime_error("ConceptDb::build: zero-norm key for train instance " +
                                 std::to_string(i) + " (degenerate encoder output)");
      }
      db.entries_.push_back(std::move(e));
    }
  }
  return db;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Full similarity ranking: score-descending, ties by lower entry index.
std::vector<Hit> full_ranking(const ConceptDb& db, std::span<const double> key) {
  if (key.size() != static_cast<std::size_t>(db.dim())) {
    throw std::invalid_argument("retriever query: key length must equal db dim");
  }
  std::vector<Hit> all(db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    all[i].entry = i;
    all[i].score = dot(key, db.entry(i).key);
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry < b.entry;
  });
  return all;
}

}  // namespace

RetrievalResult query_topk(const ConceptDb& db, std::span<const double> key, int k) {
  if (k < 1) throw std::invalid_argument("query_topk: K must be >= 1");
  if (db.size() == 0) throw std::invalid_argument("query_topk: empty database");
  RetrievalResult out;
  auto all = full_ranking(db, key);
  if (static_cast<std::size_t>(k) > all.size()) {
    out.truncated = true;
  } else {
    all.resize(static_cast<std::size_t>(k));
  }
  out.hits = std::move(all);
  return out;
}

RetrievalResult query_div_k(const ConceptDb& db, std::span<const double> key, int k) {
  if (k < 1) throw std::invalid_argument("query_div_k: K must be >= 1");
  if (db.size() == 0) throw std::invalid_argument("query_div_k: empty database");
  RetrievalResult out;
  const auto all = full_ranking(db, key);
  std::set<world::TokenId> seen;
  for (const Hit& h : all) {
    if (static_cast<int>(out.hits.size()) == k) break;
    if (seen.insert(db.entry(h.entry).concept_label).second) out.hits.push_back(h);
  }
  if (static_cast<int>(out.hits.size()) < k) out.label_shortfall = true;
  return out;
}

RetrievalResult query_oracle(const ConceptDb& db, std::span<const double> key,
                             const world::CompositionalPair& gold, int k) {
  if (k < 2) throw std::invalid_argument("query_oracle: K must be >= 2");
  if (db.size() == 0) throw std::invalid_argument("query_oracle: empty database");
  RetrievalResult out;
  const auto all = full_ranking(db, key);

  // best-scoring entry per gold element label
  std::vector<Hit> forced;
  for (world::TokenId label : {gold.attr, gold.obj}) {
    bool found = false;
    for (const Hit& h : all) {
      if (db.entry(h.entry).concept_label == label) {
        forced.push_back(h);
        found = true;
        break;
      }
    }
    if (!found) {
      out.missing_gold_element = true;
      return out;
    }
  }

  std::set<std::size_t> chosen_entries;
  std::set<world::TokenId> chosen_labels;
  for (const Hit& h : forced) {
    chosen_entries.insert(h.entry);
    chosen_labels.insert(db.entry(h.entry).concept_label);
  }
  std::vector<Hit> hits(forced);

  for (const Hit& h : all) {
    if (static_cast<int>(hits.size()) >= k) break;
    if (chosen_entries.count(h.entry)) continue;
    if (!chosen_labels.insert(db.entry(h.entry).concept_label).second) continue;
    chosen_entries.insert(h.entry);
    hits.push_back(h);
  }
  if (static_cast<int>(hits.size()) < k) out.label_shortfall = true;

  std::sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entry < b.entry;
  });
  out.hits = std::move(hits);
  return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'M', 'C', 'D', 'B'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("concept db: unexpected end of file");
}
}  // namespace

void ConceptDb::save(const std::string& path, const world::Provenance& provenance) const {
  json header{{"provenance", provenance}, {"encoder_fingerprint", encoder_fingerprint_}};
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("ConceptDb::save: cannot write " + path);
  out.write(kMagic, 4);
  write_pod(out, static_cast<std::uint32_t>(kDbVersion));
  write_pod(out, static_cast<std::uint32_t>(dim_));
  write_pod(out, static_cast<std::uint64_t>(entries_.size()));
  write_pod(out, static_cast<std::uint64_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& e : entries_) {
    out.write(reinterpret_cast<const char*>(e.key.data()),
              static_cast<std::streamsize>(e.key.size() * sizeof(double)));
    write_pod(out, e.instance_ref);
    write_pod(out, e.concept_label);
    write_pod(out, static_cast<std::uint8_t>(e.slot_role));
  }
  if (!out) throw std::runtime_error("ConceptDb::save: write failure on " + path);
}

ConceptDb::Loaded ConceptDb::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("ConceptDb::load: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("ConceptDb::load: " + path + " is not a concept db file");
  }
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != static_cast<std::uint32_t>(kDbVersion)) {
    throw std::runtime_error("ConceptDb::load: unsupported version " + std::to_string(version));
  }
  Loaded out;
  std::uint32_t dim = 0;
  std::uint64_t count = 0, hlen = 0;
  read_pod(in, dim);
  read_pod(in, count);
  read_pod(in, hlen);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("ConceptDb::load: truncated header");
  const json header = json::parse(hs);
  out.db.dim_ = static_cast<int>(dim);
  out.db.encoder_fingerprint_ = header.at("encoder_fingerprint").get<std::string>();
  if (header.contains("provenance")) {
    out.provenance = header.at("provenance").get<world::Provenance>();
  }
  out.db.entries_.resize(count);
  for (auto& e : out.db.entries_) {
    e.key.resize(dim);
    in.read(reinterpret_cast<char*>(e.key.data()),
            static_cast<std::streamsize>(dim * sizeof(double)));
    read_pod(in, e.instance_ref);
    read_pod(in, e.concept_label);
    std::uint8_t role = 0;
    read_pod(in, role);
    e.slot_role = static_cast<SlotRole>(role);
  }
  return out;
}

}  // namespace metacomp::retriever
