#include "metacomp/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "metacomp/rng.hpp"
#include "src_json_codec.hpp"

namespace metacomp::encoder {

namespace ad = autodiff;
using ad::Graph;
using ad::NodeId;
using ad::ParamNodes;
using nlohmann::json;

const char* arch_name(Arch a) { return a == Arch::kOneStream ? "one_stream" : "two_stream"; }

Arch arch_from_name(const std::string& s) {
  if (s == "one_stream") return Arch::kOneStream;
  if (s == "two_stream") return Arch::kTwoStream;
  throw std::invalid_argument("unknown arch '" + s + "'");
}

void EncoderConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("EncoderConfig." + field + ": " + why);
  };
  if (d < 1) bad("d", "must be >= 1");
  if (layers < 1) bad("layers", "must be >= 1");
  if (heads < 1) bad("heads", "must be >= 1");
  if (d % heads != 0) bad("heads", "d must be divisible by heads");
  if (vocab_size < 4) bad("vocab_size", "must cover the special tokens");
  if (region_feat_dim < 1) bad("region_feat_dim", "must be >= 1");
  if (max_seq_len < 3) bad("max_seq_len", "must be >= 3");
  if (mlp_hidden < 0) bad("mlp_hidden", "must be >= 0 (0 = 2*d)");
}

// ---------------------------------------------------------------------------
// parameter layout
// ---------------------------------------------------------------------------

namespace {

enum class SegKind { kWeight, kBias, kGain };

using SegmentFn = std::function<void(const std::string&, std::vector<std::size_t>, SegKind)>;

void enumerate_block(const EncoderConfig& c, const std::string& p, bool cross, const SegmentFn& f) {
  const auto d = static_cast<std::size_t>(c.d);
  const auto dh = static_cast<std::size_t>(c.head_dim());
  const auto m = static_cast<std::size_t>(c.hidden());
  f(p + "ln1_g", {d}, SegKind::kGain);
  f(p + "ln1_b", {d}, SegKind::kBias);
  if (cross) {
    f(p + "lnkv_g", {d}, SegKind::kGain);
    f(p + "lnkv_b", {d}, SegKind::kBias);
  }
  for (int h = 0; h < c.heads; ++h) {
    const std::string hp = p + "h" + std::to_string(h) + ".";
    for (const char* w : {"wq", "wk", "wv"}) f(hp + w, {d, dh}, SegKind::kWeight);
    for (const char* b : {"bq", "bk", "bv"}) f(hp + b, {dh}, SegKind::kBias);
  }
  f(p + "wo", {d, d}, SegKind::kWeight);
  f(p + "bo", {d}, SegKind::kBias);
  f(p + "ln2_g", {d}, SegKind::kGain);
  f(p + "ln2_b", {d}, SegKind::kBias);
  f(p + "mlp_w1", {d, m}, SegKind::kWeight);
  f(p + "mlp_b1", {m}, SegKind::kBias);
  f(p + "mlp_w2", {m, d}, SegKind::kWeight);
  f(p + "mlp_b2", {d}, SegKind::kBias);
}

void enumerate_segments(const EncoderConfig& c, const SegmentFn& f) {
  const auto d = static_cast<std::size_t>(c.d);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  f("tok_emb", {v, d}, SegKind::kWeight);
  f("pos_emb", {static_cast<std::size_t>(c.max_seq_len), d}, SegKind::kWeight);
  f("region_w", {static_cast<std::size_t>(c.region_feat_dim + 4), d}, SegKind::kWeight);
  f("region_b", {d}, SegKind::kBias);
  for (int l = 0; l < c.layers; ++l) {
    const std::string lp = "l" + std::to_string(l) + ".";
    if (c.arch == Arch::kOneStream) {
      enumerate_block(c, lp, false, f);
    } else {
      enumerate_block(c, lp + "t.", false, f);
      enumerate_block(c, lp + "v.", false, f);
      enumerate_block(c, lp + "x.", true, f);
    }
  }
  f("lnf_g", {d}, SegKind::kGain);
  f("lnf_b", {d}, SegKind::kBias);
  f("mlm_w1", {d, d}, SegKind::kWeight);
  f("mlm_b1", {d}, SegKind::kBias);
  f("mlm_w2", {d, v}, SegKind::kWeight);
  f("mlm_b2", {v}, SegKind::kBias);
}

constexpr double kInitStd = 0.08;
constexpr double kLnEps = 1e-5;

}  // namespace

ModelParams init_params(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams out;
  out.config = config;
  Rng rng(seed);
  enumerate_segments(config, [&](const std::string& name, std::vector<std::size_t> shape,
                                 SegKind kind) {
    const std::size_t i = out.values.add_segment(name, std::move(shape));
    auto data = out.values.segment_data(i);
    switch (kind) {
      case SegKind::kWeight:
        for (auto& x : data) x = rng.gauss() * kInitStd;
        break;
      case SegKind::kBias:
        break;  // zeros
      case SegKind::kGain:
        for (auto& x : data) x = 1.0;
        break;
    }
  });
  return out;
}

std::size_t param_count(const EncoderConfig& config) {
  std::size_t total = 0;
  enumerate_segments(config, [&](const std::string&, std::vector<std::size_t> shape, SegKind) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    total += n;
  });
  return total;
}

// ---------------------------------------------------------------------------
// forward graph builders
// ---------------------------------------------------------------------------

namespace {

struct Ctx {
  Graph& g;
  const ParamNodes& th;
  const EncoderConfig& cfg;

  NodeId p(const std::string& name) const { return th.at(name); }
};

NodeId layer_norm(Ctx& c, NodeId x, const std::string& prefix) {
  Graph& g = c.g;
  const std::size_t rows = g.value(x).rows();
  const std::size_t d = g.value(x).cols();
  const double invd = 1.0 / static_cast<double>(d);
  const NodeId mu = g.scale(g.row_sum(x), invd);
  const NodeId xc = ad::sub(g, x, g.col_bcast(mu, d));
  const NodeId var = g.scale(g.row_sum(g.mul(xc, xc)), invd);
  const NodeId inv = g.rsqrt(g.add_const(var, kLnEps));
  const NodeId xn = g.mul(xc, g.col_bcast(inv, d));
  return g.add(g.mul(xn, g.row_bcast(c.p(prefix + "_g"), rows)),
               g.row_bcast(c.p(prefix + "_b"), rows));
}

NodeId linear(Ctx& c, NodeId x, const std::string& w, const std::string& b) {
  const std::size_t rows = c.g.value(x).rows();
  return c.g.add(c.g.matmul(x, c.p(w)), c.g.row_bcast(c.p(b), rows));
}

NodeId attention(Ctx& c, NodeId q_in, NodeId kv_in, const std::string& prefix) {
  Graph& g = c.g;
  const std::size_t nq = g.value(q_in).rows();
  const double scale = 1.0 / std::sqrt(static_cast<double>(c.cfg.head_dim()));
  NodeId merged = ad::kNoNode;  // (d x nq), heads stacked as rows
  for (int h = 0; h < c.cfg.heads; ++h) {
    const std::string hp = prefix + "h" + std::to_string(h) + ".";
    const NodeId q = linear(c, q_in, hp + "wq", hp + "bq");
    const NodeId k = linear(c, kv_in, hp + "wk", hp + "bk");
    const NodeId v = linear(c, kv_in, hp + "wv", hp + "bv");
    const NodeId scores = g.scale(g.matmul(q, g.transpose(k)), scale);
    const NodeId probs = g.softmax(scores);
    const NodeId head = g.transpose(g.matmul(probs, v));  // (dh x nq)
    merged = merged == ad::kNoNode ? head : g.concat_rows(merged, head);
  }
  const NodeId concat = g.transpose(merged);  // (nq x d)
  const NodeId proj = g.add(g.matmul(concat, c.p(prefix + "wo")),
                            g.row_bcast(c.p(prefix + "bo"), nq));
  return proj;
}

NodeId mlp(Ctx& c, NodeId x, const std::string& prefix) {
  const NodeId h = c.g.relu(linear(c, x, prefix + "mlp_w1", prefix + "mlp_b1"));
  return linear(c, h, prefix + "mlp_w2", prefix + "mlp_b2");
}

/// Pre-norm residual block; `kv` equals `x` for self-attention.
NodeId block(Ctx& c, NodeId x, NodeId kv, const std::string& prefix, bool cross) {
  const NodeId q_in = layer_norm(c, x, prefix + "ln1");
  const NodeId kv_in = cross ? layer_norm(c, kv, prefix + "lnkv") : (kv == x ? q_in : kv);
  x = c.g.add(x, attention(c, q_in, kv_in, prefix));
  x = c.g.add(x, mlp(c, layer_norm(c, x, prefix + "ln2"), prefix));
  return x;
}

void check_instance(const EncoderConfig& cfg, const world::Instance& inst) {
  const auto len = static_cast<int>(inst.caption.size());
  if (inst.attr_slot < 0 || inst.obj_slot < 0 || inst.attr_slot >= len || inst.obj_slot >= len ||
      inst.caption[static_cast<std::size_t>(inst.attr_slot)] != world::ConceptVocabulary::kMask ||
      inst.caption[static_cast<std::size_t>(inst.obj_slot)] != world::ConceptVocabulary::kMask) {
    throw std::invalid_argument("encoder: instance is missing a MASK slot");
  }
  if (len > cfg.max_seq_len) {
    throw std::invalid_argument("encoder: caption longer than max_seq_len");
  }
  for (const auto& r : inst.regions) {
    if (static_cast<int>(r.feat.size()) != cfg.region_feat_dim) {
      throw std::invalid_argument("encoder: region feature dim mismatch (expected " +
                                  std::to_string(cfg.region_feat_dim) + ", got " +
                                  std::to_string(r.feat.size()) + ")");
    }
  }
  if (inst.regions.empty()) {
    throw std::invalid_argument("encoder: instance has no regions");
  }
}

}  // namespace

SlotNodes encode_slots_nodes(Graph& g, const ParamNodes& theta, const EncoderConfig& config,
                             const world::Instance& instance) {
  check_instance(config, instance);
  Ctx c{g, theta, config};

  // text stream: token + position embeddings
  std::vector<std::int32_t> ids(instance.caption.begin(), instance.caption.end());
  std::vector<std::int32_t> pos(ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<std::int32_t>(i);
  NodeId text = g.add(g.embedding_lookup(c.p("tok_emb"), ids),
                      g.index_select(c.p("pos_emb"), pos));

  // region stream: [feat | box] rows, no position signal (order-invariant)
  const std::size_t nr = instance.regions.size();
  const std::size_t fin = static_cast<std::size_t>(config.region_feat_dim) + 4;
  std::vector<double> rdata(nr * fin);
  for (std::size_t r = 0; r < nr; ++r) {
    const auto& reg = instance.regions[r];
    std::copy(reg.feat.begin(), reg.feat.end(), rdata.begin() + static_cast<std::ptrdiff_t>(r * fin));
    std::copy(reg.box.begin(), reg.box.end(),
              rdata.begin() + static_cast<std::ptrdiff_t>(r * fin + reg.feat.size()));
  }
  const NodeId rin = g.constant(Tensor::matrix(nr, fin, std::move(rdata)));
  NodeId regions = g.add(g.matmul(rin, c.p("region_w")), g.row_bcast(c.p("region_b"), nr));

  NodeId hidden;
  if (config.arch == Arch::kOneStream) {
    NodeId x = g.concat_rows(text, regions);
    for (int l = 0; l < config.layers; ++l) {
      x = block(c, x, x, "l" + std::to_string(l) + ".", false);
    }
    hidden = layer_norm(c, x, "lnf");
  } else {
    NodeId t = text;
    NodeId r = regions;
    for (int l = 0; l < config.layers; ++l) {
      const std::string lp = "l" + std::to_string(l) + ".";
      t = block(c, t, t, lp + "t.", false);
      r = block(c, r, r, lp + "v.", false);
      t = block(c, t, r, lp + "x.", true);
    }
    hidden = layer_norm(c, t, "lnf");
  }

  SlotNodes out;
  out.attr = g.index_select(hidden, {instance.attr_slot});
  out.obj = g.index_select(hidden, {instance.obj_slot});
  return out;
}

NodeId mlm_logits_nodes(Graph& g, const ParamNodes& theta, const EncoderConfig& config,
                        NodeId slot) {
  Ctx c{g, theta, config};
  const NodeId h1 = g.tanh_(linear(c, slot, "mlm_w1", "mlm_b1"));
  const NodeId logits = linear(c, h1, "mlm_w2", "mlm_b2");  // 1 x V
  return g.reshape(logits, {static_cast<std::size_t>(config.vocab_size)});
}

NodeId slot_loss_nodes(Graph& g, const ParamNodes&, const EncoderConfig&, NodeId logits,
                       world::TokenId gold, std::span<const world::TokenId> candidates) {
  if (candidates.empty()) {
    const NodeId ls = g.log_softmax(logits);
    return g.scale(g.sum(g.index_select(ls, {gold})), -1.0);
  }
  std::int32_t gold_pos = -1;
  std::vector<std::int32_t> ids;
  ids.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    ids.push_back(candidates[i]);
    if (candidates[i] == gold) gold_pos = static_cast<std::int32_t>(i);
  }
  if (gold_pos < 0) return ad::kNoNode;  // gold excluded by the candidate set: skip this term
  const NodeId ls = g.log_softmax(g.index_select(logits, ids));
  return g.scale(g.sum(g.index_select(ls, {gold_pos})), -1.0);
}

NodeId instance_loss_nodes(Graph& g, const ParamNodes& theta, const EncoderConfig& config,
                           const world::Instance& instance, const SlotCandidates* restrict_to) {
  const SlotNodes slots = encode_slots_nodes(g, theta, config, instance);
  const NodeId attr_logits = mlm_logits_nodes(g, theta, config, slots.attr);
  const NodeId obj_logits = mlm_logits_nodes(g, theta, config, slots.obj);
  const std::span<const world::TokenId> none;
  const NodeId la = slot_loss_nodes(g, theta, config, attr_logits, instance.gold.attr,
                                    restrict_to ? std::span<const world::TokenId>(restrict_to->attr)
                                                : none);
  const NodeId lo = slot_loss_nodes(g, theta, config, obj_logits, instance.gold.obj,
                                    restrict_to ? std::span<const world::TokenId>(restrict_to->obj)
                                                : none);
  if (la == ad::kNoNode && lo == ad::kNoNode) return ad::kNoNode;
  if (la == ad::kNoNode) return lo;
  if (lo == ad::kNoNode) return la;
  return g.scale(g.add(la, lo), 0.5);
}

NodeId batch_loss_nodes(Graph& g, const ParamNodes& theta, const EncoderConfig& config,
                        std::span<const world::Instance> batch,
                        const SlotCandidates* restrict_to) {
  NodeId acc = ad::kNoNode;
  int used = 0;
  for (const auto& inst : batch) {
    const NodeId li = instance_loss_nodes(g, theta, config, inst, restrict_to);
    if (li == ad::kNoNode) continue;
    acc = acc == ad::kNoNode ? li : g.add(acc, li);
    ++used;
  }
  if (acc == ad::kNoNode) return ad::kNoNode;
  return g.scale(acc, 1.0 / static_cast<double>(used));
}

// ---------------------------------------------------------------------------
// value-level helpers
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> encode_slots(const ModelParams& params, const world::Instance& instance) {
  Graph g(512);
  const ParamNodes theta = make_param_nodes(g, params.values);
  const SlotNodes slots = encode_slots_nodes(g, theta, params.config, instance);
  const std::size_t d = static_cast<std::size_t>(params.config.d);
  Tensor attr = Tensor::zeros({d});
  Tensor obj = Tensor::zeros({d});
  attr.raw() = g.value(slots.attr).raw();
  obj.raw() = g.value(slots.obj).raw();
  return {std::move(attr), std::move(obj)};
}

std::vector<double> mlm_logits(const ModelParams& params, const Tensor& slot_vector) {
  if (slot_vector.size() != static_cast<std::size_t>(params.config.d)) {
    throw std::invalid_argument("mlm_logits: slot vector length must equal d");
  }
  Graph g(128);
  const ParamNodes theta = make_param_nodes(g, params.values);
  const NodeId slot = g.constant(Tensor::matrix(1, slot_vector.size(), slot_vector.raw()));
  const NodeId logits = mlm_logits_nodes(g, theta, params.config, slot);
  return g.value(logits).raw();
}

world::TokenId argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;  // strict: ties keep the smallest id
  }
  return static_cast<world::TokenId>(best);
}

// ---------------------------------------------------------------------------
// plain MLM training
// ---------------------------------------------------------------------------

MlmTrainLog train_mlm(ModelParams& params, std::span<const world::Instance> train,
                      const MlmTrainConfig& config) {
  if (train.empty()) throw std::invalid_argument("train_mlm: empty training split");
  MlmTrainLog log;
  optim::AdamState adam;
  const optim::AdamConfig adam_cfg{config.lr, 0.9, 0.999, 1e-8};
  Rng rng(config.seed);

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      std::vector<world::Instance> batch;
      batch.reserve(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const auto& inst = train[order[k]];
        batch.push_back(inst);
        log.concept_slots_total += 2;
        for (std::size_t t = 0; t < inst.caption.size(); ++t) {
          const bool is_slot = static_cast<int>(t) == inst.attr_slot ||
                               static_cast<int>(t) == inst.obj_slot;
          if (inst.caption[t] == world::ConceptVocabulary::kMask) {
            if (is_slot) {
              ++log.concept_slots_masked;
            } else {
              ++log.context_tokens_masked;
            }
          }
        }
      }
      try {
        Graph g(batch.size() * 600);
        const ParamNodes theta = make_param_nodes(g, params.values);
        const NodeId loss = batch_loss_nodes(g, theta, params.config, batch, nullptr);
        const auto grads = g.grad(loss, theta.ids);
        const auto flat = flatten_grads(g, params.values, grads);
        adam_step(params.values.flat(), flat, adam, adam_cfg);
        const double lv = g.scalar_value(loss);
        log.step_losses.push_back(lv);
        epoch_sum += lv;
        ++steps;
      } catch (const ad::NumericError& e) {
        throw ad::NumericError("train_mlm: aborted at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(steps) + ": " + e.what());
      }
    }
    log.epoch_losses.push_back(epoch_sum / static_cast<double>(steps));
  }
  return log;
}

// ---------------------------------------------------------------------------
// checkpoint IO
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'M', 'C', 'C', 'K'};

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: unexpected end of file");
}
}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path,
                     const world::Provenance& provenance) {
  json header{{"config", detail::encoder_config_to_json(params.config)},
              {"provenance", provenance},
              {"segments", json::array()}};
  for (std::size_t i = 0; i < params.values.segment_count(); ++i) {
    const auto& s = params.values.segment(i);
    header["segments"].push_back({{"name", s.name}, {"shape", s.shape}});
  }
  const std::string hs = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
  out.write(kMagic, 4);
  write_pod(out, static_cast<std::uint32_t>(kCheckpointVersion));
  write_pod(out, static_cast<std::uint64_t>(hs.size()));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  const auto& flat = params.values.flat();
  write_pod(out, static_cast<std::uint64_t>(flat.size()));
  out.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_checkpoint: write failure on " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  }
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != static_cast<std::uint32_t>(kCheckpointVersion)) {
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
  }
  std::uint64_t hlen = 0;
  read_pod(in, hlen);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("load_checkpoint: truncated header");
  json header = json::parse(hs);

  LoadedCheckpoint out;
  out.params.config = detail::encoder_config_from_json(header.at("config"));
  if (header.contains("provenance")) {
    out.provenance = header.at("provenance").get<world::Provenance>();
  }
  for (const auto& sj : header.at("segments")) {
    out.params.values.add_segment(sj.at("name").get<std::string>(),
                                  sj.at("shape").get<std::vector<std::size_t>>());
  }
  std::uint64_t n = 0;
  read_pod(in, n);
  if (n != out.params.values.size()) {
    throw std::runtime_error("load_checkpoint: data length does not match segment layout");
  }
  in.read(reinterpret_cast<char*>(out.params.values.flat().data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw std::runtime_error("load_checkpoint: truncated data");
  return out;
}

}  // namespace metacomp::encoder
