#pragma once

// Mini bidirectional transformer encoder: token + learned position
// embeddings, post-norm residual blocks (multi-head self-attention with a
// padding mask, then a position-wise feed-forward), and three output views:
// per-token states, the [CLS] vector, and a masked global-average pool.

#include <string>
#include <vector>

#include "demobert/checkpoint.hpp"
#include "demobert/tensor.hpp"
#include "demobert/util.hpp"

namespace demobert {

struct EncoderConfig {
  int vocab_size = 8192;
  int hidden_size = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ff_size = 256;
  int max_seq_len = 150;
  double dropout = 0.1;
  std::string activation = "gelu";  // "gelu" | "relu"

  void validate() const {
    if (vocab_size < 6) throw ConfigError("encoder: vocab_size must cover the special tokens");
    if (hidden_size <= 0 || num_layers <= 0 || num_heads <= 0 || ff_size <= 0)
      throw ConfigError("encoder: sizes must be positive");
    if (hidden_size % num_heads != 0)
      throw ConfigError("encoder: hidden_size " + std::to_string(hidden_size) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (max_seq_len < 2) throw ConfigError("encoder: max_seq_len must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0,1)");
    if (activation != "gelu" && activation != "relu")
      throw ConfigError("encoder: activation must be gelu or relu");
  }
};

// position 0 is [CLS]; padding ids carry mask 0
struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> attention_mask;

  size_t length() const { return ids.size(); }
};

struct EncoderOutput {
  Tensor token_states;  // [B, L, H]
  Tensor cls_vector;    // [B, H] == token_states[:, 0, :]
  Tensor gap_vector;    // [B, H] masked mean over real positions
};

// Uniform-length view of a batch of sequences, padded with [PAD]=0.
struct PaddedBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;  // batch * length, row-major
  Tensor mask;           // [B, L] of 0/1 doubles

  static PaddedBatch from(const std::vector<TokenSequence>& seqs) {
    PaddedBatch pb;
    pb.batch = int(seqs.size());
    for (const auto& s : seqs) pb.length = std::max(pb.length, int(s.ids.size()));
    pb.ids.assign(size_t(pb.batch) * pb.length, 0);
    pb.mask = Tensor({pb.batch, pb.length});
    for (int b = 0; b < pb.batch; ++b) {
      const auto& s = seqs[size_t(b)];
      if (s.ids.size() != s.attention_mask.size())
        throw ContractError("token sequence ids/mask length mismatch");
      for (size_t l = 0; l < s.ids.size(); ++l) {
        pb.ids[size_t(b) * pb.length + l] = s.ids[l];
        pb.mask.at(b, int(l)) = double(s.attention_mask[l]);
      }
    }
    return pb;
  }
};

inline Tensor activation_fn(const Tensor& x, const std::string& kind) {
  return kind == "relu" ? relu(x) : gelu(x);
}

// Creates all encoder parameters under `prefix` using BERT-style init:
// normal(0, 0.02) for projections and embeddings, zeros for biases, ones for
// layer-norm gains. Biases and norms are weight-decay exempt.
inline void init_encoder_params(ParamStore& store, const EncoderConfig& cfg,
                                const std::string& prefix, Rng& rng) {
  cfg.validate();
  const int H = cfg.hidden_size;
  auto dense = [&](const std::string& name, int in, int out) {
    store.create(prefix + name + ".w", randn({in, out}, rng, 0.02));
    store.create(prefix + name + ".b", Tensor({out}), true);
  };
  auto norm = [&](const std::string& name) {
    store.create(prefix + name + ".gain", full({H}, 1.0), true);
    store.create(prefix + name + ".bias", Tensor({H}), true);
  };
  store.create(prefix + "embeddings.word", randn({cfg.vocab_size, H}, rng, 0.02));
  store.create(prefix + "embeddings.position", randn({cfg.max_seq_len, H}, rng, 0.02));
  norm("embeddings.norm");
  for (int i = 0; i < cfg.num_layers; ++i) {
    const std::string layer = "layer" + std::to_string(i) + ".";
    dense(layer + "attn.wq", H, H);
    dense(layer + "attn.wk", H, H);
    dense(layer + "attn.wv", H, H);
    dense(layer + "attn.wo", H, H);
    norm(layer + "attn.norm");
    dense(layer + "ffn.w1", H, cfg.ff_size);
    dense(layer + "ffn.w2", cfg.ff_size, H);
    norm(layer + "ffn.norm");
  }
}

class Encoder {
 public:
  Encoder(ParamStore& store, EncoderConfig cfg, std::string prefix = "encoder.")
      : store_(&store), cfg_(std::move(cfg)), prefix_(std::move(prefix)) {
    cfg_.validate();
  }

  const EncoderConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  EncoderOutput encode(const PaddedBatch& batch, Pass& pass) const {
    const int B = batch.batch, L = batch.length, H = cfg_.hidden_size;
    if (L > cfg_.max_seq_len)
      throw ContractError("encode: batch length " + std::to_string(L) +
                          " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len) +
                          " (truncation must happen upstream)");
    for (int id : batch.ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw DataError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                        std::to_string(cfg_.vocab_size));

    // embeddings: word + learned position, then norm + dropout
    std::vector<int> pos_ids(size_t(B) * L);
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l) pos_ids[size_t(b) * L + l] = l;
    Tensor x = add(embedding_lookup(param("embeddings.word"), batch.ids, pass),
                   embedding_lookup(param("embeddings.position"), pos_ids, pass));
    x = layer_norm(x, use(param("embeddings.norm.gain"), pass),
                   use(param("embeddings.norm.bias"), pass));
    x = dropout(x, cfg_.dropout, pass);

    last_attention_.clear();
    const int heads = cfg_.num_heads;
    const int dh = H / heads;
    for (int i = 0; i < cfg_.num_layers; ++i) {
      const std::string layer = "layer" + std::to_string(i) + ".";

      auto project = [&](const std::string& name) {
        Tensor p = add(matmul(x, use(param(layer + "attn." + name + ".w"), pass)),
                       use(param(layer + "attn." + name + ".b"), pass));
        // [B*L, H] -> [B, heads, L, dh]
        return swap_axes(reshape(p, {B, L, heads, dh}), 1, 2);
      };
      Tensor q = project("wq");
      Tensor k = project("wk");
      Tensor v = project("wv");

      Tensor scores = scale(bmm(q, swap_axes(k, 2, 3)), 1.0 / std::sqrt(double(dh)));
      Tensor probs = masked_softmax(scores, batch.mask);
      {
        Tensor snapshot = probs;  // values only, for diagnostics
        snapshot.tape = nullptr;
        snapshot.node = -1;
        last_attention_.push_back(std::move(snapshot));
      }
      probs = dropout(probs, cfg_.dropout, pass);
      Tensor ctx = reshape(swap_axes(bmm(probs, v), 1, 2), {B * L, H});
      Tensor attn_out = add(matmul(ctx, use(param(layer + "attn.wo.w"), pass)),
                            use(param(layer + "attn.wo.b"), pass));
      attn_out = dropout(attn_out, cfg_.dropout, pass);
      x = layer_norm(add(x, attn_out), use(param(layer + "attn.norm.gain"), pass),
                     use(param(layer + "attn.norm.bias"), pass));

      Tensor ff = add(matmul(x, use(param(layer + "ffn.w1.w"), pass)),
                      use(param(layer + "ffn.w1.b"), pass));
      ff = activation_fn(ff, cfg_.activation);
      ff = add(matmul(ff, use(param(layer + "ffn.w2.w"), pass)),
               use(param(layer + "ffn.w2.b"), pass));
      ff = dropout(ff, cfg_.dropout, pass);
      x = layer_norm(add(x, ff), use(param(layer + "ffn.norm.gain"), pass),
                     use(param(layer + "ffn.norm.bias"), pass));
    }

    EncoderOutput out;
    out.token_states = reshape(x, {B, L, H});
    std::vector<int> cls_rows(size_t(B), 0);
    for (int b = 0; b < B; ++b) cls_rows[size_t(b)] = b * L;
    out.cls_vector = gather_rows(x, cls_rows);
    out.gap_vector = masked_mean_pool(out.token_states, batch.mask);
    return out;
  }

  // Per-head attention rows of the most recent forward pass, one [B,h,L,L]
  // tensor per layer. Masked keys carry exactly zero weight.
  const std::vector<Tensor>& attention_weights() const {
    if (last_attention_.empty())
      throw StateError("attention_weights: no forward pass has run yet");
    return last_attention_;
  }

 private:
  Parameter& param(const std::string& name) const { return store_->get(prefix_ + name); }

  ParamStore* store_;
  EncoderConfig cfg_;
  std::string prefix_;
  mutable std::vector<Tensor> last_attention_;
};

// ---------------------------------------------------------------------------
// Config <-> JSON (shared by checkpoints and the CLI)
// ---------------------------------------------------------------------------

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"hidden_size", c.hidden_size},
          {"num_layers", c.num_layers},   {"num_heads", c.num_heads},
          {"ff_size", c.ff_size},         {"max_seq_len", c.max_seq_len},
          {"dropout", c.dropout},         {"activation", c.activation}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.hidden_size = j.value("hidden_size", c.hidden_size);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.ff_size = j.value("ff_size", c.ff_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.dropout = j.value("dropout", c.dropout);
  c.activation = j.value("activation", c.activation);
  c.validate();
  return c;
}

inline void save_encoder_checkpoint(const std::string& path, const ParamStore& store,
                                    const EncoderConfig& cfg,
                                    const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta = {{"kind", "encoder"}, {"encoder_config", encoder_config_to_json(cfg)}};
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  save_checkpoint(path, store, meta);
}

}  // namespace demobert
