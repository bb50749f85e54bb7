#pragma once

// Non-BERT comparison models on the same tensor core and data pipeline:
// Kim-style CNN, biLSTM with optional additive attention (plus the
// affect-feature input variant), and the frozen-encoder baseline with an
// untrained head.

#include <string>
#include <vector>

#include "demobert/train.hpp"

namespace demobert {

struct BaselineConfig {
  std::string kind;  // cnn | bilstm | bilstm_attention
  std::string head = "empathy";
  int vocab_size = 0;
  int max_seq_len = 150;
  int embedding_dim = 32;
  int hidden_size = 32;                     // lstm units per direction
  int num_filters = 16;                     // cnn filters per width
  std::vector<int> filter_widths = {3, 4, 5};
  bool use_demographics = false;            // concat 4 binary bits pre-dense
  bool use_affect_feature = false;          // concat the binary affect label
  std::string affect_dimension = "empathy"; // which label feeds the feature
  std::string activation = "relu";

  void validate() const {
    if (kind != "cnn" && kind != "bilstm" && kind != "bilstm_attention")
      throw ConfigError("baseline: unknown kind '" + kind + "'");
    if (vocab_size < 6) throw ConfigError("baseline: vocab_size must cover special tokens");
    if (embedding_dim <= 0 || hidden_size <= 0 || num_filters <= 0)
      throw ConfigError("baseline: sizes must be positive");
    if (filter_widths.empty()) throw ConfigError("baseline: cnn needs filter widths");
    for (int w : filter_widths)
      if (w <= 0) throw ConfigError("baseline: filter widths must be positive");
    if (std::find(kTaskNames.begin(), kTaskNames.end(), head) == kTaskNames.end())
      throw ConfigError("baseline: unknown head task '" + head + "'");
  }

  int feature_extra() const {
    return (use_demographics ? 4 : 0) + (use_affect_feature ? 1 : 0);
  }
};

class BaselineModel {
 public:
  BaselineModel(BaselineConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(derive_seed(seed, hash_str("baseline_init"), hash_str(cfg_.kind)));
    store_.create("emb", randn({cfg_.vocab_size, cfg_.embedding_dim}, rng, 0.05));
    int feat = 0;
    if (cfg_.kind == "cnn") {
      for (int w : cfg_.filter_widths) {
        store_.create("conv" + std::to_string(w) + ".w",
                      randn({w * cfg_.embedding_dim, cfg_.num_filters}, rng, 0.05));
        store_.create("conv" + std::to_string(w) + ".b", Tensor({cfg_.num_filters}), true);
      }
      feat = int(cfg_.filter_widths.size()) * cfg_.num_filters;
    } else {
      const int E = cfg_.embedding_dim, Hh = cfg_.hidden_size;
      for (const char* dir : {"fwd", "bwd"}) {
        store_.create(std::string(dir) + ".wx", randn({E, 4 * Hh}, rng, 0.05));
        store_.create(std::string(dir) + ".wh", randn({Hh, 4 * Hh}, rng, 0.05));
        Parameter& b = store_.create(std::string(dir) + ".b", Tensor({4 * Hh}), true);
        for (int j = Hh; j < 2 * Hh; ++j) b.tensor.values[size_t(j)] = 1.0;  // forget bias
      }
      if (cfg_.kind == "bilstm_attention") {
        store_.create("att.w", randn({2 * Hh, Hh}, rng, 0.05));
        store_.create("att.b", Tensor({Hh}), true);
        store_.create("att.v", randn({Hh, 1}, rng, 0.05));
      }
      feat = 2 * Hh;
    }
    store_.create("head." + cfg_.head + ".w", randn({feat + cfg_.feature_extra(), 2}, rng, 0.05));
    store_.create("head." + cfg_.head + ".b", Tensor({2}), true);
  }

  const BaselineConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }

  std::map<std::string, Tensor> forward(const LabeledDataset& data, const std::vector<int>& idx,
                                        Pass& pass) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(idx.size());
    const int min_len = cfg_.kind == "cnn"
                            ? *std::max_element(cfg_.filter_widths.begin(), cfg_.filter_widths.end())
                            : 1;
    for (int i : idx) {
      TokenSequence s = data.examples[size_t(i)].seq;
      if (s.ids.empty()) throw ContractError("baseline forward: zero-length sequence");
      while (int(s.ids.size()) < min_len) {  // pad short inputs to filter width
        s.ids.push_back(Vocabulary::kPad);
        s.attention_mask.push_back(0);
      }
      seqs.push_back(std::move(s));
    }
    PaddedBatch pb = PaddedBatch::from(seqs);
    Tensor features = cfg_.kind == "cnn" ? cnn_features(pb, pass) : bilstm_features(pb, pass);

    if (cfg_.feature_extra() > 0) {
      Tensor extra({int(idx.size()), cfg_.feature_extra()});
      for (size_t r = 0; r < idx.size(); ++r) {
        const auto& ex = data.examples[size_t(idx[r])];
        int c = 0;
        if (cfg_.use_demographics) {
          if (!ex.bits) throw ContractError("baseline forward: demographic bits missing");
          for (int bit : ex.bits->canonical()) extra.at(int(r), c++) = double(bit);
        }
        if (cfg_.use_affect_feature) {
          auto it = ex.labels.find(cfg_.affect_dimension);
          if (it == ex.labels.end())
            throw ContractError("baseline forward: affect feature label '" +
                                cfg_.affect_dimension + "' missing");
          extra.at(int(r), c++) = double(it->second);
        }
      }
      features = concat(features, extra);
    }

    std::map<std::string, Tensor> out;
    out[cfg_.head] = add(matmul(features, use(store_.get("head." + cfg_.head + ".w"), pass)),
                         use(store_.get("head." + cfg_.head + ".b"), pass));
    return out;
  }

  TaskModel task_model() {
    TaskModel tm;
    tm.params = &store_;
    tm.heads = {cfg_.head};
    tm.forward = [this](const LabeledDataset& d, const std::vector<int>& idx, Pass& pass) {
      return forward(d, idx, pass);
    };
    tm.set_head_trainable = [this](const std::string& head, bool trainable) {
      store_.set_trainable("head." + head + ".", trainable);
    };
    return tm;
  }

  // pooled conv features, exposed for diagnostics
  Tensor cnn_features(const PaddedBatch& pb, Pass& pass) {
    const int B = pb.batch, L = pb.length, E = cfg_.embedding_dim;
    Tensor emb = embedding_lookup(store_.get("emb"), pb.ids, pass);  // [B*L, E]
    std::vector<Tensor> pooled;
    for (int w : cfg_.filter_widths) {
      const int Lw = L - w + 1;
      if (Lw <= 0) throw ContractError("cnn: sequence shorter than filter width after padding");
      std::vector<Tensor> taps;
      for (int k = 0; k < w; ++k) {
        std::vector<int> rows;
        rows.reserve(size_t(B) * Lw);
        for (int b = 0; b < B; ++b)
          for (int s = 0; s < Lw; ++s) rows.push_back(b * L + s + k);
        taps.push_back(gather_rows(emb, rows));  // [B*Lw, E]
      }
      Tensor windows = concat_cols(taps);  // [B*Lw, w*E]
      const std::string name = "conv" + std::to_string(w);
      Tensor conv = activation_fn(add(matmul(windows, use(store_.get(name + ".w"), pass)),
                                      use(store_.get(name + ".b"), pass)),
                                  cfg_.activation);
      pooled.push_back(max_over_time(reshape(conv, {B, Lw, cfg_.num_filters})));
    }
    return concat_cols(pooled);  // [B, widths * filters]
  }

  // per-example attention weights of the last attention forward, [B, L]
  const Tensor& last_attention() const {
    if (last_attention_.size() == 0)
      throw StateError("baseline attention: no forward pass has run yet");
    return last_attention_;
  }

 private:
  Tensor bilstm_features(const PaddedBatch& pb, Pass& pass) {
    const int B = pb.batch, L = pb.length, Hh = cfg_.hidden_size;
    for (int b = 0; b < B; ++b) {
      double m = 0.0;
      for (int l = 0; l < L; ++l) m += pb.mask.at(b, l);
      if (m == 0.0) throw ContractError("bilstm: zero-length (all-padding) sequence");
    }
    Tensor emb = embedding_lookup(store_.get("emb"), pb.ids, pass);  // [B*L, E]

    auto run_direction = [&](const std::string& dir, bool reversed) {
      Tensor wx = use(store_.get(dir + ".wx"), pass);
      Tensor wh = use(store_.get(dir + ".wh"), pass);
      Tensor b = use(store_.get(dir + ".b"), pass);
      Tensor h = Tensor({B, Hh});
      Tensor c = Tensor({B, Hh});
      std::vector<Tensor> states(size_t(L), Tensor{});
      for (int step = 0; step < L; ++step) {
        const int t = reversed ? L - 1 - step : step;
        std::vector<int> rows;
        rows.reserve(size_t(B));
        for (int bb = 0; bb < B; ++bb) rows.push_back(bb * L + t);
        Tensor xt = gather_rows(emb, rows);  // [B, E]
        Tensor gates = add(add(matmul(xt, wx), matmul(h, wh)), b);  // [B, 4H]
        Tensor ig = sigmoid_act(slice_cols(gates, 0, Hh));
        Tensor fg = sigmoid_act(slice_cols(gates, Hh, Hh));
        Tensor gg = tanh_act(slice_cols(gates, 2 * Hh, Hh));
        Tensor og = sigmoid_act(slice_cols(gates, 3 * Hh, Hh));
        Tensor c_new = add(mul(fg, c), mul(ig, gg));
        Tensor h_new = mul(og, tanh_act(c_new));
        // masked steps carry the previous state through unchanged
        Tensor mt({B});
        Tensor not_mt({B});
        for (int bb = 0; bb < B; ++bb) {
          mt.at(bb) = pb.mask.at(bb, t);
          not_mt.at(bb) = 1.0 - pb.mask.at(bb, t);
        }
        c = add(row_scale(c_new, mt), row_scale(c, not_mt));
        h = add(row_scale(h_new, mt), row_scale(h, not_mt));
        states[size_t(t)] = h;
      }
      return std::make_pair(h, states);
    };

    auto [h_fwd, states_fwd] = run_direction("fwd", false);
    auto [h_bwd, states_bwd] = run_direction("bwd", true);

    if (cfg_.kind == "bilstm") return concat(h_fwd, h_bwd);

    // additive attention over concatenated per-step states
    std::vector<Tensor> steps;
    steps.reserve(size_t(L));
    for (int t = 0; t < L; ++t) steps.push_back(concat(states_fwd[size_t(t)], states_bwd[size_t(t)]));
    Tensor h_all = reshape(concat_cols(steps), {B, L, 2 * Hh});  // [B, L, 2H]
    Tensor flat = reshape(h_all, {B * L, 2 * Hh});
    Tensor u = tanh_act(add(matmul(flat, use(store_.get("att.w"), pass)),
                            use(store_.get("att.b"), pass)));
    Tensor scores = reshape(matmul(u, use(store_.get("att.v"), pass)), {B, 1, 1, L});
    Tensor alpha = masked_softmax(scores, pb.mask);  // [B,1,1,L]
    {
      Tensor snapshot = reshape(alpha, {B, L});
      snapshot.tape = nullptr;
      snapshot.node = -1;
      last_attention_ = std::move(snapshot);
    }
    Tensor ctx = bmm(reshape(alpha, {B, 1, L}), h_all);  // [B, 1, 2H]
    return reshape(ctx, {B, 2 * Hh});
  }

  BaselineConfig cfg_;
  ParamStore store_;
  Tensor last_attention_;
};

// Frozen MLM-pretrained encoder with a randomly initialized, untrained head:
// the "pre-trained BERT without further training" row. Never updates any
// parameter; predictions on balanced data land near chance.
class FrozenBert {
 public:
  FrozenBert(const EncoderConfig& enc_cfg, const LoadedCheckpoint& ck, const std::string& head,
             uint64_t head_seed)
      : enc_cfg_(enc_cfg), head_(head) {
    Rng init_rng(derive_seed(head_seed, hash_str("frozen_encoder_init")));
    init_encoder_params(store_, enc_cfg_, "encoder.", init_rng);
    for (const auto& [name, tensor] : ck.params) {
      if (name.rfind("encoder.", 0) != 0) continue;
      Parameter& p = store_.get(name);
      if (p.tensor.shape != tensor.shape)
        throw ShapeError("frozen encoder: checkpoint shape mismatch on " + name);
      p.tensor.values = tensor.values;
    }
    store_.set_trainable("encoder.", false);
    Rng rng(derive_seed(head_seed, hash_str("frozen_head")));
    store_.create("head." + head + ".w", randn({enc_cfg_.hidden_size, 2}, rng, 0.05));
    store_.create("head." + head + ".b", Tensor({2}), true);
    encoder_ = std::make_unique<Encoder>(store_, enc_cfg_, "encoder.");
  }

  std::map<std::string, Tensor> forward(const LabeledDataset& data, const std::vector<int>& idx,
                                        Pass& pass) {
    std::vector<TokenSequence> seqs;
    for (int i : idx) seqs.push_back(data.examples[size_t(i)].seq);
    EncoderOutput out = encoder_->encode(PaddedBatch::from(seqs), pass);
    std::map<std::string, Tensor> logits;
    logits[head_] = add(matmul(out.cls_vector, use(store_.get("head." + head_ + ".w"), pass)),
                        use(store_.get("head." + head_ + ".b"), pass));
    return logits;
  }

  TaskModel task_model() {
    TaskModel tm;
    tm.params = &store_;
    tm.heads = {head_};
    tm.forward = [this](const LabeledDataset& d, const std::vector<int>& idx, Pass& pass) {
      return forward(d, idx, pass);
    };
    tm.set_head_trainable = [this](const std::string& head, bool trainable) {
      store_.set_trainable("head." + head + ".", trainable);
    };
    return tm;
  }

  ParamStore& params() { return store_; }

 private:
  EncoderConfig enc_cfg_;
  std::string head_;
  ParamStore store_;
  std::unique_ptr<Encoder> encoder_;
};

}  // namespace demobert
