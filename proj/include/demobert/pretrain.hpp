#pragma once

// Cross-domain masked-language-model pre-training: corpus filtering (all vs
// demographic-specific slices), BERT-style token corruption (80/10/10), an
// MLM head tied to the input embedding matrix, and a fixed-masking
// perplexity diagnostic for measuring demographic slanting.

#include <optional>
#include <string>
#include <vector>

#include "demobert/train.hpp"

namespace demobert {

struct PretrainConfig {
  enum class Scenario { all, demographic_specific };
  Scenario scenario = Scenario::all;
  std::string attribute = "gender";  // demographic_specific: which attribute
  int class_bit = 0;                 // demographic_specific: which side
  int epochs = 10;
  double learning_rate = 3e-5;
  double mask_fraction = 0.15;
  int batch_size = 16;
  double weight_decay = 0.01;
  uint64_t seed = 0;

  void validate() const {
    if (mask_fraction <= 0.0 || mask_fraction >= 1.0)
      throw ConfigError("pretrain: mask_fraction must be in (0, 1)");
    if (epochs < 1) throw ConfigError("pretrain: epochs must be >= 1");
    if (learning_rate <= 0.0 || batch_size <= 0)
      throw ConfigError("pretrain: learning_rate and batch_size must be positive");
    if (scenario == Scenario::demographic_specific && attribute != "gender" && attribute != "age")
      throw ConfigError("pretrain: corpus docs carry gender and age only, got attribute '" +
                        attribute + "'");
    if (class_bit != 0 && class_bit != 1) throw ConfigError("pretrain: class_bit must be 0 or 1");
  }

  std::string scenario_name() const {
    if (scenario == Scenario::all) return "ALL";
    return "demographic_specific(" + attribute + "," + std::to_string(class_bit) + ")";
  }
};

inline constexpr int kMlmIgnore = -1;

struct MlmBatch {
  std::vector<int> input_ids;   // corruptions applied
  std::vector<int> target_ids;  // original ids at corrupted positions, kMlmIgnore elsewhere
  std::vector<int> attention_mask;
};

// Selects round(mask_fraction * maskable) positions (at least one); of those
// 80% become [MASK], 10% a random regular token, 10% stay unchanged.
// [CLS]/[SEP]/[PAD] are never corrupted. Returns nothing when the sequence
// has no maskable token (skip-sequence signal).
inline std::optional<MlmBatch> mask_tokens(const TokenSequence& seq, double mask_fraction,
                                           Rng& rng, int vocab_size) {
  std::vector<int> maskable;
  for (size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id == Vocabulary::kPad || id == Vocabulary::kCls || id == Vocabulary::kSep) continue;
    if (seq.attention_mask[i] == 0) continue;
    maskable.push_back(int(i));
  }
  if (maskable.empty()) return std::nullopt;

  const int n_corrupt = std::max<int>(1, int(std::lround(mask_fraction * double(maskable.size()))));
  rng.shuffle(maskable);
  maskable.resize(size_t(n_corrupt));

  MlmBatch out;
  out.input_ids = seq.ids;
  out.attention_mask = seq.attention_mask;
  out.target_ids.assign(seq.ids.size(), kMlmIgnore);
  for (int pos : maskable) {
    out.target_ids[size_t(pos)] = seq.ids[size_t(pos)];
    const double r = rng.uniform();
    if (r < 0.8) {
      out.input_ids[size_t(pos)] = Vocabulary::kMask;
    } else if (r < 0.9) {
      out.input_ids[size_t(pos)] =
          Vocabulary::kFirstRegular +
          int(rng.uniform_int(uint64_t(vocab_size - Vocabulary::kFirstRegular)));
    }  // else leave unchanged
  }
  return out;
}

inline int corpus_attribute_bit(const CorpusDoc& doc, const std::string& attribute) {
  if (attribute == "gender") return doc.gender == Gender::female ? 1 : 0;
  if (attribute == "age") return doc.age >= 35 ? 1 : 0;
  throw ConfigError("corpus docs carry gender and age only, got '" + attribute + "'");
}

inline std::vector<CorpusDoc> filter_corpus(const std::vector<CorpusDoc>& corpus,
                                            const PretrainConfig& cfg) {
  if (cfg.scenario == PretrainConfig::Scenario::all) return corpus;
  std::vector<CorpusDoc> out;
  for (const auto& d : corpus)
    if (corpus_attribute_bit(d, cfg.attribute) == cfg.class_bit) out.push_back(d);
  return out;
}

namespace detail {

// gather hidden states at corrupted positions and score them against the
// (tied) embedding matrix plus a learned output bias
inline Tensor mlm_loss(Encoder& enc, ParamStore& store, const std::vector<MlmBatch>& batch,
                       Pass& pass) {
  std::vector<TokenSequence> seqs;
  for (const auto& b : batch) {
    TokenSequence s;
    s.ids = b.input_ids;
    s.attention_mask = b.attention_mask;
    seqs.push_back(std::move(s));
  }
  PaddedBatch pb = PaddedBatch::from(seqs);
  EncoderOutput out = enc.encode(pb, pass);
  const int L = pb.length, H = enc.config().hidden_size;

  std::vector<int> flat_positions;
  std::vector<int> targets;
  for (size_t b = 0; b < batch.size(); ++b)
    for (size_t p = 0; p < batch[b].target_ids.size(); ++p)
      if (batch[b].target_ids[p] != kMlmIgnore) {
        flat_positions.push_back(int(b) * L + int(p));
        targets.push_back(batch[b].target_ids[p]);
      }
  if (flat_positions.empty()) throw ContractError("mlm_loss: batch has no corrupted positions");

  Tensor states = reshape(out.token_states, {int(batch.size()) * L, H});
  Tensor picked = gather_rows(states, flat_positions);
  Tensor emb = use(store.get(enc.prefix() + "embeddings.word"), pass);
  Tensor logits = add(matmul(picked, swap_axes(emb, 0, 1)), use(store.get("mlm.bias"), pass));
  return cross_entropy(logits, targets);
}

}  // namespace detail

struct PretrainResult {
  double initial_loss = 0.0;       // mean CE before any update, epoch-0 masking
  std::vector<double> epoch_loss;  // mean corrupted-position CE per epoch
  int docs_used = 0;
};

// MLM training on the (optionally filtered) corpus. The output projection is
// tied to the input embedding matrix; only the bias is a new parameter.
inline PretrainResult pretrain(const std::vector<CorpusDoc>& corpus, const Vocabulary& vocab,
                               ParamStore& store, const EncoderConfig& enc_cfg,
                               const PretrainConfig& cfg) {
  cfg.validate();
  const std::vector<CorpusDoc> docs = filter_corpus(corpus, cfg);
  if (docs.empty())
    throw DataError("pretrain: scenario " + cfg.scenario_name() + " leaves no documents");

  if (!store.has("mlm.bias")) store.create("mlm.bias", Tensor({enc_cfg.vocab_size}), true);
  Encoder enc(store, enc_cfg, "encoder.");

  std::vector<TokenSequence> seqs;
  seqs.reserve(docs.size());
  for (const auto& d : docs) seqs.push_back(tokenize(d.text, vocab, enc_cfg.max_seq_len));

  TrainConfig opt_cfg;
  opt_cfg.learning_rate = cfg.learning_rate;
  opt_cfg.weight_decay = cfg.weight_decay;
  opt_cfg.batch_size = cfg.batch_size;
  opt_cfg.seed = cfg.seed;
  opt_cfg.epochs = cfg.epochs;
  OptimizerState opt;

  PretrainResult result;
  result.docs_used = int(docs.size());

  // untrained reference point, evaluated with the first epoch's masking
  {
    double loss_sum = 0.0;
    int batches = 0;
    for (size_t start = 0; start < seqs.size(); start += size_t(cfg.batch_size)) {
      const size_t end = std::min(seqs.size(), start + size_t(cfg.batch_size));
      std::vector<MlmBatch> batch;
      for (size_t i = start; i < end; ++i) {
        Rng mask_rng(derive_seed(cfg.seed, hash_str("mask"), 0, uint64_t(i)));
        auto mb = mask_tokens(seqs[i], cfg.mask_fraction, mask_rng, vocab.size());
        if (mb) batch.push_back(std::move(*mb));
      }
      if (batch.empty()) continue;
      Pass pass;  // eval mode, no updates
      loss_sum += detail::mlm_loss(enc, store, batch, pass).values[0];
      ++batches;
    }
    if (batches == 0) throw DataError("pretrain: no sequence in the corpus is maskable");
    result.initial_loss = loss_sum / batches;
  }

  uint64_t global_step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<int> order(seqs.size(), 0);
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    Rng shuffle_rng(derive_seed(cfg.seed, hash_str("mlm_shuffle"), uint64_t(e)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
      std::vector<MlmBatch> batch;
      for (size_t i = start; i < end; ++i) {
        const int doc_ix = order[i];
        Rng mask_rng(derive_seed(cfg.seed, hash_str("mask"), uint64_t(e), uint64_t(doc_ix)));
        auto mb = mask_tokens(seqs[size_t(doc_ix)], cfg.mask_fraction, mask_rng, vocab.size());
        if (mb) batch.push_back(std::move(*mb));
      }
      if (batch.empty()) continue;
      Tape tape;
      Pass pass;
      pass.tape = &tape;
      pass.train = true;
      pass.dropout_seed = derive_seed(cfg.seed, hash_str("mlm_dropout"));
      pass.step = global_step++;
      Tensor loss = detail::mlm_loss(enc, store, batch, pass);
      store.zero_grads();
      tape.backward(loss);
      adamw_step(store, opt, opt_cfg);
      loss_sum += loss.values[0];
      ++batches;
    }
    if (batches == 0) throw DataError("pretrain: no sequence in the corpus is maskable");
    result.epoch_loss.push_back(loss_sum / batches);
  }
  return result;
}

// exp(mean masked-token cross-entropy) under a fixed, content-keyed masking:
// every document is masked the same way no matter when or in which order it
// is evaluated, so checkpoint comparisons stay paired.
inline double perplexity(const std::vector<CorpusDoc>& slice, const Vocabulary& vocab,
                         ParamStore& store, const EncoderConfig& enc_cfg,
                         double mask_fraction = 0.15) {
  if (slice.empty()) throw DataError("perplexity: empty corpus slice");
  if (!store.has("mlm.bias")) store.create("mlm.bias", Tensor({enc_cfg.vocab_size}), true);
  Encoder enc(store, enc_cfg, "encoder.");

  struct Partial {
    uint64_t key;
    double loss_sum;
    int64_t count;
  };
  std::vector<Partial> partials;
  for (const auto& doc : slice) {
    TokenSequence seq = tokenize(doc.text, vocab, enc_cfg.max_seq_len);
    Rng rng(derive_seed(0x70657270ULL, hash_str(doc.text)));
    // deterministic evaluation corruption: all selected positions -> [MASK]
    std::vector<int> maskable;
    for (size_t i = 0; i < seq.ids.size(); ++i)
      if (seq.ids[i] >= Vocabulary::kFirstRegular || seq.ids[i] == Vocabulary::kUnk)
        maskable.push_back(int(i));
    if (maskable.empty()) continue;
    const int n = std::max<int>(1, int(std::lround(mask_fraction * double(maskable.size()))));
    rng.shuffle(maskable);
    maskable.resize(size_t(n));

    MlmBatch mb;
    mb.input_ids = seq.ids;
    mb.attention_mask = seq.attention_mask;
    mb.target_ids.assign(seq.ids.size(), kMlmIgnore);
    for (int pos : maskable) {
      mb.target_ids[size_t(pos)] = seq.ids[size_t(pos)];
      mb.input_ids[size_t(pos)] = Vocabulary::kMask;
    }
    Pass pass;  // eval mode
    Tensor loss = detail::mlm_loss(enc, store, {mb}, pass);
    partials.push_back({hash_str(doc.text), loss.values[0] * n, n});
  }
  if (partials.empty()) throw DataError("perplexity: no maskable documents in slice");

  // order-independent reduction: fold in a canonical order
  std::sort(partials.begin(), partials.end(), [](const Partial& a, const Partial& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.loss_sum < b.loss_sum;
  });
  double total = 0.0;
  int64_t count = 0;
  for (const auto& p : partials) {
    total += p.loss_sum;
    count += p.count;
  }
  return std::exp(total / double(count));
}

}  // namespace demobert
