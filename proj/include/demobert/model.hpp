#pragma once

// Model assembly: encoder + pooling choice + demographic path + named task
// heads. Demographic fusion modes: none, raw binary vector, FNN-encoded
// vector (with a three-layer fusion stack before the heads), or a single
// attribute bit. Attributes predicted by a multi-task head are removed from
// the demographic vector.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "demobert/data.hpp"
#include "demobert/encoder.hpp"

namespace demobert {

// ---------------------------------------------------------------------------
// Demographic vector
// ---------------------------------------------------------------------------

struct DemographicVectorSpec {
  enum class Mode { none, binary_vector, fnn, single_attribute };
  Mode mode = Mode::none;
  std::string attribute;           // single_attribute only
  std::set<std::string> excluded;  // attributes predicted by an MT head

  void validate() const {
    for (const auto& e : excluded) {
      bool known = false;
      for (const auto& a : kDemographicAttributes) known = known || a == e;
      if (!known) throw ConfigError("dem spec: unknown excluded attribute '" + e + "'");
    }
    if (mode == Mode::single_attribute) {
      bool known = false;
      for (const auto& a : kDemographicAttributes) known = known || a == attribute;
      if (!known) throw ConfigError("dem spec: unknown attribute '" + attribute + "'");
      if (excluded.count(attribute))
        throw ConfigError("dem spec: single attribute '" + attribute + "' cannot also be excluded");
    }
  }

  // width of the raw demographic vector fed to concat (or to the FNN)
  int dim() const {
    switch (mode) {
      case Mode::none: return 0;
      case Mode::single_attribute: return 1;
      case Mode::binary_vector:
      case Mode::fnn: {
        int d = 0;
        for (const auto& a : kDemographicAttributes)
          if (!excluded.count(std::string(a))) ++d;
        return d;
      }
    }
    return 0;
  }

  std::string mode_name() const {
    switch (mode) {
      case Mode::none: return "none";
      case Mode::binary_vector: return "binary_vector";
      case Mode::fnn: return "fnn";
      case Mode::single_attribute: return "single_attribute";
    }
    return "none";
  }
};

inline nlohmann::json dem_spec_to_json(const DemographicVectorSpec& s) {
  return {{"mode", s.mode_name()},
          {"attribute", s.attribute},
          {"excluded", std::vector<std::string>(s.excluded.begin(), s.excluded.end())}};
}

inline DemographicVectorSpec dem_spec_from_json(const nlohmann::json& j) {
  DemographicVectorSpec s;
  const std::string mode = j.value("mode", "none");
  if (mode == "none") s.mode = DemographicVectorSpec::Mode::none;
  else if (mode == "binary_vector") s.mode = DemographicVectorSpec::Mode::binary_vector;
  else if (mode == "fnn") s.mode = DemographicVectorSpec::Mode::fnn;
  else if (mode == "single_attribute") s.mode = DemographicVectorSpec::Mode::single_attribute;
  else throw ConfigError("dem spec: unknown mode '" + mode + "'");
  s.attribute = j.value("attribute", "");
  for (const auto& e : j.value("excluded", std::vector<std::string>{})) s.excluded.insert(e);
  s.validate();
  return s;
}

// canonical order [gender, age, education, income], excluded bits removed
inline std::vector<double> build_demographic_vector(const BinaryDemographics& bits,
                                                    const DemographicVectorSpec& spec) {
  spec.validate();
  switch (spec.mode) {
    case DemographicVectorSpec::Mode::none:
      return {};
    case DemographicVectorSpec::Mode::single_attribute:
      return {double(bits.attribute(spec.attribute))};
    case DemographicVectorSpec::Mode::binary_vector:
    case DemographicVectorSpec::Mode::fnn: {
      std::vector<double> v;
      for (const auto& a : kDemographicAttributes)
        if (!spec.excluded.count(std::string(a))) v.push_back(double(bits.attribute(std::string(a))));
      return v;
    }
  }
  return {};
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

inline const std::vector<std::string> kTaskNames = {"empathy", "distress", "gender",
                                                    "age",     "education", "income"};

struct ModelConfig {
  std::string pooling = "cls";  // "cls" for plain tBERT, "gap" for -C variants
  DemographicVectorSpec dem;
  int fnn_out = 16;                                // demographic FNN output width
  std::vector<int> fusion_widths = {128, 64, 64};  // post-concat stack, fnn mode only
  std::vector<std::string> heads;                  // task head names, unique

  void validate() const {
    if (pooling != "cls" && pooling != "gap")
      throw ConfigError("model: pooling must be cls or gap");
    dem.validate();
    if (heads.empty()) throw ConfigError("model: at least one task head required");
    std::set<std::string> seen;
    for (const auto& h : heads) {
      if (std::find(kTaskNames.begin(), kTaskNames.end(), h) == kTaskNames.end())
        throw ConfigError("model: unknown task head '" + h + "'");
      if (!seen.insert(h).second) throw ConfigError("model: duplicate head '" + h + "'");
    }
    if (dem.mode == DemographicVectorSpec::Mode::fnn && fusion_widths.empty())
      throw ConfigError("model: fnn mode requires a fusion stack");
  }
};

// width of the vector each task head consumes
inline int head_input_width(const EncoderConfig& enc, const ModelConfig& mc) {
  if (mc.dem.mode == DemographicVectorSpec::Mode::fnn) return mc.fusion_widths.back();
  return enc.hidden_size + mc.dem.dim();
}

struct LabeledExample {
  TokenSequence seq;
  std::optional<BinaryDemographics> bits;
  std::map<std::string, int> labels;  // per task name
};

struct LabeledDataset {
  std::vector<LabeledExample> examples;
  int size() const { return int(examples.size()); }
};

struct Prediction {
  int label = 0;
  double probability = 0.0;  // of the predicted class
};

class ModelAssembly {
 public:
  ModelAssembly(EncoderConfig enc_cfg, ModelConfig model_cfg, uint64_t init_seed)
      : enc_cfg_(std::move(enc_cfg)), model_cfg_(std::move(model_cfg)) {
    enc_cfg_.validate();
    model_cfg_.validate();
    Rng rng(derive_seed(init_seed, hash_str("assembly_init")));
    init_encoder_params(store_, enc_cfg_, "encoder.", rng);
    const int H = enc_cfg_.hidden_size;
    if (model_cfg_.dem.mode == DemographicVectorSpec::Mode::fnn) {
      store_.create("dem_fnn.w", randn({model_cfg_.dem.dim(), model_cfg_.fnn_out}, rng, 0.02));
      store_.create("dem_fnn.b", Tensor({model_cfg_.fnn_out}), true);
      int in = H + model_cfg_.fnn_out;
      for (size_t i = 0; i < model_cfg_.fusion_widths.size(); ++i) {
        const int out = model_cfg_.fusion_widths[i];
        store_.create("fusion." + std::to_string(i) + ".w", randn({in, out}, rng, 0.02));
        store_.create("fusion." + std::to_string(i) + ".b", Tensor({out}), true);
        in = out;
      }
    }
    const int head_in = head_input_width(enc_cfg_, model_cfg_);
    for (const auto& h : model_cfg_.heads) {
      store_.create("head." + h + ".w", randn({head_in, 2}, rng, 0.02));
      store_.create("head." + h + ".b", Tensor({2}), true);
    }
    encoder_ = std::make_unique<Encoder>(store_, enc_cfg_, "encoder.");
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const EncoderConfig& encoder_config() const { return enc_cfg_; }
  const ModelConfig& model_config() const { return model_cfg_; }
  const Encoder& encoder() const { return *encoder_; }

  // One shared encoder pass; every head reads the same fused representation.
  std::map<std::string, Tensor> forward(const LabeledDataset& data, const std::vector<int>& idx,
                                        Pass& pass) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(idx.size());
    for (int i : idx) seqs.push_back(data.examples[size_t(i)].seq);
    PaddedBatch batch = PaddedBatch::from(seqs);
    EncoderOutput out = encoder_->encode(batch, pass);
    Tensor pooled = model_cfg_.pooling == "gap" ? out.gap_vector : out.cls_vector;
    pooled = dropout(pooled, enc_cfg_.dropout, pass);

    Tensor fused = pooled;
    if (model_cfg_.dem.mode != DemographicVectorSpec::Mode::none) {
      const int d = model_cfg_.dem.dim();
      Tensor dem({int(idx.size()), d});
      for (size_t r = 0; r < idx.size(); ++r) {
        const auto& ex = data.examples[size_t(idx[r])];
        if (!ex.bits)
          throw ContractError("forward: demographic bits missing for example " +
                              std::to_string(idx[r]) + " with fusion mode " +
                              model_cfg_.dem.mode_name());
        const auto vec = build_demographic_vector(*ex.bits, model_cfg_.dem);
        for (int c = 0; c < d; ++c) dem.at(int(r), c) = vec[size_t(c)];
      }
      if (model_cfg_.dem.mode == DemographicVectorSpec::Mode::fnn) {
        Tensor demfeat = activation_fn(
            add(matmul(dem, use(store_.get("dem_fnn.w"), pass)), use(store_.get("dem_fnn.b"), pass)),
            enc_cfg_.activation);
        fused = concat(pooled, demfeat);
        for (size_t i = 0; i < model_cfg_.fusion_widths.size(); ++i) {
          const std::string layer = "fusion." + std::to_string(i);
          fused = activation_fn(add(matmul(fused, use(store_.get(layer + ".w"), pass)),
                                    use(store_.get(layer + ".b"), pass)),
                                enc_cfg_.activation);
        }
      } else {
        fused = concat(pooled, dem);
      }
    }

    std::map<std::string, Tensor> logits;
    for (const auto& h : model_cfg_.heads)
      logits[h] = add(matmul(fused, use(store_.get("head." + h + ".w"), pass)),
                      use(store_.get("head." + h + ".b"), pass));
    return logits;
  }

  // Deterministic inference; ties break to the lower class index. Without a
  // tape this never mutates the assembly.
  std::map<std::string, Prediction> predict(const LabeledExample& ex) {
    LabeledDataset one;
    one.examples.push_back(ex);
    Pass pass;  // no tape, no dropout
    auto logits = forward(one, {0}, pass);
    std::map<std::string, Prediction> out;
    for (const auto& [head, lg] : logits) {
      Tensor probs = softmax(lg, 1);
      Prediction p;
      p.label = probs.at(0, 1) > probs.at(0, 0) ? 1 : 0;
      p.probability = probs.at(0, p.label);
      out[head] = p;
    }
    return out;
  }

  ParamStore* mutable_store() { return &store_; }

 private:
  EncoderConfig enc_cfg_;
  ModelConfig model_cfg_;
  ParamStore store_;
  std::unique_ptr<Encoder> encoder_;
};

inline nlohmann::json model_config_to_json(const ModelConfig& mc) {
  return {{"pooling", mc.pooling},
          {"dem_spec", dem_spec_to_json(mc.dem)},
          {"fnn_out", mc.fnn_out},
          {"fusion_widths", mc.fusion_widths},
          {"heads", mc.heads}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig mc;
  mc.pooling = j.value("pooling", "cls");
  if (j.contains("dem_spec")) mc.dem = dem_spec_from_json(j.at("dem_spec"));
  mc.fnn_out = j.value("fnn_out", 16);
  mc.fusion_widths = j.value("fusion_widths", std::vector<int>{128, 64, 64});
  mc.heads = j.value("heads", std::vector<std::string>{});
  mc.validate();
  return mc;
}

// assembly checkpoint: encoder format extended with fusion/head parameters
// and the serialized demographic spec
inline void save_assembly_checkpoint(const std::string& path, const ModelAssembly& m) {
  nlohmann::json meta = {{"kind", "assembly"},
                         {"encoder_config", encoder_config_to_json(m.encoder_config())},
                         {"model_config", model_config_to_json(m.model_config())}};
  save_checkpoint(path, m.params(), meta);
}

inline ModelAssembly load_assembly_checkpoint(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") != "assembly")
    throw DataError("checkpoint at " + path + " is not an assembly checkpoint");
  ModelAssembly m(encoder_config_from_json(ck.meta.at("encoder_config")),
                  model_config_from_json(ck.meta.at("model_config")), 0);
  restore_params(m.params(), ck);
  return m;
}

// ---------------------------------------------------------------------------
// Variant names (paper notation)
// ---------------------------------------------------------------------------

struct VariantSpec {
  std::string name;
  bool is_baseline = false;
  std::string baseline_kind;  // cnn | bilstm | bilstm_attention | frozen_bert
  bool baseline_use_dem = false;
  bool baseline_use_affect = false;
  bool use_pretrain = false;  // PT prefix: start from an MLM checkpoint
  bool finetune = true;       // false for bare PT (frozen encoder, untrained head)
  std::vector<std::string> mt_heads;              // full task names
  std::optional<std::string> task_annotation;     // from a "(E)"-style suffix
  DemographicVectorSpec dem;
};

namespace detail {

inline std::string head_from_letter(const std::string& letter) {
  if (letter == "E") return "empathy";
  if (letter == "D") return "distress";
  if (letter == "G") return "gender";
  if (letter == "A") return "age";
  if (letter == "EDU") return "education";
  if (letter == "INC") return "income";
  return "";
}

}  // namespace detail

inline std::vector<std::string> known_variant_forms() {
  return {"tBERT",          "tBERT (E)",        "tBERT-MT-<heads>", "tBERT-MT-(E+D)",
          "tBERT-C",        "tBERT-C (fnn)",    "tBERT-C (gender)", "tBERT-MT-G-C",
          "tBERT-MT-(E+D)-G-C", "PT",           "PT+tBERT",         "CNN",
          "biLSTM",         "biLSTM-Attention", "BERT",             "Aff-biLSTM-text+dem",
          "Aff-biLSTM(att)-text", "Aff-biLSTM(att)-text-E/D"};
}

inline ConfigError unknown_variant(const std::string& name) {
  std::string valid;
  for (const auto& f : known_variant_forms()) valid += (valid.empty() ? "" : ", ") + f;
  return ConfigError("unknown variant name '" + name + "'; valid forms: " + valid);
}

// Parses the paper's method notation, e.g. "tBERT-MT-(E+D)-G-C" means heads
// {empathy, distress, gender} trained multi-task with the binary demographic
// vector concatenated (gender bit removed because a head predicts it).
inline VariantSpec parse_variant(const std::string& raw) {
  VariantSpec spec;
  spec.name = raw;

  // fixed-name baselines first
  if (raw == "CNN") {
    spec.is_baseline = true;
    spec.baseline_kind = "cnn";
    return spec;
  }
  if (raw == "biLSTM") {
    spec.is_baseline = true;
    spec.baseline_kind = "bilstm";
    return spec;
  }
  if (raw == "biLSTM-Attention" || raw == "Aff-biLSTM(att)-text") {
    spec.is_baseline = true;
    spec.baseline_kind = "bilstm_attention";
    return spec;
  }
  if (raw == "Aff-biLSTM-text+dem") {
    spec.is_baseline = true;
    spec.baseline_kind = "bilstm_attention";
    spec.baseline_use_dem = true;
    return spec;
  }
  if (raw == "Aff-biLSTM(att)-text-E/D") {
    spec.is_baseline = true;
    spec.baseline_kind = "bilstm_attention";
    spec.baseline_use_affect = true;
    return spec;
  }
  if (raw == "BERT") {
    spec.is_baseline = true;
    spec.baseline_kind = "frozen_bert";
    spec.finetune = false;
    return spec;
  }

  // optional parenthetical suffix: task annotation, (fnn), or (attribute)
  std::string name = raw;
  std::string paren;
  const auto lp = name.rfind(" (");
  if (lp != std::string::npos && name.back() == ')') {
    paren = name.substr(lp + 2, name.size() - lp - 3);
    name = name.substr(0, lp);
  }

  if (name == "PT") {
    spec.use_pretrain = true;
    spec.finetune = false;
  } else if (name.rfind("PT+", 0) == 0) {
    spec.use_pretrain = true;
    name = name.substr(3);
  }

  if (name != "PT") {
    if (name.rfind("tBERT", 0) != 0) throw unknown_variant(raw);
    std::string rest = name.substr(5);
    bool in_mt = false;
    bool want_c = false;
    size_t i = 0;
    while (i < rest.size()) {
      if (rest[i] != '-') throw unknown_variant(raw);
      ++i;
      std::string tok;
      if (i < rest.size() && rest[i] == '(') {
        const auto close = rest.find(')', i);
        if (close == std::string::npos) throw unknown_variant(raw);
        tok = rest.substr(i, close - i + 1);
        i = close + 1;
      } else {
        const auto dash = rest.find('-', i);
        tok = rest.substr(i, dash == std::string::npos ? std::string::npos : dash - i);
        i = dash == std::string::npos ? rest.size() : dash;
      }
      if (tok == "MT") {
        in_mt = true;
      } else if (tok == "C") {
        want_c = true;
      } else if (tok.size() >= 2 && tok.front() == '(' && tok.back() == ')') {
        // head group like (E+D)
        if (!in_mt) throw unknown_variant(raw);
        for (const auto& letter : split_on(tok.substr(1, tok.size() - 2), '+')) {
          const std::string head = detail::head_from_letter(letter);
          if (head.empty()) throw unknown_variant(raw);
          spec.mt_heads.push_back(head);
        }
      } else {
        const std::string head = detail::head_from_letter(tok);
        if (head.empty() || !in_mt) throw unknown_variant(raw);
        spec.mt_heads.push_back(head);
      }
    }
    if (want_c) spec.dem.mode = DemographicVectorSpec::Mode::binary_vector;
  }

  if (!paren.empty()) {
    if (paren == "fnn") {
      if (spec.dem.mode != DemographicVectorSpec::Mode::binary_vector) throw unknown_variant(raw);
      spec.dem.mode = DemographicVectorSpec::Mode::fnn;
    } else if (detail::head_from_letter(paren) != "") {
      spec.task_annotation = detail::head_from_letter(paren);
    } else {
      bool is_attr = false;
      for (const auto& a : kDemographicAttributes) is_attr = is_attr || a == paren;
      if (!is_attr || spec.dem.mode == DemographicVectorSpec::Mode::none)
        throw unknown_variant(raw);
      spec.dem.mode = DemographicVectorSpec::Mode::single_attribute;
      spec.dem.attribute = paren;
    }
  }
  return spec;
}

// Heads for an experiment on `primary_task`, primary first; demographic
// attributes with their own head are removed from the demographic vector.
inline ModelConfig resolve_model_config(const VariantSpec& spec, const std::string& primary_task,
                                        int fnn_out = 16) {
  ModelConfig mc;
  mc.fnn_out = fnn_out;
  const std::string task = spec.task_annotation.value_or(primary_task);
  mc.heads.push_back(task);
  for (const auto& h : spec.mt_heads)
    if (std::find(mc.heads.begin(), mc.heads.end(), h) == mc.heads.end()) mc.heads.push_back(h);
  mc.dem = spec.dem;
  if (mc.dem.mode == DemographicVectorSpec::Mode::binary_vector ||
      mc.dem.mode == DemographicVectorSpec::Mode::fnn) {
    for (const auto& h : mc.heads) {
      for (const auto& a : kDemographicAttributes)
        if (h == a) mc.dem.excluded.insert(h);
    }
  }
  // plain tBERT reads [CLS]; every explicit-concat variant pools with GAP
  mc.pooling = mc.dem.mode == DemographicVectorSpec::Mode::none ? "cls" : "gap";
  mc.validate();
  return mc;
}

}  // namespace demobert
