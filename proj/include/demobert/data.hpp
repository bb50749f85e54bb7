#pragma once

// Dataset layer: demographic profiles and their binarization, response
// records, whitespace/frequency vocabulary + tokenizer, TSV ingestion with a
// rejects report, balanced subset sampling, and the two synthetic generators
// (demographic-tagged corpus; empathy/distress dataset with a planted
// demographic-lexical interaction).

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "demobert/encoder.hpp"
#include "demobert/util.hpp"

namespace demobert {

// ---------------------------------------------------------------------------
// Demographics
// ---------------------------------------------------------------------------

enum class Gender { male, female };

inline std::string to_string(Gender g) { return g == Gender::male ? "male" : "female"; }

inline Gender gender_from_string(const std::string& s) {
  const std::string v = lowercase(s);
  if (v == "male" || v == "m") return Gender::male;
  if (v == "female" || v == "f") return Gender::female;
  throw DataError("unknown gender value '" + s + "'");
}

// education is an ordinal level: 1 below high school, 2 high school,
// 3 some college or associate, 4 bachelor's, 5 master's, 6 doctorate
inline constexpr int kEducationBachelor = 4;

struct DemographicProfile {
  Gender gender = Gender::male;
  int age_years = 0;
  int education = 0;
  int income_usd = 0;

  void validate() const {
    if (age_years <= 0) throw DataError("profile: age must be positive");
    if (income_usd < 0) throw DataError("profile: income must be non-negative");
    if (education < 0) throw DataError("profile: education level must be non-negative");
  }
};

inline const std::array<std::string, 4> kDemographicAttributes = {"gender", "age", "education",
                                                                  "income"};

// canonical order [gender, age, education, income]
struct BinaryDemographics {
  int gender_bit = 0;
  int age_bit = 0;
  int education_bit = 0;
  int income_bit = 0;

  std::array<int, 4> canonical() const { return {gender_bit, age_bit, education_bit, income_bit}; }

  int attribute(const std::string& name) const {
    if (name == "gender") return gender_bit;
    if (name == "age") return age_bit;
    if (name == "education") return education_bit;
    if (name == "income") return income_bit;
    throw ConfigError("unknown demographic attribute '" + name + "'");
  }
};

// age: C1 iff >= 35; income: C1 iff > $50,000 (boundary in C0);
// education: C1 iff bachelor's or above; gender: bit 1 iff female
inline BinaryDemographics binarize_demographics(const DemographicProfile& p) {
  p.validate();
  BinaryDemographics b;
  b.gender_bit = p.gender == Gender::female ? 1 : 0;
  b.age_bit = p.age_years >= 35 ? 1 : 0;
  b.education_bit = p.education >= kEducationBachelor ? 1 : 0;
  b.income_bit = p.income_usd > 50000 ? 1 : 0;
  return b;
}

struct ResponseRecord {
  std::string id;
  std::string text;
  DemographicProfile profile;
  double empathy_raw = 0.0;
  double distress_raw = 0.0;
};

// ---------------------------------------------------------------------------
// Vocabulary + tokenizer
// ---------------------------------------------------------------------------

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kFirstRegular = 5;

  std::vector<std::string> tokens;  // index == id
  std::unordered_map<std::string, int> ids;

  int size() const { return int(tokens.size()); }

  int id_of(const std::string& tok) const {
    auto it = ids.find(tok);
    return it == ids.end() ? kUnk : it->second;
  }

  static Vocabulary with_specials() {
    Vocabulary v;
    v.tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    for (int i = 0; i < int(v.tokens.size()); ++i) v.ids[v.tokens[size_t(i)]] = i;
    return v;
  }

  void add(const std::string& tok) {
    ids[tok] = int(tokens.size());
    tokens.push_back(tok);
  }
};

// lowercased alphanumeric runs; punctuation and whitespace separate tokens
inline std::vector<std::string> word_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

// frequency-ranked vocabulary, ties broken lexicographically, truncated to
// max_size including the five specials
inline Vocabulary build_vocab(const std::vector<std::string>& corpus_lines, int max_size) {
  if (max_size <= 5) throw ConfigError("build_vocab: max_size must exceed the 5 special tokens");
  std::map<std::string, int64_t> freq;
  for (const auto& line : corpus_lines)
    for (const auto& tok : word_tokens(line)) ++freq[tok];
  if (freq.empty()) throw DataError("build_vocab: empty corpus");

  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v = Vocabulary::with_specials();
  for (const auto& [tok, n] : ranked) {
    if (v.size() >= max_size) break;
    v.add(tok);
  }
  return v;
}

// [CLS] + tokens + [SEP], truncated so the total length never exceeds
// max_seq_len; unknown words map to [UNK]; all positions are real (mask 1)
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                              int max_seq_len = 150) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kCls);
  for (const auto& tok : word_tokens(text)) {
    if (int(seq.ids.size()) >= max_seq_len - 1) break;
    seq.ids.push_back(vocab.id_of(tok));
  }
  seq.ids.push_back(Vocabulary::kSep);
  seq.attention_mask.assign(seq.ids.size(), 1);
  return seq;
}

inline std::string detokenize(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq.ids) {
    if (id < Vocabulary::kFirstRegular) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.tokens[size_t(id)];
  }
  return out;
}

inline void save_vocab(const std::string& path, const Vocabulary& v) {
  std::string out;
  for (const auto& tok : v.tokens) out += tok + "\n";
  write_text_file(path, out);
}

inline Vocabulary load_vocab(const std::string& path) {
  Vocabulary v;
  std::istringstream in(read_text_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    v.add(line);
  }
  if (v.size() < Vocabulary::kFirstRegular || v.tokens[0] != "[PAD]" || v.tokens[4] != "[MASK]")
    throw DataError("vocabulary file is missing the special token header: " + path);
  return v;
}

// ---------------------------------------------------------------------------
// Affect binarization
// ---------------------------------------------------------------------------

struct AffectLabels {
  std::vector<int> labels;  // one per record, train-threshold applied to all
  double threshold = 0.0;
};

inline double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// threshold = median of raw scores over the training fold only; label 1 iff
// raw > threshold (test items reuse the training threshold, never their own)
inline AffectLabels binarize_affect(const std::vector<ResponseRecord>& records,
                                    const std::vector<int>& fold_train_ids,
                                    const std::string& dimension) {
  if (fold_train_ids.empty()) throw ContractError("binarize_affect: empty training fold");
  if (dimension != "empathy" && dimension != "distress")
    throw ConfigError("binarize_affect: unknown dimension '" + dimension + "'");
  auto raw = [&](int i) {
    return dimension == "empathy" ? records[size_t(i)].empathy_raw : records[size_t(i)].distress_raw;
  };
  std::vector<double> train_raws;
  train_raws.reserve(fold_train_ids.size());
  for (int i : fold_train_ids) train_raws.push_back(raw(i));
  const auto [mn, mx] = std::minmax_element(train_raws.begin(), train_raws.end());
  if (*mn == *mx)
    throw LabelError("binarize_affect: constant " + dimension + " scores in training fold");

  AffectLabels out;
  out.threshold = median_of(train_raws);
  out.labels.resize(records.size());
  for (size_t i = 0; i < records.size(); ++i) out.labels[i] = raw(int(i)) > out.threshold ? 1 : 0;
  return out;
}

// ---------------------------------------------------------------------------
// Dataset file I/O
// ---------------------------------------------------------------------------
// UTF-8, tab-separated, header
//   id<TAB>text<TAB>gender<TAB>age<TAB>education<TAB>income<TAB>empathy<TAB>distress
// The text field is double-quoted when it contains tabs, newlines or quotes;
// embedded quotes double ("").

inline const std::vector<std::string> kDatasetColumns = {"id",     "text",      "gender", "age",
                                                         "education", "income", "empathy", "distress"};

struct DatasetRejects {
  struct Row {
    int64_t row_number;  // 1-based over logical rows, excluding the header
    std::string content;
    std::string reason;
  };
  std::vector<Row> rows;
};

struct LoadedDataset {
  std::vector<ResponseRecord> records;
  DatasetRejects rejects;
  int64_t total_rows = 0;  // records + rejects
};

namespace detail {

inline std::string quote_field(const std::string& s) {
  if (s.find_first_of("\t\n\r\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

// split file content into logical rows / fields, honouring quoted fields
inline std::vector<std::vector<std::string>> parse_tsv(const std::string& content) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  size_t i = 0;
  auto end_field = [&]() {
    row.push_back(field);
    field.clear();
    quoted = false;
    field_started = false;
  };
  auto end_row = [&]() {
    end_field();
    rows.push_back(row);
    row.clear();
  };
  while (i < content.size()) {
    const char ch = content[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
        ++i;
        continue;
      }
      field.push_back(ch);
      ++i;
      continue;
    }
    if (ch == '"' && !field_started) {
      quoted = true;
      field_started = true;
      ++i;
      continue;
    }
    if (ch == '\t') {
      end_field();
      ++i;
      continue;
    }
    if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < content.size() && content[i + 1] == '\n') ++i;
      end_row();
      ++i;
      continue;
    }
    field.push_back(ch);
    field_started = true;
    ++i;
  }
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

inline std::optional<double> parse_double(const std::string& s) {
  try {
    size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

inline std::optional<int64_t> parse_int(const std::string& s) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) return std::nullopt;
    return v;
  } catch (...) {
    return std::nullopt;
  }
}

}  // namespace detail

inline void save_dataset(const std::string& path, const std::vector<ResponseRecord>& records) {
  std::ostringstream out;
  for (size_t i = 0; i < kDatasetColumns.size(); ++i)
    out << (i ? "\t" : "") << kDatasetColumns[i];
  out << "\n";
  for (const auto& r : records) {
    out << r.id << "\t" << detail::quote_field(r.text) << "\t" << to_string(r.profile.gender)
        << "\t" << r.profile.age_years << "\t" << r.profile.education << "\t"
        << r.profile.income_usd << "\t" << r.empathy_raw << "\t" << r.distress_raw << "\n";
  }
  write_text_file(path, out.str());
}

// Malformed rows are collected into the rejects report, never silently
// dropped; a missing header column is a schema error naming the column.
inline LoadedDataset load_dataset(const std::string& path) {
  const std::string content = read_text_file(path);
  auto rows = detail::parse_tsv(content);
  if (rows.empty()) throw DataError("dataset file is empty (no header): " + path);

  const auto& header = rows[0];
  for (const auto& want : kDatasetColumns) {
    if (std::find(header.begin(), header.end(), want) == header.end())
      throw DataError("dataset schema: missing column '" + want + "' in " + path);
  }
  if (header != kDatasetColumns)
    throw DataError("dataset schema: columns must be exactly id, text, gender, age, education, "
                    "income, empathy, distress in " + path);

  LoadedDataset out;
  for (size_t ri = 1; ri < rows.size(); ++ri) {
    const auto& row = rows[ri];
    if (row.size() == 1 && row[0].empty()) continue;  // trailing blank line
    const int64_t row_no = int64_t(ri);
    ++out.total_rows;
    auto reject = [&](const std::string& reason) {
      std::string joined;
      for (size_t c = 0; c < row.size(); ++c) joined += (c ? "\t" : "") + row[c];
      out.rejects.rows.push_back({row_no, joined, reason});
    };
    if (row.size() != kDatasetColumns.size()) {
      reject("expected " + std::to_string(kDatasetColumns.size()) + " columns, found " +
             std::to_string(row.size()));
      continue;
    }
    ResponseRecord rec;
    rec.id = row[0];
    rec.text = row[1];
    if (rec.text.empty()) {
      reject("empty text");
      continue;
    }
    try {
      rec.profile.gender = gender_from_string(row[2]);
    } catch (const DataError&) {
      reject("bad gender '" + row[2] + "'");
      continue;
    }
    auto age = detail::parse_int(row[3]);
    auto edu = detail::parse_int(row[4]);
    auto income = detail::parse_int(row[5]);
    auto emp = detail::parse_double(row[6]);
    auto dis = detail::parse_double(row[7]);
    if (!age || !edu || !income || !emp || !dis) {
      reject("non-numeric field");
      continue;
    }
    rec.profile.age_years = int(*age);
    rec.profile.education = int(*edu);
    rec.profile.income_usd = int(*income);
    rec.empathy_raw = *emp;
    rec.distress_raw = *dis;
    try {
      rec.profile.validate();
    } catch (const DataError& e) {
      reject(e.what());
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Balanced subset sampling (the A_s subset)
// ---------------------------------------------------------------------------

// Seeded equal draw from both classes of a binarized attribute, without
// replacement. Target size is min(2 * min-class, mean class size) so the
// result compares in size to a single-group subset. Returns record indices.
inline std::vector<int> sample_balanced_subset(const std::vector<ResponseRecord>& records,
                                               const std::string& attribute, uint64_t seed) {
  std::vector<int> c0, c1;
  for (size_t i = 0; i < records.size(); ++i) {
    const int bit = binarize_demographics(records[i].profile).attribute(attribute);
    (bit == 0 ? c0 : c1).push_back(int(i));
  }
  if (c0.empty() || c1.empty())
    throw DataError("sample_balanced_subset: class " + std::string(c0.empty() ? "0" : "1") +
                    " of '" + attribute + "' is empty");
  const int64_t n0 = int64_t(c0.size()), n1 = int64_t(c1.size());
  const int64_t target = std::min(2 * std::min(n0, n1), (n0 + n1 + 1) / 2);
  const int64_t per_class = target / 2;

  Rng rng(derive_seed(seed, hash_str("balanced_subset"), hash_str(attribute)));
  rng.shuffle(c0);
  rng.shuffle(c1);
  std::vector<int> out(c0.begin(), c0.begin() + per_class);
  out.insert(out.end(), c1.begin(), c1.begin() + per_class);
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus (stand-in for the external pre-training corpus)
// ---------------------------------------------------------------------------

struct CorpusDoc {
  Gender gender = Gender::male;
  int age = 0;
  std::string text;
};

struct CorpusConfig {
  int num_docs = 400;
  int doc_len_min = 8;
  int doc_len_max = 20;
  int group_lexicon_size = 40;   // per-group exclusive topic words
  int common_lexicon_size = 40;  // topic words shared by both groups
  int filler_lexicon_size = 30;  // non-topic words, always shared
  double overlap = 0.5;          // lambda: P(topic token drawn from shared pool)
  double topic_fraction = 0.6;   // share of topic tokens per document
  double bigram_fraction = 0.25; // topic draws emitted as fixed two-token collocations
  double skew = 0.0;             // 0 = uniform pools; otherwise this mass falls
                                 // on the first quarter of each pool

  void validate() const {
    if (overlap < 0.0 || overlap > 1.0)
      throw ConfigError("corpus: overlap must be in [0, 1], got " + std::to_string(overlap));
    if (num_docs <= 0 || doc_len_min < 2 || doc_len_max < doc_len_min)
      throw ConfigError("corpus: bad document counts/lengths");
    if (topic_fraction < 0.0 || topic_fraction > 1.0 || bigram_fraction < 0.0 ||
        bigram_fraction > 1.0)
      throw ConfigError("corpus: fractions must be in [0, 1]");
    if (skew < 0.0 || skew >= 1.0) throw ConfigError("corpus: skew must be in [0, 1)");
  }
};

// Documents are sampled from a group-conditioned unigram/bigram mixture.
// A topic token comes from the shared pool with probability `overlap`, else
// from the group-exclusive pool; at overlap 0 the groups share no topic
// tokens, at overlap 1 their distributions coincide.
inline std::vector<CorpusDoc> generate_synthetic_corpus(const CorpusConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, hash_str("synthetic_corpus")));

  auto lexicon = [](const std::string& stem, int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back(stem + std::to_string(i));
    return v;
  };
  const auto male_lex = lexicon("mtopic", cfg.group_lexicon_size);
  const auto female_lex = lexicon("ftopic", cfg.group_lexicon_size);
  const auto common_lex = lexicon("ctopic", cfg.common_lexicon_size);
  const auto filler_lex = lexicon("fill", cfg.filler_lexicon_size);

  auto draw_from = [&](const std::vector<std::string>& pool, Rng& r) -> size_t {
    if (cfg.skew > 0.0 && pool.size() >= 4 && r.bernoulli(cfg.skew))
      return size_t(r.uniform_int(pool.size() / 4));
    return size_t(r.uniform_int(pool.size()));
  };

  std::vector<CorpusDoc> docs;
  docs.reserve(size_t(cfg.num_docs));
  for (int d = 0; d < cfg.num_docs; ++d) {
    CorpusDoc doc;
    doc.gender = rng.bernoulli(0.5) ? Gender::female : Gender::male;
    doc.age = 18 + int(rng.uniform_int(45));
    const auto& group_lex = doc.gender == Gender::female ? female_lex : male_lex;
    const int len = cfg.doc_len_min + int(rng.uniform_int(uint64_t(cfg.doc_len_max - cfg.doc_len_min + 1)));
    std::vector<std::string> words;
    while (int(words.size()) < len) {
      if (rng.bernoulli(cfg.topic_fraction)) {
        const auto& pool = rng.bernoulli(cfg.overlap) ? common_lex : group_lex;
        const size_t w = draw_from(pool, rng);
        if (rng.bernoulli(cfg.bigram_fraction)) {
          // fixed collocation: every token has one deterministic partner, so
          // the bigram half of the mixture is predictable from context
          words.push_back(pool[w]);
          words.push_back(pool[(w + 1) % pool.size()]);
        } else {
          words.push_back(pool[w]);
        }
      } else {
        words.push_back(filler_lex[draw_from(filler_lex, rng)]);
      }
    }
    words.resize(size_t(len));
    for (size_t i = 0; i < words.size(); ++i) doc.text += (i ? " " : "") + words[i];
    docs.push_back(std::move(doc));
  }
  return docs;
}

// corpus file: one document per line, prefixed gender=<m|f>\tage=<int>\t
inline void save_corpus(const std::string& path, const std::vector<CorpusDoc>& docs) {
  std::ostringstream out;
  for (const auto& d : docs)
    out << "gender=" << (d.gender == Gender::male ? "m" : "f") << "\tage=" << d.age << "\t"
        << d.text << "\n";
  write_text_file(path, out.str());
}

inline std::vector<CorpusDoc> load_corpus(const std::string& path) {
  std::vector<CorpusDoc> docs;
  std::istringstream in(read_text_file(path));
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_on(line, '\t');
    if (fields.size() < 3 || fields[0].rfind("gender=", 0) != 0 || fields[1].rfind("age=", 0) != 0)
      throw DataError("corpus line " + std::to_string(line_no) +
                      ": expected gender=<m|f>\\tage=<int>\\t<text>");
    CorpusDoc d;
    d.gender = gender_from_string(fields[0].substr(7));
    auto age = detail::parse_int(fields[1].substr(4));
    if (!age) throw DataError("corpus line " + std::to_string(line_no) + ": bad age");
    d.age = int(*age);
    d.text = fields[2];
    for (size_t i = 3; i < fields.size(); ++i) d.text += "\t" + fields[i];
    docs.push_back(std::move(d));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Synthetic empathy/distress dataset with planted interaction
// ---------------------------------------------------------------------------

struct EmpathyGenConfig {
  int num_records = 360;
  double beta = 2.0;             // interaction strength (0 disables the interaction)
  double main_weight = 2.0;      // lexical main-effect weight
  double noise_sigma = 1.0;
  double ambiguous_fraction = 0.5;  // share of records whose label needs demographics
  double style_fraction = 0.4;      // share of records carrying group style tokens
  std::string interaction_attribute = "gender";
  int cue_tokens = 3;    // cue words per affect dimension
  int filler_tokens = 8; // generic words per record
  int style_tokens = 2;  // group style words on styled records
  int lexicon_size = 12; // words per cue/style family

  void validate() const {
    if (beta < 0.0) throw ConfigError("dataset: beta must be >= 0");
    if (num_records < 10) throw ConfigError("dataset: num_records too small");
    if (ambiguous_fraction < 0.0 || ambiguous_fraction > 1.0 || style_fraction < 0.0 ||
        style_fraction > 1.0)
      throw ConfigError("dataset: fractions must be in [0, 1]");
    if (noise_sigma <= 0.0) throw ConfigError("dataset: noise_sigma must be positive");
    bool known = false;
    for (const auto& a : kDemographicAttributes) known = known || a == interaction_attribute;
    if (!known)
      throw ConfigError("dataset: unknown interaction_attribute '" + interaction_attribute + "'");
  }
};

inline double stdnormal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / M_SQRT2)); }

// Per-dimension bookkeeping the generator stores for oracle checks.
struct PlantedDimension {
  std::vector<int> latent_label;      // ground-truth label, sign of the latent score
  std::vector<int> ambiguous;         // 1 when the label rides on the interaction
  std::vector<double> latent_z;
  std::vector<int> bayes_aware;       // optimal with demographics
  std::vector<int> bayes_agnostic;    // optimal from text alone
  double analytic_bayes_aware = 0.0;
  double analytic_bayes_agnostic = 0.0;
};

struct SyntheticDataset {
  std::vector<ResponseRecord> records;
  std::vector<int> styled;  // 1 when the record carries group style tokens
  PlantedDimension empathy;
  PlantedDimension distress;
  EmpathyGenConfig config;
  uint64_t seed = 0;
};

// Latent score per record and dimension:
//   z = main_weight * s_main + beta * s_inter + noise
// where plain records carry a signed lexical cue (s_main = +/-1, s_inter = 0)
// and ambiguous records carry a neutral interaction cue whose meaning is set
// by the demographic bit (s_main = 0, s_inter = +/-1). Raw ratings are
// 1 + 6 * sigmoid(z). With beta > 0 the optimal predictor on ambiguous,
// unstyled records requires the demographic bit; with beta = 0 it does not.
inline SyntheticDataset generate_synthetic_empathy_dataset(const EmpathyGenConfig& cfg,
                                                           uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, hash_str("synthetic_dataset")));

  auto lexicon = [&](const std::string& stem) {
    std::vector<std::string> v;
    for (int i = 0; i < cfg.lexicon_size; ++i) v.push_back(stem + std::to_string(i));
    return v;
  };
  const auto epos = lexicon("epos"), eneg = lexicon("eneg"), eamb = lexicon("eamb");
  const auto dpos = lexicon("dpos"), dneg = lexicon("dneg"), damb = lexicon("damb");
  const auto fillers = lexicon("fillw");
  const auto style_m = lexicon("stym"), style_f = lexicon("styf");

  SyntheticDataset ds;
  ds.config = cfg;
  ds.seed = seed;
  const int N = cfg.num_records;
  auto& E = ds.empathy;
  auto& D = ds.distress;
  for (auto* dim : {&E, &D}) {
    dim->latent_label.resize(size_t(N));
    dim->ambiguous.resize(size_t(N));
    dim->latent_z.resize(size_t(N));
    dim->bayes_aware.resize(size_t(N));
    dim->bayes_agnostic.resize(size_t(N));
  }
  ds.styled.resize(size_t(N));

  for (int i = 0; i < N; ++i) {
    ResponseRecord rec;
    rec.id = "syn" + std::to_string(i);
    rec.profile.gender = rng.bernoulli(0.5) ? Gender::female : Gender::male;
    rec.profile.age_years = rng.bernoulli(0.5) ? 20 + int(rng.uniform_int(14))   // <35
                                               : 35 + int(rng.uniform_int(26));  // >=35
    rec.profile.education = 1 + int(rng.uniform_int(6));
    rec.profile.income_usd = rng.bernoulli(0.5) ? 20000 + int(rng.uniform_int(30001))
                                                : 50001 + int(rng.uniform_int(70000));
    const BinaryDemographics bits = binarize_demographics(rec.profile);
    const int gbit = bits.attribute(cfg.interaction_attribute);
    const bool styled = rng.bernoulli(cfg.style_fraction);
    ds.styled[size_t(i)] = styled ? 1 : 0;

    std::vector<std::string> words;
    for (int f = 0; f < cfg.filler_tokens; ++f)
      words.push_back(fillers[size_t(rng.uniform_int(fillers.size()))]);
    if (styled) {
      const auto& pool = rec.profile.gender == Gender::female ? style_f : style_m;
      for (int s = 0; s < cfg.style_tokens; ++s)
        words.push_back(pool[size_t(rng.uniform_int(pool.size()))]);
    }

    auto plant = [&](PlantedDimension& dim, const std::vector<std::string>& pos,
                     const std::vector<std::string>& neg,
                     const std::vector<std::string>& amb) -> double {
      const bool ambiguous = rng.bernoulli(cfg.ambiguous_fraction);
      double s_main = 0.0, s_inter = 0.0;
      const std::vector<std::string>* pool = nullptr;
      int a = 0;
      if (ambiguous) {
        s_inter = gbit == 1 ? 1.0 : -1.0;
        pool = &amb;
      } else {
        a = rng.bernoulli(0.5) ? 1 : 0;
        s_main = a == 1 ? 1.0 : -1.0;
        pool = a == 1 ? &pos : &neg;
      }
      for (int c = 0; c < cfg.cue_tokens; ++c)
        words.push_back((*pool)[size_t(rng.uniform_int(pool->size()))]);

      const double noise = cfg.noise_sigma * rng.normal();
      const double mean_z = cfg.main_weight * s_main + cfg.beta * s_inter;
      const double z = mean_z + noise;
      const int idx = i;
      dim.ambiguous[size_t(idx)] = ambiguous ? 1 : 0;
      dim.latent_z[size_t(idx)] = z;
      dim.latent_label[size_t(idx)] = z > 0.0 ? 1 : 0;
      dim.bayes_aware[size_t(idx)] = mean_z > 0.0 ? 1 : 0;
      // text alone reveals the cue family and, on styled records, the group
      dim.bayes_agnostic[size_t(idx)] =
          ambiguous ? (styled ? dim.bayes_aware[size_t(idx)] : 0) : (a == 1 ? 1 : 0);
      return z;
    };

    const double ze = plant(E, epos, eneg, eamb);
    const double zd = plant(D, dpos, dneg, damb);
    rec.empathy_raw = 1.0 + 6.0 / (1.0 + std::exp(-ze));
    rec.distress_raw = 1.0 + 6.0 / (1.0 + std::exp(-zd));

    rng.shuffle(words);
    for (size_t w = 0; w < words.size(); ++w) rec.text += (w ? " " : "") + words[w];
    ds.records.push_back(std::move(rec));
  }

  // closed-form accuracies of the two optimal predictors under the generator
  const double rho = cfg.ambiguous_fraction, gamma = cfg.style_fraction;
  const double acc_plain = stdnormal_cdf(cfg.main_weight / cfg.noise_sigma);
  const double acc_inter = stdnormal_cdf(cfg.beta / cfg.noise_sigma);
  for (auto* dim : {&E, &D}) {
    dim->analytic_bayes_aware = (1.0 - rho) * acc_plain + rho * acc_inter;
    dim->analytic_bayes_agnostic =
        (1.0 - rho) * acc_plain + rho * (gamma * acc_inter + (1.0 - gamma) * 0.5);
  }
  return ds;
}

// sidecar with everything an oracle needs to audit the planted construction
inline nlohmann::json ground_truth_json(const SyntheticDataset& ds) {
  auto dim_json = [&](const PlantedDimension& d) {
    return nlohmann::json{{"latent_label", d.latent_label},
                          {"ambiguous", d.ambiguous},
                          {"latent_z", d.latent_z},
                          {"bayes_aware", d.bayes_aware},
                          {"bayes_agnostic", d.bayes_agnostic},
                          {"analytic_bayes_aware", d.analytic_bayes_aware},
                          {"analytic_bayes_agnostic", d.analytic_bayes_agnostic}};
  };
  nlohmann::json cfg = {{"num_records", ds.config.num_records},
                        {"beta", ds.config.beta},
                        {"main_weight", ds.config.main_weight},
                        {"noise_sigma", ds.config.noise_sigma},
                        {"ambiguous_fraction", ds.config.ambiguous_fraction},
                        {"style_fraction", ds.config.style_fraction},
                        {"interaction_attribute", ds.config.interaction_attribute}};
  return nlohmann::json{{"seed", ds.seed},
                        {"config", cfg},
                        {"styled", ds.styled},
                        {"empathy", dim_json(ds.empathy)},
                        {"distress", dim_json(ds.distress)}};
}

}  // namespace demobert
