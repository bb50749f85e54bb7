#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <set>

#include "demobert/data.hpp"

using namespace demobert;

namespace {

// chi-squared survival via the Wilson-Hilferty cube-root normal approximation;
// plenty for sanity-level p thresholds
double chi2_survival_wh(double x, double df) {
  const double t = std::cbrt(x / df);
  const double mu = 1.0 - 2.0 / (9.0 * df);
  const double sd = std::sqrt(2.0 / (9.0 * df));
  const double z = (t - mu) / sd;
  return 1.0 - stdnormal_cdf(z);
}

// two-sample homogeneity test over token frequency tables
double chi2_token_homogeneity(const std::map<std::string, int64_t>& a,
                              const std::map<std::string, int64_t>& b) {
  std::set<std::string> tokens;
  int64_t na = 0, nb = 0;
  for (const auto& [t, c] : a) {
    tokens.insert(t);
    na += c;
  }
  for (const auto& [t, c] : b) {
    tokens.insert(t);
    nb += c;
  }
  const double n = double(na + nb);
  double chi2 = 0.0;
  for (const auto& t : tokens) {
    const double oa = a.count(t) ? double(a.at(t)) : 0.0;
    const double ob = b.count(t) ? double(b.at(t)) : 0.0;
    const double row = oa + ob;
    const double ea = row * na / n;
    const double eb = row * nb / n;
    if (ea > 0) chi2 += (oa - ea) * (oa - ea) / ea;
    if (eb > 0) chi2 += (ob - eb) * (ob - eb) / eb;
  }
  return chi2_survival_wh(chi2, double(tokens.size()) - 1.0);
}

std::map<std::string, int64_t> token_counts(const std::vector<CorpusDoc>& docs, Gender g) {
  std::map<std::string, int64_t> counts;
  for (const auto& d : docs)
    if (d.gender == g)
      for (const auto& t : word_tokens(d.text)) ++counts[t];
  return counts;
}

DemographicProfile profile(Gender g, int age, int edu, int income) {
  DemographicProfile p;
  p.gender = g;
  p.age_years = age;
  p.education = edu;
  p.income_usd = income;
  return p;
}

}  // namespace

TEST_CASE("binarize_demographics boundaries follow the class definitions") {
  REQUIRE(binarize_demographics(profile(Gender::male, 34, 2, 1000)).age_bit == 0);
  REQUIRE(binarize_demographics(profile(Gender::male, 35, 2, 1000)).age_bit == 1);
  REQUIRE(binarize_demographics(profile(Gender::male, 40, 2, 50000)).income_bit == 0);
  REQUIRE(binarize_demographics(profile(Gender::male, 40, 2, 50001)).income_bit == 1);
  REQUIRE(binarize_demographics(profile(Gender::male, 40, kEducationBachelor - 1, 0)).education_bit == 0);
  REQUIRE(binarize_demographics(profile(Gender::male, 40, kEducationBachelor, 0)).education_bit == 1);

  const auto all_ones = binarize_demographics(profile(Gender::female, 40, kEducationBachelor, 60000));
  REQUIRE(all_ones.canonical() == std::array<int, 4>{1, 1, 1, 1});

  // total + idempotent: binarizing twice from the same profile is identical
  const auto again = binarize_demographics(profile(Gender::female, 40, kEducationBachelor, 60000));
  REQUIRE(again.canonical() == all_ones.canonical());

  REQUIRE_THROWS_AS(binarize_demographics(profile(Gender::male, 0, 2, 1000)), DataError);
}

TEST_CASE("build_vocab ranks by frequency with lexicographic ties") {
  Vocabulary v = build_vocab({"a a b"}, 8);
  REQUIRE(v.size() == 7);
  REQUIRE(v.tokens[5] == "a");
  REQUIRE(v.tokens[6] == "b");

  Vocabulary tie = build_vocab({"b a"}, 8);
  REQUIRE(tie.tokens[5] == "a");  // equal counts, lexicographic order
  REQUIRE(tie.tokens[6] == "b");

  Vocabulary v2 = build_vocab({"a a b"}, 8);
  REQUIRE(v2.tokens == v.tokens);

  REQUIRE_THROWS_AS(build_vocab({}, 8), DataError);
  REQUIRE_THROWS_AS(build_vocab({"a"}, 5), ConfigError);

  Vocabulary capped = build_vocab({"a a b c d e f g"}, 7);
  REQUIRE(capped.size() == 7);  // 5 specials + 2 words
}

TEST_CASE("tokenize truncates to max_seq_len and maps OOV to [UNK]") {
  Vocabulary v = build_vocab({"hello world"}, 32);

  std::string long_text;
  for (int i = 0; i < 200; ++i) long_text += "hello ";
  TokenSequence seq = tokenize(long_text, v, 150);
  REQUIRE(seq.ids.size() == 150);
  REQUIRE(seq.ids.front() == Vocabulary::kCls);
  REQUIRE(seq.ids.back() == Vocabulary::kSep);
  REQUIRE(seq.attention_mask == std::vector<int>(150, 1));

  TokenSequence empty = tokenize("", v);
  REQUIRE(empty.ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kSep});
  REQUIRE(empty.attention_mask == std::vector<int>{1, 1});

  TokenSequence oov = tokenize("qqq zzz", v);
  REQUIRE(oov.ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kUnk, Vocabulary::kUnk,
                                      Vocabulary::kSep});

  // known words round-trip through detokenize
  TokenSequence known = tokenize("Hello, WORLD!", v);
  REQUIRE(detokenize(known, v) == "hello world");
}

TEST_CASE("vocabulary file round-trips with line number as id") {
  Vocabulary v = build_vocab({"alpha beta beta"}, 16);
  save_vocab("vocab_test.txt", v);
  Vocabulary back = load_vocab("vocab_test.txt");
  REQUIRE(back.tokens == v.tokens);
  REQUIRE(back.id_of("beta") == v.id_of("beta"));
  std::remove("vocab_test.txt");
}

TEST_CASE("binarize_affect uses the training fold median only") {
  std::vector<ResponseRecord> recs(8);
  const double train_raws[5] = {1, 2, 3, 4, 5};
  for (int i = 0; i < 5; ++i) recs[size_t(i)].empathy_raw = train_raws[i];
  recs[5].empathy_raw = 4.0;  // test items
  recs[6].empathy_raw = 2.0;
  recs[7].empathy_raw = 100.0;

  AffectLabels lab = binarize_affect(recs, {0, 1, 2, 3, 4}, "empathy");
  REQUIRE(lab.threshold == 3.0);
  REQUIRE(lab.labels[5] == 1);
  REQUIRE(lab.labels[6] == 0);
  REQUIRE(lab.labels[2] == 0);  // raw 3 is not > 3

  // protocol check: the test items' own median would be different; assert the
  // training threshold is the one applied
  AffectLabels test_only = binarize_affect(recs, {5, 6, 7}, "empathy");
  REQUIRE(test_only.threshold != lab.threshold);

  std::vector<ResponseRecord> constant(4);
  for (auto& r : constant) r.empathy_raw = 2.5;
  REQUIRE_THROWS_AS(binarize_affect(constant, {0, 1, 2, 3}, "empathy"), LabelError);
  REQUIRE_THROWS_AS(binarize_affect(recs, {}, "empathy"), ContractError);
}

TEST_CASE("dataset file round-trip, rejects report, and schema errors") {
  std::vector<ResponseRecord> recs;
  ResponseRecord a;
  a.id = "r1";
  a.text = "plain text response";
  a.profile = profile(Gender::female, 36, 4, 60000);
  a.empathy_raw = 5.5;
  a.distress_raw = 2.25;
  ResponseRecord b;
  b.id = "r2";
  b.text = "tricky\tfield with \"quotes\"\nand a newline";
  b.profile = profile(Gender::male, 22, 2, 30000);
  b.empathy_raw = 1.5;
  b.distress_raw = 6.0;
  recs = {a, b};
  save_dataset("dataset_test.tsv", recs);

  LoadedDataset loaded = load_dataset("dataset_test.tsv");
  REQUIRE(loaded.records.size() == 2);
  REQUIRE(loaded.rejects.rows.empty());
  REQUIRE(loaded.records[1].text == b.text);
  REQUIRE(loaded.records[0].profile.income_usd == 60000);
  REQUIRE(loaded.records[0].empathy_raw == 5.5);
  std::remove("dataset_test.tsv");

  // empty file with header -> empty list
  write_text_file("dataset_empty.tsv",
                  "id\ttext\tgender\tage\teducation\tincome\tempathy\tdistress\n");
  LoadedDataset empty = load_dataset("dataset_empty.tsv");
  REQUIRE(empty.records.empty());
  REQUIRE(empty.total_rows == 0);
  std::remove("dataset_empty.tsv");

  // row with a missing income lands in rejects; nothing silently dropped
  write_text_file("dataset_bad.tsv",
                  "id\ttext\tgender\tage\teducation\tincome\tempathy\tdistress\n"
                  "r1\tok text\tfemale\t40\t4\t60000\t5.0\t3.0\n"
                  "r2\tmissing income\tmale\t30\t2\t\t4.0\t2.0\n"
                  "r3\tshort row\tmale\t30\n");
  LoadedDataset bad = load_dataset("dataset_bad.tsv");
  REQUIRE(bad.records.size() == 1);
  REQUIRE(bad.rejects.rows.size() == 2);
  REQUIRE(bad.total_rows == 3);
  REQUIRE(bad.rejects.rows[0].reason == "non-numeric field");
  std::remove("dataset_bad.tsv");

  // missing column named in the schema error
  write_text_file("dataset_schema.tsv", "id\ttext\tgender\tage\teducation\tempathy\tdistress\n");
  try {
    load_dataset("dataset_schema.tsv");
    FAIL("expected schema error");
  } catch (const DataError& e) {
    REQUIRE(std::string(e.what()).find("income") != std::string::npos);
  }
  std::remove("dataset_schema.tsv");
}

TEST_CASE("sample_balanced_subset draws equally from both classes") {
  std::vector<ResponseRecord> recs;
  for (int i = 0; i < 200; ++i) {
    ResponseRecord r;
    r.id = std::to_string(i);
    r.text = "t";
    r.profile = profile(i < 100 ? Gender::male : Gender::female, 30, 2, 1000);
    recs.push_back(r);
  }
  std::vector<int> pick = sample_balanced_subset(recs, "gender", 7);
  REQUIRE(pick.size() == 100);
  int male = 0;
  for (int i : pick)
    if (recs[size_t(i)].profile.gender == Gender::male) ++male;
  REQUIRE(male == 50);

  std::vector<int> again = sample_balanced_subset(recs, "gender", 7);
  REQUIRE(again == pick);
  std::vector<int> other = sample_balanced_subset(recs, "gender", 8);
  REQUIRE(other != pick);

  // unbalanced classes: result stays 50/50 within one item
  std::vector<ResponseRecord> skew = recs;
  skew.resize(160);  // 100 male, 60 female
  std::vector<int> s = sample_balanced_subset(skew, "gender", 3);
  int m2 = 0;
  for (int i : s)
    if (skew[size_t(i)].profile.gender == Gender::male) ++m2;
  REQUIRE(std::abs(int(s.size()) - 2 * m2) <= 1);

  std::vector<ResponseRecord> one_class(recs.begin(), recs.begin() + 100);
  REQUIRE_THROWS_AS(sample_balanced_subset(one_class, "gender", 1), DataError);
}

TEST_CASE("synthetic corpus: overlap controls group distinguishability") {
  CorpusConfig cfg;
  cfg.num_docs = 300;

  SECTION("full overlap is statistically indistinguishable") {
    cfg.overlap = 1.0;
    auto docs = generate_synthetic_corpus(cfg, 11);
    const double p = chi2_token_homogeneity(token_counts(docs, Gender::male),
                                            token_counts(docs, Gender::female));
    REQUIRE(p > 0.01);
  }

  SECTION("zero overlap shares no topic tokens") {
    cfg.overlap = 0.0;
    auto docs = generate_synthetic_corpus(cfg, 12);
    std::set<std::string> male_topics, female_topics;
    for (const auto& d : docs)
      for (const auto& t : word_tokens(d.text)) {
        if (t.rfind("fill", 0) == 0) continue;  // fillers are not topic tokens
        (d.gender == Gender::male ? male_topics : female_topics).insert(t);
      }
    for (const auto& t : male_topics) REQUIRE(female_topics.count(t) == 0);
    REQUIRE(!male_topics.empty());
    REQUIRE(!female_topics.empty());
  }

  SECTION("fixed seed reproduces the corpus byte for byte") {
    auto a = generate_synthetic_corpus(cfg, 5);
    auto b = generate_synthetic_corpus(cfg, 5);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      REQUIRE(a[i].text == b[i].text);
      REQUIRE(a[i].gender == b[i].gender);
    }
  }

  SECTION("overlap outside [0,1] is a config error") {
    cfg.overlap = 1.5;
    REQUIRE_THROWS_AS(generate_synthetic_corpus(cfg, 1), ConfigError);
  }
}

TEST_CASE("corpus file round-trip") {
  CorpusConfig cfg;
  cfg.num_docs = 20;
  auto docs = generate_synthetic_corpus(cfg, 3);
  save_corpus("corpus_test.txt", docs);
  auto back = load_corpus("corpus_test.txt");
  REQUIRE(back.size() == docs.size());
  for (size_t i = 0; i < docs.size(); ++i) {
    REQUIRE(back[i].text == docs[i].text);
    REQUIRE(back[i].gender == docs[i].gender);
    REQUIRE(back[i].age == docs[i].age);
  }
  std::remove("corpus_test.txt");

  write_text_file("corpus_bad.txt", "age=3\tgender=m\ttext\n");
  REQUIRE_THROWS_AS(load_corpus("corpus_bad.txt"), DataError);
  std::remove("corpus_bad.txt");
}

TEST_CASE("planted dataset: Bayes gap appears iff beta > 0") {
  EmpathyGenConfig cfg;

  SECTION("beta = 0 equalizes aware and agnostic optima") {
    cfg.beta = 0.0;
    SyntheticDataset ds = generate_synthetic_empathy_dataset(cfg, 21);
    REQUIRE(ds.empathy.analytic_bayes_aware ==
            Catch::Approx(ds.empathy.analytic_bayes_agnostic).margin(1e-12));
    REQUIRE(ds.distress.analytic_bayes_aware ==
            Catch::Approx(ds.distress.analytic_bayes_agnostic).margin(1e-12));
  }

  SECTION("large beta gives the aware predictor a strict, computable margin") {
    cfg.beta = 2.0;
    SyntheticDataset ds = generate_synthetic_empathy_dataset(cfg, 22);
    // enumerate the generator cases: the gap is the ambiguous, unstyled mass
    // times the interaction resolution advantage
    const double expected_gap = cfg.ambiguous_fraction * (1.0 - cfg.style_fraction) *
                                (stdnormal_cdf(cfg.beta / cfg.noise_sigma) - 0.5);
    const double gap = ds.empathy.analytic_bayes_aware - ds.empathy.analytic_bayes_agnostic;
    REQUIRE(gap == Catch::Approx(expected_gap).margin(1e-12));
    REQUIRE(gap > 0.10);

    // empirical: count sidecar predictions against latent labels
    auto acc = [&](const std::vector<int>& pred, const std::vector<int>& truth) {
      int ok = 0;
      for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
      return double(ok) / double(pred.size());
    };
    const double aware = acc(ds.empathy.bayes_aware, ds.empathy.latent_label);
    const double agnostic = acc(ds.empathy.bayes_agnostic, ds.empathy.latent_label);
    REQUIRE(aware - agnostic > 0.05);
  }

  SECTION("fixed seed reproduces the dataset") {
    auto a = generate_synthetic_empathy_dataset(cfg, 9);
    auto b = generate_synthetic_empathy_dataset(cfg, 9);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); ++i) {
      REQUIRE(a.records[i].text == b.records[i].text);
      REQUIRE(a.records[i].empathy_raw == b.records[i].empathy_raw);
    }
    REQUIRE(a.empathy.latent_label == b.empathy.latent_label);
  }

  SECTION("train-median split recovers planted labels") {
    SyntheticDataset ds = generate_synthetic_empathy_dataset(cfg, 30);
    std::vector<int> all_ids(ds.records.size());
    for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = int(i);
    AffectLabels lab = binarize_affect(ds.records, all_ids, "empathy");
    int agree = 0;
    for (size_t i = 0; i < lab.labels.size(); ++i)
      agree += lab.labels[i] == ds.empathy.latent_label[i];
    REQUIRE(double(agree) / double(lab.labels.size()) >= 0.95);
  }

  SECTION("ground truth sidecar serializes the full construction") {
    SyntheticDataset ds = generate_synthetic_empathy_dataset(cfg, 2);
    nlohmann::json j = ground_truth_json(ds);
    REQUIRE(j["config"]["beta"] == cfg.beta);
    REQUIRE(j["empathy"]["latent_label"].size() == ds.records.size());
    REQUIRE(j["styled"].size() == ds.records.size());
  }
}
