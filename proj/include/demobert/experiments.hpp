#pragma once

// Experiment harness on top of the evaluation protocol: demographic-specific
// train/test matrix experiments and the variant grid, both evaluated under
// the same fold plans (5 shuffled restarts x 5 stratified folds), with
// McNemar significance against a paired competitor. Cells run on a bounded
// worker pool; every cell's randomness derives from (restart seed, cell key,
// fold), so results do not depend on scheduling.

#include <atomic>
#include <limits>
#include <thread>

#include "demobert/baselines.hpp"
#include "demobert/eval.hpp"
#include "demobert/pretrain.hpp"

namespace demobert {

struct ExperimentConfig {
  EncoderConfig encoder;
  TrainConfig train;
  std::string mtl_kind = "alternating";  // alternating | parallel
  std::map<std::string, double> mtl_loss_weights;
  std::vector<uint64_t> restart_seeds = {101, 102, 103, 104, 105};
  int n_folds = 5;
  int fnn_out = 16;
  // Composition of the "All" test slice: every record, or the union of the
  // positive empathy/distress subsets.
  std::string all_test_composition = "all";
  // pretrained encoder checkpoints: "ALL", "<attribute>:0", "<attribute>:1"
  std::map<std::string, std::string> pretrain_checkpoints;
  BaselineConfig baseline_template;
  int workers = 1;

  void validate() const {
    encoder.validate();
    train.validate();
    if (restart_seeds.empty()) throw ConfigError("experiment: need at least one restart seed");
    if (n_folds < 2) throw ConfigError("experiment: need at least two folds");
    if (mtl_kind != "alternating" && mtl_kind != "parallel")
      throw ConfigError("experiment: mtl_kind must be alternating or parallel");
    if (all_test_composition != "all" && all_test_composition != "union_affect")
      throw ConfigError("experiment: all_test_composition must be all or union_affect");
    if (workers < 1) throw ConfigError("experiment: workers must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

struct CellResult {
  std::string row_key, col_key;
  bool available = true;
  std::string note;
  std::vector<double> acc_per_restart, f1_per_restart;
  double acc_mean = 0.0, acc_std = 0.0, f1_mean = 0.0, f1_std = 0.0;
  double p_value = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> p_per_restart;
  std::string mark;
};

struct ExperimentReport {
  std::string kind;  // matrix | grid
  std::string task, attribute, method, baseline;
  std::vector<std::string> row_keys, col_keys;
  std::vector<CellResult> cells;  // row-major

  const CellResult& cell(const std::string& row, const std::string& col) const {
    for (const auto& c : cells)
      if (c.row_key == row && c.col_key == col) return c;
    throw ContractError("report has no cell (" + row + ", " + col + ")");
  }

  nlohmann::json to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells) {
      rows.push_back({{"row", c.row_key},
                      {"col", c.col_key},
                      {"available", c.available},
                      {"note", c.note},
                      {"acc_mean", c.acc_mean},
                      {"acc_std", c.acc_std},
                      {"f1_mean", c.f1_mean},
                      {"f1_std", c.f1_std},
                      {"acc_per_restart", c.acc_per_restart},
                      {"f1_per_restart", c.f1_per_restart},
                      {"p_value", c.p_value},
                      {"p_per_restart", c.p_per_restart},
                      {"mark", c.mark}});
    }
    return nlohmann::json{{"kind", kind},       {"task", task},         {"attribute", attribute},
                          {"method", method},   {"baseline", baseline}, {"row_keys", row_keys},
                          {"col_keys", col_keys}, {"cells", rows}};
  }

  static ExperimentReport from_json(const nlohmann::json& j) {
    ExperimentReport r;
    r.kind = j.value("kind", "");
    r.task = j.value("task", "");
    r.attribute = j.value("attribute", "");
    r.method = j.value("method", "");
    r.baseline = j.value("baseline", "");
    r.row_keys = j.value("row_keys", std::vector<std::string>{});
    r.col_keys = j.value("col_keys", std::vector<std::string>{});
    for (const auto& c : j.at("cells")) {
      CellResult cell;
      cell.row_key = c.value("row", "");
      cell.col_key = c.value("col", "");
      cell.available = c.value("available", true);
      cell.note = c.value("note", "");
      cell.acc_mean = c.value("acc_mean", 0.0);
      cell.acc_std = c.value("acc_std", 0.0);
      cell.f1_mean = c.value("f1_mean", 0.0);
      cell.f1_std = c.value("f1_std", 0.0);
      cell.acc_per_restart = c.value("acc_per_restart", std::vector<double>{});
      cell.f1_per_restart = c.value("f1_per_restart", std::vector<double>{});
      cell.p_value = c.value("p_value", std::numeric_limits<double>::quiet_NaN());
      cell.p_per_restart = c.value("p_per_restart", std::vector<double>{});
      cell.mark = c.value("mark", "");
      r.cells.push_back(std::move(cell));
    }
    return r;
  }

  // table-layout text: rows = train subsets / variants, cols = test subsets
  std::string to_tsv() const {
    std::ostringstream out;
    out << "# " << kind << "\ttask=" << task;
    if (!attribute.empty()) out << "\tattribute=" << attribute;
    if (!method.empty()) out << "\tmethod=" << method;
    if (!baseline.empty()) out << "\tbaseline=" << baseline;
    out << "\n";
    out << (kind == "matrix" ? "train\\test" : "variant");
    for (const auto& c : col_keys) out << "\t" << c << "_F1\t" << c << "_Ac";
    out << "\n";
    out << std::fixed;
    for (const auto& r : row_keys) {
      out << r;
      for (const auto& c : col_keys) {
        const CellResult& cr = cell(r, c);
        if (!cr.available) {
          out << "\t--\t--";
          continue;
        }
        out.precision(2);
        out << "\t" << 100.0 * cr.f1_mean << "\t" << 100.0 * cr.acc_mean;
        out.precision(2);
        out << "±" << 100.0 * cr.acc_std << cr.mark;
      }
      out << "\n";
    }
    return out.str();
  }
};

// ---------------------------------------------------------------------------
// Shared cell machinery
// ---------------------------------------------------------------------------

namespace detail {

struct PooledPreds {
  // ordered by (restart, record index); keys pair the two for McNemar
  std::vector<int64_t> keys;
  std::vector<int> preds, labels;
  std::vector<double> acc_per_restart, f1_per_restart;
  bool available = true;
  std::string note;
};

inline void parallel_for(int n_jobs, int workers, const std::function<void(int)>& fn) {
  if (workers <= 1 || n_jobs <= 1) {
    for (int i = 0; i < n_jobs; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_jobs) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int k = std::min(workers, n_jobs);
  pool.reserve(size_t(k));
  for (int t = 0; t < k; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// tokenized view of the record set plus label maps for one fold's thresholds
inline LabeledDataset build_labeled_dataset(const std::vector<ResponseRecord>& records,
                                            const Vocabulary& vocab, int max_seq_len,
                                            const std::vector<int>& affect_train_ids) {
  const AffectLabels empathy = binarize_affect(records, affect_train_ids, "empathy");
  const AffectLabels distress = binarize_affect(records, affect_train_ids, "distress");
  LabeledDataset data;
  data.examples.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    LabeledExample ex;
    ex.seq = tokenize(records[i].text, vocab, max_seq_len);
    const BinaryDemographics bits = binarize_demographics(records[i].profile);
    ex.bits = bits;
    ex.labels["empathy"] = empathy.labels[i];
    ex.labels["distress"] = distress.labels[i];
    ex.labels["gender"] = bits.gender_bit;
    ex.labels["age"] = bits.age_bit;
    ex.labels["education"] = bits.education_bit;
    ex.labels["income"] = bits.income_bit;
    data.examples.push_back(std::move(ex));
  }
  return data;
}

inline LabeledDataset subset_dataset(const LabeledDataset& full, const std::vector<int>& ids) {
  LabeledDataset out;
  out.examples.reserve(ids.size());
  for (int i : ids) out.examples.push_back(full.examples[size_t(i)]);
  return out;
}

inline LoadedCheckpoint require_checkpoint(const ExperimentConfig& cfg, const std::string& key) {
  auto it = cfg.pretrain_checkpoints.find(key);
  if (it == cfg.pretrain_checkpoints.end())
    throw ConfigError("experiment: missing pretrain checkpoint for '" + key + "'");
  return load_checkpoint(it->second);
}

// Train one variant on train_ids and predict the reported head on test_ids.
inline std::vector<int> run_variant_cell(const std::vector<ResponseRecord>& records,
                                         const Vocabulary& vocab, const VariantSpec& spec,
                                         const std::string& task,
                                         const std::vector<int>& train_ids,
                                         const std::vector<int>& test_ids, uint64_t cell_seed,
                                         const ExperimentConfig& cfg,
                                         const std::string& pretrain_key,
                                         std::vector<int>* labels_out) {
  const LabeledDataset full =
      build_labeled_dataset(records, vocab, cfg.encoder.max_seq_len, train_ids);
  const LabeledDataset train_data = subset_dataset(full, train_ids);
  const LabeledDataset test_data = subset_dataset(full, test_ids);
  std::vector<int> test_local(test_ids.size());
  for (size_t i = 0; i < test_ids.size(); ++i) test_local[i] = int(i);

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(cell_seed, hash_str("train"));

  std::string report_head;
  std::vector<int> preds;

  if (spec.is_baseline && spec.baseline_kind == "frozen_bert") {
    LoadedCheckpoint ck;
    if (cfg.pretrain_checkpoints.count(pretrain_key)) {
      ck = require_checkpoint(cfg, pretrain_key);
    } else {
      // no checkpoint configured: an untrained random encoder stands in
      ParamStore fresh;
      Rng rng(derive_seed(cell_seed, hash_str("fresh_encoder")));
      init_encoder_params(fresh, cfg.encoder, "encoder.", rng);
      for (const auto& p : fresh.all()) ck.params.emplace_back(p.name, p.tensor);
    }
    FrozenBert frozen(cfg.encoder, ck, task, derive_seed(cell_seed, hash_str("head")));
    TaskModel tm = frozen.task_model();
    report_head = task;
    preds = predict_labels(tm, test_data, test_local, report_head, cfg.train.batch_size);
  } else if (spec.is_baseline) {
    BaselineConfig bc = cfg.baseline_template;
    bc.kind = spec.baseline_kind;
    bc.head = task;
    bc.vocab_size = vocab.size();
    bc.max_seq_len = cfg.encoder.max_seq_len;
    bc.use_demographics = spec.baseline_use_dem;
    bc.use_affect_feature = spec.baseline_use_affect;
    BaselineModel model(bc, cell_seed);
    TaskModel tm = model.task_model();
    TrainLog log = train_single_task(tm, train_data, tc);
    report_head = task;
    preds = predict_labels(tm, test_data, test_local, report_head, cfg.train.batch_size);
  } else {
    const ModelConfig mc = resolve_model_config(spec, task, cfg.fnn_out);
    ModelAssembly assembly(cfg.encoder, mc, cell_seed);
    if (spec.use_pretrain) {
      LoadedCheckpoint ck = require_checkpoint(cfg, pretrain_key);
      for (const auto& [name, tensor] : ck.params) {
        if (name.rfind("encoder.", 0) != 0) continue;
        Parameter& p = assembly.params().get(name);
        if (p.tensor.shape != tensor.shape)
          throw ShapeError("pretrain checkpoint shape mismatch on " + name);
        p.tensor.values = tensor.values;
      }
    }
    TaskModel tm = task_model(assembly);
    report_head = mc.heads[0];
    if (!spec.finetune) {
      // bare PT: frozen pretrained encoder, untrained head
      assembly.params().set_trainable("encoder.", false);
      preds = predict_labels(tm, test_data, test_local, report_head, cfg.train.batch_size);
    } else if (mc.heads.size() == 1) {
      train_single_task(tm, train_data, tc);
      preds = predict_labels(tm, test_data, test_local, report_head, cfg.train.batch_size);
    } else {
      MtlStrategy strat;
      if (cfg.mtl_kind == "alternating") {
        strat.kind = MtlStrategy::Kind::alternating;
        strat.task_order = mc.heads;
        std::map<std::string, const LabeledDataset*> per_task;
        for (const auto& h : mc.heads) per_task[h] = &train_data;
        train_multitask_alternating(tm, per_task, tc, strat);
      } else {
        strat.kind = MtlStrategy::Kind::parallel;
        strat.loss_weights = cfg.mtl_loss_weights;
        train_multitask_parallel(tm, train_data, tc, strat);
      }
      preds = predict_labels(tm, test_data, test_local, report_head, cfg.train.batch_size);
    }
  }

  if (labels_out) {
    labels_out->clear();
    for (int i : test_local)
      labels_out->push_back(test_data.examples[size_t(i)].labels.at(report_head));
  }
  return preds;
}

inline void finalize_metrics(CellResult& cell, const PooledPreds& pooled) {
  cell.available = pooled.available;
  cell.note = pooled.note;
  if (!pooled.available) return;
  cell.acc_per_restart = pooled.acc_per_restart;
  cell.f1_per_restart = pooled.f1_per_restart;
  cell.acc_mean = mean_of(pooled.acc_per_restart);
  cell.acc_std = sample_std(pooled.acc_per_restart);
  cell.f1_mean = mean_of(pooled.f1_per_restart);
  cell.f1_std = sample_std(pooled.f1_per_restart);
}

// pooled McNemar between two cells evaluated on identical items
inline McNemarResult paired_mcnemar(const PooledPreds& a, const PooledPreds& b) {
  if (a.keys != b.keys)
    throw ContractError("paired_mcnemar: cells were evaluated on different items");
  ContingencyTable t = paired_table(a.preds, b.preds, a.labels);
  return mcnemar(t);
}

inline std::vector<double> per_restart_p(const PooledPreds& a, const PooledPreds& b,
                                         size_t n_restarts) {
  std::vector<double> out;
  for (size_t r = 0; r < n_restarts; ++r) {
    ContingencyTable t;
    for (size_t i = 0; i < a.keys.size(); ++i) {
      if (uint64_t(a.keys[i]) >> 32 != r) continue;
      const bool a_ok = a.preds[i] == a.labels[i];
      const bool b_ok = b.preds[i] == b.labels[i];
      if (a_ok && b_ok) ++t.n11;
      else if (!a_ok && !b_ok) ++t.n00;
      else if (!a_ok && b_ok) ++t.n01;
      else ++t.n10;
    }
    out.push_back(mcnemar(t).p_value);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix experiment (demographic-specific training, Tables 2-3 layout)
// ---------------------------------------------------------------------------

inline ExperimentReport run_matrix_experiment(const std::vector<ResponseRecord>& records,
                                              const Vocabulary& vocab,
                                              const std::string& attribute,
                                              const std::string& method, const std::string& task,
                                              const ExperimentConfig& cfg) {
  cfg.validate();
  if (method != "PT" && method != "tBERT" && method != "PT+tBERT")
    throw ConfigError("matrix: method must be PT, tBERT, or PT+tBERT");
  const VariantSpec spec = parse_variant(method);

  // stratification labels: global-median affect split (demographic labels
  // would be fold-independent, but the grid is affect-task only)
  std::vector<int> all_ids(records.size(), 0);
  for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = int(i);
  const AffectLabels strat = binarize_affect(records, all_ids, task);
  const FoldPlan plan = make_folds(strat.labels, cfg.restart_seeds, cfg.n_folds);

  std::vector<int> c0, c1;
  for (size_t i = 0; i < records.size(); ++i) {
    const int bit = binarize_demographics(records[i].profile).attribute(attribute);
    (bit == 0 ? c0 : c1).push_back(int(i));
  }

  const std::vector<std::string> keys = {"C0", "C1", "As"};
  const int R = int(cfg.restart_seeds.size());
  const int F = cfg.n_folds;

  struct Job {
    int row, col, restart, fold;
  };
  std::vector<Job> jobs;
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col)
      for (int r = 0; r < R; ++r)
        for (int f = 0; f < F; ++f) jobs.push_back({row, col, r, f});

  struct JobOut {
    bool ok = false;
    std::string note;
    std::vector<int> ids, preds, labels;
  };
  std::vector<JobOut> outs(jobs.size());

  auto subset_for = [&](int key_ix, int restart) -> std::vector<int> {
    if (key_ix == 0) return c0;
    if (key_ix == 1) return c1;
    return sample_balanced_subset(records, attribute,
                                  derive_seed(cfg.restart_seeds[size_t(restart)], hash_str("As")));
  };

  detail::parallel_for(int(jobs.size()), cfg.workers, [&](int j) {
    const Job& job = jobs[size_t(j)];
    JobOut& out = outs[size_t(j)];
    try {
      const std::vector<int> train_subset = subset_for(job.row, job.restart);
      const std::vector<int> test_subset = subset_for(job.col, job.restart);
      const auto& fold = plan.restarts[size_t(job.restart)].test_folds[size_t(job.fold)];
      const std::vector<int> train_pool = plan.train_ids(job.restart, job.fold);

      std::vector<int> train_ids, test_ids;
      std::set_intersection(train_pool.begin(), train_pool.end(), train_subset.begin(),
                            train_subset.end(), std::back_inserter(train_ids));
      std::set_intersection(fold.begin(), fold.end(), test_subset.begin(), test_subset.end(),
                            std::back_inserter(test_ids));
      if (train_ids.empty() || test_ids.empty()) {
        out.note = "empty fold/subset intersection";
        return;
      }
      const std::string pretrain_key = job.row == 2 ? "ALL" : attribute + ":" +
                                                                  std::to_string(job.row);
      const uint64_t cell_seed =
          derive_seed(cfg.restart_seeds[size_t(job.restart)],
                      hash_str(method + "|" + keys[size_t(job.row)] + "|" + keys[size_t(job.col)]),
                      uint64_t(job.fold));
      out.preds = detail::run_variant_cell(records, vocab, spec, task, train_ids, test_ids,
                                           cell_seed, cfg, pretrain_key, &out.labels);
      out.ids = test_ids;
      out.ok = true;
    } catch (const std::exception& e) {
      out.note = e.what();
    }
  });

  // reduce in fixed (row, col, restart, fold) order
  ExperimentReport report;
  report.kind = "matrix";
  report.task = task;
  report.attribute = attribute;
  report.method = method;
  report.row_keys = keys;
  report.col_keys = keys;
  std::vector<detail::PooledPreds> pooled(9);
  for (int row = 0; row < 3; ++row)
    for (int col = 0; col < 3; ++col) {
      detail::PooledPreds& pp = pooled[size_t(row * 3 + col)];
      for (int r = 0; r < R; ++r) {
        std::vector<int> preds, labels;
        for (size_t j = 0; j < jobs.size(); ++j) {
          const Job& job = jobs[j];
          if (job.row != row || job.col != col || job.restart != r) continue;
          const JobOut& out = outs[j];
          if (!out.ok) {
            if (!out.note.empty()) pp.note = out.note;
            continue;
          }
          for (size_t i = 0; i < out.ids.size(); ++i) {
            pp.keys.push_back((int64_t(r) << 32) | int64_t(out.ids[i]));
            preds.push_back(out.preds[i]);
            labels.push_back(out.labels[i]);
          }
        }
        if (preds.empty()) {
          pp.available = false;
          continue;
        }
        pp.preds.insert(pp.preds.end(), preds.begin(), preds.end());
        pp.labels.insert(pp.labels.end(), labels.begin(), labels.end());
        const F1Accuracy m = f1_accuracy(preds, labels);
        pp.acc_per_restart.push_back(m.accuracy);
        pp.f1_per_restart.push_back(m.f1);
      }
      CellResult cell;
      cell.row_key = keys[size_t(row)];
      cell.col_key = keys[size_t(col)];
      detail::finalize_metrics(cell, pp);
      report.cells.push_back(std::move(cell));
    }

  // significance: for each row, the max-accuracy cell is paired against the
  // best competing train subset on the same test column
  for (int row = 0; row < 3; ++row) {
    int best_col = -1;
    double best_acc = -1.0;
    for (int col = 0; col < 3; ++col) {
      const CellResult& c = report.cells[size_t(row * 3 + col)];
      if (c.available && c.acc_mean > best_acc) {
        best_acc = c.acc_mean;
        best_col = col;
      }
    }
    if (best_col < 0) continue;
    int rival = -1;
    double rival_acc = -1.0;
    for (int r2 = 0; r2 < 3; ++r2) {
      if (r2 == row) continue;
      const CellResult& c = report.cells[size_t(r2 * 3 + best_col)];
      if (c.available && c.acc_mean > rival_acc) {
        rival_acc = c.acc_mean;
        rival = r2;
      }
    }
    if (rival < 0) continue;
    const auto& mine = pooled[size_t(row * 3 + best_col)];
    const auto& theirs = pooled[size_t(rival * 3 + best_col)];
    if (!mine.available || !theirs.available || mine.keys != theirs.keys) continue;
    CellResult& cell = report.cells[size_t(row * 3 + best_col)];
    const McNemarResult mc = detail::paired_mcnemar(mine, theirs);
    cell.p_value = mc.p_value;
    cell.mark = mc.mark;
    cell.p_per_restart = detail::per_restart_p(mine, theirs, size_t(R));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Variant grid (Tables 4-5 layout)
// ---------------------------------------------------------------------------

inline bool is_affect_task(const std::string& task) {
  return task == "empathy" || task == "distress";
}

inline ExperimentReport run_variant_grid(const std::vector<ResponseRecord>& records,
                                         const Vocabulary& vocab,
                                         const std::vector<std::string>& variants,
                                         const std::string& task,
                                         const std::string& baseline_variant,
                                         const ExperimentConfig& cfg) {
  cfg.validate();
  if (variants.empty()) throw ConfigError("grid: no variants given");
  std::vector<VariantSpec> specs;
  for (const auto& v : variants) specs.push_back(parse_variant(v));
  bool have_baseline = false;
  for (const auto& v : variants) have_baseline = have_baseline || v == baseline_variant;
  if (!have_baseline)
    throw ConfigError("grid: baseline variant '" + baseline_variant +
                      "' must be in the variant list");

  std::vector<int> all_ids(records.size(), 0);
  for (size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = int(i);

  // slices: affect tasks split by gender; demographic tasks by affect label
  const AffectLabels global_empathy = binarize_affect(records, all_ids, "empathy");
  const AffectLabels global_distress = binarize_affect(records, all_ids, "distress");
  std::vector<std::string> slice_keys;
  std::map<std::string, std::vector<int>> slices;
  {
    std::vector<int> all_slice;
    if (cfg.all_test_composition == "union_affect") {
      for (int i : all_ids)
        if (global_empathy.labels[size_t(i)] == 1 || global_distress.labels[size_t(i)] == 1)
          all_slice.push_back(i);
    } else {
      all_slice = all_ids;
    }
    slices["All"] = all_slice;
  }
  if (is_affect_task(task)) {
    slice_keys = {"All", "Male", "Female"};
    std::vector<int> male, female;
    for (int i : all_ids) {
      const int bit = binarize_demographics(records[size_t(i)].profile).gender_bit;
      (bit == 0 ? male : female).push_back(i);
    }
    slices["Male"] = male;
    slices["Female"] = female;
  } else {
    slice_keys = {"All", "Em", "Dist"};
    std::vector<int> em, dist;
    for (int i : all_ids) {
      if (global_empathy.labels[size_t(i)] == 1) em.push_back(i);
      if (global_distress.labels[size_t(i)] == 1) dist.push_back(i);
    }
    slices["Em"] = em;
    slices["Dist"] = dist;
  }

  std::vector<int> strat_labels;
  if (is_affect_task(task)) {
    strat_labels = task == "empathy" ? global_empathy.labels : global_distress.labels;
  } else {
    for (int i : all_ids)
      strat_labels.push_back(binarize_demographics(records[size_t(i)].profile).attribute(task));
  }
  const FoldPlan plan = make_folds(strat_labels, cfg.restart_seeds, cfg.n_folds);

  const int R = int(cfg.restart_seeds.size());
  const int F = cfg.n_folds;
  struct Job {
    int variant, restart, fold;
  };
  std::vector<Job> jobs;
  for (int v = 0; v < int(specs.size()); ++v)
    for (int r = 0; r < R; ++r)
      for (int f = 0; f < F; ++f) jobs.push_back({v, r, f});

  struct JobOut {
    bool ok = false;
    std::string note;
    std::vector<int> ids, preds, labels;
  };
  std::vector<JobOut> outs(jobs.size());

  detail::parallel_for(int(jobs.size()), cfg.workers, [&](int j) {
    const Job& job = jobs[size_t(j)];
    JobOut& out = outs[size_t(j)];
    try {
      const auto& fold = plan.restarts[size_t(job.restart)].test_folds[size_t(job.fold)];
      const std::vector<int> train_ids = plan.train_ids(job.restart, job.fold);
      const uint64_t cell_seed = derive_seed(cfg.restart_seeds[size_t(job.restart)],
                                             hash_str(variants[size_t(job.variant)]),
                                             uint64_t(job.fold));
      out.preds = detail::run_variant_cell(records, vocab, specs[size_t(job.variant)], task,
                                           train_ids, fold, cell_seed, cfg, "ALL", &out.labels);
      out.ids = fold;
      out.ok = true;
    } catch (const std::exception& e) {
      out.note = e.what();
    }
  });

  ExperimentReport report;
  report.kind = "grid";
  report.task = task;
  report.baseline = baseline_variant;
  report.row_keys = variants;
  report.col_keys = slice_keys;

  // pooled predictions per (variant, slice)
  std::map<std::string, detail::PooledPreds> pooled;
  for (int v = 0; v < int(specs.size()); ++v) {
    for (const auto& slice_key : slice_keys) {
      const auto& slice = slices.at(slice_key);
      detail::PooledPreds pp;
      for (int r = 0; r < R; ++r) {
        std::vector<int> preds, labels;
        for (size_t j = 0; j < jobs.size(); ++j) {
          const Job& job = jobs[j];
          if (job.variant != v || job.restart != r) continue;
          const JobOut& out = outs[j];
          if (!out.ok) {
            if (!out.note.empty()) pp.note = out.note;
            continue;
          }
          for (size_t i = 0; i < out.ids.size(); ++i) {
            if (!std::binary_search(slice.begin(), slice.end(), out.ids[i])) continue;
            pp.keys.push_back((int64_t(r) << 32) | int64_t(out.ids[i]));
            preds.push_back(out.preds[i]);
            labels.push_back(out.labels[i]);
          }
        }
        if (preds.empty()) {
          pp.available = false;
          continue;
        }
        pp.preds.insert(pp.preds.end(), preds.begin(), preds.end());
        pp.labels.insert(pp.labels.end(), labels.begin(), labels.end());
        const F1Accuracy m = f1_accuracy(preds, labels);
        pp.acc_per_restart.push_back(m.accuracy);
        pp.f1_per_restart.push_back(m.f1);
      }
      pooled[variants[size_t(v)] + "|" + slice_key] = std::move(pp);
    }
  }

  for (const auto& variant : variants) {
    for (const auto& slice_key : slice_keys) {
      CellResult cell;
      cell.row_key = variant;
      cell.col_key = slice_key;
      const auto& mine = pooled.at(variant + "|" + slice_key);
      detail::finalize_metrics(cell, mine);
      const auto& base = pooled.at(baseline_variant + "|" + slice_key);
      if (variant != baseline_variant && mine.available && base.available &&
          mine.keys == base.keys) {
        const McNemarResult mc = detail::paired_mcnemar(mine, base);
        cell.p_value = mc.p_value;
        cell.p_per_restart = detail::per_restart_p(mine, base, size_t(R));
      }
      report.cells.push_back(std::move(cell));
    }
  }

  // mark only the max-accuracy cell per variant row (table bolding style)
  for (const auto& variant : variants) {
    CellResult* best = nullptr;
    for (auto& cell : report.cells)
      if (cell.row_key == variant && cell.available &&
          (best == nullptr || cell.acc_mean > best->acc_mean))
        best = &cell;
    if (best && !std::isnan(best->p_value)) best->mark = significance_mark(best->p_value);
  }
  return report;
}

}  // namespace demobert
