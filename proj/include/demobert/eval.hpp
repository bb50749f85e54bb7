#pragma once

// Evaluation statistics: stratified k-fold plans with shuffled restarts,
// positive-class F1 / accuracy, and McNemar's paired significance test with
// the footnote-style marks (p < 0.05 / 0.01 / 0.001).

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "demobert/util.hpp"

namespace demobert {

// ---------------------------------------------------------------------------
// Fold plans
// ---------------------------------------------------------------------------

struct FoldPlan {
  struct Restart {
    uint64_t seed = 0;
    std::vector<std::vector<int>> test_folds;  // disjoint, exhaustive
  };
  std::vector<Restart> restarts;
  std::vector<std::string> warnings;

  std::vector<int> train_ids(int restart, int fold) const {
    const auto& folds = restarts[size_t(restart)].test_folds;
    std::vector<int> out;
    for (size_t f = 0; f < folds.size(); ++f) {
      if (int(f) == fold) continue;
      out.insert(out.end(), folds[f].begin(), folds[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

// Stratified k-fold per restart seed: every fold's size is floor(N/k) or
// ceil(N/k) and its per-class counts track the global rate within one item.
// A class with fewer than k members triggers a warning and an unstratified
// fallback for that restart.
inline FoldPlan make_folds(const std::vector<int>& labels, const std::vector<uint64_t>& seeds,
                           int n_folds = 5) {
  const int n = int(labels.size());
  if (n < 2 * n_folds)
    throw ContractError("make_folds: need at least " + std::to_string(2 * n_folds) + " records");

  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < n; ++i) by_class[labels[size_t(i)]].push_back(i);
  bool stratify = true;
  FoldPlan plan;
  for (const auto& [cls, members] : by_class)
    if (int(members.size()) < n_folds) {
      stratify = false;
      plan.warnings.push_back("class " + std::to_string(cls) + " has only " +
                              std::to_string(members.size()) +
                              " members; falling back to unstratified folds");
    }

  for (uint64_t seed : seeds) {
    FoldPlan::Restart restart;
    restart.seed = seed;
    restart.test_folds.assign(size_t(n_folds), {});
    std::vector<int> target(size_t(n_folds), n / n_folds);
    for (int f = 0; f < n % n_folds; ++f) ++target[size_t(f)];

    std::map<int, std::vector<int>> groups =
        stratify ? by_class : std::map<int, std::vector<int>>{{0, [&] {
                                                                 std::vector<int> all(size_t(n), 0);
                                                                 for (int i = 0; i < n; ++i)
                                                                   all[size_t(i)] = i;
                                                                 return all;
                                                               }()}};
    std::vector<int> assigned(size_t(n_folds), 0);
    for (auto& [cls, members_const] : groups) {
      std::vector<int> members = members_const;
      Rng rng(derive_seed(seed, hash_str("folds"), uint64_t(cls)));
      rng.shuffle(members);

      const int base = int(members.size()) / n_folds;
      int rem = int(members.size()) % n_folds;
      std::vector<int> quota(size_t(n_folds), base);
      // hand the remainder to the folds furthest below their target
      std::vector<int> order(size_t(n_folds), 0);
      for (int f = 0; f < n_folds; ++f) order[size_t(f)] = f;
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        const int da = target[size_t(a)] - assigned[size_t(a)];
        const int db = target[size_t(b)] - assigned[size_t(b)];
        if (da != db) return da > db;
        return a < b;
      });
      for (int r = 0; r < rem; ++r) ++quota[size_t(order[size_t(r)])];

      size_t cursor = 0;
      for (int f = 0; f < n_folds; ++f) {
        for (int q = 0; q < quota[size_t(f)]; ++q)
          restart.test_folds[size_t(f)].push_back(members[cursor++]);
        assigned[size_t(f)] += quota[size_t(f)];
      }
    }
    for (auto& fold : restart.test_folds) std::sort(fold.begin(), fold.end());
    plan.restarts.push_back(std::move(restart));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// F1 / accuracy
// ---------------------------------------------------------------------------

struct F1Accuracy {
  double f1 = 0.0;
  double accuracy = 0.0;
};

// positive-class F1; F1 = 0 by convention when precision + recall = 0
inline F1Accuracy f1_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty())
    throw ContractError("f1_accuracy: prediction/label lengths differ or are empty");
  int64_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    correct += preds[i] == labels[i];
    if (preds[i] == 1 && labels[i] == 1) ++tp;
    if (preds[i] == 1 && labels[i] == 0) ++fp;
    if (preds[i] == 0 && labels[i] == 1) ++fn;
  }
  F1Accuracy out;
  out.accuracy = double(correct) / double(preds.size());
  const double denom = double(2 * tp + fp + fn);
  out.f1 = denom == 0.0 ? 0.0 : double(2 * tp) / denom;
  return out;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

// ---------------------------------------------------------------------------
// McNemar's test
// ---------------------------------------------------------------------------

// paired correctness counts of classifiers A and B on the same items;
// b = n01 (A wrong, B right), c = n10 (A right, B wrong)
struct ContingencyTable {
  int64_t n00 = 0, n01 = 0, n10 = 0, n11 = 0;

  int64_t b() const { return n01; }
  int64_t c() const { return n10; }
  int64_t total() const { return n00 + n01 + n10 + n11; }
};

inline ContingencyTable paired_table(const std::vector<int>& preds_a,
                                     const std::vector<int>& preds_b,
                                     const std::vector<int>& labels) {
  if (preds_a.size() != labels.size() || preds_b.size() != labels.size())
    throw ContractError("paired_table: length mismatch");
  ContingencyTable t;
  for (size_t i = 0; i < labels.size(); ++i) {
    const bool a_ok = preds_a[i] == labels[i];
    const bool b_ok = preds_b[i] == labels[i];
    if (a_ok && b_ok) ++t.n11;
    else if (!a_ok && !b_ok) ++t.n00;
    else if (!a_ok && b_ok) ++t.n01;
    else ++t.n10;
  }
  return t;
}

inline std::string significance_mark(double p) {
  if (p < 0.001) return "‡";  // double dagger
  if (p < 0.01) return "†";   // dagger
  if (p < 0.05) return "⋆";   // star
  return "";
}

inline double chi2_survival_1df(double x) { return std::erfc(std::sqrt(x / 2.0)); }

struct McNemarResult {
  double statistic = 0.0;
  double p_value = 1.0;
  std::string mark;
  std::string method;  // exact_binomial | chi_squared | degenerate
  std::string note;
};

// Exact two-sided binomial below b + c = 25, continuity-corrected chi-squared
// with one degree of freedom above.
inline McNemarResult mcnemar(const ContingencyTable& table) {
  const int64_t b = table.b(), c = table.c();
  if (b < 0 || c < 0) throw ContractError("mcnemar: negative discordant counts");
  McNemarResult res;
  const int64_t n = b + c;
  if (n == 0) {
    res.method = "degenerate";
    res.p_value = 1.0;
    res.note = "identical classifiers";
    res.mark = "";
    return res;
  }
  if (n < 25) {
    res.method = "exact_binomial";
    const int64_t k = std::min(b, c);
    // p = 2 * sum_{i<=k} C(n, i) / 2^n, capped at 1
    double term = std::pow(0.5, double(n));  // C(n, 0) / 2^n
    double cdf = term;
    for (int64_t i = 1; i <= k; ++i) {
      term *= double(n - i + 1) / double(i);
      cdf += term;
    }
    res.statistic = double(k);
    res.p_value = std::min(1.0, 2.0 * cdf);
  } else {
    res.method = "chi_squared";
    const double diff = std::abs(double(b - c)) - 1.0;
    res.statistic = diff * diff / double(n);
    res.p_value = chi2_survival_1df(res.statistic);
  }
  res.mark = significance_mark(res.p_value);
  return res;
}

}  // namespace demobert
