#pragma once

// Test-side gradient oracle: central finite differences computed directly
// from repeated forward evaluations. Deliberately independent of
// demobert::finite_diff_check so product code and tests cannot share a bug.

#include <functional>
#include <vector>

#include "demobert/tensor.hpp"

namespace testsupport {

using demobert::Tape;
using demobert::Tensor;

// Builds a scalar loss from the given inputs. Inputs are watched on a fresh
// tape for the analytic pass; finite differences perturb raw copies.
using LossBuilder = std::function<Tensor(const std::vector<Tensor>&)>;

struct OracleResult {
  double max_rel_err = 0.0;
  int worst_input = -1;
  int worst_coord = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline OracleResult check_against_central_differences(std::vector<Tensor> inputs,
                                                      const LossBuilder& build,
                                                      double eps = 1e-6,
                                                      double denom_floor = 1e-3) {
  // analytic gradients
  std::vector<std::vector<double>> grads(inputs.size());
  {
    Tape tape;
    std::vector<Tensor> tracked;
    tracked.reserve(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i)
      tracked.push_back(tape.watch(inputs[i], &grads[i]));
    Tensor loss = build(tracked);
    tape.backward(loss);
    for (size_t i = 0; i < inputs.size(); ++i)
      if (grads[i].empty()) grads[i].assign(size_t(inputs[i].size()), 0.0);
  }

  OracleResult res;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int64_t c = 0; c < inputs[i].size(); ++c) {
      const double orig = inputs[i].values[size_t(c)];
      inputs[i].values[size_t(c)] = orig + eps;
      const double up = build(inputs).values[0];
      inputs[i].values[size_t(c)] = orig - eps;
      const double down = build(inputs).values[0];
      inputs[i].values[size_t(c)] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = grads[i][size_t(c)];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), denom_floor});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = int(i);
        res.worst_coord = int(c);
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// Fixed random linear functional to scalarize a non-scalar op output:
// loss = sum_i w_i * out_i with w drawn once from the given seed.
inline Tensor scalarize(const Tensor& out, uint64_t seed) {
  demobert::Rng rng(seed);
  Tensor w(out.shape);
  for (double& v : w.values) v = rng.normal();
  Tensor prod = demobert::mul(out, w);
  // reduce by matmul with a ones column: reshape to [1, n] x [n, 1]
  Tensor flat = demobert::reshape(prod, {1, int(prod.size())});
  Tensor ones = demobert::full({int(prod.size()), 1}, 1.0);
  return demobert::reshape(demobert::matmul(flat, ones), {1});
}

}  // namespace testsupport
