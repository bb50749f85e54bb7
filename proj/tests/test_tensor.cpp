#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "demobert/tensor.hpp"
#include "support/grad_oracle.hpp"

using namespace demobert;
using testsupport::check_against_central_differences;
using testsupport::scalarize;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double stdev = 1.0) { return randn(std::move(s), rng, stdev); }

}  // namespace

TEST_CASE("matmul forward basics") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(eye, a);
  REQUIRE(c.values == std::vector<double>{1, 2, 3, 4});

  Tensor row({1, 2}, {1, 2});
  Tensor col({2, 1}, {3, 4});
  REQUIRE(matmul(row, col).values[0] == 11.0);

  REQUIRE_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("(2x3)") != std::string::npos);
  }
}

TEST_CASE("matmul backward matches central differences on random 3x4 by 4x2") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({4, 2}, rng);
    auto res = check_against_central_differences(
        {a, b}, [&](const std::vector<Tensor>& in) { return scalarize(matmul(in[0], in[1]), 7); });
    REQUIRE(res.max_rel_err <= 1e-6);
  }
}

TEST_CASE("softmax forward values") {
  Tensor x({3}, {0, 0, 0});
  Tensor y = softmax(x, 0);
  for (double v : y.values) REQUIRE(v == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

  Tensor big({2}, {1000, 0});
  Tensor yb = softmax(big, 0);
  REQUIRE(yb.values[0] == Catch::Approx(1.0));
  REQUIRE(yb.values[1] == Catch::Approx(0.0).margin(1e-300));
  REQUIRE(std::isfinite(yb.values[0]));

  // direct exp-normalize oracle
  Tensor z({3}, {1, 2, 3});
  Tensor yz = softmax(z, 0);
  double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i)
    REQUIRE(yz.values[size_t(i)] == Catch::Approx(std::exp(1.0 + i) / denom).epsilon(1e-12));
  REQUIRE(yz.values[0] + yz.values[1] + yz.values[2] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("softmax rows sum to one and stay in [0,1] on random input") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Tensor x = rand_tensor({4, 7}, rng, 3.0);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) {
        REQUIRE(y.at(r, c) >= 0.0);
        REQUIRE(y.at(r, c) <= 1.0);
        s += y.at(r, c);
      }
      REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
    }
  }
}

TEST_CASE("softmax over a non-trailing axis") {
  Rng rng(3);
  Tensor x = rand_tensor({3, 4}, rng);
  Tensor y = softmax(x, 0);
  for (int c = 0; c < 4; ++c) {
    double s = 0.0;
    for (int r = 0; r < 3; ++r) s += y.at(r, c);
    REQUIRE(s == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("layer_norm forward values") {
  Tensor gain({3}, {1, 1, 1});
  Tensor bias({3}, {0, 0, 0});
  Tensor constant({1, 3}, {5, 5, 5});
  Tensor y = layer_norm(constant, gain, bias, 1e-12);
  for (double v : y.values) REQUIRE(v == Catch::Approx(0.0).margin(1e-5));

  Tensor two({1, 2}, {1, 3});
  Tensor g2({2}, {1, 1});
  Tensor b2({2}, {0, 0});
  Tensor y2 = layer_norm(two, g2, b2, 0.0);
  REQUIRE(y2.values[0] == Catch::Approx(-1.0));
  REQUIRE(y2.values[1] == Catch::Approx(1.0));

  REQUIRE_THROWS_AS(layer_norm(Tensor({2, 1}), Tensor({1}), Tensor({1})), ContractError);
}

TEST_CASE("elementwise and structural ops match finite differences") {
  // rel-err 1e-4 for nonlinear ops, over 20 seeds as per the module contract
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);

    auto check = [&](std::vector<Tensor> ins, testsupport::LossBuilder f, double tol) {
      auto res = check_against_central_differences(std::move(ins), f);
      CAPTURE(seed, res.worst_input, res.worst_coord, res.analytic, res.numeric);
      REQUIRE(res.max_rel_err <= tol);
    };

    check({rand_tensor({3, 5}, rng), rand_tensor({3, 5}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(add(in[0], in[1]), 11); }, 1e-6);
    check({rand_tensor({3, 5}, rng), rand_tensor({5}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(add(in[0], in[1]), 12); }, 1e-6);
    check({rand_tensor({4, 3}, rng), rand_tensor({4, 3}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(mul(in[0], in[1]), 13); }, 1e-6);
    check({rand_tensor({2, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(scale(in[0], -1.7), 14); }, 1e-6);
    check({rand_tensor({3, 4}, rng), rand_tensor({3}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(row_scale(in[0], in[1]), 15); },
          1e-6);
    check({rand_tensor({2, 3, 4}, rng), rand_tensor({2, 4, 2}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(bmm(in[0], in[1]), 16); }, 1e-6);
    check({rand_tensor({2, 3, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(swap_axes(in[0], 1, 2), 17); },
          1e-6);
    check({rand_tensor({2, 6}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(reshape(in[0], {3, 4}), 18); },
          1e-6);
    check({rand_tensor({3, 2}, rng), rand_tensor({3, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(concat(in[0], in[1]), 19); }, 1e-6);
    check({rand_tensor({3, 6}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(slice_cols(in[0], 1, 3), 20); },
          1e-6);
    check({rand_tensor({4, 3}, rng)},
          [](const std::vector<Tensor>& in) {
            return scalarize(gather_rows(in[0], {0, 2, 2, 3}), 21);
          },
          1e-6);
    check({rand_tensor({3, 5}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(softmax(in[0], 1), 22); }, 1e-4);
    check({rand_tensor({2, 4}, rng, 0.8), rand_tensor({4}, rng), rand_tensor({4}, rng)},
          [](const std::vector<Tensor>& in) {
            return scalarize(layer_norm(in[0], in[1], in[2], 1e-8), 23);
          },
          1e-4);
    check({rand_tensor({3, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(gelu(in[0]), 24); }, 1e-4);
    check({rand_tensor({3, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(tanh_act(in[0]), 25); }, 1e-4);
    check({rand_tensor({3, 4}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(sigmoid_act(in[0]), 26); }, 1e-4);
    check({rand_tensor({2, 5, 3}, rng)},
          [](const std::vector<Tensor>& in) { return scalarize(max_over_time(in[0]), 27); }, 1e-4);

    Tensor mask({2, 4}, {1, 1, 0, 1, 1, 1, 1, 0});
    check({rand_tensor({2, 4, 3}, rng)},
          [mask](const std::vector<Tensor>& in) {
            return scalarize(masked_mean_pool(in[0], mask), 28);
          },
          1e-6);
    check({rand_tensor({2, 2, 3, 4}, rng)},
          [mask](const std::vector<Tensor>& in) {
            return scalarize(masked_softmax(in[0], mask), 29);
          },
          1e-4);
  }
}

TEST_CASE("masked_mean_pool forward values") {
  Tensor v({1, 3, 2}, {7, 9, 7, 9, 7, 9});
  Tensor m({1, 3}, {1, 1, 1});
  Tensor out = masked_mean_pool(v, m);
  REQUIRE(out.values == std::vector<double>{7, 9});

  Tensor m1({1, 3}, {0, 1, 0});
  Tensor x({1, 3, 2}, {1, 2, 3, 4, 5, 6});
  Tensor picked = masked_mean_pool(x, m1);
  REQUIRE(picked.values == std::vector<double>{3, 4});

  Tensor two({1, 2, 3}, {1, 1, 1, 3, 3, 3});
  Tensor m2({1, 2}, {1, 1});
  REQUIRE(masked_mean_pool(two, m2).values == std::vector<double>{2, 2, 2});

  Tensor mz({1, 3}, {0, 0, 0});
  REQUIRE_THROWS_AS(masked_mean_pool(x, mz), ContractError);
}

TEST_CASE("concat widths and identity on empty right operand") {
  Tensor a({1, 32});
  Tensor b({1, 4});
  REQUIRE(concat(a, b).dim(1) == 36);
  Tensor fnn_out({1, 16});
  REQUIRE(concat(a, fnn_out).dim(1) == 48);
  Tensor empty({1, 0});
  Tensor same = concat(a, empty);
  REQUIRE(same.shape == a.shape);
  REQUIRE(same.values == a.values);
  REQUIRE_THROWS_AS(concat(Tensor({2, 3}), Tensor({3, 1})), ShapeError);
}

TEST_CASE("cross_entropy values and gradient") {
  Tensor uniform({1, 2}, {0, 0});
  REQUIRE(cross_entropy(uniform, {0}).values[0] == Catch::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor confident({1, 2}, {20, -20});
  REQUIRE(cross_entropy(confident, {0}).values[0] == Catch::Approx(0.0).margin(1e-10));

  REQUIRE_THROWS_AS(cross_entropy(uniform, {2}), LabelError);

  for (uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng(seed);
    Tensor logits = rand_tensor({5, 3}, rng, 2.0);
    std::vector<int> targets;
    for (int i = 0; i < 5; ++i) targets.push_back(int(rng.uniform_int(3)));
    auto res = check_against_central_differences(
        {logits}, [&](const std::vector<Tensor>& in) { return cross_entropy(in[0], targets); });
    REQUIRE(res.max_rel_err <= 1e-5);
  }
}

TEST_CASE("backward basics") {
  // f(w) = w^2 at w = 3 -> dw = 6
  ParamStore store;
  Rng rng(1);
  Parameter& w = store.create("w", Tensor({1}, {3.0}));
  Tape tape;
  Pass pass{&tape};
  Tensor wt = use(w, pass);
  Tensor loss = reshape(mul(wt, wt), {1});
  tape.backward(loss);
  REQUIRE(w.grad[0] == Catch::Approx(6.0));

  // loss independent of p -> grad(p) = 0
  Parameter& p = store.create("unused", Tensor({2}, {1.0, 2.0}));
  REQUIRE(p.grad == std::vector<double>{0, 0});

  // non-scalar loss rejected
  Tape t2;
  Pass pass2{&t2};
  Tensor vec = use(p, pass2);
  REQUIRE_THROWS_AS(t2.backward(vec), ContractError);
}

TEST_CASE("backward accumulates across calls and is linear in the loss") {
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    ParamStore store;
    Parameter& w = store.create("w", rand_tensor({3, 3}, rng));
    Tensor x = rand_tensor({2, 3}, rng);

    auto loss_pair = [&](Pass& pass) {
      Tensor wt = use(w, pass);
      Tensor h = matmul(x, wt);
      Tensor l1 = cross_entropy(h, {0, 1});
      Tensor l2 = scalarize(gelu(h), 31);
      return std::make_pair(l1, l2);
    };

    // separate backward passes accumulate
    store.zero_grads();
    {
      Tape tape;
      Pass pass{&tape};
      auto [l1, l2] = loss_pair(pass);
      tape.backward(l1);
      tape.backward(l2);
    }
    std::vector<double> separate = w.grad;

    // single pass on the summed loss
    store.zero_grads();
    {
      Tape tape;
      Pass pass{&tape};
      auto [l1, l2] = loss_pair(pass);
      tape.backward(add(l1, l2));
    }
    for (size_t i = 0; i < separate.size(); ++i)
      REQUIRE(w.grad[i] == Catch::Approx(separate[i]).margin(1e-12));

    // repeated backward without reset doubles the gradient
    store.zero_grads();
    {
      Tape tape;
      Pass pass{&tape};
      auto [l1, l2] = loss_pair(pass);
      tape.backward(l1);
      std::vector<double> once = w.grad;
      tape.backward(l1);
      for (size_t i = 0; i < once.size(); ++i)
        REQUIRE(w.grad[i] == Catch::Approx(2.0 * once[i]).margin(1e-12));
    }
  }
}

TEST_CASE("frozen parameters receive zero gradient") {
  ParamStore store;
  Rng rng(4);
  Parameter& frozen = store.create("frozen", rand_tensor({2, 2}, rng));
  Parameter& live = store.create("live", rand_tensor({2, 2}, rng));
  frozen.trainable = false;
  Tape tape;
  Pass pass{&tape};
  Tensor wf = use(frozen, pass);
  REQUIRE(!wf.tracked());
  Tensor wl = use(live, pass);
  Tensor x({1, 2}, {1.0, 2.0});
  Tensor loss = cross_entropy(matmul(matmul(x, wf), wl), {0});
  tape.backward(loss);
  REQUIRE(frozen.grad == std::vector<double>(4, 0.0));
  double live_norm = live.grad_norm();
  REQUIRE(live_norm > 0.0);
}

TEST_CASE("dropout is identity in eval mode and inverted-scaled in train mode") {
  Rng rng(9);
  Tensor x = rand_tensor({50, 20}, rng);

  Pass eval_pass;
  eval_pass.train = false;
  Tensor same = dropout(x, 0.5, eval_pass);
  REQUIRE(same.values == x.values);

  Pass train_pass;
  train_pass.train = true;
  train_pass.dropout_seed = 123;
  Tensor dropped = dropout(x, 0.5, train_pass);
  int zeros = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    if (dropped.values[size_t(i)] == 0.0)
      ++zeros;
    else
      REQUIRE(dropped.values[size_t(i)] == Catch::Approx(2.0 * x.values[size_t(i)]));
  }
  REQUIRE(zeros > 300);
  REQUIRE(zeros < 700);

  // same (seed, step, call index) replays the same mask
  Pass replay;
  replay.train = true;
  replay.dropout_seed = 123;
  Tensor again = dropout(x, 0.5, replay);
  REQUIRE(again.values == dropped.values);

  // different call index gives a different mask
  Tensor next = dropout(x, 0.5, replay);
  REQUIRE(next.values != dropped.values);
}

TEST_CASE("embedding_lookup gathers rows and scatter-adds gradients") {
  ParamStore store;
  Tensor table({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  Parameter& emb = store.create("emb", table);
  Tape tape;
  Pass pass{&tape};
  Tensor out = embedding_lookup(emb, {2, 0, 2}, pass);
  REQUIRE(out.values == std::vector<double>{20, 21, 0, 1, 20, 21});

  Tensor loss = scalarize(out, 55);
  tape.backward(loss);
  // row 2 looked up twice: gradient must be the sum of both contributions
  Rng wrng(55);
  std::vector<double> w(6);
  for (double& v : w) v = wrng.normal();
  REQUIRE(emb.grad[4] == Catch::Approx(w[0] + w[4]));
  REQUIRE(emb.grad[5] == Catch::Approx(w[1] + w[5]));
  REQUIRE(emb.grad[2] == 0.0);

  Pass p2{&tape};
  REQUIRE_THROWS_AS(embedding_lookup(emb, {4}, p2), DataError);
}

TEST_CASE("forward pass is deterministic with dropout off") {
  Rng rng(77);
  Tensor x = rand_tensor({4, 8}, rng);
  Tensor w = rand_tensor({8, 8}, rng);
  Tensor g = full({8}, 1.0), b = full({8}, 0.0);
  auto run = [&]() { return layer_norm(gelu(matmul(x, w)), g, b); };
  Tensor a = run();
  Tensor c = run();
  REQUIRE(a.values == c.values);
}

TEST_CASE("finite_diff_check on a linear model is exact to roundoff") {
  ParamStore store;
  Rng rng(5);
  Parameter& w = store.create("w", randn({4, 1}, rng));
  Tensor x = randn({3, 4}, rng);
  Tensor target({3, 1}, {1, 2, 3});
  auto loss_fn = [&](Pass& pass) {
    Tensor wt = use(w, pass);
    Tensor pred = matmul(x, wt);
    Tensor diff = add(pred, scale(target, -1.0));
    return scalarize(diff, 1);  // linear functional of a linear map
  };
  FdOptions opt;
  opt.epsilon = 1e-5;
  opt.coords_per_param = 4;
  FdReport rep = finite_diff_check(store, loss_fn, opt);
  REQUIRE(rep.max_rel_err < 1e-8);
  REQUIRE_NOTHROW(throw_if_failed(rep, 1e-8));
}

TEST_CASE("finite_diff_check pinpoints a corrupted backward rule") {
  ParamStore store;
  Rng rng(6);
  Parameter& good = store.create("good", randn({3, 3}, rng));
  Parameter& bad = store.create("bad", randn({3, 3}, rng));
  Tensor x = randn({2, 3}, rng);

  // "bad" flows through an op whose backward rule is deliberately wrong
  auto corrupted_matmul = [](const Tensor& a, const Tensor& b) {
    Tensor out = Tensor({a.dim(0), b.dim(1)});
    kernels::mm_nn(a.values.data(), b.values.data(), out.values.data(), a.dim(0), a.dim(1),
                   b.dim(1));
    Tape* tp = a.tracked() ? a.tape : b.tape;
    if (tp) {
      int aid = a.node, bid = b.node;
      out.tape = tp;
      out.node = tp->push(out.size(), [aid, bid, av = a.values, bv = b.values, m = a.dim(0),
                                       k = a.dim(1), n = b.dim(1)](const std::vector<double>& dout,
                                                                   Tape& t) {
        if (aid >= 0) kernels::mm_nt(dout.data(), bv.data(), t.grad(aid).data(), m, n, k);
        if (bid >= 0) {
          // wrong scaling: off by 2x
          std::vector<double> dsc(dout.size());
          for (size_t i = 0; i < dout.size(); ++i) dsc[i] = 2.0 * dout[i];
          kernels::mm_tn(av.data(), dsc.data(), t.grad(bid).data(), m, k, n);
        }
      });
    }
    return out;
  };

  auto loss_fn = [&](Pass& pass) {
    Tensor g = use(good, pass);
    Tensor b = use(bad, pass);
    Tensor h = matmul(x, g);
    Tensor h2 = corrupted_matmul(h, b);
    return cross_entropy(h2, {0, 1});
  };
  FdOptions opt;
  opt.coords_per_param = 9;
  FdReport rep = finite_diff_check(store, loss_fn, opt);
  REQUIRE(!rep.passed(1e-4));
  REQUIRE(rep.worst_param == "bad");
  for (const auto& e : rep.entries)
    if (e.name == "good") REQUIRE(e.max_rel_err <= 1e-4);
  REQUIRE_THROWS_AS(throw_if_failed(rep, 1e-4), ContractError);
}

TEST_CASE("parameter store rejects duplicate names") {
  ParamStore store;
  store.create("a", Tensor({1}));
  REQUIRE_THROWS_AS(store.create("a", Tensor({1})), ContractError);
}
