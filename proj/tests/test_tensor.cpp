#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "voco/tensor.hpp"

using namespace voco;
using namespace voco::testutil;

TEST_CASE("tensor basics") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
}

TEST_CASE("matmul identity case") {
  Graph g;
  Value eye = g.leaf(Tensor({2, 2}, {1, 0, 0, 1}));
  Value m = g.leaf(Tensor({2, 2}, {3.5, -1.0, 2.0, 7.25}));
  const Tensor& out = g.value(g.matmul(eye, m));
  CHECK(out.data == std::vector<double>{3.5, -1.0, 2.0, 7.25});
}

TEST_CASE("matmul hand arithmetic") {
  Graph g;
  Value a = g.leaf(Tensor({1, 2}, {1, 2}));
  Value b = g.leaf(Tensor({2, 1}, {3, 4}));
  CHECK(g.value(g.matmul(a, b)).data[0] == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(42);
  Tensor a = random_tensor({4, 5}, rng);
  Tensor b = random_tensor({5, 3}, rng);
  Graph g;
  const Tensor& got = g.value(g.matmul(g.leaf(a), g.leaf(b)));
  CHECK(max_abs_diff(got, matmul_triple_loop(a, b)) < 1e-12);
}

TEST_CASE("matmul shape mismatch") {
  Graph g;
  Value a = g.leaf(Tensor::zeros({2, 3}));
  Value b = g.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
}

TEST_CASE("masked softmax symmetric row") {
  // all scores equal, row allows 2 of 4 positions
  Graph g;
  Value s = g.leaf(Tensor({1, 4}, {1.0, 1.0, 1.0, 1.0}));
  BoolGrid mask(1, 4);
  mask.set(0, 1, true);
  mask.set(0, 3, true);
  const Tensor& p = g.value(g.masked_softmax(s, mask));
  CHECK(p.at(0, 0) == 0.0);
  CHECK(p.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.at(0, 2) == 0.0);
  CHECK(p.at(0, 3) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("masked softmax hand arithmetic") {
  Graph g;
  Value s = g.leaf(Tensor({1, 2}, {0.0, std::log(3.0)}));
  BoolGrid mask(1, 2, 1);
  const Tensor& p = g.value(g.masked_softmax(s, mask));
  CHECK(p.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("masked softmax matches additive-mask oracle") {
  Rng rng(7);
  Tensor s = random_tensor({6, 6}, rng, 2.0);
  BoolGrid mask(6, 6);
  for (int i = 0; i < 6; ++i) {
    mask.set(i, i, true);  // keep every row non-empty
    for (int j = 0; j < 6; ++j)
      if (rng.uniform() < 0.5) mask.set(i, j, true);
  }
  Graph g;
  const Tensor& got = g.value(g.masked_softmax(g.leaf(s), mask));
  CHECK(max_abs_diff(got, softmax_additive_mask(s, mask)) < 1e-9);
}

TEST_CASE("masked softmax rows sum to one and excluded entries are exact zeros") {
  Rng rng(11);
  Tensor s = random_tensor({8, 8}, rng, 3.0);
  BoolGrid mask(8, 8);
  for (int i = 0; i < 8; ++i) {
    mask.set(i, 0, true);
    for (int j = 1; j < 8; ++j) mask.set(i, j, rng.uniform() < 0.4);
  }
  Graph g;
  const Tensor& p = g.value(g.masked_softmax(g.leaf(s), mask));
  for (int i = 0; i < 8; ++i) {
    double row = 0.0;
    for (int j = 0; j < 8; ++j) {
      if (!mask.at(i, j)) CHECK(p.at(i, j) == 0.0);
      row += p.at(i, j);
    }
    CHECK(std::abs(row - 1.0) < 1e-9);
  }
}

TEST_CASE("masked softmax empty row: all zeros plus diagnostic, never NaN") {
  Graph g;
  Value s = g.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  BoolGrid mask(2, 3);
  mask.set(0, 1, true);
  SoftmaxDiag diag;
  const Tensor& p = g.value(g.masked_softmax(s, mask, &diag));
  CHECK(diag.empty_rows == 1);
  for (int j = 0; j < 3; ++j) {
    CHECK(p.at(1, j) == 0.0);
    CHECK(std::isfinite(p.at(1, j)));
  }
  CHECK(p.at(0, 1) == 1.0);
}

TEST_CASE("masked softmax with all-true mask equals plain softmax (same code path)") {
  Rng rng(13);
  Tensor s = random_tensor({5, 5}, rng);
  BoolGrid all(5, 5, 1);
  Graph g;
  const Tensor& got = g.value(g.masked_softmax(g.leaf(s), all));
  CHECK(max_abs_diff(got, softmax_additive_mask(s, all)) < 1e-12);
}

TEST_CASE("masked softmax dimension mismatch") {
  Graph g;
  Value s = g.leaf(Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(g.masked_softmax(s, BoolGrid(3, 2, 1)), DimensionError);
}

TEST_CASE("kl divergence identity is zero") {
  Rng rng(3);
  Tensor p = random_tensor({6}, rng);
  Graph g;
  CHECK(g.value(g.kl_divergence(g.leaf(p), g.leaf(p))).data[0] ==
        doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("kl divergence two-point hand case via direct summation") {
  // p = [0, 0] -> (1/2, 1/2); q = [ln 3, 0] -> (3/4, 1/4)
  std::vector<double> p{0.0, 0.0}, q{std::log(3.0), 0.0};
  double expect = kl_direct_sum(p, q);
  CHECK(expect == doctest::Approx(std::log(2.0) - 0.5 * std::log(3.0)).epsilon(1e-12));
  Graph g;
  double got =
      g.value(g.kl_divergence(g.leaf(Tensor({2}, p)), g.leaf(Tensor({2}, q)))).data[0];
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("kl divergence matches direct-summation oracle on random pairs") {
  Rng rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor p = random_tensor({8}, rng, 2.0);
    Tensor q = random_tensor({8}, rng, 2.0);
    Graph g;
    double got = g.value(g.kl_divergence(g.leaf(p), g.leaf(q))).data[0];
    CHECK(std::abs(got - kl_direct_sum(p.data, q.data)) < 1e-10);
    CHECK(got >= -1e-15);  // non-negativity
  }
}

TEST_CASE("kl divergence rejects non-finite input") {
  Graph g;
  Tensor bad({2}, {std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(g.kl_divergence(g.leaf(bad), g.leaf(Tensor({2}, {0, 0}))), NumericError);
}

TEST_CASE("cross entropy uniform logits give ln V") {
  Graph g;
  Value logits = g.leaf(Tensor::zeros({3, 4}));
  double got = g.value(g.cross_entropy(logits, {0, 1, 2}, {1, 1, 1})).data[0];
  CHECK(got == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy approaches zero with confident correct logits") {
  Graph g;
  Tensor t = Tensor::zeros({1, 4});
  t.at(0, 2) = 50.0;
  double got = g.value(g.cross_entropy(g.leaf(t), {2}, {1})).data[0];
  CHECK(got < 1e-20);
}

TEST_CASE("cross entropy matches per-position log-softmax oracle") {
  Rng rng(31);
  Tensor logits = random_tensor({3, 5}, rng, 2.0);
  std::vector<int> targets{4, 0, 2};
  std::vector<uint8_t> mask{1, 0, 1};
  Graph g;
  double got = g.value(g.cross_entropy(g.leaf(logits), targets, mask)).data[0];
  CHECK(got == doctest::Approx(ce_oracle(logits, targets, mask)).epsilon(1e-12));
}

TEST_CASE("cross entropy with everything masked out: defined zero with diagnostic") {
  Graph g;
  LossDiag diag;
  double got =
      g.value(g.cross_entropy(g.leaf(Tensor::zeros({2, 3})), {0, 0}, {0, 0}, &diag)).data[0];
  CHECK(got == 0.0);
  CHECK(diag.all_masked_out);
}

TEST_CASE("cross entropy rejects out-of-vocab targets") {
  Graph g;
  CHECK_THROWS_AS(g.cross_entropy(g.leaf(Tensor::zeros({1, 3})), {3}, {1}), UsageError);
}

TEST_CASE("backward on sum gives all-ones gradient") {
  Graph g;
  Value x = g.leaf(Tensor({2, 2}, {1, 2, 3, 4}), true);
  g.backward(g.sum(x));
  const Tensor* grad = g.grad(x);
  REQUIRE(grad != nullptr);
  for (double v : grad->data) CHECK(v == 1.0);
}

TEST_CASE("backward on scalar product swaps operands") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(3.0), true);
  Value y = g.leaf(Tensor::scalar(-4.5), true);
  g.backward(g.mul(x, y));
  CHECK(g.grad(x)->data[0] == -4.5);
  CHECK(g.grad(y)->data[0] == 3.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  Graph g;
  Value x = g.leaf(Tensor::zeros({2, 2}), true);
  CHECK_THROWS_AS(g.backward(x), UsageError);
}

TEST_CASE("backward with no grad path leaves grads null") {
  Graph g;
  Value x = g.leaf(Tensor::scalar(2.0));  // requires_grad = false
  Value y = g.scale(x, 3.0);
  g.backward(y);
  CHECK(g.grad(x) == nullptr);
}

// ---- gradient fidelity: finite differences at 10 random points per op ----

TEST_CASE("gradient fidelity across all differentiable ops") {
  Rng rng(1234);
  std::vector<std::pair<const char*, FdCase>> cases;

  cases.push_back({"matmul",
                   {{random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.matmul(in[0], in[1]);
                    }}});
  cases.push_back({"add",
                   {{random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.add(in[0], in[1]);
                    }}});
  cases.push_back({"add_row",
                   {{random_tensor({4, 3}, rng), random_tensor({3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.add_row(in[0], in[1]);
                    }}});
  cases.push_back({"mul",
                   {{random_tensor({3, 3}, rng), random_tensor({3, 3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.mul(in[0], in[1]);
                    }}});
  cases.push_back({"scale",
                   {{random_tensor({3, 3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.scale(in[0], -2.5);
                    }}});
  cases.push_back({"gelu",
                   {{random_tensor({4, 4}, rng)},
                    [](Graph& g, const std::vector<Value>& in) { return g.gelu(in[0]); }}});
  cases.push_back({"layernorm",
                   {{random_tensor({4, 6}, rng), random_tensor({6}, rng),
                     random_tensor({6}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.layernorm(in[0], in[1], in[2]);
                    }}});
  cases.push_back({"transpose",
                   {{random_tensor({3, 5}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.transpose(in[0]);
                    }}});
  cases.push_back({"reshape",
                   {{random_tensor({3, 4}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.reshape(in[0], {2, 6});
                    }}});
  cases.push_back({"slice_rows",
                   {{random_tensor({5, 3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.slice_rows(in[0], 1, 4);
                    }}});
  cases.push_back({"slice_cols",
                   {{random_tensor({3, 6}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.slice_cols(in[0], 2, 5);
                    }}});
  cases.push_back({"concat_rows",
                   {{random_tensor({2, 3}, rng), random_tensor({3, 3}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.concat_rows({in[0], in[1]});
                    }}});
  cases.push_back({"concat_cols",
                   {{random_tensor({3, 2}, rng), random_tensor({3, 4}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.concat_cols({in[0], in[1]});
                    }}});
  cases.push_back({"embedding_lookup",
                   {{random_tensor({6, 4}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.embedding_lookup(in[0], {2, 0, 5, 2});
                    }}});
  {
    BoolGrid mask(4, 4);
    Rng mrng(5);
    for (int i = 0; i < 4; ++i) {
      mask.set(i, i, true);
      for (int j = 0; j < 4; ++j)
        if (mrng.uniform() < 0.5) mask.set(i, j, true);
    }
    cases.push_back({"masked_softmax",
                     {{random_tensor({4, 4}, rng)},
                      [mask](Graph& g, const std::vector<Value>& in) {
                        return g.masked_softmax(in[0], mask);
                      }}});
  }
  cases.push_back({"cross_entropy",
                   {{random_tensor({4, 5}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.cross_entropy(in[0], {1, 3, 0, 2}, {1, 0, 1, 1});
                    }}});
  cases.push_back({"kl_divergence",
                   {{random_tensor({6}, rng), random_tensor({6}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.kl_divergence(in[0], in[1]);
                    }}});
  cases.push_back({"kl_rows_mean",
                   {{random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)},
                    [](Graph& g, const std::vector<Value>& in) {
                      return g.kl_rows_mean(in[0], in[1], {1, 0, 1});
                    }}});

  for (auto& [name, c] : cases) {
    double worst = check_gradients(c, 777, 10);
    INFO("op: " << name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("determinism: same seed gives bit-identical draws") {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) {
    CHECK(a.uniform() == b.uniform());
    CHECK(a.normal() == b.normal());
  }
  Rng c(100), d(99);
  bool any_diff = false;
  for (int i = 0; i < 10; ++i) any_diff = any_diff || (c.bits() != d.bits());
  CHECK(any_diff);
}
