#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "feddpa/rng.hpp"
#include "feddpa/tensor.hpp"

using namespace feddpa;

namespace {

bool close(double a, double b, double tol = 1e-7) {
  return std::abs(a - b) <= tol * (1.0 + std::abs(a) + std::abs(b));
}

// Central-difference derivative of f() with respect to element idx of x.
double numeric_grad(Tensor x, size_t idx, const std::function<double()>& f,
                    double eps = 1e-5) {
  double orig = x.data()[idx];
  x.data()[idx] = orig + eps;
  double up = f();
  x.data()[idx] = orig - eps;
  double down = f();
  x.data()[idx] = orig;
  return (up - down) / (2.0 * eps);
}

// Checks every element of every input's analytic gradient against finite
// differences of the scalar loss produced by `forward`.
void check_grads(std::vector<Tensor> inputs,
                 const std::function<Tensor()>& forward, double tol = 1e-6) {
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = forward();
  backward(loss);
  for (Tensor& t : inputs) {
    REQUIRE(t.has_grad());
    for (size_t i = 0; i < t.numel(); ++i) {
      double fd = numeric_grad(t, i, [&] {
        NoGradGuard ng;
        return forward().item();
      });
      double an = t.grad()[i];
      CHECK_MESSAGE(close(an, fd, tol),
                    "element " << i << ": analytic " << an << " vs fd " << fd);
    }
  }
}

Tensor rand_tensor(std::vector<int64_t> shape, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, 1.0);
}

// Fixed random projection turning a tensor-valued op into a scalar loss.
Tensor weighted_sum(const Tensor& y, uint64_t seed) {
  Rng rng(seed);
  Tensor w = Tensor::randn(y.shape(), rng, 1.0);
  return sum_all(mul(y, w));
}

}  // namespace

TEST_CASE("matmul computes known product") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.at(0, 0) == 19.0);
  CHECK(c.at(0, 1) == 22.0);
  CHECK(c.at(1, 0) == 43.0);
  CHECK(c.at(1, 1) == 50.0);
}

TEST_CASE("matmul_nt matches matmul against manual transpose") {
  Tensor a = rand_tensor({3, 4}, 11);
  Tensor b = rand_tensor({5, 4}, 12);
  Tensor bt = Tensor::zeros({4, 5});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 4; ++j) bt.at(j, i) = b.at(i, j);
  Tensor c1 = matmul_nt(a, b);
  Tensor c2 = matmul(a, bt);
  for (size_t i = 0; i < c1.numel(); ++i)
    CHECK(c1.data()[i] == doctest::Approx(c2.data()[i]).epsilon(1e-12));
}

TEST_CASE("matmul gradients match finite differences") {
  Tensor a = rand_tensor({3, 4}, 21);
  Tensor b = rand_tensor({4, 2}, 22);
  check_grads({a, b}, [&] { return weighted_sum(matmul(a, b), 99); });
}

TEST_CASE("matmul_nt gradients match finite differences") {
  Tensor a = rand_tensor({3, 4}, 31);
  Tensor b = rand_tensor({2, 4}, 32);
  check_grads({a, b}, [&] { return weighted_sum(matmul_nt(a, b), 98); });
}

TEST_CASE("elementwise op gradients match finite differences") {
  Tensor a = rand_tensor({2, 3}, 41);
  Tensor b = rand_tensor({2, 3}, 42);
  check_grads({a, b}, [&] { return weighted_sum(add(a, b), 97); });
  check_grads({a, b}, [&] { return weighted_sum(add_scaled(a, b, -2.5), 96); });
  check_grads({a, b}, [&] { return weighted_sum(mul(a, b), 95); });
}

TEST_CASE("add_bias broadcasts over rows and backpropagates column sums") {
  Tensor x = rand_tensor({4, 3}, 51);
  Rng rng(52);
  Tensor bias = Tensor::randn({3}, rng, 1.0);
  Tensor y = add_bias(x, bias);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(y.at(i, j) ==
            doctest::Approx(x.at(i, j) + bias.data()[static_cast<size_t>(j)]));
  check_grads({x, bias}, [&] { return weighted_sum(add_bias(x, bias), 94); });
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::from({1, 3}, {0, 0, 0});
  Tensor y = softmax_rows(x);
  for (size_t i = 0; i < 3; ++i)
    CHECK(y.data()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and normalized") {
  Tensor x = rand_tensor({3, 5}, 61);
  Tensor y = softmax_rows(x);
  Tensor shifted = x.clone();
  for (double& v : shifted.data()) v += 123.0;
  Tensor y2 = softmax_rows(shifted);
  for (size_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == doctest::Approx(y2.data()[i]).epsilon(1e-9));
  for (int64_t i = 0; i < 3; ++i) {
    double sum = 0.0;
    for (int64_t j = 0; j < 5; ++j) sum += y.at(i, j);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax gradients match finite differences") {
  Tensor x = rand_tensor({3, 4}, 62);
  check_grads({x}, [&] { return weighted_sum(softmax_rows(x), 93); });
}

TEST_CASE("layer norm output is standardized before gain and bias") {
  Tensor x = rand_tensor({4, 8}, 71);
  Tensor gain = Tensor::full({8}, 1.0);
  Tensor bias = Tensor::zeros({8});
  Tensor y = layer_norm_rows(x, gain, bias);
  for (int64_t i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 8; ++j) mean += y.at(i, j);
    mean /= 8.0;
    for (int64_t j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 8.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer norm gradients match finite differences") {
  Tensor x = rand_tensor({3, 6}, 72);
  Tensor gain = rand_tensor({1, 6}, 73);
  Tensor g1 = Tensor::from({6}, {gain.data().begin(), gain.data().end()});
  Tensor bias = rand_tensor({1, 6}, 74);
  Tensor b1 = Tensor::from({6}, {bias.data().begin(), bias.data().end()});
  check_grads({x, g1, b1},
              [&] { return weighted_sum(layer_norm_rows(x, g1, b1), 92); });
}

TEST_CASE("gelu matches erf form and its derivative") {
  Tensor x = Tensor::from({1, 3}, {-1.0, 0.0, 2.0});
  Tensor y = gelu(x);
  CHECK(y.at(0, 1) == 0.0);
  CHECK(y.at(0, 2) ==
        doctest::Approx(0.5 * 2.0 * (1.0 + std::erf(2.0 / std::sqrt(2.0)))));
  Tensor z = rand_tensor({2, 5}, 81);
  check_grads({z}, [&] { return weighted_sum(gelu(z), 91); });
}

TEST_CASE("embedding lookup gathers rows and scatters gradients") {
  Tensor table = rand_tensor({6, 4}, 82);
  std::vector<int> ids{3, 0, 3, 5};
  Tensor y = embedding_lookup(table, ids);
  REQUIRE(y.rows() == 4);
  for (int64_t j = 0; j < 4; ++j) {
    CHECK(y.at(0, j) == table.at(3, j));
    CHECK(y.at(2, j) == table.at(3, j));
  }
  check_grads({table},
              [&] { return weighted_sum(embedding_lookup(table, ids), 90); });
}

TEST_CASE("cross entropy of uniform logits is log of class count") {
  Tensor logits = Tensor::from({1, 2}, {0, 0});
  std::vector<int> targets{0};
  Tensor loss = cross_entropy(logits, targets);
  CHECK(loss.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy vanishes for confident correct logits") {
  Tensor logits = Tensor::from({1, 3}, {50.0, 0.0, 0.0});
  std::vector<int> targets{0};
  CHECK(cross_entropy(logits, targets).item() < 1e-12);
}

TEST_CASE("cross entropy skips ignored rows") {
  Tensor logits = Tensor::from({2, 2}, {0, 0, 100, 0});
  std::vector<int> both{0, kIgnoreTarget};
  std::vector<int> first{0};
  Tensor l2 = cross_entropy(logits, both);
  Tensor l1 = cross_entropy(slice_rows(logits, 0, 1), first);
  CHECK(l2.item() == doctest::Approx(l1.item()).epsilon(1e-12));
  std::vector<int> none{kIgnoreTarget, kIgnoreTarget};
  CHECK_THROWS_AS(cross_entropy(logits, none), ShapeError);
}

TEST_CASE("cross entropy gradients match finite differences") {
  Tensor logits = rand_tensor({4, 5}, 83);
  std::vector<int> targets{1, kIgnoreTarget, 4, 0};
  check_grads({logits}, [&] { return cross_entropy(logits, targets); });
}

TEST_CASE("causal attention ignores future positions") {
  Tensor q = rand_tensor({6, 8}, 84);
  Tensor k = rand_tensor({6, 8}, 85);
  Tensor v = rand_tensor({6, 8}, 86);
  std::vector<Segment> segs{{0, 6}};
  Tensor y1 = causal_attention(q, k, v, segs, 2);
  Tensor k2 = k.clone();
  Tensor v2 = v.clone();
  for (int64_t j = 0; j < 8; ++j) {
    k2.at(5, j) += 3.0;
    v2.at(5, j) -= 2.0;
  }
  Tensor y2 = causal_attention(q, k2, v2, segs, 2);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 8; ++j)
      CHECK(y1.at(i, j) == doctest::Approx(y2.at(i, j)).epsilon(1e-12));
}

TEST_CASE("causal attention treats segments independently") {
  Tensor q = rand_tensor({7, 8}, 87);
  Tensor k = rand_tensor({7, 8}, 88);
  Tensor v = rand_tensor({7, 8}, 89);
  std::vector<Segment> split{{0, 3}, {3, 7}};
  Tensor joint = causal_attention(q, k, v, split, 2);
  Tensor first = causal_attention(slice_rows(q, 0, 3), slice_rows(k, 0, 3),
                                  slice_rows(v, 0, 3),
                                  std::vector<Segment>{{0, 3}}, 2);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 8; ++j)
      CHECK(joint.at(i, j) == doctest::Approx(first.at(i, j)).epsilon(1e-12));
}

TEST_CASE("causal attention gradients match finite differences") {
  Tensor q = rand_tensor({5, 8}, 91);
  Tensor k = rand_tensor({5, 8}, 92);
  Tensor v = rand_tensor({5, 8}, 93);
  std::vector<Segment> segs{{0, 2}, {2, 5}};
  check_grads({q, k, v}, [&] {
    return weighted_sum(causal_attention(q, k, v, segs, 2), 89);
  }, 1e-5);
}

TEST_CASE("causal attention rejects bad segmentations") {
  Tensor q = rand_tensor({4, 8}, 94);
  std::vector<Segment> gap{{0, 2}, {3, 4}};
  CHECK_THROWS_AS(causal_attention(q, q, q, gap, 2), ShapeError);
  std::vector<Segment> shortseg{{0, 3}};
  CHECK_THROWS_AS(causal_attention(q, q, q, shortseg, 2), ShapeError);
  std::vector<Segment> full{{0, 4}};
  CHECK_THROWS_AS(causal_attention(q, q, q, full, 3), ShapeError);
}

TEST_CASE("mean_rows and slice_rows gradients match finite differences") {
  Tensor x = rand_tensor({4, 3}, 95);
  check_grads({x}, [&] { return weighted_sum(mean_rows(x), 88); });
  check_grads({x}, [&] { return weighted_sum(slice_rows(x, 1, 3), 87); });
}

TEST_CASE("gradients accumulate across repeated use") {
  Tensor x = Tensor::from({1}, {4.0}, true);
  Tensor y = add(x, x);
  backward(y);
  CHECK(x.grad()[0] == 2.0);
  Tensor z = add(x, x);
  backward(z);
  CHECK(x.grad()[0] == 4.0);
}

TEST_CASE("diamond-shaped graphs propagate through both paths") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tensor a = mul(x, x);
  Tensor y = add(a, x);
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("sgd on a quadratic contracts geometrically") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  std::vector<Tensor> params{x};
  for (int step = 0; step < 50; ++step) {
    Tensor loss = mul(x, x);
    backward(loss);
    sgd_step(params, 0.1);
  }
  CHECK(x.data()[0] == doctest::Approx(3.0 * std::pow(0.8, 50)).epsilon(1e-10));
}

TEST_CASE("sgd_step requires gradients on every parameter") {
  Tensor x = Tensor::from({1}, {1.0}, true);
  std::vector<Tensor> params{x};
  CHECK_THROWS_AS(sgd_step(params, 0.1), std::logic_error);
}

TEST_CASE("no-grad mode records no history") {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  NoGradGuard ng;
  Tensor y = matmul(x, x);
  CHECK(y.op() == OpKind::kLeaf);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("frozen parents receive no gradient buffers") {
  Tensor x = rand_tensor({2, 3}, 96);
  Tensor w = rand_tensor({3, 2}, 97);
  x.set_requires_grad(true);
  Tensor loss = weighted_sum(matmul(x, w), 86);
  backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("randn is reproducible per seed") {
  Tensor a = rand_tensor({4, 4}, 123);
  Tensor b = rand_tensor({4, 4}, 123);
  Tensor c = rand_tensor({4, 4}, 124);
  bool same = true, diff = false;
  for (size_t i = 0; i < a.numel(); ++i) {
    same = same && a.data()[i] == b.data()[i];
    diff = diff || a.data()[i] != c.data()[i];
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("check_finite flags NaN and infinity") {
  Tensor x = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
  CHECK_NOTHROW(check_finite(x, "x"));
  x.data()[1] = std::nan("");
  CHECK_THROWS_AS(check_finite(x, "x"), NumericError);
  x.data()[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(check_finite(x, "x"), NumericError);
}

TEST_CASE("shape violations are rejected") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  Tensor c = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(add(a, c), ShapeError);
  CHECK_THROWS_AS(backward(a), ShapeError);
  std::vector<int> ids{7};
  CHECK_THROWS_AS(embedding_lookup(c, ids), ShapeError);
}
