#include <cmath>
#include <functional>
#include <numeric>

#include "doctest.h"
#include "roadforge/common/error.hpp"
#include "roadforge/common/rng.hpp"
#include "roadforge/diff/checkpoint.hpp"
#include "roadforge/diff/gradcheck.hpp"
#include "roadforge/diff/ops.hpp"
#include "roadforge/diff/tape.hpp"

using namespace roadforge;
using namespace roadforge::diff;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

using OpFn = std::function<Var(Tape&, std::vector<Var>&)>;

// Projects the op output onto a fixed random direction and compares the
// tape's gradient with central differences of that projection.
double max_fd_error(const OpFn& op, std::vector<Parameter>& params, Rng& rng) {
  Tensor direction;
  auto projected = [&](Tape& tape) {
    std::vector<Var> vars;
    for (auto& p : params) vars.push_back(tape.param(p));
    Var out = op(tape, vars);
    if (direction.empty()) direction = random_tensor(out.shape(), rng);
    return sum(mul(out, tape.constant(direction)));
  };
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    tape.backward(projected(tape));
  }
  const double h = 1e-6;
  double worst = 0.0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      Tape tp(false);
      const double fp = projected(tp).value()[0];
      p.value[i] = orig - h;
      Tape tm(false);
      const double fm = projected(tm).value()[0];
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = p.grad[i];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

std::vector<Parameter> make_params(Rng& rng, std::initializer_list<std::vector<int>> shapes, double lo = -1.0,
                                   double hi = 1.0) {
  std::vector<Parameter> ps;
  int i = 0;
  for (const auto& s : shapes) ps.emplace_back("p" + std::to_string(i++), random_tensor(s, rng, lo, hi));
  return ps;
}

}  // namespace

TEST_CASE("forward values") {
  Tape tape;
  SUBCASE("sigmoid(0)") { CHECK(sigmoid(tape.constant(Tensor::scalar(0.0))).value()[0] == 0.5); }
  SUBCASE("softmax of equal logits") {
    auto s = softmax_rows(tape.constant(Tensor({1, 3}, 1.0)));
    for (int j = 0; j < 3; ++j) CHECK(s.value()[j] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }
  SUBCASE("layernorm of a constant row is zero before the affine") {
    auto y = layernorm_rows(tape.constant(Tensor({2, 4}, 3.5)), tape.constant(Tensor({4}, 1.0)),
                            tape.constant(Tensor({4}, 0.0)));
    for (double v : y.value().values()) CHECK(v == 0.0);
  }
  SUBCASE("matmul") {
    auto c = matmul(tape.constant(Tensor({2, 2}, {1, 2, 3, 4})), tape.constant(Tensor({2, 1}, {5, 6})));
    CHECK(c.value() == Tensor({2, 1}, {17, 39}));
  }
  SUBCASE("linear is x W^T + b") {
    auto y = linear(tape.constant(Tensor({1, 2}, {1, 2})), tape.constant(Tensor({3, 2}, {1, 0, 0, 1, 1, 1})),
                    tape.constant(Tensor({3}, {0.5, 0, -1})));
    CHECK(y.value() == Tensor({1, 3}, {1.5, 2, 2}));
  }
  SUBCASE("conv2d by hand") {
    // 3x3 input, 2x2 kernel of ones, no padding -> sums of 2x2 windows.
    auto x = tape.constant(Tensor({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto y = conv2d(x, tape.constant(Tensor({1, 1, 2, 2}, 1.0)), tape.constant(Tensor({1}, 0.0)), 0);
    CHECK(y.value() == Tensor({1, 1, 2, 2}, {12, 16, 24, 28}));
  }
  SUBCASE("maxpool") {
    auto y = maxpool2d(tape.constant(Tensor({1, 1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, -1})));
    CHECK(y.value() == Tensor({1, 1, 1, 2}, {5, 8}));
  }
  SUBCASE("shape errors name the dims") {
    try {
      matmul(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2, 3})));
      FAIL("expected ShapeMismatch");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeMismatch);
      CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
    }
    CHECK_THROWS_AS(add(tape.constant(Tensor({2})), tape.constant(Tensor({3}))), Error);
  }
}

TEST_CASE("backward basics") {
  Parameter x("x", Tensor::scalar(3.0));
  Tape tape;
  Var v = tape.param(x);
  tape.backward(mul(v, v));
  CHECK(x.grad[0] == 6.0);
  SUBCASE("repeated calls accumulate") {
    tape.backward(mul(v, v));
    CHECK(x.grad[0] == 12.0);
  }
  SUBCASE("mse(x, x) has zero gradient") {
    Parameter y("y", Tensor({3}, {1, -2, 5}));
    Tape t2;
    Var vy = t2.param(y);
    t2.backward(mse(vy, vy));
    for (double g : y.grad.values()) CHECK(g == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape t3;
    Parameter z("z", Tensor({2}, 1.0));
    try {
      t3.backward(t3.param(z));
      FAIL("expected NotScalarLoss");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NotScalarLoss);
    }
  }
}

TEST_CASE("every op matches finite differences") {
  Rng rng(1234);
  const double tol = 1e-5;
  auto check = [&](const char* name, const OpFn& op, std::vector<Parameter> params) {
    CAPTURE(name);
    CHECK(max_fd_error(op, params, rng) < tol);
  };
  check("matmul", [](Tape&, auto& v) { return matmul(v[0], v[1]); }, make_params(rng, {{3, 4}, {4, 2}}));
  check("linear", [](Tape&, auto& v) { return linear(v[0], v[1], v[2]); }, make_params(rng, {{3, 4}, {5, 4}, {5}}));
  check("add", [](Tape&, auto& v) { return add(v[0], v[1]); }, make_params(rng, {{2, 3}, {2, 3}}));
  check("sub", [](Tape&, auto& v) { return sub(v[0], v[1]); }, make_params(rng, {{2, 3}, {2, 3}}));
  check("mul", [](Tape&, auto& v) { return mul(v[0], v[1]); }, make_params(rng, {{2, 3}, {2, 3}}));
  check("scale", [](Tape&, auto& v) { return add_scalar(scale(v[0], -2.5), 1.0); }, make_params(rng, {{4}}));
  check("mean", [](Tape&, auto& v) { return mean(v[0]); }, make_params(rng, {{3, 3}}));
  check("concat", [](Tape&, auto& v) { return concat_cols(std::vector<Var>{v[0], v[1]}); },
        make_params(rng, {{2, 3}, {2, 1}}));
  check("gather_rows", [](Tape&, auto& v) { return gather_rows(v[0], {2, 0, 2}); }, make_params(rng, {{3, 2}}));
  check("gather_cols", [](Tape&, auto& v) { return gather_cols(v[0], {1, 1, 0}); }, make_params(rng, {{2, 3}}));
  check("slice_cols", [](Tape&, auto& v) { return slice_cols(v[0], 1, 2); }, make_params(rng, {{2, 4}}));
  check("reshape", [](Tape&, auto& v) { return reshape(v[0], {3, 2}); }, make_params(rng, {{2, 3}}));
  // Keep relu/leaky inputs away from the kink.
  check("relu", [](Tape&, auto& v) { return relu(v[0]); }, make_params(rng, {{20}}, 0.1, 1.0));
  check("relu neg", [](Tape&, auto& v) { return relu(scale(v[0], -1.0)); }, make_params(rng, {{5}}, 0.1, 1.0));
  check("leaky_relu", [](Tape&, auto& v) { return leaky_relu(scale(v[0], -1.0)); }, make_params(rng, {{5}}, 0.1, 1.0));
  check("tanh", [](Tape&, auto& v) { return tanh(v[0]); }, make_params(rng, {{6}}));
  check("sigmoid", [](Tape&, auto& v) { return sigmoid(v[0]); }, make_params(rng, {{6}}));
  check("softmax", [](Tape&, auto& v) { return softmax_rows(v[0]); }, make_params(rng, {{3, 5}}));
  check("layernorm", [](Tape&, auto& v) { return layernorm_rows(v[0], v[1], v[2]); },
        make_params(rng, {{3, 6}, {6}, {6}}));
  check("conv2d pad1", [](Tape&, auto& v) { return conv2d(v[0], v[1], v[2], 1); },
        make_params(rng, {{2, 2, 5, 5}, {3, 2, 3, 3}, {3}}));
  check("conv2d 1x1", [](Tape&, auto& v) { return conv2d(v[0], v[1], v[2], 0); },
        make_params(rng, {{1, 3, 4, 4}, {1, 3, 1, 1}, {1}}));
  {
    // Distinct values so the argmax is stable under the perturbation.
    std::vector<double> vals(2 * 36);
    std::iota(vals.begin(), vals.end(), 0.0);
    rng.shuffle(vals);
    std::vector<Parameter> ps;
    ps.emplace_back("x", Tensor({1, 2, 6, 6}, vals));
    check("maxpool", [](Tape&, auto& v) { return maxpool2d(v[0]); }, std::move(ps));
  }
  {
    BatchNormState state(3);
    check("batchnorm train", [&](Tape&, auto& v) { return batchnorm2d(v[0], v[1], v[2], state, true); },
          make_params(rng, {{2, 3, 3, 3}, {3}, {3}}));
    check("batchnorm eval", [&](Tape&, auto& v) { return batchnorm2d(v[0], v[1], v[2], state, false); },
          make_params(rng, {{2, 3, 3, 3}, {3}, {3}}));
  }
  for (bool exclude : {false, true}) {
    AttentionLayout layout{2, 4, 2, exclude};
    check("attention", [=](Tape&, auto& v) { return causal_attention(v[0], v[1], v[2], layout); },
          make_params(rng, {{8, 6}, {8, 6}, {8, 6}}));
  }
  {
    Tensor target({2, 3}, {1, 0, 1, 0, 0, 1});
    Tensor weights({2, 3}, {0.5, 1, 2, 1, 0, 1});
    check("bce", [&](Tape&, auto& v) { return bce(sigmoid(v[0]), target, weights); }, make_params(rng, {{2, 3}}));
    check("bce_with_logits", [&](Tape&, auto& v) { return bce_with_logits(v[0], target, weights); },
          make_params(rng, {{2, 3}}));
  }
  check("mse", [](Tape&, auto& v) { return mse(v[0], v[1]); }, make_params(rng, {{3, 2}, {3, 2}}));
  {
    Tensor target({3, 2}, {0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
    Tensor w({3}, {1, 0, 0.5});
    check("weighted_sq_error", [&](Tape&, auto& v) { return weighted_sq_error(v[0], target, w); },
          make_params(rng, {{3, 2}}));
  }
}

TEST_CASE("bce matches bce_with_logits") {
  Rng rng(3);
  Tensor logits = random_tensor({4, 3}, rng, -4, 4);
  Tensor target({4, 3});
  for (auto& v : target.values()) v = rng.below(2);
  Tensor w({4, 3}, 1.0);
  Tape tape;
  const double a = bce(sigmoid(tape.constant(logits)), target, w).value()[0];
  const double b = bce_with_logits(tape.constant(logits), target, w).value()[0];
  CHECK(a == doctest::Approx(b).epsilon(1e-10));
  // Direct evaluation of -sum(t log p + (1-t) log(1-p)).
  double expect = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    expect -= target[i] * std::log(p) + (1 - target[i]) * std::log(1 - p);
  }
  CHECK(b == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("activation ranges") {
  Rng rng(5);
  Tape tape;
  auto x = tape.constant(random_tensor({50, 7}, rng, -30, 30));
  auto s = softmax_rows(x).value();
  for (int r = 0; r < 50; ++r) {
    double total = 0;
    for (int c = 0; c < 7; ++c) total += s.at(r, c);
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
  for (double v : sigmoid(x).value().values()) CHECK((v >= 0.0 && v <= 1.0));
  for (double v : tanh(x).value().values()) CHECK((v >= -1.0 && v <= 1.0));
}

TEST_CASE("causal attention ignores the future") {
  Rng rng(21);
  const int steps = 6, d = 8;
  for (bool exclude : {false, true}) {
    AttentionLayout layout{1, steps, 2, exclude};
    Tensor q = random_tensor({steps, d}, rng), k = random_tensor({steps, d}, rng), v = random_tensor({steps, d}, rng);
    Tape tape(false);
    Tensor base = causal_attention(tape.constant(q), tape.constant(k), tape.constant(v), layout).value();
    for (int t = 0; t < steps; ++t) {
      Tensor q2 = q, k2 = k, v2 = v;
      for (int r = t + 1; r < steps; ++r) {
        for (int c = 0; c < d; ++c) {
          q2.at(r, c) += rng.uniform(-5, 5);
          k2.at(r, c) += rng.uniform(-5, 5);
          v2.at(r, c) += rng.uniform(-5, 5);
        }
      }
      Tensor out = causal_attention(tape.constant(q2), tape.constant(k2), tape.constant(v2), layout).value();
      for (int r = 0; r <= t; ++r) {
        for (int c = 0; c < d; ++c) CHECK(out.at(r, c) == base.at(r, c));
      }
    }
    if (exclude) {
      for (int c = 0; c < d; ++c) CHECK(base.at(0, c) == 0.0);
    }
  }
}

TEST_CASE("grad_check") {
  Rng rng(77);
  SUBCASE("linear layer passes at 1e-6") {
    Parameter w("w", random_tensor({3, 4}, rng)), b("b", random_tensor({3}, rng));
    Tensor x = random_tensor({2, 4}, rng);
    std::vector<Parameter*> ps{&w, &b};
    auto report = grad_check([&](Tape& t) { return sum(tanh(linear(t.constant(x), t.param(w), t.param(b)))); }, ps,
                             {.tol = 1e-6});
    CHECK(report.passed);
    CHECK(report.checked == 15);
  }
  SUBCASE("2-layer MLP passes at 1e-5") {
    Parameter w1("w1", random_tensor({6, 4}, rng)), b1("b1", random_tensor({6}, rng));
    Parameter w2("w2", random_tensor({2, 6}, rng)), b2("b2", random_tensor({2}, rng));
    Tensor x = random_tensor({5, 4}, rng), y = random_tensor({5, 2}, rng);
    std::vector<Parameter*> ps{&w1, &b1, &w2, &b2};
    auto report = grad_check(
        [&](Tape& t) {
          Var h = relu(linear(t.constant(x), t.param(w1), t.param(b1)));
          return mse(linear(h, t.param(w2), t.param(b2)), t.constant(y));
        },
        ps);
    CHECK(report.passed);
    CHECK(report.max_rel_error < 1e-5);
  }
  SUBCASE("relu at exactly zero is excluded, not failed") {
    Parameter x("x", Tensor({3}, {0.0, 0.5, -0.5}));
    std::vector<Parameter*> ps{&x};
    auto report = grad_check([&](Tape& t) { return sum(relu(t.param(x))); }, ps);
    CHECK(report.passed);
    REQUIRE(report.excluded.size() == 1);
    CHECK(report.excluded[0].index == 0);
  }
  SUBCASE("a wrong gradient is caught") {
    Parameter x("x", Tensor({2}, {0.3, 0.7}));
    std::vector<Parameter*> ps{&x};
    auto report = grad_check(
        [&](Tape& t) {
          Var v = t.param(x);
          // Forward squares, backward claims the derivative is 1.
          Tensor val = v.value();
          for (auto& e : val.values()) e *= e;
          return sum(t.push(val, {v.id}, [id = v.id](Tape& tp, int self) { tp.grad(id).accumulate(tp.grad(self)); }));
        },
        ps);
    CHECK_FALSE(report.passed);
    CHECK(report.failures.size() == 2);
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(9);
  TensorMap m;
  m["b.weight"] = random_tensor({3, 2}, rng);
  m["a.bias"] = random_tensor({4}, rng);
  m["c.kernel"] = random_tensor({2, 1, 3, 3}, rng);
  const std::string bytes = encode_checkpoint(m);
  CHECK(bytes.substr(0, 8) == "RFCKPT01");
  CHECK(decode_checkpoint(bytes) == m);
  CHECK(encode_checkpoint(decode_checkpoint(bytes)) == bytes);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), Error);
  CHECK_THROWS_AS(decode_checkpoint("RFCKPT02" + bytes.substr(8)), Error);
}
