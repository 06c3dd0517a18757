#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "grad_check.hpp"
#include "taskdiff/autodiff.hpp"

using namespace td;
using td_test::grad_check;

namespace {

constexpr double kGradTol = 1e-3;

// Reduces an arbitrary op output to a scalar through a fixed random
// projection so every output element receives a distinct upstream gradient.
Var project(Tape& t, Var out, uint64_t seed) {
  Rng rng(seed);
  Var w = t.constant(Tensor::randn(rng, t.val(out).shape));
  return t.mean_all(t.mul(out, w));
}

Tensor rt(uint64_t seed, const std::vector<int>& shape, float stddev = 1.0f) {
  Rng rng(seed);
  return Tensor::randn(rng, shape, stddev);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor z = Tensor::zeros({2, 3});
  CHECK(z.size() == 6);
  CHECK(z.rank() == 2);
  Tensor f = Tensor::full({4}, 2.5f);
  CHECK(f.at(3) == 2.5f);
  CHECK(Tensor::scalar(7.0f).item() == 7.0f);
  CHECK_THROWS_AS((void)f.item(), Error);

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {10, 20, 30, 40});
  CHECK(t_add(a, b).v == std::vector<float>{11, 22, 33, 44});
  CHECK(t_sub(b, a).v == std::vector<float>{9, 18, 27, 36});
  CHECK(t_mul(a, a).v == std::vector<float>{1, 4, 9, 16});
  CHECK(t_scale(a, 2.0f).v == std::vector<float>{2, 4, 6, 8});
  CHECK(t_mean(a) == doctest::Approx(2.5));
  CHECK(t_l1(a, b) == doctest::Approx((9 + 18 + 27 + 36) / 4.0));
  CHECK(t_max_abs(t_sub(a, b)) == doctest::Approx(36));
  CHECK(t_equal(a, a));
  CHECK(!t_equal(a, b));
  CHECK_THROWS_AS(t_add(a, Tensor::zeros({3})), Error);
}

TEST_CASE("rng determinism and distribution") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(43);
  CHECK(Rng(42).next_u64() != c.next_u64());
  CHECK(Rng::mix(1, 2) != Rng::mix(2, 1));
  CHECK(Rng::mix(5, 9) == Rng::mix(5, 9));

  // Moment sanity for the Box-Muller normal.
  Rng n(7);
  double sum = 0.0, sq = 0.0;
  const int N = 20000;
  for (int i = 0; i < N; ++i) {
    double x = n.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / N) < 0.03);
  CHECK(std::abs(sq / N - 1.0) < 0.05);

  Rng u(8);
  int lo = 0, hi = 0;
  for (int i = 0; i < 10000; ++i) {
    int x = u.uniform_int(2, 5);
    CHECK(x >= 2);
    CHECK(x <= 5);
    if (x == 2) ++lo;
    if (x == 5) ++hi;
  }
  CHECK(lo > 2000);
  CHECK(hi > 2000);
}

TEST_CASE("grad: elementwise ops") {
  Tensor x = rt(1, {3, 4, 5});
  Tensor y = rt(2, {3, 4, 5});
  CHECK(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.add(v[0], v[1]), 10);
        }) < kGradTol);
  CHECK(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.sub(v[0], v[1]), 11);
        }) < kGradTol);
  CHECK(grad_check({x, y}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.mul(v[0], v[1]), 12);
        }) < kGradTol);
  CHECK(grad_check({x}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.scale(v[0], -1.7f), 13);
        }) < kGradTol);
  CHECK(grad_check({x}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.silu(v[0]), 14);
        }) < kGradTol);
}

TEST_CASE("grad: bias and shape ops") {
  Tensor m = rt(3, {6, 4});
  Tensor bias = rt(4, {4});
  CHECK(grad_check({m, bias}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.add_row_bias(v[0], v[1]), 20);
        }) < kGradTol);

  Tensor img = rt(5, {3, 4, 4});
  Tensor cbias = rt(6, {3});
  CHECK(grad_check({img, cbias}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.add_channel_bias(v[0], v[1]), 21);
        }) < kGradTol);

  Tensor a = rt(7, {2, 4, 4}), b = rt(8, {3, 4, 4});
  CHECK(grad_check({a, b}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.concat_channels(v[0], v[1]), 22);
        }) < kGradTol);

  Tensor ra = rt(9, {3, 5}), rb = rt(10, {2, 5});
  CHECK(grad_check({ra, rb}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.concat_rows(v[0], v[1]), 23);
        }) < kGradTol);

  CHECK(grad_check({img}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.to_tokens(v[0]), 24);
        }) < kGradTol);

  Tensor tok = rt(11, {16, 3});
  CHECK(grad_check({tok}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.from_tokens(v[0], 4, 4), 25);
        }) < kGradTol);

  CHECK(grad_check({img}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.upsample_nearest2x(v[0]), 26);
        }) < kGradTol);
}

TEST_CASE("shape round trips") {
  Tensor img = rt(30, {3, 4, 5});
  Tape t(false);
  Var x = t.input(img, false);
  Var back = t.from_tokens(t.to_tokens(x), 4, 5);
  CHECK(t_equal(t.val(back), img));

  Var up = t.upsample_nearest2x(x);
  CHECK(t.val(up).shape == std::vector<int>{3, 8, 10});
  CHECK(t.val(up).at(0, 7, 9) == img.at(0, 3, 4));
}

TEST_CASE("grad: matmul family") {
  Tensor a = rt(12, {4, 6}), b = rt(13, {6, 5});
  CHECK(grad_check({a, b}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.matmul(v[0], v[1]), 30);
        }) < kGradTol);

  Tensor c = rt(14, {4, 6}), d = rt(15, {7, 6});
  CHECK(grad_check({c, d}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.matmul_nt(v[0], v[1]), 31);
        }) < kGradTol);

  Tape t(false);
  CHECK_THROWS_AS(t.matmul(t.input(a, false), t.input(d, false)), Error);
}

TEST_CASE("grad: softmax and losses") {
  Tensor m = rt(16, {5, 7});
  CHECK(grad_check({m}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.softmax_rows(v[0]), 40);
        }) < kGradTol);

  Tensor a = rt(17, {3, 4}), b = rt(18, {3, 4});
  CHECK(grad_check({a, b}, [](Tape& t, const std::vector<Var>& v) {
          return t.mse_loss(v[0], v[1]);
        }) < kGradTol);
  CHECK(grad_check({a}, [](Tape& t, const std::vector<Var>& v) {
          return t.mean_all(v[0]);
        }) < kGradTol);

  Tensor logits = rt(19, {6, 5});
  std::vector<int> labels{0, 3, 2, 4, 1, 2};
  CHECK(grad_check({logits}, [labels](Tape& t, const std::vector<Var>& v) {
          return t.softmax_cross_entropy(v[0], labels);
        }) < kGradTol);

  // Rows away from zero so the normalization stays smooth.
  Tensor rows = rt(20, {4, 6});
  for (auto& x : rows.v) x += (x >= 0 ? 0.5f : -0.5f);
  CHECK(grad_check({rows}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.l2_normalize_rows(v[0]), 41);
        }) < kGradTol);
}

TEST_CASE("grad: gather_rows accumulates duplicate ids") {
  Tensor table = rt(21, {10, 4});
  std::vector<int> ids{3, 3, 7, 0, 3};
  CHECK(grad_check({table}, [ids](Tape& t, const std::vector<Var>& v) {
          return project(t, t.gather_rows(v[0], ids), 50);
        }) < kGradTol);

  Tape t(true);
  Var tab = t.input(table, true);
  Var g = t.gather_rows(tab, ids);
  t.backward(project(t, g, 51));
  const Tensor& gt = t.grad(tab);
  // Rows never gathered receive exactly zero.
  for (int j = 0; j < 4; ++j) {
    CHECK(gt.at(1, j) == 0.0f);
    CHECK(gt.at(9, j) == 0.0f);
  }
  Tape bad(false);
  CHECK_THROWS_AS(bad.gather_rows(bad.input(table, false), {10}), Error);
}

TEST_CASE("grad: conv2d stride 1 and 2") {
  Tensor x = rt(22, {3, 8, 8});
  Tensor w = rt(23, {4, 3, 3, 3}, 0.5f);
  CHECK(grad_check({x, w}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.conv2d(v[0], v[1], 1), 60);
        }) < kGradTol);
  CHECK(grad_check({x, w}, [](Tape& t, const std::vector<Var>& v) {
          return project(t, t.conv2d(v[0], v[1], 2), 61);
        }) < kGradTol);

  Tape t(false);
  Var xv = t.input(x, false), wv = t.input(w, false);
  CHECK(t.val(t.conv2d(xv, wv, 1)).shape == std::vector<int>{4, 8, 8});
  CHECK(t.val(t.conv2d(xv, wv, 2)).shape == std::vector<int>{4, 4, 4});
  CHECK_THROWS_AS(t.conv2d(xv, wv, 3), Error);
  Tensor wbad = rt(24, {4, 2, 3, 3});
  CHECK_THROWS_AS(t.conv2d(xv, t.input(wbad, false), 1), Error);
}

TEST_CASE("conv2d matches direct summation") {
  Tensor x = rt(25, {2, 5, 5});
  Tensor w = rt(26, {3, 2, 3, 3});
  Tape t(false);
  Tensor y = t.val(t.conv2d(t.input(x, false), t.input(w, false), 1));
  for (int co = 0; co < 3; ++co)
    for (int oy = 0; oy < 5; ++oy)
      for (int ox = 0; ox < 5; ++ox) {
        double s = 0.0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              s += static_cast<double>(w.v[((co * 2 + ci) * 3 + ky) * 3 + kx]) * x.at(ci, iy, ix);
            }
        CHECK(y.at(co, oy, ox) == doctest::Approx(s).epsilon(1e-4));
      }
}

TEST_CASE("grad: group_norm") {
  Tensor x = rt(27, {8, 4, 4});
  Tensor gamma = rt(28, {8}, 0.5f);
  for (auto& g : gamma.v) g += 1.0f;
  Tensor beta = rt(29, {8}, 0.3f);
  for (int groups : {1, 2, 4, 8}) {
    CHECK(grad_check({x, gamma, beta}, [groups](Tape& t, const std::vector<Var>& v) {
            return project(t, t.group_norm(v[0], v[1], v[2], groups), 70 + groups);
          }) < kGradTol);
  }

  // Normalized output has zero mean / unit variance per group before the
  // affine part.
  Tape t(false);
  Var xv = t.input(x, false);
  Var ones = t.constant(Tensor::full({8}, 1.0f));
  Var zeros = t.constant(Tensor::zeros({8}));
  const Tensor& y = t.val(t.group_norm(xv, ones, zeros, 2));
  for (int g = 0; g < 2; ++g) {
    double s = 0.0, sq = 0.0;
    for (int c = g * 4; c < (g + 1) * 4; ++c)
      for (int i = 0; i < 16; ++i) {
        float val = y.v[c * 16 + i];
        s += val;
        sq += val * val;
      }
    CHECK(std::abs(s / 64.0) < 1e-5);
    CHECK(sq / 64.0 == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK_THROWS_AS(t.group_norm(xv, ones, zeros, 3), Error);
}

TEST_CASE("grad: gaussian_blur2d") {
  Tensor x = rt(31, {2, 6, 6});
  for (float sigma : {0.6f, 1.0f, 2.0f}) {
    CHECK(grad_check({x}, [sigma](Tape& t, const std::vector<Var>& v) {
            return project(t, t.gaussian_blur2d(v[0], sigma), 80);
          }) < kGradTol);
  }
  Tape t(false);
  Var xv = t.input(x, false);
  CHECK_THROWS_AS(t.gaussian_blur2d(xv, 0.0f), Error);

  // Blur preserves the mean (kernel sums to one, reflection is a
  // rearrangement) and a constant image is a fixed point.
  const Tensor& y = t.val(t.gaussian_blur2d(xv, 1.0f));
  CHECK(t_mean(y) == doctest::Approx(t_mean(x)).epsilon(1e-4));
  Var c = t.input(Tensor::full({1, 5, 5}, 0.37f), false);
  const Tensor& yc = t.val(t.gaussian_blur2d(c, 1.3f));
  for (float vv : yc.v) CHECK(vv == doctest::Approx(0.37f).epsilon(1e-5));
}

TEST_CASE("grad: attention") {
  Tensor q = rt(32, {5, 8}), k = rt(33, {7, 8}), v = rt(34, {7, 6});
  CHECK(grad_check({q, k, v}, [](Tape& t, const std::vector<Var>& vars) {
          Attention a = t.attention(vars[0], vars[1], vars[2]);
          return project(t, a.out, 90);
        }) < kGradTol);

  Tape t(false);
  Attention a = t.attention(t.input(q, false), t.input(k, false), t.input(v, false));
  const Tensor& p = t.val(a.probs);
  CHECK(p.shape == std::vector<int>{5, 7});
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) {
      CHECK(p.at(i, j) >= 0.0f);
      s += p.at(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("attention probability override") {
  Tensor q = rt(35, {4, 8}), k = rt(36, {6, 8}), v = rt(37, {6, 3});
  Tensor probs = Tensor::zeros({4, 6});
  for (int i = 0; i < 4; ++i) probs.at(i, i) = 1.0f;

  Tape t(false);
  Attention a = t.attention(t.input(q, false), t.input(k, false), t.input(v, false), &probs);
  // One-hot rows select the matching v row exactly.
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) CHECK(t.val(a.out).at(i, j) == v.at(i, j));

  Tape g(true);
  Var qv = g.input(q, true);
  CHECK_THROWS_AS(g.attention(qv, g.input(k, false), g.input(v, false), &probs), Error);

  Tensor bad = Tensor::zeros({4, 5});
  Tape t2(false);
  CHECK_THROWS_AS(
      t2.attention(t2.input(q, false), t2.input(k, false), t2.input(v, false), &bad), Error);
}

TEST_CASE("grad: composite network") {
  Tensor x = rt(40, {2, 8, 8});
  Tensor w1 = rt(41, {4, 2, 3, 3}, 0.4f);
  Tensor gamma = Tensor::full({4}, 1.0f), beta = Tensor::zeros({4});
  Tensor wq = rt(42, {4, 8}, 0.4f), wk = rt(43, {4, 8}, 0.4f), wv = rt(44, {4, 8}, 0.4f);
  Tensor ctx = rt(45, {5, 4});
  Tensor target = rt(46, {64, 8});
  auto build = [&](Tape& t, const std::vector<Var>& v) {
    Var h = t.conv2d(v[0], v[1], 1);
    h = t.group_norm(h, v[2], v[3], 2);
    h = t.silu(h);
    Var tok = t.to_tokens(h);
    Var qm = t.matmul(tok, t.constant(wq));
    Var ctxv = v[4];
    Var km = t.matmul(ctxv, t.constant(wk));
    Var vm = t.matmul(ctxv, t.constant(wv));
    Attention a = t.attention(qm, km, vm);
    return t.mse_loss(a.out, t.constant(target));
  };
  // Deep float32 graphs amplify central-difference rounding noise (the
  // per-op checks above stay at h=1e-3); widen the step and tolerance here.
  CHECK(grad_check({x, w1, gamma, beta, ctx}, build, 5e-3) < 5e-3);
}

TEST_CASE("tape mechanics") {
  Tensor param = rt(50, {3, 3});
  Tape t(true);
  Var p = t.leaf(&param, true);
  Var loss = t.mse_loss(p, t.constant(Tensor::zeros({3, 3})));
  CHECK_THROWS_AS((void)t.grad(p), Error);
  t.backward(loss);
  const Tensor& g = t.grad(p);
  for (int i = 0; i < 9; ++i) CHECK(g.v[i] == doctest::Approx(2.0f / 9.0f * param.v[i]));
  CHECK_THROWS_AS(t.backward(loss), Error);

  // A Var the loss never touched reads back as zero gradient.
  Tape t2(true);
  Var a = t2.input(rt(51, {2, 2}), true);
  Var b = t2.input(rt(52, {2, 2}), true);
  t2.backward(t2.mean_all(a));
  CHECK(t_max_abs(t2.grad(b)) == 0.0f);

  // Same graph twice gives bit-identical gradients.
  auto run = [&] {
    Tape tp(true);
    Var x = tp.input(rt(53, {4, 4}), true);
    Var w = tp.input(rt(54, {4, 4}), true);
    Var l = tp.mse_loss(tp.matmul(x, w), tp.constant(rt(55, {4, 4})));
    tp.backward(l);
    return std::make_pair(tp.grad(x), tp.grad(w));
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  CHECK(t_equal(gx1, gx2));
  CHECK(t_equal(gw1, gw2));

  Tape off(false);
  Var x = off.input(rt(56, {2, 2}), true);
  CHECK_THROWS_AS(off.backward(off.mean_all(x)), Error);
}

TEST_CASE("adam_step") {
  Tensor p({3}, {1.0f, -2.0f, 0.5f});
  Tensor g({3}, {0.1f, -0.2f, 0.0f});
  AdamState st;
  Tensor p0 = p;
  adam_step(p, g, st, 0.01f);
  CHECK(st.step == 1);
  for (int i = 0; i < 3; ++i) {
    // First step closed form: update = lr * g / (|g| + eps).
    float expect = p0.v[i] - 0.01f * g.v[i] / (std::fabs(g.v[i]) + 1e-8f);
    CHECK(p.v[i] == doctest::Approx(expect).epsilon(1e-5));
  }
  Tensor p1 = p;
  adam_step(p, g, st, 0.01f);
  CHECK(st.step == 2);
  for (int i = 0; i < 3; ++i) {
    float m = 0.9f * (0.1f * g.v[i]) + 0.1f * g.v[i];
    float v = 0.999f * (0.001f * g.v[i] * g.v[i]) + 0.001f * g.v[i] * g.v[i];
    float mhat = m / (1.0f - 0.81f);
    float vhat = v / (1.0f - 0.999f * 0.999f);
    float expect = p1.v[i] - 0.01f * mhat / (std::sqrt(vhat) + 1e-8f);
    CHECK(p.v[i] == doctest::Approx(expect).epsilon(1e-5));
  }

  AdamState st2;
  CHECK_THROWS_AS(adam_step(p, g, st2, -1.0f), Error);
  Tensor gbad = Tensor::zeros({4});
  CHECK_THROWS_AS(adam_step(p, gbad, st2, 0.01f), Error);
}
