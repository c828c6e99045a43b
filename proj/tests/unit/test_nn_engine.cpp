#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "shharm/error.hpp"
#include "shharm/nn/checkpoint.hpp"
#include "shharm/nn/ops.hpp"
#include "shharm/nn/optim.hpp"
#include "support.hpp"

using namespace shharm;
using namespace shharm::nn;

namespace {

std::vector<double> randn(std::size_t n, std::mt19937& gen, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(gen);
  return v;
}

// Direct six-loop reference for one batch element layout [C, D, H, W, B].
std::vector<double> naive_conv(const std::vector<double>& x, int cin, int d, int h, int w, int b,
                               const std::vector<double>& wt, const std::vector<double>& bias, int cout, int pad) {
  const int od = d + 2 * pad - 2, oh = h + 2 * pad - 2, ow = w + 2 * pad - 2;
  std::vector<double> y(static_cast<std::size_t>(cout) * od * oh * ow * b, 0.0);
  auto xi = [&](int c, int z, int yy, int xx, int n) { return (((c * d + z) * h + yy) * w + xx) * b + n; };
  for (int n = 0; n < b; ++n)
    for (int o = 0; o < cout; ++o)
      for (int z = 0; z < od; ++z)
        for (int yy = 0; yy < oh; ++yy)
          for (int xx = 0; xx < ow; ++xx) {
            double acc = bias[o];
            for (int c = 0; c < cin; ++c)
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const int sz = z + kz - pad, sy = yy + ky - pad, sx = xx + kx - pad;
                    if (sz < 0 || sz >= d || sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    acc += wt[(((o * cin + c) * 3 + kz) * 3 + ky) * 3 + kx] * x[xi(c, sz, sy, sx, n)];
                  }
            y[(((o * od + z) * oh + yy) * ow + xx) * b + n] = acc;
          }
  return y;
}

struct TwoLayer {
  Var<double> w1, b1, w2, b2;
  Var<double> loss(const Var<double>& x) const {
    const auto h = relu(conv3d(x, w1, b1, 1));
    const auto y = conv3d(h, w2, b2, 0);
    return mean_square(y);
  }
};

}  // namespace

TEST_CASE("conv3d identity kernel and all-ones sum") {
  std::mt19937 gen(1);
  const auto xv = randn(27 * 2, gen);
  const auto x = Var<double>::constant({1, 3, 3, 3, 2}, xv);
  std::vector<double> k(27, 0.0);
  k[13] = 1.0;
  const auto y = conv3d(x, Var<double>::constant({1, 1, 3, 3, 3}, k), Var<double>::constant({1}, {0.0}), 1);
  CHECK(y.shape() == Shape{1, 3, 3, 3, 2});
  for (std::size_t i = 0; i < xv.size(); ++i) CHECK(y.value()[i] == xv[i]);

  const auto ones = Var<double>::constant({1, 3, 3, 3, 1}, std::vector<double>(27, 1.0));
  const auto s = conv3d(ones, Var<double>::constant({1, 1, 3, 3, 3}, std::vector<double>(27, 1.0)),
                        Var<double>::constant({1}, {0.0}), 0);
  CHECK(s.shape() == Shape{1, 1, 1, 1, 1});
  CHECK(s.item() == 27.0);
}

TEST_CASE("conv3d matches the direct loop reference") {
  std::mt19937 gen(2);
  for (int pad : {0, 1}) {
    const int cin = 3, cout = 4, d = 4, h = 3, w = 5, b = 3;
    const auto xv = randn(static_cast<std::size_t>(cin) * d * h * w * b, gen);
    const auto wv = randn(static_cast<std::size_t>(cout) * cin * 27, gen);
    const auto bv = randn(cout, gen);
    const auto y = conv3d(Var<double>::constant({cin, d, h, w, b}, xv), Var<double>::constant({cout, cin, 3, 3, 3}, wv),
                          Var<double>::constant({cout}, bv), pad);
    const auto ref = naive_conv(xv, cin, d, h, w, b, wv, bv, cout, pad);
    REQUIRE(y.size() == ref.size());
    double err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(y.value()[i] - ref[i]));
    CHECK(err <= 1e-5);

    // Float path against the same reference.
    std::vector<float> xf(xv.begin(), xv.end()), wf(wv.begin(), wv.end()), bf(bv.begin(), bv.end());
    const auto yf = conv3d(Var<float>::constant({cin, d, h, w, b}, xf), Var<float>::constant({cout, cin, 3, 3, 3}, wf),
                           Var<float>::constant({cout}, bf), pad);
    err = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(yf.value()[i] - ref[i]));
    CHECK(err <= 1e-4);
  }
}

TEST_CASE("conv3d is linear in its input without bias") {
  std::mt19937 gen(3);
  const Shape xs{2, 3, 3, 3, 4};
  const auto a = randn(numel(xs), gen), bb = randn(numel(xs), gen);
  const auto w = Var<double>::constant({3, 2, 3, 3, 3}, randn(3 * 2 * 27, gen));
  const auto zero = Var<double>::constant({3}, {0.0, 0.0, 0.0});
  std::vector<double> mix(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) mix[i] = 0.7 * a[i] - 1.3 * bb[i];
  const auto fa = conv3d(Var<double>::constant(xs, a), w, zero, 1);
  const auto fb = conv3d(Var<double>::constant(xs, bb), w, zero, 1);
  const auto fm = conv3d(Var<double>::constant(xs, mix), w, zero, 1);
  for (std::size_t i = 0; i < fm.size(); ++i) CHECK(std::abs(fm.value()[i] - (0.7 * fa.value()[i] - 1.3 * fb.value()[i])) <= 1e-5);
}

TEST_CASE("conv3d rejects channel mismatch") {
  const auto x = Var<double>::zeros({2, 3, 3, 3, 1});
  CHECK_THROWS_AS(conv3d(x, Var<double>::zeros({1, 3, 3, 3, 3}), Var<double>::zeros({1}), 1), ValidationError);
}

TEST_CASE("simple gradients") {
  const auto x = Var<double>::parameter({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto s = sum(x);
  backward(s);
  for (double g : x.grad()) CHECK(g == 1.0);
  CHECK_THROWS_AS(backward(s), ValidationError);
  reset_graph(s);
  CHECK_NOTHROW(backward(s));

  const auto r = Var<double>::parameter({3}, {-1.0, 2.0, 0.0});
  const auto rs = sum(relu(r));
  backward(rs);
  CHECK(r.grad()[0] == 0.0);
  CHECK(r.grad()[1] == 1.0);
  CHECK(r.grad()[2] == 0.0);  // subgradient at 0

  const auto a = Var<double>::parameter({2}, {1.0, 2.0});
  const auto b = Var<double>::parameter({2}, {3.0, 5.0});
  const auto loss = sum(concat<double>({sub(a, b), scale(b, 2.0)}));
  backward(loss);
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[1] == 1.0);

  CHECK_THROWS_AS(backward(x), ValidationError);  // not scalar
  CHECK_THROWS_AS(backward(sum(Var<double>::constant({1}, {1.0}))), ValidationError);
}

TEST_CASE("analytic gradients match central differences") {
  // Central differences are only meaningful away from ReLU kinks, so draw
  // until every hidden pre-activation clears the largest shift h can cause.
  const int cin = 3, hidden = 4, cout = 2, b = 3;
  const double h = 1e-3;
  std::mt19937 gen(4);
  TwoLayer net;
  Var<double> x;
  for (int attempt = 0;; ++attempt) {
    REQUIRE(attempt < 100);
    net = {Var<double>::parameter({hidden, cin, 3, 3, 3}, randn(hidden * cin * 27, gen, 0.3)),
           Var<double>::parameter({hidden}, randn(hidden, gen, 0.1)),
           Var<double>::parameter({cout, hidden, 3, 3, 3}, randn(cout * hidden * 27, gen, 0.3)),
           Var<double>::parameter({cout}, randn(cout, gen, 0.1))};
    x = Var<double>::parameter({cin, 3, 3, 3, b}, randn(cin * 27 * b, gen));
    const auto pre = conv3d(x, net.w1, net.b1, 1);
    double margin = 1e300;
    for (double v : pre.value()) margin = std::min(margin, std::abs(v));
    if (margin > 0.02) break;
  }
  const auto loss = net.loss(x);
  backward(loss);

  std::vector<double> rel;
  for (Var<double> p : {net.w1, net.b1, net.w2, net.b2, x}) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto v = p.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = net.loss(x).item();
      v[i] = orig - h;
      const double down = net.loss(x).item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      rel.push_back(std::abs(numeric - analytic[i]) / std::max(1e-6, std::abs(numeric) + std::abs(analytic[i])));
    }
  }
  std::sort(rel.begin(), rel.end());
  CHECK(rel[static_cast<std::size_t>(0.95 * static_cast<double>(rel.size()))] <= 1e-4);
  CHECK(rel.back() <= 1e-3);
}

TEST_CASE("linear and matmul_const gradients") {
  std::mt19937 gen(5);
  const auto x = Var<double>::parameter({3, 2}, randn(6, gen));
  const auto w = Var<double>::parameter({4, 3}, randn(12, gen));
  const auto bias = Var<double>::parameter({4}, randn(4, gen));
  RowMatrix<double> m = RowMatrix<double>::Random(5, 4);
  const auto loss_fn = [&] { return mean_square(matmul_const(m, linear(x, w, bias))); };
  const auto loss = loss_fn();
  backward(loss);
  for (Var<double> p : {x, w, bias}) {
    const std::vector<double> g(p.grad().begin(), p.grad().end());
    auto v = p.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + 1e-4;
      const double up = loss_fn().item();
      v[i] = orig - 1e-4;
      const double down = loss_fn().item();
      v[i] = orig;
      CHECK((up - down) / 2e-4 == doctest::Approx(g[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("optimizer steps") {
  std::vector<Parameter<double>> p(1);
  p[0] = {"w", {2}, {1.0, -2.0}, {0.5, 0.0}};
  OptimizerState sgd;
  sgd.kind = OptimizerKind::kSgd;
  sgd.learning_rate = 0.1;
  sgd_step<double>(p, sgd);
  CHECK(p[0].value[0] == doctest::Approx(0.95));
  CHECK(p[0].value[1] == -2.0);

  for (double g : {3.0, -1e-4, 250.0}) {
    std::vector<Parameter<double>> q(1);
    q[0] = {"w", {1}, {1.0}, {g}};
    OptimizerState adam;
    adam_step<double>(q, adam);
    CHECK(std::abs(1.0 - q[0].value[0]) == doctest::Approx(0.001).epsilon(1e-3));
    CHECK((1.0 - q[0].value[0]) * g > 0.0);
    CHECK(adam.step == 1);
  }

  // Second step against the textbook recurrences.
  std::vector<Parameter<double>> q(1);
  q[0] = {"w", {1}, {0.5}, {2.0}};
  OptimizerState adam;
  adam_step<double>(q, adam);
  q[0].grad = {-1.0};
  adam_step<double>(q, adam);
  const double m = 0.1 * 0.9 * 2.0 + 0.1 * -1.0, v = 0.001 * 0.999 * 4.0 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double first = 0.5 - 0.001 * 2.0 / (std::sqrt(4.0) + 1e-8);
  CHECK(q[0].value[0] == doctest::Approx(first - 0.001 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-12));

  std::vector<Parameter<double>> z(1);
  z[0] = {"w", {2}, {1.0, 2.0}, {0.0, 0.0}};
  OptimizerState a2, s2;
  s2.kind = OptimizerKind::kSgd;
  adam_step<double>(z, a2);
  sgd_step<double>(z, s2);
  CHECK(z[0].value == std::vector<double>{1.0, 2.0});
}

TEST_CASE("non-finite gradients are rejected without side effects") {
  std::vector<Parameter<float>> p(2);
  p[0] = {"a", {1}, {1.0f}, {0.5f}};
  p[1] = {"b", {1}, {2.0f}, {std::nanf("")}};
  OptimizerState adam;
  CHECK_THROWS_AS(adam_step<float>(p, adam), NumericalError);
  CHECK(p[0].value[0] == 1.0f);
  CHECK(adam.step == 0);
  OptimizerState sgd;
  sgd.kind = OptimizerKind::kSgd;
  p[1].grad[0] = INFINITY;
  CHECK_THROWS_AS(sgd_step<float>(p, sgd), NumericalError);
  CHECK(p[0].value[0] == 1.0f);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = test_support::scratch_dir("ckpt");
  Checkpoint c;
  c.architecture_hash = 0x1234abcdULL;
  c.entries.push_back({"conv.w", {2, 1, 3, 3, 3}, std::vector<float>(54, 0.25f)});
  c.entries.push_back({"conv.b", {2}, {-1.0f, 3.5f}});
  write_checkpoint(dir / "m.ckpt", c);
  const auto back = read_checkpoint(dir / "m.ckpt");
  CHECK(back.architecture_hash == c.architecture_hash);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[1].name == "conv.b");
  CHECK(back.entries[0].shape == c.entries[0].shape);
  CHECK(back.entries[1].values == c.entries[1].values);

  const auto full = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::resize_file(dir / "m.ckpt", full - 3);
  CHECK_THROWS_AS(read_checkpoint(dir / "m.ckpt"), IoError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint at all";
  CHECK_THROWS_AS(read_checkpoint(dir / "junk.ckpt"), IoError);
  CHECK_THROWS_AS(read_checkpoint(dir / "absent.ckpt"), IoError);

  c.entries[1].shape = {3};
  CHECK_THROWS_AS(write_checkpoint(dir / "bad.ckpt", c), ValidationError);
}
