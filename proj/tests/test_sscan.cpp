#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "octo/rng.hpp"
#include "octo/sscan.hpp"

using namespace octo;

namespace {

// single-channel params with explicit scalars, d_state = 1
SsmParams scalar_params(double a, double b, double c, double log_delta = 0.0) {
  SsmParams p;
  p.channels = 1;
  p.d_state = 1;
  p.a = Tensor({1, 1}, {a});
  p.b = Tensor({1, 1}, {b});
  p.c = Tensor({1, 1}, {c});
  p.log_delta = Tensor({1}, {log_delta});
  return p;
}

// direct a_bar/b_bar injection for unit fixtures
DiscretizedParams bar_params(double a_bar, double b_bar) {
  DiscretizedParams dp;
  dp.a_bar = Tensor({1, 1}, {a_bar});
  dp.b_bar = Tensor({1, 1}, {b_bar});
  return dp;
}

std::vector<double> run_line(const DiscretizedParams& dp, const SsmParams& p,
                             const std::vector<double>& x, LineTape* tape = nullptr) {
  std::vector<double> y(x.size());
  scanline_recurrence(dp, p, 0, x.data(), nullptr, static_cast<int>(x.size()), y.data(),
                      tape);
  return y;
}

SsmParams random_stable(Rng& rng, int channels, int d_state, GateParams::Mode mode) {
  return init_ssm_params(channels, d_state, mode, rng);
}

double rel_err(double got, double want) {
  return std::fabs(got - want) / std::max({std::fabs(got), std::fabs(want), 1e-4});
}

}  // namespace

TEST_CASE("discretization of the scalar fixtures") {
  {
    const DiscretizedParams dp = discretize(scalar_params(-1.0, 1.0, 1.0), KernelNorm::None, 8);
    CHECK(dp.a_bar[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  }
  {
    const DiscretizedParams dp =
        discretize(scalar_params(-8.0, 1.0, 1.0), KernelNorm::ContinuousA, 8);
    CHECK(dp.a_bar[0] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  }
  {
    const DiscretizedParams dp =
        discretize(scalar_params(-1.0, 2.0, 1.0, std::log(0.5)), KernelNorm::None, 8);
    CHECK(dp.b_bar[0] == doctest::Approx(1.0).epsilon(1e-12));
  }
  SsmParams bad = scalar_params(-1.0, 1.0, 1.0);
  bad.a[0] = std::nan("");
  CHECK_THROWS_AS(discretize(bad, KernelNorm::None, 8), std::invalid_argument);
}

TEST_CASE("exact zero-order-hold input projection") {
  // (e^(delta a) - 1) / a * b against the first-order delta * b
  const SsmParams p = scalar_params(-2.0, 3.0, 1.0);
  const DiscretizedParams first = discretize(p, KernelNorm::None, 8, false);
  const DiscretizedParams exact = discretize(p, KernelNorm::None, 8, true);
  CHECK(first.b_bar[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(exact.b_bar[0] == doctest::Approx((std::exp(-2.0) - 1.0) / -2.0 * 3.0).epsilon(1e-12));
}

TEST_CASE("impulse response of the half-decay recurrence") {
  const SsmParams p = scalar_params(0, 0, 1.0);
  const auto y = run_line(bar_params(0.5, 1.0), p, {1.0, 0.0, 0.0});
  CHECK(y[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y[2] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("zero input stays zero") {
  const SsmParams p = scalar_params(0, 0, 1.0);
  for (double v : run_line(bar_params(0.9, 2.0), p, {0, 0, 0, 0})) CHECK(v == 0.0);
}

TEST_CASE("constant half gate") {
  SsmParams p = scalar_params(0, 0, 1.0);
  p.gate.mode = GateParams::Mode::AffineSigmoid;
  p.gate.weight = Tensor({1}, {0.0});
  p.gate.bias = Tensor({1}, {0.0});  // sigmoid(0) = 0.5
  const auto y = run_line(bar_params(1.0, 1.0), p, {1.0, 0.0});
  CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(y[1] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("masked tail produces zero outputs and no state effect") {
  const SsmParams p = scalar_params(0, 0, 1.0);
  const DiscretizedParams dp = bar_params(0.5, 1.0);
  const std::vector<double> x = {1.0, 0.0, 0.0, 0.0};
  const std::vector<uint8_t> mask = {1, 1, 0, 0};
  std::vector<double> y(4, -7.0);
  scanline_recurrence(dp, p, 0, x.data(), mask.data(), 4, y.data());
  CHECK(y[0] == 1.0);
  CHECK(y[1] == 0.5);
  CHECK(y[2] == 0.0);
  CHECK(y[3] == 0.0);
}

TEST_CASE("lines are independent under direction_scan") {
  Rng rng(5);
  SsmParams p = random_stable(rng, 2, 3, GateParams::Mode::AffineSigmoid);
  const DiscretizedParams dp = discretize(p, KernelNorm::ContinuousA, 8);

  Tensor seqs({1, 2, 2, 4});
  for (std::size_t i = 0; i < seqs.size(); ++i) seqs[i] = rng.normal();
  // identical content on both lines
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 4; ++t) seqs.at(0, c, 1, t) = seqs.at(0, c, 0, t);
  std::vector<uint8_t> mask(2 * 4, 1);

  const Tensor out = direction_scan(dp, p, seqs, mask.data(), mask.size());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 4; ++t)
      CHECK(out.at(0, c, 0, t) == out.at(0, c, 1, t));

  // perturbing line 0 leaves line 1 bit-identical
  Tensor seqs2 = seqs;
  seqs2.at(0, 0, 0, 1) += 3.0;
  const Tensor out2 = direction_scan(dp, p, seqs2, mask.data(), mask.size());
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(out2.at(0, c, 1, t) == out.at(0, c, 1, t));
    }
}

TEST_CASE("concatenating two lines differs from scanning them separately") {
  Rng rng(8);
  const SsmParams p = scalar_params(-0.5, 1.0, 1.0);
  const DiscretizedParams dp = discretize(p, KernelNorm::None, 8);

  std::vector<double> first(5), second(5);
  for (double& v : first) v = rng.normal();
  for (double& v : second) v = rng.normal();
  std::vector<double> joined = first;
  joined.insert(joined.end(), second.begin(), second.end());

  const auto y_first = run_line(dp, p, first);
  const auto y_second = run_line(dp, p, second);
  const auto y_joined = run_line(dp, p, joined);

  for (int t = 0; t < 5; ++t) CHECK(y_joined[t] == doctest::Approx(y_first[t]).epsilon(1e-14));
  // state carries across the junction when lines are not reset
  double diff = 0.0;
  for (int t = 0; t < 5; ++t) diff = std::max(diff, std::fabs(y_joined[5 + t] - y_second[t]));
  CHECK(diff > 1e-6);
}

TEST_CASE("semiseparable lift of the half-decay case") {
  const SsmParams p = scalar_params(0, 0, 1.0);
  const Tensor m = semiseparable_matrix(bar_params(0.5, 1.0), p, 0, 3);
  const double expect[3][3] = {{1, 0, 0}, {0.5, 1, 0}, {0.25, 0.5, 1}};
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(m.at(j, i) == doctest::Approx(expect[j][i]).epsilon(1e-15));
}

TEST_CASE("lift diagonal equals c·b_bar and nilpotent case is diagonal") {
  Rng rng(11);
  const SsmParams p = random_stable(rng, 1, 3, GateParams::Mode::ConstantOne);
  const DiscretizedParams dp = discretize(p, KernelNorm::ContinuousA, 8);
  const Tensor m = semiseparable_matrix(dp, p, 0, 6);
  double cb = 0.0;
  for (int n = 0; n < 3; ++n) cb += p.c[n] * dp.b_bar[n];
  for (std::size_t i = 0; i < 6; ++i) CHECK(m.at(i, i) == doctest::Approx(cb).epsilon(1e-14));

  const Tensor mz = semiseparable_matrix(bar_params(0.0, 2.0), scalar_params(0, 0, 3.0), 0, 4);
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(mz.at(j, i) == (i == j ? 6.0 : 0.0));
}

TEST_CASE("the lift refuses gated parameters") {
  SsmParams p = scalar_params(-1.0, 1.0, 1.0);
  p.gate.mode = GateParams::Mode::AffineSigmoid;
  p.gate.weight = Tensor({1});
  p.gate.bias = Tensor({1});
  CHECK_THROWS_AS(semiseparable_matrix(bar_params(0.5, 1.0), p, 0, 3), UnsupportedOracleError);
}

TEST_CASE("oracle equivalence: recurrence equals the matrix product") {
  Rng rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 4);
    const int len = rng.uniform_int(1, 32);
    const SsmParams p = random_stable(rng, 1, n, GateParams::Mode::ConstantOne);
    const DiscretizedParams dp = discretize(p, KernelNorm::ContinuousA, 8);
    std::vector<double> x(len);
    for (double& v : x) v = rng.normal();
    const auto y = run_line(dp, p, x);
    const Tensor m = semiseparable_matrix(dp, p, 0, len);
    double scale = 0.0, worst = 0.0;
    for (int j = 0; j < len; ++j) {
      double want = 0.0;
      for (int i = 0; i <= j; ++i)
        want += m.at(static_cast<std::size_t>(j), static_cast<std::size_t>(i)) * x[i];
      scale = std::max(scale, std::fabs(want));
      worst = std::max(worst, std::fabs(y[j] - want));
    }
    CHECK(worst <= 1e-10 * std::max(1.0, scale));
  }
}

TEST_CASE("linearity of the constant-gate scan") {
  Rng rng(17);
  const SsmParams p = random_stable(rng, 1, 3, GateParams::Mode::ConstantOne);
  const DiscretizedParams dp = discretize(p, KernelNorm::ContinuousA, 8);
  std::vector<double> x(20), z(20), mix(20);
  const double alpha = 1.7, beta = -0.6;
  for (int i = 0; i < 20; ++i) {
    x[i] = rng.normal();
    z[i] = rng.normal();
    mix[i] = alpha * x[i] + beta * z[i];
  }
  const auto yx = run_line(dp, p, x);
  const auto yz = run_line(dp, p, z);
  const auto ym = run_line(dp, p, mix);
  for (int i = 0; i < 20; ++i)
    CHECK(std::fabs(ym[i] - alpha * yx[i] - beta * yz[i]) <= 1e-12);
}

TEST_CASE("aggregate of eight identity lifts") {
  std::vector<Tensor> eye(8, Tensor({3, 3}));
  for (Tensor& m : eye)
    for (std::size_t i = 0; i < 3; ++i) m.at(i, i) = 1.0;
  const Tensor sum = aggregate_operator(eye);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < 3; ++i) CHECK(sum.at(j, i) == (i == j ? 8.0 : 0.0));
  CHECK_THROWS(aggregate_operator({Tensor({2, 2}), Tensor({3, 3})}));
}

TEST_CASE("normalized kernel satisfies the equilibrium identity") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const SsmParams p = random_stable(rng, 3, 4, GateParams::Mode::ConstantOne);
    const NormalizedKernel k = make_normalized_kernel(p, 8);
    for (std::size_t i = 0; i < p.a.size(); ++i) {
      // pairwise tree sum of eight equal dyadic shares is exact
      const double s2 = k.a_k[i] + k.a_k[i];
      const double s4 = s2 + s2;
      const double s8 = s4 + s4;
      CHECK(s8 == p.a[i]);
      // scaling back by the direction count is exact as well
      CHECK(8.0 * k.a_k[i] == p.a[i]);
    }
    CHECK(bits_equal(k.b_k, p.b));
    CHECK(bits_equal(k.c_k, p.c));
  }
}

TEST_CASE("splitting the discrete transition shrinks the aggregate operator") {
  // dividing a_bar by the direction count keeps the diagonal and shrinks every
  // off-diagonal band, so the aggregate's spectral norm can only drop
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(1, 4);
    const SsmParams p = random_stable(rng, 1, n, GateParams::Mode::ConstantOne);
    const int len = 24;
    const DiscretizedParams plain = discretize(p, KernelNorm::None, 8);
    const DiscretizedParams split = discretize(p, KernelNorm::DiscreteA, 8);
    std::vector<Tensor> plain_lifts(8, semiseparable_matrix(plain, p, 0, len));
    std::vector<Tensor> split_lifts(8, semiseparable_matrix(split, p, 0, len));
    const double rho_plain = spectral_norm(aggregate_operator(plain_lifts));
    const double rho_split = spectral_norm(aggregate_operator(split_lifts));
    CHECK(rho_split <= rho_plain * (1.0 + 1e-9));
  }
}

TEST_CASE("analytic impulse sensitivity matches the unrolled derivative") {
  // d y2 / d x0 = c * a_bar^2 * b_bar = 0.25 for the half-decay fixture
  const SsmParams p = scalar_params(0, 0, 1.0);
  const DiscretizedParams dp = bar_params(0.5, 1.0);
  const std::vector<double> x = {1.0, 0.2, -0.3};
  LineTape tape;
  run_line(dp, p, x, &tape);

  std::vector<double> y_adj = {0.0, 0.0, 1.0};
  std::vector<double> x_adj(3, 0.0);
  SsmParams grads = zeros_like(p);
  scanline_recurrence_backward(dp, p, KernelNorm::None, 8, 0, x.data(), nullptr, 3, tape,
                               y_adj.data(), x_adj.data(), grads);
  CHECK(x_adj[0] == doctest::Approx(0.25).epsilon(1e-14));

  // zero adjoint produces zero gradients
  std::fill(y_adj.begin(), y_adj.end(), 0.0);
  std::fill(x_adj.begin(), x_adj.end(), 0.0);
  SsmParams grads0 = zeros_like(p);
  scanline_recurrence_backward(dp, p, KernelNorm::None, 8, 0, x.data(), nullptr, 3, tape,
                               y_adj.data(), x_adj.data(), grads0);
  for (double v : x_adj) CHECK(v == 0.0);
  CHECK(max_abs(grads0.a) == 0.0);
  CHECK(max_abs(grads0.c) == 0.0);
}

TEST_CASE("backward matches central finite differences") {
  Rng rng(67);
  for (GateParams::Mode mode :
       {GateParams::Mode::ConstantOne, GateParams::Mode::AffineSigmoid}) {
    SsmParams p = random_stable(rng, 2, 3, mode);
    const KernelNorm norm = KernelNorm::ContinuousA;
    const int len = 7;
    Tensor x({1, 2, 1, static_cast<std::size_t>(len)});
    Tensor y_adj(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = rng.normal();
      y_adj[i] = rng.normal();
    }
    std::vector<uint8_t> mask(len, 1);

    const auto loss = [&](SsmParams& q, const Tensor& input) {
      const DiscretizedParams dq = discretize(q, norm, 8);
      const Tensor y = direction_scan(dq, q, input, mask.data(), mask.size());
      double s = 0.0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y_adj[i] * y[i];
      return s;
    };

    const DiscretizedParams dp = discretize(p, norm, 8);
    ScanTape tape;
    direction_scan(dp, p, x, mask.data(), mask.size(), &tape);
    SsmParams grads = zeros_like(p);
    const Tensor x_adj =
        direction_scan_backward(dp, p, norm, 8, x, mask.data(), tape, y_adj, grads);

    const double h = 1e-6;
    double worst = 0.0;
    std::vector<std::pair<Tensor*, Tensor*>> groups = {
        {&p.a, &grads.a}, {&p.b, &grads.b}, {&p.c, &grads.c}, {&p.log_delta, &grads.log_delta}};
    if (mode == GateParams::Mode::AffineSigmoid) {
      groups.push_back({&p.gate.weight, &grads.gate.weight});
      groups.push_back({&p.gate.bias, &grads.gate.bias});
    }
    for (auto [param, grad] : groups) {
      for (std::size_t i = 0; i < param->size(); ++i) {
        const double keep = (*param)[i];
        (*param)[i] = keep + h;
        const double hi = loss(p, x);
        (*param)[i] = keep - h;
        const double lo = loss(p, x);
        (*param)[i] = keep;
        worst = std::max(worst, rel_err((*grad)[i], (hi - lo) / (2 * h)));
      }
    }
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double keep = xp[i];
      xp[i] = keep + h;
      const double hi = loss(p, xp);
      xp[i] = keep - h;
      const double lo = loss(p, xp);
      xp[i] = keep;
      worst = std::max(worst, rel_err(x_adj[i], (hi - lo) / (2 * h)));
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("causality: outputs never depend on later inputs") {
  Rng rng(71);
  const SsmParams p = random_stable(rng, 1, 2, GateParams::Mode::ConstantOne);
  const DiscretizedParams dp = discretize(p, KernelNorm::ContinuousA, 8);
  std::vector<double> x(6);
  for (double& v : x) v = rng.normal();
  const auto base = run_line(dp, p, x);
  for (int s = 0; s < 6; ++s) {
    auto xp = x;
    xp[s] += 0.5;
    const auto bumped = run_line(dp, p, xp);
    for (int t = 0; t < s; ++t) CHECK(bumped[t] == base[t]);
  }
}
