#include "octo/sscan.hpp"

#include <cmath>
#include <stdexcept>

namespace octo {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw std::invalid_argument(std::string(what) + " contains non-finite values");
}

}  // namespace

SsmParams init_ssm_params(int channels, int d_state, GateParams::Mode gate_mode, Rng& rng) {
  if (channels < 1 || d_state < 1)
    throw std::invalid_argument("channels and d_state must be >= 1");
  SsmParams p;
  p.channels = channels;
  p.d_state = d_state;
  const auto cn = static_cast<std::size_t>(channels);
  const auto nn = static_cast<std::size_t>(d_state);
  p.a = Tensor({cn, nn});
  p.b = Tensor({cn, nn});
  p.c = Tensor({cn, nn});
  p.log_delta = Tensor({cn});
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_state));
  for (std::size_t i = 0; i < p.a.size(); ++i) {
    p.a[i] = rng.uniform(-1.0, -0.1);
    p.b[i] = rng.normal() * scale;
    p.c[i] = rng.normal() * scale;
  }
  p.gate.mode = gate_mode;
  if (gate_mode == GateParams::Mode::AffineSigmoid) {
    p.gate.weight = Tensor({cn});
    p.gate.bias = Tensor({cn});
    for (std::size_t i = 0; i < cn; ++i) {
      p.gate.weight[i] = 0.1 * rng.normal();
      p.gate.bias[i] = 2.0;
    }
  }
  return p;
}

DiscretizedParams discretize(const SsmParams& p, KernelNorm norm, int num_directions,
                             bool exact_b) {
  if (num_directions < 1) throw std::invalid_argument("num_directions must be >= 1");
  require_finite(p.a, "a");
  require_finite(p.b, "b");
  require_finite(p.log_delta, "log_delta");

  const double inv_k = 1.0 / static_cast<double>(num_directions);
  DiscretizedParams dp;
  dp.a_bar = Tensor(p.a.shape());
  dp.b_bar = Tensor(p.b.shape());
  for (int ch = 0; ch < p.channels; ++ch) {
    const double delta = std::exp(p.log_delta[ch]);
    for (int n = 0; n < p.d_state; ++n) {
      const std::size_t at = static_cast<std::size_t>(ch) * p.d_state + n;
      const double a_eff = (norm == KernelNorm::ContinuousA) ? p.a[at] * inv_k : p.a[at];
      double a_bar = std::exp(delta * a_eff);
      if (norm == KernelNorm::DiscreteA) a_bar *= inv_k;
      dp.a_bar[at] = a_bar;
      if (exact_b) {
        // (exp(delta a_eff) - 1) / a_eff * b, with the delta*b limit at a_eff = 0
        dp.b_bar[at] = (a_eff == 0.0) ? delta * p.b[at]
                                      : (std::exp(delta * a_eff) - 1.0) / a_eff * p.b[at];
      } else {
        dp.b_bar[at] = delta * p.b[at];
      }
    }
  }
  return dp;
}

NormalizedKernel make_normalized_kernel(const SsmParams& p, int directions) {
  if (directions < 1) throw std::invalid_argument("directions must be >= 1");
  NormalizedKernel k;
  k.a_k = p.a;
  const double inv = 1.0 / static_cast<double>(directions);
  for (std::size_t i = 0; i < k.a_k.size(); ++i) k.a_k[i] *= inv;
  k.b_k = p.b;
  k.c_k = p.c;
  k.directions = directions;
  return k;
}

void scanline_recurrence(const DiscretizedParams& dp, const SsmParams& p, int channel,
                         const double* x, const uint8_t* mask, int length, double* y,
                         LineTape* tape) {
  const int n = p.d_state;
  const std::size_t base = static_cast<std::size_t>(channel) * n;
  const double* a_bar = dp.a_bar.data() + base;
  const double* b_bar = dp.b_bar.data() + base;
  const double* c = p.c.data() + base;
  const bool gated = p.gate.mode == GateParams::Mode::AffineSigmoid;
  const double gw = gated ? p.gate.weight[channel] : 0.0;
  const double gb = gated ? p.gate.bias[channel] : 0.0;

  if (tape) {
    tape->u.assign(static_cast<std::size_t>(length) * n, 0.0);
    tape->f.assign(length, 1.0);
  }

  std::vector<double> h(n, 0.0);
  for (int t = 0; t < length; ++t) {
    if (mask && !mask[t]) {
      y[t] = 0.0;
      continue;
    }
    const double xt = x[t];
    const double f = gated ? sigmoid(gw * xt + gb) : 1.0;
    double out = 0.0;
    double* ut = tape ? tape->u.data() + static_cast<std::size_t>(t) * n : nullptr;
    for (int i = 0; i < n; ++i) {
      const double u = a_bar[i] * h[i] + b_bar[i] * xt;
      if (ut) ut[i] = u;
      h[i] = f * u;
      out += c[i] * h[i];
    }
    if (tape) tape->f[t] = f;
    y[t] = out;
  }
}

void scanline_recurrence_backward(const DiscretizedParams& dp, const SsmParams& p,
                                  KernelNorm norm, int num_directions, int channel,
                                  const double* x, const uint8_t* mask, int length,
                                  const LineTape& tape, const double* y_adjoint,
                                  double* x_adjoint, SsmParams& grads) {
  const int n = p.d_state;
  const std::size_t base = static_cast<std::size_t>(channel) * n;
  const double* a_bar = dp.a_bar.data() + base;
  const double* b_bar = dp.b_bar.data() + base;
  const double* c = p.c.data() + base;
  const bool gated = p.gate.mode == GateParams::Mode::AffineSigmoid;
  const double gw = gated ? p.gate.weight[channel] : 0.0;

  // valid prefix; padding is a suffix by construction
  int valid = length;
  if (mask) {
    valid = 0;
    while (valid < length && mask[valid]) ++valid;
  }

  std::vector<double> lambda(n, 0.0);     // dL/dh_t
  std::vector<double> g_a_bar(n, 0.0), g_b_bar(n, 0.0), g_c(n, 0.0);
  double g_gw = 0.0, g_gb = 0.0;

  for (int t = valid - 1; t >= 0; --t) {
    const double ybar = y_adjoint[t];
    const double f = tape.f[t];
    const double* u = tape.u.data() + static_cast<std::size_t>(t) * n;
    const double xt = x[t];

    double du_dot_b = 0.0;   // Σ du_i * b_bar_i
    double df = 0.0;         // dL/df_t
    for (int i = 0; i < n; ++i) {
      const double lam = c[i] * ybar + lambda[i];  // dL/dh_t
      const double du = f * lam;
      df += lam * u[i];
      g_c[i] += ybar * f * u[i];  // h_t = f * u
      // h_{t-1} = f_{t-1} * u_{t-1}
      const double h_prev =
          (t > 0) ? tape.f[t - 1] * tape.u[static_cast<std::size_t>(t - 1) * n + i] : 0.0;
      g_a_bar[i] += du * h_prev;
      g_b_bar[i] += du * xt;
      du_dot_b += du * b_bar[i];
      lambda[i] = du * a_bar[i];  // flows into dL/dh_{t-1}
    }
    double dx = du_dot_b;
    if (gated) {
      const double dsig = f * (1.0 - f);
      const double dg = df * dsig;
      g_gw += dg * xt;
      g_gb += dg;
      dx += dg * gw;
    }
    x_adjoint[t] += dx;
  }

  // chain discretized gradients back to the continuous parameterization
  const double delta = std::exp(p.log_delta[channel]);
  const double inv_k = 1.0 / static_cast<double>(num_directions);
  double g_logdelta = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a_eff = (norm == KernelNorm::ContinuousA) ? p.a[base + i] * inv_k : p.a[base + i];
    const double da_bar_da = delta * a_bar[i] * ((norm == KernelNorm::ContinuousA) ? inv_k : 1.0);
    grads.a[base + i] += g_a_bar[i] * da_bar_da;
    grads.b[base + i] += g_b_bar[i] * delta;
    g_logdelta += g_a_bar[i] * a_bar[i] * delta * a_eff + g_b_bar[i] * delta * p.b[base + i];
    grads.c[base + i] += g_c[i];
  }
  grads.log_delta[channel] += g_logdelta;
  if (gated) {
    grads.gate.weight[channel] += g_gw;
    grads.gate.bias[channel] += g_gb;
  }
}

Tensor direction_scan(const DiscretizedParams& dp, const SsmParams& p, const Tensor& seqs,
                      const uint8_t* mask_plane, std::size_t mask_len, ScanTape* tape) {
  if (seqs.rank() != 4) throw std::invalid_argument("direction slice must be (B, C, n, L)");
  const std::size_t nb = seqs.dim(0), nc = seqs.dim(1), nl = seqs.dim(2), ll = seqs.dim(3);
  if (static_cast<int>(nc) != p.channels)
    throw std::invalid_argument("channel count does not match parameters");
  if (mask_len != nl * ll) throw std::invalid_argument("mask shape does not match sequences");

  Tensor out(seqs.shape());
  if (tape) {
    tape->u = Tensor({nb, nc, nl, ll, static_cast<std::size_t>(p.d_state)});
    tape->f = Tensor({nb, nc, nl, ll});
  }
  LineTape line_tape;
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < nc; ++c) {
      for (std::size_t l = 0; l < nl; ++l) {
        const std::size_t at = ((b * nc + c) * nl + l) * ll;
        scanline_recurrence(dp, p, static_cast<int>(c), seqs.data() + at,
                            mask_plane + l * ll, static_cast<int>(ll), out.data() + at,
                            tape ? &line_tape : nullptr);
        if (tape) {
          std::copy(line_tape.u.begin(), line_tape.u.end(),
                    tape->u.data() + at * p.d_state);
          std::copy(line_tape.f.begin(), line_tape.f.end(), tape->f.data() + at);
        }
      }
    }
  }
  return out;
}

Tensor direction_scan_backward(const DiscretizedParams& dp, const SsmParams& p,
                               KernelNorm norm, int num_directions, const Tensor& seqs,
                               const uint8_t* mask_plane, const ScanTape& tape,
                               const Tensor& y_adjoint, SsmParams& grads) {
  if (!same_shape(seqs, y_adjoint))
    throw std::invalid_argument("adjoint shape does not match sequences");
  const std::size_t nb = seqs.dim(0), nc = seqs.dim(1), nl = seqs.dim(2), ll = seqs.dim(3);
  Tensor x_adjoint(seqs.shape());
  LineTape line_tape;
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < nc; ++c) {
      for (std::size_t l = 0; l < nl; ++l) {
        const std::size_t at = ((b * nc + c) * nl + l) * ll;
        line_tape.u.assign(tape.u.data() + at * p.d_state,
                           tape.u.data() + (at + ll) * p.d_state);
        line_tape.f.assign(tape.f.data() + at, tape.f.data() + at + ll);
        scanline_recurrence_backward(dp, p, norm, num_directions, static_cast<int>(c),
                                     seqs.data() + at, mask_plane + l * ll,
                                     static_cast<int>(ll), line_tape,
                                     y_adjoint.data() + at, x_adjoint.data() + at, grads);
      }
    }
  }
  return x_adjoint;
}

Tensor semiseparable_matrix(const DiscretizedParams& dp, const SsmParams& p, int channel,
                            int length) {
  if (length < 1) throw std::invalid_argument("length must be >= 1");
  if (p.gate.mode != GateParams::Mode::ConstantOne) throw UnsupportedOracleError();
  const int n = p.d_state;
  const std::size_t base = static_cast<std::size_t>(channel) * n;
  const double* a_bar = dp.a_bar.data() + base;
  const double* b_bar = dp.b_bar.data() + base;
  const double* c = p.c.data() + base;

  const auto tt = static_cast<std::size_t>(length);
  Tensor m({tt, tt});
  std::vector<double> v(n);
  for (int i = 0; i < length; ++i) {
    for (int k = 0; k < n; ++k) v[k] = b_bar[k];
    for (int j = i; j < length; ++j) {
      double entry = 0.0;
      for (int k = 0; k < n; ++k) entry += c[k] * v[k];
      m.at(j, i) = entry;
      for (int k = 0; k < n; ++k) v[k] *= a_bar[k];
    }
  }
  return m;
}

Tensor aggregate_operator(const std::vector<Tensor>& matrices) {
  if (matrices.empty()) throw std::invalid_argument("no matrices to aggregate");
  Tensor sum(matrices[0].shape());
  for (const Tensor& m : matrices) {
    if (!same_shape(m, sum)) throw std::invalid_argument("aggregate shapes mismatch");
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += m[i];
  }
  return sum;
}

double spectral_norm(const Tensor& m, int iterations, uint64_t seed) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1))
    throw std::invalid_argument("spectral_norm expects a square matrix");
  const std::size_t n = m.dim(0);
  Rng rng(seed);
  std::vector<double> v(n), w(n);
  for (double& x : v) x = rng.normal();

  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    // w = M v, then v = Mᵀ w, normalized; sigma^2 converges to the top eigenvalue of MᵀM
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += m.at(i, j) * v[j];
      w[i] = s;
    }
    double norm_w = 0.0;
    for (double x : w) norm_w += x * x;
    norm_w = std::sqrt(norm_w);
    if (norm_w == 0.0) return 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += m.at(i, j) * w[i];
      v[j] = s;
    }
    double norm_v = 0.0;
    for (double x : v) norm_v += x * x;
    norm_v = std::sqrt(norm_v);
    if (norm_v == 0.0) return 0.0;
    sigma = norm_v / norm_w;
    for (double& x : v) x /= norm_v;
  }
  return sigma;
}

SsmParams zeros_like(const SsmParams& p) {
  SsmParams g;
  g.channels = p.channels;
  g.d_state = p.d_state;
  g.a = Tensor(p.a.shape());
  g.b = Tensor(p.b.shape());
  g.c = Tensor(p.c.shape());
  g.log_delta = Tensor(p.log_delta.shape());
  g.gate.mode = p.gate.mode;
  if (p.gate.mode == GateParams::Mode::AffineSigmoid) {
    g.gate.weight = Tensor(p.gate.weight.shape());
    g.gate.bias = Tensor(p.gate.bias.shape());
  }
  return g;
}

}  // namespace octo
