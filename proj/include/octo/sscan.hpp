#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "octo/rng.hpp"
#include "octo/scanlines.hpp"
#include "octo/tensor.hpp"

namespace octo {

/// Multiplicative gate on the state update, per channel.
/// AffineSigmoid computes f_t = sigmoid(w * x_t + b) from the step input.
struct GateParams {
  enum class Mode { ConstantOne, AffineSigmoid };
  Mode mode = Mode::ConstantOne;
  Tensor weight;  // (channels), AffineSigmoid only
  Tensor bias;    // (channels)
};

/// Continuous-time state-space parameters, diagonal transition per channel.
struct SsmParams {
  int channels = 0;
  int d_state = 0;
  Tensor a;          // (channels, d_state), entries < 0 at init for stability
  Tensor b;          // (channels, d_state)
  Tensor c;          // (channels, d_state)
  Tensor log_delta;  // (channels), step size is exp(log_delta)
  GateParams gate;
};

/// Stable default init: a ~ U[-1.0, -0.1], b and c ~ N(0, 1)/sqrt(N),
/// log_delta = 0, gate bias +2 (f near 0.88 at init) with small weights.
SsmParams init_ssm_params(int channels, int d_state, GateParams::Mode gate_mode, Rng& rng);

/// How the transition is split across K directions.
///   None:        a_bar = exp(delta * a)
///   ContinuousA: a_bar = exp(delta * a / K)   (division before discretization)
///   DiscreteA:   a_bar = exp(delta * a) / K   (division after)
enum class KernelNorm { None, ContinuousA, DiscreteA };

struct DiscretizedParams {
  Tensor a_bar;  // (channels, d_state)
  Tensor b_bar;  // (channels, d_state)
};

/// Zero-order-hold discretization. b_bar is the first-order form delta * b;
/// `exact_b` switches to (exp(delta*a_eff) - 1) / a_eff * b for comparison
/// (forward only, not supported by the backward pass).
DiscretizedParams discretize(const SsmParams& p, KernelNorm norm, int num_directions,
                             bool exact_b = false);

/// The direction-shared kernel view: a_k = a / directions, b and c unchanged,
/// so that summing a_k over directions recovers a exactly.
struct NormalizedKernel {
  Tensor a_k;
  Tensor b_k;
  Tensor c_k;
  int directions;
};
NormalizedKernel make_normalized_kernel(const SsmParams& p, int directions);

/// Per-step state snapshot of one scan-line pass, kept for the backward pass.
/// u holds the pre-gate update, f the gate value; h_t = f_t * u_t.
struct LineTape {
  std::vector<double> u;  // (steps * d_state)
  std::vector<double> f;  // (steps)
};

/// Gated recurrence along one scan-line of one channel. The state starts at
/// zero, masked (padded) steps are skipped entirely and their outputs are 0.
///   h_t = f_t * (a_bar ⊙ h_{t-1} + b_bar * x_t),  y_t = c · h_t
void scanline_recurrence(const DiscretizedParams& dp, const SsmParams& p, int channel,
                         const double* x, const uint8_t* mask, int length, double* y,
                         LineTape* tape = nullptr);

/// Reverse-mode pass matching scanline_recurrence. Accumulates into x_adjoint
/// and the parameter gradient holder (continuous parameterization).
void scanline_recurrence_backward(const DiscretizedParams& dp, const SsmParams& p,
                                  KernelNorm norm, int num_directions, int channel,
                                  const double* x, const uint8_t* mask, int length,
                                  const LineTape& tape, const double* y_adjoint,
                                  double* x_adjoint, SsmParams& grads);

/// Tape for a (B, C, n_lines, L_max) scan, laid out like the data tensor.
struct ScanTape {
  Tensor u;  // (B, C, n_lines, L_max, d_state)
  Tensor f;  // (B, C, n_lines, L_max)
};

/// Recurrence applied independently to every (batch, channel, line) triple of
/// one direction slice. `mask_plane` points at (n_lines, L_max) validity
/// flags; state never crosses line boundaries.
Tensor direction_scan(const DiscretizedParams& dp, const SsmParams& p, const Tensor& seqs,
                      const uint8_t* mask_plane, std::size_t mask_len,
                      ScanTape* tape = nullptr);

Tensor direction_scan_backward(const DiscretizedParams& dp, const SsmParams& p,
                               KernelNorm norm, int num_directions, const Tensor& seqs,
                               const uint8_t* mask_plane, const ScanTape& tape,
                               const Tensor& y_adjoint, SsmParams& grads);

class UnsupportedOracleError : public std::invalid_argument {
 public:
  UnsupportedOracleError()
      : std::invalid_argument("semiseparable oracle is defined for the constant-one gate only") {}
};

/// Dense lower-triangular lift of the constant-gate recurrence for one
/// channel: M[j][i] = c · a_bar^(j-i) ⊙ b_bar for j >= i, zero above.
Tensor semiseparable_matrix(const DiscretizedParams& dp, const SsmParams& p, int channel,
                            int length);

/// Elementwise sum of equally shaped per-direction lifts.
Tensor aggregate_operator(const std::vector<Tensor>& matrices);

/// Largest singular value estimated by power iteration on MᵀM.
double spectral_norm(const Tensor& m, int iterations = 200, uint64_t seed = 7);

SsmParams zeros_like(const SsmParams& p);

/// Calls fn(name, tensor) for every trainable tensor, fixed order.
template <typename Fn>
void visit_params(SsmParams& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".a", p.a);
  fn(prefix + ".b", p.b);
  fn(prefix + ".c", p.c);
  fn(prefix + ".log_delta", p.log_delta);
  if (p.gate.mode == GateParams::Mode::AffineSigmoid) {
    fn(prefix + ".gate_w", p.gate.weight);
    fn(prefix + ".gate_b", p.gate.bias);
  }
}

}  // namespace octo
