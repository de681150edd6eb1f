#pragma once

#include <functional>
#include <vector>

#include "octo/omodule.hpp"

namespace octo {

/// Dense materialization of a linear map on (C, H, W) grids; column p of the
/// per-channel matrix is the flattened response to a unit impulse at pixel p.
struct EffectiveOperator {
  std::vector<Tensor> per_channel;  // each (H·W, H·W)
  int height = 0;
  int width = 0;
};

using MapFn = std::function<FeatureMap(const FeatureMap&)>;

/// Probes the model with unit impulses, one per pixel (all channels share the
/// probe). The model must be linear; a zero-input and a superposition check
/// run first and reject models off by more than 1e-10.
EffectiveOperator materialize_operator(const MapFn& model, int channels, int height,
                                       int width, uint64_t check_seed = 11);

/// Entry (q, p) is true iff pixels q and p share a row, a column, or a
/// diagonal of either family (q = p included).
Tensor expected_support(int height, int width);

/// Entry (q, p) is true iff q and p lie on one line of the direction's family
/// (row family for the horizontal pair, etc.).
Tensor direction_line_membership(int height, int width, Direction d);

struct SupportPattern {
  Tensor pattern;  // (H·W, H·W) of 0/1
  double threshold;
};

/// Binarize: |M[q][p]| > tau.
SupportPattern support_pattern(const Tensor& m, double tau);

/// Sensitivity of the channel-summed output at `center` to every input pixel,
/// aggregated over input channels by absolute-value sum.
struct ErfMap {
  Tensor values;  // (H, W), non-negative
  int center_i = 0;
  int center_j = 0;
};

/// ERF through the analytic encoder backward pass.
ErfMap erf_encoder(const EncoderParams& params, const Ss2dOptions& opt,
                   const FeatureMap& x, int center_i, int center_j,
                   IndexSetCache& index_sets);

/// ERF by central finite differences over every input pixel, for cross-checks.
ErfMap erf_finite_difference(const MapFn& model, const FeatureMap& x, int center_i,
                             int center_j, double step = 1e-6);

/// Mass balance across the eight canonical spokes from the center:
/// 1 - max_k |m_k - 1/8| * 8/7, where m_k is spoke k's share of the total
/// mass. Off-spoke pixels count toward the nearest spoke by angle, ties are
/// split equally; the center pixel splits across all eight.
double isotropy_score(const ErfMap& e);

}  // namespace octo
