#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "octo/scanlines.hpp"
#include "octo/sscan.hpp"

namespace octo {

/// Per-direction gather of a feature map along scan-lines,
/// shape (B, C, K, n_max, L_max) with masked positions exactly zero.
struct DirectionalSequences {
  Tensor data;
  std::vector<Direction> dirs;
  const ScanIndexSet* index = nullptr;

  std::size_t batch() const { return data.dim(0); }
  std::size_t channels() const { return data.dim(1); }
  std::size_t num_dirs() const { return data.dim(2); }
};

DirectionalSequences o_scan(const FeatureMap& x, const ScanIndexSet& s,
                            std::vector<Direction> dirs = all_directions());

/// Inverse placement: value of direction k at pixel p, shape (B, C, K, H·W).
/// Each (k, p) slot is written exactly once (coverage invariant).
Tensor stack_by_pixel(const DirectionalSequences& seqs);

/// Two pointwise projections with a rectifier between them, scoring each
/// direction at each pixel.
struct AttentionParams {
  Tensor w1;  // (hidden, C)
  Tensor b1;  // (hidden)
  Tensor w2;  // (hidden)
  Tensor b2;  // (1)
  int hidden() const { return static_cast<int>(w1.dim(0)); }
  int channels() const { return static_cast<int>(w1.dim(1)); }
};

/// hidden width is max(C/2, 4)
AttentionParams init_attention_params(int channels, Rng& rng);

struct AttentionCache {
  Tensor pre;     // (B, K, HW, hidden), pre-rectifier
  Tensor scores;  // (B, K, HW)
};

Tensor attention_scores(const Tensor& stacked, const AttentionParams& a,
                        AttentionCache* cache = nullptr);
Tensor softmax_over_directions(const Tensor& scores);

/// Per-pixel softmax distribution over directions, shape (B, K, H·W).
Tensor o_attention(const Tensor& stacked, const AttentionParams& a,
                   AttentionCache* cache = nullptr);

/// Weighted scatter-add of directional outputs back onto the grid:
/// Y(p) = Σ_k w_k(p) · stacked_k(p), weights broadcast across channels.
FeatureMap o_merge(const DirectionalSequences& outs, const Tensor& weights,
                   const ScanIndexSet& s);

/// Fusion weight source for o_ss2d.
struct WeightSpec {
  enum class Kind { Learned, Uniform, OneHot, Fixed };
  Kind kind = Kind::Learned;
  int onehot = 0;  // position within the active direction list
  Tensor fixed;    // (K, H·W), broadcast over batch

  static WeightSpec learned() { return {}; }
  static WeightSpec uniform() { return {Kind::Uniform, 0, {}}; }
  static WeightSpec one_hot(int active_pos) { return {Kind::OneHot, active_pos, {}}; }
  static WeightSpec fixed_weights(Tensor w) { return {Kind::Fixed, 0, std::move(w)}; }
};

struct Ss2dParams {
  std::vector<SsmParams> ssm;  // size 1 (shared kernel) or K (per-direction)
  AttentionParams attn;
  bool per_direction() const { return ssm.size() > 1; }
};

Ss2dParams init_ss2d_params(int channels, int d_state, GateParams::Mode gate_mode,
                            bool per_direction_params, int num_directions, Rng& rng);

struct Ss2dOptions {
  std::vector<Direction> dirs = all_directions();
  KernelNorm norm = KernelNorm::ContinuousA;
  WeightSpec weights = WeightSpec::learned();
  bool exact_b = false;
};

struct Ss2dCache {
  DirectionalSequences seqs;
  std::vector<DiscretizedParams> disc;
  std::vector<ScanTape> tapes;  // one per active direction
  Tensor stacked;               // (B, C, K, HW)
  AttentionCache attn;
  Tensor weights;               // (B, K, HW)
};

/// O-Scan -> per-direction selective scans -> O-Attention -> O-Merge.
FeatureMap o_ss2d(const FeatureMap& x, const Ss2dParams& params, const Ss2dOptions& opt,
                  const ScanIndexSet& s, Ss2dCache* cache = nullptr);

Tensor o_ss2d_backward(const Tensor& grad_out, const Ss2dCache& cache,
                       const Ss2dParams& params, const Ss2dOptions& opt,
                       const ScanIndexSet& s, Ss2dParams& grads);

// ---------------------------------------------------------------------------
// Block pieces.

struct LayerNormParams {
  Tensor gamma;  // (C)
  Tensor beta;   // (C)
};
LayerNormParams init_layernorm_params(int channels);

struct LayerNormCache {
  Tensor inv_std;  // (B, H, W)
  Tensor xhat;     // (B, C, H, W)
};

/// Per-pixel normalization across channels, then scale/shift.
Tensor layernorm(const Tensor& x, const LayerNormParams& p, LayerNormCache* cache = nullptr);
Tensor layernorm_backward(const Tensor& grad, const LayerNormCache& cache,
                          const LayerNormParams& p, LayerNormParams& grads);

struct FfnParams {
  Tensor w1;  // (r·C, C)
  Tensor b1;  // (r·C)
  Tensor w2;  // (C, r·C)
  Tensor b2;  // (C)
};
FfnParams init_ffn_params(int channels, int ratio, Rng& rng);

struct FfnCache {
  Tensor input;  // (B, C, H, W)
  Tensor pre;    // (B, r·C, H, W), pre-rectifier
};

Tensor ffn_forward(const Tensor& x, const FfnParams& p, FfnCache* cache = nullptr);
Tensor ffn_backward(const Tensor& grad, const FfnCache& cache, const FfnParams& p,
                    FfnParams& grads);

struct BlockParams {
  LayerNormParams norm1;
  Ss2dParams ss2d;
  LayerNormParams norm2;
  FfnParams ffn;
};

BlockParams init_block_params(int channels, int d_state, GateParams::Mode gate_mode,
                              bool per_direction_params, int num_directions, int ffn_ratio,
                              Rng& rng);

struct BlockCache {
  LayerNormCache ln1;
  Tensor n1;  // layernorm output feeding the scan branch
  Ss2dCache ss2d;
  Tensor x1;  // first residual sum
  LayerNormCache ln2;
  FfnCache ffn;
};

/// x1 = x + o_ss2d(LN(x)); out = x1 + FFN(LN(x1)).
FeatureMap o_vss_block(const FeatureMap& x, const BlockParams& params, const Ss2dOptions& opt,
                       const ScanIndexSet& s, BlockCache* cache = nullptr);

Tensor o_vss_block_backward(const Tensor& grad_out, const BlockCache& cache,
                            const BlockParams& params, const Ss2dOptions& opt,
                            const ScanIndexSet& s, BlockParams& grads);

// ---------------------------------------------------------------------------
// Hierarchical encoder, toy scale.

struct StageSpec {
  int blocks;
  int channels;
};

struct StageParams {
  Tensor proj_w;  // (C_out, C_in) pointwise, empty when widths already match
  Tensor proj_b;  // (C_out)
  std::vector<BlockParams> blocks;
};

struct EncoderParams {
  int in_channels = 0;
  std::vector<StageParams> stages;
};

EncoderParams init_encoder_params(int in_channels, const std::vector<StageSpec>& stages,
                                  int d_state, GateParams::Mode gate_mode,
                                  bool per_direction_params, int num_directions,
                                  int ffn_ratio, Rng& rng);

/// Scan-line index sets are pure functions of (H, W); computed once and reused.
class IndexSetCache {
 public:
  const ScanIndexSet& get(int height, int width);

 private:
  std::map<std::pair<int, int>, std::unique_ptr<ScanIndexSet>> cache_;
};

struct EncoderCache {
  struct Stage {
    Tensor proj_in;  // input to the pointwise projection
    std::vector<BlockCache> blocks;
  };
  std::vector<Stage> stages;
};

/// Stages of O-VSS blocks; between stages a 2x2 mean-pool halves the grid and
/// a pointwise projection changes the width. H and W must stay divisible.
FeatureMap encoder_forward(const FeatureMap& x, const EncoderParams& params,
                           const Ss2dOptions& opt, IndexSetCache& index_sets,
                           EncoderCache* cache = nullptr);

Tensor encoder_backward(const Tensor& grad_out, const EncoderCache& cache,
                        const EncoderParams& params, const Ss2dOptions& opt,
                        IndexSetCache& index_sets, EncoderParams& grads);

std::size_t param_count(const EncoderParams& params);

// zero-filled gradient holders mirroring the parameter structure
AttentionParams zeros_like(const AttentionParams& p);
Ss2dParams zeros_like(const Ss2dParams& p);
LayerNormParams zeros_like(const LayerNormParams& p);
FfnParams zeros_like(const FfnParams& p);
BlockParams zeros_like(const BlockParams& p);
EncoderParams zeros_like(const EncoderParams& p);

template <typename Fn>
void visit_params(AttentionParams& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w1", p.w1);
  fn(prefix + ".b1", p.b1);
  fn(prefix + ".w2", p.w2);
  fn(prefix + ".b2", p.b2);
}

template <typename Fn>
void visit_params(Ss2dParams& p, const std::string& prefix, Fn&& fn) {
  for (std::size_t i = 0; i < p.ssm.size(); ++i)
    visit_params(p.ssm[i], prefix + ".ssm" + std::to_string(i), fn);
  visit_params(p.attn, prefix + ".attn", fn);
}

template <typename Fn>
void visit_params(LayerNormParams& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

template <typename Fn>
void visit_params(FfnParams& p, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".w1", p.w1);
  fn(prefix + ".b1", p.b1);
  fn(prefix + ".w2", p.w2);
  fn(prefix + ".b2", p.b2);
}

template <typename Fn>
void visit_params(BlockParams& p, const std::string& prefix, Fn&& fn) {
  visit_params(p.norm1, prefix + ".norm1", fn);
  visit_params(p.ss2d, prefix + ".ss2d", fn);
  visit_params(p.norm2, prefix + ".norm2", fn);
  visit_params(p.ffn, prefix + ".ffn", fn);
}

template <typename Fn>
void visit_params(EncoderParams& p, const std::string& prefix, Fn&& fn) {
  for (std::size_t s = 0; s < p.stages.size(); ++s) {
    const std::string sp = prefix + ".stage" + std::to_string(s);
    if (p.stages[s].proj_w.size() > 0) {
      fn(sp + ".proj_w", p.stages[s].proj_w);
      fn(sp + ".proj_b", p.stages[s].proj_b);
    }
    for (std::size_t b = 0; b < p.stages[s].blocks.size(); ++b)
      visit_params(p.stages[s].blocks[b], sp + ".block" + std::to_string(b), fn);
  }
}

}  // namespace octo
