#include "octo/omodule.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace octo {

namespace {

// (B, C, K, n, L) -> (B, C, n, L) slice of direction position k
Tensor slice_direction(const Tensor& t, std::size_t k) {
  const std::size_t nb = t.dim(0), nc = t.dim(1), nk = t.dim(2), nl = t.dim(3), ll = t.dim(4);
  Tensor out({nb, nc, nl, ll});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const double* src = t.data() + (((b * nc + c) * nk + k) * nl) * ll;
      double* dst = out.data() + ((b * nc + c) * nl) * ll;
      std::copy(src, src + nl * ll, dst);
    }
  return out;
}

void write_direction(Tensor& t, std::size_t k, const Tensor& slice) {
  const std::size_t nb = t.dim(0), nc = t.dim(1), nk = t.dim(2), nl = t.dim(3), ll = t.dim(4);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const double* src = slice.data() + ((b * nc + c) * nl) * ll;
      double* dst = t.data() + (((b * nc + c) * nk + k) * nl) * ll;
      std::copy(src, src + nl * ll, dst);
    }
}

// expands a WeightSpec into a (B, K, HW) tensor of constants
Tensor constant_weights(const WeightSpec& spec, std::size_t nb, std::size_t nk,
                        std::size_t hw) {
  Tensor w({nb, nk, hw});
  switch (spec.kind) {
    case WeightSpec::Kind::Uniform:
      w.fill(1.0 / static_cast<double>(nk));
      break;
    case WeightSpec::Kind::OneHot:
      if (spec.onehot < 0 || static_cast<std::size_t>(spec.onehot) >= nk)
        throw std::invalid_argument("one-hot direction position out of range");
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t p = 0; p < hw; ++p)
          w.at(b, static_cast<std::size_t>(spec.onehot), p) = 1.0;
      break;
    case WeightSpec::Kind::Fixed: {
      if (spec.fixed.rank() != 2 || spec.fixed.dim(0) != nk || spec.fixed.dim(1) != hw)
        throw std::invalid_argument("fixed weights must have shape (K, H*W)");
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t k = 0; k < nk; ++k)
          for (std::size_t p = 0; p < hw; ++p) w.at(b, k, p) = spec.fixed.at(k, p);
      break;
    }
    case WeightSpec::Kind::Learned:
      throw std::logic_error("learned weights are not constants");
  }
  return w;
}

double relu(double x) { return x > 0.0 ? x : 0.0; }

}  // namespace

DirectionalSequences o_scan(const FeatureMap& x, const ScanIndexSet& s,
                            std::vector<Direction> dirs) {
  if (static_cast<int>(x.height()) != s.height() ||
      static_cast<int>(x.width()) != s.width())
    throw std::invalid_argument("index set grid does not match feature map");
  if (dirs.empty()) throw std::invalid_argument("at least one direction required");

  const std::size_t nb = x.batch(), nc = x.channels(), nk = dirs.size();
  const std::size_t nl = static_cast<std::size_t>(s.n_max());
  const std::size_t ll = static_cast<std::size_t>(s.l_max());
  const std::size_t hw = static_cast<std::size_t>(s.pixels());

  DirectionalSequences out;
  out.dirs = std::move(dirs);
  out.index = &s;
  out.data = Tensor({nb, nc, nk, nl, ll});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      const double* flat = x.tensor.data() + (b * nc + c) * hw;
      for (std::size_t k = 0; k < nk; ++k) {
        const int dir = static_cast<int>(out.dirs[k]);
        double* dst = out.data.data() + (((b * nc + c) * nk + k) * nl) * ll;
        for (std::size_t l = 0; l < nl; ++l)
          for (std::size_t t = 0; t < ll; ++t) {
            const int32_t p = s.index_at(dir, static_cast<int>(l), static_cast<int>(t));
            dst[l * ll + t] = p >= 0 ? flat[p] : 0.0;
          }
      }
    }
  return out;
}

Tensor stack_by_pixel(const DirectionalSequences& seqs) {
  const ScanIndexSet& s = *seqs.index;
  const std::size_t nb = seqs.batch(), nc = seqs.channels(), nk = seqs.num_dirs();
  const std::size_t nl = seqs.data.dim(3), ll = seqs.data.dim(4);
  const std::size_t hw = static_cast<std::size_t>(s.pixels());

  Tensor out({nb, nc, nk, hw});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t k = 0; k < nk; ++k) {
        const int dir = static_cast<int>(seqs.dirs[k]);
        const double* src = seqs.data.data() + (((b * nc + c) * nk + k) * nl) * ll;
        double* dst = out.data() + ((b * nc + c) * nk + k) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const int32_t l = s.inverse_line(dir, static_cast<int>(p));
          const int32_t t = s.inverse_pos(dir, static_cast<int>(p));
          dst[p] = src[static_cast<std::size_t>(l) * ll + t];
        }
      }
  return out;
}

AttentionParams init_attention_params(int channels, Rng& rng) {
  const int hidden = std::max(channels / 2, 4);
  AttentionParams a;
  a.w1 = Tensor({static_cast<std::size_t>(hidden), static_cast<std::size_t>(channels)});
  a.b1 = Tensor({static_cast<std::size_t>(hidden)});
  a.w2 = Tensor({static_cast<std::size_t>(hidden)});
  a.b2 = Tensor({1});
  const double s1 = 1.0 / std::sqrt(static_cast<double>(channels));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (std::size_t i = 0; i < a.w1.size(); ++i) a.w1[i] = rng.normal() * s1;
  for (std::size_t i = 0; i < a.w2.size(); ++i) a.w2[i] = rng.normal() * s2;
  return a;
}

Tensor attention_scores(const Tensor& stacked, const AttentionParams& a,
                        AttentionCache* cache) {
  const std::size_t nb = stacked.dim(0), nc = stacked.dim(1), nk = stacked.dim(2),
                    hw = stacked.dim(3);
  if (static_cast<int>(nc) != a.channels())
    throw std::invalid_argument("attention channel width mismatch");
  const int hidden = a.hidden();

  Tensor scores({nb, nk, hw});
  if (cache) cache->pre = Tensor({nb, nk, hw, static_cast<std::size_t>(hidden)});
  std::vector<double> pre(hidden);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t k = 0; k < nk; ++k)
      for (std::size_t p = 0; p < hw; ++p) {
        for (int h = 0; h < hidden; ++h) {
          double acc = a.b1[h];
          const double* w1row = a.w1.data() + static_cast<std::size_t>(h) * nc;
          for (std::size_t c = 0; c < nc; ++c)
            acc += w1row[c] * stacked[((b * nc + c) * nk + k) * hw + p];
          pre[h] = acc;
        }
        double score = a.b2[0];
        for (int h = 0; h < hidden; ++h) score += a.w2[h] * relu(pre[h]);
        scores.at(b, k, p) = score;
        if (cache)
          std::copy(pre.begin(), pre.end(),
                    cache->pre.data() + ((b * nk + k) * hw + p) * hidden);
      }
  if (cache) cache->scores = scores;
  return scores;
}

Tensor softmax_over_directions(const Tensor& scores) {
  const std::size_t nb = scores.dim(0), nk = scores.dim(1), hw = scores.dim(2);
  Tensor w(scores.shape());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t p = 0; p < hw; ++p) {
      double m = scores.at(b, static_cast<std::size_t>(0), p);
      for (std::size_t k = 1; k < nk; ++k) m = std::max(m, scores.at(b, k, p));
      double z = 0.0;
      for (std::size_t k = 0; k < nk; ++k) {
        const double e = std::exp(scores.at(b, k, p) - m);
        w.at(b, k, p) = e;
        z += e;
      }
      for (std::size_t k = 0; k < nk; ++k) w.at(b, k, p) /= z;
    }
  return w;
}

Tensor o_attention(const Tensor& stacked, const AttentionParams& a, AttentionCache* cache) {
  return softmax_over_directions(attention_scores(stacked, a, cache));
}

namespace {

FeatureMap merge_stacked(const Tensor& stacked, const Tensor& weights, std::size_t height,
                         std::size_t width) {
  const std::size_t nb = stacked.dim(0), nc = stacked.dim(1), nk = stacked.dim(2),
                    hw = stacked.dim(3);
  Tensor out({nb, nc, height, width});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      double* dst = out.data() + (b * nc + c) * hw;
      for (std::size_t k = 0; k < nk; ++k) {
        const double* src = stacked.data() + ((b * nc + c) * nk + k) * hw;
        const double* wk = weights.data() + (b * nk + k) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += wk[p] * src[p];
      }
    }
  return FeatureMap(std::move(out));
}

}  // namespace

FeatureMap o_merge(const DirectionalSequences& outs, const Tensor& weights,
                   const ScanIndexSet& s) {
  if (outs.index == nullptr ||
      (outs.index != &s &&
       (outs.index->height() != s.height() || outs.index->width() != s.width())))
    throw std::invalid_argument("index set does not match directional sequences");
  const std::size_t nb = outs.batch(), nk = outs.num_dirs();
  const std::size_t hw = static_cast<std::size_t>(s.pixels());
  if (weights.rank() != 3 || weights.dim(0) != nb || weights.dim(1) != nk ||
      weights.dim(2) != hw)
    throw std::invalid_argument("weights must have shape (B, K, H*W)");
  const Tensor stacked = stack_by_pixel(outs);
  return merge_stacked(stacked, weights, static_cast<std::size_t>(s.height()),
                       static_cast<std::size_t>(s.width()));
}

Ss2dParams init_ss2d_params(int channels, int d_state, GateParams::Mode gate_mode,
                            bool per_direction_params, int num_directions, Rng& rng) {
  Ss2dParams p;
  const int kernels = per_direction_params ? num_directions : 1;
  p.ssm.reserve(kernels);
  for (int k = 0; k < kernels; ++k)
    p.ssm.push_back(init_ssm_params(channels, d_state, gate_mode, rng));
  p.attn = init_attention_params(channels, rng);
  return p;
}

FeatureMap o_ss2d(const FeatureMap& x, const Ss2dParams& params, const Ss2dOptions& opt,
                  const ScanIndexSet& s, Ss2dCache* cache) {
  const std::size_t nk = opt.dirs.size();
  if (params.ssm.empty()) throw std::invalid_argument("no scan parameters");
  if (params.per_direction() && params.ssm.size() != nk)
    throw std::invalid_argument("per-direction parameter count does not match directions");

  DirectionalSequences seqs = o_scan(x, s, opt.dirs);
  const int k_norm = static_cast<int>(nk);

  std::vector<DiscretizedParams> disc;
  disc.reserve(params.ssm.size());
  for (const SsmParams& sp : params.ssm)
    disc.push_back(discretize(sp, opt.norm, k_norm, opt.exact_b));

  Tensor scanned(seqs.data.shape());
  if (cache) cache->tapes.resize(nk);
  const std::size_t mask_len =
      static_cast<std::size_t>(s.n_max()) * static_cast<std::size_t>(s.l_max());
  for (std::size_t k = 0; k < nk; ++k) {
    const std::size_t pi = params.per_direction() ? k : 0;
    const Tensor slice = slice_direction(seqs.data, k);
    Tensor out = direction_scan(disc[pi], params.ssm[pi], slice,
                                s.mask_plane(static_cast<int>(opt.dirs[k])), mask_len,
                                cache ? &cache->tapes[k] : nullptr);
    write_direction(scanned, k, out);
  }

  DirectionalSequences scanned_seqs;
  scanned_seqs.data = std::move(scanned);
  scanned_seqs.dirs = seqs.dirs;
  scanned_seqs.index = &s;
  Tensor stacked = stack_by_pixel(scanned_seqs);

  Tensor weights =
      opt.weights.kind == WeightSpec::Kind::Learned
          ? o_attention(stacked, params.attn, cache ? &cache->attn : nullptr)
          : constant_weights(opt.weights, x.batch(), nk, stacked.dim(3));

  FeatureMap out = merge_stacked(stacked, weights, x.height(), x.width());
  if (cache) {
    cache->seqs = std::move(seqs);
    cache->disc = std::move(disc);
    cache->stacked = std::move(stacked);
    cache->weights = std::move(weights);
  }
  return out;
}

Tensor o_ss2d_backward(const Tensor& grad_out, const Ss2dCache& cache,
                       const Ss2dParams& params, const Ss2dOptions& opt,
                       const ScanIndexSet& s, Ss2dParams& grads) {
  const std::size_t nb = cache.stacked.dim(0), nc = cache.stacked.dim(1),
                    nk = cache.stacked.dim(2), hw = cache.stacked.dim(3);

  // merge backward: out[b,c,p] = Σ_k w[b,k,p] * stacked[b,c,k,p]
  Tensor g_stacked({nb, nc, nk, hw});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t k = 0; k < nk; ++k) {
        const double* g = grad_out.data() + (b * nc + c) * hw;
        const double* wk = cache.weights.data() + (b * nk + k) * hw;
        double* dst = g_stacked.data() + ((b * nc + c) * nk + k) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] = wk[p] * g[p];
      }

  if (opt.weights.kind == WeightSpec::Kind::Learned) {
    Tensor g_weights({nb, nk, hw});
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < nk; ++k) {
        double* dst = g_weights.data() + (b * nk + k) * hw;
        for (std::size_t c = 0; c < nc; ++c) {
          const double* g = grad_out.data() + (b * nc + c) * hw;
          const double* st = cache.stacked.data() + ((b * nc + c) * nk + k) * hw;
          for (std::size_t p = 0; p < hw; ++p) dst[p] += g[p] * st[p];
        }
      }

    // softmax backward: ds_k = w_k (gw_k - Σ_j w_j gw_j)
    Tensor g_scores({nb, nk, hw});
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (std::size_t k = 0; k < nk; ++k)
          dot += cache.weights.at(b, k, p) * g_weights.at(b, k, p);
        for (std::size_t k = 0; k < nk; ++k)
          g_scores.at(b, k, p) =
              cache.weights.at(b, k, p) * (g_weights.at(b, k, p) - dot);
      }

    // scoring network backward, contributes a second path into g_stacked
    const AttentionParams& a = params.attn;
    const int hidden = a.hidden();
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t k = 0; k < nk; ++k)
        for (std::size_t p = 0; p < hw; ++p) {
          const double ds = g_scores.at(b, k, p);
          if (ds == 0.0) continue;
          const double* pre = cache.attn.pre.data() + ((b * nk + k) * hw + p) * hidden;
          grads.attn.b2[0] += ds;
          for (int h = 0; h < hidden; ++h) {
            const double post = relu(pre[h]);
            grads.attn.w2[h] += ds * post;
            if (pre[h] <= 0.0) continue;
            const double dpre = ds * a.w2[h];
            grads.attn.b1[h] += dpre;
            const double* w1row = a.w1.data() + static_cast<std::size_t>(h) * nc;
            double* g_w1row = grads.attn.w1.data() + static_cast<std::size_t>(h) * nc;
            for (std::size_t c = 0; c < nc; ++c) {
              const std::size_t at = ((b * nc + c) * nk + k) * hw + p;
              g_w1row[c] += dpre * cache.stacked[at];
              g_stacked[at] += dpre * w1row[c];
            }
          }
        }
  }

  // stack backward: route per-pixel grads back to (line, t) slots
  const std::size_t nl = cache.seqs.data.dim(3), ll = cache.seqs.data.dim(4);
  Tensor g_scanned({nb, nc, nk, nl, ll});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t k = 0; k < nk; ++k) {
        const int dir = static_cast<int>(opt.dirs[k]);
        const double* src = g_stacked.data() + ((b * nc + c) * nk + k) * hw;
        double* dst = g_scanned.data() + (((b * nc + c) * nk + k) * nl) * ll;
        for (std::size_t p = 0; p < hw; ++p) {
          const int32_t l = s.inverse_line(dir, static_cast<int>(p));
          const int32_t t = s.inverse_pos(dir, static_cast<int>(p));
          dst[static_cast<std::size_t>(l) * ll + t] = src[p];
        }
      }

  // per-direction scan backward
  Tensor g_seqs({nb, nc, nk, nl, ll});
  const int k_norm = static_cast<int>(nk);
  for (std::size_t k = 0; k < nk; ++k) {
    const std::size_t pi = params.per_direction() ? k : 0;
    const Tensor seq_slice = slice_direction(cache.seqs.data, k);
    const Tensor adj_slice = slice_direction(g_scanned, k);
    Tensor g_slice = direction_scan_backward(
        cache.disc[pi], params.ssm[pi], opt.norm, k_norm, seq_slice,
        s.mask_plane(static_cast<int>(opt.dirs[k])), cache.tapes[k], adj_slice,
        grads.ssm[pi]);
    write_direction(g_seqs, k, g_slice);
  }

  // gather backward: scatter-add into the grid, direction order fixed
  Tensor g_x({nb, nc, static_cast<std::size_t>(s.height()),
              static_cast<std::size_t>(s.width())});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c) {
      double* dst = g_x.data() + (b * nc + c) * hw;
      for (std::size_t k = 0; k < nk; ++k) {
        const int dir = static_cast<int>(opt.dirs[k]);
        const double* src = g_seqs.data() + (((b * nc + c) * nk + k) * nl) * ll;
        for (std::size_t l = 0; l < nl; ++l)
          for (std::size_t t = 0; t < ll; ++t) {
            const int32_t p = s.index_at(dir, static_cast<int>(l), static_cast<int>(t));
            if (p >= 0) dst[p] += src[l * ll + t];
          }
      }
    }
  return g_x;
}

LayerNormParams init_layernorm_params(int channels) {
  LayerNormParams p;
  p.gamma = Tensor::full({static_cast<std::size_t>(channels)}, 1.0);
  p.beta = Tensor({static_cast<std::size_t>(channels)});
  return p;
}

namespace {
constexpr double kLnEps = 1e-5;
}

Tensor layernorm(const Tensor& x, const LayerNormParams& p, LayerNormCache* cache) {
  const std::size_t nb = x.dim(0), nc = x.dim(1), nh = x.dim(2), nw = x.dim(3);
  if (p.gamma.size() != nc) throw std::invalid_argument("layernorm channel mismatch");
  const std::size_t hw = nh * nw;
  Tensor out(x.shape());
  if (cache) {
    cache->inv_std = Tensor({nb, nh, nw});
    cache->xhat = Tensor(x.shape());
  }
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t px = 0; px < hw; ++px) {
      double mean = 0.0;
      for (std::size_t c = 0; c < nc; ++c) mean += x[(b * nc + c) * hw + px];
      mean /= static_cast<double>(nc);
      double var = 0.0;
      for (std::size_t c = 0; c < nc; ++c) {
        const double d = x[(b * nc + c) * hw + px] - mean;
        var += d * d;
      }
      var /= static_cast<double>(nc);
      const double inv_std = 1.0 / std::sqrt(var + kLnEps);
      if (cache) cache->inv_std[b * hw + px] = inv_std;
      for (std::size_t c = 0; c < nc; ++c) {
        const double xh = (x[(b * nc + c) * hw + px] - mean) * inv_std;
        if (cache) cache->xhat[(b * nc + c) * hw + px] = xh;
        out[(b * nc + c) * hw + px] = p.gamma[c] * xh + p.beta[c];
      }
    }
  return out;
}

Tensor layernorm_backward(const Tensor& grad, const LayerNormCache& cache,
                          const LayerNormParams& p, LayerNormParams& grads) {
  const std::size_t nb = grad.dim(0), nc = grad.dim(1), nh = grad.dim(2), nw = grad.dim(3);
  const std::size_t hw = nh * nw;
  Tensor g_x(grad.shape());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t px = 0; px < hw; ++px) {
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t at = (b * nc + c) * hw + px;
        const double g = grad[at];
        const double xh = cache.xhat[at];
        grads.beta[c] += g;
        grads.gamma[c] += g * xh;
        const double dxh = g * p.gamma[c];
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xh;
      }
      mean_dxhat /= static_cast<double>(nc);
      mean_dxhat_xhat /= static_cast<double>(nc);
      const double inv_std = cache.inv_std[b * hw + px];
      for (std::size_t c = 0; c < nc; ++c) {
        const std::size_t at = (b * nc + c) * hw + px;
        const double dxh = grad[at] * p.gamma[c];
        g_x[at] = inv_std * (dxh - mean_dxhat - cache.xhat[at] * mean_dxhat_xhat);
      }
    }
  return g_x;
}

FfnParams init_ffn_params(int channels, int ratio, Rng& rng) {
  const std::size_t c = static_cast<std::size_t>(channels);
  const std::size_t rc = static_cast<std::size_t>(ratio) * c;
  FfnParams p;
  p.w1 = Tensor({rc, c});
  p.b1 = Tensor({rc});
  p.w2 = Tensor({c, rc});
  p.b2 = Tensor({c});
  const double s1 = 1.0 / std::sqrt(static_cast<double>(c));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(rc));
  for (std::size_t i = 0; i < p.w1.size(); ++i) p.w1[i] = rng.normal() * s1;
  for (std::size_t i = 0; i < p.w2.size(); ++i) p.w2[i] = rng.normal() * s2;
  return p;
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p, FfnCache* cache) {
  const std::size_t nb = x.dim(0), nc = x.dim(1), nh = x.dim(2), nw = x.dim(3);
  const std::size_t rc = p.b1.size();
  if (p.w1.dim(1) != nc) throw std::invalid_argument("ffn channel mismatch");
  const std::size_t hw = nh * nw;
  Tensor out({nb, nc, nh, nw});
  if (cache) {
    cache->input = x;
    cache->pre = Tensor({nb, rc, nh, nw});
  }
  std::vector<double> pre(rc);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t px = 0; px < hw; ++px) {
      for (std::size_t h = 0; h < rc; ++h) {
        double acc = p.b1[h];
        const double* w1row = p.w1.data() + h * nc;
        for (std::size_t c = 0; c < nc; ++c) acc += w1row[c] * x[(b * nc + c) * hw + px];
        pre[h] = acc;
        if (cache) cache->pre[(b * rc + h) * hw + px] = acc;
      }
      for (std::size_t c = 0; c < nc; ++c) {
        double acc = p.b2[c];
        const double* w2row = p.w2.data() + c * rc;
        for (std::size_t h = 0; h < rc; ++h) acc += w2row[h] * relu(pre[h]);
        out[(b * nc + c) * hw + px] = acc;
      }
    }
  return out;
}

Tensor ffn_backward(const Tensor& grad, const FfnCache& cache, const FfnParams& p,
                    FfnParams& grads) {
  const std::size_t nb = grad.dim(0), nc = grad.dim(1), nh = grad.dim(2), nw = grad.dim(3);
  const std::size_t rc = p.b1.size();
  const std::size_t hw = nh * nw;
  Tensor g_x(grad.shape());
  std::vector<double> dpre(rc);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t px = 0; px < hw; ++px) {
      std::fill(dpre.begin(), dpre.end(), 0.0);
      for (std::size_t c = 0; c < nc; ++c) {
        const double g = grad[(b * nc + c) * hw + px];
        grads.b2[c] += g;
        const double* w2row = p.w2.data() + c * rc;
        double* g_w2row = grads.w2.data() + c * rc;
        for (std::size_t h = 0; h < rc; ++h) {
          const double post = relu(cache.pre[(b * rc + h) * hw + px]);
          g_w2row[h] += g * post;
          if (cache.pre[(b * rc + h) * hw + px] > 0.0) dpre[h] += g * w2row[h];
        }
      }
      for (std::size_t h = 0; h < rc; ++h) {
        if (dpre[h] == 0.0) continue;
        grads.b1[h] += dpre[h];
        const double* w1row = p.w1.data() + h * nc;
        double* g_w1row = grads.w1.data() + h * nc;
        for (std::size_t c = 0; c < nc; ++c) {
          const std::size_t at = (b * nc + c) * hw + px;
          g_w1row[c] += dpre[h] * cache.input[at];
          g_x[at] += dpre[h] * w1row[c];
        }
      }
    }
  return g_x;
}

BlockParams init_block_params(int channels, int d_state, GateParams::Mode gate_mode,
                              bool per_direction_params, int num_directions, int ffn_ratio,
                              Rng& rng) {
  BlockParams p;
  p.norm1 = init_layernorm_params(channels);
  p.ss2d = init_ss2d_params(channels, d_state, gate_mode, per_direction_params,
                            num_directions, rng);
  p.norm2 = init_layernorm_params(channels);
  p.ffn = init_ffn_params(channels, ffn_ratio, rng);
  return p;
}

FeatureMap o_vss_block(const FeatureMap& x, const BlockParams& params, const Ss2dOptions& opt,
                       const ScanIndexSet& s, BlockCache* cache) {
  if (params.norm1.gamma.size() != x.channels())
    throw std::invalid_argument("block channel width does not match input");
  Tensor n1 = layernorm(x.tensor, params.norm1, cache ? &cache->ln1 : nullptr);
  FeatureMap branch =
      o_ss2d(FeatureMap(n1), params.ss2d, opt, s, cache ? &cache->ss2d : nullptr);
  Tensor x1 = x.tensor;
  for (std::size_t i = 0; i < x1.size(); ++i) x1[i] += branch.tensor[i];

  Tensor n2 = layernorm(x1, params.norm2, cache ? &cache->ln2 : nullptr);
  Tensor f = ffn_forward(n2, params.ffn, cache ? &cache->ffn : nullptr);
  Tensor out = x1;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += f[i];

  if (cache) {
    cache->n1 = std::move(n1);
    cache->x1 = std::move(x1);
  }
  return FeatureMap(std::move(out));
}

Tensor o_vss_block_backward(const Tensor& grad_out, const BlockCache& cache,
                            const BlockParams& params, const Ss2dOptions& opt,
                            const ScanIndexSet& s, BlockParams& grads) {
  // out = x1 + ffn(ln2(x1))
  Tensor g_n2 = ffn_backward(grad_out, cache.ffn, params.ffn, grads.ffn);
  Tensor g_x1 = layernorm_backward(g_n2, cache.ln2, params.norm2, grads.norm2);
  for (std::size_t i = 0; i < g_x1.size(); ++i) g_x1[i] += grad_out[i];

  // x1 = x + ss2d(ln1(x))
  Tensor g_n1 = o_ss2d_backward(g_x1, cache.ss2d, params.ss2d, opt, s, grads.ss2d);
  Tensor g_x = layernorm_backward(g_n1, cache.ln1, params.norm1, grads.norm1);
  for (std::size_t i = 0; i < g_x.size(); ++i) g_x[i] += g_x1[i];
  return g_x;
}

EncoderParams init_encoder_params(int in_channels, const std::vector<StageSpec>& stages,
                                  int d_state, GateParams::Mode gate_mode,
                                  bool per_direction_params, int num_directions,
                                  int ffn_ratio, Rng& rng) {
  if (stages.empty()) throw std::invalid_argument("encoder needs at least one stage");
  EncoderParams p;
  p.in_channels = in_channels;
  int prev = in_channels;
  for (const StageSpec& spec : stages) {
    StageParams sp;
    if (spec.channels != prev) {
      sp.proj_w = Tensor({static_cast<std::size_t>(spec.channels),
                          static_cast<std::size_t>(prev)});
      sp.proj_b = Tensor({static_cast<std::size_t>(spec.channels)});
      const double scale = 1.0 / std::sqrt(static_cast<double>(prev));
      for (std::size_t i = 0; i < sp.proj_w.size(); ++i)
        sp.proj_w[i] = rng.normal() * scale;
    }
    for (int b = 0; b < spec.blocks; ++b)
      sp.blocks.push_back(init_block_params(spec.channels, d_state, gate_mode,
                                            per_direction_params, num_directions,
                                            ffn_ratio, rng));
    p.stages.push_back(std::move(sp));
    prev = spec.channels;
  }
  return p;
}

const ScanIndexSet& IndexSetCache::get(int height, int width) {
  const auto key = std::make_pair(height, width);
  auto it = cache_.find(key);
  if (it == cache_.end())
    it = cache_.emplace(key, std::make_unique<ScanIndexSet>(build_index_set(height, width)))
             .first;
  return *it->second;
}

namespace {

Tensor mean_pool_2x2(const Tensor& x) {
  const std::size_t nb = x.dim(0), nc = x.dim(1), nh = x.dim(2), nw = x.dim(3);
  if (nh % 2 != 0 || nw % 2 != 0)
    throw std::invalid_argument("grid not divisible by 2 at a downsampling boundary");
  Tensor out({nb, nc, nh / 2, nw / 2});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < nh / 2; ++i)
        for (std::size_t j = 0; j < nw / 2; ++j)
          out.at(b, c, i, j) = 0.25 * (x.at(b, c, 2 * i, 2 * j) + x.at(b, c, 2 * i, 2 * j + 1) +
                                       x.at(b, c, 2 * i + 1, 2 * j) +
                                       x.at(b, c, 2 * i + 1, 2 * j + 1));
  return out;
}

Tensor mean_pool_2x2_backward(const Tensor& grad) {
  const std::size_t nb = grad.dim(0), nc = grad.dim(1), nh = grad.dim(2), nw = grad.dim(3);
  Tensor out({nb, nc, nh * 2, nw * 2});
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
          const double g = 0.25 * grad.at(b, c, i, j);
          out.at(b, c, 2 * i, 2 * j) = g;
          out.at(b, c, 2 * i, 2 * j + 1) = g;
          out.at(b, c, 2 * i + 1, 2 * j) = g;
          out.at(b, c, 2 * i + 1, 2 * j + 1) = g;
        }
  return out;
}

Tensor pointwise_proj(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t nb = x.dim(0), nc = x.dim(1), nh = x.dim(2), nw_ = x.dim(3);
  const std::size_t co = w.dim(0);
  const std::size_t hw = nh * nw_;
  Tensor out({nb, co, nh, nw_});
  for (std::size_t bb = 0; bb < nb; ++bb)
    for (std::size_t o = 0; o < co; ++o) {
      double* dst = out.data() + (bb * co + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) dst[p] = b[o];
      const double* wrow = w.data() + o * nc;
      for (std::size_t c = 0; c < nc; ++c) {
        const double* src = x.data() + (bb * nc + c) * hw;
        for (std::size_t p = 0; p < hw; ++p) dst[p] += wrow[c] * src[p];
      }
    }
  return out;
}

Tensor pointwise_proj_backward(const Tensor& grad, const Tensor& input, const Tensor& w,
                               Tensor& g_w, Tensor& g_b) {
  const std::size_t nb = grad.dim(0), co = grad.dim(1), nh = grad.dim(2), nw_ = grad.dim(3);
  const std::size_t ci = input.dim(1);
  const std::size_t hw = nh * nw_;
  Tensor g_x(input.shape());
  for (std::size_t bb = 0; bb < nb; ++bb)
    for (std::size_t o = 0; o < co; ++o) {
      const double* g = grad.data() + (bb * co + o) * hw;
      for (std::size_t p = 0; p < hw; ++p) g_b[o] += g[p];
      const double* wrow = w.data() + o * ci;
      double* g_wrow = g_w.data() + o * ci;
      for (std::size_t c = 0; c < ci; ++c) {
        const double* src = input.data() + (bb * ci + c) * hw;
        double* dst = g_x.data() + (bb * ci + c) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          g_wrow[c] += g[p] * src[p];
          dst[p] += g[p] * wrow[c];
        }
      }
    }
  return g_x;
}

}  // namespace

FeatureMap encoder_forward(const FeatureMap& x, const EncoderParams& params,
                           const Ss2dOptions& opt, IndexSetCache& index_sets,
                           EncoderCache* cache) {
  Tensor cur = x.tensor;
  if (cache) cache->stages.resize(params.stages.size());
  for (std::size_t si = 0; si < params.stages.size(); ++si) {
    const StageParams& stage = params.stages[si];
    if (si > 0) cur = mean_pool_2x2(cur);
    if (stage.proj_w.size() > 0) {
      if (cache) cache->stages[si].proj_in = cur;
      cur = pointwise_proj(cur, stage.proj_w, stage.proj_b);
    }
    const ScanIndexSet& s =
        index_sets.get(static_cast<int>(cur.dim(2)), static_cast<int>(cur.dim(3)));
    if (cache) cache->stages[si].blocks.resize(stage.blocks.size());
    for (std::size_t bi = 0; bi < stage.blocks.size(); ++bi) {
      FeatureMap fm = o_vss_block(FeatureMap(cur), stage.blocks[bi], opt, s,
                                  cache ? &cache->stages[si].blocks[bi] : nullptr);
      cur = std::move(fm.tensor);
    }
  }
  return FeatureMap(std::move(cur));
}

Tensor encoder_backward(const Tensor& grad_out, const EncoderCache& cache,
                        const EncoderParams& params, const Ss2dOptions& opt,
                        IndexSetCache& index_sets, EncoderParams& grads) {
  Tensor g = grad_out;
  for (std::size_t si = params.stages.size(); si-- > 0;) {
    const StageParams& stage = params.stages[si];
    const ScanIndexSet& s =
        index_sets.get(static_cast<int>(g.dim(2)), static_cast<int>(g.dim(3)));
    for (std::size_t bi = stage.blocks.size(); bi-- > 0;)
      g = o_vss_block_backward(g, cache.stages[si].blocks[bi], stage.blocks[bi], opt, s,
                               grads.stages[si].blocks[bi]);
    if (stage.proj_w.size() > 0)
      g = pointwise_proj_backward(g, cache.stages[si].proj_in, stage.proj_w,
                                  grads.stages[si].proj_w, grads.stages[si].proj_b);
    if (si > 0) g = mean_pool_2x2_backward(g);
  }
  return g;
}

std::size_t param_count(const EncoderParams& params) {
  std::size_t n = 0;
  visit_params(const_cast<EncoderParams&>(params), "enc",
               [&n](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

AttentionParams zeros_like(const AttentionParams& p) {
  AttentionParams g;
  g.w1 = Tensor(p.w1.shape());
  g.b1 = Tensor(p.b1.shape());
  g.w2 = Tensor(p.w2.shape());
  g.b2 = Tensor(p.b2.shape());
  return g;
}

Ss2dParams zeros_like(const Ss2dParams& p) {
  Ss2dParams g;
  g.ssm.reserve(p.ssm.size());
  for (const SsmParams& sp : p.ssm) g.ssm.push_back(zeros_like(sp));
  g.attn = zeros_like(p.attn);
  return g;
}

LayerNormParams zeros_like(const LayerNormParams& p) {
  LayerNormParams g;
  g.gamma = Tensor(p.gamma.shape());
  g.beta = Tensor(p.beta.shape());
  return g;
}

FfnParams zeros_like(const FfnParams& p) {
  FfnParams g;
  g.w1 = Tensor(p.w1.shape());
  g.b1 = Tensor(p.b1.shape());
  g.w2 = Tensor(p.w2.shape());
  g.b2 = Tensor(p.b2.shape());
  return g;
}

BlockParams zeros_like(const BlockParams& p) {
  BlockParams g;
  g.norm1 = zeros_like(p.norm1);
  g.ss2d = zeros_like(p.ss2d);
  g.norm2 = zeros_like(p.norm2);
  g.ffn = zeros_like(p.ffn);
  return g;
}

EncoderParams zeros_like(const EncoderParams& p) {
  EncoderParams g;
  g.in_channels = p.in_channels;
  for (const StageParams& sp : p.stages) {
    StageParams gs;
    if (sp.proj_w.size() > 0) {
      gs.proj_w = Tensor(sp.proj_w.shape());
      gs.proj_b = Tensor(sp.proj_b.shape());
    }
    for (const BlockParams& bp : sp.blocks) gs.blocks.push_back(zeros_like(bp));
    g.stages.push_back(std::move(gs));
  }
  return g;
}

}  // namespace octo
