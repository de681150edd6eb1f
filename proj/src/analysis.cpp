#include "octo/analysis.hpp"

#include <cmath>
#include <stdexcept>

namespace octo {

EffectiveOperator materialize_operator(const MapFn& model, int channels, int height,
                                       int width, uint64_t check_seed) {
  if (channels < 1 || height < 1 || width < 1)
    throw std::invalid_argument("operator grid must be non-degenerate");
  const std::size_t nc = static_cast<std::size_t>(channels);
  const std::size_t nh = static_cast<std::size_t>(height);
  const std::size_t nw = static_cast<std::size_t>(width);
  const std::size_t hw = nh * nw;

  // reject nonlinear models before probing
  {
    Rng rng(check_seed);
    Tensor xa({1, nc, nh, nw}), xb({1, nc, nh, nw}), xs({1, nc, nh, nw});
    for (std::size_t i = 0; i < xa.size(); ++i) {
      xa[i] = rng.normal();
      xb[i] = rng.normal();
      xs[i] = xa[i] + xb[i];
    }
    const FeatureMap fa = model(FeatureMap(xa));
    const FeatureMap fb = model(FeatureMap(xb));
    const FeatureMap fs = model(FeatureMap(xs));
    const FeatureMap f0 = model(FeatureMap(Tensor({1, nc, nh, nw})));
    double worst = max_abs(f0.tensor);
    for (std::size_t i = 0; i < fs.tensor.size(); ++i)
      worst = std::max(worst, std::fabs(fs.tensor[i] - fa.tensor[i] - fb.tensor[i]));
    if (worst > 1e-10)
      throw std::runtime_error("model failed the superposition check, not linear");
  }

  EffectiveOperator op;
  op.height = height;
  op.width = width;
  op.per_channel.assign(nc, Tensor({hw, hw}));
  Tensor impulse({1, nc, nh, nw});
  for (std::size_t p = 0; p < hw; ++p) {
    impulse.fill(0.0);
    for (std::size_t c = 0; c < nc; ++c) impulse[c * hw + p] = 1.0;
    const FeatureMap resp = model(FeatureMap(impulse));
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t q = 0; q < hw; ++q)
        op.per_channel[c].at(q, p) = resp.tensor[c * hw + q];
  }
  return op;
}

Tensor expected_support(int height, int width) {
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  Tensor m({hw, hw});
  for (int qi = 0; qi < height; ++qi)
    for (int qj = 0; qj < width; ++qj)
      for (int pi = 0; pi < height; ++pi)
        for (int pj = 0; pj < width; ++pj) {
          const bool share = qi == pi || qj == pj || (qi - qj) == (pi - pj) ||
                             (qi + qj) == (pi + pj);
          m.at(static_cast<std::size_t>(qi) * width + qj,
               static_cast<std::size_t>(pi) * width + pj) = share ? 1.0 : 0.0;
        }
  return m;
}

Tensor direction_line_membership(int height, int width, Direction d) {
  const std::size_t hw = static_cast<std::size_t>(height) * width;
  Tensor m({hw, hw});
  for (int qi = 0; qi < height; ++qi)
    for (int qj = 0; qj < width; ++qj)
      for (int pi = 0; pi < height; ++pi)
        for (int pj = 0; pj < width; ++pj) {
          bool share = false;
          switch (d) {
            case Direction::RowFwd:
            case Direction::RowBwd:
              share = qi == pi;
              break;
            case Direction::ColDown:
            case Direction::ColUp:
              share = qj == pj;
              break;
            case Direction::DiagDR:
            case Direction::DiagUL:
              share = (qi - qj) == (pi - pj);
              break;
            case Direction::DiagDL:
            case Direction::DiagUR:
              share = (qi + qj) == (pi + pj);
              break;
          }
          m.at(static_cast<std::size_t>(qi) * width + qj,
               static_cast<std::size_t>(pi) * width + pj) = share ? 1.0 : 0.0;
        }
  return m;
}

SupportPattern support_pattern(const Tensor& m, double tau) {
  if (tau <= 0.0) throw std::invalid_argument("support threshold must be positive");
  SupportPattern s;
  s.threshold = tau;
  s.pattern = Tensor(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i)
    s.pattern[i] = std::fabs(m[i]) > tau ? 1.0 : 0.0;
  return s;
}

ErfMap erf_encoder(const EncoderParams& params, const Ss2dOptions& opt,
                   const FeatureMap& x, int center_i, int center_j,
                   IndexSetCache& index_sets) {
  EncoderCache cache;
  const FeatureMap out = encoder_forward(x, params, opt, index_sets, &cache);
  if (center_i < 0 || center_j < 0 ||
      center_i >= static_cast<int>(out.height()) ||
      center_j >= static_cast<int>(out.width()))
    throw std::out_of_range("erf center outside the output grid");

  Tensor grad(out.tensor.shape());
  for (std::size_t c = 0; c < out.channels(); ++c)
    grad.at(static_cast<std::size_t>(0), c, static_cast<std::size_t>(center_i),
            static_cast<std::size_t>(center_j)) = 1.0;

  EncoderParams param_grads = zeros_like(params);
  const Tensor g_x = encoder_backward(grad, cache, params, opt, index_sets, param_grads);

  ErfMap e;
  e.center_i = center_i;
  e.center_j = center_j;
  e.values = Tensor({x.height(), x.width()});
  const std::size_t hw = x.height() * x.width();
  for (std::size_t c = 0; c < x.channels(); ++c)
    for (std::size_t p = 0; p < hw; ++p) e.values[p] += std::fabs(g_x[c * hw + p]);
  return e;
}

ErfMap erf_finite_difference(const MapFn& model, const FeatureMap& x, int center_i,
                             int center_j, double step) {
  {
    const FeatureMap probe = model(x);
    if (center_i < 0 || center_j < 0 ||
        center_i >= static_cast<int>(probe.height()) ||
        center_j >= static_cast<int>(probe.width()))
      throw std::out_of_range("erf center outside the output grid");
  }
  const std::size_t nc = x.channels();
  const std::size_t hw = x.height() * x.width();

  const auto center_sum = [&](const Tensor& t) {
    const FeatureMap out = model(FeatureMap(t));
    double s = 0.0;
    for (std::size_t c = 0; c < out.channels(); ++c)
      s += out.tensor.at(static_cast<std::size_t>(0), c,
                         static_cast<std::size_t>(center_i),
                         static_cast<std::size_t>(center_j));
    return s;
  };

  ErfMap e;
  e.center_i = center_i;
  e.center_j = center_j;
  e.values = Tensor({x.height(), x.width()});
  Tensor probe = x.tensor;
  for (std::size_t c = 0; c < nc; ++c)
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t at = c * hw + p;
      const double keep = probe[at];
      probe[at] = keep + step;
      const double hi = center_sum(probe);
      probe[at] = keep - step;
      const double lo = center_sum(probe);
      probe[at] = keep;
      e.values[p] += std::fabs((hi - lo) / (2.0 * step));
    }
  return e;
}

double isotropy_score(const ErfMap& e) {
  const int height = static_cast<int>(e.values.dim(0));
  const int width = static_cast<int>(e.values.dim(1));

  double spokes[8] = {0.0};
  double total = 0.0;
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const double mass = std::fabs(e.values.at(static_cast<std::size_t>(i),
                                                static_cast<std::size_t>(j)));
      if (mass == 0.0) continue;
      total += mass;
      const int di = i - e.center_i;
      const int dj = j - e.center_j;
      if (di == 0 && dj == 0) {
        for (double& s : spokes) s += mass / 8.0;
        continue;
      }
      // nearest spoke by angle; the spoke of direction k points along its step
      const double theta = std::atan2(static_cast<double>(di), static_cast<double>(dj));
      double best = 1e30;
      int hits[8];
      int n_hits = 0;
      for (int k = 0; k < 8; ++k) {
        const auto [si, sj] = kDirectionSteps[k];
        const double phi = std::atan2(static_cast<double>(si), static_cast<double>(sj));
        double d = std::fabs(theta - phi);
        if (d > 3.14159265358979323846) d = 2.0 * 3.14159265358979323846 - d;
        if (d < best - 1e-12) {
          best = d;
          n_hits = 0;
          hits[n_hits++] = k;
        } else if (d <= best + 1e-12) {
          hits[n_hits++] = k;
        }
      }
      for (int h = 0; h < n_hits; ++h) spokes[hits[h]] += mass / n_hits;
    }

  if (total <= 0.0) throw std::runtime_error("isotropy score undefined for a zero-mass map");

  double worst = 0.0;
  for (double s : spokes) worst = std::max(worst, std::fabs(s / total - 0.125));
  return 1.0 - worst * 8.0 / 7.0;
}

}  // namespace octo
