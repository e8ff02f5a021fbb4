#include "poiverify/embedder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>
#include <unordered_map>

#include "poiverify/geoindex.hpp"

namespace poiverify::embedder {

using model::GeoPoint;
using model::SignboardImage;

namespace {

double uniform_sym(Rng& rng, double half_width) {
  return (2.0 * rng.next_double() - 1.0) * half_width;
}

void fill_uniform(std::vector<float>& v, Rng& rng, double half_width) {
  for (auto& x : v) x = static_cast<float>(uniform_sym(rng, half_width));
}

}  // namespace

EmbedderParams EmbedderParams::init(const Hyper& hyper, std::uint64_t seed) {
  if (hyper.l < 1 || hyper.l > geoindex::kMaxPrecision)
    throw param_error("EmbedderParams: l must be in [1, 12]");
  if (hyper.d < 1) throw param_error("EmbedderParams: d must be positive");
  if (hyper.margin <= 0.0) throw param_error("EmbedderParams: margin must be positive");

  EmbedderParams p;
  p.hyper = hyper;
  const int d = hyper.d;
  const int l = hyper.l;
  p.conv1_w.resize(static_cast<std::size_t>(kConv1Channels) * 9);
  p.conv1_b.assign(kConv1Channels, 0.0f);
  p.conv2_w.resize(static_cast<std::size_t>(kConv2Channels) * kConv1Channels * 9);
  p.conv2_b.assign(kConv2Channels, 0.0f);
  p.proj_w.resize(static_cast<std::size_t>(d) * kColumnFeatureDim);
  p.proj_b.assign(d, 0.0f);
  p.geo_table.resize(static_cast<std::size_t>(kGeoAlphabet) * l * d);
  p.w_proj.resize(static_cast<std::size_t>(d) * d);
  p.u_proj.resize(static_cast<std::size_t>(d) * d);

  Rng rng(mix_seed(seed, 0x656d6264));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  fill_uniform(p.conv1_w, rng, 1.0 / 3.0);                    // fan-in 9
  fill_uniform(p.conv2_w, rng, 1.0 / std::sqrt(72.0));        // fan-in 8*9
  fill_uniform(p.proj_w, rng, 1.0 / std::sqrt(static_cast<double>(kColumnFeatureDim)));
  fill_uniform(p.geo_table, rng, inv_sqrt_d);
  fill_uniform(p.w_proj, rng, inv_sqrt_d);
  fill_uniform(p.u_proj, rng, inv_sqrt_d);
  return p;
}

void EmbedderParams::validate() const {
  const int d = hyper.d;
  const int l = hyper.l;
  if (l < 1 || l > geoindex::kMaxPrecision || d < 1)
    throw param_error("EmbedderParams: bad hyperparameters");
  auto expect = [](std::size_t got, std::size_t want, const char* what) {
    if (got != want)
      throw integrity_error(std::string("EmbedderParams: bad tensor size for ") + what);
  };
  expect(conv1_w.size(), static_cast<std::size_t>(kConv1Channels) * 9, "conv1_w");
  expect(conv1_b.size(), kConv1Channels, "conv1_b");
  expect(conv2_w.size(), static_cast<std::size_t>(kConv2Channels) * kConv1Channels * 9,
         "conv2_w");
  expect(conv2_b.size(), kConv2Channels, "conv2_b");
  expect(proj_w.size(), static_cast<std::size_t>(d) * kColumnFeatureDim, "proj_w");
  expect(proj_b.size(), static_cast<std::size_t>(d), "proj_b");
  expect(geo_table.size(), static_cast<std::size_t>(kGeoAlphabet) * l * d, "geo_table");
  expect(w_proj.size(), static_cast<std::size_t>(d) * d, "w_proj");
  expect(u_proj.size(), static_cast<std::size_t>(d) * d, "u_proj");
  for (const auto* t : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &proj_w, &proj_b,
                        &geo_table, &w_proj, &u_proj})
    for (const float v : *t)
      if (!std::isfinite(v)) throw integrity_error("EmbedderParams: non-finite value");
}

ParamGrads::ParamGrads(const EmbedderParams& p)
    : conv1_w(p.conv1_w.size(), 0.0),
      conv1_b(p.conv1_b.size(), 0.0),
      conv2_w(p.conv2_w.size(), 0.0),
      conv2_b(p.conv2_b.size(), 0.0),
      proj_w(p.proj_w.size(), 0.0),
      proj_b(p.proj_b.size(), 0.0),
      geo_table(p.geo_table.size(), 0.0),
      w_proj(p.w_proj.size(), 0.0),
      u_proj(p.u_proj.size(), 0.0) {}

void ParamGrads::zero() {
  for (auto* v : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &proj_w, &proj_b,
                  &geo_table, &w_proj, &u_proj})
    std::fill(v->begin(), v->end(), 0.0);
}

namespace detail {

namespace {
constexpr int kInH = model::kSignboardHeight;
constexpr int kInW = model::kSignboardWidth;

inline std::size_t idx3(int c, int y, int x, int h, int w) {
  return (static_cast<std::size_t>(c) * h + y) * w + x;
}
}  // namespace

void image_forward(const SignboardImage& img, const EmbedderParams& p,
                   ImageCtx& ctx) {
  const int d = p.hyper.d;
  const int l = p.hyper.l;

  // per-image standardization: cancels the contrast-scaling nuisance factor
  // before the (positively homogeneous) conv stages see the pixels
  ctx.input.resize(static_cast<std::size_t>(kInH) * kInW);
  double mean = 0.0;
  for (int r = 0; r < kInH; ++r)
    for (int c = 0; c < kInW; ++c) mean += img.at(r, c);
  mean /= static_cast<double>(kInH * kInW);
  double var = 0.0;
  for (int r = 0; r < kInH; ++r)
    for (int c = 0; c < kInW; ++c) {
      const double d0 = img.at(r, c) - mean;
      var += d0 * d0;
    }
  const double inv_std =
      1.0 / std::max(std::sqrt(var / static_cast<double>(kInH * kInW)), 1e-6);
  for (int r = 0; r < kInH; ++r)
    for (int c = 0; c < kInW; ++c)
      ctx.input[static_cast<std::size_t>(r) * kInW + c] =
          (img.at(r, c) - mean) * inv_std;

  // conv1: 1 -> C1, k3 s2 p1, ReLU; borders only clip at the top/left with
  // these even dimensions, so the interior runs without bounds checks
  ctx.pre1.resize(static_cast<std::size_t>(kConv1Channels) * kConv1H * kConv1W);
  ctx.out1.resize(ctx.pre1.size());
  for (int c1 = 0; c1 < kConv1Channels; ++c1) {
    const float* w = &p.conv1_w[static_cast<std::size_t>(c1) * 9];
    const double w00 = w[0], w01 = w[1], w02 = w[2];
    const double w10 = w[3], w11 = w[4], w12 = w[5];
    const double w20 = w[6], w21 = w[7], w22 = w[8];
    const double b = p.conv1_b[c1];
    for (int y = 0; y < kConv1H; ++y) {
      for (int x = 0; x < kConv1W; ++x) {
        double acc = b;
        if (y > 0 && x > 0) {
          const double* row0 = &ctx.input[static_cast<std::size_t>(2 * y - 1) * kInW + 2 * x - 1];
          const double* row1 = row0 + kInW;
          const double* row2 = row1 + kInW;
          // three independent chains keep the FMA units busy
          const double t0 = w00 * row0[0] + w01 * row0[1] + w02 * row0[2];
          const double t1 = w10 * row1[0] + w11 * row1[1] + w12 * row1[2];
          const double t2 = w20 * row2[0] + w21 * row2[1] + w22 * row2[2];
          acc += t0 + t1 + t2;
        } else {
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = 2 * y + dy - 1;
            if (sy < 0) continue;
            for (int dx = 0; dx < 3; ++dx) {
              const int sx = 2 * x + dx - 1;
              if (sx < 0) continue;
              acc += static_cast<double>(w[dy * 3 + dx]) *
                     ctx.input[static_cast<std::size_t>(sy) * kInW + sx];
            }
          }
        }
        const std::size_t o = idx3(c1, y, x, kConv1H, kConv1W);
        ctx.pre1[o] = acc;
        ctx.out1[o] = acc > 0.0 ? acc : 0.0;
      }
    }
  }

  // conv2: C1 -> C2, k3 s2 p1, ReLU
  ctx.pre2.resize(static_cast<std::size_t>(kConv2Channels) * kConv2H * kConv2W);
  ctx.out2.resize(ctx.pre2.size());
  for (int c2 = 0; c2 < kConv2Channels; ++c2) {
    const double b = p.conv2_b[c2];
    for (int y = 0; y < kConv2H; ++y) {
      for (int x = 0; x < kConv2W; ++x) {
        double acc = b;
        if (y > 0 && x > 0) {
          double s0 = 0.0, s1 = 0.0, s2 = 0.0;
          for (int c1 = 0; c1 < kConv1Channels; ++c1) {
            const float* w =
                &p.conv2_w[(static_cast<std::size_t>(c2) * kConv1Channels + c1) * 9];
            const double* row0 =
                &ctx.out1[idx3(c1, 2 * y - 1, 2 * x - 1, kConv1H, kConv1W)];
            const double* row1 = row0 + kConv1W;
            const double* row2 = row1 + kConv1W;
            s0 += static_cast<double>(w[0]) * row0[0] +
                  static_cast<double>(w[1]) * row0[1] +
                  static_cast<double>(w[2]) * row0[2];
            s1 += static_cast<double>(w[3]) * row1[0] +
                  static_cast<double>(w[4]) * row1[1] +
                  static_cast<double>(w[5]) * row1[2];
            s2 += static_cast<double>(w[6]) * row2[0] +
                  static_cast<double>(w[7]) * row2[1] +
                  static_cast<double>(w[8]) * row2[2];
          }
          acc += s0 + s1 + s2;
        } else {
          for (int c1 = 0; c1 < kConv1Channels; ++c1) {
            const float* w =
                &p.conv2_w[(static_cast<std::size_t>(c2) * kConv1Channels + c1) * 9];
            for (int dy = 0; dy < 3; ++dy) {
              const int sy = 2 * y + dy - 1;
              if (sy < 0) continue;
              for (int dx = 0; dx < 3; ++dx) {
                const int sx = 2 * x + dx - 1;
                if (sx < 0) continue;
                acc += static_cast<double>(w[dy * 3 + dx]) *
                       ctx.out1[idx3(c1, sy, sx, kConv1H, kConv1W)];
              }
            }
          }
        }
        const std::size_t o = idx3(c2, y, x, kConv2H, kConv2W);
        ctx.pre2[o] = acc;
        ctx.out2[o] = acc > 0.0 ? acc : 0.0;
      }
    }
  }

  // column pooling into l groups, then linear map to d per position
  ctx.colfeat.resize(static_cast<std::size_t>(l) * kColumnFeatureDim);
  if (ctx.g_prime.rows != l || ctx.g_prime.cols != d)
    ctx.g_prime = FeatureMatrix(l, d);
  for (int pos = 0; pos < l; ++pos) {
    const int x_begin = pos * kConv2W / l;
    const int x_end = (pos + 1) * kConv2W / l;
    const double inv = 1.0 / (x_end - x_begin);
    double* feat = &ctx.colfeat[static_cast<std::size_t>(pos) * kColumnFeatureDim];
    for (int c2 = 0; c2 < kConv2Channels; ++c2)
      for (int y = 0; y < kConv2H; ++y) {
        double acc = 0.0;
        for (int x = x_begin; x < x_end; ++x)
          acc += ctx.out2[idx3(c2, y, x, kConv2H, kConv2W)];
        feat[c2 * kConv2H + y] = acc * inv;
      }
    for (int j = 0; j < d; ++j) {
      const float* w = &p.proj_w[static_cast<std::size_t>(j) * kColumnFeatureDim];
      double acc = p.proj_b[j];
      for (int k = 0; k < kColumnFeatureDim; ++k)
        acc += static_cast<double>(w[k]) * feat[k];
      ctx.g_prime.at(pos, j) = acc;
    }
  }
}

void image_backward(const EmbedderParams& p, const ImageCtx& ctx,
                    const FeatureMatrix& d_g_prime, ParamGrads& grads) {
  const int d = p.hyper.d;
  const int l = p.hyper.l;

  std::vector<double> d_out2(ctx.out2.size(), 0.0);
  for (int pos = 0; pos < l; ++pos) {
    const int x_begin = pos * kConv2W / l;
    const int x_end = (pos + 1) * kConv2W / l;
    const double inv = 1.0 / (x_end - x_begin);
    const double* feat = &ctx.colfeat[static_cast<std::size_t>(pos) * kColumnFeatureDim];
    for (int j = 0; j < d; ++j) {
      const double g = d_g_prime.at(pos, j);
      if (g == 0.0) continue;
      grads.proj_b[j] += g;
      double* dw = &grads.proj_w[static_cast<std::size_t>(j) * kColumnFeatureDim];
      const float* w = &p.proj_w[static_cast<std::size_t>(j) * kColumnFeatureDim];
      for (int k = 0; k < kColumnFeatureDim; ++k) {
        dw[k] += g * feat[k];
        const int c2 = k / kConv2H;
        const int y = k % kConv2H;
        const double dfeat = g * static_cast<double>(w[k]) * inv;
        for (int x = x_begin; x < x_end; ++x)
          d_out2[idx3(c2, y, x, kConv2H, kConv2W)] += dfeat;
      }
    }
  }

  // conv2 backward
  std::vector<double> d_out1(ctx.out1.size(), 0.0);
  for (int c2 = 0; c2 < kConv2Channels; ++c2) {
    for (int y = 0; y < kConv2H; ++y) {
      for (int x = 0; x < kConv2W; ++x) {
        const std::size_t o = idx3(c2, y, x, kConv2H, kConv2W);
        if (ctx.pre2[o] <= 0.0) continue;
        const double g = d_out2[o];
        if (g == 0.0) continue;
        grads.conv2_b[c2] += g;
        for (int c1 = 0; c1 < kConv1Channels; ++c1) {
          const std::size_t wbase =
              (static_cast<std::size_t>(c2) * kConv1Channels + c1) * 9;
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = 2 * y + dy - 1;
            if (sy < 0 || sy >= kConv1H) continue;
            for (int dx = 0; dx < 3; ++dx) {
              const int sx = 2 * x + dx - 1;
              if (sx < 0 || sx >= kConv1W) continue;
              const std::size_t i1 = idx3(c1, sy, sx, kConv1H, kConv1W);
              grads.conv2_w[wbase + dy * 3 + dx] += g * ctx.out1[i1];
              d_out1[i1] += g * static_cast<double>(p.conv2_w[wbase + dy * 3 + dx]);
            }
          }
        }
      }
    }
  }

  // conv1 backward
  for (int c1 = 0; c1 < kConv1Channels; ++c1) {
    for (int y = 0; y < kConv1H; ++y) {
      for (int x = 0; x < kConv1W; ++x) {
        const std::size_t o = idx3(c1, y, x, kConv1H, kConv1W);
        if (ctx.pre1[o] <= 0.0) continue;
        const double g = d_out1[o];
        if (g == 0.0) continue;
        grads.conv1_b[c1] += g;
        const std::size_t wbase = static_cast<std::size_t>(c1) * 9;
        for (int dy = 0; dy < 3; ++dy) {
          const int sy = 2 * y + dy - 1;
          if (sy < 0 || sy >= kInH) continue;
          for (int dx = 0; dx < 3; ++dx) {
            const int sx = 2 * x + dx - 1;
            if (sx < 0 || sx >= kInW) continue;
            grads.conv1_w[wbase + dy * 3 + dx] +=
                g * ctx.input[static_cast<std::size_t>(sy) * kInW + sx];
          }
        }
      }
    }
  }
}

void geo_forward(const GeoPoint& pt, const EmbedderParams& p,
                 std::vector<int>& indices, FeatureMatrix& i_prime) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  const auto code = geoindex::geohash_encode(pt, l);
  indices.resize(l);
  if (i_prime.rows != l || i_prime.cols != d) i_prime = FeatureMatrix(l, d);
  for (int pos = 0; pos < l; ++pos) {
    const int c = geoindex::geohash_char_index(code.code[pos]);
    indices[pos] = c;
    const float* row = &p.geo_table[(static_cast<std::size_t>(c) * l + pos) * d];
    for (int j = 0; j < d; ++j) i_prime.at(pos, j) = row[j];
  }
}

void geo_backward(const EmbedderParams& p, std::span<const int> indices,
                  const FeatureMatrix& d_i_prime, ParamGrads& grads) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  for (int pos = 0; pos < l; ++pos) {
    double* row =
        &grads.geo_table[(static_cast<std::size_t>(indices[pos]) * l + pos) * d];
    for (int j = 0; j < d; ++j) row[j] += d_i_prime.at(pos, j);
  }
}

namespace {

// out = in (l x d) * m (d x d row-major input x output)
void project(const FeatureMatrix& in, const std::vector<float>& m, int d,
             FeatureMatrix& out) {
  if (out.rows != in.rows || out.cols != d) out = FeatureMatrix(in.rows, d);
  std::fill(out.data.begin(), out.data.end(), 0.0);
  for (int r = 0; r < in.rows; ++r) {
    for (int k = 0; k < d; ++k) {
      const double v = in.at(r, k);
      if (v == 0.0) continue;
      const float* mrow = &m[static_cast<std::size_t>(k) * d];
      for (int j = 0; j < d; ++j) out.at(r, j) += v * static_cast<double>(mrow[j]);
    }
  }
}

// rows(attn) = softmax(q . k^T / sqrt(d)) with row-max stabilization
void attention_rows(const FeatureMatrix& q, const FeatureMatrix& k, int d,
                    FeatureMatrix& attn) {
  const int l = q.rows;
  if (attn.rows != l || attn.cols != l) attn = FeatureMatrix(l, l);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> row(l);
  for (int r = 0; r < l; ++r) {
    double mx = -1e300;
    for (int c = 0; c < l; ++c) {
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += q.at(r, j) * k.at(c, j);
      row[c] = dot * scale;
      mx = std::max(mx, row[c]);
    }
    double sum = 0.0;
    for (int c = 0; c < l; ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    for (int c = 0; c < l; ++c) attn.at(r, c) = row[c] / sum;
  }
}

// d_scores from d_attn through row-wise softmax
void softmax_backward_rows(const FeatureMatrix& attn, const FeatureMatrix& d_attn,
                           FeatureMatrix& d_scores) {
  const int l = attn.rows;
  d_scores = FeatureMatrix(l, l);
  for (int r = 0; r < l; ++r) {
    double dot = 0.0;
    for (int c = 0; c < l; ++c) dot += d_attn.at(r, c) * attn.at(r, c);
    for (int c = 0; c < l; ++c)
      d_scores.at(r, c) = attn.at(r, c) * (d_attn.at(r, c) - dot);
  }
}

}  // namespace

void fuse_forward(const EmbedderParams& p, const FeatureMatrix& g_prime,
                  const FeatureMatrix& i_prime, FuseCtx& ctx) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  if (g_prime.rows != l || g_prime.cols != d || i_prime.rows != l ||
      i_prime.cols != d)
    throw param_error("cross_attention_fuse: feature shape mismatch");

  project(g_prime, p.w_proj, d, ctx.pg);
  project(i_prime, p.u_proj, d, ctx.pi);
  attention_rows(ctx.pg, ctx.pi, d, ctx.attn_i);  // image queries geo keys
  attention_rows(ctx.pi, ctx.pg, d, ctx.attn_g);  // geo queries image keys

  if (ctx.i_fused.rows != l || ctx.i_fused.cols != d) {
    ctx.i_fused = FeatureMatrix(l, d);
    ctx.g_fused = FeatureMatrix(l, d);
  } else {
    std::fill(ctx.i_fused.data.begin(), ctx.i_fused.data.end(), 0.0);
    std::fill(ctx.g_fused.data.begin(), ctx.g_fused.data.end(), 0.0);
  }
  for (int r = 0; r < l; ++r)
    for (int c = 0; c < l; ++c) {
      const double ai = ctx.attn_i.at(r, c);
      const double ag = ctx.attn_g.at(r, c);
      for (int j = 0; j < d; ++j) {
        ctx.i_fused.at(r, j) += ai * ctx.pi.at(c, j);
        ctx.g_fused.at(r, j) += ag * ctx.pg.at(c, j);
      }
    }
}

void fuse_backward(const EmbedderParams& p, const FuseCtx& ctx,
                   const FeatureMatrix& g_prime, const FeatureMatrix& i_prime,
                   const FeatureMatrix& d_i_fused, const FeatureMatrix& d_g_fused,
                   FeatureMatrix& d_g_prime, FeatureMatrix& d_i_prime,
                   ParamGrads& grads) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  FeatureMatrix d_pg(l, d), d_pi(l, d);

  // i_fused = attn_i * pi
  FeatureMatrix d_attn_i(l, l);
  for (int r = 0; r < l; ++r)
    for (int c = 0; c < l; ++c) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += d_i_fused.at(r, j) * ctx.pi.at(c, j);
      d_attn_i.at(r, c) = acc;
      const double a = ctx.attn_i.at(r, c);
      for (int j = 0; j < d; ++j) d_pi.at(c, j) += a * d_i_fused.at(r, j);
    }
  // g_fused = attn_g * pg
  FeatureMatrix d_attn_g(l, l);
  for (int r = 0; r < l; ++r)
    for (int c = 0; c < l; ++c) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j) acc += d_g_fused.at(r, j) * ctx.pg.at(c, j);
      d_attn_g.at(r, c) = acc;
      const double a = ctx.attn_g.at(r, c);
      for (int j = 0; j < d; ++j) d_pg.at(c, j) += a * d_g_fused.at(r, j);
    }

  FeatureMatrix d_scores_i, d_scores_g;
  softmax_backward_rows(ctx.attn_i, d_attn_i, d_scores_i);
  softmax_backward_rows(ctx.attn_g, d_attn_g, d_scores_g);

  // scores_i[r][c] = pg[r] . pi[c] * scale; scores_g[r][c] = pi[r] . pg[c] * scale
  for (int r = 0; r < l; ++r)
    for (int c = 0; c < l; ++c) {
      const double si = d_scores_i.at(r, c) * scale;
      const double sg = d_scores_g.at(r, c) * scale;
      for (int j = 0; j < d; ++j) {
        d_pg.at(r, j) += si * ctx.pi.at(c, j);
        d_pi.at(c, j) += si * ctx.pg.at(r, j);
        d_pi.at(r, j) += sg * ctx.pg.at(c, j);
        d_pg.at(c, j) += sg * ctx.pi.at(r, j);
      }
    }

  // pg = g_prime * W, pi = i_prime * U
  for (int r = 0; r < l; ++r)
    for (int k = 0; k < d; ++k) {
      const double gv = g_prime.at(r, k);
      const double iv = i_prime.at(r, k);
      double acc_g = 0.0, acc_i = 0.0;
      const float* wrow = &p.w_proj[static_cast<std::size_t>(k) * d];
      const float* urow = &p.u_proj[static_cast<std::size_t>(k) * d];
      double* dwrow = &grads.w_proj[static_cast<std::size_t>(k) * d];
      double* durow = &grads.u_proj[static_cast<std::size_t>(k) * d];
      for (int j = 0; j < d; ++j) {
        dwrow[j] += gv * d_pg.at(r, j);
        durow[j] += iv * d_pi.at(r, j);
        acc_g += d_pg.at(r, j) * static_cast<double>(wrow[j]);
        acc_i += d_pi.at(r, j) * static_cast<double>(urow[j]);
      }
      d_g_prime.at(r, k) += acc_g;
      d_i_prime.at(r, k) += acc_i;
    }
}

void embed_forward(const SignboardImage& img, const GeoPoint& pt,
                   const EmbedderParams& p, EmbedCtx& ctx) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  image_forward(img, p, ctx.img);
  geo_forward(pt, p, ctx.geo_indices, ctx.i_prime);
  fuse_forward(p, ctx.img.g_prime, ctx.i_prime, ctx.fuse);

  ctx.m_raw.assign(static_cast<std::size_t>(2) * d, 0.0);
  const double inv_l = 1.0 / l;
  for (int r = 0; r < l; ++r)
    for (int j = 0; j < d; ++j) {
      ctx.m_raw[j] += ctx.fuse.i_fused.at(r, j) * inv_l;
      ctx.m_raw[d + j] += ctx.fuse.g_fused.at(r, j) * inv_l;
    }

  double norm = 0.0;
  for (const double v : ctx.m_raw) norm += v * v;
  norm = std::sqrt(norm);
  if (norm == 0.0)
    throw degenerate_embedding_error("embed: all-zero pre-normalization vector");
  ctx.raw_norm = norm;
  ctx.m.resize(ctx.m_raw.size());
  for (std::size_t k = 0; k < ctx.m_raw.size(); ++k) ctx.m[k] = ctx.m_raw[k] / norm;
}

void embed_backward(const EmbedderParams& p, const EmbedCtx& ctx,
                    std::span<const double> d_m, ParamGrads& grads) {
  const int l = p.hyper.l;
  const int d = p.hyper.d;
  if (d_m.size() != ctx.m.size()) throw param_error("embed_backward: bad gradient dim");

  // through L2 normalization
  double dot = 0.0;
  for (std::size_t k = 0; k < d_m.size(); ++k) dot += d_m[k] * ctx.m[k];
  std::vector<double> d_raw(d_m.size());
  for (std::size_t k = 0; k < d_m.size(); ++k)
    d_raw[k] = (d_m[k] - ctx.m[k] * dot) / ctx.raw_norm;

  // through average pooling
  const double inv_l = 1.0 / l;
  FeatureMatrix d_i_fused(l, d), d_g_fused(l, d);
  for (int r = 0; r < l; ++r)
    for (int j = 0; j < d; ++j) {
      d_i_fused.at(r, j) = d_raw[j] * inv_l;
      d_g_fused.at(r, j) = d_raw[static_cast<std::size_t>(d) + j] * inv_l;
    }

  FeatureMatrix d_g_prime(l, d), d_i_prime(l, d);
  fuse_backward(p, ctx.fuse, ctx.img.g_prime, ctx.i_prime, d_i_fused, d_g_fused,
                d_g_prime, d_i_prime, grads);
  image_backward(p, ctx.img, d_g_prime, grads);
  geo_backward(p, ctx.geo_indices, d_i_prime, grads);
}

}  // namespace detail

FeatureMatrix image_features(const SignboardImage& img, const EmbedderParams& p) {
  detail::ImageCtx ctx;
  detail::image_forward(img, p, ctx);
  return std::move(ctx.g_prime);
}

FeatureMatrix geo_features(const GeoPoint& pt, const EmbedderParams& p) {
  std::vector<int> indices;
  FeatureMatrix i_prime;
  detail::geo_forward(pt, p, indices, i_prime);
  return i_prime;
}

std::pair<FeatureMatrix, FeatureMatrix> cross_attention_fuse(
    const FeatureMatrix& g_prime, const FeatureMatrix& i_prime,
    const EmbedderParams& p) {
  detail::FuseCtx ctx;
  detail::fuse_forward(p, g_prime, i_prime, ctx);
  return {std::move(ctx.i_fused), std::move(ctx.g_fused)};
}

MultimodalEmbedding embed(const SignboardImage& img, const GeoPoint& pt,
                          const EmbedderParams& p) {
  detail::EmbedCtx ctx;
  detail::embed_forward(img, pt, p, ctx);
  return {std::move(ctx.m)};
}

namespace {

struct CosineParts {
  double cos = 0.0;
  double norm_a = 0.0, norm_b = 0.0, dot = 0.0;
};

CosineParts cosine_parts(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw param_error("triplet_loss: dimension mismatch");
  CosineParts parts;
  for (std::size_t k = 0; k < a.size(); ++k) {
    parts.dot += a[k] * b[k];
    parts.norm_a += a[k] * a[k];
    parts.norm_b += b[k] * b[k];
  }
  parts.norm_a = std::sqrt(parts.norm_a);
  parts.norm_b = std::sqrt(parts.norm_b);
  if (parts.norm_a == 0.0 || parts.norm_b == 0.0)
    throw degenerate_embedding_error("triplet_loss: zero-norm vector");
  parts.cos = parts.dot / (parts.norm_a * parts.norm_b);
  return parts;
}

// d cos(a, b) / d a = b / (|a||b|) - cos * a / |a|^2, with |a| the norm of the
// differentiated argument
void add_cosine_grad(double cos_ab, double norm_a, double norm_b,
                     std::span<const double> a, std::span<const double> b,
                     double weight, std::vector<double>& out) {
  const double inv_ab = 1.0 / (norm_a * norm_b);
  const double inv_aa = cos_ab / (norm_a * norm_a);
  for (std::size_t k = 0; k < a.size(); ++k)
    out[k] += weight * (b[k] * inv_ab - a[k] * inv_aa);
}

}  // namespace

double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const double> negative, double margin) {
  if (margin <= 0.0) throw param_error("triplet_loss: margin must be positive");
  const double cos_p = cosine_parts(anchor, positive).cos;
  const double cos_n = cosine_parts(anchor, negative).cos;
  return std::max(0.0, margin - cos_p + cos_n);
}

TripletLossGrads triplet_loss_backward(std::span<const double> anchor,
                                       std::span<const double> positive,
                                       std::span<const double> negative,
                                       double margin) {
  if (margin <= 0.0) throw param_error("triplet_loss: margin must be positive");
  const CosineParts pp = cosine_parts(anchor, positive);
  const CosineParts pn = cosine_parts(anchor, negative);

  TripletLossGrads out;
  out.d_anchor.assign(anchor.size(), 0.0);
  out.d_positive.assign(anchor.size(), 0.0);
  out.d_negative.assign(anchor.size(), 0.0);
  const double slack = margin - pp.cos + pn.cos;
  out.loss = std::max(0.0, slack);
  out.active = slack > 0.0;
  if (!out.active) return out;

  add_cosine_grad(pp.cos, pp.norm_a, pp.norm_b, anchor, positive, -1.0, out.d_anchor);
  add_cosine_grad(pn.cos, pn.norm_a, pn.norm_b, anchor, negative, +1.0, out.d_anchor);
  add_cosine_grad(pp.cos, pp.norm_b, pp.norm_a, positive, anchor, -1.0,
                  out.d_positive);
  add_cosine_grad(pn.cos, pn.norm_b, pn.norm_a, negative, anchor, +1.0,
                  out.d_negative);
  return out;
}

TrainReport train(EmbedderParams& params, const model::Corpus& corpus,
                  const TrainConfig& cfg) {
  params.validate();
  if (cfg.epochs < 1 || cfg.batch_size < 1)
    throw param_error("train: epochs and batch_size must be positive");

  // group train submissions per POI
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> by_poi;
  for (std::size_t i = 0; i < corpus.submissions.size(); ++i)
    if (corpus.submissions[i].split == model::Split::train)
      by_poi[corpus.submissions[i].truth_id].push_back(i);

  TrainReport report;
  std::vector<std::uint64_t> eligible;
  for (const auto& [id, subs] : by_poi) {
    if (subs.size() >= 2)
      eligible.push_back(id);
    else
      ++report.skipped_single_view_pois;
  }
  std::sort(eligible.begin(), eligible.end());
  if (eligible.size() < 2)
    throw param_error("train: need >= 2 POIs with >= 2 train submissions each");

  Rng rng(mix_seed(cfg.seed, 0x747261696eULL));
  ParamGrads grads(params);
  detail::EmbedCtx ctx_a, ctx_p, ctx_n;

  auto pick_other = [&](const std::vector<std::size_t>& subs, std::size_t not_this) {
    if (subs.size() == 1) return subs[0];
    for (;;) {
      const std::size_t s = subs[rng.next_below(subs.size())];
      if (s != not_this) return s;
    }
  };

  // The triplet set is fixed for the whole run (one per eligible train
  // submission); epochs reshuffle the order only. A zero learning rate
  // therefore reproduces the same mean loss every epoch.
  struct Triplet {
    std::size_t anchor, positive, negative;
  };
  const int negatives = std::max(1, cfg.negatives_per_anchor);
  std::vector<Triplet> triplets;
  for (const std::uint64_t id : eligible) {
    for (const std::size_t anchor_idx : by_poi[id]) {
      for (int k = 0; k < negatives; ++k) {
        const std::size_t pos_idx = pick_other(by_poi[id], anchor_idx);
        std::uint64_t neg_poi = id;
        while (neg_poi == id) neg_poi = eligible[rng.next_below(eligible.size())];
        const auto& neg_subs = by_poi[neg_poi];
        triplets.push_back(
            {anchor_idx, pos_idx, neg_subs[rng.next_below(neg_subs.size())]});
      }
    }
  }

  const std::size_t per_epoch =
      cfg.max_triplets_per_epoch > 0
          ? std::min(cfg.max_triplets_per_epoch, triplets.size())
          : triplets.size();
  report.triplets_per_epoch = per_epoch;

  std::vector<std::size_t> order(triplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate *
                      std::pow(cfg.lr_decay, cfg.lr_decay_every > 0
                                                 ? epoch / cfg.lr_decay_every
                                                 : 0);
    // Fisher-Yates reshuffle each epoch
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = rng.next_below(i);
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    std::size_t batch_fill = 0;
    auto flush = [&] {
      if (batch_fill == 0) return;
      const double step = lr / static_cast<double>(batch_fill);
      auto apply = [&](std::vector<float>& w, const std::vector<double>& g) {
        for (std::size_t k = 0; k < w.size(); ++k)
          w[k] = static_cast<float>(static_cast<double>(w[k]) - step * g[k]);
      };
      apply(params.conv1_w, grads.conv1_w);
      apply(params.conv1_b, grads.conv1_b);
      apply(params.conv2_w, grads.conv2_w);
      apply(params.conv2_b, grads.conv2_b);
      apply(params.proj_w, grads.proj_w);
      apply(params.proj_b, grads.proj_b);
      apply(params.geo_table, grads.geo_table);
      apply(params.w_proj, grads.w_proj);
      apply(params.u_proj, grads.u_proj);
      grads.zero();
      batch_fill = 0;
    };

    for (std::size_t t = 0; t < per_epoch; ++t) {
      const Triplet& triplet = triplets[order[t]];
      const auto& anchor_sub = corpus.submissions[triplet.anchor];
      const auto& pos_sub = corpus.submissions[triplet.positive];
      const auto& neg_sub = corpus.submissions[triplet.negative];

      detail::embed_forward(anchor_sub.signboard, anchor_sub.shot_location, params,
                            ctx_a);
      detail::embed_forward(pos_sub.signboard, pos_sub.shot_location, params, ctx_p);
      detail::embed_forward(neg_sub.signboard, neg_sub.shot_location, params, ctx_n);

      const auto tg = triplet_loss_backward(ctx_a.m, ctx_p.m, ctx_n.m,
                                            params.hyper.margin);
      loss_sum += tg.loss;
      if (tg.active) {
        detail::embed_backward(params, ctx_a, tg.d_anchor, grads);
        detail::embed_backward(params, ctx_p, tg.d_positive, grads);
        detail::embed_backward(params, ctx_n, tg.d_negative, grads);
      }
      if (++batch_fill == static_cast<std::size_t>(cfg.batch_size)) flush();
    }
    flush();
    report.epoch_mean_loss.push_back(loss_sum / static_cast<double>(per_epoch));
  }
  return report;
}

std::vector<MultimodalEmbedding> embed_all(std::span<const model::PoiRecord> pois,
                                           const EmbedderParams& p, int threads) {
  std::vector<MultimodalEmbedding> out(pois.size());
  if (threads < 1) threads = 1;
  const std::size_t n = pois.size();
  const std::size_t chunk = (n + threads - 1) / std::max<std::size_t>(1, threads);
  std::vector<std::thread> workers;
  for (int w = 0; w < threads; ++w) {
    const std::size_t begin = w * chunk;
    if (begin >= n) break;
    const std::size_t end = std::min(n, begin + chunk);
    workers.emplace_back([&, begin, end] {
      detail::EmbedCtx ctx;
      for (std::size_t i = begin; i < end; ++i) {
        detail::embed_forward(pois[i].signboard, pois[i].location, p, ctx);
        out[i].vec = ctx.m;
      }
    });
  }
  for (auto& t : workers) t.join();
  return out;
}

namespace {
constexpr char kParamsMagic[4] = {'P', 'V', 'E', 'M'};
constexpr std::uint32_t kParamsVersion = 1;

void write_tensor(std::ostream& out, const std::vector<float>& t) {
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
}

void read_tensor(std::istream& in, std::vector<float>& t) {
  in.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!in.good()) throw corruption_error("embedder params: truncated tensor data");
}
}  // namespace

void EmbedderParams::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  f.write(kParamsMagic, 4);
  auto write_pod = [&f](const auto& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
  };
  write_pod(kParamsVersion);
  write_pod(static_cast<std::int32_t>(hyper.l));
  write_pod(static_cast<std::int32_t>(hyper.d));
  write_pod(hyper.margin);
  for (const auto* t : {&conv1_w, &conv1_b, &conv2_w, &conv2_b, &proj_w, &proj_b,
                        &geo_table, &w_proj, &u_proj})
    write_tensor(f, *t);
  if (!f.good()) throw format_error("write failed: " + path);
}

EmbedderParams EmbedderParams::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dependency_error("cannot open embedder params: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f.good() || std::memcmp(magic, kParamsMagic, 4) != 0)
    throw corruption_error("embedder params: bad magic");
  auto read_pod = [&f](auto& v) {
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!f.good()) throw corruption_error("embedder params: truncated header");
  };
  std::uint32_t version = 0;
  read_pod(version);
  if (version != kParamsVersion)
    throw corruption_error("embedder params: unsupported format version");
  std::int32_t l = 0, d = 0;
  double margin = 0.0;
  read_pod(l);
  read_pod(d);
  read_pod(margin);
  if (l < 1 || l > geoindex::kMaxPrecision || d < 1 || d > 4096 ||
      !(margin > 0.0) || !std::isfinite(margin))
    throw corruption_error("embedder params: implausible hyperparameters");

  EmbedderParams p = init({l, d, margin}, 0);
  for (auto* t : {&p.conv1_w, &p.conv1_b, &p.conv2_w, &p.conv2_b, &p.proj_w,
                  &p.proj_b, &p.geo_table, &p.w_proj, &p.u_proj})
    read_tensor(f, *t);
  char extra = 0;
  f.read(&extra, 1);
  if (!f.eof()) throw corruption_error("embedder params: trailing bytes");
  p.validate();
  return p;
}

}  // namespace poiverify::embedder
