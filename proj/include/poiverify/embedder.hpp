#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "poiverify/model.hpp"

namespace poiverify::embedder {

// Fixed signboard feature extractor: two stride-2 conv+ReLU stages, then
// column pooling to l positions, each linearly mapped to the model dim.
inline constexpr int kConv1Channels = 8;
inline constexpr int kConv2Channels = 16;
inline constexpr int kConv1H = model::kSignboardHeight / 2;  // 16
inline constexpr int kConv1W = model::kSignboardWidth / 2;   // 64
inline constexpr int kConv2H = kConv1H / 2;                  // 8
inline constexpr int kConv2W = kConv1W / 2;                  // 32
inline constexpr int kColumnFeatureDim = kConv2Channels * kConv2H;  // 128
inline constexpr int kGeoAlphabet = 32;

struct Hyper {
  int l = 8;            // geohash precision == fused sequence length
  int d = 32;           // model dim; embedding is 2d
  double margin = 0.5;  // triplet hinge margin
};

struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  FeatureMatrix() = default;
  FeatureMatrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

// Parameters live as float32 so that the on-disk form (32-bit floats) is the
// in-memory form and save/load roundtrips are bit-exact. All arithmetic
// promotes to double.
struct EmbedderParams {
  Hyper hyper;
  std::vector<float> conv1_w;   // [C1][1][3][3]
  std::vector<float> conv1_b;   // [C1]
  std::vector<float> conv2_w;   // [C2][C1][3][3]
  std::vector<float> conv2_b;   // [C2]
  std::vector<float> proj_w;    // [d][kColumnFeatureDim]
  std::vector<float> proj_b;    // [d]
  std::vector<float> geo_table; // [kGeoAlphabet][l][d]
  std::vector<float> w_proj;    // [d][d], image-side projection
  std::vector<float> u_proj;    // [d][d], geo-side projection

  static EmbedderParams init(const Hyper& hyper, std::uint64_t seed);

  int embedding_dim() const { return 2 * hyper.d; }
  void validate() const;

  void save(const std::string& path) const;
  static EmbedderParams load(const std::string& path);
};

// Double-precision gradient accumulator mirroring EmbedderParams.
struct ParamGrads {
  std::vector<double> conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b,
      geo_table, w_proj, u_proj;

  explicit ParamGrads(const EmbedderParams& p);
  void zero();
};

struct MultimodalEmbedding {
  std::vector<double> vec;  // dim 2d, unit L2 norm
};

namespace detail {

struct ImageCtx {
  std::vector<double> input;      // 32x128
  std::vector<double> pre1, out1; // C1 x 16 x 64
  std::vector<double> pre2, out2; // C2 x 8 x 32
  std::vector<double> colfeat;    // l x kColumnFeatureDim
  FeatureMatrix g_prime;          // l x d
};

struct FuseCtx {
  FeatureMatrix pg, pi;        // l x d projections
  FeatureMatrix attn_i, attn_g;  // l x l row-stochastic
  FeatureMatrix i_fused, g_fused;  // l x d
};

struct EmbedCtx {
  ImageCtx img;
  std::vector<int> geo_indices;  // l geohash character indices
  FeatureMatrix i_prime;         // l x d
  FuseCtx fuse;
  std::vector<double> m_raw;  // 2d, pre-normalization
  std::vector<double> m;      // 2d, unit
  double raw_norm = 0.0;
};

void image_forward(const model::SignboardImage& img, const EmbedderParams& p,
                   ImageCtx& ctx);
void image_backward(const EmbedderParams& p, const ImageCtx& ctx,
                    const FeatureMatrix& d_g_prime, ParamGrads& grads);

void geo_forward(const model::GeoPoint& pt, const EmbedderParams& p,
                 std::vector<int>& indices, FeatureMatrix& i_prime);
void geo_backward(const EmbedderParams& p, std::span<const int> indices,
                  const FeatureMatrix& d_i_prime, ParamGrads& grads);

void fuse_forward(const EmbedderParams& p, const FeatureMatrix& g_prime,
                  const FeatureMatrix& i_prime, FuseCtx& ctx);
// Accumulates parameter gradients into grads and input gradients into
// d_g_prime / d_i_prime (which must be zero-initialized l x d).
void fuse_backward(const EmbedderParams& p, const FuseCtx& ctx,
                   const FeatureMatrix& g_prime, const FeatureMatrix& i_prime,
                   const FeatureMatrix& d_i_fused, const FeatureMatrix& d_g_fused,
                   FeatureMatrix& d_g_prime, FeatureMatrix& d_i_prime,
                   ParamGrads& grads);

void embed_forward(const model::SignboardImage& img, const model::GeoPoint& pt,
                   const EmbedderParams& p, EmbedCtx& ctx);
void embed_backward(const EmbedderParams& p, const EmbedCtx& ctx,
                    std::span<const double> d_m, ParamGrads& grads);

}  // namespace detail

// Public feature-pipeline operations.
FeatureMatrix image_features(const model::SignboardImage& img,
                             const EmbedderParams& p);
FeatureMatrix geo_features(const model::GeoPoint& pt, const EmbedderParams& p);
// (G', I') -> (I, G): each side's projections attend over the other's.
std::pair<FeatureMatrix, FeatureMatrix> cross_attention_fuse(
    const FeatureMatrix& g_prime, const FeatureMatrix& i_prime,
    const EmbedderParams& p);

MultimodalEmbedding embed(const model::SignboardImage& img,
                          const model::GeoPoint& pt, const EmbedderParams& p);

// Hinge triplet objective on cosine similarity: zero exactly when the
// anchor-positive cosine beats the anchor-negative cosine by margin.
double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                    std::span<const double> negative, double margin);

struct TripletLossGrads {
  double loss = 0.0;
  bool active = false;
  std::vector<double> d_anchor, d_positive, d_negative;
};
TripletLossGrads triplet_loss_backward(std::span<const double> anchor,
                                       std::span<const double> positive,
                                       std::span<const double> negative,
                                       double margin);

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 0.2;
  int lr_decay_every = 7;     // epochs
  double lr_decay = 0.5;
  std::uint64_t seed = 7;
  int negatives_per_anchor = 3;            // triplets per train submission
  std::size_t max_triplets_per_epoch = 0;  // 0: no cap
};

struct TrainReport {
  std::vector<double> epoch_mean_loss;
  int skipped_single_view_pois = 0;
  std::size_t triplets_per_epoch = 0;
};

// Mini-batch gradient descent over (anchor, positive, negative) triplets:
// anchor/positive from the same POI's train submissions, negative from a
// different POI. Deterministic for a fixed seed; single-threaded.
TrainReport train(EmbedderParams& params, const model::Corpus& corpus,
                  const TrainConfig& cfg);

// Embeds items with `threads` workers; output order matches input order and
// is independent of thread count.
std::vector<MultimodalEmbedding> embed_all(
    std::span<const model::PoiRecord> pois, const EmbedderParams& p, int threads);

}  // namespace poiverify::embedder
