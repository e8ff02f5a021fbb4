#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "poiverify/annindex.hpp"
#include "poiverify/embedder.hpp"
#include "poiverify/geoindex.hpp"
#include "poiverify/model.hpp"
#include "poiverify/signboard.hpp"

namespace poiverify::pipeline {

enum class Variant : std::uint8_t { v1, v1_star, v2, v2_star };

std::string_view variant_name(Variant v);
Variant variant_from_name(std::string_view name);  // throws format_error
inline constexpr std::array<Variant, 4> kAllVariants = {
    Variant::v1, Variant::v1_star, Variant::v2, Variant::v2_star};

struct VerificationRequest {
  model::SignboardImage signboard;
  model::GeoPoint shot_location;
  // What a perfect reader would see on the signboard, before channel noise.
  // The string-level OCR simulation consumes this; required by v1, v1*, v2*.
  std::string depicted_name;
};

struct RankedCandidate {
  std::uint64_t id = 0;
  double score = 0.0;
};

struct VerificationResult {
  Variant variant = Variant::v1;
  std::vector<RankedCandidate> ranked;  // scores non-increasing, ids distinct
  std::vector<std::pair<std::string, double>> stage_timings_ms;
};

// Candidate-side name and outline-feature lookups, precomputed per corpus.
class NameTable {
 public:
  static NameTable from_corpus(std::span<const model::PoiRecord> pois,
                               bool with_outlines);

  const std::string* name(std::uint64_t id) const;
  const std::array<double, signboard::kOutlineFeatureDim>* outline(
      std::uint64_t id) const;

 private:
  std::unordered_map<std::uint64_t, std::string> names_;
  std::unordered_map<std::uint64_t, std::array<double, signboard::kOutlineFeatureDim>>
      outlines_;
};

struct PipelineConfig {
  double r_km = 1.0;       // geo-filter radius, stage 1 of v1/v1*
  int k_out = 5;           // ranking length
  int k_rerank = 10;       // ANN fan-out reranked by v2*
  std::size_t beam = 64;   // corrector beam
  int search_nodes = 80;   // ANN leaf-visit budget
};

// 1 - normalized Levenshtein distance; 1.0 when both strings are empty.
double name_similarity(std::string_view a, std::string_view b);

// Staged pipeline: geo-filter, simulated OCR + correction, name-rank.
VerificationResult verify_v1(const VerificationRequest& req,
                             const geoindex::SpatialIndex& spatial,
                             const NameTable& table,
                             const signboard::OcrChannel& channel,
                             const signboard::NameCorrector& corrector,
                             const PipelineConfig& cfg);

// v1 with outline-feature tie-breaking among equal name scores.
VerificationResult verify_v1star(const VerificationRequest& req,
                                 const geoindex::SpatialIndex& spatial,
                                 const NameTable& table,
                                 const signboard::OcrChannel& channel,
                                 const signboard::NameCorrector& corrector,
                                 const PipelineConfig& cfg);

// Embedding + ANN search, single pass.
VerificationResult verify_v2(const VerificationRequest& req,
                             const embedder::EmbedderParams& params,
                             const annindex::AnnForest& forest,
                             const PipelineConfig& cfg);

// ANN top-k_rerank candidates re-scored by the v1* multimodal ranker.
VerificationResult verify_v2star(const VerificationRequest& req,
                                 const embedder::EmbedderParams& params,
                                 const annindex::AnnForest& forest,
                                 const NameTable& table,
                                 const signboard::OcrChannel& channel,
                                 const signboard::NameCorrector& corrector,
                                 const PipelineConfig& cfg);

}  // namespace poiverify::pipeline
