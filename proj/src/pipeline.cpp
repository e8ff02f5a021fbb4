#include "poiverify/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace poiverify::pipeline {

using Clock = std::chrono::steady_clock;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::v1: return "v1";
    case Variant::v1_star: return "v1*";
    case Variant::v2: return "v2";
    case Variant::v2_star: return "v2*";
  }
  throw state_error("unknown variant");
}

Variant variant_from_name(std::string_view name) {
  if (name == "v1") return Variant::v1;
  if (name == "v1*" || name == "v1star") return Variant::v1_star;
  if (name == "v2") return Variant::v2;
  if (name == "v2*" || name == "v2star") return Variant::v2_star;
  throw format_error("unknown variant: " + std::string(name));
}

NameTable NameTable::from_corpus(std::span<const model::PoiRecord> pois,
                                 bool with_outlines) {
  NameTable t;
  t.names_.reserve(pois.size());
  if (with_outlines) t.outlines_.reserve(pois.size());
  for (const auto& poi : pois) {
    t.names_.emplace(poi.id, poi.name);
    if (with_outlines)
      t.outlines_.emplace(poi.id, signboard::outline_feature(poi.signboard));
  }
  return t;
}

const std::string* NameTable::name(std::uint64_t id) const {
  const auto it = names_.find(id);
  return it == names_.end() ? nullptr : &it->second;
}

const std::array<double, signboard::kOutlineFeatureDim>* NameTable::outline(
    std::uint64_t id) const {
  const auto it = outlines_.find(id);
  return it == outlines_.end() ? nullptr : &it->second;
}

double name_similarity(std::string_view a, std::string_view b) {
  const std::size_t n = a.size();
  const std::size_t m = b.size();
  if (n == 0 && m == 0) return 1.0;
  if (n == 0 || m == 0) return 0.0;
  thread_local std::vector<int> prev, cur;
  prev.resize(m + 1);
  cur.resize(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min(sub, std::min(prev[j], cur[j - 1]) + 1);
    }
    std::swap(prev, cur);
  }
  return 1.0 - static_cast<double>(prev[m]) / static_cast<double>(std::max(n, m));
}

namespace {

struct StageTimer {
  explicit StageTimer(VerificationResult& result) : result_(result), last_(Clock::now()) {}
  void mark(const char* stage) {
    const auto now = Clock::now();
    result_.stage_timings_ms.emplace_back(
        stage, std::chrono::duration<double, std::milli>(now - last_).count());
    last_ = now;
  }
  VerificationResult& result_;
  Clock::time_point last_;
};

struct ScoredCandidate {
  std::uint64_t id = 0;
  double name_sim = 0.0;
  double outline_cos = 0.0;
  double ann_score = 0.0;
};

// embeds through a per-thread reusable context; verify calls are pure, the
// buffer only amortizes allocations within one worker thread
const std::vector<double>& embed_request(const VerificationRequest& req,
                                         const embedder::EmbedderParams& params) {
  thread_local embedder::detail::EmbedCtx ctx;
  embedder::detail::embed_forward(req.signboard, req.shot_location, params, ctx);
  return ctx.m;
}

std::string read_and_correct(const VerificationRequest& req,
                             const signboard::OcrChannel& channel,
                             const signboard::NameCorrector& corrector,
                             std::size_t beam) {
  if (req.depicted_name.empty())
    throw param_error("pipeline: request carries no depicted name for OCR simulation");
  const std::string recognized = ocr_read(req.signboard, req.depicted_name, channel);
  if (recognized.empty()) return recognized;
  return correct_name(recognized, corrector, beam).name;
}

// Sort by name similarity, then resolve exact ties within each run by outline
// cosine (v1* path) before truncation.
void rank_by_name(std::vector<ScoredCandidate>& cands, bool outline_tiebreak,
                  bool ann_tiebreak) {
  std::sort(cands.begin(), cands.end(), [&](const auto& a, const auto& b) {
    if (a.name_sim != b.name_sim) return a.name_sim > b.name_sim;
    if (outline_tiebreak && a.outline_cos != b.outline_cos)
      return a.outline_cos > b.outline_cos;
    if (ann_tiebreak && a.ann_score != b.ann_score) return a.ann_score > b.ann_score;
    return a.id < b.id;
  });
}

void emit_ranking(VerificationResult& result, const std::vector<ScoredCandidate>& cands,
                  int k_out) {
  result.ranked.reserve(std::min<std::size_t>(cands.size(), k_out));
  for (const auto& c : cands) {
    if (static_cast<int>(result.ranked.size()) >= k_out) break;
    result.ranked.push_back({c.id, c.name_sim});
  }
}

VerificationResult verify_staged(const VerificationRequest& req,
                                 const geoindex::SpatialIndex& spatial,
                                 const NameTable& table,
                                 const signboard::OcrChannel& channel,
                                 const signboard::NameCorrector& corrector,
                                 const PipelineConfig& cfg, bool outline_tiebreak) {
  VerificationResult result;
  result.variant = outline_tiebreak ? Variant::v1_star : Variant::v1;
  StageTimer timer(result);

  const auto candidate_ids = spatial.radius_query(req.shot_location, cfg.r_km);
  timer.mark("gsi");
  if (candidate_ids.empty()) {
    timer.mark("ocr");
    timer.mark("cpr");
    return result;
  }

  const std::string corrected = read_and_correct(req, channel, corrector, cfg.beam);
  timer.mark("ocr");

  std::vector<ScoredCandidate> cands;
  cands.reserve(candidate_ids.size());
  for (const std::uint64_t id : candidate_ids) {
    const std::string* name = table.name(id);
    if (name == nullptr)
      throw integrity_error("pipeline: candidate id missing from name table");
    cands.push_back({id, name_similarity(corrected, *name), 0.0, 0.0});
  }
  if (outline_tiebreak) {
    // outline cosine is only computed for candidates inside a name-score tie
    const auto query_outline = signboard::outline_feature(req.signboard);
    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
      if (a.name_sim != b.name_sim) return a.name_sim > b.name_sim;
      return a.id < b.id;
    });
    for (std::size_t i = 0; i < cands.size();) {
      std::size_t j = i + 1;
      while (j < cands.size() && cands[j].name_sim == cands[i].name_sim) ++j;
      if (j - i > 1) {
        for (std::size_t k = i; k < j; ++k) {
          const auto* feat = table.outline(cands[k].id);
          if (feat == nullptr)
            throw integrity_error("pipeline: outline features not precomputed");
          cands[k].outline_cos = signboard::cosine(query_outline, *feat);
        }
      }
      i = j;
    }
  }
  rank_by_name(cands, outline_tiebreak, false);
  emit_ranking(result, cands, cfg.k_out);
  timer.mark("cpr");
  return result;
}

}  // namespace

VerificationResult verify_v1(const VerificationRequest& req,
                             const geoindex::SpatialIndex& spatial,
                             const NameTable& table,
                             const signboard::OcrChannel& channel,
                             const signboard::NameCorrector& corrector,
                             const PipelineConfig& cfg) {
  return verify_staged(req, spatial, table, channel, corrector, cfg, false);
}

VerificationResult verify_v1star(const VerificationRequest& req,
                                 const geoindex::SpatialIndex& spatial,
                                 const NameTable& table,
                                 const signboard::OcrChannel& channel,
                                 const signboard::NameCorrector& corrector,
                                 const PipelineConfig& cfg) {
  return verify_staged(req, spatial, table, channel, corrector, cfg, true);
}

VerificationResult verify_v2(const VerificationRequest& req,
                             const embedder::EmbedderParams& params,
                             const annindex::AnnForest& forest,
                             const PipelineConfig& cfg) {
  if (params.embedding_dim() != forest.dim())
    throw integrity_error("verify_v2: embedding dim does not match forest dim");
  VerificationResult result;
  result.variant = Variant::v2;
  StageTimer timer(result);

  const auto& m = embed_request(req, params);
  timer.mark("dme");

  const auto neighbors =
      forest.query(m, annindex::AnnQueryBudget{cfg.k_out, cfg.search_nodes});
  result.ranked.reserve(neighbors.size());
  for (const auto& n : neighbors) result.ranked.push_back({n.id, n.score});
  timer.mark("ann");
  return result;
}

VerificationResult verify_v2star(const VerificationRequest& req,
                                 const embedder::EmbedderParams& params,
                                 const annindex::AnnForest& forest,
                                 const NameTable& table,
                                 const signboard::OcrChannel& channel,
                                 const signboard::NameCorrector& corrector,
                                 const PipelineConfig& cfg) {
  if (params.embedding_dim() != forest.dim())
    throw integrity_error("verify_v2star: embedding dim does not match forest dim");
  VerificationResult result;
  result.variant = Variant::v2_star;
  StageTimer timer(result);

  const auto& m = embed_request(req, params);
  timer.mark("dme");
  const auto neighbors =
      forest.query(m, annindex::AnnQueryBudget{cfg.k_rerank, cfg.search_nodes});
  timer.mark("ann");

  if (neighbors.empty()) {
    timer.mark("rerank");
    return result;
  }
  const std::string corrected = read_and_correct(req, channel, corrector, cfg.beam);
  const auto query_outline = signboard::outline_feature(req.signboard);
  std::vector<ScoredCandidate> cands;
  cands.reserve(neighbors.size());
  for (const auto& n : neighbors) {
    const std::string* name = table.name(n.id);
    const auto* feat = table.outline(n.id);
    if (name == nullptr || feat == nullptr)
      throw integrity_error("verify_v2star: candidate missing from name table");
    cands.push_back({n.id, name_similarity(corrected, *name),
                     signboard::cosine(query_outline, *feat), n.score});
  }
  rank_by_name(cands, true, true);
  emit_ranking(result, cands, cfg.k_out);
  timer.mark("rerank");
  return result;
}

}  // namespace poiverify::pipeline
