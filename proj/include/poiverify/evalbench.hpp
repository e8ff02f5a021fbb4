#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "poiverify/pipeline.hpp"

namespace poiverify::evalbench {

// Fraction of results whose top-k ranked ids contain the truth id. An empty
// ranked list counts as a miss.
double sr_at_k(
    std::span<const std::pair<pipeline::VerificationResult, std::uint64_t>> results,
    int k);

using VerifyFn = std::function<pipeline::VerificationResult(
    const pipeline::VerificationRequest&)>;

struct QpsReport {
  double qps = 0.0;
  double wall_seconds = 0.0;
  std::size_t measured_requests = 0;
  std::size_t warmup_requests = 0;
  int workers = 0;
  std::vector<std::size_t> per_worker;  // measured completions per worker
  bool valid = true;                    // false when a pipeline call threw mid-run
  std::string error;
};

// Closed-loop worker pool: each worker issues the next request on completion.
// Warmup requests run first and are excluded from the timed region; only
// verify calls are inside it.
QpsReport measure_qps(const VerifyFn& pipeline_fn,
                      std::span<const pipeline::VerificationRequest> requests,
                      int worker_count, std::size_t warmup);

struct BenchConfig {
  int workers = 2;
  double warmup_fraction = 0.1;
  std::size_t max_sr_queries = 5000;   // 0: all test submissions
  std::size_t max_qps_queries = 400;   // 0: all
  std::string config_fingerprint;      // echoed into the report
};

// Everything the four variants need; missing pieces raise dependency_error
// naming the artifact.
struct BenchInputs {
  const model::Corpus* corpus = nullptr;
  const geoindex::SpatialIndex* spatial = nullptr;
  const pipeline::NameTable* table = nullptr;
  const signboard::OcrChannel* channel = nullptr;
  const signboard::NameCorrector* corrector = nullptr;
  const embedder::EmbedderParams* params = nullptr;
  const annindex::AnnForest* forest = nullptr;
  pipeline::PipelineConfig pipeline_cfg;
};

inline constexpr int kReportFormatVersion = 1;

struct VariantRow {
  std::string variant;
  double sr1 = 0.0, sr3 = 0.0, sr5 = 0.0;
  double qps = 0.0;
  std::size_t n_queries = 0;
};

struct EvalReport {
  std::string config_fingerprint;
  std::size_t corpus_pois = 0;
  std::size_t corpus_submissions = 0;
  std::size_t n_sr_queries = 0;
  std::size_t n_qps_queries = 0;
  int workers = 0;
  double wall_seconds = 0.0;
  std::vector<VariantRow> rows;  // exactly v1, v1*, v2, v2*

  // Externally reported human-expert baseline; never measured here.
  static constexpr double kReferenceExpertAccuracy = 0.9452;
  static constexpr double kReferenceExpertQps = 0.007;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
  void print_table(std::ostream& out) const;
};

// Evaluates all four variants on the identical test-split request set.
EvalReport run_benchmark(const BenchInputs& inputs, const BenchConfig& cfg);

// The request list run_benchmark uses: test-split submissions in corpus order.
std::vector<pipeline::VerificationRequest> test_requests(
    const model::Corpus& corpus, std::size_t limit);
std::vector<std::uint64_t> test_truths(const model::Corpus& corpus,
                                       std::size_t limit);

// The returned closure holds a reference to `inputs`; keep it alive for the
// closure's lifetime.
VerifyFn make_variant_fn(pipeline::Variant variant, const BenchInputs& inputs);

}  // namespace poiverify::evalbench
