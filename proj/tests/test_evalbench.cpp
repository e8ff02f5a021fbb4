#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <atomic>
#include <chrono>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "oracles.hpp"
#include "poiverify/evalbench.hpp"
#include "poiverify/runtime.hpp"

using namespace poiverify;
using namespace poiverify::evalbench;
using pipeline::VerificationRequest;
using pipeline::VerificationResult;

namespace {

VerificationResult ranked_result(std::vector<std::uint64_t> ids) {
  VerificationResult r;
  double score = 1.0;
  for (const auto id : ids) {
    r.ranked.push_back({id, score});
    score -= 0.01;
  }
  return r;
}

struct BenchFixture {
  model::Corpus corpus;
  geoindex::SpatialIndex spatial;
  pipeline::NameTable table;
  signboard::OcrChannel channel;
  signboard::NameCorrector corrector;
  embedder::EmbedderParams params;
  annindex::AnnForest forest;

  static BenchFixture make() {
    model::CorpusGenConfig gen;
    gen.seed = 55;
    gen.n_pois = 30;
    gen.views_per_poi = 2;
    gen.test_poi_ratio = 0.3;
    gen.test_views_per_poi = 2;
    gen.noise = model::NoiseParams::none();
    auto corpus = model::generate_corpus(gen);

    auto channel = signboard::OcrChannel::identity(3);
    auto corrector = runtime::fit_corrector_from_corpus(corpus, channel);
    auto params = embedder::EmbedderParams::init({5, 8, 0.2}, 7);
    annindex::EmbeddingSet set;
    for (const auto& poi : corpus.pois)
      set.emplace_back(poi.id,
                       embedder::embed(poi.signboard, poi.location, params).vec);
    auto forest = annindex::AnnForest::build(set, 4, 8, 9);
    auto spatial = geoindex::build_spatial_index(corpus.pois, 5);
    auto table = pipeline::NameTable::from_corpus(corpus.pois, true);
    return BenchFixture{std::move(corpus),  std::move(spatial), std::move(table),
                        std::move(channel), std::move(corrector), std::move(params),
                        std::move(forest)};
  }

  BenchInputs inputs() const {
    BenchInputs in;
    in.corpus = &corpus;
    in.spatial = &spatial;
    in.table = &table;
    in.channel = &channel;
    in.corrector = &corrector;
    in.params = &params;
    in.forest = &forest;
    in.pipeline_cfg = pipeline::PipelineConfig{1.0, 5, 10, 64, 64};
    return in;
  }
};

}  // namespace

TEST_CASE("sr_at_k trivial fixtures") {
  std::vector<std::pair<VerificationResult, std::uint64_t>> results;
  for (int i = 0; i < 8; ++i) results.emplace_back(ranked_result({7, 8, 9}), 7);
  CHECK(sr_at_k(results, 1) == 1.0);
  CHECK(sr_at_k(results, 3) == 1.0);
  CHECK(sr_at_k(results, 5) == 1.0);

  results.clear();
  for (int i = 0; i < 8; ++i) results.emplace_back(ranked_result({1, 2, 3}), 99);
  CHECK(sr_at_k(results, 1) == 0.0);
  CHECK(sr_at_k(results, 5) == 0.0);

  // empty ranked list counts as a miss
  results.clear();
  results.emplace_back(VerificationResult{}, 4);
  results.emplace_back(ranked_result({4}), 4);
  CHECK(sr_at_k(results, 1) == 0.5);
}

TEST_CASE("sr_at_k hand-enumerated fixture: 6 rank-1 and 4 rank-2 hits") {
  std::vector<std::pair<VerificationResult, std::uint64_t>> results;
  for (int i = 0; i < 6; ++i) results.emplace_back(ranked_result({5, 6, 7}), 5);
  for (int i = 0; i < 4; ++i) results.emplace_back(ranked_result({6, 5, 7}), 5);
  CHECK(sr_at_k(results, 1) == 0.6);
  CHECK(sr_at_k(results, 3) == 1.0);
  CHECK(sr_at_k(results, 5) == 1.0);
}

TEST_CASE("sr_at_k parameter errors") {
  std::vector<std::pair<VerificationResult, std::uint64_t>> results;
  CHECK_THROWS_AS(sr_at_k(results, 1), param_error);
  results.emplace_back(ranked_result({1}), 1);
  CHECK_THROWS_AS(sr_at_k(results, 2), param_error);
  CHECK_THROWS_AS(sr_at_k(results, 0), param_error);
}

TEST_CASE("measure_qps on a stubbed 10ms pipeline") {
  const VerifyFn stub = [](const VerificationRequest&) {
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
    return VerificationResult{};
  };
  std::vector<VerificationRequest> requests(100);
  const auto report = measure_qps(stub, requests, 1, 10);
  CHECK(report.valid);
  CHECK(report.measured_requests == 90);
  CHECK(report.workers == 1);
  CHECK(report.qps == doctest::Approx(100.0).epsilon(0.15));

  // doubling workers on the stub roughly doubles throughput
  const auto two = measure_qps(stub, requests, 2, 10);
  CHECK(two.valid);
  CHECK(two.qps >= 1.5 * report.qps);
}

TEST_CASE("measure_qps flags mid-run pipeline failures") {
  std::atomic<int> calls{0};
  const VerifyFn flaky = [&calls](const VerificationRequest&) {
    if (++calls > 25) throw std::runtime_error("boom");
    return VerificationResult{};
  };
  std::vector<VerificationRequest> requests(100);
  const auto report = measure_qps(flaky, requests, 2, 5);
  CHECK(!report.valid);
  CHECK(report.error == "boom");
}

TEST_CASE("measure_qps parameter errors") {
  const VerifyFn stub = [](const VerificationRequest&) {
    return VerificationResult{};
  };
  std::vector<VerificationRequest> none;
  CHECK_THROWS_AS(measure_qps(stub, none, 1, 0), param_error);
  std::vector<VerificationRequest> some(5);
  CHECK_THROWS_AS(measure_qps(stub, some, 0, 1), param_error);
  CHECK_THROWS_AS(measure_qps(stub, some, 1, 5), param_error);
}

TEST_CASE("run_benchmark covers exactly the four variants with sane metrics") {
  const auto fx = BenchFixture::make();
  BenchConfig cfg;
  cfg.workers = 2;
  cfg.max_sr_queries = 0;  // all test submissions
  cfg.max_qps_queries = 12;
  cfg.config_fingerprint = "fnv1a64:test";
  const auto report = run_benchmark(fx.inputs(), cfg);

  REQUIRE(report.rows.size() == 4);
  CHECK(report.rows[0].variant == "v1");
  CHECK(report.rows[1].variant == "v1*");
  CHECK(report.rows[2].variant == "v2");
  CHECK(report.rows[3].variant == "v2*");
  for (const auto& row : report.rows) {
    CHECK(row.sr1 >= 0.0);
    CHECK(row.sr1 <= row.sr3);
    CHECK(row.sr3 <= row.sr5);
    CHECK(row.sr5 <= 1.0);
    CHECK(row.qps > 0.0);
    CHECK(row.n_queries == report.n_sr_queries);
  }
  CHECK(report.config_fingerprint == "fnv1a64:test");

  // accuracy metrics are deterministic across runs (throughput may differ)
  const auto again = run_benchmark(fx.inputs(), cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(again.rows[i].sr1 == report.rows[i].sr1);
    CHECK(again.rows[i].sr3 == report.rows[i].sr3);
    CHECK(again.rows[i].sr5 == report.rows[i].sr5);
  }
}

TEST_CASE("run_benchmark names the missing artifact") {
  const auto fx = BenchFixture::make();
  BenchConfig cfg;
  cfg.max_qps_queries = 5;

  auto inputs = fx.inputs();
  inputs.forest = nullptr;
  CHECK_THROWS_WITH_AS(run_benchmark(inputs, cfg),
                       "run_benchmark: missing artifact: ann forest",
                       dependency_error);

  inputs = fx.inputs();
  inputs.params = nullptr;
  CHECK_THROWS_WITH_AS(run_benchmark(inputs, cfg),
                       "run_benchmark: missing artifact: trained embedder params",
                       dependency_error);

  inputs = fx.inputs();
  inputs.corpus = nullptr;
  CHECK_THROWS_AS(run_benchmark(inputs, cfg), dependency_error);
}

TEST_CASE("report json roundtrip and table rendering") {
  const auto fx = BenchFixture::make();
  BenchConfig cfg;
  cfg.workers = 1;
  cfg.max_sr_queries = 6;
  cfg.max_qps_queries = 6;
  cfg.warmup_fraction = 0.0;
  const auto report = run_benchmark(fx.inputs(), cfg);

  const auto text = report.to_json();
  const auto parsed = EvalReport::from_json(text);
  REQUIRE(parsed.rows.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(parsed.rows[i].variant == report.rows[i].variant);
    CHECK(parsed.rows[i].sr1 == report.rows[i].sr1);
    CHECK(parsed.rows[i].qps == report.rows[i].qps);
  }
  CHECK(parsed.corpus_pois == report.corpus_pois);

  std::ostringstream table;
  report.print_table(table);
  CHECK(table.str().find("v2*") != std::string::npos);
  CHECK(table.str().find("expert") != std::string::npos);
  CHECK(table.str().find("not measured") != std::string::npos);

  CHECK_THROWS_AS(EvalReport::from_json("{}"), format_error);
}

TEST_CASE("request set is identical across variants and permutation-stable SR") {
  const auto fx = BenchFixture::make();
  const auto reqs = test_requests(fx.corpus, 0);
  const auto truths = test_truths(fx.corpus, 0);
  REQUIRE(reqs.size() == truths.size());
  REQUIRE(reqs.size() == fx.corpus.count_submissions(model::Split::test));

  // SR is invariant to permuting the (result, truth) pair list
  const auto inputs = fx.inputs();
  const auto fn = make_variant_fn(pipeline::Variant::v1, inputs);
  std::vector<std::pair<VerificationResult, std::uint64_t>> results;
  for (std::size_t i = 0; i < reqs.size(); ++i)
    results.emplace_back(fn(reqs[i]), truths[i]);
  const double sr_orig = sr_at_k(results, 1);
  Rng rng(3);
  for (std::size_t i = results.size(); i > 1; --i)
    std::swap(results[i - 1], results[rng.next_below(i)]);
  CHECK(sr_at_k(results, 1) == sr_orig);
}
