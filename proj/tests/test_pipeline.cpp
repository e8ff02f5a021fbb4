#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "doctest.h"
#include "oracles.hpp"
#include "poiverify/pipeline.hpp"
#include "poiverify/runtime.hpp"

using namespace poiverify;
using namespace poiverify::pipeline;
using model::Corpus;
using model::GeoPoint;

namespace {

// Small world with one forced duplicate pair; artifacts built in-process.
struct Fixture {
  Corpus corpus;
  geoindex::SpatialIndex spatial;
  NameTable table;
  signboard::OcrChannel channel;
  signboard::NameCorrector corrector;
  embedder::EmbedderParams params;
  annindex::AnnForest forest;
  PipelineConfig cfg;

  static Fixture make(double p_sub = 0.0, int n_pois = 40) {
    model::CorpusGenConfig gen;
    gen.seed = 77;
    gen.n_pois = n_pois;
    gen.views_per_poi = 2;
    gen.test_poi_ratio = 0.0;
    gen.noise = model::NoiseParams::none();
    gen.duplicate_name_rate = 0.1;
    gen.duplicate_pair_max_km = 0.3;
    Corpus corpus = model::generate_corpus(gen);

    auto channel = signboard::OcrChannel::uniform(p_sub, 0.0, 0.0, 5);
    auto corrector = runtime::fit_corrector_from_corpus(corpus, channel);
    auto params = embedder::EmbedderParams::init({6, 16, 0.2}, 3);
    annindex::EmbeddingSet set;
    for (const auto& poi : corpus.pois)
      set.emplace_back(poi.id, embedder::embed(poi.signboard, poi.location, params).vec);
    auto forest = annindex::AnnForest::build(set, 4, 8, 9);
    auto spatial = geoindex::build_spatial_index(corpus.pois, 5);
    auto table = NameTable::from_corpus(corpus.pois, true);

    return Fixture{std::move(corpus),
                   std::move(spatial),
                   std::move(table),
                   std::move(channel),
                   std::move(corrector),
                   std::move(params),
                   std::move(forest),
                   PipelineConfig{1.0, 5, 10, 64, 256}};
  }

  VerificationRequest request_for(const model::PoiRecord& poi) const {
    return {poi.signboard, poi.location, poi.name};
  }
};

void check_result_invariants(const VerificationResult& r, int k_out) {
  CHECK(static_cast<int>(r.ranked.size()) <= k_out);
  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < r.ranked.size(); ++i) {
    CHECK(seen.insert(r.ranked[i].id).second);
    if (i > 0) CHECK(r.ranked[i - 1].score >= r.ranked[i].score);
  }
}

}  // namespace

TEST_CASE("name similarity basics") {
  CHECK(name_similarity("", "") == 1.0);
  CHECK(name_similarity("abc", "") == 0.0);
  CHECK(name_similarity("abc", "abc") == 1.0);
  CHECK(name_similarity("abc", "abd") == doctest::Approx(2.0 / 3.0));
  CHECK(name_similarity("ab", "abcd") == doctest::Approx(0.5));
}

TEST_CASE("v1: zero-noise unique name in radius is ranked first at 1.0") {
  const auto fx = Fixture::make();
  int tested = 0;
  std::unordered_map<std::string, int> name_count;
  for (const auto& poi : fx.corpus.pois) ++name_count[poi.name];
  for (const auto& poi : fx.corpus.pois) {
    if (name_count[poi.name] > 1) continue;  // duplicate pairs handled below
    const auto result =
        verify_v1(fx.request_for(poi), fx.spatial, fx.table, fx.channel,
                  fx.corrector, fx.cfg);
    REQUIRE(!result.ranked.empty());
    CHECK(result.ranked[0].id == poi.id);
    CHECK(result.ranked[0].score == doctest::Approx(1.0));
    check_result_invariants(result, fx.cfg.k_out);
    if (++tested >= 10) break;
  }
  CHECK(tested > 0);
}

TEST_CASE("v1: truth outside the radius is absent") {
  const auto fx = Fixture::make();
  const auto& poi = fx.corpus.pois.front();
  auto req = fx.request_for(poi);
  // move the shot far away: > r from every POI in the tiny region
  req.shot_location = {3.0, 3.0};
  const auto result =
      verify_v1(req, fx.spatial, fx.table, fx.channel, fx.corrector, fx.cfg);
  CHECK(result.ranked.empty());  // empty candidate set counts as a miss
}

TEST_CASE("v1 duplicate-name defect and the v1* outline fix") {
  const auto fx = Fixture::make();
  std::unordered_map<std::string, std::vector<const model::PoiRecord*>> groups;
  for (const auto& poi : fx.corpus.pois) groups[poi.name].push_back(&poi);

  int pairs_checked = 0;
  for (const auto& [name, members] : groups) {
    if (members.size() != 2) continue;
    for (const auto* truth : members) {
      const auto* other = members[0] == truth ? members[1] : members[0];
      const auto req = fx.request_for(*truth);

      const auto r1 = verify_v1(req, fx.spatial, fx.table, fx.channel,
                                fx.corrector, fx.cfg);
      REQUIRE(r1.ranked.size() >= 2);
      // both duplicates tie at the top; order falls back to ascending id
      CHECK(r1.ranked[0].score == r1.ranked[1].score);
      CHECK(r1.ranked[0].id == std::min(truth->id, other->id));
      CHECK(r1.ranked[1].id == std::max(truth->id, other->id));

      // the outline tie-break recovers the actual signboard
      const auto r1s = verify_v1star(req, fx.spatial, fx.table, fx.channel,
                                     fx.corrector, fx.cfg);
      REQUIRE(!r1s.ranked.empty());
      CHECK(r1s.ranked[0].id == truth->id);
      ++pairs_checked;
    }
  }
  CHECK(pairs_checked >= 2);
}

TEST_CASE("v1* equals v1 whenever no name ties exist") {
  const auto fx = Fixture::make(0.02);
  Rng rng(5);
  for (int trial = 0; trial < 15; ++trial) {
    const auto& poi = fx.corpus.pois[rng.next_below(fx.corpus.pois.size())];
    const auto req = fx.request_for(poi);
    const auto r1 =
        verify_v1(req, fx.spatial, fx.table, fx.channel, fx.corrector, fx.cfg);
    const auto r1s =
        verify_v1star(req, fx.spatial, fx.table, fx.channel, fx.corrector, fx.cfg);
    // tie-break only fires on exact score ties
    bool has_tie = false;
    for (std::size_t i = 1; i < r1.ranked.size(); ++i)
      if (r1.ranked[i].score == r1.ranked[i - 1].score) has_tie = true;
    if (!has_tie) {
      REQUIRE(r1.ranked.size() == r1s.ranked.size());
      for (std::size_t i = 0; i < r1.ranked.size(); ++i)
        CHECK(r1.ranked[i].id == r1s.ranked[i].id);
    }
    check_result_invariants(r1s, fx.cfg.k_out);
  }
}

TEST_CASE("v2: self-retrieval with the database vector itself") {
  const auto fx = Fixture::make();
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const auto& poi = fx.corpus.pois[rng.next_below(fx.corpus.pois.size())];
    const auto result = verify_v2(fx.request_for(poi), fx.params, fx.forest, fx.cfg);
    REQUIRE(!result.ranked.empty());
    CHECK(result.ranked[0].id == poi.id);
    CHECK(result.ranked[0].score == doctest::Approx(1.0).epsilon(1e-6));
    check_result_invariants(result, fx.cfg.k_out);
  }
}

TEST_CASE("v2: single-leaf forest equals brute force over embeddings") {
  const auto fx = Fixture::make();
  annindex::EmbeddingSet set;
  for (const auto& poi : fx.corpus.pois)
    set.emplace_back(poi.id,
                     embedder::embed(poi.signboard, poi.location, fx.params).vec);
  const auto single_leaf =
      annindex::AnnForest::build(set, 1, set.size(), 13);

  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto& sub = fx.corpus.submissions[rng.next_below(fx.corpus.submissions.size())];
    VerificationRequest req{sub.signboard, sub.shot_location, ""};
    const auto via_pipeline = verify_v2(req, fx.params, single_leaf, fx.cfg);
    const auto m = embedder::embed(sub.signboard, sub.shot_location, fx.params);
    const auto exact = annindex::brute_force_knn(set, m.vec, fx.cfg.k_out);
    REQUIRE(via_pipeline.ranked.size() == exact.size());
    for (std::size_t i = 0; i < exact.size(); ++i) {
      CHECK(via_pipeline.ranked[i].id == exact[i].id);
      CHECK(via_pipeline.ranked[i].score == exact[i].score);
    }
  }
}

TEST_CASE("v2: deterministic across repeated calls") {
  const auto fx = Fixture::make();
  const auto req = fx.request_for(fx.corpus.pois[3]);
  const auto a = verify_v2(req, fx.params, fx.forest, fx.cfg);
  const auto b = verify_v2(req, fx.params, fx.forest, fx.cfg);
  REQUIRE(a.ranked.size() == b.ranked.size());
  for (std::size_t i = 0; i < a.ranked.size(); ++i) {
    CHECK(a.ranked[i].id == b.ranked[i].id);
    CHECK(a.ranked[i].score == b.ranked[i].score);
  }
}

TEST_CASE("v2*: k_rerank=1 degenerates to the v2 top-1") {
  const auto fx = Fixture::make();
  auto cfg = fx.cfg;
  cfg.k_rerank = 1;
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto& poi = fx.corpus.pois[rng.next_below(fx.corpus.pois.size())];
    const auto req = fx.request_for(poi);
    const auto v2_result = verify_v2(req, fx.params, fx.forest, fx.cfg);
    const auto v2s_result = verify_v2star(req, fx.params, fx.forest, fx.table,
                                          fx.channel, fx.corrector, cfg);
    REQUIRE(!v2_result.ranked.empty());
    REQUIRE(v2s_result.ranked.size() == 1);
    CHECK(v2s_result.ranked[0].id == v2_result.ranked[0].id);
  }
}

TEST_CASE("v2*: exact name match promotes the truth above a closer vector") {
  // two POIs: the query uses B's image and location (so the embedding side
  // ranks B first) but depicts A's name; the rerank promotes A.
  model::CorpusGenConfig gen;
  gen.seed = 123;
  gen.n_pois = 2;
  gen.views_per_poi = 1;
  gen.test_poi_ratio = 0.0;
  gen.duplicate_name_rate = 0.0;
  gen.noise = model::NoiseParams::none();
  const auto corpus = model::generate_corpus(gen);
  const auto& poi_a = corpus.pois[0];
  const auto& poi_b = corpus.pois[1];

  const auto params = embedder::EmbedderParams::init({6, 16, 0.2}, 3);
  annindex::EmbeddingSet set;
  for (const auto& poi : corpus.pois)
    set.emplace_back(poi.id, embedder::embed(poi.signboard, poi.location, params).vec);
  const auto forest = annindex::AnnForest::build(set, 2, 4, 9);
  const auto table = NameTable::from_corpus(corpus.pois, true);
  const auto channel = signboard::OcrChannel::identity(1);
  const auto corrector = runtime::fit_corrector_from_corpus(corpus, channel);

  PipelineConfig cfg{1.0, 5, 2, 64, 64};
  VerificationRequest req{poi_b.signboard, poi_b.location, poi_a.name};

  const auto v2_result = verify_v2(req, params, forest, cfg);
  REQUIRE(v2_result.ranked.size() >= 2);
  CHECK(v2_result.ranked[0].id == poi_b.id);  // vector-closest first

  const auto v2s_result =
      verify_v2star(req, params, forest, table, channel, corrector, cfg);
  REQUIRE(!v2s_result.ranked.empty());
  CHECK(v2s_result.ranked[0].id == poi_a.id);  // promoted by exact name match
  check_result_invariants(v2s_result, cfg.k_out);
}

TEST_CASE("dimension mismatches are integrity errors") {
  const auto fx = Fixture::make();
  const auto other_params = embedder::EmbedderParams::init({6, 8, 0.2}, 3);
  const auto req = fx.request_for(fx.corpus.pois[0]);
  CHECK_THROWS_AS(verify_v2(req, other_params, fx.forest, fx.cfg), integrity_error);
  CHECK_THROWS_AS(verify_v2star(req, other_params, fx.forest, fx.table, fx.channel,
                                fx.corrector, fx.cfg),
                  integrity_error);
}

TEST_CASE("missing depicted name is rejected for OCR-dependent variants") {
  const auto fx = Fixture::make();
  auto req = fx.request_for(fx.corpus.pois[0]);
  req.depicted_name.clear();
  CHECK_THROWS_AS(
      verify_v1(req, fx.spatial, fx.table, fx.channel, fx.corrector, fx.cfg),
      param_error);
  CHECK_NOTHROW(verify_v2(req, fx.params, fx.forest, fx.cfg));
}

TEST_CASE("stage timings are recorded per stage") {
  const auto fx = Fixture::make();
  const auto req = fx.request_for(fx.corpus.pois[0]);
  const auto r1 =
      verify_v1(req, fx.spatial, fx.table, fx.channel, fx.corrector, fx.cfg);
  REQUIRE(r1.stage_timings_ms.size() == 3);
  CHECK(r1.stage_timings_ms[0].first == "gsi");
  CHECK(r1.stage_timings_ms[1].first == "ocr");
  CHECK(r1.stage_timings_ms[2].first == "cpr");
  const auto r2 = verify_v2(req, fx.params, fx.forest, fx.cfg);
  REQUIRE(r2.stage_timings_ms.size() == 2);
  CHECK(r2.stage_timings_ms[0].first == "dme");
  CHECK(r2.stage_timings_ms[1].first == "ann");
  for (const auto& [stage, ms] : r1.stage_timings_ms) CHECK(ms >= 0.0);
}
