#include "poiverify/evalbench.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <ostream>
#include <thread>

#include "json.hpp"

namespace poiverify::evalbench {

using nlohmann::json;
using pipeline::VerificationRequest;
using pipeline::VerificationResult;

double sr_at_k(
    std::span<const std::pair<VerificationResult, std::uint64_t>> results, int k) {
  if (k != 1 && k != 3 && k != 5) throw param_error("sr_at_k: k must be 1, 3 or 5");
  if (results.empty()) throw param_error("sr_at_k: empty result list");
  std::size_t hits = 0;
  for (const auto& [result, truth] : results) {
    const std::size_t limit =
        std::min<std::size_t>(result.ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < limit; ++i) {
      if (result.ranked[i].id == truth) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

namespace {

// one closed-loop pass over [begin, end); returns per-worker completions
std::vector<std::size_t> run_pool(const VerifyFn& fn,
                                  std::span<const VerificationRequest> requests,
                                  std::size_t begin, std::size_t end, int workers,
                                  std::atomic<bool>& failed, std::string& error,
                                  std::mutex& error_mu) {
  std::atomic<std::size_t> next{begin};
  std::vector<std::size_t> done(static_cast<std::size_t>(workers), 0);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (;;) {
        if (failed.load(std::memory_order_relaxed)) return;
        const std::size_t i = next.fetch_add(1);
        if (i >= end) return;
        try {
          (void)fn(requests[i]);
          ++done[static_cast<std::size_t>(w)];
        } catch (const std::exception& e) {
          {
            const std::lock_guard<std::mutex> lock(error_mu);
            if (error.empty()) error = e.what();
          }
          failed.store(true, std::memory_order_relaxed);
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  return done;
}

}  // namespace

QpsReport measure_qps(const VerifyFn& pipeline_fn,
                      std::span<const VerificationRequest> requests,
                      int worker_count, std::size_t warmup) {
  if (requests.empty()) throw param_error("measure_qps: no requests");
  if (worker_count < 1) throw param_error("measure_qps: workers must be >= 1");
  if (warmup >= requests.size())
    throw param_error("measure_qps: warmup leaves no measured requests");

  QpsReport report;
  report.workers = worker_count;
  report.warmup_requests = warmup;

  std::atomic<bool> failed{false};
  std::mutex error_mu;
  if (warmup > 0) {
    run_pool(pipeline_fn, requests, 0, warmup, worker_count, failed, report.error,
             error_mu);
  }
  if (failed.load()) {
    report.valid = false;
    return report;
  }

  const auto t0 = std::chrono::steady_clock::now();
  report.per_worker = run_pool(pipeline_fn, requests, warmup, requests.size(),
                               worker_count, failed, report.error, error_mu);
  const auto t1 = std::chrono::steady_clock::now();

  report.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  for (const std::size_t c : report.per_worker) report.measured_requests += c;
  report.valid = !failed.load() && report.measured_requests > 0;
  if (report.valid && report.wall_seconds > 0.0)
    report.qps = static_cast<double>(report.measured_requests) / report.wall_seconds;
  return report;
}

std::vector<VerificationRequest> test_requests(const model::Corpus& corpus,
                                               std::size_t limit) {
  std::vector<VerificationRequest> out;
  std::unordered_map<std::uint64_t, const std::string*> names;
  names.reserve(corpus.pois.size());
  for (const auto& poi : corpus.pois) names.emplace(poi.id, &poi.name);
  for (const auto& sub : corpus.submissions) {
    if (sub.split != model::Split::test) continue;
    if (limit > 0 && out.size() >= limit) break;
    VerificationRequest req;
    req.signboard = sub.signboard;
    req.shot_location = sub.shot_location;
    req.depicted_name = *names.at(sub.truth_id);
    out.push_back(std::move(req));
  }
  return out;
}

std::vector<std::uint64_t> test_truths(const model::Corpus& corpus,
                                       std::size_t limit) {
  std::vector<std::uint64_t> out;
  for (const auto& sub : corpus.submissions) {
    if (sub.split != model::Split::test) continue;
    if (limit > 0 && out.size() >= limit) break;
    out.push_back(sub.truth_id);
  }
  return out;
}

VerifyFn make_variant_fn(pipeline::Variant variant, const BenchInputs& in) {
  auto require = [](const void* p, const char* what) {
    if (p == nullptr)
      throw dependency_error(std::string("run_benchmark: missing artifact: ") + what);
  };
  switch (variant) {
    case pipeline::Variant::v1:
      require(in.spatial, "spatial index");
      require(in.table, "name table");
      require(in.channel, "ocr channel");
      require(in.corrector, "name corrector");
      return [&in](const VerificationRequest& req) {
        return pipeline::verify_v1(req, *in.spatial, *in.table, *in.channel,
                                   *in.corrector, in.pipeline_cfg);
      };
    case pipeline::Variant::v1_star:
      require(in.spatial, "spatial index");
      require(in.table, "name table");
      require(in.channel, "ocr channel");
      require(in.corrector, "name corrector");
      return [&in](const VerificationRequest& req) {
        return pipeline::verify_v1star(req, *in.spatial, *in.table, *in.channel,
                                       *in.corrector, in.pipeline_cfg);
      };
    case pipeline::Variant::v2:
      require(in.params, "trained embedder params");
      require(in.forest, "ann forest");
      return [&in](const VerificationRequest& req) {
        return pipeline::verify_v2(req, *in.params, *in.forest, in.pipeline_cfg);
      };
    case pipeline::Variant::v2_star:
      require(in.params, "trained embedder params");
      require(in.forest, "ann forest");
      require(in.table, "name table");
      require(in.channel, "ocr channel");
      require(in.corrector, "name corrector");
      return [&in](const VerificationRequest& req) {
        return pipeline::verify_v2star(req, *in.params, *in.forest, *in.table,
                                       *in.channel, *in.corrector, in.pipeline_cfg);
      };
  }
  throw state_error("unknown variant");
}

EvalReport run_benchmark(const BenchInputs& inputs, const BenchConfig& cfg) {
  if (inputs.corpus == nullptr)
    throw dependency_error("run_benchmark: missing artifact: corpus");
  const auto t0 = std::chrono::steady_clock::now();

  EvalReport report;
  report.config_fingerprint = cfg.config_fingerprint;
  report.corpus_pois = inputs.corpus->pois.size();
  report.corpus_submissions = inputs.corpus->submissions.size();
  report.workers = cfg.workers;

  const auto sr_reqs = test_requests(*inputs.corpus, cfg.max_sr_queries);
  const auto sr_truths = test_truths(*inputs.corpus, cfg.max_sr_queries);
  if (sr_reqs.empty()) throw param_error("run_benchmark: corpus has no test split");
  report.n_sr_queries = sr_reqs.size();

  const auto qps_reqs = test_requests(*inputs.corpus, cfg.max_qps_queries);
  report.n_qps_queries = qps_reqs.size();
  const auto warmup = static_cast<std::size_t>(
      std::floor(cfg.warmup_fraction * static_cast<double>(qps_reqs.size())));

  for (const pipeline::Variant variant : pipeline::kAllVariants) {
    const VerifyFn fn = make_variant_fn(variant, inputs);
    VariantRow row;
    row.variant = std::string(pipeline::variant_name(variant));
    row.n_queries = sr_reqs.size();

    std::vector<std::pair<VerificationResult, std::uint64_t>> results;
    results.reserve(sr_reqs.size());
    for (std::size_t i = 0; i < sr_reqs.size(); ++i)
      results.emplace_back(fn(sr_reqs[i]), sr_truths[i]);
    row.sr1 = sr_at_k(results, 1);
    row.sr3 = sr_at_k(results, 3);
    row.sr5 = sr_at_k(results, 5);

    const QpsReport qps = measure_qps(fn, qps_reqs, cfg.workers, warmup);
    if (!qps.valid)
      throw integrity_error("run_benchmark: pipeline failed mid-run: " + qps.error);
    row.qps = qps.qps;
    report.rows.push_back(std::move(row));
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string EvalReport::to_json() const {
  json rows_json = json::array();
  for (const auto& row : rows) {
    rows_json.push_back({{"variant", row.variant},
                         {"sr1", row.sr1},
                         {"sr3", row.sr3},
                         {"sr5", row.sr5},
                         {"qps", row.qps},
                         {"n_queries", row.n_queries}});
  }
  const json j = {
      {"format", "poiverify.report"},
      {"version", kReportFormatVersion},
      {"config_fingerprint", config_fingerprint},
      {"corpus_stats",
       {{"n_pois", corpus_pois}, {"n_submissions", corpus_submissions}}},
      {"n_sr_queries", n_sr_queries},
      {"n_qps_queries", n_qps_queries},
      {"workers", workers},
      {"wall_seconds", wall_seconds},
      {"rows", rows_json},
      {"reference",
       {{"variant", "expert-mapper"},
        {"accuracy", kReferenceExpertAccuracy},
        {"qps", kReferenceExpertQps},
        {"source", "externally reported production baseline; not measured"}}},
  };
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || j.value("format", "") != "poiverify.report")
    throw format_error("report: bad json");
  if (j.value("version", 0) != kReportFormatVersion)
    throw format_error("report: unsupported version");
  EvalReport r;
  r.config_fingerprint = j.value("config_fingerprint", "");
  r.corpus_pois = j.at("corpus_stats").value("n_pois", std::size_t{0});
  r.corpus_submissions = j.at("corpus_stats").value("n_submissions", std::size_t{0});
  r.n_sr_queries = j.value("n_sr_queries", std::size_t{0});
  r.n_qps_queries = j.value("n_qps_queries", std::size_t{0});
  r.workers = j.value("workers", 0);
  r.wall_seconds = j.value("wall_seconds", 0.0);
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("variant").get<std::string>(), row.at("sr1").get<double>(),
                      row.at("sr3").get<double>(), row.at("sr5").get<double>(),
                      row.at("qps").get<double>(),
                      row.at("n_queries").get<std::size_t>()});
  }
  return r;
}

void EvalReport::print_table(std::ostream& out) const {
  char line[160];
  out << "variant       SR@1     SR@3     SR@5          QPS   queries\n";
  out << "-----------------------------------------------------------\n";
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%-8s  %7.4f  %7.4f  %7.4f  %11.2f  %8zu\n",
                  row.variant.c_str(), row.sr1, row.sr3, row.sr5, row.qps,
                  row.n_queries);
    out << line;
  }
  std::snprintf(line, sizeof(line),
                "%-8s  %7.4f        -        -  %11.3f         -\n", "expert",
                kReferenceExpertAccuracy, kReferenceExpertQps);
  out << line;
  out << "(expert row: externally reported reference values, not measured here)\n";
}

}  // namespace poiverify::evalbench
