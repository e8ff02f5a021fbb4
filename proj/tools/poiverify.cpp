#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "poiverify/serve.hpp"

namespace fs = std::filesystem;
using namespace poiverify;

namespace {

volatile std::sig_atomic_t g_signal = 0;
void on_signal(int) { g_signal = 1; }

runtime::RunConfig resolve_config(const std::string& config_path) {
  if (config_path.empty()) return runtime::RunConfig{};
  return runtime::load_config_file(config_path);
}

void ensure_out_dir(const runtime::RunConfig& cfg) {
  fs::create_directories(cfg.paths.out_dir);
}

runtime::ArtifactEntry make_entry(const runtime::RunConfig& cfg, std::string kind,
                                  std::string path, int format_version) {
  runtime::ArtifactEntry e;
  e.kind = std::move(kind);
  e.path = path;
  e.format_version = format_version;
  e.content_hash = runtime::hash_file(path);
  e.config_fingerprint = runtime::config_fingerprint(cfg);
  return e;
}

int cmd_generate(const runtime::RunConfig& cfg, bool force) {
  ensure_out_dir(cfg);
  const std::string corpus_path = cfg.paths.resolve(cfg.paths.corpus);
  if (fs::exists(corpus_path) && !force) {
    std::cerr << "refusing to overwrite " << corpus_path << " (use --force)\n";
    return runtime::kExitUsage;
  }
  const auto corpus = model::generate_corpus(cfg.corpus);
  model::save_corpus_jsonl(corpus, corpus_path);

  const std::string manifest_path = cfg.paths.resolve(cfg.paths.manifest);
  auto manifest = runtime::Manifest::load_or_empty(manifest_path);
  manifest.put(make_entry(cfg, "corpus", corpus_path, model::kCorpusFormatVersion));
  manifest.save(manifest_path);

  std::cout << "corpus: " << corpus.pois.size() << " POIs, "
            << corpus.submissions.size() << " submissions -> " << corpus_path
            << "\n";
  return runtime::kExitOk;
}

int cmd_train(const runtime::RunConfig& cfg) {
  ensure_out_dir(cfg);
  const std::string manifest_path = cfg.paths.resolve(cfg.paths.manifest);
  auto manifest = runtime::Manifest::load_or_empty(manifest_path);
  const auto& corpus_entry = manifest.require_verified("corpus");
  const auto corpus = model::load_corpus_jsonl(corpus_entry.path);

  auto params = embedder::EmbedderParams::init(cfg.hyper, cfg.train.seed);
  const auto report = embedder::train(params, corpus, cfg.train);
  for (std::size_t e = 0; e < report.epoch_mean_loss.size(); ++e)
    std::printf("epoch %2zu  mean loss %.6f\n", e + 1, report.epoch_mean_loss[e]);
  if (report.skipped_single_view_pois > 0)
    std::cout << "warning: skipped " << report.skipped_single_view_pois
              << " POIs with a single train view\n";

  const std::string params_path = cfg.paths.resolve(cfg.paths.params);
  params.save(params_path);
  manifest.put(make_entry(cfg, "params", params_path, 1));

  const auto channel = runtime::make_channel(cfg.ocr);
  const auto corrector = runtime::fit_corrector_from_corpus(corpus, channel);
  const std::string corrector_path = cfg.paths.resolve(cfg.paths.corrector);
  corrector.save_jsonl(corrector_path);
  manifest.put(make_entry(cfg, "corrector", corrector_path, 1));
  manifest.save(manifest_path);

  std::cout << "params -> " << params_path << "\ncorrector -> " << corrector_path
            << "\n";
  return runtime::kExitOk;
}

int cmd_build_index(const runtime::RunConfig& cfg) {
  ensure_out_dir(cfg);
  const std::string manifest_path = cfg.paths.resolve(cfg.paths.manifest);
  auto manifest = runtime::Manifest::load_or_empty(manifest_path);
  const auto& corpus_entry = manifest.require_verified("corpus");
  const auto corpus = model::load_corpus_jsonl(corpus_entry.path);

  const auto spatial = geoindex::build_spatial_index(corpus.pois, cfg.geo_precision);
  const std::string spatial_path = cfg.paths.resolve(cfg.paths.spatial);
  spatial.save(spatial_path);
  manifest.put(make_entry(cfg, "spatial", spatial_path, 1));

  const auto& params_entry = manifest.require_verified("params");
  const auto params = embedder::EmbedderParams::load(params_entry.path);
  const int threads =
      std::max(1u, std::thread::hardware_concurrency());
  const auto embeddings = embedder::embed_all(corpus.pois, params, threads);
  annindex::EmbeddingSet set;
  set.reserve(corpus.pois.size());
  for (std::size_t i = 0; i < corpus.pois.size(); ++i)
    set.emplace_back(corpus.pois[i].id, embeddings[i].vec);
  const auto forest = annindex::AnnForest::build(set, cfg.ann.n_trees,
                                                 cfg.ann.leaf_cap, cfg.ann.seed,
                                                 threads);
  const std::string forest_path = cfg.paths.resolve(cfg.paths.forest);
  forest.save(forest_path);
  manifest.put(make_entry(cfg, "forest", forest_path, 1));
  manifest.save(manifest_path);

  std::cout << "spatial index: " << spatial.size() << " POIs -> " << spatial_path
            << "\nann forest: " << forest.size() << " vectors, "
            << forest.n_trees() << " trees (mean leaf depth "
            << forest.stats().mean_leaf_depth << ") -> " << forest_path << "\n";
  return runtime::kExitOk;
}

int cmd_verify(const runtime::RunConfig& cfg, const std::string& variant_name,
               long submission_index, const std::string& signboard_b64, double lon,
               double lat, const std::string& name) {
  const auto variant = pipeline::variant_from_name(variant_name);
  const bool embedding_side =
      variant == pipeline::Variant::v2 || variant == pipeline::Variant::v2_star;
  const bool staged_side = variant != pipeline::Variant::v2;
  const auto wb = runtime::Workbench::load(cfg, embedding_side, staged_side);

  pipeline::VerificationRequest req;
  if (submission_index >= 0) {
    const auto reqs = evalbench::test_requests(*wb.corpus, 0);
    if (reqs.empty()) throw param_error("corpus has no test submissions");
    if (static_cast<std::size_t>(submission_index) >= reqs.size())
      throw param_error("submission index out of range (have " +
                        std::to_string(reqs.size()) + ")");
    req = reqs[static_cast<std::size_t>(submission_index)];
  } else {
    if (signboard_b64.empty())
      throw param_error("provide --submission or --signboard-b64 with --lon/--lat");
    const auto bytes = base64_decode(signboard_b64);
    if (bytes.size() != req.signboard.pixels.size())
      throw param_error("signboard must decode to 32x128 bytes");
    req.signboard.pixels = bytes;
    req.shot_location = {lon, lat};
    req.depicted_name = name;
  }

  const auto result = wb.verify(variant, req);
  std::cout << serve::result_to_json(result) << "\n";
  return runtime::kExitOk;
}

int cmd_bench(const runtime::RunConfig& cfg) {
  auto wb = runtime::Workbench::load(cfg, true, true);
  auto bench_cfg = cfg.bench;
  bench_cfg.config_fingerprint = runtime::config_fingerprint(cfg);
  const auto report = evalbench::run_benchmark(wb.bench_inputs(), bench_cfg);
  report.print_table(std::cout);

  const std::string report_path = cfg.paths.resolve(cfg.paths.report);
  {
    std::ofstream f(report_path, std::ios::binary);
    if (!f) throw format_error("cannot open for writing: " + report_path);
    f << report.to_json() << "\n";
  }
  const std::string manifest_path = cfg.paths.resolve(cfg.paths.manifest);
  auto manifest = runtime::Manifest::load_or_empty(manifest_path);
  manifest.put(make_entry(cfg, "report", report_path,
                          evalbench::kReportFormatVersion));
  manifest.save(manifest_path);
  std::cout << "report -> " << report_path << "\n";
  return runtime::kExitOk;
}

int cmd_serve(const runtime::RunConfig& cfg, std::uint16_t port) {
  auto wb = std::make_shared<runtime::Workbench>(
      runtime::Workbench::load(cfg, true, true));
  serve::Server server(std::static_pointer_cast<const runtime::Workbench>(wb));
  const std::uint16_t bound = server.start(port);
  std::cout << "serving on 127.0.0.1:" << bound << " (newline-delimited JSON)\n";

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (g_signal == 0) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  std::cout << "draining connections...\n";
  server.stop();
  return runtime::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"POI verification workbench: synthetic corpus, staged and "
               "embedding pipelines, benchmark harness"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (flags override it)");

  // common overrides
  std::string out_dir;
  app.add_option("--out-dir", out_dir, "artifact directory");

  auto* gen = app.add_subcommand("generate", "generate a synthetic corpus");
  bool force = false;
  gen->add_flag("--force", force, "overwrite an existing corpus");
  long n_pois = -1, views = -1;
  std::uint64_t seed = 0;
  bool seed_set = false;
  gen->add_option("--n-pois", n_pois, "train/valid POI count");
  gen->add_option("--views", views, "train views per POI");
  gen->add_option("--seed", seed, "corpus seed")->each([&](const std::string&) {
    seed_set = true;
  });

  auto* train = app.add_subcommand("train", "train embedder + fit corrector");
  long epochs = -1;
  train->add_option("--epochs", epochs, "training epochs");

  auto* build = app.add_subcommand("build-index", "build spatial index + ann forest");

  auto* verify = app.add_subcommand("verify", "verify one request");
  std::string variant = "v2";
  long submission = -1;
  std::string signboard_b64, depicted;
  double lon = 0.0, lat = 0.0;
  verify->add_option("--variant", variant, "v1 | v1* | v2 | v2*");
  verify->add_option("--submission", submission,
                     "index into the corpus test submissions");
  verify->add_option("--signboard-b64", signboard_b64, "packed 32x128 bitmap");
  verify->add_option("--lon", lon, "shot longitude");
  verify->add_option("--lat", lat, "shot latitude");
  verify->add_option("--name", depicted, "depicted name (v1/v1*/v2*)");

  auto* bench = app.add_subcommand("bench", "run the four-variant benchmark");

  auto* serve_cmd = app.add_subcommand("serve", "line-oriented verification service");
  std::uint16_t port = 0;
  serve_cmd->add_option("--port", port, "TCP port (0 = ephemeral)");

  auto* config_cmd =
      app.add_subcommand("config", "print the effective configuration as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? runtime::kExitOk : runtime::kExitUsage;
  }

  try {
    auto cfg = resolve_config(config_path);
    if (!out_dir.empty()) cfg.paths.out_dir = out_dir;
    if (n_pois > 0) cfg.corpus.n_pois = static_cast<int>(n_pois);
    if (views > 0) cfg.corpus.views_per_poi = static_cast<int>(views);
    if (seed_set) cfg.corpus.seed = seed;
    if (epochs > 0) cfg.train.epochs = static_cast<int>(epochs);

    if (gen->parsed()) return cmd_generate(cfg, force);
    if (train->parsed()) return cmd_train(cfg);
    if (build->parsed()) return cmd_build_index(cfg);
    if (verify->parsed())
      return cmd_verify(cfg, variant, submission, signboard_b64, lon, lat, depicted);
    if (bench->parsed()) return cmd_bench(cfg);
    if (serve_cmd->parsed()) return cmd_serve(cfg, port);
    if (config_cmd->parsed()) {
      std::cout << runtime::config_to_json(cfg) << "\n";
      return runtime::kExitOk;
    }
    return runtime::kExitUsage;
  } catch (const param_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return runtime::kExitUsage;
  } catch (const format_error& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return runtime::kExitCorruption;
  } catch (const corruption_error& e) {
    std::cerr << "corruption: " << e.what() << "\n";
    return runtime::kExitCorruption;
  } catch (const dependency_error& e) {
    std::cerr << "missing dependency: " << e.what() << "\n";
    return runtime::kExitDependency;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime::kExitRuntime;
  }
}
