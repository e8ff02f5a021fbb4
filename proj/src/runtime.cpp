#include "poiverify/runtime.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace poiverify::runtime {

using nlohmann::json;

std::string config_to_json(const RunConfig& cfg) {
  const json j = {
      {"version", kConfigVersion},
      {"corpus",
       {{"seed", cfg.corpus.seed},
        {"n_pois", cfg.corpus.n_pois},
        {"views_per_poi", cfg.corpus.views_per_poi},
        {"valid_views_per_poi", cfg.corpus.valid_views_per_poi},
        {"test_poi_ratio", cfg.corpus.test_poi_ratio},
        {"test_views_per_poi", cfg.corpus.test_views_per_poi},
        {"region",
         {{"lon_min", cfg.corpus.region.lon_min},
          {"lon_max", cfg.corpus.region.lon_max},
          {"lat_min", cfg.corpus.region.lat_min},
          {"lat_max", cfg.corpus.region.lat_max}}},
        {"noise",
         {{"pixel_sigma", cfg.corpus.noise.pixel_sigma},
          {"shift_max_px", cfg.corpus.noise.shift_max_px},
          {"contrast_min", cfg.corpus.noise.contrast_min},
          {"contrast_max", cfg.corpus.noise.contrast_max},
          {"jitter_max_km", cfg.corpus.noise.jitter_max_km}}},
        {"duplicate_name_rate", cfg.corpus.duplicate_name_rate},
        {"duplicate_pair_max_km", cfg.corpus.duplicate_pair_max_km},
        {"name_len_min", cfg.corpus.name_len_min},
        {"name_len_max", cfg.corpus.name_len_max}}},
      {"geo", {{"precision", cfg.geo_precision}}},
      {"embedder",
       {{"l", cfg.hyper.l},
        {"d", cfg.hyper.d},
        {"margin", cfg.hyper.margin},
        {"epochs", cfg.train.epochs},
        {"batch_size", cfg.train.batch_size},
        {"learning_rate", cfg.train.learning_rate},
        {"lr_decay_every", cfg.train.lr_decay_every},
        {"lr_decay", cfg.train.lr_decay},
        {"seed", cfg.train.seed},
        {"negatives_per_anchor", cfg.train.negatives_per_anchor},
        {"max_triplets_per_epoch", cfg.train.max_triplets_per_epoch}}},
      {"ocr",
       {{"p_sub", cfg.ocr.p_sub},
        {"p_delete", cfg.ocr.p_delete},
        {"p_insert", cfg.ocr.p_insert},
        {"seed", cfg.ocr.seed}}},
      {"ann",
       {{"n_trees", cfg.ann.n_trees},
        {"leaf_cap", cfg.ann.leaf_cap},
        {"seed", cfg.ann.seed}}},
      {"pipeline",
       {{"r_km", cfg.pipeline_cfg.r_km},
        {"k_out", cfg.pipeline_cfg.k_out},
        {"k_rerank", cfg.pipeline_cfg.k_rerank},
        {"beam", cfg.pipeline_cfg.beam},
        {"search_nodes", cfg.pipeline_cfg.search_nodes}}},
      {"bench",
       {{"workers", cfg.bench.workers},
        {"warmup_fraction", cfg.bench.warmup_fraction},
        {"max_sr_queries", cfg.bench.max_sr_queries},
        {"max_qps_queries", cfg.bench.max_qps_queries}}},
      {"paths",
       {{"out_dir", cfg.paths.out_dir},
        {"corpus", cfg.paths.corpus},
        {"params", cfg.paths.params},
        {"corrector", cfg.paths.corrector},
        {"forest", cfg.paths.forest},
        {"spatial", cfg.paths.spatial},
        {"report", cfg.paths.report},
        {"manifest", cfg.paths.manifest}}},
  };
  return j.dump(2);
}

RunConfig config_from_json(const std::string& text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw format_error("config: malformed json");
  if (j.value("version", 0) != kConfigVersion)
    throw format_error("config: unsupported schema version");

  RunConfig cfg;
  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    cfg.corpus.seed = c.value("seed", cfg.corpus.seed);
    cfg.corpus.n_pois = c.value("n_pois", cfg.corpus.n_pois);
    cfg.corpus.views_per_poi = c.value("views_per_poi", cfg.corpus.views_per_poi);
    cfg.corpus.valid_views_per_poi =
        c.value("valid_views_per_poi", cfg.corpus.valid_views_per_poi);
    cfg.corpus.test_poi_ratio = c.value("test_poi_ratio", cfg.corpus.test_poi_ratio);
    cfg.corpus.test_views_per_poi =
        c.value("test_views_per_poi", cfg.corpus.test_views_per_poi);
    if (c.contains("region")) {
      const auto& r = c.at("region");
      cfg.corpus.region.lon_min = r.value("lon_min", cfg.corpus.region.lon_min);
      cfg.corpus.region.lon_max = r.value("lon_max", cfg.corpus.region.lon_max);
      cfg.corpus.region.lat_min = r.value("lat_min", cfg.corpus.region.lat_min);
      cfg.corpus.region.lat_max = r.value("lat_max", cfg.corpus.region.lat_max);
    }
    if (c.contains("noise")) {
      const auto& n = c.at("noise");
      cfg.corpus.noise.pixel_sigma = n.value("pixel_sigma", cfg.corpus.noise.pixel_sigma);
      cfg.corpus.noise.shift_max_px =
          n.value("shift_max_px", cfg.corpus.noise.shift_max_px);
      cfg.corpus.noise.contrast_min =
          n.value("contrast_min", cfg.corpus.noise.contrast_min);
      cfg.corpus.noise.contrast_max =
          n.value("contrast_max", cfg.corpus.noise.contrast_max);
      cfg.corpus.noise.jitter_max_km =
          n.value("jitter_max_km", cfg.corpus.noise.jitter_max_km);
    }
    cfg.corpus.duplicate_name_rate =
        c.value("duplicate_name_rate", cfg.corpus.duplicate_name_rate);
    cfg.corpus.duplicate_pair_max_km =
        c.value("duplicate_pair_max_km", cfg.corpus.duplicate_pair_max_km);
    cfg.corpus.name_len_min = c.value("name_len_min", cfg.corpus.name_len_min);
    cfg.corpus.name_len_max = c.value("name_len_max", cfg.corpus.name_len_max);
  }
  if (j.contains("geo")) cfg.geo_precision = j.at("geo").value("precision", 5);
  if (j.contains("embedder")) {
    const auto& e = j.at("embedder");
    cfg.hyper.l = e.value("l", cfg.hyper.l);
    cfg.hyper.d = e.value("d", cfg.hyper.d);
    cfg.hyper.margin = e.value("margin", cfg.hyper.margin);
    cfg.train.epochs = e.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = e.value("batch_size", cfg.train.batch_size);
    cfg.train.learning_rate = e.value("learning_rate", cfg.train.learning_rate);
    cfg.train.lr_decay_every = e.value("lr_decay_every", cfg.train.lr_decay_every);
    cfg.train.lr_decay = e.value("lr_decay", cfg.train.lr_decay);
    cfg.train.seed = e.value("seed", cfg.train.seed);
    cfg.train.negatives_per_anchor =
        e.value("negatives_per_anchor", cfg.train.negatives_per_anchor);
    cfg.train.max_triplets_per_epoch =
        e.value("max_triplets_per_epoch", cfg.train.max_triplets_per_epoch);
  }
  if (j.contains("ocr")) {
    const auto& o = j.at("ocr");
    cfg.ocr.p_sub = o.value("p_sub", cfg.ocr.p_sub);
    cfg.ocr.p_delete = o.value("p_delete", cfg.ocr.p_delete);
    cfg.ocr.p_insert = o.value("p_insert", cfg.ocr.p_insert);
    cfg.ocr.seed = o.value("seed", cfg.ocr.seed);
  }
  if (j.contains("ann")) {
    const auto& a = j.at("ann");
    cfg.ann.n_trees = a.value("n_trees", cfg.ann.n_trees);
    cfg.ann.leaf_cap = a.value("leaf_cap", cfg.ann.leaf_cap);
    cfg.ann.seed = a.value("seed", cfg.ann.seed);
  }
  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    cfg.pipeline_cfg.r_km = p.value("r_km", cfg.pipeline_cfg.r_km);
    cfg.pipeline_cfg.k_out = p.value("k_out", cfg.pipeline_cfg.k_out);
    cfg.pipeline_cfg.k_rerank = p.value("k_rerank", cfg.pipeline_cfg.k_rerank);
    cfg.pipeline_cfg.beam = p.value("beam", cfg.pipeline_cfg.beam);
    cfg.pipeline_cfg.search_nodes =
        p.value("search_nodes", cfg.pipeline_cfg.search_nodes);
  }
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    cfg.bench.workers = b.value("workers", cfg.bench.workers);
    cfg.bench.warmup_fraction = b.value("warmup_fraction", cfg.bench.warmup_fraction);
    cfg.bench.max_sr_queries = b.value("max_sr_queries", cfg.bench.max_sr_queries);
    cfg.bench.max_qps_queries = b.value("max_qps_queries", cfg.bench.max_qps_queries);
  }
  if (j.contains("paths")) {
    const auto& p = j.at("paths");
    cfg.paths.out_dir = p.value("out_dir", cfg.paths.out_dir);
    cfg.paths.corpus = p.value("corpus", cfg.paths.corpus);
    cfg.paths.params = p.value("params", cfg.paths.params);
    cfg.paths.corrector = p.value("corrector", cfg.paths.corrector);
    cfg.paths.forest = p.value("forest", cfg.paths.forest);
    cfg.paths.spatial = p.value("spatial", cfg.paths.spatial);
    cfg.paths.report = p.value("report", cfg.paths.report);
    cfg.paths.manifest = p.value("manifest", cfg.paths.manifest);
  }
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw dependency_error("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_from_json(ss.str());
}

std::string config_fingerprint(const RunConfig& cfg) {
  return "fnv1a64:" + hex_u64(fnv1a64(config_to_json(cfg)));
}

std::string hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dependency_error("cannot open for hashing: " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize got = f.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return "fnv1a64:" + hex_u64(h);
}

Manifest Manifest::load_or_empty(const std::string& path) {
  Manifest m;
  std::ifstream f(path);
  if (!f) return m;
  std::stringstream ss;
  ss << f.rdbuf();
  const json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded() || j.value("version", 0) != 1)
    throw corruption_error("manifest: malformed file: " + path);
  for (const auto& e : j.at("artifacts")) {
    ArtifactEntry entry;
    entry.kind = e.at("kind").get<std::string>();
    entry.path = e.at("path").get<std::string>();
    entry.format_version = e.at("format_version").get<int>();
    entry.content_hash = e.at("content_hash").get<std::string>();
    entry.config_fingerprint = e.at("config_fingerprint").get<std::string>();
    m.entries_[entry.kind] = std::move(entry);
  }
  return m;
}

void Manifest::save(const std::string& path) const {
  json artifacts = json::array();
  for (const auto& [kind, e] : entries_) {
    artifacts.push_back({{"kind", e.kind},
                         {"path", e.path},
                         {"format_version", e.format_version},
                         {"content_hash", e.content_hash},
                         {"config_fingerprint", e.config_fingerprint}});
  }
  const json j = {{"version", 1}, {"artifacts", artifacts}};
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  f << j.dump(2) << '\n';
  if (!f.good()) throw format_error("write failed: " + path);
}

void Manifest::put(ArtifactEntry entry) { entries_[entry.kind] = std::move(entry); }

const ArtifactEntry* Manifest::find(const std::string& kind) const {
  const auto it = entries_.find(kind);
  return it == entries_.end() ? nullptr : &it->second;
}

const ArtifactEntry& Manifest::require_verified(const std::string& kind) const {
  const ArtifactEntry* e = find(kind);
  if (e == nullptr)
    throw dependency_error("manifest: missing artifact '" + kind +
                           "' (run the producing command first)");
  const std::string actual = hash_file(e->path);
  if (actual != e->content_hash)
    throw corruption_error("manifest: content hash mismatch for artifact '" + kind +
                           "' at " + e->path);
  return *e;
}

signboard::OcrChannel make_channel(const OcrConfig& cfg) {
  return signboard::OcrChannel::uniform(cfg.p_sub, cfg.p_delete, cfg.p_insert,
                                        cfg.seed);
}

signboard::NameCorrector fit_corrector_from_corpus(const model::Corpus& corpus,
                                                   const signboard::OcrChannel& ch) {
  std::unordered_map<std::uint64_t, const model::PoiRecord*> by_id;
  by_id.reserve(corpus.pois.size());
  for (const auto& poi : corpus.pois) by_id.emplace(poi.id, &poi);

  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(corpus.count_submissions(model::Split::train));
  for (const auto& sub : corpus.submissions) {
    if (sub.split != model::Split::train) continue;
    const auto& poi = *by_id.at(sub.truth_id);
    pairs.emplace_back(ocr_read(sub.signboard, poi.name, ch), poi.name);
  }

  std::map<std::string, double> freq;
  for (const auto& poi : corpus.pois) freq[poi.name] += 1.0;
  std::vector<signboard::LexiconEntry> lexicon;
  lexicon.reserve(freq.size());
  for (const auto& [name, count] : freq) lexicon.push_back({name, count});
  return signboard::fit_corrector(pairs, std::move(lexicon));
}

Workbench Workbench::load(const RunConfig& cfg, bool need_embedding_side,
                          bool need_staged_side) {
  Workbench wb;
  wb.cfg = cfg;
  const Manifest manifest = Manifest::load_or_empty(cfg.paths.resolve(cfg.paths.manifest));

  const auto& corpus_entry = manifest.require_verified("corpus");
  wb.corpus = model::load_corpus_jsonl(corpus_entry.path);
  wb.channel = make_channel(cfg.ocr);

  if (need_staged_side) {
    const auto& spatial_entry = manifest.require_verified("spatial");
    wb.spatial = geoindex::SpatialIndex::load(spatial_entry.path);
    const auto& corrector_entry = manifest.require_verified("corrector");
    wb.corrector = signboard::NameCorrector::load_jsonl(corrector_entry.path);
  }
  if (need_embedding_side || need_staged_side) {
    wb.table = pipeline::NameTable::from_corpus(wb.corpus->pois, true);
  }
  if (need_embedding_side) {
    const auto& params_entry = manifest.require_verified("params");
    wb.params = embedder::EmbedderParams::load(params_entry.path);
    const auto& forest_entry = manifest.require_verified("forest");
    wb.forest = annindex::AnnForest::load(forest_entry.path);
  }
  return wb;
}

evalbench::BenchInputs Workbench::bench_inputs() const {
  evalbench::BenchInputs in;
  in.corpus = corpus ? &*corpus : nullptr;
  in.spatial = spatial ? &*spatial : nullptr;
  in.table = table ? &*table : nullptr;
  in.channel = channel ? &*channel : nullptr;
  in.corrector = corrector ? &*corrector : nullptr;
  in.params = params ? &*params : nullptr;
  in.forest = forest ? &*forest : nullptr;
  in.pipeline_cfg = cfg.pipeline_cfg;
  return in;
}

pipeline::VerificationResult Workbench::verify(
    pipeline::Variant variant, const pipeline::VerificationRequest& req) const {
  const auto inputs = bench_inputs();
  return evalbench::make_variant_fn(variant, inputs)(req);
}

}  // namespace poiverify::runtime
