#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "poiverify/evalbench.hpp"

namespace poiverify::runtime {

// Exit codes the tool reports; one per error class.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitDependency = 2;
inline constexpr int kExitCorruption = 3;
inline constexpr int kExitRuntime = 4;

inline constexpr int kConfigVersion = 1;

struct OcrConfig {
  double p_sub = 0.02;
  double p_delete = 0.005;
  double p_insert = 0.005;
  std::uint64_t seed = 11;
};

struct AnnConfig {
  int n_trees = 16;
  int leaf_cap = 32;
  std::uint64_t seed = 5;
};

struct PathsConfig {
  std::string out_dir = "artifacts";
  std::string corpus = "corpus.jsonl";
  std::string params = "params.bin";
  std::string corrector = "corrector.jsonl";
  std::string forest = "forest.bin";
  std::string spatial = "spatial.bin";
  std::string report = "report.json";
  std::string manifest = "manifest.json";

  std::string resolve(const std::string& name) const { return out_dir + "/" + name; }
};

struct RunConfig {
  model::CorpusGenConfig corpus;
  int geo_precision = 5;
  embedder::Hyper hyper;
  embedder::TrainConfig train;
  OcrConfig ocr;
  AnnConfig ann;
  pipeline::PipelineConfig pipeline_cfg;
  evalbench::BenchConfig bench;
  PathsConfig paths;
};

std::string config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const std::string& text);  // throws format_error
RunConfig load_config_file(const std::string& path);
// fnv1a64 of the canonical json dump
std::string config_fingerprint(const RunConfig& cfg);

std::string hash_file(const std::string& path);  // "fnv1a64:<hex>"

struct ArtifactEntry {
  std::string kind;
  std::string path;
  int format_version = 1;
  std::string content_hash;
  std::string config_fingerprint;
};

// Single source of truth for inter-command dependencies: every artifact a
// command consumes is looked up here and hash-verified before use.
class Manifest {
 public:
  static Manifest load_or_empty(const std::string& path);
  void save(const std::string& path) const;

  void put(ArtifactEntry entry);
  const ArtifactEntry* find(const std::string& kind) const;
  // throws dependency_error when missing, corruption_error on hash mismatch
  const ArtifactEntry& require_verified(const std::string& kind) const;

  const std::map<std::string, ArtifactEntry>& entries() const { return entries_; }

 private:
  std::map<std::string, ArtifactEntry> entries_;
};

// Loaded artifact set wired into pipeline inputs; backing storage owned here.
struct Workbench {
  RunConfig cfg;
  std::optional<model::Corpus> corpus;
  std::optional<geoindex::SpatialIndex> spatial;
  std::optional<pipeline::NameTable> table;
  std::optional<signboard::OcrChannel> channel;
  std::optional<signboard::NameCorrector> corrector;
  std::optional<embedder::EmbedderParams> params;
  std::optional<annindex::AnnForest> forest;

  // Everything needed for the requested variants; verifies manifest hashes.
  static Workbench load(const RunConfig& cfg, bool need_embedding_side,
                        bool need_staged_side);

  evalbench::BenchInputs bench_inputs() const;
  pipeline::VerificationResult verify(pipeline::Variant variant,
                                      const pipeline::VerificationRequest& req) const;
};

signboard::OcrChannel make_channel(const OcrConfig& cfg);

// Fit the corrector from the train split: pairs are (channel-read, truth) for
// every train submission; the lexicon is the archived POI name frequency table.
signboard::NameCorrector fit_corrector_from_corpus(const model::Corpus& corpus,
                                                   const signboard::OcrChannel& ch);

}  // namespace poiverify::runtime
