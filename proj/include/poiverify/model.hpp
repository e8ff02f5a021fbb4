#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "poiverify/util.hpp"

namespace poiverify::model {

inline constexpr double kEarthRadiusKm = 6371.0088;

struct GeoPoint {
  double lon = 0.0;  // degrees, (-180, 180)
  double lat = 0.0;  // degrees, (-90, 90)

  bool operator==(const GeoPoint&) const = default;
};

bool geo_point_valid(const GeoPoint& p);

// Great-circle distance on the mean-radius sphere.
double haversine_km(const GeoPoint& a, const GeoPoint& b);

// Signboard raster: fixed 32x128 grayscale, intensities quantized to bytes.
// at() exposes the [0,1] intensity the rest of the system works with.
inline constexpr int kSignboardHeight = 32;
inline constexpr int kSignboardWidth = 128;

struct SignboardImage {
  std::vector<std::uint8_t> pixels;  // row major, kSignboardHeight * kSignboardWidth

  SignboardImage() : pixels(kSignboardHeight * kSignboardWidth, 0) {}

  double at(int row, int col) const {
    return pixels[static_cast<std::size_t>(row) * kSignboardWidth + col] / 255.0;
  }
  void set(int row, int col, double intensity);

  bool operator==(const SignboardImage&) const = default;
};

// 64-glyph alphabet POI names are written over.
inline constexpr std::string_view kGlyphAlphabet =
    "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ-_";
inline constexpr int kGlyphCount = 64;
inline constexpr int kMaxNameGlyphs = 32;

// -1 if the character is outside the alphabet
int glyph_index(char c);
bool name_valid(std::string_view name);

// 8x8 bitmap of one glyph, row major booleans.
const std::array<std::uint8_t, 8>& glyph_bitmap(int glyph);

struct PoiRecord {
  std::uint64_t id = 0;
  std::string name;
  GeoPoint location;
  SignboardImage signboard;
};

enum class Split : std::uint8_t { train, valid, test };

std::string_view split_name(Split s);
Split split_from_name(std::string_view s);  // throws format_error

struct StreetViewSubmission {
  std::uint64_t truth_id = 0;   // used only by evaluation
  GeoPoint shot_location;       // perturbed from the true POI location
  SignboardImage signboard;     // perturbed rendering
  Split split = Split::train;
};

struct Region {
  double lon_min = -0.05, lon_max = 0.05;
  double lat_min = -0.05, lat_max = 0.05;
};

bool region_valid(const Region& r);

struct NoiseParams {
  double pixel_sigma = 0.05;   // additive gaussian, [0,1] intensity scale
  int shift_max_px = 4;        // horizontal shift
  double contrast_min = 0.7;
  double contrast_max = 1.3;
  double jitter_max_km = 0.25; // shot-position deviation radius

  static NoiseParams none() { return {0.0, 0, 1.0, 1.0, 0.0}; }
};

struct CorpusGenConfig {
  std::uint64_t seed = 1;
  int n_pois = 500;           // train/valid POIs
  int views_per_poi = 4;      // train submissions per POI
  int valid_views_per_poi = -1;  // -1: views_per_poi / 2
  double test_poi_ratio = 0.24;  // extra disjoint POIs, as fraction of n_pois
  int test_views_per_poi = -1;   // -1: round(1.5 * views_per_poi)
  Region region;
  NoiseParams noise;
  double duplicate_name_rate = 0.08;  // fraction of POIs sharing a name
  double duplicate_pair_max_km = 0.6; // duplicate partner placed this close
  int name_len_min = 3;
  int name_len_max = 12;
};

struct Corpus {
  std::vector<PoiRecord> pois;
  std::vector<Split> poi_split;  // Split::train for shared train/valid POIs
  std::vector<StreetViewSubmission> submissions;

  std::size_t count_pois(Split s) const;
  std::size_t count_submissions(Split s) const;
  const PoiRecord* find_poi(std::uint64_t id) const;
};

// Deterministic synthetic world standing in for a street-view submission corpus.
// Train/valid submissions share POIs; test POIs are disjoint.
Corpus generate_corpus(const CorpusGenConfig& cfg);

// Canonical rendering of a name with a per-POI deterministic style
// (offset, ink, background), so same-name POIs still differ in pixels.
SignboardImage render_signboard(std::string_view name, std::uint64_t style_seed);

SignboardImage perturb_signboard(const SignboardImage& canonical,
                                 const NoiseParams& noise, Rng& rng);

inline constexpr int kCorpusFormatVersion = 1;

// Line-delimited JSON, one record per line, version header first.
void save_corpus_jsonl(const Corpus& corpus, std::ostream& out);
void save_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus load_corpus_jsonl(std::istream& in);
Corpus load_corpus_jsonl(const std::string& path);

}  // namespace poiverify::model
