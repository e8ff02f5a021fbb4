#include "poiverify/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

namespace poiverify {

std::string hex_u64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

namespace {
constexpr std::string_view kB64 =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  return -1;
}
}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  while (i + 3 <= bytes.size()) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
    i += 3;
  }
  const std::size_t rem = bytes.size() - i;
  if (rem == 1) {
    const std::uint32_t v = bytes[i] << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rem == 2) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw format_error("base64: length not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int pad = 0;
    std::uint32_t v = 0;
    for (int j = 0; j < 4; ++j) {
      const char c = text[i + j];
      if (c == '=') {
        if (i + 4 != text.size() || j < 2) throw format_error("base64: misplaced padding");
        ++pad;
        v <<= 6;
        continue;
      }
      if (pad > 0) throw format_error("base64: data after padding");
      const int d = b64_value(c);
      if (d < 0) throw format_error("base64: invalid character");
      v = (v << 6) | static_cast<std::uint32_t>(d);
    }
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

}  // namespace poiverify

namespace poiverify::model {

using nlohmann::json;

bool geo_point_valid(const GeoPoint& p) {
  return std::isfinite(p.lon) && std::isfinite(p.lat) && p.lon > -180.0 &&
         p.lon < 180.0 && p.lat > -90.0 && p.lat < 90.0;
}

double haversine_km(const GeoPoint& a, const GeoPoint& b) {
  constexpr double deg = 0.017453292519943295;  // pi / 180
  const double lat1 = a.lat * deg;
  const double lat2 = b.lat * deg;
  const double dlat = (b.lat - a.lat) * deg;
  const double dlon = (b.lon - a.lon) * deg;
  const double sl = std::sin(dlat / 2.0);
  const double so = std::sin(dlon / 2.0);
  const double h = sl * sl + std::cos(lat1) * std::cos(lat2) * so * so;
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(h)));
}

void SignboardImage::set(int row, int col, double intensity) {
  const double v = std::clamp(intensity, 0.0, 1.0);
  pixels[static_cast<std::size_t>(row) * kSignboardWidth + col] =
      static_cast<std::uint8_t>(std::lround(v * 255.0));
}

int glyph_index(char c) {
  const auto pos = kGlyphAlphabet.find(c);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

bool name_valid(std::string_view name) {
  if (name.empty() || name.size() > kMaxNameGlyphs) return false;
  return std::all_of(name.begin(), name.end(),
                     [](char c) { return glyph_index(c) >= 0; });
}

namespace {

// Stroke-built glyph: bars, diagonals and dots rather than iid noise, so
// different glyphs differ in edge structure and ink density the way real
// typefaces do.
std::array<std::uint8_t, 8> draw_glyph(Rng& rng) {
  std::array<std::uint8_t, 8> bits{};
  const int n_hbars = 1 + static_cast<int>(rng.next_below(2));
  for (int s = 0; s < n_hbars; ++s) {
    const int row = static_cast<int>(rng.next_below(8));
    const int from = static_cast<int>(rng.next_below(4));
    const int to = 4 + static_cast<int>(rng.next_below(4));
    for (int c = from; c <= to; ++c) bits[row] |= static_cast<std::uint8_t>(1u << c);
  }
  const int n_vbars = 1 + static_cast<int>(rng.next_below(2));
  for (int s = 0; s < n_vbars; ++s) {
    const int col = static_cast<int>(rng.next_below(8));
    const int from = static_cast<int>(rng.next_below(4));
    const int to = 4 + static_cast<int>(rng.next_below(4));
    for (int r = from; r <= to; ++r) bits[r] |= static_cast<std::uint8_t>(1u << col);
  }
  if (rng.next_below(2) == 0) {
    const bool anti = rng.next_below(2) == 0;
    for (int r = 0; r < 8; ++r)
      bits[r] |= static_cast<std::uint8_t>(1u << (anti ? 7 - r : r));
  }
  const int n_dots = static_cast<int>(rng.next_below(5));
  for (int s = 0; s < n_dots; ++s)
    bits[rng.next_below(8)] |= static_cast<std::uint8_t>(1u << rng.next_below(8));
  return bits;
}

}  // namespace

const std::array<std::uint8_t, 8>& glyph_bitmap(int glyph) {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 8>, kGlyphCount> t{};
    for (int g = 0; g < kGlyphCount; ++g) {
      std::uint64_t salt = 0;
      for (;;) {
        Rng rng(mix_seed(0x676c797068ULL + salt, static_cast<std::uint64_t>(g)));
        t[g] = draw_glyph(rng);
        bool distinct = true;
        for (int h = 0; h < g; ++h)
          if (t[h] == t[g]) distinct = false;
        if (distinct) break;
        ++salt;
      }
    }
    return t;
  }();
  return table[glyph];
}

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  throw state_error("unknown split");
}

Split split_from_name(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "valid") return Split::valid;
  if (s == "test") return Split::test;
  throw format_error("unknown split tag: " + std::string(s));
}

bool region_valid(const Region& r) {
  return r.lon_min < r.lon_max && r.lat_min < r.lat_max &&
         geo_point_valid({r.lon_min, r.lat_min}) &&
         geo_point_valid({r.lon_max, r.lat_max});
}

std::size_t Corpus::count_pois(Split s) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < pois.size(); ++i)
    if (poi_split[i] == s) ++n;
  return n;
}

std::size_t Corpus::count_submissions(Split s) const {
  std::size_t n = 0;
  for (const auto& sub : submissions)
    if (sub.split == s) ++n;
  return n;
}

const PoiRecord* Corpus::find_poi(std::uint64_t id) const {
  for (const auto& p : pois)
    if (p.id == id) return &p;
  return nullptr;
}

SignboardImage render_signboard(std::string_view name, std::uint64_t style_seed) {
  Rng rng(style_seed);
  const int advance = 10;  // 8 px glyph + 2 px spacing
  const int text_w = static_cast<int>(name.size()) * advance - 2;
  const int slack_x = std::max(1, kSignboardWidth - text_w - 1);
  const int start_x = static_cast<int>(rng.next_below(std::min(slack_x, 9)));
  const int start_y = 4 + static_cast<int>(rng.next_below(17));
  const double ink = 0.75 + 0.25 * rng.next_double();
  const double bg = 0.05 + 0.10 * rng.next_double();

  SignboardImage img;
  for (int r = 0; r < kSignboardHeight; ++r)
    for (int c = 0; c < kSignboardWidth; ++c) img.set(r, c, bg);

  int x = start_x;
  for (char ch : name) {
    const int g = glyph_index(ch);
    if (g < 0) throw param_error("render_signboard: glyph outside alphabet");
    const auto& bits = glyph_bitmap(g);
    for (int r = 0; r < 8; ++r) {
      for (int c = 0; c < 8; ++c) {
        if ((bits[r] >> c) & 1) {
          const int rr = start_y + r;
          const int cc = x + c;
          if (rr >= 0 && rr < kSignboardHeight && cc >= 0 && cc < kSignboardWidth)
            img.set(rr, cc, ink);
        }
      }
    }
    x += advance;
  }
  return img;
}

SignboardImage perturb_signboard(const SignboardImage& canonical,
                                 const NoiseParams& noise, Rng& rng) {
  int shift = 0;
  if (noise.shift_max_px > 0) {
    shift = static_cast<int>(rng.next_below(2 * noise.shift_max_px + 1)) -
            noise.shift_max_px;
  }
  const double contrast = (noise.contrast_min == noise.contrast_max)
                              ? noise.contrast_min
                              : rng.next_in(noise.contrast_min, noise.contrast_max);

  SignboardImage out;
  for (int r = 0; r < kSignboardHeight; ++r) {
    for (int c = 0; c < kSignboardWidth; ++c) {
      const int src_c = std::clamp(c - shift, 0, kSignboardWidth - 1);
      double v = canonical.at(r, src_c) * contrast;
      if (noise.pixel_sigma > 0.0) v += noise.pixel_sigma * rng.next_gaussian();
      out.set(r, c, v);
    }
  }
  return out;
}

namespace {

std::string random_name(Rng& rng, int len_min, int len_max) {
  const int len = len_min + static_cast<int>(rng.next_below(
                                static_cast<std::uint64_t>(len_max - len_min + 1)));
  std::string s(len, 'a');
  for (auto& c : s) c = kGlyphAlphabet[rng.next_below(kGlyphCount)];
  return s;
}

GeoPoint random_point(Rng& rng, const Region& reg) {
  return {rng.next_in(reg.lon_min, reg.lon_max),
          rng.next_in(reg.lat_min, reg.lat_max)};
}

// Point at most max_km from base, clamped into the region.
GeoPoint nearby_point(Rng& rng, const GeoPoint& base, double max_km,
                      const Region& reg) {
  constexpr double deg = 57.29577951308232;  // 180 / pi
  const double dist = max_km * std::sqrt(rng.next_double());
  const double theta = rng.next_double() * 6.283185307179586;
  const double dn = dist * std::cos(theta);
  const double de = dist * std::sin(theta);
  GeoPoint p;
  p.lat = base.lat + dn / kEarthRadiusKm * deg;
  p.lon = base.lon + de / (kEarthRadiusKm * std::cos(base.lat / deg)) * deg;
  p.lat = std::clamp(p.lat, reg.lat_min, reg.lat_max);
  p.lon = std::clamp(p.lon, reg.lon_min, reg.lon_max);
  return p;
}

GeoPoint jittered_location(Rng& rng, const GeoPoint& truth, double jitter_max_km) {
  if (jitter_max_km <= 0.0) return truth;
  constexpr double deg = 57.29577951308232;
  const double dist = jitter_max_km * std::sqrt(rng.next_double());
  const double theta = rng.next_double() * 6.283185307179586;
  GeoPoint p;
  p.lat = truth.lat + dist * std::cos(theta) / kEarthRadiusKm * deg;
  p.lon = truth.lon +
          dist * std::sin(theta) / (kEarthRadiusKm * std::cos(truth.lat / deg)) * deg;
  // sphere vs planar step can overshoot by a hair; pull back until inside
  while (haversine_km(truth, p) > jitter_max_km) {
    p.lat = truth.lat + (p.lat - truth.lat) * 0.5;
    p.lon = truth.lon + (p.lon - truth.lon) * 0.5;
  }
  return p;
}

}  // namespace

Corpus generate_corpus(const CorpusGenConfig& cfg) {
  if (cfg.n_pois < 1) throw param_error("generate_corpus: n_pois must be >= 1");
  if (cfg.views_per_poi < 1)
    throw param_error("generate_corpus: views_per_poi must be >= 1");
  if (!region_valid(cfg.region)) throw param_error("generate_corpus: invalid region");
  if (cfg.name_len_min < 1 || cfg.name_len_max > kMaxNameGlyphs ||
      cfg.name_len_min > cfg.name_len_max)
    throw param_error("generate_corpus: invalid name length bounds");
  if (cfg.test_poi_ratio < 0.0 || cfg.duplicate_name_rate < 0.0 ||
      cfg.duplicate_name_rate > 1.0)
    throw param_error("generate_corpus: invalid ratio");

  const int valid_views = cfg.valid_views_per_poi >= 0 ? cfg.valid_views_per_poi
                                                       : cfg.views_per_poi / 2;
  const int n_test_pois =
      static_cast<int>(std::lround(cfg.test_poi_ratio * cfg.n_pois));
  const int test_views = cfg.test_views_per_poi >= 0
                             ? cfg.test_views_per_poi
                             : static_cast<int>(std::lround(1.5 * cfg.views_per_poi));

  Corpus corpus;
  const int n_total = cfg.n_pois + n_test_pois;
  corpus.pois.reserve(n_total);
  corpus.poi_split.reserve(n_total);

  Rng name_rng(mix_seed(cfg.seed, 0x6e616d65));
  Rng place_rng(mix_seed(cfg.seed, 0x706c6163));

  std::unordered_set<std::string> used_names;
  used_names.reserve(n_total);
  auto fresh_name = [&] {
    for (;;) {
      std::string n = random_name(name_rng, cfg.name_len_min, cfg.name_len_max);
      if (used_names.insert(n).second) return n;
    }
  };

  // Names and locations per split universe. A duplicate_name_rate fraction of
  // POIs come in same-name pairs placed near each other, which is what forces
  // the name-tie ranking path downstream.
  auto emit_pois = [&](int count, Split split) {
    const int n_dup_pairs = count >= 2
        ? static_cast<int>(std::lround(cfg.duplicate_name_rate * count / 2.0))
        : 0;
    int emitted = 0;
    while (emitted < count) {
      PoiRecord poi;
      poi.id = corpus.pois.size() + 1;
      const bool start_pair = emitted + 1 < count &&
                              (emitted / 2) < n_dup_pairs && emitted % 2 == 0;
      if (start_pair) {
        poi.name = fresh_name();
        poi.location = random_point(place_rng, cfg.region);
        poi.signboard = render_signboard(poi.name, mix_seed(cfg.seed, poi.id));
        corpus.pois.push_back(poi);
        corpus.poi_split.push_back(split);
        ++emitted;

        PoiRecord twin;
        twin.id = corpus.pois.size() + 1;
        twin.name = poi.name;
        twin.location = nearby_point(place_rng, poi.location,
                                     cfg.duplicate_pair_max_km, cfg.region);
        twin.signboard = render_signboard(twin.name, mix_seed(cfg.seed, twin.id));
        corpus.pois.push_back(twin);
        corpus.poi_split.push_back(split);
        ++emitted;
      } else {
        poi.name = fresh_name();
        poi.location = random_point(place_rng, cfg.region);
        poi.signboard = render_signboard(poi.name, mix_seed(cfg.seed, poi.id));
        corpus.pois.push_back(poi);
        corpus.poi_split.push_back(split);
        ++emitted;
      }
    }
  };

  emit_pois(cfg.n_pois, Split::train);
  emit_pois(n_test_pois, Split::test);

  Rng view_rng(mix_seed(cfg.seed, 0x76696577));
  auto emit_views = [&](const PoiRecord& poi, int count, Split split) {
    for (int v = 0; v < count; ++v) {
      StreetViewSubmission sub;
      sub.truth_id = poi.id;
      sub.split = split;
      sub.shot_location =
          jittered_location(view_rng, poi.location, cfg.noise.jitter_max_km);
      sub.signboard = perturb_signboard(poi.signboard, cfg.noise, view_rng);
      corpus.submissions.push_back(std::move(sub));
    }
  };

  for (std::size_t i = 0; i < corpus.pois.size(); ++i) {
    if (corpus.poi_split[i] == Split::train) {
      emit_views(corpus.pois[i], cfg.views_per_poi, Split::train);
      emit_views(corpus.pois[i], valid_views, Split::valid);
    } else {
      emit_views(corpus.pois[i], test_views, Split::test);
    }
  }
  return corpus;
}

void save_corpus_jsonl(const Corpus& corpus, std::ostream& out) {
  json header = {
      {"format", "poiverify.corpus"},
      {"version", kCorpusFormatVersion},
      {"n_pois", corpus.pois.size()},
      {"n_submissions", corpus.submissions.size()},
  };
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < corpus.pois.size(); ++i) {
    const auto& p = corpus.pois[i];
    json line = {
        {"t", "poi"},
        {"id", p.id},
        {"name", p.name},
        {"lon", p.location.lon},
        {"lat", p.location.lat},
        {"sb", base64_encode(p.signboard.pixels)},
        {"split", split_name(corpus.poi_split[i])},
    };
    out << line.dump() << '\n';
  }
  for (const auto& s : corpus.submissions) {
    json line = {
        {"t", "sub"},
        {"truth", s.truth_id},
        {"lon", s.shot_location.lon},
        {"lat", s.shot_location.lat},
        {"sb", base64_encode(s.signboard.pixels)},
        {"split", split_name(s.split)},
    };
    out << line.dump() << '\n';
  }
}

void save_corpus_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  save_corpus_jsonl(corpus, f);
  if (!f.good()) throw format_error("write failed: " + path);
}

Corpus load_corpus_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw format_error("corpus: empty stream");
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "poiverify.corpus")
    throw format_error("corpus: bad header line");
  if (header.value("version", 0) != kCorpusFormatVersion)
    throw format_error("corpus: unsupported format version");

  Corpus corpus;
  auto decode_image = [](const json& j) {
    SignboardImage img;
    auto bytes = base64_decode(j.get<std::string>());
    if (bytes.size() != img.pixels.size())
      throw format_error("corpus: signboard byte count mismatch");
    img.pixels = std::move(bytes);
    return img;
  };

  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw format_error("corpus: malformed json line");
    const std::string type = j.value("t", "");
    if (type == "poi") {
      PoiRecord p;
      p.id = j.at("id").get<std::uint64_t>();
      p.name = j.at("name").get<std::string>();
      p.location = {j.at("lon").get<double>(), j.at("lat").get<double>()};
      p.signboard = decode_image(j.at("sb"));
      corpus.pois.push_back(std::move(p));
      corpus.poi_split.push_back(split_from_name(j.at("split").get<std::string>()));
    } else if (type == "sub") {
      StreetViewSubmission s;
      s.truth_id = j.at("truth").get<std::uint64_t>();
      s.shot_location = {j.at("lon").get<double>(), j.at("lat").get<double>()};
      s.signboard = decode_image(j.at("sb"));
      s.split = split_from_name(j.at("split").get<std::string>());
      corpus.submissions.push_back(std::move(s));
    } else {
      throw format_error("corpus: unknown record type");
    }
  }
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(corpus.pois.size());
  for (const auto& poi : corpus.pois)
    if (!ids.insert(poi.id).second)
      throw format_error("corpus: duplicate POI id " + std::to_string(poi.id));
  if (corpus.poi_split.size() != corpus.pois.size())
    throw format_error("corpus: split labels out of step with POI records");
  for (const auto& sub : corpus.submissions)
    if (!ids.count(sub.truth_id))
      throw format_error("corpus: submission references unknown POI " +
                         std::to_string(sub.truth_id));
  return corpus;
}

Corpus load_corpus_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open corpus: " + path);
  return load_corpus_jsonl(f);
}

}  // namespace poiverify::model
