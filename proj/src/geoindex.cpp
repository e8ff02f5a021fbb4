#include "poiverify/geoindex.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_set>

namespace poiverify::geoindex {

using model::GeoPoint;
using model::haversine_km;

int geohash_char_index(char c) {
  const auto pos = kGeohashAlphabet.find(c);
  return pos == std::string_view::npos ? -1 : static_cast<int>(pos);
}

namespace {

struct CellCoord {
  std::uint64_t x = 0;  // longitude index
  std::uint64_t y = 0;  // latitude index
  int precision = 0;

  int lon_bits() const { return (5 * precision + 1) / 2; }
  int lat_bits() const { return (5 * precision) / 2; }
};

std::uint64_t scale_to_bits(double v, double lo, double hi, int bits) {
  const double frac = (v - lo) / (hi - lo);
  auto idx = static_cast<std::uint64_t>(frac * static_cast<double>(1ULL << bits));
  const std::uint64_t max_idx = (1ULL << bits) - 1;
  return idx > max_idx ? max_idx : idx;
}

CellCoord point_to_cell(const GeoPoint& p, int precision) {
  CellCoord c;
  c.precision = precision;
  c.x = scale_to_bits(p.lon, -180.0, 180.0, c.lon_bits());
  c.y = scale_to_bits(p.lat, -90.0, 90.0, c.lat_bits());
  return c;
}

std::string cell_to_code(const CellCoord& c) {
  const int nbits = 5 * c.precision;
  std::string code;
  code.reserve(c.precision);
  int xi = c.lon_bits();
  int yi = c.lat_bits();
  int digit = 0;
  for (int b = 0; b < nbits; ++b) {
    int bit;
    if (b % 2 == 0) {
      --xi;
      bit = static_cast<int>((c.x >> xi) & 1);
    } else {
      --yi;
      bit = static_cast<int>((c.y >> yi) & 1);
    }
    digit = (digit << 1) | bit;
    if (b % 5 == 4) {
      code.push_back(kGeohashAlphabet[digit]);
      digit = 0;
    }
  }
  return code;
}

CellCoord code_to_cell(const GeoHashCode& code) {
  if (code.code.empty() || code.precision() > kMaxPrecision)
    throw format_error("geohash: bad code length");
  CellCoord c;
  c.precision = code.precision();
  int bit_pos = 0;
  for (char ch : code.code) {
    const int d = geohash_char_index(ch);
    if (d < 0) throw format_error(std::string("geohash: bad character '") + ch + "'");
    for (int b = 4; b >= 0; --b, ++bit_pos) {
      const std::uint64_t bit = (static_cast<std::uint64_t>(d) >> b) & 1;
      if (bit_pos % 2 == 0) {
        c.x = (c.x << 1) | bit;
      } else {
        c.y = (c.y << 1) | bit;
      }
    }
  }
  return c;
}

GeoBox cell_box(const CellCoord& c) {
  const double lon_span = 360.0 / static_cast<double>(1ULL << c.lon_bits());
  const double lat_span = 180.0 / static_cast<double>(1ULL << c.lat_bits());
  GeoBox box;
  box.lon_min = -180.0 + static_cast<double>(c.x) * lon_span;
  box.lon_max = box.lon_min + lon_span;
  box.lat_min = -90.0 + static_cast<double>(c.y) * lat_span;
  box.lat_max = box.lat_min + lat_span;
  return box;
}

// Distance from a point to the nearest point of a lat/lon rectangle.
double min_distance_km(const GeoPoint& center, const GeoBox& box) {
  GeoPoint nearest;
  nearest.lon = std::clamp(center.lon, box.lon_min, box.lon_max);
  nearest.lat = std::clamp(center.lat, box.lat_min, box.lat_max);
  return haversine_km(center, nearest);
}

}  // namespace

GeoHashCode geohash_encode(const GeoPoint& p, int precision) {
  if (precision < 1 || precision > kMaxPrecision)
    throw param_error("geohash_encode: precision must be in [1, 12]");
  if (!model::geo_point_valid(p)) throw param_error("geohash_encode: invalid point");
  return {cell_to_code(point_to_cell(p, precision))};
}

GeoBox geohash_decode_cell(const GeoHashCode& code) {
  return cell_box(code_to_cell(code));
}

SpatialIndex::SpatialIndex(int precision, std::span<const model::PoiRecord> pois) {
  if (pois.empty()) throw param_error("build_spatial_index: no POIs");
  if (precision < 1 || precision > kMaxPrecision)
    throw param_error("build_spatial_index: precision must be in [1, 12]");
  precision_ = precision;
  buckets_.reserve(pois.size() / 4 + 1);
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(pois.size());
  for (const auto& poi : pois) {
    if (!ids.insert(poi.id).second)
      throw integrity_error("spatial index: duplicate id " + std::to_string(poi.id));
    insert(poi.id, poi.location);
  }
}

void SpatialIndex::insert(std::uint64_t id, const GeoPoint& loc) {
  if (!model::geo_point_valid(loc))
    throw integrity_error("spatial index: invalid location for id " + std::to_string(id));
  buckets_[geohash_encode(loc, precision_).code].push_back({id, loc});
  ++size_;
}

const std::vector<SpatialIndex::Entry>* SpatialIndex::bucket(
    const GeoHashCode& code) const {
  const auto it = buckets_.find(code.code);
  return it == buckets_.end() ? nullptr : &it->second;
}

const GeoPoint* SpatialIndex::location(std::uint64_t id) const {
  for (const auto& [code, entries] : buckets_)
    for (const auto& e : entries)
      if (e.id == id) return &e.location;
  return nullptr;
}

std::vector<std::uint64_t> SpatialIndex::radius_query(const GeoPoint& center,
                                                      double r_km) const {
  if (r_km <= 0.0) throw param_error("radius_query: r_km must be positive");
  if (!model::geo_point_valid(center)) throw param_error("radius_query: invalid center");

  constexpr double deg_per_rad = 57.29577951308232;
  const double dlat_deg = r_km / model::kEarthRadiusKm * deg_per_rad;
  const double lat_reach = std::max(std::abs(center.lat - dlat_deg),
                                    std::abs(center.lat + dlat_deg));
  if (lat_reach > 85.0)
    throw param_error("radius_query: polar-cap queries beyond |lat| > 85 unsupported");
  const double cos_floor = std::cos((lat_reach / deg_per_rad));
  const double dlon_deg = dlat_deg / cos_floor;
  if (center.lon - dlon_deg <= -180.0 || center.lon + dlon_deg >= 180.0)
    throw param_error("radius_query: circle crosses the antimeridian");

  const CellCoord origin = point_to_cell(center, precision_);
  const std::uint64_t x_max = (1ULL << origin.lon_bits()) - 1;
  const std::uint64_t y_max = (1ULL << origin.lat_bits()) - 1;
  const double cell_lon_span = 360.0 / static_cast<double>(1ULL << origin.lon_bits());
  const double cell_lat_span = 180.0 / static_cast<double>(1ULL << origin.lat_bits());
  // ring count sufficient to cover the bounding box of the circle
  const long k_cap = 2 + static_cast<long>(std::ceil(
                             std::max(dlon_deg / cell_lon_span, dlat_deg / cell_lat_span)));

  std::vector<std::pair<double, std::uint64_t>> hits;
  auto visit_cell = [&](long cx, long cy) -> bool {
    if (cx < 0 || cy < 0 || cx > static_cast<long>(x_max) ||
        cy > static_cast<long>(y_max))
      return false;
    CellCoord cell{static_cast<std::uint64_t>(cx), static_cast<std::uint64_t>(cy),
                   precision_};
    if (min_distance_km(center, cell_box(cell)) > r_km) return false;
    if (const auto it = buckets_.find(cell_to_code(cell)); it != buckets_.end()) {
      for (const Entry& e : it->second) {
        const double d = haversine_km(center, e.location);
        if (d <= r_km) hits.emplace_back(d, e.id);
      }
    }
    return true;  // cell intersects the circle, keep expanding past it
  };

  // ring expansion around the center cell; stop once a whole ring misses
  const long ox = static_cast<long>(origin.x);
  const long oy = static_cast<long>(origin.y);
  for (long k = 0; k <= k_cap; ++k) {
    bool any_inside = false;
    if (k == 0) {
      any_inside = visit_cell(ox, oy);
    } else {
      for (long dx = -k; dx <= k; ++dx) {
        any_inside |= visit_cell(ox + dx, oy - k);
        any_inside |= visit_cell(ox + dx, oy + k);
      }
      for (long dy = -k + 1; dy <= k - 1; ++dy) {
        any_inside |= visit_cell(ox - k, oy + dy);
        any_inside |= visit_cell(ox + k, oy + dy);
      }
    }
    if (!any_inside && k > 0) break;
  }

  std::sort(hits.begin(), hits.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  std::vector<std::uint64_t> ids;
  ids.reserve(hits.size());
  for (const auto& [d, id] : hits) ids.push_back(id);
  return ids;
}

namespace {
constexpr char kSpatialMagic[4] = {'P', 'V', 'S', 'I'};
constexpr std::uint32_t kSpatialVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in.good()) throw corruption_error("spatial index: truncated file");
}
}  // namespace

void SpatialIndex::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  f.write(kSpatialMagic, 4);
  write_pod(f, kSpatialVersion);
  write_pod(f, static_cast<std::uint32_t>(precision_));
  write_pod(f, static_cast<std::uint64_t>(size_));
  // deterministic order for reproducible bytes
  std::vector<const Entry*> entries;
  entries.reserve(size_);
  for (const auto& [code, bucket] : buckets_)
    for (const Entry& e : bucket) entries.push_back(&e);
  std::sort(entries.begin(), entries.end(),
            [](const Entry* a, const Entry* b) { return a->id < b->id; });
  for (const Entry* e : entries) {
    write_pod(f, e->id);
    write_pod(f, e->location.lon);
    write_pod(f, e->location.lat);
  }
  if (!f.good()) throw format_error("write failed: " + path);
}

SpatialIndex SpatialIndex::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dependency_error("cannot open spatial index: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f.good() || std::memcmp(magic, kSpatialMagic, 4) != 0)
    throw corruption_error("spatial index: bad magic");
  std::uint32_t version = 0, precision = 0;
  read_pod(f, version);
  if (version != kSpatialVersion)
    throw corruption_error("spatial index: unsupported version");
  read_pod(f, precision);
  std::uint64_t count = 0;
  read_pod(f, count);
  SpatialIndex idx;
  idx.precision_ = static_cast<int>(precision);
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint64_t id = 0;
    GeoPoint loc;
    read_pod(f, id);
    read_pod(f, loc.lon);
    read_pod(f, loc.lat);
    if (!ids.insert(id).second)
      throw corruption_error("spatial index: duplicate id in file");
    idx.insert(id, loc);
  }
  return idx;
}

}  // namespace poiverify::geoindex
