#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "poiverify/model.hpp"

namespace poiverify::geoindex {

inline constexpr std::string_view kGeohashAlphabet =
    "0123456789bcdefghjkmnpqrstuvwxyz";
inline constexpr int kMaxPrecision = 12;

// -1 if c is not a geohash digit
int geohash_char_index(char c);

struct GeoHashCode {
  std::string code;

  int precision() const { return static_cast<int>(code.size()); }
  bool operator==(const GeoHashCode&) const = default;
};

struct GeoBox {
  double lon_min = 0, lon_max = 0;
  double lat_min = 0, lat_max = 0;

  bool contains(const model::GeoPoint& p) const {
    return p.lon >= lon_min && p.lon < lon_max && p.lat >= lat_min &&
           p.lat < lat_max;
  }
};

// Standard interleaved-bit geohash: even stream bits longitude, odd bits
// latitude, base-32 grouping of 5 bits per character.
GeoHashCode geohash_encode(const model::GeoPoint& p, int precision);

// Exact lat/lon rectangle of the cell. Throws format_error on bad characters.
GeoBox geohash_decode_cell(const GeoHashCode& code);

// Bucketed index over POI locations; exact radius retrieval via cell cover
// plus haversine post-filter. Buckets carry coordinates inline so the
// post-filter runs without per-candidate lookups.
class SpatialIndex {
 public:
  struct Entry {
    std::uint64_t id;
    model::GeoPoint location;
  };

  SpatialIndex(int precision, std::span<const model::PoiRecord> pois);

  int precision() const { return precision_; }
  std::size_t size() const { return size_; }

  const std::vector<Entry>* bucket(const GeoHashCode& code) const;
  const model::GeoPoint* location(std::uint64_t id) const;

  // All ids with haversine(center, location) <= r_km (closed ball), sorted by
  // distance ascending, ties by id ascending.
  std::vector<std::uint64_t> radius_query(const model::GeoPoint& center,
                                          double r_km) const;

  void save(const std::string& path) const;
  static SpatialIndex load(const std::string& path);

 private:
  SpatialIndex() = default;
  void insert(std::uint64_t id, const model::GeoPoint& loc);

  int precision_ = 5;
  std::size_t size_ = 0;
  std::unordered_map<std::string, std::vector<Entry>> buckets_;
};

inline SpatialIndex build_spatial_index(std::span<const model::PoiRecord> pois,
                                        int precision) {
  return SpatialIndex(precision, pois);
}

}  // namespace poiverify::geoindex
