#include "poiverify/signboard.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <ostream>

#include "json.hpp"

namespace poiverify::signboard {

using model::kGlyphCount;
using nlohmann::json;

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }
}  // namespace

OcrChannel OcrChannel::uniform(double p_sub, double p_delete, double p_insert,
                               std::uint64_t seed) {
  if (p_sub < 0.0 || p_sub > 1.0 || p_delete < 0.0 || p_delete > 1.0 ||
      p_insert < 0.0 || p_insert > 1.0)
    throw param_error("OcrChannel: probabilities must be in [0, 1]");
  OcrChannel ch;
  ch.p_delete = p_delete;
  ch.p_insert = p_insert;
  ch.seed = seed;
  ch.confusion.assign(static_cast<std::size_t>(kGlyphCount) * kGlyphCount,
                      p_sub / (kGlyphCount - 1));
  for (int g = 0; g < kGlyphCount; ++g)
    ch.confusion[static_cast<std::size_t>(g) * kGlyphCount + g] = 1.0 - p_sub;
  return ch;
}

void OcrChannel::validate() const {
  if (confusion.size() != static_cast<std::size_t>(kGlyphCount) * kGlyphCount)
    throw param_error("OcrChannel: confusion matrix must be 64x64");
  for (int g = 0; g < kGlyphCount; ++g) {
    double row = 0.0;
    for (int h = 0; h < kGlyphCount; ++h) {
      const double p = confusion_at(g, h);
      if (p < 0.0 || p > 1.0) throw param_error("OcrChannel: probability out of range");
      row += p;
    }
    if (std::abs(row - 1.0) > 1e-9)
      throw param_error("OcrChannel: confusion row does not sum to 1");
  }
  if (p_delete < 0.0 || p_delete > 1.0 || p_insert < 0.0 || p_insert > 1.0)
    throw param_error("OcrChannel: probability out of range");
}

std::string ocr_read(const model::SignboardImage& img, std::string_view truth_name,
                     const OcrChannel& ch) {
  if (!model::name_valid(truth_name))
    throw param_error("ocr_read: name outside the glyph alphabet");
  Rng rng(mix_seed(mix_seed(ch.seed, fnv1a64(truth_name)),
                   fnv1a64(std::span<const std::uint8_t>(img.pixels))));

  std::string out;
  out.reserve(truth_name.size() + 4);
  auto maybe_insert = [&] {
    if (ch.p_insert > 0.0 && rng.next_double() < ch.p_insert)
      out.push_back(model::kGlyphAlphabet[rng.next_below(kGlyphCount)]);
  };
  for (char c : truth_name) {
    maybe_insert();
    if (ch.p_delete > 0.0 && rng.next_double() < ch.p_delete) continue;
    const int g = model::glyph_index(c);
    double u = rng.next_double();
    int emitted = kGlyphCount - 1;
    for (int h = 0; h < kGlyphCount; ++h) {
      u -= ch.confusion_at(g, h);
      if (u < 0.0) {
        emitted = h;
        break;
      }
    }
    out.push_back(model::kGlyphAlphabet[emitted]);
  }
  maybe_insert();
  if (out.size() > model::kMaxNameGlyphs) out.resize(model::kMaxNameGlyphs);
  return out;
}

NameCorrector::NameCorrector(std::vector<LexiconEntry> lexicon,
                             std::vector<double> confusion, double p_delete,
                             double p_insert)
    : lexicon_(std::move(lexicon)),
      confusion_(std::move(confusion)),
      p_delete_(p_delete),
      p_insert_(p_insert) {
  if (confusion_.size() != static_cast<std::size_t>(kGlyphCount) * kGlyphCount)
    throw param_error("NameCorrector: confusion matrix must be 64x64");
  std::sort(lexicon_.begin(), lexicon_.end(), [](const auto& a, const auto& b) {
    if (a.freq != b.freq) return a.freq > b.freq;
    return a.name < b.name;
  });
  for (const auto& e : lexicon_) {
    if (!model::name_valid(e.name))
      throw param_error("NameCorrector: lexicon entry outside alphabet");
    if (e.freq <= 0.0) throw param_error("NameCorrector: nonpositive frequency");
    total_freq_ += e.freq;
  }
  for (std::size_t i = 0; i < lexicon_.size(); ++i)
    first_glyph_buckets_[model::glyph_index(lexicon_[i].name[0])].push_back(i);
}

double NameCorrector::log_prior(std::size_t entry_index) const {
  return std::log(lexicon_[entry_index].freq / total_freq_);
}

double NameCorrector::log_likelihood(std::string_view noisy,
                                     std::string_view entry) const {
  const std::size_t n = entry.size();
  const std::size_t m = noisy.size();
  const double log_del = safe_log(p_delete_);
  const double log_ins = safe_log(p_insert_ / kGlyphCount);
  const double log_keep = safe_log(1.0 - p_delete_);

  // dp[j]: best log prob of aligning entry[0..i) to noisy[0..j)
  std::vector<double> dp(m + 1), prev(m + 1);
  prev[0] = 0.0;
  for (std::size_t j = 1; j <= m; ++j) prev[j] = prev[j - 1] + log_ins;
  for (std::size_t i = 1; i <= n; ++i) {
    const int g = model::glyph_index(entry[i - 1]);
    dp[0] = prev[0] + log_del;
    for (std::size_t j = 1; j <= m; ++j) {
      const int h = model::glyph_index(noisy[j - 1]);
      const double emit = prev[j - 1] + log_keep + safe_log(confusion_at(g, h));
      const double del = prev[j] + log_del;
      const double ins = dp[j - 1] + log_ins;
      dp[j] = std::max(emit, std::max(del, ins));
    }
    std::swap(dp, prev);
  }
  return prev[m];
}

std::vector<std::size_t> NameCorrector::candidate_order(std::string_view noisy,
                                                        std::size_t limit) const {
  std::vector<std::size_t> order;
  order.reserve(std::min(limit, lexicon_.size()));
  std::vector<char> taken(lexicon_.size(), 0);
  const auto len = static_cast<long>(noisy.size());
  auto in_band = [&](std::size_t i) {
    const long d = static_cast<long>(lexicon_[i].name.size()) - len;
    return d >= -2 && d <= 2;
  };
  auto push = [&](std::size_t i) {
    if (order.size() < limit && !taken[i]) {
      taken[i] = 1;
      order.push_back(i);
    }
  };

  if (!noisy.empty()) {
    const int g = model::glyph_index(noisy[0]);
    if (g >= 0)
      for (const std::size_t i : first_glyph_buckets_[g])
        if (in_band(i)) push(i);
  }
  for (std::size_t i = 0; i < lexicon_.size() && order.size() < limit; ++i)
    if (in_band(i)) push(i);
  for (std::size_t i = 0; i < lexicon_.size() && order.size() < limit; ++i) push(i);
  return order;
}

NameCorrector fit_corrector(
    std::span<const std::pair<std::string, std::string>> noisy_true_pairs,
    std::vector<LexiconEntry> lexicon) {
  if (noisy_true_pairs.empty()) throw param_error("fit_corrector: no pairs");

  std::vector<double> sub_counts(static_cast<std::size_t>(kGlyphCount) * kGlyphCount,
                                 0.0);
  double del_events = 0.0, ins_events = 0.0, true_glyphs = 0.0, gaps = 0.0;

  // minimum-edit-distance alignment; on cost ties prefer substitution over indel
  std::vector<int> dist;
  for (const auto& [noisy, truth] : noisy_true_pairs) {
    const std::size_t n = truth.size();
    const std::size_t m = noisy.size();
    dist.assign((n + 1) * (m + 1), 0);
    auto at = [&](std::size_t i, std::size_t j) -> int& { return dist[i * (m + 1) + j]; };
    for (std::size_t i = 0; i <= n; ++i) at(i, 0) = static_cast<int>(i);
    for (std::size_t j = 0; j <= m; ++j) at(0, j) = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i)
      for (std::size_t j = 1; j <= m; ++j) {
        const int sub = at(i - 1, j - 1) + (truth[i - 1] == noisy[j - 1] ? 0 : 1);
        at(i, j) = std::min(sub, std::min(at(i - 1, j), at(i, j - 1)) + 1);
      }
    std::size_t i = n, j = m;
    while (i > 0 || j > 0) {
      if (i > 0 && j > 0 &&
          at(i, j) == at(i - 1, j - 1) + (truth[i - 1] == noisy[j - 1] ? 0 : 1)) {
        const int g = model::glyph_index(truth[i - 1]);
        const int h = model::glyph_index(noisy[j - 1]);
        if (g >= 0 && h >= 0)
          sub_counts[static_cast<std::size_t>(g) * kGlyphCount + h] += 1.0;
        --i;
        --j;
      } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
        del_events += 1.0;
        --i;
      } else {
        ins_events += 1.0;
        --j;
      }
    }
    true_glyphs += static_cast<double>(n);
    gaps += static_cast<double>(n) + 1.0;
  }

  std::vector<double> confusion(sub_counts.size());
  for (int g = 0; g < kGlyphCount; ++g) {
    double row = 0.0;
    for (int h = 0; h < kGlyphCount; ++h)
      row += sub_counts[static_cast<std::size_t>(g) * kGlyphCount + h];
    for (int h = 0; h < kGlyphCount; ++h)
      confusion[static_cast<std::size_t>(g) * kGlyphCount + h] =
          (sub_counts[static_cast<std::size_t>(g) * kGlyphCount + h] + 1.0) /
          (row + kGlyphCount);
  }
  const double p_del = (del_events + 1.0) / (true_glyphs + 2.0);
  const double p_ins = (ins_events + 1.0) / (gaps + 2.0);
  return NameCorrector(std::move(lexicon), std::move(confusion), p_del, p_ins);
}

Correction correct_name(std::string_view noisy, const NameCorrector& corrector,
                        std::size_t beam) {
  if (beam < 1) throw param_error("correct_name: beam must be >= 1");
  if (corrector.lexicon().empty()) throw state_error("correct_name: empty lexicon");

  const auto order = corrector.candidate_order(noisy, beam);
  Correction best;
  best.log_posterior = kNegInf;
  bool have = false;
  for (const std::size_t i : order) {
    const auto& entry = corrector.lexicon()[i];
    const double score =
        corrector.log_prior(i) + corrector.log_likelihood(noisy, entry.name);
    if (!have || score > best.log_posterior ||
        (score == best.log_posterior && entry.name < best.name)) {
      best.name = entry.name;
      best.log_posterior = score;
      have = true;
    }
  }
  return best;
}

std::array<double, kOutlineFeatureDim> outline_feature(
    const model::SignboardImage& img) {
  constexpr int h = model::kSignboardHeight;
  constexpr int w = model::kSignboardWidth;
  constexpr int grid = 8;
  constexpr int bh = h / grid;  // 4
  constexpr int bw = w / grid;  // 16

  std::array<double, kOutlineFeatureDim> feat{};
  for (int r = 1; r < h - 1; ++r) {
    for (int c = 1; c < w - 1; ++c) {
      const double gx = (img.at(r - 1, c + 1) + 2.0 * img.at(r, c + 1) +
                         img.at(r + 1, c + 1)) -
                        (img.at(r - 1, c - 1) + 2.0 * img.at(r, c - 1) +
                         img.at(r + 1, c - 1));
      const double gy = (img.at(r + 1, c - 1) + 2.0 * img.at(r + 1, c) +
                         img.at(r + 1, c + 1)) -
                        (img.at(r - 1, c - 1) + 2.0 * img.at(r - 1, c) +
                         img.at(r - 1, c + 1));
      feat[static_cast<std::size_t>(r / bh) * grid + (c / bw)] +=
          std::sqrt(gx * gx + gy * gy);
    }
  }
  for (auto& v : feat) v /= bh * bw;

  double norm = 0.0;
  for (const double v : feat) norm += v * v;
  norm = std::sqrt(norm);
  if (norm > 0.0)
    for (auto& v : feat) v /= norm;
  return feat;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw param_error("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void NameCorrector::save_jsonl(std::ostream& out) const {
  json header = {{"format", "poiverify.corrector"},
                 {"version", 1},
                 {"n_lexicon", lexicon_.size()}};
  out << header.dump() << '\n';
  out << json{{"t", "chan"}, {"p_del", p_delete_}, {"p_ins", p_insert_}}.dump()
      << '\n';
  for (int g = 0; g < kGlyphCount; ++g) {
    json row = json::array();
    for (int h = 0; h < kGlyphCount; ++h) row.push_back(confusion_at(g, h));
    out << json{{"t", "row"}, {"g", g}, {"p", row}}.dump() << '\n';
  }
  for (const auto& e : lexicon_)
    out << json{{"t", "lex"}, {"name", e.name}, {"freq", e.freq}}.dump() << '\n';
}

void NameCorrector::save_jsonl(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw format_error("cannot open for writing: " + path);
  save_jsonl(f);
  if (!f.good()) throw format_error("write failed: " + path);
}

NameCorrector NameCorrector::load_jsonl(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw format_error("corrector: empty stream");
  json header = json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("format", "") != "poiverify.corrector")
    throw format_error("corrector: bad header line");
  if (header.value("version", 0) != 1)
    throw format_error("corrector: unsupported format version");

  std::vector<LexiconEntry> lexicon;
  std::vector<double> confusion(static_cast<std::size_t>(kGlyphCount) * kGlyphCount,
                                0.0);
  double p_del = 0.0, p_ins = 0.0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw format_error("corrector: malformed json line");
    const std::string type = j.value("t", "");
    if (type == "chan") {
      p_del = j.at("p_del").get<double>();
      p_ins = j.at("p_ins").get<double>();
    } else if (type == "row") {
      const int g = j.at("g").get<int>();
      if (g < 0 || g >= kGlyphCount) throw format_error("corrector: bad row index");
      const auto& row = j.at("p");
      if (row.size() != kGlyphCount) throw format_error("corrector: bad row width");
      for (int h = 0; h < kGlyphCount; ++h)
        confusion[static_cast<std::size_t>(g) * kGlyphCount + h] =
            row[h].get<double>();
    } else if (type == "lex") {
      lexicon.push_back({j.at("name").get<std::string>(), j.at("freq").get<double>()});
    } else {
      throw format_error("corrector: unknown record type");
    }
  }
  return NameCorrector(std::move(lexicon), std::move(confusion), p_del, p_ins);
}

NameCorrector NameCorrector::load_jsonl(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dependency_error("cannot open corrector: " + path);
  return load_jsonl(f);
}

}  // namespace poiverify::signboard
