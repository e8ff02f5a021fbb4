#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "poiverify/model.hpp"

namespace poiverify::signboard {

// A production OCR stack (detection, segmentation, recognition) collapsed
// into one stochastic channel over glyph strings: per-glyph substitution via a
// row-stochastic confusion matrix, plus independent deletions and insertions.
struct OcrChannel {
  std::vector<double> confusion;  // kGlyphCount x kGlyphCount, row major
  double p_delete = 0.0;
  double p_insert = 0.0;
  std::uint64_t seed = 0;

  double confusion_at(int truth, int emitted) const {
    return confusion[static_cast<std::size_t>(truth) * model::kGlyphCount + emitted];
  }

  // identity diagonal 1-p_sub, off-diagonal mass spread uniformly
  static OcrChannel uniform(double p_sub, double p_delete, double p_insert,
                            std::uint64_t seed);
  static OcrChannel identity(std::uint64_t seed = 0) {
    return uniform(0.0, 0.0, 0.0, seed);
  }

  void validate() const;  // throws param_error
};

// Corrupts the depicted name through the channel. Deterministic for fixed
// (image, name, channel): the rng stream is derived from the channel seed and
// both inputs, so repeated verification of one request reproduces itself.
std::string ocr_read(const model::SignboardImage& img, std::string_view truth_name,
                     const OcrChannel& ch);

struct LexiconEntry {
  std::string name;
  double freq = 1.0;
};

// Noisy-channel name corrector: argmax over lexicon entries of
// P(entry) * P(noisy | entry), likelihood scored by best edit alignment under
// the estimated channel.
class NameCorrector {
 public:
  NameCorrector(std::vector<LexiconEntry> lexicon, std::vector<double> confusion,
                double p_delete, double p_insert);

  const std::vector<LexiconEntry>& lexicon() const { return lexicon_; }
  double confusion_at(int truth, int emitted) const {
    return confusion_[static_cast<std::size_t>(truth) * model::kGlyphCount + emitted];
  }
  double p_delete() const { return p_delete_; }
  double p_insert() const { return p_insert_; }

  double log_prior(std::size_t entry_index) const;
  double log_likelihood(std::string_view noisy, std::string_view entry) const;

  // Candidate order for beam pruning: first-glyph bucket within +-2 length
  // band, then remaining length-band entries, then everything else; frequency
  // descending inside each tier.
  std::vector<std::size_t> candidate_order(std::string_view noisy,
                                           std::size_t limit) const;

  void save_jsonl(std::ostream& out) const;
  void save_jsonl(const std::string& path) const;
  static NameCorrector load_jsonl(std::istream& in);
  static NameCorrector load_jsonl(const std::string& path);

 private:
  std::vector<LexiconEntry> lexicon_;  // freq desc, name asc
  std::vector<double> confusion_;      // add-one smoothed rows
  double p_delete_ = 0.0;
  double p_insert_ = 0.0;
  double total_freq_ = 0.0;
  std::array<std::vector<std::size_t>, model::kGlyphCount> first_glyph_buckets_;
};

// Maximum-likelihood channel estimate from character-aligned (noisy, true)
// pairs; alignment by minimum edit distance, ties preferring substitution
// over indels; add-one smoothing.
NameCorrector fit_corrector(
    std::span<const std::pair<std::string, std::string>> noisy_true_pairs,
    std::vector<LexiconEntry> lexicon);

struct Correction {
  std::string name;
  double log_posterior = 0.0;
};

// beam >= lexicon size degenerates to exhaustive posterior maximization.
Correction correct_name(std::string_view noisy, const NameCorrector& corrector,
                        std::size_t beam);

inline constexpr int kOutlineFeatureDim = 64;

// 8x8 block means of Sobel gradient magnitude, flattened and L2-normalized.
// Constant images yield the all-zero vector (cosine 0 to everything).
std::array<double, kOutlineFeatureDim> outline_feature(const model::SignboardImage& img);

double cosine(std::span<const double> a, std::span<const double> b);

}  // namespace poiverify::signboard
