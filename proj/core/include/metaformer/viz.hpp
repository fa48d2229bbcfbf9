#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaformer/data.hpp"
#include "metaformer/model.hpp"

namespace metaformer {

// Class-probability map over a lat/lon lattice. Row 0 is the northernmost
// band; cell centers are used.
struct GeoGrid {
  std::int64_t rows = 0, cols = 0;
  std::vector<double> probs;  // rows*cols, in [0,1]
  double lat_at(std::int64_t row) const {
    return 90.0 - (static_cast<double>(row) + 0.5) * 180.0 /
                      static_cast<double>(rows);
  }
  double lon_at(std::int64_t col) const {
    return -180.0 + (static_cast<double>(col) + 0.5) * 360.0 /
                        static_cast<double>(cols);
  }
};

// Sweeps the geo channel over the lattice with a fixed visual input: the
// mean training image of `category`, or a blank image. Other meta channels
// stay at the given month/hour (when the schema has them) or the null
// embedding.
GeoGrid spatial_prediction_grid(const MetaFormer& model, const Dataset& data,
                                std::int64_t category, std::int64_t grid_h,
                                std::int64_t grid_w, double month, double hour,
                                bool blank_image, std::int64_t batch = 128);

// Zeroes cells whose mask pixel is 0; the mask is a P5 PGM of equal dims.
void apply_land_mask(GeoGrid& grid, const std::string& pgm_path);

void write_grid_csv(const GeoGrid& grid, const std::string& path);
// P5 PGM, max-normalized to 0..255 (0 = no response).
void write_grid_pgm(const GeoGrid& grid, const std::string& path);

struct RankedToken {
  std::int64_t index = 0;  // vision: grid token index; word: slot index
  double score = 0;        // cosine similarity with the final class token
};

struct SimilarityReport {
  std::vector<RankedToken> top_vision;
  std::vector<RankedToken> top_word;
  // attention of each word token over the vision grid, heads averaged,
  // taken from the last transformer block: [n_words][grid*grid]
  std::vector<std::vector<double>> word_attention;
  std::int64_t grid = 0;
  bool clamped_vision = false, clamped_word = false;
};

// Cosine similarity between the final class token and every vision/word
// token of the last stage, plus per-word attention maps. Needs a class
// token (serial or parallel mode) and, for the word part, a text channel.
SimilarityReport token_similarity_report(const MetaFormer& model,
                                         const Tensor& image,
                                         const MetaRecord& meta,
                                         std::int64_t k_vision = 5,
                                         std::int64_t k_word = 3);

void write_similarity_csv(const SimilarityReport& report,
                          const std::string& path);
// One P5 PGM per word token: <prefix>_word<i>.pgm
void write_word_attention_pgms(const SimilarityReport& report,
                               const std::string& prefix);

}  // namespace metaformer
