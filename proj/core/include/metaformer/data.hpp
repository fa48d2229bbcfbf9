#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaformer/meta.hpp"

namespace metaformer {

struct Sample {
  std::int32_t label = 0;
  std::vector<float> image;  // CHW float pixels
  MetaRecord meta;
};

struct Dataset {
  std::int64_t image_size = 0;
  std::int64_t channels = 3;
  std::int64_t num_classes = 0;
  MetaSchema schema;
  std::vector<Sample> samples;
};

// Configuration of the generated fine-grained world. Classes come in
// consecutive confusable pairs (2i, 2i+1) that share every visual
// parameter and differ only in their meta distributions, so images alone
// cannot separate them but meta can.
struct SyntheticWorldSpec {
  std::int64_t num_classes = 8;
  std::int64_t image_size = 32;
  std::int64_t train_samples = 2000;
  std::int64_t test_samples = 500;
  std::int64_t confusable_pairs = 4;
  double geo_sigma_deg = 5.0;
  double pixel_noise = 0.15;
  bool with_geo = true;
  bool with_datetime = true;
  bool with_text = false;
  std::int64_t text_vocab = 32;
  std::int64_t text_max_len = 6;
  std::int64_t text_word_dim = 16;
  std::int64_t attr_dim = 0;  // > 0 adds an attribute channel
  std::uint64_t seed = 1;

  void validate() const;
  MetaSchema schema() const;
};

// Generating parameters per class, retained so tests can compare model
// behavior against the true world.
struct ClassWorldInfo {
  double lat = 0, lon = 0;      // geo cluster mean (degrees)
  double month0 = 1;            // 3-month seasonal window start
  double hour0 = 0;             // 8-hour activity window start
  int visual_group = 0;         // classes with equal group share visuals
  double orient = 0, freq = 0;  // grating parameters
  double blob_x = 0, blob_y = 0;
  double color[3] = {0, 0, 0};
  std::vector<std::int32_t> signature;  // text signature tokens
  std::vector<float> attributes;        // class attribute prototype
};

struct SyntheticWorld {
  SyntheticWorldSpec spec;
  std::vector<ClassWorldInfo> classes;
  Dataset train, test;
};

// Deterministic for a fixed spec (seed included).
SyntheticWorld generate_synthetic(const SyntheticWorldSpec& spec);

// Dataset container format: "MFDS", u32 version, u64 samples, u32 H, W, C,
// u32 classes, schema descriptor block, then per record: u32 label, f32
// image payload, per-channel meta payload.
void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// Per-class generating parameters as CSV, for map overlays and oracles.
void save_world_summary(const SyntheticWorld& world, const std::string& path);

}  // namespace metaformer
